use std::path::Path;

use serde_json::{json, Value as Json};
use tensorlake::tql::Value;
use tensorlake::{DatasetView, Snapshot};

use crate::{CliResult, Format};

/// Arrays with more elements than this are summarized instead of printed.
const INLINE_ELEMENTS: usize = 64;

pub fn emit(fmt: Format, value: &Json) {
    match fmt {
        Format::Json => println!("{value}"),
        Format::Table => println!("{}", serde_json::to_string_pretty(value).unwrap()),
    }
}

fn cell(v: &Value) -> Json {
    match v {
        Value::Array(a) if a.len() > INLINE_ELEMENTS => json!({ "shape": a.shape(), "dtype": a.dtype().name() }),
        Value::Mask(m) if m.len() > INLINE_ELEMENTS => json!({ "shape": m.shape(), "dtype": "bool" }),
        other => serde_json::to_value(other).unwrap(),
    }
}

pub fn print_view(fmt: Format, view: &DatasetView) -> CliResult<()> {
    let names: Vec<String> = view.column_names().into_iter().map(String::from).collect();
    let mut rows = Vec::with_capacity(view.len());
    for i in 0..view.len() {
        let values = view.row(i)?;
        rows.push((view.source_row(i)?, values));
    }
    match fmt {
        Format::Json => {
            let out: Vec<Json> = rows
                .iter()
                .map(|(index, values)| {
                    let cells: serde_json::Map<String, Json> =
                        names.iter().cloned().zip(values.iter().map(cell)).collect();
                    json!({ "index": index, "values": cells })
                })
                .collect();
            println!("{}", Json::Array(out));
        }
        Format::Table => {
            println!("index\t{}", names.join("\t"));
            for (index, values) in rows {
                let cells: Vec<String> = values.iter().map(|v| cell(v).to_string()).collect();
                println!("{index}\t{}", cells.join("\t"));
            }
            println!("({} rows)", view.len());
        }
    }
    Ok(())
}

/// Writes `<pos>_<column>.<ext>` per array cell and a `manifest.json`. Returns the file count.
pub fn export(view: &DatasetView, dir: &Path) -> CliResult<usize> {
    std::fs::create_dir_all(dir)?;
    let snap = view.snapshot();
    let names: Vec<String> = view.column_names().into_iter().map(String::from).collect();
    let mut manifest = Vec::new();
    let mut files = 0;
    for pos in 0..view.len() {
        let values = view.row(pos)?;
        let mut entry = serde_json::Map::new();
        entry.insert("index".into(), json!(view.source_row(pos)?));
        for (name, v) in names.iter().zip(&values) {
            let Value::Array(a) = v else {
                entry.insert(name.clone(), serde_json::to_value(v).unwrap());
                continue;
            };
            let codec = snap.schema(name).ok().and_then(|s| s.passthrough_codec.clone());
            let file = format!("{pos}_{name}.{}", codec.as_deref().unwrap_or("bin"));
            std::fs::write(dir.join(&file), a.to_le_bytes())?;
            files += 1;
            entry.insert(
                name.clone(),
                json!({ "file": file, "shape": a.shape(), "dtype": a.dtype().name() }),
            );
        }
        manifest.push(Json::Object(entry));
    }
    let body = json!({ "query": view.query_text(), "commit": view.commit_id(), "rows": manifest });
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&body).unwrap())?;
    Ok(files)
}

pub fn print_stats(fmt: Format, snap: &Snapshot) -> CliResult<()> {
    let mut tensors = Vec::new();
    for name in snap.tensor_names() {
        let layout = snap.chunk_layout(&name)?;
        let schema = snap.schema(&name)?;
        tensors.push(json!({
            "tensor": name,
            "htype": schema.htype.name(),
            "dtype": schema.dtype.name(),
            "rows": snap.len(&name)?,
            "chunks": layout.len(),
            "bytes": layout.iter().map(|c| c.payload_bytes).sum::<u64>(),
            "fragmentation": snap.fragmentation(&name)?,
        }));
    }
    match fmt {
        Format::Json => println!("{}", json!({ "commit": snap.commit_id(), "rows": snap.num_rows(), "tensors": tensors })),
        Format::Table => {
            println!("version {}  rows {}", snap.commit_id(), snap.num_rows());
            println!("{:<16} {:<12} {:<8} {:>10} {:>8} {:>14} {:>6}", "tensor", "htype", "dtype", "rows", "chunks", "bytes", "frag");
            for t in &tensors {
                println!(
                    "{:<16} {:<12} {:<8} {:>10} {:>8} {:>14} {:>6.3}",
                    t["tensor"].as_str().unwrap(),
                    t["htype"].as_str().unwrap(),
                    t["dtype"].as_str().unwrap(),
                    t["rows"],
                    t["chunks"],
                    t["bytes"],
                    t["fragmentation"].as_f64().unwrap(),
                );
            }
        }
    }
    Ok(())
}
