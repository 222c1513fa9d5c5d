use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Compression, FormatError, Result};
use crate::array::DynArray;
use crate::scalar::Dtype;

/// Semantic type of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Htype {
    Generic,
    Image,
    ClassLabel,
    Bbox,
    Text,
    BinaryMask,
}

impl Htype {
    pub fn name(self) -> &'static str {
        match self {
            Htype::Generic => "generic",
            Htype::Image => "image",
            Htype::ClassLabel => "class_label",
            Htype::Bbox => "bbox",
            Htype::Text => "text",
            Htype::BinaryMask => "binary_mask",
        }
    }
}

impl fmt::Display for Htype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Htype {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        [
            Htype::Generic,
            Htype::Image,
            Htype::ClassLabel,
            Htype::Bbox,
            Htype::Text,
            Htype::BinaryMask,
        ]
        .into_iter()
        .find(|h| h.name() == s)
        .ok_or_else(|| format!("unknown htype `{s}`"))
    }
}

/// Wrapper types layered over an htype.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaType {
    /// Each sample is a sequence of items of the base htype (one extra leading axis).
    Sequence,
    /// Each sample is a URL to externally stored bytes.
    Link,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BboxFormat {
    /// left, top, width, height
    #[default]
    #[serde(rename = "LTWH")]
    Ltwh,
    /// left, top, right, bottom
    #[serde(rename = "LTRB")]
    Ltrb,
}

/// Type contract for one tensor. Serialized verbatim into `tensor_meta.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HtypeSchema {
    pub name: String,
    pub htype: Htype,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<MetaType>,
    pub dtype: Dtype,
    /// Expected rank of a sample; `None` leaves it unconstrained.
    pub ndim: Option<usize>,
    #[serde(default)]
    pub sample_compression: Compression,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox_format: Option<BboxFormat>,
    /// Samples are opaque encoded bytes (e.g. `jpeg`) stored as 1-d uint8.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub passthrough_codec: Option<String>,
}

impl HtypeSchema {
    /// Schema with the default dtype and rank of `htype`.
    pub fn new(name: impl Into<String>, htype: Htype) -> Self {
        let (dtype, ndim) = match htype {
            Htype::Generic => (Dtype::Float32, None),
            Htype::Image => (Dtype::Uint8, Some(3)),
            Htype::ClassLabel => (Dtype::Int32, None),
            Htype::Bbox => (Dtype::Float32, None),
            Htype::Text => (Dtype::Uint8, Some(1)),
            Htype::BinaryMask => (Dtype::Uint8, None),
        };
        HtypeSchema {
            name: name.into(),
            htype,
            meta: None,
            dtype,
            ndim,
            sample_compression: Compression::None,
            bbox_format: (htype == Htype::Bbox).then_some(BboxFormat::Ltwh),
            passthrough_codec: None,
        }
    }

    pub fn with_dtype(mut self, dtype: Dtype) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn with_ndim(mut self, ndim: Option<usize>) -> Self {
        self.ndim = ndim;
        self
    }

    pub fn with_compression(mut self, compression: Compression) -> Self {
        self.sample_compression = compression;
        self
    }

    pub fn with_bbox_format(mut self, format: BboxFormat) -> Self {
        self.bbox_format = Some(format);
        self
    }

    pub fn with_meta(mut self, meta: MetaType) -> Self {
        self.meta = Some(meta);
        self
    }

    pub fn with_passthrough(mut self, codec: impl Into<String>) -> Self {
        self.passthrough_codec = Some(codec.into());
        self
    }

    pub fn is_link(&self) -> bool {
        self.meta == Some(MetaType::Link)
    }

    /// Samples are opaque byte blobs rather than typed arrays.
    pub fn is_opaque(&self) -> bool {
        self.passthrough_codec.is_some() || self.is_link()
    }

    pub fn bbox_format(&self) -> BboxFormat {
        self.bbox_format.unwrap_or_default()
    }

    /// Rank of a stored sample, accounting for the sequence axis.
    pub fn sample_ndim(&self) -> Option<usize> {
        if self.is_opaque() {
            return Some(1);
        }
        let extra = usize::from(self.meta == Some(MetaType::Sequence));
        self.ndim.map(|n| n + extra)
    }

    /// Samples large enough may be split into spatial tiles.
    pub fn is_tileable(&self) -> bool {
        !self.is_opaque()
            && self.meta.is_none()
            && matches!(self.htype, Htype::Generic | Htype::Image | Htype::BinaryMask)
    }

    /// Checks internal consistency of the contract.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FormatError::InvalidSchema(format!("{}: {m}", self.name)));
        if self.name.is_empty()
            || self.name.starts_with('/')
            || self.name.ends_with('/')
            || self.name.split('/').any(|s| s.is_empty() || s == "." || s == "..")
        {
            return bad("tensor names are non-empty slash paths".into());
        }
        match self.htype {
            Htype::Image if self.dtype != Dtype::Uint8 => return bad("image tensors are uint8".into()),
            Htype::Image if self.ndim != Some(3) => return bad("image tensors have rank 3".into()),
            Htype::ClassLabel if !self.dtype.is_integer() => {
                return bad("class labels need an integer dtype".into())
            }
            Htype::Text if self.dtype != Dtype::Uint8 => return bad("text tensors are uint8".into()),
            _ => {}
        }
        if self.bbox_format.is_some() && self.htype != Htype::Bbox {
            return bad("bbox_format only applies to bbox tensors".into());
        }
        if self.is_opaque() && self.dtype != Dtype::Uint8 {
            return bad("opaque samples are uint8 bytes".into());
        }
        Ok(())
    }
}

/// Returns normally iff `sample` satisfies every constraint of `schema`.
///
/// The empty sample (every dimension zero) only needs a matching dtype.
pub fn validate_sample(schema: &HtypeSchema, sample: &DynArray) -> Result<()> {
    if sample.dtype() != schema.dtype {
        return Err(FormatError::DtypeMismatch {
            expected: schema.dtype,
            found: sample.dtype(),
        });
    }
    let shape = sample.shape();
    if shape.iter().all(|&d| d == 0) {
        return Ok(());
    }
    if let Some(expected) = schema.sample_ndim() {
        if shape.len() != expected {
            return Err(FormatError::RankMismatch {
                expected,
                found: shape.len(),
            });
        }
    }
    if schema.is_opaque() {
        return Ok(());
    }
    match schema.htype {
        Htype::Bbox => {
            if shape.last() != Some(&4) {
                return Err(FormatError::HtypeConstraint(format!(
                    "bbox samples need a trailing dimension of 4, got shape {shape:?}"
                )));
            }
        }
        Htype::Text if std::str::from_utf8(&sample.to_le_bytes()).is_err() => {
            return Err(FormatError::HtypeConstraint(
                "text samples must be UTF-8".into(),
            ));
        }
        _ => {}
    }
    Ok(())
}
