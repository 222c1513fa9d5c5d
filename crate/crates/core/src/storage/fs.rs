use std::fs::{self, File};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use bytes::Bytes;
use rand::Rng;

use super::{ByteRange, Result, StorageError, StorageKey, StorageProvider};

const TMP_MARKER: &str = ".tmp-";

/// Provider that maps keys to files under a root directory.
///
/// Writes go to a temporary sibling file that is renamed into place, so a
/// concurrent reader sees either the old or the new object.
#[derive(Debug, Clone)]
pub struct FileSystemProvider {
    root: PathBuf,
}

impl FileSystemProvider {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| StorageError::io(root.display().to_string(), e))?;
        Ok(FileSystemProvider { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, key: &StorageKey) -> PathBuf {
        key.as_str().split('/').fold(self.root.clone(), |p, seg| p.join(seg))
    }

    fn walk(&self, dir: &Path, rel: &str, out: &mut Vec<String>) -> std::io::Result<()> {
        let entries = match fs::read_dir(dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
            Err(e) => return Err(e),
        };
        for entry in entries {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let child = if rel.is_empty() {
                name.clone()
            } else {
                format!("{rel}/{name}")
            };
            if entry.file_type()?.is_dir() {
                self.walk(&entry.path(), &child, out)?;
            } else if !name.contains(TMP_MARKER) {
                out.push(child);
            }
        }
        Ok(())
    }
}

impl StorageProvider for FileSystemProvider {
    fn get(&self, key: &StorageKey, range: Option<ByteRange>) -> Result<Bytes> {
        let io = |e| StorageError::io(key.as_str(), e);
        let mut file = File::open(self.path(key)).map_err(io)?;
        match range {
            None => {
                let mut buf = Vec::new();
                file.read_to_end(&mut buf).map_err(io)?;
                Ok(buf.into())
            }
            Some(r) => {
                let len = file.metadata().map_err(io)?.len();
                if r.end > len {
                    return Err(StorageError::RangeOutOfBounds {
                        key: key.to_string(),
                        end: r.end,
                        len,
                    });
                }
                file.seek(SeekFrom::Start(r.start)).map_err(io)?;
                let mut buf = vec![0; r.len() as usize];
                file.read_exact(&mut buf).map_err(io)?;
                Ok(buf.into())
            }
        }
    }

    fn put(&self, key: &StorageKey, data: Bytes) -> Result<()> {
        let io = |e| StorageError::io(key.as_str(), e);
        let path = self.path(key);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let suffix: u64 = rand::thread_rng().gen();
        let mut tmp = path.clone().into_os_string();
        tmp.push(format!("{TMP_MARKER}{suffix:016x}"));
        let tmp = PathBuf::from(tmp);
        let mut file = File::create(&tmp).map_err(io)?;
        file.write_all(&data).map_err(io)?;
        drop(file);
        fs::rename(&tmp, &path).map_err(io)
    }

    fn delete(&self, key: &StorageKey) -> Result<()> {
        match fs::remove_file(self.path(key)) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(StorageError::io(key.as_str(), e)),
        }
    }

    fn list(&self, prefix: &str) -> Result<Vec<StorageKey>> {
        // Start the walk at the deepest directory fully named by the prefix.
        let (dir_part, _) = prefix.rsplit_once('/').unwrap_or(("", prefix));
        let start = dir_part
            .split('/')
            .filter(|s| !s.is_empty())
            .fold(self.root.clone(), |p, seg| p.join(seg));
        let mut out = Vec::new();
        self.walk(&start, dir_part, &mut out)
            .map_err(|e| StorageError::io(prefix, e))?;
        let mut keys: Vec<StorageKey> = out
            .into_iter()
            .filter(|k| k.starts_with(prefix))
            .map(StorageKey)
            .collect();
        keys.sort();
        Ok(keys)
    }

    fn size(&self, key: &StorageKey) -> Result<u64> {
        fs::metadata(self.path(key))
            .map(|m| m.len())
            .map_err(|e| StorageError::io(key.as_str(), e))
    }
}
