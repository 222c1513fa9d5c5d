use std::collections::HashMap;
use std::sync::Arc;

use super::{FileSystemProvider, Result, SharedProvider, StorageError, StorageKey};

/// Maps URL schemes to providers so linked samples can be resolved.
///
/// `mem://bucket/a/b` resolves to key `bucket/a/b` on the provider registered
/// for `mem`. The `file` scheme is available by default and treats the URL
/// path as absolute.
#[derive(Debug, Clone)]
pub struct ProviderRegistry {
    schemes: HashMap<String, SharedProvider>,
}

impl Default for ProviderRegistry {
    fn default() -> Self {
        let mut schemes: HashMap<String, SharedProvider> = HashMap::new();
        if let Ok(fs) = FileSystemProvider::new("/") {
            schemes.insert("file".into(), Arc::new(fs));
        }
        ProviderRegistry { schemes }
    }
}

impl ProviderRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, scheme: impl Into<String>, provider: SharedProvider) {
        self.schemes.insert(scheme.into(), provider);
    }

    pub fn resolve(&self, url: &str) -> Result<(SharedProvider, StorageKey)> {
        let (scheme, rest) = url
            .split_once("://")
            .ok_or_else(|| StorageError::InvalidKey(url.to_string()))?;
        let provider = self
            .schemes
            .get(scheme)
            .ok_or_else(|| StorageError::NotFound(format!("no provider for scheme `{scheme}`")))?;
        let key = StorageKey::new(rest.trim_start_matches('/'))?;
        Ok((provider.clone(), key))
    }
}
