use serde::{Deserialize, Serialize};

use crate::array::DynArray;

/// Reference to an externally stored sample payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkedSample {
    pub url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider_hint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub creds_tag: Option<String>,
}

impl LinkedSample {
    pub fn new(url: impl Into<String>) -> Self {
        LinkedSample {
            url: url.into(),
            provider_hint: None,
            creds_tag: None,
        }
    }

    /// The URL scheme, or the provider hint when one is given.
    pub fn scheme(&self) -> Option<&str> {
        self.provider_hint
            .as_deref()
            .or_else(|| self.url.split_once("://").map(|(s, _)| s))
    }

    pub(crate) fn to_stored(&self) -> DynArray {
        let bytes = serde_json::to_vec(self).expect("link serializes");
        DynArray::from_vec(&[bytes.len()], bytes)
    }

    pub(crate) fn from_stored(bytes: &[u8]) -> Option<Self> {
        serde_json::from_slice(bytes).ok()
    }
}

/// What may be written into a tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleInput {
    Array(DynArray),
    Link(LinkedSample),
}

impl From<DynArray> for SampleInput {
    fn from(a: DynArray) -> Self {
        SampleInput::Array(a)
    }
}

impl From<LinkedSample> for SampleInput {
    fn from(l: LinkedSample) -> Self {
        SampleInput::Link(l)
    }
}

impl<T: crate::Element> From<ndarray::ArrayD<T>> for SampleInput {
    fn from(a: ndarray::ArrayD<T>) -> Self {
        SampleInput::Array(a.into())
    }
}
