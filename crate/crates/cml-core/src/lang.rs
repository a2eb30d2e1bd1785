//! Language identifiers.

use std::borrow::Borrow;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Identifier of one (synthetic or user-supplied) language.
///
/// Ordering is lexicographic on the underlying string; every map keyed by
/// language in this crate is a `BTreeMap`, so iteration order over languages
/// is deterministic.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LangId(pub String);

impl LangId {
    pub fn new(id: impl Into<String>) -> Self {
        LangId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LangId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for LangId {
    fn from(s: &str) -> Self {
        LangId(s.to_owned())
    }
}

impl Borrow<str> for LangId {
    fn borrow(&self) -> &str {
        &self.0
    }
}
