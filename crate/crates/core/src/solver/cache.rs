//! On-disk cache of uniqueness verdicts keyed by expression normal form.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::expr::BvExpr;
use super::smtlib::emit_smtlib;
use super::Uniqueness;

/// Stable hash of the normalized expression.
pub fn cache_key(e: &BvExpr) -> String {
    let text = emit_smtlib(&e.normalize(), None);
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
enum Entry {
    Opaque { dest: u64 },
    NotOpaque { first: u64, second: u64 },
}

/// Only definite verdicts are kept; Unknown is always recomputed.
#[derive(Debug, Default)]
pub struct SolverCache {
    path: Option<PathBuf>,
    entries: BTreeMap<String, Entry>,
    pub hits: u64,
    pub misses: u64,
}

impl SolverCache {
    pub fn in_memory() -> SolverCache {
        SolverCache::default()
    }

    /// Open a JSON cache file. A missing or unreadable file starts empty and
    /// malformed entries are dropped.
    pub fn open(path: impl Into<PathBuf>) -> SolverCache {
        let path = path.into();
        let mut entries = BTreeMap::new();
        if let Ok(text) = fs::read_to_string(&path) {
            if let Ok(serde_json::Value::Object(map)) = serde_json::from_str(&text) {
                for (k, v) in map {
                    let well_formed = k.len() == 64 && k.bytes().all(|c| c.is_ascii_hexdigit());
                    if let (true, Ok(e)) = (well_formed, serde_json::from_value::<Entry>(v)) {
                        entries.insert(k, e);
                    }
                }
            }
        }
        SolverCache { path: Some(path), entries, hits: 0, misses: 0 }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&mut self, key: &str) -> Option<Uniqueness> {
        let r = self.entries.get(key).map(|e| match *e {
            Entry::Opaque { dest } => Uniqueness::ProvenOpaque(dest),
            Entry::NotOpaque { first, second } => Uniqueness::NotOpaque(first, second),
        });
        if r.is_some() {
            self.hits += 1;
        } else {
            self.misses += 1;
        }
        r
    }

    pub fn store(&mut self, key: &str, v: &Uniqueness) {
        let e = match *v {
            Uniqueness::ProvenOpaque(dest) => Entry::Opaque { dest },
            Uniqueness::NotOpaque(first, second) => Entry::NotOpaque { first, second },
            Uniqueness::Unknown(_) => return,
        };
        self.entries.insert(key.to_string(), e);
    }

    /// Write back to the file the cache was opened from.
    pub fn save(&self) -> io::Result<()> {
        let Some(path) = &self.path else { return Ok(()) };
        let text = serde_json::to_string_pretty(&self.entries).map_err(io::Error::other)?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, text)?;
        fs::rename(tmp, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::BinOp;
    use crate::solver::expr::ExprBuilder;

    fn sum(swap: bool) -> BvExpr {
        let mut b = ExprBuilder::new();
        let x = b.var("x", 64);
        let y = b.var("y", 64);
        let s = if swap { b.bin(BinOp::Add, y, x) } else { b.bin(BinOp::Add, x, y) };
        b.finish(s)
    }

    #[test]
    fn commuted_operands_share_a_key() {
        assert_eq!(cache_key(&sum(false)), cache_key(&sum(true)));
    }

    #[test]
    fn roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cache.json");
        let key = cache_key(&sum(false));
        let mut c = SolverCache::open(&p);
        assert_eq!(c.lookup(&key), None);
        c.store(&key, &Uniqueness::NotOpaque(1, 2));
        c.store("x", &Uniqueness::Unknown(crate::solver::UnknownReason::Timeout));
        c.save().unwrap();
        let mut c = SolverCache::open(&p);
        assert_eq!(c.len(), 1);
        assert_eq!(c.lookup(&key), Some(Uniqueness::NotOpaque(1, 2)));
    }

    #[test]
    fn corrupt_entries_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cache.json");
        let good = "a".repeat(64);
        let text = format!(
            r#"{{"{good}": {{"verdict": "opaque", "dest": 4112}}, "{}": {{"verdict": "maybe"}}, "short": {{"verdict": "opaque", "dest": 1}}}}"#,
            "b".repeat(64)
        );
        fs::write(&p, text).unwrap();
        let mut c = SolverCache::open(&p);
        assert_eq!(c.len(), 1);
        assert_eq!(c.lookup(&good), Some(Uniqueness::ProvenOpaque(4112)));
        fs::write(&p, "not json").unwrap();
        assert!(SolverCache::open(&p).is_empty());
    }
}
