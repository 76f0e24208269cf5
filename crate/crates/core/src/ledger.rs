//! Byte-exact accounting of the numeric buffers a pipeline run keeps alive.
//!
//! Entries are registered by name at each major allocation. Registering a
//! name again keeps the larger size, so the ledger describes the live-set
//! maximum of every buffer rather than cumulative allocation.

use std::fmt;
use std::sync::Mutex;

use crate::error::{Error, Result};

/// One named buffer: element count times element size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BufferInfo {
    pub name: String,
    pub elements: usize,
    pub element_bytes: usize,
}

impl BufferInfo {
    pub fn new(name: impl Into<String>, elements: usize, element_bytes: usize) -> Self {
        BufferInfo {
            name: name.into(),
            elements,
            element_bytes,
        }
    }

    pub fn bytes(&self) -> u64 {
        self.elements as u64 * self.element_bytes as u64
    }
}

impl fmt::Display for BufferInfo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} ({} x {} B = {} B)",
            self.name,
            self.elements,
            self.element_bytes,
            self.bytes()
        )
    }
}

#[derive(Debug, Default)]
pub struct MemoryLedger {
    entries: Mutex<Vec<BufferInfo>>,
}

impl MemoryLedger {
    pub fn new() -> Self {
        MemoryLedger::default()
    }

    pub fn register(&self, name: &str, elements: usize, element_bytes: usize) {
        self.register_info(BufferInfo::new(name, elements, element_bytes));
    }

    pub fn register_info(&self, info: BufferInfo) {
        let mut entries = self.entries.lock().expect("ledger lock poisoned");
        match entries.iter_mut().find(|e| e.name == info.name) {
            Some(existing) if existing.bytes() >= info.bytes() => {}
            Some(existing) => *existing = info,
            None => entries.push(info),
        }
    }

    pub fn register_all(&self, infos: impl IntoIterator<Item = BufferInfo>) {
        for info in infos {
            self.register_info(info);
        }
    }

    pub fn entries(&self) -> Vec<BufferInfo> {
        self.entries.lock().expect("ledger lock poisoned").clone()
    }

    pub fn get(&self, name: &str) -> Option<BufferInfo> {
        self.entries().into_iter().find(|e| e.name == name)
    }

    pub fn total_bytes(&self) -> u64 {
        self.entries().iter().map(BufferInfo::bytes).sum()
    }

    pub fn largest(&self) -> Option<BufferInfo> {
        self.entries().into_iter().max_by_key(BufferInfo::bytes)
    }

    /// Fails with the buffers sorted by size when the total exceeds `cap`.
    pub fn check_cap(&self, cap: u64) -> Result<()> {
        let total = self.total_bytes();
        if total < cap {
            return Ok(());
        }
        let mut entries = self.entries();
        entries.sort_by_key(|e| std::cmp::Reverse(e.bytes()));
        let offenders = entries.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(", ");
        Err(Error::MemoryCap { total, cap, offenders })
    }
}

impl fmt::Display for MemoryLedger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in self.entries() {
            writeln!(f, "  {e}")?;
        }
        let total = self.total_bytes();
        write!(f, "  total {total} B ({:.3} MiB)", total as f64 / (1u64 << 20) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn totals_are_sums_of_live_maxima() {
        let ledger = MemoryLedger::new();
        ledger.register("phi", 512 * 512, 8);
        ledger.register("line", 1024, 8);
        ledger.register("line", 512, 8);
        ledger.register("line", 2048, 8);
        assert_eq!(ledger.entries().len(), 2);
        assert_eq!(ledger.get("line").unwrap().bytes(), 2048 * 8);
        assert_eq!(ledger.total_bytes(), 512 * 512 * 8 + 2048 * 8);
        assert_eq!(ledger.largest().unwrap().name, "phi");
    }

    #[test]
    fn cap_violation_lists_buffers() {
        let ledger = MemoryLedger::new();
        ledger.register("big", 100, 8);
        ledger.register("small", 1, 8);
        assert!(ledger.check_cap(1000).is_ok());
        let err = ledger.check_cap(500).unwrap_err().to_string();
        assert!(
            err.contains("big (100 x 8 B = 800 B)") && err.contains("small"),
            "{err}"
        );
    }
}
