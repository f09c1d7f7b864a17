//! PC-indexed stride prefetcher (reference prediction table), trained only by
//! committed accesses.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Entry {
    pc: u64,
    last_addr: u64,
    stride: i64,
    confidence: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StridePrefetcher {
    table: Vec<Option<Entry>>,
    threshold: u8,
}

impl StridePrefetcher {
    pub fn new(entries: usize, threshold: u8) -> Self {
        assert!(entries.is_power_of_two());
        Self { table: vec![None; entries], threshold }
    }

    /// Trains on a committed access and returns the address to prefetch, if
    /// the stride for this PC is confident.
    pub fn train(&mut self, pc: u64, addr: u64) -> Option<u64> {
        let idx = ((pc / 4) as usize) & (self.table.len() - 1);
        let slot = &mut self.table[idx];
        match slot {
            Some(e) if e.pc == pc => {
                let stride = addr.wrapping_sub(e.last_addr) as i64;
                if stride == e.stride && stride != 0 {
                    e.confidence = e.confidence.saturating_add(1);
                } else {
                    e.stride = stride;
                    e.confidence = u8::from(stride != 0);
                }
                e.last_addr = addr;
                (e.confidence >= self.threshold).then(|| addr.wrapping_add(stride as u64))
            }
            _ => {
                *slot = Some(Entry { pc, last_addr: addr, stride: 0, confidence: 0 });
                None
            }
        }
    }

    /// Table contents, for purity comparisons.
    pub fn snapshot(&self) -> Vec<(usize, u64, u64, i64, u8)> {
        self.table
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.map(|e| (i, e.pc, e.last_addr, e.stride, e.confidence)))
            .collect()
    }
}
