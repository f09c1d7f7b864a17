//! The committed-instruction record that every noninterference check
//! compares: one entry per committed instruction, in commit order.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::isa::Opcode;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub core: usize,
    /// Commit index on this core.
    pub id: u64,
    pub pc: usize,
    pub opcode: Opcode,
    pub fetch: u64,
    pub rename: u64,
    pub issue: Option<u64>,
    pub complete: u64,
    pub commit: u64,
    pub result: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommittedTimeline {
    pub entries: Vec<TimelineEntry>,
}

/// Where two timelines first disagree.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    pub index: usize,
    pub core: Option<usize>,
    pub id: Option<u64>,
    pub pc: Option<usize>,
    pub field: String,
}

impl CommittedTimeline {
    pub fn push(&mut self, e: TimelineEntry) {
        self.entries.push(e);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Hex SHA-256 over the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(&self.entries).expect("timeline serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Per-instruction shape with timing and `rdcycle` values removed.
    pub fn structure(&self) -> Vec<(usize, usize, Opcode, Option<u64>)> {
        self.entries
            .iter()
            .map(|e| (e.core, e.pc, e.opcode, if e.opcode == Opcode::Rdcycle { None } else { e.result }))
            .collect()
    }

    /// Entries of one core, in commit order.
    pub fn core(&self, core: usize) -> impl Iterator<Item = &TimelineEntry> + '_ {
        self.entries.iter().filter(move |e| e.core == core)
    }

    /// Results of committed `rdcycle`s on `core`, in order.
    pub fn rdcycles(&self, core: usize) -> Vec<u64> {
        self.core(core).filter(|e| e.opcode == Opcode::Rdcycle).filter_map(|e| e.result).collect()
    }

    pub fn first_difference(&self, other: &CommittedTimeline) -> Option<Divergence> {
        let n = self.entries.len().max(other.entries.len());
        for i in 0..n {
            let (a, b) = match (self.entries.get(i), other.entries.get(i)) {
                (Some(a), Some(b)) => (a, b),
                (a, b) => {
                    let e = a.or(b).expect("one side present");
                    return Some(Divergence {
                        index: i,
                        core: Some(e.core),
                        id: Some(e.id),
                        pc: Some(e.pc),
                        field: "length".into(),
                    });
                }
            };
            let field = if a.core != b.core || a.id != b.id || a.pc != b.pc || a.opcode != b.opcode {
                "instruction"
            } else if a.fetch != b.fetch {
                "fetch"
            } else if a.rename != b.rename {
                "rename"
            } else if a.issue != b.issue {
                "issue"
            } else if a.complete != b.complete {
                "complete"
            } else if a.commit != b.commit {
                "commit"
            } else if a.result != b.result {
                "result"
            } else {
                continue;
            };
            return Some(Divergence {
                index: i,
                core: Some(a.core),
                id: Some(a.id),
                pc: Some(a.pc),
                field: field.into(),
            });
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: u64, commit: u64) -> TimelineEntry {
        TimelineEntry {
            core: 0,
            id,
            pc: id as usize,
            opcode: Opcode::Alu,
            fetch: 0,
            rename: 1,
            issue: Some(2),
            complete: 3,
            commit,
            result: Some(7),
        }
    }

    #[test]
    fn digest_tracks_content() {
        let a = CommittedTimeline { entries: vec![entry(0, 4), entry(1, 4)] };
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
        b.entries[1].commit = 5;
        assert_ne!(a.digest(), b.digest());
        let d = a.first_difference(&b).unwrap();
        assert_eq!((d.index, d.field.as_str()), (1, "commit"));
    }

    #[test]
    fn length_mismatch_reported() {
        let a = CommittedTimeline { entries: vec![entry(0, 4)] };
        let b = CommittedTimeline::default();
        assert_eq!(a.first_difference(&b).unwrap().field, "length");
        assert_eq!(a.first_difference(&a), None);
    }
}
