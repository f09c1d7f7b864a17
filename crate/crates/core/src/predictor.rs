//! Branch direction predictor (2-bit counters) and a direct-mapped BTB for
//! indirect jumps. Both are read at fetch and written only at commit.

use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Predictor {
    counters: Vec<u8>,
    btb: Vec<Option<(usize, usize)>>,
}

impl Predictor {
    pub fn new(entries: usize, btb_entries: usize) -> Self {
        assert!(entries.is_power_of_two() && btb_entries.is_power_of_two());
        // weakly taken
        Self { counters: vec![2; entries], btb: vec![None; btb_entries] }
    }

    fn index(&self, pc: usize) -> usize {
        pc & (self.counters.len() - 1)
    }

    pub fn predict_taken(&self, pc: usize) -> bool {
        self.counters[self.index(pc)] >= 2
    }

    pub fn predict_target(&self, pc: usize) -> Option<usize> {
        match self.btb[pc & (self.btb.len() - 1)] {
            Some((tag, target)) if tag == pc => Some(target),
            _ => None,
        }
    }

    pub fn train_branch(&mut self, pc: usize, taken: bool) {
        let i = self.index(pc);
        let c = &mut self.counters[i];
        *c = if taken { (*c + 1).min(3) } else { c.saturating_sub(1) };
    }

    pub fn train_target(&mut self, pc: usize, target: usize) {
        let i = pc & (self.btb.len() - 1);
        self.btb[i] = Some((pc, target));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counters_saturate() {
        let mut p = Predictor::new(16, 4);
        assert!(p.predict_taken(3));
        p.train_branch(3, false);
        assert!(!p.predict_taken(3));
        for _ in 0..5 {
            p.train_branch(3, true);
        }
        p.train_branch(3, false);
        assert!(p.predict_taken(3));
    }

    #[test]
    fn btb_checks_tag() {
        let mut p = Predictor::new(16, 4);
        p.train_target(1, 40);
        assert_eq!(p.predict_target(1), Some(40));
        assert_eq!(p.predict_target(5), None);
    }
}
