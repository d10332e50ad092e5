//! Recycled tensor storage. Training builds one tape per sequence with an
//! identical shape profile, so returning buffers by exact length makes
//! every allocation after the first sequence a pop. Values are stale on
//! reuse; callers either overwrite fully or ask for zeroed storage.

use std::collections::HashMap;

#[derive(Debug, Default)]
pub struct TensorPool {
    by_len: HashMap<usize, Vec<Vec<f64>>>,
}

impl TensorPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// A buffer of exactly `n` elements with arbitrary (but initialized)
    /// contents. The caller must overwrite every element it reads.
    pub fn take(&mut self, n: usize) -> Vec<f64> {
        if let Some(stack) = self.by_len.get_mut(&n) {
            if let Some(buf) = stack.pop() {
                debug_assert_eq!(buf.len(), n);
                return buf;
            }
        }
        vec![0.0; n]
    }

    pub fn take_zeroed(&mut self, n: usize) -> Vec<f64> {
        if let Some(stack) = self.by_len.get_mut(&n) {
            if let Some(mut buf) = stack.pop() {
                buf.iter_mut().for_each(|v| *v = 0.0);
                return buf;
            }
        }
        vec![0.0; n]
    }

    pub fn give(&mut self, buf: Vec<f64>) {
        if !buf.is_empty() {
            self.by_len.entry(buf.len()).or_default().push(buf);
        }
    }

    pub fn absorb(&mut self, other: TensorPool) {
        for (_, stack) in other.by_len {
            for buf in stack {
                self.give(buf);
            }
        }
    }
}
