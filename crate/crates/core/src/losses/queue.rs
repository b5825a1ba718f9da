use std::collections::VecDeque;

use candle_core::Tensor;

use crate::nn::device;
use crate::Result;

/// Bounded FIFO of detached representations, each optionally carrying its
/// prototype assignment and most probable prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationQueue {
    capacity: usize,
    entries: VecDeque<QueueEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueueEntry {
    pub z: Vec<f64>,
    pub q: Option<Vec<f64>>,
    pub top: Option<usize>,
}

impl RepresentationQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn push(&mut self, entry: QueueEntry) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    /// Enqueues the rows of `z` (`[B, h]`) and, if given, of `q` (`[B, K]`).
    pub fn enqueue(&mut self, z: &Tensor, q: Option<&Tensor>) -> Result<()> {
        let rows = z.detach().to_vec2::<f64>()?;
        let qs = match q {
            Some(q) => Some(q.detach().to_vec2::<f64>()?),
            None => None,
        };
        for (i, z) in rows.into_iter().enumerate() {
            self.push(queue_entry(z, qs.as_ref().map(|qs| qs[i].clone())));
        }
        Ok(())
    }

    /// `[Q, h]`, or `None` when empty.
    pub fn vectors(&self) -> Result<Option<Tensor>> {
        self.stack(|e| Some(e.z.as_slice()))
    }

    /// `[Q, K]`, or `None` when empty or when entries lack assignments.
    pub fn assignments(&self) -> Result<Option<Tensor>> {
        self.stack(|e| e.q.as_deref())
    }

    pub fn tops(&self) -> Vec<Option<usize>> {
        self.entries.iter().map(|e| e.top).collect()
    }

    fn stack<'a>(&'a self, f: impl Fn(&'a QueueEntry) -> Option<&'a [f64]>) -> Result<Option<Tensor>> {
        let Some(first) = self.entries.front() else {
            return Ok(None);
        };
        let Some(width) = f(first).map(<[f64]>::len) else {
            return Ok(None);
        };
        let mut flat = Vec::with_capacity(self.entries.len() * width);
        for e in &self.entries {
            match f(e) {
                Some(v) => flat.extend_from_slice(v),
                None => return Ok(None),
            }
        }
        Ok(Some(Tensor::from_vec(flat, (self.entries.len(), width), &device())?))
    }
}

/// Queue entry with the most probable prototype derived from `q`.
pub fn queue_entry(z: Vec<f64>, q: Option<Vec<f64>>) -> QueueEntry {
    let top = q.as_deref().map(argmax);
    QueueEntry { z, q, top }
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifo_respects_capacity() {
        let mut q = RepresentationQueue::new(3);
        for i in 0..5 {
            q.push(QueueEntry {
                z: vec![i as f64],
                q: None,
                top: None,
            });
        }
        assert_eq!(q.len(), 3);
        let firsts: Vec<f64> = q.entries().map(|e| e.z[0]).collect();
        assert_eq!(firsts, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn zero_capacity_stays_empty() {
        let mut q = RepresentationQueue::new(0);
        q.enqueue(&Tensor::ones((2, 3), crate::nn::DTYPE, &device()).unwrap(), None).unwrap();
        assert!(q.is_empty());
        assert!(q.vectors().unwrap().is_none());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }
}
