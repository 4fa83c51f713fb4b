//! Working-memory sample buffer.
//!
//! Index 0 is the sample being presented now, index `p` the one seen `p`
//! presentations ago. The capacity is the effective batch size.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// One presentation: input, label encoding and the per-layer rates captured at
/// the end of the presentation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<Vec<f64>>,
}

impl Sample {
    pub fn new(x: Vec<f64>, y: Vec<f64>, z: Vec<Vec<f64>>) -> Self {
        Self { x, y, z }
    }

    /// Input to layer `layer`: the raw input for the first layer, the
    /// previous layer's rates otherwise.
    pub fn layer_input(&self, layer: usize) -> &[f64] {
        if layer == 0 {
            &self.x
        } else {
            &self.z[layer - 1]
        }
    }

    fn same_shape(&self, other: &Sample) -> bool {
        self.x.len() == other.x.len()
            && self.y.len() == other.y.len()
            && self.z.len() == other.z.len()
            && self.z.iter().zip(&other.z).all(|(a, b)| a.len() == b.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBuffer {
    capacity: usize,
    slots: VecDeque<Sample>,
}

impl SampleBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("buffer capacity must be at least 1"));
        }
        Ok(Self {
            capacity,
            slots: VecDeque::with_capacity(capacity + 1),
        })
    }

    /// Makes `sample` the current one, evicting the oldest when full.
    pub fn push(&mut self, sample: Sample) -> Result<()> {
        if let Some(front) = self.slots.front() {
            if !front.same_shape(&sample) {
                return Err(Error::invalid(
                    "sample dimensions differ from the buffered samples",
                ));
            }
        }
        self.slots.push_front(sample);
        if self.slots.len() > self.capacity {
            self.slots.pop_back();
        }
        Ok(())
    }

    pub fn is_warm(&self) -> bool {
        self.slots.len() == self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Sample from `age` presentations ago.
    pub fn get(&self, age: usize) -> Option<&Sample> {
        self.slots.get(age)
    }

    pub fn current(&self) -> Option<&Sample> {
        self.slots.front()
    }

    /// Newest first.
    pub fn iter(&self) -> impl ExactSizeIterator<Item = &Sample> {
        self.slots.iter()
    }

    pub fn clear(&mut self) {
        self.slots.clear();
    }

    /// The `count` newest samples as a buffer of that capacity.
    pub fn newest(&self, count: usize) -> Result<SampleBuffer> {
        if count == 0 || count > self.slots.len() {
            return Err(Error::Precondition(format!(
                "need {count} buffered samples, have {}",
                self.slots.len()
            )));
        }
        Ok(SampleBuffer {
            capacity: count,
            slots: self.slots.iter().take(count).cloned().collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tagged(tag: usize) -> Sample {
        Sample::new(vec![tag as f64], vec![1.0, 0.0], vec![vec![0.0; 2]])
    }

    fn tags(b: &SampleBuffer) -> Vec<usize> {
        b.iter().map(|s| s.x[0] as usize).collect()
    }

    #[test]
    fn fifo_capacity_two() {
        let mut b = SampleBuffer::new(2).unwrap();
        for t in [1, 2, 3] {
            b.push(tagged(t)).unwrap();
        }
        assert_eq!(tags(&b), vec![3, 2]);
    }

    #[test]
    fn capacity_one_holds_current_only() {
        let mut b = SampleBuffer::new(1).unwrap();
        for t in 0..5 {
            b.push(tagged(t)).unwrap();
            assert_eq!(tags(&b), vec![t]);
            assert!(b.is_warm());
        }
    }

    #[test]
    fn full_buffer_is_reversed_insertion() {
        let mut b = SampleBuffer::new(4).unwrap();
        for t in 0..4 {
            b.push(tagged(t)).unwrap();
        }
        assert_eq!(tags(&b), vec![3, 2, 1, 0]);
    }

    #[test]
    fn warmth() {
        let mut b = SampleBuffer::new(3).unwrap();
        assert!(!b.is_warm());
        for t in 0..3 {
            assert!(!b.is_warm());
            b.push(tagged(t)).unwrap();
        }
        assert!(b.is_warm());
        b.push(tagged(9)).unwrap();
        assert!(b.is_warm());
    }

    #[test]
    fn rejects_shape_change_and_zero_capacity() {
        assert!(SampleBuffer::new(0).is_err());
        let mut b = SampleBuffer::new(3).unwrap();
        b.push(tagged(0)).unwrap();
        let odd = Sample::new(vec![0.0], vec![1.0], vec![vec![0.0; 2]]);
        assert!(matches!(b.push(odd), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn newest_window() {
        let mut b = SampleBuffer::new(5).unwrap();
        for t in 0..5 {
            b.push(tagged(t)).unwrap();
        }
        let w = b.newest(2).unwrap();
        assert_eq!(tags(&w), vec![4, 3]);
        assert!(w.is_warm());
        assert!(b.newest(6).is_err());
    }

    proptest! {
        #[test]
        fn eviction_follows_insertion(cap in 1usize..10, pushes in 0usize..40) {
            let mut b = SampleBuffer::new(cap).unwrap();
            for t in 0..pushes {
                b.push(tagged(t)).unwrap();
                prop_assert_eq!(&b.current().unwrap().x, &vec![t as f64]);
                prop_assert!(b.len() <= cap);
            }
            prop_assert_eq!(b.len(), pushes.min(cap));
            let want: Vec<usize> = (pushes.saturating_sub(cap)..pushes).rev().collect();
            prop_assert_eq!(tags(&b), want);
        }
    }
}
