use std::collections::{BTreeMap, VecDeque};

use nalgebra::Vector2;

use crate::geometry::PoseSE3;

/// A tracked frame handed from the tracking lane to the mapping lane.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingFrame {
    pub frame_index: u64,
    pub t: f64,
    /// World-to-camera pose estimated by the tracking lane.
    pub pose: PoseSE3,
    pub observations: BTreeMap<u64, Vector2<f64>>,
    pub is_keyframe: bool,
    /// Features first adopted on this (key)frame.
    pub new_features: Vec<u64>,
}

/// Bounded FIFO that drops its oldest entry when full.
#[derive(Debug, Clone)]
pub struct FrameQueue {
    items: VecDeque<PendingFrame>,
    capacity: usize,
    dropped: u64,
}

impl FrameQueue {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        Self {
            items: VecDeque::new(),
            capacity,
            dropped: 0,
        }
    }

    /// Returns the frame evicted to make room, if any.
    pub fn push(&mut self, item: PendingFrame) -> Option<PendingFrame> {
        let evicted = if self.items.len() >= self.capacity {
            self.dropped += 1;
            let old = self.items.pop_front();
            if let Some(o) = &old {
                log::warn!("mapping queue full, dropping frame {}", o.frame_index);
            }
            old
        } else {
            None
        };
        self.items.push_back(item);
        evicted
    }

    pub fn pop(&mut self) -> Option<PendingFrame> {
        self.items.pop_front()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(i: u64) -> PendingFrame {
        PendingFrame {
            frame_index: i,
            t: i as f64,
            pose: PoseSE3::identity(),
            observations: BTreeMap::new(),
            is_keyframe: false,
            new_features: Vec::new(),
        }
    }

    #[test]
    fn fifo_order_and_overflow() {
        let mut q = FrameQueue::new(3);
        for i in 0..5 {
            q.push(item(i));
            assert!(q.len() <= 3);
        }
        assert_eq!(q.dropped(), 2);
        let order: Vec<u64> = std::iter::from_fn(|| q.pop())
            .map(|p| p.frame_index)
            .collect();
        assert_eq!(order, vec![2, 3, 4]);
        assert!(q.pop().is_none());
    }
}
