//! Fixed set of host buffers shared by the prefetch, update and flush
//! stages of one worker.

use crate::optimizer::Subgroup;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotState {
    Free,
    Prefetching,
    /// Prefetched and waiting for its update.
    Ready,
    Updating,
    Flushing,
    /// Retained across update phases.
    Cached,
}

/// Host copy of one subgroup: FP32 state plus an FP32 gradient tensor.
#[derive(Debug)]
pub struct SlotBuffers {
    pub state: Subgroup,
    pub grads: Vec<f32>,
}

impl SlotBuffers {
    fn with_capacity(param_count: usize) -> Self {
        let mut state = Subgroup::zeros(u32::MAX, param_count);
        state.params.clear();
        state.momentum.clear();
        state.variance.clear();
        Self {
            state,
            grads: Vec::with_capacity(param_count),
        }
    }
}

#[derive(Debug)]
pub struct HostBufferPool {
    states: Vec<SlotState>,
    owners: Vec<Option<usize>>,
    buffers: Vec<Option<SlotBuffers>>,
}

impl HostBufferPool {
    pub fn new(slots: usize, max_param_count: usize) -> Self {
        Self {
            states: vec![SlotState::Free; slots],
            owners: vec![None; slots],
            buffers: (0..slots)
                .map(|_| Some(SlotBuffers::with_capacity(max_param_count)))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn free_count(&self) -> usize {
        self.states.iter().filter(|s| **s == SlotState::Free).count()
    }

    pub fn count(&self, state: SlotState) -> usize {
        self.states.iter().filter(|s| **s == state).count()
    }

    pub fn state(&self, slot: usize) -> SlotState {
        self.states[slot]
    }

    pub fn owner(&self, slot: usize) -> Option<usize> {
        self.owners[slot]
    }

    /// Claims a free slot for subgroup `owner` in state `state`.
    pub fn reserve(&mut self, owner: usize, state: SlotState) -> Option<usize> {
        debug_assert!(!self.owners.contains(&Some(owner)), "subgroup {owner} already owns a slot");
        let slot = self.states.iter().position(|s| *s == SlotState::Free)?;
        self.states[slot] = state;
        self.owners[slot] = Some(owner);
        Some(slot)
    }

    pub fn set(&mut self, slot: usize, state: SlotState) {
        debug_assert!(self.owners[slot].is_some() && state != SlotState::Free);
        self.states[slot] = state;
    }

    pub fn release(&mut self, slot: usize) {
        debug_assert!(self.buffers[slot].is_some(), "releasing slot {slot} without its buffers");
        self.states[slot] = SlotState::Free;
        self.owners[slot] = None;
    }

    /// Moves the slot's buffers out, e.g. to hand them to an I/O lane.
    pub fn take(&mut self, slot: usize) -> SlotBuffers {
        self.buffers[slot].take().expect("slot buffers are checked out")
    }

    pub fn put(&mut self, slot: usize, buffers: SlotBuffers) {
        debug_assert!(self.buffers[slot].is_none());
        self.buffers[slot] = Some(buffers);
    }

    pub fn buffers(&self, slot: usize) -> Option<&SlotBuffers> {
        self.buffers[slot].as_ref()
    }

    pub fn buffers_mut(&mut self, slot: usize) -> Option<&mut SlotBuffers> {
        self.buffers[slot].as_mut()
    }
}
