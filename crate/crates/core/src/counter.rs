use std::cell::Cell;

/// Per-run multiply-accumulate tally, bucketed by primitive.
///
/// Forward operations accept `Option<&MacCounter>`; when present they run a
/// sequential instrumented path that increments the counter once per multiply
/// actually executed. Exponentials and divisions (softmax, pooling means,
/// temperature) are excluded by convention. A counter must not be shared
/// across concurrent runs; it is deliberately `!Sync`.
#[derive(Debug, Default)]
pub struct MacCounter {
    conv: Cell<u64>,
    gram: Cell<u64>,
    weighted_sum: Cell<u64>,
    resize: Cell<u64>,
    scale: Cell<u64>,
}

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn add_conv(&self, n: u64) {
        self.conv.set(self.conv.get() + n);
    }

    pub(crate) fn add_gram(&self, n: u64) {
        self.gram.set(self.gram.get() + n);
    }

    pub(crate) fn add_weighted_sum(&self, n: u64) {
        self.weighted_sum.set(self.weighted_sum.get() + n);
    }

    pub(crate) fn add_resize(&self, n: u64) {
        self.resize.set(self.resize.get() + n);
    }

    pub(crate) fn add_scale(&self, n: u64) {
        self.scale.set(self.scale.get() + n);
    }

    pub fn conv(&self) -> u64 {
        self.conv.get()
    }

    pub fn gram(&self) -> u64 {
        self.gram.get()
    }

    pub fn weighted_sum(&self) -> u64 {
        self.weighted_sum.get()
    }

    pub fn resize(&self) -> u64 {
        self.resize.get()
    }

    pub fn scale(&self) -> u64 {
        self.scale.get()
    }

    /// Similarity-stage count: gram products plus weighted aggregation.
    pub fn similarity_stage(&self) -> u64 {
        self.gram.get() + self.weighted_sum.get()
    }

    pub fn total(&self) -> u64 {
        self.conv.get()
            + self.gram.get()
            + self.weighted_sum.get()
            + self.resize.get()
            + self.scale.get()
    }

    pub fn reset(&self) {
        self.conv.set(0);
        self.gram.set(0);
        self.weighted_sum.set(0);
        self.resize.set(0);
        self.scale.set(0);
    }
}

/// Monomorphized tally hook so the uncounted fast path compiles to nothing.
pub(crate) trait Tally {
    fn hit(&mut self);
    fn count(&self) -> u64;
}

pub(crate) struct NoTally;

impl Tally for NoTally {
    #[inline(always)]
    fn hit(&mut self) {}

    #[inline(always)]
    fn count(&self) -> u64 {
        0
    }
}

pub(crate) struct CountTally(pub u64);

impl Tally for CountTally {
    #[inline(always)]
    fn hit(&mut self) {
        self.0 += 1;
    }

    #[inline(always)]
    fn count(&self) -> u64 {
        self.0
    }
}
