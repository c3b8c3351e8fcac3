//! Multiply-add instrumentation for the structured kernels.

/// Receives one call per multiply-add performed by a kernel.
pub trait Tally {
    fn mac(&mut self);

    /// Reports `n` multiply-adds at once.
    fn macs(&mut self, n: u64) {
        for _ in 0..n {
            self.mac();
        }
    }
}

/// Discards the count; compiles away.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoTally;

impl Tally for NoTally {
    #[inline(always)]
    fn mac(&mut self) {}

    #[inline(always)]
    fn macs(&mut self, _: u64) {}
}

/// Counts every multiply-add.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct MacCounter {
    count: u64,
}

impl MacCounter {
    pub fn count(&self) -> u64 {
        self.count
    }
}

impl Tally for MacCounter {
    #[inline(always)]
    fn mac(&mut self) {
        self.count += 1;
    }

    #[inline(always)]
    fn macs(&mut self, n: u64) {
        self.count += n;
    }
}

/// Counts multiply-adds per factor of a chain, so both the total and the
/// largest single-factor count can be read back.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct FactorMacs {
    per_factor: Vec<u64>,
}

impl FactorMacs {
    pub fn per_factor(&self) -> &[u64] {
        &self.per_factor
    }

    pub fn total(&self) -> u64 {
        self.per_factor.iter().sum()
    }

    pub fn max_factor(&self) -> u64 {
        self.per_factor.iter().copied().max().unwrap_or(0)
    }

    pub(crate) fn push(&mut self, counter: MacCounter) {
        self.per_factor.push(counter.count());
    }
}
