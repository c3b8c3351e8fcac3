//! Chains of DeBut factors.
//!
//! A chain `R_m · … · R_1` is stored rightmost-first: `factors()[0]` is `R_1`,
//! the factor applied to the input first. A sequence of signatures is a chain
//! when
//!
//! * adjacent shapes compose, `q_{i+1} == p_i`;
//! * diagonal sizes grow by the previous block height, `t_1 == 1` and
//!   `t_{i+1} == r_i · t_i`;
//! * the leftmost factor is one single block, `p_m == r_m·t_m`, `q_m == s_m·t_m`.
//!
//! Those rules pin every shape once the per-factor block shapes `(r_i, s_i)`
//! are known: `t_i = Π_{j<i} r_j`, the block count is `b_i = Π_{j>i} s_j`, and
//! the chain maps `Π s_i` inputs onto `Π r_i` outputs. See
//! [`DeButChain::from_block_shapes`].

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DebutError, Result};
use crate::factor::{DeButFactor, FactorSignature};
use crate::tally::{FactorMacs, MacCounter, NoTally, Tally};

/// Samples processed together by the chain kernels.
const SAMPLE_TILE: usize = 64;

/// Classification of a valid chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChainKind {
    Monotonic,
    Bulging,
}

impl fmt::Display for ChainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChainKind::Monotonic => f.write_str("Monotonic"),
            ChainKind::Bulging => f.write_str("Bulging"),
        }
    }
}

/// Outcome of [`validate_chain_detailed`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Validation {
    pub kind: ChainKind,
    /// The chain maps onto more rows than it reads (`p_m > q_1`).
    pub expanding: bool,
}

/// Validates a rightmost-first signature sequence and classifies it.
pub fn validate_chain(sigs: &[FactorSignature]) -> Result<ChainKind> {
    validate_chain_detailed(sigs).map(|v| v.kind)
}

pub fn validate_chain_detailed(sigs: &[FactorSignature]) -> Result<Validation> {
    let (first, last) = match (sigs.first(), sigs.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(DebutError::EmptyChain),
    };
    for (i, pair) in sigs.windows(2).enumerate() {
        if pair[1].q() != pair[0].p() {
            return Err(DebutError::ShapeChainBreak { factor: i + 2 });
        }
    }
    if first.t() != 1 {
        return Err(DebutError::TRecursionBreak { factor: 1 });
    }
    for (i, pair) in sigs.windows(2).enumerate() {
        if pair[1].t() != pair[0].r() * pair[0].t() {
            return Err(DebutError::TRecursionBreak { factor: i + 2 });
        }
    }
    if last.blocks() != 1 {
        return Err(DebutError::TRecursionBreak { factor: sigs.len() });
    }

    let intermediate = &sigs[..sigs.len() - 1];
    let expanding = last.p() > first.q();
    let monotonic = if expanding {
        intermediate.iter().all(|f| f.p() >= f.q())
    } else {
        intermediate.iter().all(|f| f.p() <= f.q())
    };
    let kind = if monotonic {
        ChainKind::Monotonic
    } else {
        ChainKind::Bulging
    };
    Ok(Validation { kind, expanding })
}

/// Parameter and cost summary of a chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    /// `Σ p_i·s_i`.
    pub nnz_total: u64,
    /// Multiply-adds per input column; equals `nnz_total`.
    pub macs_per_column: u64,
    /// `max_i p_i·s_i`.
    pub macs_bound: u64,
    /// Parameter count of the dense matrix the chain replaces.
    pub dense_params: u64,
    /// `1 - nnz_total / dense_params`; negative when the chain is larger.
    pub compression_ratio: f64,
}

impl ChainStats {
    pub fn mac_reduction(&self) -> f64 {
        self.dense_params as f64 / self.macs_per_column as f64
    }
}

/// Value initialization schemes for [`DeButChain::random_init`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitScheme {
    Zeros,
    Ones,
    /// `U(-a, a)` with variance `1/s` per factor.
    #[default]
    UniformFanin,
    /// `N(0, 1/s)` per factor.
    GaussianFanin,
}

impl FromStr for InitScheme {
    type Err = DebutError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeros" => Ok(InitScheme::Zeros),
            "ones" => Ok(InitScheme::Ones),
            "uniform-fanin" => Ok(InitScheme::UniformFanin),
            "gaussian-fanin" => Ok(InitScheme::GaussianFanin),
            other => Err(DebutError::UnknownScheme(other.to_string())),
        }
    }
}

/// A validated chain of factors, rightmost first.
#[derive(Debug, Clone, PartialEq)]
pub struct DeButChain {
    factors: Vec<DeButFactor>,
    kind: ChainKind,
    expanding: bool,
}

impl DeButChain {
    pub fn new(factors: Vec<DeButFactor>) -> Result<Self> {
        let sigs: Vec<_> = factors.iter().map(|f| *f.signature()).collect();
        let v = validate_chain_detailed(&sigs)?;
        Ok(DeButChain {
            factors,
            kind: v.kind,
            expanding: v.expanding,
        })
    }

    /// Zero-valued chain with the given structure.
    pub fn from_signatures(sigs: &[FactorSignature]) -> Result<Self> {
        DeButChain::new(sigs.iter().map(|&s| DeButFactor::zeros(s)).collect())
    }

    /// Zero-valued chain determined by its per-factor block shapes
    /// `(r_i, s_i)`, rightmost first.
    ///
    /// ```
    /// use debut::DeButChain;
    ///
    /// let chain = DeButChain::from_block_shapes(&[(2, 3), (1, 3), (3, 3)]).unwrap();
    /// assert_eq!(chain.shape(), (6, 27));
    /// let sigs: Vec<_> = chain.signatures().iter().map(|s| (s.p(), s.q(), s.t())).collect();
    /// assert_eq!(sigs, vec![(18, 27, 1), (6, 18, 2), (6, 6, 2)]);
    /// ```
    pub fn from_block_shapes(shapes: &[(usize, usize)]) -> Result<Self> {
        if shapes.is_empty() {
            return Err(DebutError::EmptyChain);
        }
        let mut sigs = Vec::with_capacity(shapes.len());
        let mut t = 1usize;
        for (i, &(r, s)) in shapes.iter().enumerate() {
            let blocks: usize = shapes[i + 1..].iter().map(|&(_, s)| s).product();
            sigs.push(FactorSignature::new(blocks * r * t, blocks * s * t, r, s, t)?);
            t *= r;
        }
        DeButChain::from_signatures(&sigs)
    }

    pub fn factors(&self) -> &[DeButFactor] {
        &self.factors
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn kind(&self) -> ChainKind {
        self.kind
    }

    /// Whether the chain has more output rows than input rows.
    pub fn is_expanding(&self) -> bool {
        self.expanding
    }

    pub fn signatures(&self) -> Vec<FactorSignature> {
        self.factors.iter().map(|f| *f.signature()).collect()
    }

    /// `(p_m, q_1)`, the shape of the dense product.
    pub fn shape(&self) -> (usize, usize) {
        (
            self.factors[self.factors.len() - 1].signature().p(),
            self.factors[0].signature().q(),
        )
    }

    /// Replaces the values of one factor, keeping every structure.
    pub fn with_factor_values(&self, index: usize, values: Vec<f64>) -> Result<Self> {
        let mut factors = self.factors.clone();
        let slot = factors.get_mut(index).ok_or_else(|| {
            DebutError::InvalidOption(format!("factor index {index} out of range"))
        })?;
        *slot = slot.with_values(values)?;
        Ok(DeButChain {
            factors,
            kind: self.kind,
            expanding: self.expanding,
        })
    }

    /// `R_m · (… · (R_1 · m))`, applied one factor at a time.
    pub fn apply(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.apply_with(m, &mut |_| NoTally, |_, _| {})
    }

    /// [`apply`](Self::apply) that also counts multiply-adds per factor.
    pub fn apply_counted(&self, m: &DMatrix<f64>) -> Result<(DMatrix<f64>, FactorMacs)> {
        let mut counters = vec![MacCounter::default(); self.factors.len()];
        let out = self.apply_with(m, &mut |_| MacCounter::default(), |i, c| {
            counters[i] = c;
        })?;
        let mut macs = FactorMacs::default();
        for c in counters {
            macs.push(c);
        }
        Ok((out, macs))
    }

    fn apply_with<T: Tally>(
        &self,
        m: &DMatrix<f64>,
        make: &mut dyn FnMut(usize) -> T,
        mut done: impl FnMut(usize, T),
    ) -> Result<DMatrix<f64>> {
        self.check_input(m)?;
        let (rows, _) = self.shape();
        let n = m.ncols();
        let mut tallies: Vec<T> = (0..self.factors.len()).map(&mut *make).collect();
        let mut out = DMatrix::<f64>::zeros(rows, n);
        // Tiles of samples keep every intermediate of a tile in cache.
        for start in (0..n).step_by(SAMPLE_TILE) {
            let len = SAMPLE_TILE.min(n - start);
            let mut current = m.columns(start, len).transpose();
            for (f, tally) in self.factors.iter().zip(tallies.iter_mut()) {
                current = f.apply_feature_major(&current, tally);
            }
            out.columns_mut(start, len).tr_copy_from(&current);
        }
        for (i, tally) in tallies.into_iter().enumerate() {
            done(i, tally);
        }
        Ok(out)
    }

    /// Column-parallel [`apply`](Self::apply). Every output entry follows the
    /// same arithmetic as the serial path, so results are bitwise identical
    /// for any thread count.
    pub fn apply_parallel(&self, m: &DMatrix<f64>, threads: usize) -> Result<DMatrix<f64>> {
        self.check_input(m)?;
        let (rows, _) = self.shape();
        let n = m.ncols();
        let mut out = DMatrix::<f64>::zeros(rows, n);
        if n == 0 {
            return Ok(out);
        }
        let threads = threads.clamp(1, n);
        let per = n.div_ceil(threads);
        std::thread::scope(|scope| -> Result<()> {
            let handles: Vec<_> = (0..n)
                .step_by(per)
                .map(|start| {
                    let len = per.min(n - start);
                    let chunk = m.columns(start, len).into_owned();
                    scope.spawn(move || self.apply(&chunk).map(|y| (start, y)))
                })
                .collect();
            for h in handles {
                let (start, y) = h.join().expect("worker panicked")?;
                out.columns_mut(start, y.ncols()).copy_from(&y);
            }
            Ok(())
        })?;
        Ok(out)
    }

    fn check_input(&self, m: &DMatrix<f64>) -> Result<()> {
        let (_, q) = self.shape();
        if m.nrows() != q {
            return Err(DebutError::shape(
                "apply_chain",
                format!("{q} rows"),
                format!("{} rows", m.nrows()),
            ));
        }
        Ok(())
    }

    /// Dense product `R_m · … · R_1`.
    pub fn expand(&self) -> DMatrix<f64> {
        self.expand_range(0, self.factors.len())
    }

    /// Dense product of `factors()[start..end]` (`start < end`), built with
    /// structured products only.
    pub(crate) fn expand_range(&self, start: usize, end: usize) -> DMatrix<f64> {
        let mut acc = self.factors[start].to_dense().transpose();
        for f in &self.factors[start + 1..end] {
            acc = f.apply_feature_major(&acc, &mut NoTally);
        }
        acc.transpose()
    }

    /// Statistics against the dense `p_m × q_1` matrix.
    pub fn stats(&self) -> ChainStats {
        let (p, q) = self.shape();
        self.stats_against((p * q) as u64)
    }

    /// Statistics against an explicit dense parameter count, e.g. the
    /// unpadded `C_o·C_i·k²` of a convolution layer.
    pub fn stats_against(&self, dense_params: u64) -> ChainStats {
        let per: Vec<u64> = self
            .factors
            .iter()
            .map(|f| f.signature().nnz() as u64)
            .collect();
        let nnz_total: u64 = per.iter().sum();
        ChainStats {
            nnz_total,
            macs_per_column: nnz_total,
            macs_bound: per.iter().copied().max().unwrap_or(0),
            dense_params,
            compression_ratio: 1.0 - nnz_total as f64 / dense_params as f64,
        }
    }

    /// Fresh values drawn i.i.d. per factor. Deterministic for a given seed.
    pub fn random_init(&self, seed: u64, scheme: InitScheme) -> DeButChain {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let factors = self
            .factors
            .iter()
            .map(|f| {
                let sig = *f.signature();
                let n = sig.nnz();
                let var = 1.0 / sig.s() as f64;
                let values: Vec<f64> = match scheme {
                    InitScheme::Zeros => vec![0.0; n],
                    InitScheme::Ones => vec![1.0; n],
                    InitScheme::UniformFanin => {
                        let a = (3.0 * var).sqrt();
                        (0..n).map(|_| rng.random_range(-a..a)).collect()
                    }
                    InitScheme::GaussianFanin => {
                        let normal = Normal::new(0.0, var.sqrt()).expect("finite variance");
                        (0..n).map(|_| normal.sample(&mut rng)).collect()
                    }
                };
                DeButFactor::new(sig, Some(values)).expect("length matches signature")
            })
            .collect();
        DeButChain {
            factors,
            kind: self.kind,
            expanding: self.expanding,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(p: usize, q: usize, r: usize, s: usize, t: usize) -> FactorSignature {
        FactorSignature::new(p, q, r, s, t).unwrap()
    }

    fn six_by_27() -> Vec<FactorSignature> {
        vec![sig(18, 27, 2, 3, 1), sig(6, 18, 1, 3, 2), sig(6, 6, 3, 3, 2)]
    }

    #[test]
    fn classify_examples() {
        assert_eq!(validate_chain(&six_by_27()).unwrap(), ChainKind::Monotonic);
        assert_eq!(
            validate_chain(&[sig(16, 8, 2, 1, 1), sig(8, 16, 4, 8, 2)]).unwrap(),
            ChainKind::Bulging
        );
        assert!(matches!(
            validate_chain(&[sig(18, 27, 2, 3, 1), sig(6, 18, 1, 3, 1)]),
            Err(DebutError::TRecursionBreak { factor: 2 })
        ));
    }

    #[test]
    fn break_detection() {
        assert!(matches!(validate_chain(&[]), Err(DebutError::EmptyChain)));
        assert!(matches!(
            validate_chain(&[sig(18, 27, 2, 3, 1), sig(6, 12, 1, 2, 3)]),
            Err(DebutError::ShapeChainBreak { factor: 2 })
        ));
        // Leftmost factor must be one block.
        assert!(matches!(
            validate_chain(&[sig(18, 27, 2, 3, 1)]),
            Err(DebutError::TRecursionBreak { factor: 1 })
        ));
        assert!(matches!(
            validate_chain(&[sig(6, 6, 3, 3, 2)]),
            Err(DebutError::TRecursionBreak { factor: 1 })
        ));
    }

    #[test]
    fn reversed_chain_is_rejected() {
        let mut sigs = six_by_27();
        sigs.reverse();
        assert!(validate_chain(&sigs).is_err());
    }

    #[test]
    fn expanding_chains() {
        // 4 -> 8 growing monotonically.
        let grow = DeButChain::from_block_shapes(&[(2, 1), (2, 2)]).unwrap();
        assert_eq!(grow.shape(), (4, 2));
        assert!(grow.is_expanding());
        assert_eq!(grow.kind(), ChainKind::Monotonic);
        // Expanding overall with an intermediate dip.
        let dip = DeButChain::from_block_shapes(&[(1, 2), (4, 1)]).unwrap();
        assert_eq!(dip.shape(), (4, 2));
        assert_eq!(dip.kind(), ChainKind::Bulging);
    }

    #[test]
    fn block_shapes_reproduce_signatures() {
        let c = DeButChain::from_block_shapes(&[(2, 3), (1, 3), (3, 3)]).unwrap();
        assert_eq!(c.signatures(), six_by_27());
        let g = DeButChain::from_block_shapes(&[(8, 9), (2, 4), (2, 4), (2, 4)]).unwrap();
        let pq: Vec<_> = g.signatures().iter().map(|s| (s.p(), s.q())).collect();
        assert_eq!(pq, vec![(512, 576), (256, 512), (128, 256), (64, 128)]);
    }

    #[test]
    fn stats_examples() {
        let c = DeButChain::from_signatures(&six_by_27()).unwrap();
        let st = c.stats();
        assert_eq!(st.nnz_total, 90);
        assert_eq!(st.dense_params, 162);
        assert_eq!(st.macs_bound, 54);
        assert!((st.compression_ratio - (1.0 - 90.0 / 162.0)).abs() < 1e-15);

        let g = DeButChain::from_block_shapes(&[(8, 9), (2, 4), (2, 4), (2, 4)]).unwrap();
        let st = g.stats();
        assert_eq!(st.nnz_total, 6400);
        assert_eq!(st.dense_params, 36864);
        assert!((st.compression_ratio - 0.826_388_888).abs() < 1e-6);

        let dense = DeButChain::from_signatures(&[sig(5, 7, 5, 7, 1)]).unwrap();
        assert_eq!(dense.stats().compression_ratio, 0.0);
    }

    #[test]
    fn init_schemes() {
        let c = DeButChain::from_signatures(&six_by_27()).unwrap();
        let z = c.random_init(1, InitScheme::Zeros);
        assert!(z.factors().iter().all(|f| f.values().iter().all(|&v| v == 0.0)));
        let a = c.random_init(7, InitScheme::UniformFanin);
        let b = c.random_init(7, InitScheme::UniformFanin);
        assert_eq!(a, b);
        assert_ne!(a, c.random_init(8, InitScheme::UniformFanin));
        for f in a.factors() {
            let bound = (3.0 / f.signature().s() as f64).sqrt();
            assert!(f.values().iter().all(|v| v.abs() <= bound));
        }
        assert!(matches!(
            "xavier".parse::<InitScheme>(),
            Err(DebutError::UnknownScheme(_))
        ));
        assert_eq!("gaussian-fanin".parse::<InitScheme>().unwrap(), InitScheme::GaussianFanin);
    }

    #[test]
    fn ones_chain_on_ones_input() {
        // Brute-force dense product of the 0/1 masks: exactly one path links
        // every input to every output, so each output sums 27 ones.
        let c = DeButChain::from_signatures(&six_by_27())
            .unwrap()
            .random_init(0, InitScheme::Ones);
        let dense = c.expand();
        assert!(dense.iter().all(|&v| v == 1.0));
        let out = c.apply(&DMatrix::from_element(27, 1, 1.0)).unwrap();
        assert_eq!(out.as_slice(), &[27.0; 6]);
    }

    #[test]
    fn apply_counts_and_parallel() {
        let c = DeButChain::from_signatures(&six_by_27())
            .unwrap()
            .random_init(3, InitScheme::UniformFanin);
        let m = DMatrix::from_fn(27, 11, |i, j| ((i * 7 + j * 3) % 13) as f64 - 6.0);
        let (out, macs) = c.apply_counted(&m).unwrap();
        assert_eq!(macs.per_factor(), &[54 * 11, 18 * 11, 18 * 11]);
        assert_eq!(macs.total(), 90 * 11);
        assert_eq!(macs.max_factor(), 54 * 11);
        for threads in [1, 2, 3, 16] {
            assert_eq!(c.apply_parallel(&m, threads).unwrap(), out);
        }
        assert!(c.apply(&DMatrix::zeros(26, 1)).is_err());
    }

    #[test]
    fn zero_chain_expands_to_zero() {
        let c = DeButChain::from_signatures(&six_by_27()).unwrap();
        let d = c.expand();
        assert_eq!(d.shape(), (6, 27));
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn with_factor_values_keeps_structure() {
        let c = DeButChain::from_signatures(&six_by_27()).unwrap();
        let c2 = c.with_factor_values(1, vec![2.0; 18]).unwrap();
        assert_eq!(c2.signatures(), c.signatures());
        assert!(c.with_factor_values(1, vec![2.0; 17]).is_err());
        assert!(c.with_factor_values(5, vec![]).is_err());
    }
}
