//! A single DeBut factor `R^{(p,q)}_{(r,s,t)}`.
//!
//! The factor is a `p × q` matrix made of `b` diagonal blocks, where each
//! block is an `r × s` grid of `t × t` diagonal matrices and
//! `b = p / (r·t) = q / (s·t)`. Entry `(i, j)` can be nonzero iff `i` and `j`
//! fall in the same diagonal block and share the same residue modulo `t`
//! inside that block. Every row therefore holds `s` nonzeros and every column
//! `r`, for `p·s == q·r` nonzeros in total.
//!
//! Values are stored row-major over that mask: ascending row, then ascending
//! column within the row. Row `i` owns `values[i*s .. (i+1)*s]`.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{DebutError, Result};
use crate::tally::{NoTally, Tally};

/// Shape parameters `(p, q, r, s, t)` of a factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawSignature", into = "RawSignature")]
pub struct FactorSignature {
    p: usize,
    q: usize,
    r: usize,
    s: usize,
    t: usize,
}

#[derive(Serialize, Deserialize)]
struct RawSignature {
    p: usize,
    q: usize,
    r: usize,
    s: usize,
    t: usize,
}

impl TryFrom<RawSignature> for FactorSignature {
    type Error = DebutError;

    fn try_from(raw: RawSignature) -> Result<Self> {
        FactorSignature::new(raw.p, raw.q, raw.r, raw.s, raw.t)
    }
}

impl From<FactorSignature> for RawSignature {
    fn from(sig: FactorSignature) -> Self {
        RawSignature {
            p: sig.p,
            q: sig.q,
            r: sig.r,
            s: sig.s,
            t: sig.t,
        }
    }
}

impl FactorSignature {
    pub fn new(p: usize, q: usize, r: usize, s: usize, t: usize) -> Result<Self> {
        let invalid = |reason| DebutError::InvalidSignature {
            p,
            q,
            r,
            s,
            t,
            reason,
        };
        if p == 0 || q == 0 || r == 0 || s == 0 || t == 0 {
            return Err(invalid("all fields must be positive"));
        }
        let row_span = r.checked_mul(t).ok_or_else(|| invalid("r*t overflows"))?;
        let col_span = s.checked_mul(t).ok_or_else(|| invalid("s*t overflows"))?;
        if p % row_span != 0 {
            return Err(invalid("r*t must divide p"));
        }
        if q % col_span != 0 {
            return Err(invalid("s*t must divide q"));
        }
        if p / row_span != q / col_span {
            return Err(invalid("p/(r*t) must equal q/(s*t)"));
        }
        Ok(FactorSignature { p, q, r, s, t })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// Number of diagonal blocks.
    pub fn blocks(&self) -> usize {
        self.p / (self.r * self.t)
    }

    /// Total number of structural nonzeros, `p·s`.
    pub fn nnz(&self) -> usize {
        self.p * self.s
    }

    /// Column of the `k`-th nonzero (`k < s`) in row `i`.
    #[inline]
    pub fn column_of(&self, row: usize, k: usize) -> usize {
        self.row_base(row) + k * self.t
    }

    #[inline]
    fn row_base(&self, row: usize) -> usize {
        let row_span = self.r * self.t;
        let block = row / row_span;
        let residue = (row % row_span) % self.t;
        block * self.s * self.t + residue
    }

    /// Row of the `k`-th nonzero (`k < r`) in column `j`.
    #[inline]
    pub fn row_of(&self, col: usize, k: usize) -> usize {
        let col_span = self.s * self.t;
        let block = col / col_span;
        let residue = (col % col_span) % self.t;
        block * self.r * self.t + residue + k * self.t
    }

    /// Canonical position of entry `(row, col)` in the value array, if the
    /// entry lies in the mask.
    pub fn value_index(&self, row: usize, col: usize) -> Option<usize> {
        if row >= self.p || col >= self.q {
            return None;
        }
        let base = self.row_base(row);
        if col < base {
            return None;
        }
        let offset = col - base;
        if offset % self.t != 0 || offset / self.t >= self.s {
            return None;
        }
        Some(row * self.s + offset / self.t)
    }

    /// Whether `(row, col)` is a structural nonzero.
    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.value_index(row, col).is_some()
    }

    /// Mask positions in canonical order.
    pub fn nonzero_mask(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.p).flat_map(move |i| (0..self.s).map(move |k| (i, self.column_of(i, k))))
    }
}

impl fmt::Display for FactorSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "R^({},{})_({},{},{})",
            self.p, self.q, self.r, self.s, self.t
        )
    }
}

/// Free-function form of [`FactorSignature::nonzero_mask`].
pub fn nonzero_mask(sig: &FactorSignature) -> Vec<(usize, usize)> {
    sig.nonzero_mask().collect()
}

/// A factor together with its nonzero values.
#[derive(Debug, Clone, PartialEq)]
pub struct DeButFactor {
    sig: FactorSignature,
    values: Vec<f64>,
}

impl DeButFactor {
    /// Builds a factor. `None` values produce a zero-filled factor.
    pub fn new(sig: FactorSignature, values: Option<Vec<f64>>) -> Result<Self> {
        let values = match values {
            Some(v) => {
                if v.len() != sig.nnz() {
                    return Err(DebutError::ValueLengthMismatch {
                        expected: sig.nnz(),
                        got: v.len(),
                    });
                }
                v
            }
            None => vec![0.0; sig.nnz()],
        };
        Ok(DeButFactor { sig, values })
    }

    pub fn zeros(sig: FactorSignature) -> Self {
        DeButFactor {
            values: vec![0.0; sig.nnz()],
            sig,
        }
    }

    pub fn signature(&self) -> &FactorSignature {
        &self.sig
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Same structure, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        DeButFactor::new(self.sig, Some(values))
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Structured product `self · m`, touching only the `p·s` nonzeros per column.
    pub fn apply(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.apply_tallied(m, &mut NoTally)
    }

    /// [`apply`](Self::apply) with every multiply-add reported to `tally`.
    pub fn apply_tallied<T: Tally>(&self, m: &DMatrix<f64>, tally: &mut T) -> Result<DMatrix<f64>> {
        let sig = &self.sig;
        if m.nrows() != sig.q {
            return Err(DebutError::shape(
                "apply_factor",
                format!("{} rows", sig.q),
                format!("{} rows", m.nrows()),
            ));
        }
        Ok(self.apply_feature_major(&m.transpose(), tally).transpose())
    }

    /// Product on a transposed operand: `input` is `n × q` and the result is
    /// `n × p`, so every feature is one contiguous column and each nonzero
    /// becomes an axpy over all `n` samples. Each output entry still sums its
    /// `s` terms in row order starting from zero.
    pub(crate) fn apply_feature_major<T: Tally>(&self, input: &DMatrix<f64>, tally: &mut T) -> DMatrix<f64> {
        let sig = &self.sig;
        let n = input.nrows();
        debug_assert_eq!(input.ncols(), sig.q);
        let mut out = DMatrix::<f64>::zeros(n, sig.p);
        if n > 0 {
            kernel::run(sig, &self.values, input.as_slice(), out.as_mut_slice(), n);
        }
        tally.macs((sig.nnz() * n) as u64);
        out
    }

    /// Dense `p × q` expansion.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut dense = DMatrix::<f64>::zeros(self.sig.p, self.sig.q);
        for ((i, j), &v) in self.sig.nonzero_mask().zip(&self.values) {
            dense[(i, j)] = v;
        }
        dense
    }

    /// Reads the mask positions of a dense `p × q` matrix in canonical order.
    /// Off-mask entries are ignored.
    pub fn from_dense_masked(sig: FactorSignature, dense: &DMatrix<f64>) -> Result<Self> {
        if dense.shape() != (sig.p, sig.q) {
            return Err(DebutError::shape(
                "from_dense_masked",
                format!("{}x{}", sig.p, sig.q),
                format!("{}x{}", dense.nrows(), dense.ncols()),
            ));
        }
        let values = sig.nonzero_mask().map(|(i, j)| dense[(i, j)]).collect();
        Ok(DeButFactor { sig, values })
    }
}

mod kernel {
    use super::FactorSignature;

    /// Samples accumulated together in registers.
    const LANES: usize = 8;

    /// `dst` is `n × p` and `src` is `n × q`, both column-major.
    pub(super) fn run(sig: &FactorSignature, values: &[f64], src: &[f64], dst: &mut [f64], n: usize) {
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: the CPU supports the enabled feature.
                unsafe { run_avx2(sig, values, src, dst, n) };
                return;
            }
        }
        run_generic(sig, values, src, dst, n);
    }

    // Separate multiply and add (no fused form), so every build rounds alike.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn run_avx2(sig: &FactorSignature, values: &[f64], src: &[f64], dst: &mut [f64], n: usize) {
        run_generic(sig, values, src, dst, n);
    }

    #[inline(always)]
    fn run_generic(sig: &FactorSignature, values: &[f64], src: &[f64], dst: &mut [f64], n: usize) {
        let (s, t) = (sig.s(), sig.t());
        for (i, (row_vals, out)) in values.chunks_exact(s).zip(dst.chunks_exact_mut(n)).enumerate() {
            let base = sig.column_of(i, 0);
            let mut lane = 0;
            while lane + LANES <= n {
                let mut acc = [0.0; LANES];
                for (k, &w) in row_vals.iter().enumerate() {
                    let at = (base + k * t) * n + lane;
                    let x = &src[at..at + LANES];
                    for j in 0..LANES {
                        acc[j] += w * x[j];
                    }
                }
                out[lane..lane + LANES].copy_from_slice(&acc);
                lane += LANES;
            }
            for (j, d) in out.iter_mut().enumerate().skip(lane) {
                let mut acc = 0.0;
                for (k, &w) in row_vals.iter().enumerate() {
                    acc += w * src[(base + k * t) * n + j];
                }
                *d = acc;
            }
        }
    }
}
