//! Convolution through im2col, through a chain, and through the
//! depthwise / masked-pointwise reading of a chain.
//!
//! All convolutions are cross-correlations with zero padding. The im2col
//! panel of an `H_i × W_i × C_i` input has one row per `(c, u, v)`, indexed
//! `c·k² + u·k + v` (channel slowest), and one column per output position,
//! indexed `h_o·W_o + w_o`. Filter banks flatten with the same column order, so
//! `flatten_filters(K) · im2col(X)` is the convolution.
//!
//! A chain whose input width exceeds `C_i·k²` (channels rounded up to a power
//! of two) sees zero rows in place of the missing channels, and output rows
//! beyond `C_o` are dropped.

use std::collections::BTreeSet;

use nalgebra::DMatrix;

use crate::chain::DeButChain;
use crate::error::{DebutError, Result};
use crate::factor::DeButFactor;
use crate::generator::LayerSpec;
use crate::tensor::Tensor;

/// Stride and zero padding of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
}

impl Default for ConvParams {
    fn default() -> Self {
        ConvParams {
            stride: 1,
            padding: 0,
        }
    }
}

impl ConvParams {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvParams { stride, padding }
    }

    /// Output extent along one axis.
    pub fn output_len(&self, input: usize, k: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(DebutError::InvalidOption("stride must be positive".into()));
        }
        let err = DebutError::NonIntegralOutput {
            input,
            k,
            stride: self.stride,
            padding: self.padding,
        };
        let span = input + 2 * self.padding;
        if span < k || (span - k) % self.stride != 0 {
            return Err(err);
        }
        Ok((span - k) / self.stride + 1)
    }

    /// Input coordinate read by output coordinate `o` at window offset `u`,
    /// or `None` inside the zero padding.
    #[inline]
    fn source(&self, o: usize, u: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + u).checked_sub(self.padding)?;
        (pos < extent).then_some(pos)
    }
}

/// Lowers `x` (`H_i × W_i × C_i`) to its `(C_i·k²) × (H_o·W_o)` panel.
pub fn im2col(x: &Tensor, k: usize, params: ConvParams) -> Result<DMatrix<f64>> {
    let (h, w, c) = x.image_dims()?;
    let ho = params.output_len(h, k)?;
    let wo = params.output_len(w, k)?;
    let mut panel = DMatrix::<f64>::zeros(c * k * k, ho * wo);
    for oh in 0..ho {
        for ow in 0..wo {
            let col = oh * wo + ow;
            for u in 0..k {
                let Some(ih) = params.source(oh, u, h) else { continue };
                for v in 0..k {
                    let Some(iw) = params.source(ow, v, w) else { continue };
                    for ch in 0..c {
                        panel[(ch * k * k + u * k + v, col)] = x.get(&[ih, iw, ch]);
                    }
                }
            }
        }
    }
    Ok(panel)
}

/// `k × k × C_i × C_o` filters to the `C_o × (C_i·k²)` matrix.
pub fn flatten_filters(kern: &Tensor) -> Result<DMatrix<f64>> {
    let (k, c_in, c_out) = filter_dims(kern)?;
    Ok(DMatrix::from_fn(c_out, c_in * k * k, |o, col| {
        let (ch, pix) = (col / (k * k), col % (k * k));
        kern.get(&[pix / k, pix % k, ch, o])
    }))
}

/// Inverse of [`flatten_filters`].
pub fn unflatten_filters(f: &DMatrix<f64>, k: usize, c_in: usize) -> Result<Tensor> {
    if k == 0 || f.ncols() != c_in * k * k {
        return Err(DebutError::shape(
            "unflatten_filters",
            format!("{} columns", c_in * k * k),
            format!("{} columns", f.ncols()),
        ));
    }
    let c_out = f.nrows();
    Ok(Tensor::from_fn(vec![k, k, c_in, c_out], |i| {
        f[(i[3], i[2] * k * k + i[0] * k + i[1])]
    }))
}

fn filter_dims(kern: &Tensor) -> Result<(usize, usize, usize)> {
    match kern.dims()[..] {
        [k1, k2, c_in, c_out] if k1 == k2 => Ok((k1, c_in, c_out)),
        _ => Err(DebutError::shape(
            "filter bank",
            "k x k x C_i x C_o",
            format!("{:?}", kern.dims()),
        )),
    }
}

/// Sliding-window cross-correlation; the ground truth for every other path.
pub fn conv_direct(kern: &Tensor, x: &Tensor, params: ConvParams) -> Result<Tensor> {
    let (k, c_in, c_out) = filter_dims(kern)?;
    let (h, w, c) = x.image_dims()?;
    if c != c_in {
        return Err(DebutError::shape("conv_direct", format!("{c_in} channels"), format!("{c} channels")));
    }
    let ho = params.output_len(h, k)?;
    let wo = params.output_len(w, k)?;
    let mut out = Tensor::zeros(vec![ho, wo, c_out]);
    for oh in 0..ho {
        for ow in 0..wo {
            for o in 0..c_out {
                let mut acc = 0.0;
                for u in 0..k {
                    let Some(ih) = params.source(oh, u, h) else { continue };
                    for v in 0..k {
                        let Some(iw) = params.source(ow, v, w) else { continue };
                        for ch in 0..c_in {
                            acc += kern.get(&[u, v, ch, o]) * x.get(&[ih, iw, ch]);
                        }
                    }
                }
                out.set(&[oh, ow, o], acc);
            }
        }
    }
    Ok(out)
}

/// A layer's linear map: a dense flattened filter or a chain.
#[derive(Debug, Clone)]
pub enum LayerOperator {
    Dense(DMatrix<f64>),
    Chain(DeButChain),
}

impl LayerOperator {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            LayerOperator::Dense(m) => m.shape(),
            LayerOperator::Chain(c) => c.shape(),
        }
    }

    pub fn apply(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            LayerOperator::Dense(f) => {
                if f.ncols() != m.nrows() {
                    return Err(DebutError::shape(
                        "dense operator",
                        format!("{} rows", f.ncols()),
                        format!("{} rows", m.nrows()),
                    ));
                }
                Ok(f * m)
            }
            LayerOperator::Chain(c) => c.apply(m),
        }
    }

    /// Dense matrix of the operator.
    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            LayerOperator::Dense(m) => m.clone(),
            LayerOperator::Chain(c) => c.expand(),
        }
    }
}

fn check_operator(shape: (usize, usize), layer: &LayerSpec) -> Result<()> {
    let (rows, cols) = shape;
    let need_cols = layer.c_in * layer.k * layer.k;
    if cols < need_cols || rows < layer.c_out {
        return Err(DebutError::shape(
            "layer operator",
            format!("at least {}x{}", layer.c_out, need_cols),
            format!("{rows}x{cols}"),
        ));
    }
    Ok(())
}

/// Zero-extends the panel to `width` rows.
fn pad_rows(panel: DMatrix<f64>, width: usize) -> DMatrix<f64> {
    let rows = panel.nrows();
    if rows == width {
        panel
    } else {
        panel.insert_rows(rows, width - rows, 0.0)
    }
}

/// First `c_out` rows of `y` (`rows × H_o·W_o`) as an `H_o × W_o × c_out` map.
fn reshape_output(y: &DMatrix<f64>, ho: usize, wo: usize, c_out: usize) -> Tensor {
    Tensor::from_fn(vec![ho, wo, c_out], |i| y[(i[2], i[0] * wo + i[1])])
}

/// Convolution through any layer operator, with zero padding of missing
/// input rows and truncation of extra output rows.
pub fn conv_via_operator(
    op: &LayerOperator,
    x: &Tensor,
    layer: &LayerSpec,
    params: ConvParams,
) -> Result<Tensor> {
    check_operator(op.shape(), layer)?;
    let (h, w, c) = x.image_dims()?;
    if c != layer.c_in {
        return Err(DebutError::shape("input", format!("{} channels", layer.c_in), format!("{c} channels")));
    }
    let ho = params.output_len(h, layer.k)?;
    let wo = params.output_len(w, layer.k)?;
    let panel = pad_rows(im2col(x, layer.k, params)?, op.shape().1);
    let y = op.apply(&panel)?;
    Ok(reshape_output(&y, ho, wo, layer.c_out))
}

/// Convolution computed by applying the chain factor by factor to the
/// (zero-padded) im2col panel.
pub fn conv_via_chain(
    chain: &DeButChain,
    x: &Tensor,
    layer: &LayerSpec,
    params: ConvParams,
) -> Result<Tensor> {
    conv_via_operator(&LayerOperator::Chain(chain.clone()), x, layer, params)
}

/// The filter bank equivalent to a chain on `layer`: the expanded product
/// restricted to the real input and output channels.
pub fn chain_filters(chain: &DeButChain, layer: &LayerSpec) -> Result<Tensor> {
    check_operator(chain.shape(), layer)?;
    let dense = chain.expand();
    let cols = layer.c_in * layer.k * layer.k;
    let f = dense.view((0, 0), (layer.c_out, cols)).into_owned();
    unflatten_filters(&f, layer.k, layer.c_in)
}

/// How the rightmost factor's row width `s_1` compares to the window size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingCase {
    /// `s_1 < k²`: each row sees part of a window.
    SubSampling,
    /// `s_1 == k²`: each row is one depthwise kernel.
    Exact,
    /// `s_1 > k²`: each row sees more than one window's worth of taps.
    UpSampling,
}

pub fn classify_rightmost(f1: &DeButFactor, k: usize) -> SamplingCase {
    use std::cmp::Ordering::*;
    match f1.signature().s().cmp(&(k * k)) {
        Less => SamplingCase::SubSampling,
        Equal => SamplingCase::Exact,
        Greater => SamplingCase::UpSampling,
    }
}

/// One weighted window pixel of a depthwise row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub channel: usize,
    /// Window row and column.
    pub u: usize,
    pub v: usize,
    pub weight: f64,
}

/// Rightmost factor read as a (sub/exact/up-sampled) depthwise convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseStage {
    pub k: usize,
    pub case: SamplingCase,
    /// Rows per diagonal block, i.e. kernels sharing the same pixels.
    pub kernels_per_channel: usize,
    /// Taps of every row, in column order. Taps on padding channels are kept.
    pub rows: Vec<Vec<Tap>>,
}

impl DepthwiseStage {
    /// Distinct channels a row reads.
    pub fn row_channels(&self, row: usize) -> BTreeSet<usize> {
        self.rows[row].iter().map(|t| t.channel).collect()
    }

    /// Rows that mix pixels from more than one channel.
    pub fn cross_channel_rows(&self) -> Vec<usize> {
        (0..self.rows.len())
            .filter(|&i| self.row_channels(i).len() > 1)
            .collect()
    }

    /// Window pixels (`u·k + v`) reached on `channel` by the union of all rows.
    pub fn pixel_coverage(&self, channel: usize) -> BTreeSet<usize> {
        self.rows
            .iter()
            .flatten()
            .filter(|t| t.channel == channel)
            .map(|t| t.u * self.k + t.v)
            .collect()
    }
}

/// A later factor read as a pointwise convolution with per-row slice masks.
#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseStage {
    pub in_slices: usize,
    /// For each output slice, `(input slice, weight)` pairs; slices absent from
    /// the list are masked to zero.
    pub rows: Vec<Vec<(usize, f64)>>,
}

/// A chain rewritten as one depthwise stage followed by masked pointwise stages.
#[derive(Debug, Clone, PartialEq)]
pub struct DscPlan {
    pub c_in: usize,
    pub c_out: usize,
    pub depthwise: DepthwiseStage,
    pub pointwise: Vec<PointwiseStage>,
}

/// Reads a chain as a depthwise stage plus `m - 1` masked pointwise stages.
pub fn interpret_as_dsc(chain: &DeButChain, layer: &LayerSpec) -> Result<DscPlan> {
    check_operator(chain.shape(), layer)?;
    let k = layer.k;
    let kk = k * k;
    let f1 = &chain.factors()[0];
    let sig = f1.signature();
    let rows = (0..sig.p())
        .map(|i| {
            (0..sig.s())
                .map(|j| {
                    let col = sig.column_of(i, j);
                    let pix = col % kk;
                    Tap {
                        channel: col / kk,
                        u: pix / k,
                        v: pix % k,
                        weight: f1.values()[i * sig.s() + j],
                    }
                })
                .collect()
        })
        .collect();
    let depthwise = DepthwiseStage {
        k,
        case: classify_rightmost(f1, k),
        kernels_per_channel: sig.r(),
        rows,
    };
    let pointwise = chain.factors()[1..]
        .iter()
        .map(|f| {
            let sig = f.signature();
            PointwiseStage {
                in_slices: sig.q(),
                rows: (0..sig.p())
                    .map(|i| {
                        (0..sig.s())
                            .map(|j| (sig.column_of(i, j), f.values()[i * sig.s() + j]))
                            .collect()
                    })
                    .collect(),
            }
        })
        .collect();
    Ok(DscPlan {
        c_in: layer.c_in,
        c_out: layer.c_out,
        depthwise,
        pointwise,
    })
}

/// Executes a [`DscPlan`] directly on the feature map: windowed depthwise
/// taps first, then per-pixel masked channel mixing.
pub fn apply_dsc(plan: &DscPlan, x: &Tensor, params: ConvParams) -> Result<Tensor> {
    let (h, w, c) = x.image_dims()?;
    if c != plan.c_in {
        return Err(DebutError::shape("apply_dsc", format!("{} channels", plan.c_in), format!("{c} channels")));
    }
    let k = plan.depthwise.k;
    let ho = params.output_len(h, k)?;
    let wo = params.output_len(w, k)?;

    let slices = plan.depthwise.rows.len();
    let mut current = Tensor::zeros(vec![ho, wo, slices]);
    for oh in 0..ho {
        for ow in 0..wo {
            for (slice, taps) in plan.depthwise.rows.iter().enumerate() {
                let mut acc = 0.0;
                for tap in taps {
                    let src = if tap.channel < c {
                        params
                            .source(oh, tap.u, h)
                            .zip(params.source(ow, tap.v, w))
                            .map(|(ih, iw)| x.get(&[ih, iw, tap.channel]))
                    } else {
                        None
                    };
                    acc += tap.weight * src.unwrap_or(0.0);
                }
                current.set(&[oh, ow, slice], acc);
            }
        }
    }

    for stage in &plan.pointwise {
        if current.dims()[2] != stage.in_slices {
            return Err(DebutError::shape(
                "pointwise stage",
                format!("{} slices", stage.in_slices),
                format!("{} slices", current.dims()[2]),
            ));
        }
        let mut next = Tensor::zeros(vec![ho, wo, stage.rows.len()]);
        for oh in 0..ho {
            for ow in 0..wo {
                for (slice, mask) in stage.rows.iter().enumerate() {
                    let acc = mask
                        .iter()
                        .fold(0.0, |acc, &(src, wgt)| acc + wgt * current.get(&[oh, ow, src]));
                    next.set(&[oh, ow, slice], acc);
                }
            }
        }
        current = next;
    }

    if current.dims()[2] < plan.c_out {
        return Err(DebutError::shape(
            "apply_dsc",
            format!("at least {} output slices", plan.c_out),
            format!("{}", current.dims()[2]),
        ));
    }
    Ok(Tensor::from_fn(vec![ho, wo, plan.c_out], |i| current.get(&[i[0], i[1], i[2]])))
}

/// Idealized product form: `ops[L-1] · … · ops[0] · x`, layer 1 applied first.
pub fn feature_forward_matrix(ops: &[LayerOperator], x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    ops.iter().try_fold(x.clone(), |acc, op| op.apply(&acc))
}

/// One layer of a spatial forward pass.
#[derive(Debug, Clone)]
pub struct SpatialLayer {
    pub op: LayerOperator,
    pub layer: LayerSpec,
    pub params: ConvParams,
}

/// Layer-by-layer convolution, re-lowering the feature map with im2col
/// between layers. Returns the last output flattened to `C_o × (H_o·W_o)`.
pub fn feature_forward_spatial(layers: &[SpatialLayer], x: &Tensor) -> Result<DMatrix<f64>> {
    let mut current = x.clone();
    for l in layers {
        current = conv_via_operator(&l.op, &current, &l.layer, l.params)?;
    }
    let (h, w, c) = current.image_dims()?;
    Ok(DMatrix::from_fn(c, h * w, |ch, pos| current.get(&[pos / w, pos % w, ch])))
}

/// How feature columns become probability vectors before the KL sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    /// Softmax with temperature 1.
    #[default]
    Softmax,
    /// Negative entries clamped to zero, then rescaled to sum to one. An
    /// all-zero column becomes uniform.
    ClampRenormalize,
}

fn normalize(col: &[f64], mode: Normalization) -> Vec<f64> {
    match mode {
        Normalization::Softmax => {
            let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = col.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exp.iter().sum();
            exp.into_iter().map(|e| e / sum).collect()
        }
        Normalization::ClampRenormalize => {
            let clamped: Vec<f64> = col.iter().map(|v| v.max(0.0)).collect();
            let sum: f64 = clamped.iter().sum();
            if sum > 0.0 {
                clamped.into_iter().map(|v| v / sum).collect()
            } else {
                vec![1.0 / col.len() as f64; col.len()]
            }
        }
    }
}

/// Mean over columns of `D_KL(P ‖ Q)`, where `P` and `Q` are the normalized
/// columns of `a` and `b`.
pub fn kl_feature_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    kl_feature_distance_with(a, b, Normalization::Softmax)
}

pub fn kl_feature_distance_with(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    mode: Normalization,
) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(DebutError::shape(
            "kl_feature_distance",
            format!("{}x{}", a.nrows(), a.ncols()),
            format!("{}x{}", b.nrows(), b.ncols()),
        ));
    }
    if a.ncols() == 0 || a.nrows() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for j in 0..a.ncols() {
        let p = normalize(a.column(j).as_slice(), mode);
        let q = normalize(b.column(j).as_slice(), mode);
        let d: f64 = p
            .iter()
            .zip(&q)
            .filter(|(&pi, _)| pi > 0.0)
            .map(|(&pi, &qi)| pi * (pi / qi).ln())
            .sum();
        total += d.max(0.0);
    }
    Ok(total / a.ncols() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::InitScheme;

    fn ramp(dims: Vec<usize>) -> Tensor {
        let mut n = 0.0;
        Tensor::from_fn(dims, |_| {
            n += 1.0;
            (n * 0.37f64).sin()
        })
    }

    /// Window extraction written independently of `im2col`.
    fn window(x: &Tensor, oh: usize, ow: usize, ch: usize, k: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for u in 0..k {
            for v in 0..k {
                out.push(x.get(&[oh + u, ow + v, ch]));
            }
        }
        out
    }

    #[test]
    fn im2col_single_window() {
        let x = ramp(vec![3, 3, 1]);
        let panel = im2col(&x, 3, ConvParams::default()).unwrap();
        assert_eq!(panel.shape(), (9, 1));
        assert_eq!(panel.as_slice(), x.data());
    }

    #[test]
    fn im2col_windows_and_channels() {
        let x = ramp(vec![4, 4, 3]);
        let panel = im2col(&x, 3, ConvParams::default()).unwrap();
        assert_eq!(panel.shape(), (27, 4));
        for col in 0..4 {
            let (oh, ow) = (col / 2, col % 2);
            for ch in 0..3 {
                let expect = window(&x, oh, ow, ch, 3);
                let got: Vec<f64> = (0..9).map(|r| panel[(ch * 9 + r, col)]).collect();
                assert_eq!(got, expect);
            }
        }
    }

    #[test]
    fn output_size_errors() {
        let x = ramp(vec![4, 4, 1]);
        assert!(matches!(
            im2col(&x, 3, ConvParams::new(2, 0)),
            Err(DebutError::NonIntegralOutput { .. })
        ));
        assert!(im2col(&x, 5, ConvParams::default()).is_err());
        assert!(im2col(&x, 3, ConvParams::new(0, 0)).is_err());
        assert_eq!(ConvParams::new(2, 1).output_len(5, 3).unwrap(), 3);
    }

    #[test]
    fn flatten_identity_and_roundtrip() {
        let c = 4;
        let eye = Tensor::from_fn(vec![1, 1, c, c], |i| if i[2] == i[3] { 1.0 } else { 0.0 });
        assert_eq!(flatten_filters(&eye).unwrap(), DMatrix::identity(c, c));

        let kern = ramp(vec![3, 3, 3, 6]);
        let f = flatten_filters(&kern).unwrap();
        assert_eq!(f.shape(), (6, 27));
        assert_eq!(unflatten_filters(&f, 3, 3).unwrap(), kern);
    }

    #[test]
    fn direct_conv_cases() {
        let ones_k = Tensor::from_fn(vec![3, 3, 1, 1], |_| 1.0);
        let ones_x = Tensor::from_fn(vec![3, 3, 1], |_| 1.0);
        let out = conv_direct(&ones_k, &ones_x, ConvParams::default()).unwrap();
        assert_eq!(out.dims(), &[1, 1, 1]);
        assert_eq!(out.data(), &[9.0]);

        let delta = Tensor::from_fn(vec![3, 3, 2, 2], |i| {
            if i[0] == 1 && i[1] == 1 && i[2] == i[3] { 1.0 } else { 0.0 }
        });
        let x = ramp(vec![5, 4, 2]);
        assert_eq!(conv_direct(&delta, &x, ConvParams::new(1, 1)).unwrap(), x);
    }

    #[test]
    fn gemm_matches_direct() {
        let kern = ramp(vec![3, 3, 2, 5]);
        let x = ramp(vec![7, 5, 2]);
        for params in [ConvParams::default(), ConvParams::new(1, 1), ConvParams::new(2, 1)] {
            let direct = conv_direct(&kern, &x, params).unwrap();
            let (ho, wo, _) = direct.image_dims().unwrap();
            let y = flatten_filters(&kern).unwrap() * im2col(&x, 3, params).unwrap();
            let via = reshape_output(&y, ho, wo, 5);
            assert!(direct.max_abs_diff(&via).unwrap() < 1e-12);
        }
    }

    fn six_by_27() -> DeButChain {
        DeButChain::from_block_shapes(&[(2, 3), (1, 3), (3, 3)])
            .unwrap()
            .random_init(11, InitScheme::UniformFanin)
    }

    #[test]
    fn chain_conv_matches_oracle() {
        let layer = LayerSpec::new(3, 3, 6);
        let chain = six_by_27();
        let x = ramp(vec![4, 4, 3]);
        let via = conv_via_chain(&chain, &x, &layer, ConvParams::default()).unwrap();
        let oracle = conv_direct(&chain_filters(&chain, &layer).unwrap(), &x, ConvParams::default()).unwrap();
        assert!(via.max_abs_diff(&oracle).unwrap() < 1e-12);

        let zero = DeButChain::from_block_shapes(&[(2, 3), (1, 3), (3, 3)]).unwrap();
        let out = conv_via_chain(&zero, &x, &layer, ConvParams::default()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn padded_rows_are_zero() {
        // 3 input channels padded to 4: the chain reads 36 rows.
        let layer = LayerSpec::new(3, 3, 4);
        let chain = DeButChain::from_block_shapes(&[(2, 9), (2, 4)])
            .unwrap()
            .random_init(5, InitScheme::UniformFanin);
        assert_eq!(chain.shape(), (4, 36));
        let x = ramp(vec![5, 5, 3]);
        let via = conv_via_chain(&chain, &x, &layer, ConvParams::default()).unwrap();
        // Changing the weights that only touch padded columns leaves the output alone.
        let mut dense = chain.expand();
        for col in 27..36 {
            for row in 0..4 {
                dense[(row, col)] = 1e6;
            }
        }
        let f = dense.columns(0, 27).into_owned();
        let oracle = conv_direct(&unflatten_filters(&f, 3, 3).unwrap(), &x, ConvParams::default()).unwrap();
        assert!(via.max_abs_diff(&oracle).unwrap() < 1e-12);
    }

    #[test]
    fn operator_shape_checked() {
        let chain = six_by_27();
        let x = ramp(vec![4, 4, 3]);
        assert!(conv_via_chain(&chain, &x, &LayerSpec::new(3, 4, 6), ConvParams::default()).is_err());
        assert!(conv_via_chain(&chain, &x, &LayerSpec::new(3, 3, 7), ConvParams::default()).is_err());
        assert!(conv_via_chain(&chain, &ramp(vec![4, 4, 2]), &LayerSpec::new(3, 3, 6), ConvParams::default()).is_err());
    }

    #[test]
    fn sampling_cases() {
        let f = |s| {
            DeButChain::from_block_shapes(&[(2, s), (1, 1)]).unwrap().factors()[0].clone()
        };
        assert_eq!(classify_rightmost(&f(3), 3), SamplingCase::SubSampling);
        assert_eq!(classify_rightmost(&f(9), 3), SamplingCase::Exact);
        assert_eq!(classify_rightmost(&f(16), 3), SamplingCase::UpSampling);
    }

    #[test]
    fn dsc_description_of_six_by_27() {
        let plan = interpret_as_dsc(&six_by_27(), &LayerSpec::new(3, 3, 6)).unwrap();
        let dw = &plan.depthwise;
        assert_eq!(dw.rows.len(), 18);
        assert_eq!(dw.kernels_per_channel, 2);
        assert_eq!(dw.case, SamplingCase::SubSampling);
        assert!(dw.rows.iter().all(|r| r.len() == 3));
        assert!(dw.cross_channel_rows().is_empty());
        for ch in 0..3 {
            assert_eq!(dw.pixel_coverage(ch).len(), 9);
        }
        assert_eq!(plan.pointwise.len(), 2);
        assert_eq!(plan.pointwise[0].rows.len(), 6);
        assert!(plan.pointwise[0].rows.iter().all(|r| r.len() == 3));
        assert_eq!(plan.pointwise[0].in_slices, 18);
    }

    #[test]
    fn dsc_cross_channel_rows() {
        // s_1 = 2 does not divide k² = 9, so some blocks straddle two channels.
        let chain = DeButChain::from_block_shapes(&[(1, 2), (2, 9)]).unwrap();
        assert_eq!(chain.shape(), (2, 18));
        let plan = interpret_as_dsc(&chain, &LayerSpec::new(3, 2, 2)).unwrap();
        assert_eq!(plan.depthwise.cross_channel_rows(), vec![4]);
    }

    #[test]
    fn dsc_matches_chain() {
        let layer = LayerSpec::new(3, 3, 6);
        let chain = six_by_27();
        let plan = interpret_as_dsc(&chain, &layer).unwrap();
        let x = ramp(vec![4, 4, 3]);
        for params in [ConvParams::default(), ConvParams::new(1, 1)] {
            let a = apply_dsc(&plan, &x, params).unwrap();
            let b = conv_via_chain(&chain, &x, &layer, params).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        }
    }

    #[test]
    fn dsc_exact_case_delta_probe() {
        // s_1 = k² with one block per channel: each depthwise row is one full
        // kernel. A delta at the window centre reads the centre tap only.
        let layer = LayerSpec::new(3, 2, 2);
        let chain = DeButChain::from_block_shapes(&[(2, 9), (1, 2)])
            .unwrap()
            .random_init(2, InitScheme::UniformFanin);
        let plan = interpret_as_dsc(&chain, &layer).unwrap();
        assert_eq!(plan.depthwise.case, SamplingCase::Exact);
        let x = Tensor::from_fn(vec![3, 3, 2], |i| if i == [1, 1, 0] { 1.0 } else { 0.0 });
        let out = apply_dsc(&plan, &x, ConvParams::default()).unwrap();
        let f1 = &chain.factors()[0];
        let f2 = &chain.factors()[1];
        // Output slice 0 mixes depthwise rows 0 (channel 0) and 2 (channel 1);
        // only row 0 sees the delta, through its centre tap 4.
        assert_eq!(plan.pointwise[0].rows[0].iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 2]);
        let expect0 = f2.values()[0] * f1.values()[4];
        assert!((out.get(&[0, 0, 0]) - expect0).abs() < 1e-15);
    }

    #[test]
    fn feature_forward_modes() {
        let c1 = DeButChain::from_block_shapes(&[(2, 3), (1, 3), (3, 3)])
            .unwrap()
            .random_init(1, InitScheme::UniformFanin);
        let c2 = DeButChain::from_block_shapes(&[(2, 3), (2, 2)])
            .unwrap()
            .random_init(2, InitScheme::UniformFanin);
        let x = DMatrix::from_fn(27, 5, |i, j| ((i + 2 * j) as f64).cos());
        let chained = feature_forward_matrix(
            &[LayerOperator::Chain(c1.clone()), LayerOperator::Chain(c2.clone())],
            &x,
        )
        .unwrap();
        let dense = feature_forward_matrix(
            &[LayerOperator::Dense(c1.expand()), LayerOperator::Dense(c2.expand())],
            &x,
        )
        .unwrap();
        let product = c2.expand() * c1.expand() * &x;
        assert!((&chained - &product).abs().max() < 1e-12);
        assert!((&dense - &product).abs().max() < 1e-12);
        assert!(kl_feature_distance(&chained, &dense).unwrap() < 1e-12);
    }

    #[test]
    fn spatial_forward_single_layer() {
        let layer = LayerSpec::new(3, 3, 6);
        let chain = six_by_27();
        let x = ramp(vec![5, 5, 3]);
        let feat = feature_forward_spatial(
            &[SpatialLayer {
                op: LayerOperator::Chain(chain.clone()),
                layer: layer.clone(),
                params: ConvParams::default(),
            }],
            &x,
        )
        .unwrap();
        let direct = chain.apply(&im2col(&x, 3, ConvParams::default()).unwrap()).unwrap();
        assert!((&feat - &direct).abs().max() < 1e-12);
    }

    #[test]
    fn kl_cases() {
        let a = DMatrix::from_column_slice(2, 1, &[0.0, 0.0]);
        let b = DMatrix::from_column_slice(2, 1, &[0.0, 3f64.ln()]);
        let expect = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        assert!((kl_feature_distance(&a, &b).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.1438).abs() < 1e-4);

        let m = DMatrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64 * 0.3 - 1.0);
        assert_eq!(kl_feature_distance(&m, &m).unwrap(), 0.0);
        let shifted = DMatrix::from_fn(4, 3, |i, j| m[(i, j)] + j as f64 * 2.0);
        assert!(kl_feature_distance(&m, &shifted).unwrap() < 1e-15);
        assert!(kl_feature_distance(&m, &DMatrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn kl_clamp_mode() {
        let a = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let b = DMatrix::from_column_slice(2, 1, &[1.0, 3.0]);
        let d = kl_feature_distance_with(&a, &b, Normalization::ClampRenormalize).unwrap();
        assert!((d - (0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln())).abs() < 1e-12);
        let neg = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]);
        let d = kl_feature_distance_with(&a, &neg, Normalization::ClampRenormalize).unwrap();
        assert!(d.is_infinite());
    }
}
