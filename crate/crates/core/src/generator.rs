//! Automated chain generation for convolution layers.
//!
//! Generation runs in two passes. [`plan_superscripts`] fixes the factor
//! shapes `(p, q)` in four stages:
//!
//! 1. the rightmost factor `[2^k·Ĉ_i, Ĉ_i·k²]` (two factors for bulging
//!    chains, `[2^k·Ĉ_i·α, Ĉ_i·k²]` then `[2^k·Ĉ_i, 2^k·Ĉ_i·α]`);
//! 2. a run of square `[2^k·Ĉ_i, 2^k·Ĉ_i]` factors whose length grows with the
//!    shrinking level `N`;
//! 3. `k - 1 - log2(Ĉ_o/Ĉ_i)` halving factors;
//! 4. the final factor `[Ĉ_o, 2·Ĉ_o]`.
//!
//! [`assign_subscripts`] then picks the block shapes `(r, s)` from a pool,
//! first fit in pool order, while carrying the diagonal size `t` forward.
//! Channel counts are rounded up to powers of two first; the extra rows and
//! columns are zero padding at apply time.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::chain::{validate_chain, DeButChain};
use crate::error::{DebutError, Result};
use crate::factor::FactorSignature;

/// Geometry of one convolution layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(default)]
    pub name: String,
    pub k: usize,
    #[serde(rename = "Ci")]
    pub c_in: usize,
    #[serde(rename = "Co")]
    pub c_out: usize,
    #[serde(rename = "Ho", default, skip_serializing_if = "Option::is_none")]
    pub h_out: Option<usize>,
    #[serde(rename = "Wo", default, skip_serializing_if = "Option::is_none")]
    pub w_out: Option<usize>,
}

impl LayerSpec {
    pub fn new(k: usize, c_in: usize, c_out: usize) -> Self {
        LayerSpec {
            name: String::new(),
            k,
            c_in,
            c_out,
            h_out: None,
            w_out: None,
        }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_output(mut self, h_out: usize, w_out: usize) -> Self {
        self.h_out = Some(h_out);
        self.w_out = Some(w_out);
        self
    }

    /// Unpadded weight count `C_o·C_i·k²`.
    pub fn dense_params(&self) -> u64 {
        (self.c_out * self.c_in * self.k * self.k) as u64
    }

    /// Output positions `H_o·W_o`, when known.
    pub fn output_positions(&self) -> Option<u64> {
        Some((self.h_out? * self.w_out?) as u64)
    }

    pub fn padded_in(&self) -> usize {
        round_pot(self.c_in)
    }

    pub fn padded_out(&self) -> usize {
        round_pot(self.c_out)
    }
}

/// Smallest power of two `>= c` (`c >= 1`).
pub fn round_pot(c: usize) -> usize {
    c.max(1).next_power_of_two()
}

/// Monotonic or bulging chain design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainType {
    #[default]
    Mono,
    Bulging,
}

impl FromStr for ChainType {
    type Err = DebutError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mono" | "monotonic" => Ok(ChainType::Mono),
            "bulging" => Ok(ChainType::Bulging),
            other => Err(DebutError::InvalidOption(format!(
                "unknown chain kind `{other}` (expected mono or bulging)"
            ))),
        }
    }
}

impl fmt::Display for ChainType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChainType::Mono => "mono",
            ChainType::Bulging => "bulging",
        })
    }
}

/// Parses a bulging rate written as `a/b` or as a decimal such as `1.5`.
pub fn parse_alpha(text: &str) -> Result<Ratio<u64>> {
    let bad = || DebutError::InvalidOption(format!("cannot parse bulging rate `{text}`"));
    let text = text.trim();
    let alpha = if let Some((num, den)) = text.split_once('/') {
        let num: u64 = num.trim().parse().map_err(|_| bad())?;
        let den: u64 = den.trim().parse().map_err(|_| bad())?;
        if den == 0 {
            return Err(bad());
        }
        Ratio::new(num, den)
    } else {
        let (whole, frac) = text.split_once('.').unwrap_or((text, ""));
        if frac.len() > 18 || !frac.chars().all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let whole: u64 = if whole.is_empty() { 0 } else { whole.parse().map_err(|_| bad())? };
        let den = 10u64.pow(frac.len() as u32);
        let frac: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        Ratio::new(whole * den + frac, den)
    };
    if alpha <= Ratio::from_integer(1) {
        return Err(DebutError::InvalidOption(format!(
            "bulging rate must exceed 1, got {alpha}"
        )));
    }
    Ok(alpha)
}

/// Default block-shape pool.
pub const DEFAULT_POOL: [(usize, usize); 5] = [(2, 4), (4, 8), (2, 2), (4, 4), (8, 16)];

/// Generator hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratorConfig {
    /// Shrinking level `N`.
    pub shrinking_level: usize,
    pub kind: ChainType,
    /// Bulging rate; only read for bulging chains.
    pub alpha: Ratio<u64>,
    /// Admissible `(r, s)` block shapes, in first-fit order.
    pub pool: Vec<(usize, usize)>,
    /// Refuse non-power-of-two channel counts instead of padding them.
    pub strict_pot: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            shrinking_level: 3,
            kind: ChainType::Mono,
            alpha: Ratio::new(3, 2),
            pool: DEFAULT_POOL.to_vec(),
            strict_pot: false,
        }
    }
}

impl GeneratorConfig {
    pub fn mono(shrinking_level: usize) -> Self {
        GeneratorConfig {
            shrinking_level,
            ..Default::default()
        }
    }

    pub fn bulging(shrinking_level: usize, alpha: Ratio<u64>) -> Self {
        GeneratorConfig {
            shrinking_level,
            kind: ChainType::Bulging,
            alpha,
            ..Default::default()
        }
    }

    pub fn with_pool(mut self, pool: Vec<(usize, usize)>) -> Self {
        self.pool = pool;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.shrinking_level == 0 {
            return Err(DebutError::InvalidOption("shrinking level must be positive".into()));
        }
        if self.pool.iter().any(|&(r, s)| r == 0 || s == 0) {
            return Err(DebutError::InvalidOption("pool entries must be positive".into()));
        }
        if self.kind == ChainType::Bulging && self.alpha <= Ratio::from_integer(1) {
            return Err(DebutError::InvalidOption("bulging rate must exceed 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ChannelRatio {
    Same,
    Half,
    Double,
}

impl ChannelRatio {
    fn log2(self) -> i64 {
        match self {
            ChannelRatio::Same => 0,
            ChannelRatio::Half => -1,
            ChannelRatio::Double => 1,
        }
    }
}

struct Geometry {
    k: usize,
    c_in: usize,
    c_out: usize,
    ratio: ChannelRatio,
}

fn geometry(layer: &LayerSpec, cfg: &GeneratorConfig) -> Result<Geometry> {
    cfg.validate()?;
    if !matches!(layer.k, 1 | 3 | 5 | 7) {
        return Err(DebutError::UnsupportedKernel(layer.k));
    }
    if layer.c_in == 0 || layer.c_out == 0 {
        return Err(DebutError::InvalidOption("channel counts must be positive".into()));
    }
    if cfg.strict_pot && (!layer.c_in.is_power_of_two() || !layer.c_out.is_power_of_two()) {
        return Err(DebutError::InvalidOption(format!(
            "channels {}->{} are not powers of two and padding is disabled",
            layer.c_in, layer.c_out
        )));
    }
    let (c_in, c_out) = (layer.padded_in(), layer.padded_out());
    let ratio = if c_out == c_in {
        ChannelRatio::Same
    } else if c_out * 2 == c_in {
        ChannelRatio::Half
    } else if c_out == c_in * 2 {
        ChannelRatio::Double
    } else {
        return Err(DebutError::UnsupportedRatio { c_in, c_out });
    };
    Ok(Geometry {
        k: layer.k,
        c_in,
        c_out,
        ratio,
    })
}

fn scale_by_alpha(value: usize, alpha: Ratio<u64>) -> Result<usize> {
    let scaled = Ratio::from_integer(value as u64) * alpha;
    if !scaled.is_integer() {
        return Err(DebutError::NonIntegerBulge(format!(
            "{value} * {alpha} is not an integer"
        )));
    }
    Ok(scaled.to_integer() as usize)
}

/// Factor shapes `(p, q)`, rightmost first.
pub fn plan_superscripts(layer: &LayerSpec, cfg: &GeneratorConfig) -> Result<Vec<(usize, usize)>> {
    let g = geometry(layer, cfg)?;
    let height = (1usize << g.k) * g.c_in;
    let width = g.c_in * g.k * g.k;
    let n = cfg.shrinking_level as i64;

    let stage3 = g.k as i64 - 1 - g.ratio.log2();
    if stage3 < 0 {
        return Err(DebutError::InfeasibleStage3 { count: stage3 });
    }

    let mut sup = Vec::new();
    let stage2 = match cfg.kind {
        ChainType::Mono => {
            sup.push((height, width));
            match g.ratio {
                ChannelRatio::Same | ChannelRatio::Half => n - 5,
                ChannelRatio::Double => n - 3,
            }
        }
        ChainType::Bulging => {
            let bulge = scale_by_alpha(height, cfg.alpha)?;
            sup.push((bulge, width));
            sup.push((height, bulge));
            match g.ratio {
                ChannelRatio::Same | ChannelRatio::Half => n - 6,
                ChannelRatio::Double => n - 4,
            }
        }
    };
    for _ in 0..stage2.max(0) {
        sup.push((height, height));
    }
    for j in 0..stage3 as usize {
        sup.push((height >> (j + 1), height >> j));
    }
    sup.push((g.c_out, 2 * g.c_out));
    debug_assert!(sup.windows(2).all(|w| w[1].1 == w[0].0));
    Ok(sup)
}

/// A generated chain structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorPlan {
    /// `(p, q)` per factor, rightmost first.
    pub superscripts: Vec<(usize, usize)>,
    /// `(r, s, t)` per factor, rightmost first.
    pub subscripts: Vec<(usize, usize, usize)>,
    /// Channel counts after power-of-two rounding.
    pub padded_in: usize,
    pub padded_out: usize,
    /// Compression against the unpadded dense layer.
    pub compression_ratio: f64,
    /// Number of pool entries examined during subscript assignment.
    pub pool_probes: usize,
}

impl GeneratorPlan {
    pub fn signatures(&self) -> Result<Vec<FactorSignature>> {
        self.superscripts
            .iter()
            .zip(&self.subscripts)
            .map(|(&(p, q), &(r, s, t))| FactorSignature::new(p, q, r, s, t))
            .collect()
    }

    /// Zero-valued chain with this structure.
    pub fn to_chain(&self) -> Result<DeButChain> {
        DeButChain::from_signatures(&self.signatures()?)
    }

    pub fn nnz(&self) -> u64 {
        self.superscripts
            .iter()
            .zip(&self.subscripts)
            .map(|(&(p, _), &(_, s, _))| (p * s) as u64)
            .sum()
    }

    pub fn len(&self) -> usize {
        self.superscripts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.superscripts.is_empty()
    }
}

fn first_fit(
    pool: &[(usize, usize)],
    p: usize,
    q: usize,
    t: usize,
    probes: &mut usize,
) -> Option<(usize, usize)> {
    pool.iter().copied().find(|&(r, s)| {
        *probes += 1;
        s * p == r * q && p % (r * t) == 0 && q % (s * t) == 0
    })
}

/// Rightmost subscript of a bulging chain: the smallest power-of-two `r` with
/// a matching integral `s`, so that later diagonal sizes stay powers of two.
fn bulging_rightmost(p: usize, q: usize) -> Option<(usize, usize)> {
    let mut r = 1usize;
    while r <= p {
        if (r * q) % p == 0 {
            let s = r * q / p;
            if p % r == 0 && q % s == 0 {
                return Some((r, s));
            }
        }
        r *= 2;
    }
    None
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Picks `(r, s, t)` for each factor of `sup`.
pub fn assign_subscripts(
    layer: &LayerSpec,
    sup: &[(usize, usize)],
    cfg: &GeneratorConfig,
) -> Result<GeneratorPlan> {
    let g = geometry(layer, cfg)?;
    let m = sup.len();
    if m < 2 {
        return Err(DebutError::InvalidOption("a generated chain has at least two factors".into()));
    }
    let mut subs = Vec::with_capacity(m);
    let mut probes = 0usize;

    let (p1, q1) = sup[0];
    let first = match cfg.kind {
        ChainType::Mono => (1usize << g.k, g.k * g.k),
        ChainType::Bulging => bulging_rightmost(p1, q1).ok_or(DebutError::PoolExhausted {
            factor: 1,
            p: p1,
            q: q1,
            t: 1,
        })?,
    };
    subs.push((first.0, first.1, 1));
    let mut t = first.0;

    for (i, &(p, q)) in sup.iter().enumerate().take(m - 1).skip(1) {
        let mut pick = first_fit(&cfg.pool, p, q, t, &mut probes);
        if pick.is_none() && cfg.kind == ChainType::Bulging && i == 1 {
            // The shrink right after the bulge falls back to the reduced aspect.
            let d = gcd(p, q);
            let (r, s) = (p / d, q / d);
            if p % (r * t) == 0 && q % (s * t) == 0 {
                pick = Some((r, s));
            }
        }
        let (r, s) = pick.ok_or(DebutError::PoolExhausted {
            factor: i + 1,
            p,
            q,
            t,
        })?;
        subs.push((r, s, t));
        t *= r;
    }

    let (pm, qm) = sup[m - 1];
    if t > pm || pm % t != 0 || qm % t != 0 {
        return Err(DebutError::FinalFactorInfeasible { p: pm, q: qm, t });
    }
    subs.push((pm / t, qm / t, t));

    let nnz: u64 = sup.iter().zip(&subs).map(|(&(p, _), &(_, s, _))| (p * s) as u64).sum();
    let plan = GeneratorPlan {
        superscripts: sup.to_vec(),
        subscripts: subs,
        padded_in: g.c_in,
        padded_out: g.c_out,
        compression_ratio: 1.0 - nnz as f64 / layer.dense_params() as f64,
        pool_probes: probes,
    };
    // Signature and chain rules are re-checked on the finished plan.
    validate_chain(&plan.signatures()?)?;
    Ok(plan)
}

/// Superscripts and subscripts for one layer.
pub fn generate_chain(layer: &LayerSpec, cfg: &GeneratorConfig) -> Result<GeneratorPlan> {
    let sup = plan_superscripts(layer, cfg)?;
    assign_subscripts(layer, &sup, cfg)
}

/// Per-layer replacements for the model-wide configuration.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigOverrides {
    #[serde(rename = "N", default, skip_serializing_if = "Option::is_none")]
    pub shrinking_level: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ChainType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<Vec<(usize, usize)>>,
}

impl ConfigOverrides {
    pub fn apply(&self, base: &GeneratorConfig) -> Result<GeneratorConfig> {
        let mut cfg = base.clone();
        if let Some(n) = self.shrinking_level {
            cfg.shrinking_level = n;
        }
        if let Some(kind) = self.kind {
            cfg.kind = kind;
        }
        if let Some(alpha) = &self.alpha {
            cfg.alpha = parse_alpha(alpha)?;
        }
        if let Some(pool) = &self.pool {
            cfg.pool = pool.clone();
        }
        Ok(cfg)
    }
}

/// One entry of a model description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelLayer {
    #[serde(flatten)]
    pub layer: LayerSpec,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub keep_dense: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overrides: Option<ConfigOverrides>,
}

/// Ordered list of layers; serialized as a bare JSON array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelSpec {
    pub layers: Vec<ModelLayer>,
}

impl ModelSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(text)?;
        if spec.layers.is_empty() {
            return Err(DebutError::Format("model spec has no layers".into()));
        }
        Ok(spec)
    }

    pub fn dense_params(&self) -> u64 {
        self.layers.iter().map(|l| l.layer.dense_params()).sum()
    }
}

/// What happened to one layer during model generation.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerOutcome {
    Chain(GeneratorPlan),
    KeptDense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub layer: LayerSpec,
    pub outcome: LayerOutcome,
}

impl LayerReport {
    /// Parameters after substitution.
    pub fn params(&self) -> u64 {
        match &self.outcome {
            LayerOutcome::Chain(plan) => plan.nnz(),
            LayerOutcome::KeptDense => self.layer.dense_params(),
        }
    }

    pub fn compression_ratio(&self) -> f64 {
        1.0 - self.params() as f64 / self.layer.dense_params() as f64
    }

    /// `(substituted, dense)` multiply-adds for the whole output map, when
    /// the output size is known.
    pub fn macs(&self) -> Option<(u64, u64)> {
        let positions = self.layer.output_positions()?;
        Some((self.params() * positions, self.layer.dense_params() * positions))
    }
}

/// Per-layer plans of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPlan {
    pub layers: Vec<LayerReport>,
}

impl ModelPlan {
    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(LayerReport::params).sum()
    }

    pub fn dense_params(&self) -> u64 {
        self.layers.iter().map(|l| l.layer.dense_params()).sum()
    }

    /// Model-wise compression `1 - Σ substituted / Σ dense`.
    pub fn model_compression(&self) -> f64 {
        1.0 - self.total_params() as f64 / self.dense_params() as f64
    }
}

/// Generates a chain for every layer not marked `keep_dense`.
pub fn generate_model(model: &ModelSpec, cfg: &GeneratorConfig) -> Result<ModelPlan> {
    if model.layers.is_empty() {
        return Err(DebutError::Format("model spec has no layers".into()));
    }
    let layers = model
        .layers
        .iter()
        .map(|entry| {
            let wrap = |e: DebutError| DebutError::Layer {
                name: entry.layer.name.clone(),
                source: Box::new(e),
            };
            let outcome = if entry.keep_dense {
                LayerOutcome::KeptDense
            } else {
                let layer_cfg = match &entry.overrides {
                    Some(o) => o.apply(cfg).map_err(wrap)?,
                    None => cfg.clone(),
                };
                LayerOutcome::Chain(generate_chain(&entry.layer, &layer_cfg).map_err(wrap)?)
            };
            Ok(LayerReport {
                layer: entry.layer.clone(),
                outcome,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelPlan { layers })
}

/// Row of a shrinking-level comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelSummary {
    pub shrinking_level: usize,
    pub total_params: u64,
    pub dense_params: u64,
    pub model_compression: f64,
}

/// Model totals for each shrinking level in `levels`. A level at which some
/// layer cannot be generated reports that error instead.
pub fn compare_shrinking_levels(
    model: &ModelSpec,
    cfg: &GeneratorConfig,
    levels: &[usize],
) -> Vec<(usize, Result<LevelSummary>)> {
    levels
        .iter()
        .map(|&n| {
            let cfg = GeneratorConfig {
                shrinking_level: n,
                ..cfg.clone()
            };
            let summary = generate_model(model, &cfg).map(|plan| LevelSummary {
                shrinking_level: n,
                total_params: plan.total_params(),
                dense_params: plan.dense_params(),
                model_compression: plan.model_compression(),
            });
            (n, summary)
        })
        .collect()
}
