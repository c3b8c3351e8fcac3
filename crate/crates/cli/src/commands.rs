use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use debut::chain::{validate_chain_detailed, DeButChain, InitScheme};
use debut::conv::{apply_dsc, chain_filters, conv_direct, conv_via_chain, interpret_as_dsc, ConvParams};
use debut::fitting::{als_fit, FitOptions};
use debut::generator::{
    compare_shrinking_levels, generate_chain, generate_model, parse_alpha, GeneratorConfig,
    GeneratorPlan, LayerOutcome, LayerSpec, ModelSpec, DEFAULT_POOL,
};
use debut::io::{load_tensor, save_tensor, ChainSpecFile, Dtype};
use debut::tensor::Tensor;
use debut::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::args::{
    ApplyArgs, BenchArgs, DtypeArg, ExpandArgs, FitArgs, GenerateArgs, InitArgs, Mode, RandomTensorArgs,
    ValidateArgs,
};

/// Execution paths of `apply --verify` disagreed beyond tolerance.
#[derive(Debug)]
pub struct Diverged {
    pub divergence: f64,
    pub tolerance: f64,
}

impl fmt::Display for Diverged {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "max path divergence {:.3e} exceeds {:e}",
            self.divergence, self.tolerance
        )
    }
}

impl std::error::Error for Diverged {}

impl From<DtypeArg> for Dtype {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::F32 => Dtype::F32,
            DtypeArg::F64 => Dtype::F64,
        }
    }
}

fn load_spec(path: &Path) -> Result<ChainSpecFile> {
    ChainSpecFile::load(path).with_context(|| format!("reading chain spec {}", path.display()))
}

fn read_tensor_file(path: &Path) -> Result<(Tensor, Dtype)> {
    load_tensor(path).with_context(|| format!("reading tensor {}", path.display()))
}

fn load_pool(arg: &str) -> Result<Vec<(usize, usize)>> {
    if arg == "default" {
        return Ok(DEFAULT_POOL.to_vec());
    }
    let text = fs::read_to_string(arg).with_context(|| format!("reading pool {arg}"))?;
    let pool: Vec<(usize, usize)> =
        serde_json::from_str(&text).with_context(|| format!("pool {arg} is not a list of [r, s] pairs"))?;
    Ok(pool)
}

fn tuples<T: fmt::Debug>(items: &[T]) -> String {
    let parts: Vec<String> = items.iter().map(|t| format!("{t:?}")).collect();
    format!("[{}]", parts.join(", "))
}

fn print_plan(layer: &LayerSpec, plan: &GeneratorPlan) {
    println!(
        "layer k={} Ci={} Co={} (padded {} -> {}), {} factors",
        layer.k,
        layer.c_in,
        layer.c_out,
        plan.padded_in,
        plan.padded_out,
        plan.len()
    );
    println!("{:>6} {:>7} {:>7} {:>5} {:>5} {:>6} {:>9}", "factor", "p", "q", "r", "s", "t", "nnz");
    for (i, (&(p, q), &(r, s, t))) in plan.superscripts.iter().zip(&plan.subscripts).enumerate() {
        println!("{:>6} {p:>7} {q:>7} {r:>5} {s:>5} {t:>6} {:>9}", i + 1, p * s);
    }
    println!("S_sup = {}", tuples(&plan.superscripts));
    println!("S_sub = {}", tuples(&plan.subscripts));
    println!(
        "nnz={} dense={} eta={:.4}",
        plan.nnz(),
        layer.dense_params(),
        plan.compression_ratio
    );
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let cfg = GeneratorConfig {
        shrinking_level: a.shrinking_level,
        kind: a.kind,
        alpha: parse_alpha(&a.alpha)?,
        pool: load_pool(&a.pool)?,
        ..GeneratorConfig::default()
    };

    if let Some(layer) = a.layer {
        let plan = generate_chain(&layer, &cfg)?;
        print_plan(&layer, &plan);
        if let Some(out) = &a.out {
            ChainSpecFile::from_plan(&plan, Some(layer))?.save(out)?;
            println!("wrote {}", out.display());
        }
        return Ok(());
    }

    let path = a.model.expect("clap requires --layer or --model");
    let text = fs::read_to_string(&path).with_context(|| format!("reading model {}", path.display()))?;
    let model = ModelSpec::from_json(&text)?;
    let plan = generate_model(&model, &cfg)?;

    println!(
        "{:<12} {:>3} {:>5} {:>5} {:>8} {:>10} {:>10} {:>8}",
        "layer", "k", "Ci", "Co", "factors", "params", "dense", "eta"
    );
    for l in &plan.layers {
        let factors = match &l.outcome {
            LayerOutcome::Chain(p) => p.len().to_string(),
            LayerOutcome::KeptDense => "dense".into(),
        };
        println!(
            "{:<12} {:>3} {:>5} {:>5} {:>8} {:>10} {:>10} {:>8.4}",
            l.layer.name,
            l.layer.k,
            l.layer.c_in,
            l.layer.c_out,
            factors,
            l.params(),
            l.layer.dense_params(),
            l.compression_ratio()
        );
    }
    println!(
        "total params={} dense={} MC={:.4}",
        plan.total_params(),
        plan.dense_params(),
        plan.model_compression()
    );
    for l in &plan.layers {
        if let LayerOutcome::Chain(p) = &l.outcome {
            println!("{}: S_sup={} S_sub={}", l.layer.name, tuples(&p.superscripts), tuples(&p.subscripts));
        }
    }

    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (i, l) in plan.layers.iter().enumerate() {
            if let LayerOutcome::Chain(p) = &l.outcome {
                let name = if l.layer.name.is_empty() {
                    format!("layer{}", i + 1)
                } else {
                    l.layer.name.clone()
                };
                ChainSpecFile::from_plan(p, Some(l.layer.clone()))?.save(dir.join(format!("{name}.json")))?;
            }
        }
        println!("wrote chain specs to {}", dir.display());
    }

    if !a.compare.is_empty() {
        println!("{:>3} {:>10} {:>10} {:>8}", "N", "params", "dense", "MC");
        for (n, row) in compare_shrinking_levels(&model, &cfg, &a.compare) {
            match row {
                Ok(s) => println!(
                    "{n:>3} {:>10} {:>10} {:>8.4}",
                    s.total_params, s.dense_params, s.model_compression
                ),
                Err(e) => println!("{n:>3} {e}"),
            }
        }
    }
    Ok(())
}

pub fn validate(a: ValidateArgs) -> Result<()> {
    let spec = load_spec(&a.file)?;
    let sigs = spec.signatures()?;
    let v = validate_chain_detailed(&sigs)?;
    let chain = spec.to_chain()?;
    let stats = chain.stats();
    let (p, q) = chain.shape();
    print!(
        "{}, nnz={}, eta={:.4}, macs_bound={}",
        v.kind, stats.nnz_total, stats.compression_ratio, stats.macs_bound
    );
    if v.expanding {
        print!(", expanding");
    }
    println!();
    println!("shape {p}x{q}, {} factors, macs/col={}", chain.len(), stats.macs_per_column);
    if let Some(layer) = &spec.layer {
        println!(
            "layer {} k={} Ci={} Co={}",
            if layer.name.is_empty() { "-" } else { &layer.name },
            layer.k,
            layer.c_in,
            layer.c_out
        );
    }
    Ok(())
}

fn relative_divergence(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.max_abs_diff(b).unwrap_or(f64::INFINITY);
    diff / b.max_abs().max(1.0)
}

pub fn apply(a: ApplyArgs) -> Result<()> {
    let spec = load_spec(&a.chain)?;
    let chain = spec.to_valued_chain()?;
    let (x, in_dtype) = read_tensor_file(&a.input)?;
    let (_, _, c) = x.image_dims()?;
    let layer = match (&spec.layer, a.k) {
        (Some(l), _) => l.clone(),
        (None, Some(k)) => LayerSpec::new(k, c, chain.shape().0),
        (None, None) => bail!("chain spec has no layer metadata; pass --k"),
    };
    let params = ConvParams::new(a.stride, a.pad);

    let run = |mode: Mode| -> Result<Tensor> {
        Ok(match mode {
            Mode::Chain => conv_via_chain(&chain, &x, &layer, params)?,
            Mode::Dsc => apply_dsc(&interpret_as_dsc(&chain, &layer)?, &x, params)?,
            Mode::Dense => conv_direct(&chain_filters(&chain, &layer)?, &x, params)?,
        })
    };

    let y = run(a.mode)?;
    if a.verify {
        let outs = [run(Mode::Chain)?, run(Mode::Dsc)?, run(Mode::Dense)?];
        let divergence = [(0, 1), (0, 2), (1, 2)]
            .iter()
            .map(|&(i, j)| relative_divergence(&outs[i], &outs[j]))
            .fold(0.0, f64::max);
        let tolerance = match in_dtype {
            Dtype::F32 => 1e-9,
            Dtype::F64 => 1e-12,
        };
        if divergence >= tolerance {
            return Err(Diverged { divergence, tolerance }.into());
        }
        println!("max path divergence {divergence:.3e} < {tolerance:e} (chain, dsc, dense)");
    }

    let dims = y.dims().to_vec();
    println!("output {}x{}x{} via {:?}", dims[0], dims[1], dims[2], a.mode);
    if let Some(out) = &a.out {
        let dtype = a.dtype.map(Dtype::from).unwrap_or(in_dtype);
        save_tensor(out, &y, dtype)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn default_trace_path(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".trace.csv");
    out.with_file_name(name)
}

pub fn fit(a: FitArgs) -> Result<()> {
    let spec = load_spec(&a.structure)?;
    let structure = spec.to_chain()?;
    let (target, _) = read_tensor_file(&a.target)?;
    let target = target.to_matrix()?;
    let opts = FitOptions {
        max_sweeps: a.sweeps,
        rel_tol: a.rel_tol,
        ridge: a.ridge,
        seed: a.seed,
    };
    let (fitted, report) = als_fit(&structure, &target, &opts)?;

    ChainSpecFile::from_chain(&fitted, spec.layer.clone(), true).save(&a.out)?;
    let trace_path = a.trace.clone().unwrap_or_else(|| default_trace_path(&a.out));
    let mut w = csv::Writer::from_path(&trace_path)
        .with_context(|| format!("writing {}", trace_path.display()))?;
    w.write_record(["sweep", "factor", "error"])?;
    for e in &report.trace {
        let factor = e.factor.map(|f| f.to_string()).unwrap_or_default();
        w.write_record([e.sweep.to_string(), factor, format!("{:e}", e.error)])?;
    }
    w.flush()?;

    println!(
        "final_error={:.3e} sweeps={} converged={}",
        report.final_error, report.sweeps_used, report.converged
    );
    println!("wrote {} and {}", a.out.display(), trace_path.display());
    Ok(())
}

fn best_of<T>(repeat: usize, mut f: impl FnMut() -> Result<T>) -> Result<(Duration, T)> {
    let mut best = Duration::MAX;
    let mut last = None;
    for _ in 0..repeat.max(1) {
        let start = Instant::now();
        let out = f()?;
        best = best.min(start.elapsed());
        last = Some(out);
    }
    Ok((best, last.expect("at least one run")))
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let spec = load_spec(&a.chain)?;
    let chain = if spec.has_values() {
        spec.to_valued_chain()?
    } else {
        spec.to_chain()?.random_init(a.seed, InitScheme::UniformFanin)
    };
    let (p, q) = chain.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed.wrapping_add(1));
    let x = DMatrix::from_fn(q, a.cols, |_, _| rng.random_range(-1.0..1.0));

    let (_, macs) = chain.apply_counted(&x)?;
    let cols = a.cols.max(1) as u64;
    let chain_macs = macs.total() / cols;
    let dense_macs = (p * q) as u64;
    let mac_ratio = dense_macs as f64 / chain_macs as f64;

    let (chain_time, y_chain) = best_of(a.repeat, || {
        Ok(if a.threads > 1 {
            chain.apply_parallel(&x, a.threads)?
        } else {
            chain.apply(&x)?
        })
    })?;
    let dense = chain.expand();
    let (dense_time, y_dense) = best_of(a.repeat, || Ok(&dense * &x))?;
    let max_diff = (&y_chain - &y_dense).amax();
    let speedup = dense_time.as_secs_f64() / chain_time.as_secs_f64();

    println!("chain {p}x{q}, {} factors", chain.len());
    println!("macs/col: chain {chain_macs} vs dense {dense_macs} ({mac_ratio:.2}x)");
    println!(
        "best of {} on {} cols, {} thread(s): chain {:.3} ms, dense {:.3} ms, speedup {speedup:.2}x",
        a.repeat.max(1),
        a.cols,
        a.threads,
        chain_time.as_secs_f64() * 1e3,
        dense_time.as_secs_f64() * 1e3
    );
    println!("max |chain - dense| = {max_diff:.3e}");

    if let Some(path) = &a.csv {
        let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
        let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
        let mut w = csv::Writer::from_writer(file);
        if fresh {
            w.write_record([
                "chain", "cols", "threads", "macs_per_col", "dense_macs_per_col", "mac_ratio", "chain_ms",
                "dense_ms", "speedup", "max_diff",
            ])?;
        }
        w.write_record([
            a.chain.display().to_string(),
            a.cols.to_string(),
            a.threads.to_string(),
            chain_macs.to_string(),
            dense_macs.to_string(),
            format!("{mac_ratio:.4}"),
            format!("{:.6}", chain_time.as_secs_f64() * 1e3),
            format!("{:.6}", dense_time.as_secs_f64() * 1e3),
            format!("{speedup:.4}"),
            format!("{max_diff:e}"),
        ])?;
        w.flush()?;
    }
    Ok(())
}

pub fn init(a: InitArgs) -> Result<()> {
    let spec = load_spec(&a.structure)?;
    let chain = spec.to_chain()?.random_init(a.seed, a.scheme);
    ChainSpecFile::from_chain(&chain, spec.layer.clone(), true).save(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn expand(a: ExpandArgs) -> Result<()> {
    let chain: DeButChain = load_spec(&a.chain)?.to_valued_chain()?;
    let dense = chain.expand();
    save_tensor(&a.out, &Tensor::from_matrix(&dense), a.dtype.into())?;
    println!("wrote {}x{} matrix to {}", dense.nrows(), dense.ncols(), a.out.display());
    Ok(())
}

pub fn random_tensor(a: RandomTensorArgs) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let t = Tensor::from_fn(a.dims.clone(), |_| rng.random_range(-1.0..1.0));
    save_tensor(&a.out, &t, a.dtype.into())?;
    println!("wrote {:?} tensor to {}", a.dims, a.out.display());
    Ok(())
}
