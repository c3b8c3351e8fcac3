use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use debut::chain::InitScheme;
use debut::generator::{ChainType, LayerSpec};

#[derive(Debug, Parser)]
#[command(name = "debut", version, about = "Deformable butterfly chains: design, check, run and fit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Design chains for one layer or a whole model.
    Generate(GenerateArgs),
    /// Check a chain spec and print its kind and cost.
    Validate(ValidateArgs),
    /// Run a convolution through a chain.
    Apply(ApplyArgs),
    /// Fit chain values to a dense target matrix.
    Fit(FitArgs),
    /// Time and count multiply-adds of a chain against its dense product.
    Bench(BenchArgs),
    /// Fill a chain spec with initial values.
    Init(InitArgs),
    /// Write the dense product of a valued chain as a matrix tensor file.
    Expand(ExpandArgs),
    /// Write a tensor file of uniform random values in [-1, 1).
    RandomTensor(RandomTensorArgs),
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["layer", "model"]))]
pub struct GenerateArgs {
    /// Layer geometry `k,Ci,Co[,Ho,Wo]`.
    #[arg(long, value_parser = parse_layer)]
    pub layer: Option<LayerSpec>,
    /// JSON model description (array of layers).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// mono or bulging.
    #[arg(long, default_value = "mono")]
    pub kind: ChainType,
    /// Shrinking level.
    #[arg(long = "N", short = 'N', default_value_t = 3)]
    pub shrinking_level: usize,
    /// Bulging rate, `a/b` or decimal.
    #[arg(long, default_value = "3/2")]
    pub alpha: String,
    /// `default` or a JSON file holding `[[r, s], ...]`.
    #[arg(long, default_value = "default")]
    pub pool: String,
    /// Chain spec file (single layer) or directory (model).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also tabulate model totals for these shrinking levels, e.g. `3,4,5,6,7`.
    #[arg(long, value_delimiter = ',')]
    pub compare: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    pub file: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Chain,
    Dsc,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DtypeArg {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    #[arg(long)]
    pub chain: PathBuf,
    /// Feature map `H x W x C`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long, default_value_t = 0)]
    pub pad: usize,
    #[arg(long, value_enum, default_value = "chain")]
    pub mode: Mode,
    /// Kernel size, when the chain spec has no layer metadata.
    #[arg(long)]
    pub k: Option<usize>,
    /// Run all three paths and report their largest divergence.
    #[arg(long)]
    pub verify: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Output element type; defaults to the input's.
    #[arg(long, value_enum)]
    pub dtype: Option<DtypeArg>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Chain spec whose structure is fitted; its values are ignored.
    #[arg(long)]
    pub structure: PathBuf,
    /// Matrix tensor file with the target.
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub sweeps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-10)]
    pub ridge: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub rel_tol: f64,
    /// Fitted chain spec.
    #[arg(long)]
    pub out: PathBuf,
    /// Error trace CSV; defaults to the output path with a `.trace.csv` suffix.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub chain: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub cols: usize,
    #[arg(long, default_value_t = 5)]
    pub repeat: usize,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Seed for values missing from the spec and for the input.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Append the result row to this CSV file.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long)]
    pub structure: PathBuf,
    /// zeros, ones, uniform-fanin or gaussian-fanin.
    #[arg(long, default_value = "uniform-fanin")]
    pub scheme: InitScheme,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExpandArgs {
    #[arg(long)]
    pub chain: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "f64")]
    pub dtype: DtypeArg,
}

#[derive(Debug, Args)]
pub struct RandomTensorArgs {
    /// Comma-separated dimensions, e.g. `8,8,3`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "f64")]
    pub dtype: DtypeArg,
}

fn parse_layer(text: &str) -> Result<LayerSpec, String> {
    let nums = text
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    match nums[..] {
        [k, ci, co] => Ok(LayerSpec::new(k, ci, co)),
        [k, ci, co, ho, wo] => Ok(LayerSpec::new(k, ci, co).with_output(ho, wo)),
        _ => Err("expected k,Ci,Co or k,Ci,Co,Ho,Wo".into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_flag() {
        assert_eq!(parse_layer("3,64,128").unwrap(), LayerSpec::new(3, 64, 128));
        assert_eq!(parse_layer("3,64,128,8,8").unwrap().h_out, Some(8));
        assert!(parse_layer("3,64").is_err());
        assert!(parse_layer("3,x,4").is_err());
    }

    #[test]
    fn cli_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
