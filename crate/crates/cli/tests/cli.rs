use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use debut::conv::{chain_filters, conv_direct, ConvParams};
use debut::generator::LayerSpec;
use debut::io::{load_tensor, ChainSpecFile};
use tempfile::TempDir;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_debut")).args(args).output().expect("spawn debut")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", stderr(&out));
    stdout(&out)
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_owned()
}

#[test]
fn validate_reports_kind_and_cost() {
    let text = ok(&["validate", data("chain_6x27.json").to_str().unwrap()]);
    assert!(text.starts_with("Monotonic, nnz=90, eta=0.4444, macs_bound=54"), "{text}");

    let text = ok(&["validate", data("chain_bulging.json").to_str().unwrap()]);
    assert!(text.starts_with("Bulging, nnz=80, eta=-0.2500"), "{text}");
}

#[test]
fn validate_rejects_broken_chain() {
    let out = run(&["validate", data("chain_broken_t.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("TRecursionBreak at factor 2"));
}

#[test]
fn exit_codes_for_usage_and_help() {
    assert_eq!(run(&["generate", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    let out = run(&["validate", "/no/such/file.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn generate_single_layer() {
    let text = ok(&["generate", "--layer", "3,64,64", "--N", "5"]);
    assert!(text.contains("nnz=6400 dense=36864 eta=0.8264"), "{text}");
    assert!(text.contains("S_sub = [(8, 9, 1), (2, 4, 8), (2, 4, 16), (2, 4, 32)]"), "{text}");

    let text = ok(&["generate", "--layer", "3,256,256", "--N", "8"]);
    let sub = text.lines().find(|l| l.starts_with("S_sub")).unwrap();
    assert_eq!(sub.matches('(').count(), 7);
}

#[test]
fn generate_refuses_infeasible_layer() {
    let out = run(&["generate", "--layer", "1,64,128", "--N", "3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("InfeasibleStage3"));
}

#[test]
fn generate_writes_a_loadable_spec() {
    let dir = TempDir::new().unwrap();
    let out = path(&dir, "c.json");
    ok(&["generate", "--layer", "3,64,64", "--N", "4", "--out", &out]);
    let spec = ChainSpecFile::load(&out).unwrap();
    let chain = spec.to_chain().unwrap();
    assert_eq!(chain.shape(), (64, 576));
    assert!(ok(&["validate", &out]).starts_with("Monotonic"));
}

#[test]
fn generate_model_writes_one_spec_per_layer() {
    let dir = TempDir::new().unwrap();
    let text = ok(&[
        "generate",
        "--model",
        data("vgg16_bn_cifar100.json").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(text.contains("total params="), "{text}");
    let specs = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(specs, 12);
}

#[test]
fn apply_paths_agree() {
    let dir = TempDir::new().unwrap();
    let (v, x, y, yd) = (path(&dir, "v.json"), path(&dir, "x.dbtt"), path(&dir, "y.dbtt"), path(&dir, "yd.dbtt"));
    ok(&["init", "--structure", data("chain_6x27.json").to_str().unwrap(), "--seed", "4", "--out", &v]);
    ok(&["random-tensor", "--dims", "7,6,3", "--seed", "2", "--out", &x]);

    let text = ok(&["apply", "--chain", &v, "--input", &x, "--verify", "--out", &y]);
    assert!(text.contains("max path divergence"), "{text}");
    ok(&["apply", "--chain", &v, "--input", &x, "--mode", "dense", "--out", &yd]);

    let chain = ChainSpecFile::load(&v).unwrap().to_valued_chain().unwrap();
    let kern = chain_filters(&chain, &LayerSpec::new(3, 3, 6)).unwrap();
    let (input, _) = load_tensor(&x).unwrap();
    let expect = conv_direct(&kern, &input, ConvParams::new(1, 0)).unwrap();
    for out in [&y, &yd] {
        let (got, _) = load_tensor(out).unwrap();
        assert_eq!(got.dims(), &[5, 4, 6]);
        assert!(got.max_abs_diff(&expect).unwrap() <= 1e-12);
    }
}

#[test]
fn zero_chain_gives_zero_output() {
    let dir = TempDir::new().unwrap();
    let (z, x, y) = (path(&dir, "z.json"), path(&dir, "x.dbtt"), path(&dir, "y.dbtt"));
    ok(&["init", "--structure", data("chain_6x27.json").to_str().unwrap(), "--scheme", "zeros", "--out", &z]);
    ok(&["random-tensor", "--dims", "4,4,3", "--out", &x]);
    ok(&["apply", "--chain", &z, "--input", &x, "--out", &y]);
    let (got, _) = load_tensor(&y).unwrap();
    assert_eq!(got.max_abs(), 0.0);
}

#[test]
fn fit_recovers_its_own_expansion() {
    let dir = TempDir::new().unwrap();
    let (v, t, f) = (path(&dir, "v.json"), path(&dir, "t.dbtt"), path(&dir, "f.json"));
    let structure = data("chain_6x27.json");
    ok(&["init", "--structure", structure.to_str().unwrap(), "--seed", "9", "--out", &v]);
    ok(&["expand", "--chain", &v, "--out", &t]);
    ok(&["fit", "--structure", structure.to_str().unwrap(), "--target", &t, "--seed", "1", "--out", &f]);

    let fitted = ChainSpecFile::load(&f).unwrap().to_valued_chain().unwrap();
    let (target, _) = load_tensor(&t).unwrap();
    let target = target.to_matrix().unwrap();
    let rel = (fitted.expand() - &target).norm() / target.norm();
    assert!(rel < 1e-6, "relative error {rel}");

    let trace = std::fs::read_to_string(dir.path().join("f.trace.csv")).unwrap();
    let mut reader = csv::Reader::from_reader(trace.as_bytes());
    let errors: Vec<f64> = reader.records().map(|r| r.unwrap()[2].parse().unwrap()).collect();
    assert!(errors.len() > 1);
    assert!(errors.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-15));
}

#[test]
fn fit_rejects_mismatched_target() {
    let dir = TempDir::new().unwrap();
    let t = path(&dir, "t.dbtt");
    ok(&["random-tensor", "--dims", "5,5", "--out", &t]);
    let out = run(&["fit", "--structure", data("chain_6x27.json").to_str().unwrap(), "--target", &t, "--out", &path(&dir, "f.json")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("shape mismatch"));
}

#[test]
fn bench_counts_multiply_adds() {
    let text = ok(&["bench", "--chain", data("chain_6x27.json").to_str().unwrap(), "--cols", "16", "--repeat", "1"]);
    assert!(text.contains("chain 90 vs dense 162 (1.80x)"), "{text}");

    let dir = TempDir::new().unwrap();
    let c = path(&dir, "c.json");
    let csv = path(&dir, "bench.csv");
    ok(&["generate", "--layer", "3,64,64", "--N", "5", "--out", &c]);
    let text = ok(&["bench", "--chain", &c, "--cols", "16", "--repeat", "1", "--csv", &csv]);
    assert!(text.contains("chain 6400 vs dense 36864 (5.76x)"), "{text}");
    ok(&["bench", "--chain", &c, "--cols", "8", "--repeat", "1", "--threads", "2", "--csv", &csv]);
    let rows = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(rows.lines().count(), 3);
}
