//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Preset-backed criteria reuse `runs/<preset>` when its `config.json`
//! equals the preset config; otherwise the preset runs at full scale first.
//! Set `SDRELAB_RUNS_DIR` to point at another run root.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use sdrelab::harness::{
    llr_increment, loss_gradient_errors, oracle_equivalence, preset, primitive_gradient_errors, run_experiment,
    spearman, sprt_wald_disagreements, wald_probe, ExperimentConfig, ModelKind, Summary,
};

const ORACLE_TOL: f64 = 1e-9;
const GRAD_TOL: f64 = 1e-4;
const SEM_GAP: f64 = 2.0;
const SMALL_LLR_FACTOR: f64 = 2.0;
const DATASIZE_MAX_DROP: f64 = 0.30;
const WALD_SEMS: f64 = 3.0;
const INCREMENT_SEMS: f64 = 3.0;
const WALD_TRIALS: usize = 10_000;
const WALD_OFFSET: f64 = 0.5;
const WALD_HORIZON: usize = 400;
const INCREMENT_FRAMES: usize = 10_000;

/// Criteria that fail at the pinned protocol. Their lines still print FAIL;
/// any other failure makes this target exit nonzero.
/// 6: weight decay lowers the error of the unsaturated models
/// (b2bsqrt-tandem, tandemformer-nsp, oblivion-lsel) instead of raising it.
const KNOWN_RED: [usize; 1] = [6];

const TRAINED: [ModelKind; 6] = [
    ModelKind::B2bsqrtTandem,
    ModelKind::TanhTandem,
    ModelKind::TandemformerNsp,
    ModelKind::TandemformerGap,
    ModelKind::TandemformerOnetoken,
    ModelKind::OblivionLsel,
];

struct Line {
    id: usize,
    passed: bool,
    text: String,
}

fn runs_root() -> PathBuf {
    std::env::var_os("SDRELAB_RUNS_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../runs"))
}

fn cached(dir: &Path, config: &ExperimentConfig) -> Option<Summary> {
    let stored: ExperimentConfig = serde_json::from_slice(&std::fs::read(dir.join("config.json")).ok()?).ok()?;
    let same = ExperimentConfig {
        out_dir: config.out_dir.clone(),
        ..stored
    } == *config;
    if !same {
        return None;
    }
    serde_json::from_slice(&std::fs::read(dir.join("summary.json")).ok()?).ok()
}

fn preset_summary(name: &str) -> Summary {
    let dir = runs_root().join(name);
    let config = ExperimentConfig {
        out_dir: dir.clone(),
        ..preset(name).unwrap()
    };
    if let Some(s) = cached(&dir, &config) {
        println!("  (reusing {})", dir.display());
        return s;
    }
    let t0 = Instant::now();
    let report = run_experiment(&config).unwrap();
    println!("  ({name} ran in {:.0} s)", t0.elapsed().as_secs_f64());
    report.summary
}

fn mae(s: &Summary, variant: &str, model: ModelKind) -> (f64, f64) {
    let e = s
        .entry(variant, model)
        .unwrap_or_else(|| panic!("{} has no entry {variant}/{model}", s.preset));
    assert!(e.failed.is_empty(), "{variant}/{model} lost seeds: {:?}", e.failed);
    (e.mae_final_t.mean, e.mae_final_t.sem)
}

fn c1() -> Line {
    let errs: Vec<f64> = [1.0, 2.0].iter().map(|&a| oracle_equivalence(a, 100, 50).unwrap()).collect();
    Line {
        id: 1,
        passed: errs.iter().all(|&e| e < ORACLE_TOL),
        text: format!("oracle equivalence: max |err| a=1 {:.2e}, a=2 {:.2e} (< {ORACLE_TOL:e})", errs[0], errs[1]),
    }
}

fn c2() -> Line {
    let prim = primitive_gradient_errors().unwrap();
    let loss = loss_gradient_errors().unwrap();
    let worst = prim.iter().chain(&loss).fold(("", 0.0f64), |acc, (n, e)| if *e > acc.1 { (n, *e) } else { acc });
    Line {
        id: 2,
        passed: worst.1 < GRAD_TOL,
        text: format!(
            "gradient integrity: {} primitives + {} full losses, worst {:.2e} ({}) (< {GRAD_TOL:e})",
            prim.len(),
            loss.len(),
            worst.1,
            worst.0
        ),
    }
}

fn c3(pool: &Summary) -> Line {
    let pairs = [
        (ModelKind::B2bsqrtTandem, ModelKind::TanhTandem),
        (ModelKind::TandemformerNsp, ModelKind::TandemformerGap),
        (ModelKind::TandemformerNsp, ModelKind::TandemformerOnetoken),
    ];
    let mut passed = true;
    let mut parts = Vec::new();
    for (good, bad) in pairs {
        let (mg, sg) = mae(pool, "base", good);
        let (mb, sb) = mae(pool, "base", bad);
        let pooled = (sg * sg + sb * sb).sqrt();
        let ok = mg < mb && mb - mg > SEM_GAP * pooled;
        passed &= ok;
        parts.push(format!("{good} {mg:.2} vs {bad} {mb:.2} (gap {:.2}, 2xSEM {:.2})", mb - mg, SEM_GAP * pooled));
    }
    Line {
        id: 3,
        passed,
        text: format!("saturation ordering at a=2: {}", parts.join("; ")),
    }
}

fn c4(fig1: &Summary) -> Line {
    let t = preset("fig1-trajectories").unwrap().gaussian.horizon as f64;
    let r1 = mae(fig1, "a=1", ModelKind::TanhTandem).0 / t;
    let r2 = mae(fig1, "a=2", ModelKind::TanhTandem).0 / (4.0 * t);
    Line {
        id: 4,
        passed: SMALL_LLR_FACTOR * r1 <= r2,
        text: format!("small-LLR regime: tanh MAE/(a^2 T) a=1 {r1:.4}, a=2 {r2:.4} (need {SMALL_LLR_FACTOR}x)"),
    }
}

fn c5(size: &Summary) -> Line {
    let small = mae(size, "train=1000", ModelKind::TanhTandem).0;
    let large = mae(size, "train=64000", ModelKind::TanhTandem).0;
    let mid = mae(size, "train=8000", ModelKind::TanhTandem).0;
    let drop = (small - large) / small;
    Line {
        id: 5,
        passed: drop < DATASIZE_MAX_DROP,
        text: format!(
            "dataset size: tanh MAE 1K {small:.2}, 8K {mid:.2}, 64K {large:.2}; drop {:.1}% (< {:.0}%)",
            100.0 * drop,
            100.0 * DATASIZE_MAX_DROP
        ),
    }
}

fn c6(wd: &Summary) -> Line {
    let config = preset("fig2-weightdecay").unwrap();
    let decays: Vec<f64> = config
        .variants
        .iter()
        .map(|v| v.overrides["train.weight_decay"].as_f64().unwrap())
        .collect();
    let mut passed = true;
    let mut parts = Vec::new();
    for model in TRAINED {
        let maes: Vec<f64> = config.variants.iter().map(|v| mae(wd, &v.name, model).0).collect();
        let rho = spearman(&decays, &maes);
        passed &= rho > 0.0;
        parts.push(format!("{model} {rho:+.2}"));
    }
    Line {
        id: 6,
        passed,
        text: format!("weight-decay trend, Spearman rho > 0: {}", parts.join(", ")),
    }
}

fn c7() -> Line {
    let bad = sprt_wald_disagreements(1000, 7).unwrap();
    let mut passed = bad == 0;
    let mut parts = vec![format!("{bad}/1000 SPRT-Wald disagreements")];
    for a in [2.0, 3.0] {
        let p = wald_probe(a, WALD_TRIALS, WALD_OFFSET, WALD_HORIZON).unwrap();
        let bound = (-a).exp() + WALD_SEMS * p.binomial_sem();
        passed &= p.error_rate <= bound && p.decided > 0;
        parts.push(format!("a={a}: error {:.4} <= {bound:.4} ({} forced)", p.error_rate, p.forced));
    }
    Line {
        id: 7,
        passed,
        text: format!("SPRT correctness: {}", parts.join("; ")),
    }
}

fn c8(fig1: &Summary) -> Line {
    let mut passed = true;
    let mut parts = Vec::new();
    for a in [1.0, 2.0] {
        let (m, s) = llr_increment(a, INCREMENT_FRAMES).unwrap();
        passed &= (m - a * a).abs() <= INCREMENT_SEMS * s;
        parts.push(format!("increment a={a}: {m:.4} ± {s:.4}"));
    }
    for model in [ModelKind::B2bsqrtTandem, ModelKind::TandemformerNsp, ModelKind::TanhTandem] {
        let e = fig1.entry("a=2,N=4", model).unwrap();
        if model != ModelKind::TanhTandem {
            passed &= e.llr_slope.mean > 0.0;
        }
        parts.push(format!("slope {model} {:.3} ± {:.3}", e.llr_slope.mean, e.llr_slope.sem));
    }
    Line {
        id: 8,
        passed,
        text: format!("LLR growth: {} (tanh exempt)", parts.join("; ")),
    }
}

fn c9(three: &Summary) -> Line {
    let mut passed = true;
    let mut parts = Vec::new();
    for model in [ModelKind::B2bsqrtTandem, ModelKind::TandemformerNsp] {
        let e = three.entry("base", model).unwrap();
        assert!(e.failed.is_empty());
        assert_eq!(e.pair_mae_final_t.len(), 3);
        for (pair, m) in &e.pair_mae_final_t {
            let zero = e.zero_predictor_pair_mae_final_t[pair].mean;
            passed &= m.mean < zero;
            parts.push(format!("{model} {pair} {:.2}/{zero:.2}", m.mean));
        }
    }
    Line {
        id: 9,
        passed,
        text: format!("3-class MAE below zero predictor: {}", parts.join(", ")),
    }
}

fn c10() -> Line {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &Path| {
        let o = Command::new(env!("CARGO_BIN_EXE_sdrelab"))
            .args(["run", "--preset", "fig2-loss", "--seeds", "3,4", "--out"])
            .arg(out)
            .args([
                "--override", "gaussian.dim=6",
                "--override", "gaussian.horizon=6",
                "--override", "gaussian.per_class=40",
                "--override", "val_per_class=10",
                "--override", "test_per_class=10",
                "--override", "order=2",
                "--override", "train.epochs=2",
                "--override", "train.batch_size=20",
                "--override", "model.hidden=6",
                "--override", "model.model_dim=8",
                "--override", "model.ff_dim=8",
            ])
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&a);
    run(&b);
    let files = ["llr_trajectories.csv", "mae_vs_t.csv", "metrics.csv"];
    let same = files
        .iter()
        .filter(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap())
        .count();
    Line {
        id: 10,
        passed: same == files.len(),
        text: format!("determinism: {same}/{} CSVs byte-identical across two CLI runs", files.len()),
    }
}

fn main() {
    let mut lines = vec![c1(), c2(), c7(), c10()];
    let pool = preset_summary("fig2-pooling");
    lines.push(c3(&pool));
    let fig1 = preset_summary("fig1-trajectories");
    lines.push(c4(&fig1));
    lines.push(c8(&fig1));
    lines.push(c5(&preset_summary("fig2-datasize")));
    lines.push(c9(&preset_summary("appendix-3class")));
    lines.push(c6(&preset_summary("fig2-weightdecay")));
    lines.sort_by_key(|l| l.id);

    println!();
    for l in &lines {
        println!("C{:<2} {} {}", l.id, if l.passed { "PASS" } else { "FAIL" }, l.text);
    }
    let failed: Vec<usize> = lines.iter().filter(|l| !l.passed).map(|l| l.id).collect();
    let unexpected: Vec<usize> = failed.iter().copied().filter(|id| !KNOWN_RED.contains(id)).collect();
    println!("{} / {} criteria pass; known red: {KNOWN_RED:?}", lines.len() - failed.len(), lines.len());
    if !unexpected.is_empty() {
        eprintln!("unexpected failing criteria: {unexpected:?}");
        std::process::exit(1);
    }
}
