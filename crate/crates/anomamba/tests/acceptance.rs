//! Acceptance gate: one test per shipping criterion. Each prints a
//! [PASS]/[FAIL] line with measured details, then asserts, so the whole
//! gate is readable from the test output.

use std::path::Path;
use std::time::{Duration, Instant};

use anomamba::config::RunConfig;
use anomamba::report::ClassReport;
use anomamba::synth::{self, SynthSpec};
use anomamba::{checks, trainer};

fn verdict(criterion: usize, pass: bool, detail: &str) {
    let tag = if pass { "[PASS]" } else { "[FAIL]" };
    println!("{tag} criterion {criterion}: {detail}");
    assert!(pass, "criterion {criterion}: {detail}");
}

fn check_result(criterion: usize, what: &str, r: Result<(), String>, elapsed: Duration) {
    match r {
        Ok(()) => verdict(criterion, true, &format!("{what} ({elapsed:.2?})")),
        Err(e) => verdict(criterion, false, &format!("{what}: {e}")),
    }
}

#[test]
fn criterion_1_scan_equivalence() {
    let start = Instant::now();
    let r = checks::scan_equivalence(20);
    let elapsed = start.elapsed();
    if elapsed >= Duration::from_secs(1) {
        verdict(1, false, &format!("runtime {elapsed:.2?} exceeds 1 s"));
    }
    check_result(
        1,
        "recurrent vs kernel+conv within 1e-5 max-abs over 20 draws, N <= 8, L <= 64",
        r,
        elapsed,
    );
}

#[test]
fn criterion_2_discretization() {
    let start = Instant::now();
    let r = checks::discretization();
    check_result(
        2,
        "closed-form values, small-step limits, and f64 reference within 1e-6 rel",
        r,
        start.elapsed(),
    );
}

#[test]
fn criterion_3_pyramid_partition() {
    let start = Instant::now();
    let r = checks::partition_identities(50);
    check_result(
        3,
        "cat(split(x)) bitwise on 50 shapes, identity recursion exact, unrolled oracle within 1e-6",
        r,
        start.elapsed(),
    );
}

#[test]
fn criterion_4_gradient_integrity() {
    let start = Instant::now();
    let r = checks::gradient_suite().and_then(|()| checks::gradient_css_block());
    let elapsed = start.elapsed();
    if elapsed >= Duration::from_secs(30) {
        verdict(4, false, &format!("runtime {elapsed:.2?} exceeds 30 s"));
    }
    check_result(
        4,
        "finite differences (h = 1e-3, rel < 1e-4) over every op and the full block",
        r,
        elapsed,
    );
}

#[test]
fn criterion_5_metric_oracles() {
    let start = Instant::now();
    let r = checks::metric_oracles(200).and_then(|()| checks::aupro_oracle_check(200));
    check_result(
        5,
        "worked examples exact; brute-force oracles within 1e-9 on 200 random instances",
        r,
        start.elapsed(),
    );
}

// Shared toy-run machinery for criteria 6 through 8.

const TOY_SIZE: usize = 64;

fn toy_dataset(dir: &Path) {
    let spec = SynthSpec { size: TOY_SIZE, train: 8, test_good: 8, test_defect: 8, seed: 42 };
    synth::generate(dir, "stripes", &spec).expect("synthetic dataset");
}

fn toy_config(data_root: &Path, seed: u64, pyramid: bool, noise: bool) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data_root = data_root.display().to_string();
    cfg.image_size = TOY_SIZE;
    cfg.encoder = "tiny".into();
    cfg.state_dim = 8;
    cfg.m = 2;
    cfg.pyramid_levels = 2;
    cfg.use_pyramid = pyramid;
    cfg.use_noise = noise;
    cfg.epochs = 50;
    cfg.batch_size = 8;
    cfg.lr = 5e-3;
    cfg.seed = seed;
    cfg.smooth_sigma = 2.0;
    cfg
}

struct RunMetrics {
    pixel_auroc: f64,
    image_auroc: f64,
    pixel_ap: f64,
}

fn run_toy(cfg: &RunConfig) -> RunMetrics {
    let out = tempfile::tempdir().expect("tempdir");
    trainer::train(cfg, out.path()).expect("training completes");
    let report_path = out.path().join("report.json");
    let results = trainer::evaluate(cfg, out.path(), &report_path).expect("evaluation completes");
    let m = &results[0].metrics;
    RunMetrics { pixel_auroc: m.pixel_auroc, image_auroc: m.image_auroc, pixel_ap: m.pixel_ap }
}

#[test]
fn criterion_6_toy_run() {
    let data = tempfile::tempdir().expect("tempdir");
    toy_dataset(data.path());

    // canonical full-model run, timed against the 5 minute budget
    let start = Instant::now();
    let canonical = run_toy(&toy_config(data.path(), 0, true, true));
    let elapsed = start.elapsed();
    if elapsed >= Duration::from_secs(300) {
        verdict(6, false, &format!("canonical run took {elapsed:.2?}, budget 5 min"));
    }

    // full model vs no-pyramid-no-noise across five seeds
    let outcomes: Vec<(u64, f64, f64)> = (0..5u64)
        .map(|seed| {
            let full = if seed == 0 {
                canonical.pixel_ap
            } else {
                run_toy(&toy_config(data.path(), seed, true, true)).pixel_ap
            };
            let bare = run_toy(&toy_config(data.path(), seed, false, false)).pixel_ap;
            (seed, full, bare)
        })
        .collect();
    let wins = outcomes.iter().filter(|(_, full, bare)| full >= bare).count();
    let detail = format!(
        "pixel auroc {:.3}, image auroc {:.3}, canonical run {elapsed:.1?}; \
         full >= bare pixel ap on {wins}/5 seeds {:?}",
        canonical.pixel_auroc,
        canonical.image_auroc,
        outcomes
            .iter()
            .map(|(s, f, b)| format!("seed {s}: {f:.3} vs {b:.3}"))
            .collect::<Vec<_>>()
    );
    let pass = canonical.pixel_auroc >= 0.90 && canonical.image_auroc >= 0.90 && wins >= 3;
    verdict(6, pass, &detail);
}

#[test]
fn criterion_7_ablation_wiring() {
    let data = tempfile::tempdir().expect("tempdir");
    let spec = SynthSpec { size: 32, train: 4, test_good: 2, test_defect: 2, seed: 9 };
    synth::generate(data.path(), "stripes", &spec).expect("synthetic dataset");

    let base = || {
        let mut cfg = toy_config(data.path(), 0, true, true);
        cfg.image_size = 32;
        cfg.state_dim = 4;
        cfg.m = 1;
        cfg.epochs = 2;
        cfg.batch_size = 2;
        cfg.smooth_sigma = 1.0;
        cfg
    };
    let mut configs: Vec<(String, RunConfig)> = Vec::new();
    let mut named = |name: &str, f: &dyn Fn(&mut RunConfig)| {
        let mut cfg = base();
        f(&mut cfg);
        configs.push((name.into(), cfg));
    };
    named("without global branch", &|c| c.use_global = false);
    named("without local branches", &|c| c.use_local = false);
    for (pyramid, noise) in [(true, true), (true, false), (false, true), (false, false)] {
        named(&format!("pyramid {pyramid} noise {noise}"), &|c| {
            c.use_pyramid = pyramid;
            c.use_noise = noise;
        });
    }
    for levels in 0..=2usize {
        named(&format!("pyramid depth {levels}"), &|c| c.pyramid_levels = levels);
    }

    let fields = [
        "image_auroc", "image_ap", "image_f1max", "pixel_auroc", "pixel_ap", "pixel_f1max",
        "pixel_aupro",
    ];
    for (name, cfg) in &configs {
        let out = tempfile::tempdir().expect("tempdir");
        if let Err(e) = trainer::train(cfg, out.path()) {
            verdict(7, false, &format!("{name}: training failed: {e}"));
        }
        let report_path = out.path().join("report.json");
        let results: Vec<ClassReport> = match trainer::evaluate(cfg, out.path(), &report_path) {
            Ok(r) => r,
            Err(e) => {
                verdict(7, false, &format!("{name}: evaluation failed: {e}"));
                return;
            }
        };
        let text = std::fs::read_to_string(&report_path).expect("report readable");
        for class in ["stripes", "mean"] {
            for field in fields {
                let v = anomamba::report::extract(&text, class, field);
                if !v.is_some_and(|v| v.is_finite()) {
                    verdict(7, false, &format!("{name}: {class}.{field} missing or non-finite"));
                }
            }
        }
        assert_eq!(results.len(), 1);
    }
    verdict(
        7,
        true,
        &format!("{} ablation configurations trained, evaluated, and reported", configs.len()),
    );
}

#[test]
fn criterion_8_determinism() {
    let data = tempfile::tempdir().expect("tempdir");
    let spec = SynthSpec { size: 32, train: 4, test_good: 2, test_defect: 2, seed: 5 };
    synth::generate(data.path(), "stripes", &spec).expect("synthetic dataset");
    let mut cfg = toy_config(data.path(), 3, true, true);
    cfg.image_size = 32;
    cfg.state_dim = 4;
    cfg.m = 1;
    cfg.epochs = 3;
    cfg.batch_size = 2;
    cfg.smooth_sigma = 1.0;

    let mut artifacts: Vec<(Vec<u8>, Vec<u8>, Vec<u8>)> = Vec::new();
    for _ in 0..2 {
        let out = tempfile::tempdir().expect("tempdir");
        trainer::train(&cfg, out.path()).expect("training completes");
        let report_path = out.path().join("report.json");
        trainer::evaluate(&cfg, out.path(), &report_path).expect("evaluation completes");
        artifacts.push((
            std::fs::read(out.path().join("model.tensors")).expect("checkpoint"),
            std::fs::read(out.path().join("loss.tsv")).expect("loss log"),
            std::fs::read(report_path).expect("report"),
        ));
    }
    let same_ckpt = artifacts[0].0 == artifacts[1].0;
    let same_loss = artifacts[0].1 == artifacts[1].1;
    let same_report = artifacts[0].2 == artifacts[1].2;
    verdict(
        8,
        same_ckpt && same_loss && same_report,
        &format!(
            "checkpoint bitwise equal: {same_ckpt}, loss log: {same_loss}, report: {same_report}"
        ),
    );
}
