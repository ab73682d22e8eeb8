//! End-to-end acceptance run. Prints one `[PASS]`/`[FAIL]` line per
//! criterion and exits nonzero if any criterion fails.

mod common;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::*;
use milab::data::synth_blobs;
use milab::eval::{knn_dist, AttackReport};
use milab::invert::{
    default_preg_count, estimate_preg, sample_latent, BaseLoss, IdentityLossSpec, LatentDistribution, PregEstimator,
    PregMode,
};
use milab::nn::{distill, Classifier, DistillConfig, DistillReport, Parameterized};
use milab::pipeline::{Comparison, ExperimentConfig, Pipeline, MANIFEST_FILE};
use milab::rng::rng_from_seed;
use milab::Tensor;

const SEEDS: [u64; 3] = [1, 2, 3];

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn report(id: &'static str, pass: bool, detail: String) -> Outcome {
    println!("[{}] {id}: {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { id, pass, detail }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let mut worst = (0.0, "");
    for (i, case) in primitive_cases().iter().enumerate() {
        let e = check_primitive(case, 100, 500 + i as u64).unwrap();
        if e >= worst.0 {
            worst = (e, case.name);
        }
    }
    for (i, v) in ALL_VARIANTS.iter().enumerate() {
        let e = check_loss_variant(v, 100, 900 + 100 * i as u64).unwrap();
        if e >= worst.0 {
            worst = (e, variant_name(v));
        }
    }
    let el = t.elapsed();
    report(
        "1 gradient integrity",
        worst.0 < 1e-4 && el < Duration::from_secs(120),
        format!(
            "{} primitives + {} loss variants x 100 instances, max rel err {:.2e} ({}) < 1e-4, {} < 120s",
            primitive_cases().len(),
            ALL_VARIANTS.len(),
            worst.0,
            worst.1,
            secs(el)
        ),
    )
}

fn loss_oracles() -> Outcome {
    let t = Instant::now();
    let gaps: Vec<(&str, f64)> = ALL_VARIANTS
        .iter()
        .enumerate()
        .map(|(i, v)| (variant_name(v), oracle_gap(v, 1000, 1 + i as u64)))
        .collect();
    let el = t.elapsed();
    let worst = gaps.iter().map(|g| g.1).fold(0.0, f64::max);
    let listed: Vec<String> = gaps.iter().map(|(n, g)| format!("{n} {g:.1e}")).collect();
    report(
        "2 loss-formula oracles",
        worst < 1e-10 && el < Duration::from_secs(60),
        format!("1000 cases each, max |gap| {{{}}} < 1e-10, {} < 60s", listed.join(", "), secs(el)),
    )
}

fn reductions() -> Outcome {
    let mut rng = rng_from_seed(70);
    let target = small_convk(2, 6, 3, 70);
    let x = uniform(&[8, 1, 6, 6], -1.0, 1.0, &mut rng);
    let ks: Vec<usize> = (0..8).map(|i| i % 3).collect();
    let preg = random_preg(7, PregMode::Sampled, &mut rng);
    let anchors = vec![preg.draw_rows(8, &mut rng)];
    let eval = |s: &IdentityLossSpec, a: &[Tensor]| s.evaluate(&target, &x, &ks, a).unwrap();

    let logit = IdentityLossSpec::Logit {
        lambda_reg: 0.7,
        preg: preg.clone(),
    };
    let mut checks = vec![
        (
            "Aug(CE, none) = CE",
            eval(&IdentityLossSpec::aug(BaseLoss::Ce, vec![]), &[]) == eval(&IdentityLossSpec::Ce, &[]),
        ),
        (
            "Aug(Logit, none) = Logit",
            eval(
                &IdentityLossSpec::aug(
                    BaseLoss::Logit {
                        lambda_reg: 0.7,
                        pregs: vec![preg.clone()],
                    },
                    vec![],
                ),
                &anchors,
            ) == eval(&logit, &anchors),
        ),
        (
            "LOMMA(none) = Logit",
            eval(&IdentityLossSpec::lomma(0.7, preg.clone(), vec![]), &anchors) == eval(&logit, &anchors),
        ),
    ];
    let logits = target.predict_logits(&x, 64).unwrap();
    let neg_logit: Vec<f64> = ks.iter().enumerate().map(|(i, &k)| -logits.row(i)[k]).collect();
    let zero = IdentityLossSpec::Logit {
        lambda_reg: 0.0,
        preg: preg.clone(),
    };
    checks.push(("lambda_reg = 0 gives -logit", eval(&zero, &anchors) == neg_logit));
    let tape = milab::Tape::new();
    let p = target.bind(&tape, false);
    let pt = (*target.penultimate(&p, tape.constant(x.clone())).unwrap().value()).clone();
    let strong = IdentityLossSpec::Logit {
        lambda_reg: 5.0,
        preg: preg.clone(),
    };
    checks.push(("p~ = p_reg gives -logit", eval(&strong, &[pt]) == neg_logit));

    // p~ = [1, 0, 1], w_k = [2, 1, 0.5]
    let w = [2.0, 1.0, 0.5];
    let pt = [1.0, 0.0, 1.0];
    let direct = -dot(&pt, &w);
    let shifted = -dot(&pt, &w) + 1.0 * sqdist(&pt, &[0.0, 0.0, 1.0]);
    checks.push(("substitution -2.5 / -1.5", direct == -2.5 && shifted == -1.5));

    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    report(
        "3 reduction identities",
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} exact identities hold", checks.len())
        } else {
            format!("not exact: {failed:?}")
        },
    )
}

fn preg_estimator() -> Outcome {
    let f = Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
    let p = PregEstimator::from_features(&f, PregMode::Fixed).unwrap();
    let var: Vec<f64> = p.sigma.data().iter().map(|s| s * s).collect();
    let hand = p.mu.data() == [2.0, 1.0, 1.0] && var == [1.0, 9.0, 0.0];

    let c = Tensor::new(vec![3, 2], vec![0.25, -1.5, 0.25, -1.5, 0.25, -1.5]).unwrap();
    let s = PregEstimator::from_features(&c, PregMode::Sampled).unwrap();
    let mut rng = rng_from_seed(1);
    let degenerate = (0..100).all(|_| s.draw(&mut rng) == s.mu);

    let public = synth_blobs(2, 2600, 4, 3).unwrap();
    let m = small_convk(1, 4, 2, 0);
    let n = default_preg_count(&public);
    let used = estimate_preg(&m, &public, n, 1).unwrap().n_public_used;
    let small = default_preg_count(&synth_blobs(2, 30, 4, 3).unwrap());
    report(
        "4 p_reg estimator",
        hand && degenerate && n == 5000 && used == 5000 && small == 60,
        format!(
            "2-sample mean/variance exact: {hand}; sigma=0 draws = mu: {degenerate}; N = {used} of {} public (60 of 60 when smaller: {})",
            public.len(),
            small == 60
        ),
    )
}

fn knn_and_clip() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let eval = small_convk(2, 8, 3, seed);
        let xp = uniform(&[10, 1, 8, 8], -1.0, 1.0, &mut rng_from_seed(seed + 100));
        let private = milab::data::Dataset::new(xp, vec![1; 10]).unwrap();
        let recons = uniform(&[10, 1, 8, 8], -1.0, 1.0, &mut rng_from_seed(seed + 200));
        let got = knn_dist(&recons, &private, &eval, 1).unwrap();
        let want = exhaustive_knn(
            &eval.predict_features(&recons, 64).unwrap(),
            &eval.predict_features(private.images(), 64).unwrap(),
        );
        worst = worst.max((got - want).abs());
    }
    let d = LatentDistribution::DiagonalGaussian {
        mu: Tensor::full(&[4, 25], 0.8),
        log_sigma: Tensor::full(&[4, 25], 1.0),
    };
    let z = sample_latent(&d, 10_000, true, 3).unwrap();
    report(
        "5 KNN oracle and z-clipping",
        worst < 1e-9 && z.len() == 1_000_000 && z.max_abs() <= 1.0,
        format!("20 instances 10x10, max |gap| {worst:.1e} < 1e-9; max |z| over {} draws = {}", z.len(), z.max_abs()),
    )
}

struct SeedRun {
    seed: u64,
    dir: tempfile::TempDir,
    table: Comparison,
}

fn mnist_config(out: &Path, seed: u64) -> ExperimentConfig {
    let root = workspace();
    let (img, lab) = mnist_paths();
    let overrides = vec![
        format!("seed={seed}"),
        format!("out_dir={:?}", out.to_str().unwrap()),
        format!("data.source.images={:?}", img.to_str().unwrap()),
        format!("data.source.labels={:?}", lab.to_str().unwrap()),
    ];
    ExperimentConfig::load(&root.join("configs/mnist.toml"), &overrides).unwrap()
}

fn run_seed(seed: u64) -> SeedRun {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let mut p = Pipeline::new(mnist_config(dir.path(), seed)).unwrap();
    p.on_progress(|o| eprintln!("    {} ({:.1}s)", o.unit, o.seconds));
    let table = p.full_experiment().unwrap();
    println!("seed {seed} ({}):\n{}", secs(t.elapsed()), table.to_markdown());
    SeedRun { seed, dir, table }
}

fn mean_of(runs: &[SeedRun], f: impl Fn(&Comparison) -> f64) -> f64 {
    runs.iter().map(|r| f(&r.table)).sum::<f64>() / runs.len() as f64
}

fn row<'a>(t: &'a Comparison, mode: &str, v: &str) -> &'a AttackReport {
    t.reports.iter().find(|r| r.mode == mode && r.variant == v).unwrap()
}

fn directional(runs: &[SeedRun], elapsed: Duration) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (mode, margin) in [("kedmi", 15.0), ("gmi", 20.0)] {
        let base = mean_of(runs, |t| row(t, mode, "baseline").top1.mean);
        let lomma = mean_of(runs, |t| row(t, mode, "lomma").top1.mean);
        let kb = mean_of(runs, |t| row(t, mode, "baseline").knn_dist);
        let kl = mean_of(runs, |t| row(t, mode, "lomma").knn_dist);
        let lom = mean_of(runs, |t| row(t, mode, "lom").top1.mean);
        let ma = mean_of(runs, |t| row(t, mode, "ma").top1.mean);
        pass &= lomma >= base + margin && kl < kb;
        parts.push(format!(
            "{mode}: top-1 baseline {base:.1} -> LOMMA {lomma:.1} (need +{margin}), KNN {kb:.3} -> {kl:.3} [LOM {lom:.1}, MA {ma:.1}]"
        ));
    }
    parts.push(format!("{} for {} seeds (target 45 min)", secs(elapsed), runs.len()));
    report("6 MNIST directional reproduction", pass, parts.join("; "))
}

fn overfitting(runs: &[SeedRun]) -> Outcome {
    let frac = |t: &Comparison, mode: &str, v: &str| row(t, mode, v).overfit_fraction.unwrap();
    let mut per_mode = Vec::new();
    let (mut base_all, mut lomma_all) = (0.0, 0.0);
    for mode in ["gmi", "kedmi"] {
        let b = mean_of(runs, |t| frac(t, mode, "baseline"));
        let l = mean_of(runs, |t| frac(t, mode, "lomma"));
        base_all += b / 2.0;
        lomma_all += l / 2.0;
        let seeds: Vec<String> = runs
            .iter()
            .map(|r| format!("{:.0}/{:.0}", 100.0 * frac(&r.table, mode, "baseline"), 100.0 * frac(&r.table, mode, "lomma")))
            .collect();
        per_mode.push(format!("{mode} baseline {:.1}% LOMMA {:.1}% (per seed {})", 100.0 * b, 100.0 * l, seeds.join(" ")));
    }
    report(
        "7 overfitting analysis",
        base_all > 0.0 && lomma_all < base_all,
        format!(
            "mean fraction over modes and seeds: baseline {:.2}% > 0, LOMMA {:.2}% < baseline; {}",
            100.0 * base_all,
            100.0 * lomma_all,
            per_mode.join("; ")
        ),
    )
}

fn distillation(runs: &[SeedRun]) -> Outcome {
    let mut ratios = Vec::new();
    for r in runs {
        let text = std::fs::read_to_string(r.dir.path().join("augment/report.json")).unwrap();
        let reports: std::collections::BTreeMap<String, DistillReport> = serde_json::from_str(&text).unwrap();
        for (name, d) in reports {
            ratios.push((r.seed, name, d.final_holdout_kl / d.initial_holdout_kl));
        }
    }
    let teacher = Classifier::load(&runs[0].dir.path().join("target/model.ckpt")).unwrap();
    let public = mnist_split().public;
    let cfg = DistillConfig {
        epochs: 8,
        ..Default::default()
    };
    let (_, selfd) = distill(&teacher, &public, &teacher.arch_tag(), &cfg, 77).unwrap();
    let worst = ratios.iter().map(|r| r.2).fold(0.0, f64::max);
    report(
        "8 distillation",
        worst <= 0.5 && selfd.final_holdout_kl < 0.05,
        format!(
            "{} students, worst final/initial holdout KL {:.3} <= 0.5; self-distillation {} KL {:.4} < 0.05",
            ratios.len(),
            worst,
            teacher.arch_tag(),
            selfd.final_holdout_kl
        ),
    )
}

fn determinism() -> Outcome {
    let cfg_path = workspace().join("configs/tiny.toml");
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::load(&cfg_path, &[format!("out_dir={:?}", dir.path().to_str().unwrap())]).unwrap();
        Pipeline::new(cfg).unwrap().full_experiment().unwrap();
        let bytes = std::fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        (dir, bytes)
    };
    let (_a, ma) = run();
    let (_b, mb) = run();
    let entries = serde_json::from_slice::<serde_json::Value>(&ma).unwrap()["stages"].as_object().unwrap().len();
    report(
        "9 determinism",
        ma == mb,
        format!("two single-worker full experiments: manifests ({entries} units, {} bytes) identical: {}", ma.len(), ma == mb),
    )
}

fn main() {
    let mut outcomes = vec![gradients(), loss_oracles(), reductions(), preg_estimator(), knn_and_clip()];

    let t = Instant::now();
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| run_seed(s)).collect();
    let elapsed = t.elapsed();
    outcomes.push(directional(&runs, elapsed));
    outcomes.push(overfitting(&runs));
    outcomes.push(distillation(&runs));
    outcomes.push(determinism());

    println!();
    for o in &outcomes {
        println!("[{}] {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.detail);
    }
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    println!("acceptance: {} passed, {failed} failed", outcomes.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
