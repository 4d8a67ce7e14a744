//! Acceptance suite. Runs every criterion, prints one line each, and exits
//! nonzero if any fails.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use exitweave::backbone::{BackboneConfig, ExitOutputs};
use exitweave::datahub::{gen_synthetic_gaussians, longtail_subsample, make_batches, Dataset, Split};
use exitweave::exitpolicy::{allocate_meta, calibrate_thresholds, dynamic_infer, exit_counts, exit_fractions};
use exitweave::gradcheck::{
    check_backbone_grads, check_end_to_end, check_meta_weight_grad, check_wpn_backward, GradcheckCase, Sabotage,
    BACKBONE_TOLERANCE, MAX_BACKBONE_PARAMS, META_TOLERANCE,
};
use exitweave::numkit::{Matrix, RngStream};
use exitweave::trainer::{fixed_weight_step, l2w_substep, split_batch, Batch, SubstepMode, TrainConfig, TrainState};
use exitweave::wpn::{make_weights, squash, wpn_forward, WpnConfig, WpnParams};

use exitweave_cli::commands::{cmd_eval, cmd_train, EvalOptions, TrainOverrides};
use exitweave_cli::metrics::MetricsRecord;

type Outcome = Result<String, String>;

fn random_backbone(rng: &mut RngStream) -> BackboneConfig {
    loop {
        let input = 2 + rng.below(5) as usize;
        let depth = 1 + rng.below(4) as usize;
        let widths = (0..depth).map(|_| 2 + rng.below(9) as usize).collect();
        let classes = 2 + rng.below(4) as usize;
        let cfg = BackboneConfig::new(input, widths, classes).unwrap();
        if cfg.num_params() <= MAX_BACKBONE_PARAMS {
            return cfg;
        }
    }
}

fn tiny_wpn(k: usize) -> WpnConfig {
    WpnConfig {
        num_exits: k,
        hidden_width: 16,
        hidden_depth: 1,
        delta: 0.8,
    }
}

fn within(elapsed: Duration, limit_s: u64, detail: String, ok: bool) -> Outcome {
    let detail = format!("{detail}, {:.1}s (limit {limit_s}s)", elapsed.as_secs_f64());
    if ok && elapsed.as_secs() <= limit_s {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_fidelity_backbone() -> Outcome {
    let start = Instant::now();
    let mut rng = RngStream::new(101);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let cfg = random_backbone(&mut rng);
        let case = GradcheckCase::random(&cfg, &tiny_wpn(cfg.num_exits()), 3, 0.1, 0.75, 1000 + i).map_err(|e| e.to_string())?;
        let report = check_backbone_grads(&case.backbone, &case.train_x, &case.train_y).map_err(|e| e.to_string())?;
        worst = worst.max(report.max_rel_err);
    }
    within(
        start.elapsed(),
        60,
        format!("max rel err {worst:.2e} over 20 configs (tol {BACKBONE_TOLERANCE:.0e})"),
        worst <= BACKBONE_TOLERANCE,
    )
}

fn gradient_fidelity_meta() -> Outcome {
    let start = Instant::now();
    let mut rng = RngStream::new(202);
    let (mut dw, mut wpn, mut e2e): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for i in 0..10 {
        let cfg = random_backbone(&mut rng);
        let case = GradcheckCase::random(&cfg, &tiny_wpn(cfg.num_exits()), 4, 0.1, 0.75, 2000 + i).map_err(|e| e.to_string())?;
        dw = dw.max(check_meta_weight_grad(&case, Sabotage::None).map_err(|e| e.to_string())?.max_rel_err);
        wpn = wpn.max(check_wpn_backward(&case, i).map_err(|e| e.to_string())?.max_rel_err);
        e2e = e2e.max(check_end_to_end(&case).map_err(|e| e.to_string())?.max_rel_err);
    }
    let worst = dw.max(wpn).max(e2e);
    within(
        start.elapsed(),
        120,
        format!("dL/dw {dw:.2e}, wpn backward {wpn:.2e}, dL/dtheta_g {e2e:.2e} over 10 instances (tol {META_TOLERANCE:.0e})"),
        worst <= META_TOLERANCE,
    )
}

fn baseline_reduction() -> Outcome {
    let bcfg = BackboneConfig::new(6, vec![16, 16, 16], 4).unwrap();
    let wcfg = WpnConfig {
        delta: 0.0,
        ..tiny_wpn(3)
    };
    let data = gen_synthetic_gaussians(4, 6, 100, 0.7, Split::Train, &mut RngStream::new(3)).unwrap();
    let cfg = TrainConfig {
        batch_size: 32,
        ..TrainConfig::default()
    };
    let mut state = TrainState::init(&bcfg, &wcfg, 9).unwrap();
    let total = 100u64;
    let mut worst: f64 = 0.0;
    let mut updates = 0;
    let mut epoch = 0;
    while state.iteration < total {
        for idx in make_batches(data.len(), cfg.batch_size, epoch, 9, false).unwrap() {
            if state.iteration == total {
                break;
            }
            let (x, y) = data.gather(&idx);
            let lr = cfg.lr_at(state.iteration, total);
            let ((xa, ya), (xb, yb)) = split_batch(&x, &y).unwrap();
            for (tx, ty, mx, my) in [(&xa, &ya, &xb, &yb), (&xb, &yb, &xa, &ya)] {
                let mut reference = state.clone();
                let ones = Matrix::from_vec(ty.len(), 3, vec![1.0; ty.len() * 3]).unwrap();
                fixed_weight_step(&cfg, &mut reference, Batch::new(tx, ty), &ones, lr).unwrap();
                l2w_substep(&cfg, &mut state, Batch::new(tx, ty), Batch::new(mx, my), lr, SubstepMode::L2W, true)
                    .unwrap();
                for (a, b) in state.backbone.values().iter().zip(reference.backbone.values()) {
                    worst = worst.max((a - b).abs());
                }
                updates += 1;
            }
            state.iteration += 1;
        }
        epoch += 1;
    }
    let detail = format!("max |diff| {worst:.1e} over {updates} backbone updates in {total} iterations (tol 1e-12)");
    if worst <= 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn allocation_correctness() -> Outcome {
    let mut rng = RngStream::new(404);
    for trial in 0..1000 {
        let n = 1 + rng.below(200) as usize;
        let k = 1 + rng.below(6) as usize;
        let q = rng.uniform_range(0.05, 2.5);
        let conf = Matrix::from_vec(n, k, (0..n * k).map(|_| rng.uniform()).collect()).unwrap();
        let alloc = allocate_meta(&conf, q).map_err(|e| e.to_string())?;
        let mut seen = vec![0u8; n];
        alloc.subsets.iter().flatten().for_each(|&j| seen[j] += 1);
        if seen.iter().any(|&c| c != 1) {
            return Err(format!("instance {trial}: not a partition"));
        }
        let raw: Vec<f64> = (1..=k).map(|j| q.powi(j as i32)).collect();
        let sum: f64 = raw.iter().sum();
        let mut sizes: Vec<usize> = raw[..k - 1].iter().map(|r| (r / sum * n as f64 + 1e-9).floor() as usize).collect();
        sizes.push(n - sizes.iter().sum::<usize>());
        let got: Vec<usize> = alloc.subsets.iter().map(Vec::len).collect();
        if got != sizes {
            return Err(format!("instance {trial}: sizes {got:?}, expected {sizes:?}"));
        }
    }
    let f = exit_fractions(0.5, 5).map_err(|e| e.to_string())?;
    let reference = [0.52, 0.26, 0.13, 0.06, 0.03];
    let dev = f.iter().zip(reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let detail = format!("1000 partitions ok; q=0.5 K=5 fractions {f:.4?}, max dev {dev:.4} (tol 0.005)");
    if dev <= 0.005 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn perturbation_contract() -> Outcome {
    let mut rng = RngStream::new(505);
    let (mut sum_err, mut mean_err, mut range_ok): (f64, f64, bool) = (0.0, 0.0, true);
    for _ in 0..1000 {
        let k = 1 + rng.below(6) as usize;
        let b = 1 + rng.below(64) as usize;
        let delta = rng.uniform_range(0.01, 0.99);
        let cfg = WpnConfig {
            num_exits: k,
            hidden_width: 1 + rng.below(64) as usize,
            hidden_depth: 1 + rng.below(2) as usize,
            delta,
        };
        let p = WpnParams::init(cfg, &mut rng).unwrap();
        let losses = Matrix::from_vec(b, k, (0..b * k).map(|_| 6.0 * rng.uniform()).collect()).unwrap();
        let (raw, _) = wpn_forward(&p, &losses).unwrap();
        let (pert, w, _) = make_weights(&raw, delta).unwrap();
        sum_err = sum_err.max(pert.0.sum().abs());
        mean_err = mean_err.max((w.0.mean() - 1.0).abs());
        range_ok &= squash(&raw.values, delta).data().iter().all(|v| v.abs() < delta);
    }
    let detail = format!("max |sum w~| {sum_err:.1e}, max |mean w - 1| {mean_err:.1e}, pre-norm range ok: {range_ok}");
    if sum_err <= 1e-9 && mean_err <= 1e-9 && range_ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn calibration_round_trip() -> Outcome {
    let mut rng = RngStream::new(606);
    for trial in 0..200 {
        let n = 1 + rng.below(300) as usize;
        let k = 1 + rng.below(6) as usize;
        let c = 2 + rng.below(9) as usize;
        let q = rng.uniform_range(0.05, 2.0);
        let scale = rng.uniform_range(0.1, 5.0);
        let logits = (0..n * k * c).map(|_| scale * rng.normal()).collect();
        let labels = (0..n).map(|_| rng.below(c as u64) as usize).collect();
        let out = ExitOutputs::from_logits(k, c, logits, labels).map_err(|e| e.to_string())?;
        let alloc = allocate_meta(&out.confidences, q).map_err(|e| e.to_string())?;
        let eps = calibrate_thresholds(&out.confidences, q).map_err(|e| e.to_string())?;
        let counts = exit_counts(&dynamic_infer(&out, &eps).map_err(|e| e.to_string())?, k);
        if counts != alloc.sizes {
            return Err(format!("pair {trial}: replay {counts:?} vs allocation {:?}", alloc.sizes));
        }
    }
    Ok("200 (table, q) pairs replay exactly".into())
}

fn efficacy_config(dir: &Path, variant: &str) -> std::path::PathBuf {
    let path = dir.join(format!("{variant}.toml"));
    fs::write(
        &path,
        format!(
            r#"
[train]
epochs = 100
batch_size = 64
variant = {{ kind = "{variant}" }}

[backbone]
trunk_widths = [32, 32, 32, 32]

[dataset]
source = "synthetic"
classes = 8
dim = 16
train_per_class = 500
val_per_class = 125
test_per_class = 125
spread = 0.5
seed = 1
"#
        ),
    )
    .unwrap();
    path
}

/// Trains and evaluates both variants for five seeds; returns the metrics
/// (L2W, baseline) and the wall time.
fn efficacy_runs(dir: &Path) -> Result<(Vec<MetricsRecord>, Vec<MetricsRecord>, Duration), String> {
    let start = Instant::now();
    let mut out = (Vec::new(), Vec::new());
    for variant in ["l2w", "baseline"] {
        let cfg = efficacy_config(dir, variant);
        for seed in 0..5 {
            let run_dir = dir.join(format!("{variant}-{seed}"));
            let trained = cmd_train(
                &cfg,
                &TrainOverrides {
                    seed: Some(seed),
                    out: Some(run_dir.clone()),
                    dataset: None,
                },
            )
            .map_err(|e| format!("{e:#}"))?;
            let eval = cmd_eval(&trained.dir.join("checkpoint.json"), &EvalOptions::default()).map_err(|e| format!("{e:#}"))?;
            if variant == "l2w" {
                out.0.push(eval.metrics);
            } else {
                out.1.push(eval.metrics);
            }
        }
    }
    Ok((out.0, out.1, start.elapsed()))
}

fn cost_monotonicity(l2w: &[MetricsRecord], baseline: &[MetricsRecord]) -> Outcome {
    let violations = |m: &MetricsRecord| {
        m.sweep
            .windows(2)
            .filter(|w| w[1].expected_mul_adds < w[0].expected_mul_adds)
            .count()
    };
    let fixed = violations(&l2w[0]);
    let others: usize = l2w.iter().chain(baseline).map(violations).sum();
    let detail = format!(
        "{fixed} violations on the seed-0 L2W model over {} q points ({others} across all 10 models)",
        l2w[0].sweep.len()
    );
    if fixed == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn desk_efficacy(l2w: &[MetricsRecord], baseline: &[MetricsRecord], elapsed: Duration) -> Outcome {
    let mean = |ms: &[MetricsRecord], f: &dyn Fn(&MetricsRecord) -> f64| ms.iter().map(f).sum::<f64>() / ms.len() as f64;
    let points = l2w[0].sweep.len();
    let wins = (0..points)
        .filter(|&i| mean(l2w, &|m| m.sweep[i].accuracy) >= mean(baseline, &|m| m.sweep[i].accuracy))
        .count();
    let exit1_l2w = 100.0 * mean(l2w, &|m| m.anytime[0].accuracy);
    let exit1_base = 100.0 * mean(baseline, &|m| m.anytime[0].accuracy);
    let anytime: Vec<String> = (0..l2w[0].anytime.len())
        .map(|k| {
            format!(
                "{:.2}/{:.2}",
                100.0 * mean(l2w, &|m| m.anytime[k].accuracy),
                100.0 * mean(baseline, &|m| m.anytime[k].accuracy)
            )
        })
        .collect();
    let ok = wins * 10 >= points * 6 && exit1_l2w >= exit1_base - 0.5;
    within(
        elapsed,
        15 * 60,
        format!(
            "L2W >= baseline at {wins}/{points} q points (need 60%); exit-1 accuracy {exit1_l2w:.2} vs {exit1_base:.2} (need >= baseline - 0.5); anytime L2W/baseline per exit [{}]",
            anytime.join(", ")
        ),
        ok,
    )
}

fn longtail_rule() -> Outcome {
    let per_class = 500;
    let classes = 100;
    let labels: Vec<usize> = (0..classes * per_class).map(|i| i % classes).collect();
    let ds = Dataset::new(Matrix::zeros(labels.len(), 1), labels, classes, Split::Train).unwrap();
    let mut parts = Vec::new();
    for factor in [20.0, 50.0, 100.0, 200.0] {
        let out = longtail_subsample(&ds, factor, &mut RngStream::new(7)).map_err(|e| e.to_string())?;
        let counts = out.dataset.class_counts();
        let max = *counts.iter().max().unwrap() as f64;
        let min = *counts.iter().min().unwrap() as f64;
        let ratio = max / min;
        // The smallest class is per_class / F before rounding.
        let ideal_min = per_class as f64 / factor;
        let lo = max / (ideal_min + 0.5);
        let hi = if ideal_min > 0.5 { max / (ideal_min - 0.5) } else { f64::INFINITY };
        if !(lo - 1e-9..=hi + 1e-9).contains(&ratio) {
            return Err(format!("F={factor}: ratio {ratio:.2} outside [{lo:.2}, {hi:.2}]"));
        }
        parts.push(format!("F={factor}: {ratio:.2}"));
    }
    Ok(parts.join(", "))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        r#"
[train]
epochs = 4
batch_size = 32
seed = 21
scatter_every = 1

[backbone]
trunk_widths = [16, 16, 16]

[wpn]
hidden_width = 64

[dataset]
source = "synthetic"
classes = 5
dim = 8
train_per_class = 60
val_per_class = 20
test_per_class = 20
spread = 0.6
seed = 2
"#,
    )
    .map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let trained = cmd_train(
            &cfg,
            &TrainOverrides {
                out: Some(out.clone()),
                ..Default::default()
            },
        )
        .map_err(|e| format!("{e:#}"))?;
        cmd_eval(&trained.dir.join("checkpoint.json"), &EvalOptions::default()).map_err(|e| format!("{e:#}"))?;
        let read = |f: &str| fs::read(out.join(f)).map_err(|e| e.to_string());
        files.push((read("history.json")?, read("metrics.json")?, read("checkpoint.json")?));
    }
    let same_history = files[0].0 == files[1].0;
    let same_metrics = files[0].1 == files[1].1;
    let same_ckpt = files[0].2 == files[1].2;
    let detail = format!("history identical: {same_history}, metrics identical: {same_metrics}, checkpoint identical: {same_ckpt}");
    if same_history && same_metrics {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() -> ExitCode {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, outcome: Outcome| {
        match &outcome {
            Ok(d) => println!("criterion {n:>2} PASS  {name}: {d}"),
            Err(d) => println!("criterion {n:>2} FAIL  {name}: {d}"),
        }
        results.push((n, name, outcome));
    };
    report(1, "backbone gradient fidelity", gradient_fidelity_backbone());
    report(2, "meta-gradient fidelity", gradient_fidelity_meta());
    report(3, "baseline reduction at delta = 0", baseline_reduction());
    report(4, "allocation correctness", allocation_correctness());
    report(5, "perturbation contract", perturbation_contract());
    report(6, "calibration round trip", calibration_round_trip());

    let dir = tempfile::tempdir().expect("tempdir");
    match efficacy_runs(dir.path()) {
        Ok((l2w, baseline, elapsed)) => {
            report(7, "cost monotonicity", cost_monotonicity(&l2w, &baseline));
            report(8, "desk-scale efficacy", desk_efficacy(&l2w, &baseline, elapsed));
        }
        Err(e) => {
            report(7, "cost monotonicity", Err(e.clone()));
            report(8, "desk-scale efficacy", Err(e));
        }
    }
    report(9, "long-tail rule", longtail_rule());
    report(10, "determinism", determinism());

    let failed: Vec<u32> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; failed: {failed:?}")
        }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
