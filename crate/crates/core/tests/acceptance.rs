//! End-to-end acceptance checks. Runs as a plain binary and prints one
//! PASS/FAIL line per criterion.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use rgp::analysis::{ls_gradient_subspace_check, LeastSquaresProblem};
use rgp::carriers::{power_decompose, CarrierConfig};
use rgp::experiment::{encode_model, load_data, run_experiment, run_on, ExperimentReport, TrainConfig};
use rgp::matrix::{gram_schmidt_columns, principal_angle_sin, svd_oracle, GS_TOL};
use rgp::net::{loss_and_grad, Carriers, ConvSpec, Network, NetworkSpec, Reduction};
use rgp::optimizer::{dense_projection, reconstruct_update, Method};
use rgp::privacy::{clip_per_sample, epsilon_for, rdp_step};
use rgp::Matrix;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_spec(g: &mut ChaCha20Rng, conv: bool) -> NetworkSpec {
    if conv {
        let c = g.random_range(1..=3);
        let h = g.random_range(3..=6);
        let w = g.random_range(3..=6);
        let kernel = g.random_range(1..=3);
        NetworkSpec {
            input_dim: c * h * w,
            image_shape: Some((c, h, w)),
            conv: vec![ConvSpec {
                channels: g.random_range(1..=6),
                kernel,
                stride: g.random_range(1..=2),
                padding: g.random_range(0..kernel),
            }],
            hidden: vec![g.random_range(1..=16)],
            classes: g.random_range(2..=6),
            zero_head: false,
        }
    } else {
        NetworkSpec {
            input_dim: g.random_range(1..=32),
            image_shape: None,
            conv: vec![],
            hidden: vec![g.random_range(1..=32)],
            classes: g.random_range(2..=32),
            zero_head: false,
        }
    }
}

/// A random network with small random biases.
fn random_net(g: &mut ChaCha20Rng, conv: bool) -> Network {
    let spec = random_spec(g, conv);
    let mut net = Network::init(&spec, g.random()).unwrap();
    for core in net.weight_cores_mut() {
        for b in core.bias.iter_mut() {
            *b = 0.1 * (g.random::<f64>() - 0.5);
        }
    }
    net
}

fn random_carriers(g: &mut ChaCha20Rng, p: usize, d: usize, r: usize, orthonormal: bool) -> Carriers {
    let mut left = Matrix::gaussian(p, r, g);
    let mut right = Matrix::gaussian(r, d, g);
    if orthonormal {
        left = gram_schmidt_columns(&left, GS_TOL, g).unwrap();
        right = gram_schmidt_columns(&right.transpose(), GS_TOL, g).unwrap().transpose();
    }
    Carriers { left, right }
}

fn attach(net: &mut Network, g: &mut ChaCha20Rng, orthonormal: bool, rank: Option<usize>) {
    for core in net.weight_cores_mut() {
        let (p, d) = core.weight.shape();
        let max = p.min(d);
        let r = rank.map_or_else(|| g.random_range(1..=max), |r| r.clamp(1, max));
        core.set_carriers(random_carriers(g, p, d, r, orthonormal)).unwrap();
    }
}

fn batch(g: &mut ChaCha20Rng, net: &Network, m: usize) -> (Matrix, Vec<usize>) {
    let x = Matrix::gaussian(m, net.input_dim(), g);
    let labels = (0..m).map(|_| g.random_range(0..net.output_dim())).collect();
    (x, labels)
}

fn rel(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(f64::MIN_POSITIVE)
}

fn criterion_1() -> Outcome {
    let mut g = rng(1);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let mut net = random_net(&mut g, case % 4 == 3);
        attach(&mut net, &mut g, false, None);
        let (x, labels) = { let m = g.random_range(1..=16); batch(&mut g, &net, m) };
        let (logits, mut acts) = net.forward(&x).unwrap();
        let (_, dlogits) = loss_and_grad(&logits, &labels, Reduction::Sum).unwrap();
        let carrier = net.backward_per_sample_carrier(&mut acts, &dlogits).unwrap();
        let full = net.backward_per_sample_full(&mut acts, &dlogits).unwrap();
        for (cv, fv) in carrier.vectors.iter().zip(&full.vectors) {
            let cg = carrier.layout.unpack(cv).unwrap();
            let fg = full.layout.unpack(fv).unwrap();
            for (c, f) in cg.iter().zip(&fg) {
                let carriers = net.core(c.layer).carriers().unwrap();
                let dw = f.weight.as_ref().unwrap();
                let dl = dw.matmul_t(&carriers.right).unwrap();
                let dr = carriers.left.t_matmul(dw).unwrap();
                for (got, want) in [(c.left.as_ref().unwrap(), &dl), (c.right.as_ref().unwrap(), &dr)] {
                    let scale = want.max_abs().max(1e-300);
                    worst = worst.max(got.max_abs_diff(want).unwrap() / scale);
                }
            }
        }
    }
    check(worst < 1e-9, format!("max relative error {worst:.2e} over 100 cases"))
}

fn criterion_2() -> Outcome {
    let mut g = rng(2);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let mut net = random_net(&mut g, case % 5 == 4);
        let rank = match case % 3 {
            0 => Some(1),
            1 => Some(usize::MAX),
            _ => None,
        };
        attach(&mut net, &mut g, true, rank);
        let (x, labels) = { let m = g.random_range(1..=16); batch(&mut g, &net, m) };
        let (logits, mut acts) = net.forward(&x).unwrap();
        let (_, dlogits) = loss_and_grad(&logits, &labels, Reduction::Sum).unwrap();
        let grads = net.backward_per_sample_carrier(&mut acts, &dlogits).unwrap();
        let dense = net.aggregate_grads(&acts).unwrap();
        for block in grads.layout.unpack(&grads.sum()).unwrap() {
            let c = net.core(block.layer).carriers().unwrap();
            let rec = reconstruct_update(&c.left, &c.right, block.left.as_ref().unwrap(), block.right.as_ref().unwrap()).unwrap();
            let proj = dense_projection(&c.left, &c.right, &dense[block.layer].0).unwrap();
            if proj.frobenius_norm() > 0.0 {
                worst = worst.max(rel(&rec, &proj));
            }
        }
    }
    check(worst < 1e-8, format!("max Frobenius relative gap {worst:.2e} over 100 cases"))
}

fn criterion_3() -> Outcome {
    let mut g = rng(3);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let mut net = random_net(&mut g, case % 2 == 1);
        let (x, _) = { let m = g.random_range(1..=8); batch(&mut g, &net, m) };
        let plain = net.predict(&x).unwrap();
        attach(&mut net, &mut g, case % 3 == 0, None);
        let reparam = net.predict(&x).unwrap();
        worst = worst.max(reparam.max_abs_diff(&plain).unwrap());
    }
    check(worst < 1e-10, format!("max absolute output gap {worst:.2e} over 100 nets (50 with conv)"))
}

fn criterion_4() -> Outcome {
    let mut g = rng(4);
    let (mut worst_res, mut worst_closed) = (0.0f64, 0.0f64);
    for case in 0..20 {
        let d = g.random_range(4..=16);
        let p = g.random_range(2..=12);
        let r = g.random_range(1..=p.min(d - 1));
        let n = g.random_range(r + 5..=60);
        let problem = LeastSquaresProblem::random_low_rank(1000 + case, n, d, p, r).unwrap();
        let trace = ls_gradient_subspace_check(&problem, 100).unwrap();
        if trace.rank != r {
            return Err(format!("instance {case}: gradient rank {} != {r}", trace.rank));
        }
        for t in 0..=100 {
            let norm = trace.grad_norm[t];
            worst_res = worst_res.max(trace.range_residual[t] / norm).max(trace.null_residual[t] / norm);
            worst_closed = worst_closed.max(trace.closed_form_error[t]);
        }
    }
    check(
        worst_res < 1e-8 && worst_closed < 1e-8,
        format!("max residual/‖∂W_t‖ {worst_res:.2e}, max closed-form gap {worst_closed:.2e}"),
    )
}

fn criterion_5() -> Outcome {
    let mut g = rng(5);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let n = 32;
        let r = g.random_range(1..=8);
        let u = gram_schmidt_columns(&Matrix::gaussian(n, n, &mut g), GS_TOL, &mut g).unwrap();
        let v = gram_schmidt_columns(&Matrix::gaussian(n, n, &mut g), GS_TOL, &mut g).unwrap();
        let mut s = Vec::with_capacity(n);
        let mut level = 10.0;
        for k in 0..n {
            if k == r {
                level /= 2.0 + g.random::<f64>();
            }
            s.push(level);
            level *= 0.97;
        }
        let m = u.matmul(&Matrix::diag(&s)).unwrap().matmul_t(&v).unwrap();
        let c = power_decompose(&m, &CarrierConfig::new(r, 16, 77 + case)).unwrap();
        let svd = svd_oracle(&m).unwrap();
        let (ur, vr) = svd.top(r);
        let left = principal_angle_sin(&c.left, &ur).unwrap();
        let right = principal_angle_sin(&c.right.transpose(), &vr).unwrap();
        worst = worst.max(left).max(right);
    }
    check(worst < 1e-6, format!("max principal-angle sine {worst:.2e} over 20 matrices"))
}

fn criterion_6() -> Outcome {
    let mut worst_closed = 0.0f64;
    for &sigma in &[0.5, 0.8, 1.0, 2.0, 5.0] {
        for &alpha in &[1.25, 1.5, 2.0, 3.0, 7.0, 32.0, 256.0] {
            let got = rdp_step(1.0, sigma, alpha).unwrap();
            let want = alpha / (2.0 * sigma * sigma);
            worst_closed = worst_closed.max((got - want).abs() / want);
        }
    }
    let mut worst_grid = 0.0f64;
    let mut points = 0;
    for line in include_str!("data/rdp_golden.csv").lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|f| f.parse().unwrap()).collect();
        let got = rdp_step(v[0], v[1], v[2]).unwrap();
        worst_grid = worst_grid.max((got - v[3]).abs() / v[3]);
        points += 1;
    }
    let mut monotone = true;
    let qs = [0.005, 0.01, 0.05, 0.1];
    let sigmas = [0.7, 1.0, 1.5, 3.0];
    let steps = [10u64, 100, 1000];
    for (qi, &q) in qs.iter().enumerate() {
        for (si, &s) in sigmas.iter().enumerate() {
            for (ti, &t) in steps.iter().enumerate() {
                let e = epsilon_for(q, s, t, 1e-5).unwrap();
                if ti > 0 && e < epsilon_for(q, s, steps[ti - 1], 1e-5).unwrap() {
                    monotone = false;
                }
                if qi > 0 && e < epsilon_for(qs[qi - 1], s, t, 1e-5).unwrap() {
                    monotone = false;
                }
                if si > 0 && e > epsilon_for(q, sigmas[si - 1], t, 1e-5).unwrap() {
                    monotone = false;
                }
            }
        }
    }
    check(
        worst_closed <= 1e-12 && worst_grid <= 1e-10 && points >= 200 && monotone,
        format!(
            "q=1 rel gap {worst_closed:.1e}, {points}-point grid rel gap {worst_grid:.1e}, monotone {monotone}"
        ),
    )
}

fn criterion_7() -> Outcome {
    let mut g = rng(7);
    let mut worst = f64::NEG_INFINITY;
    let clip = 0.7;
    for _ in 0..50 {
        let mut net = random_net(&mut g, false);
        attach(&mut net, &mut g, true, None);
        let (x, labels) = { let m = g.random_range(2..=16); batch(&mut g, &net, m) };
        let (logits, mut acts) = net.forward(&x).unwrap();
        let (_, dlogits) = loss_and_grad(&logits, &labels, Reduction::Sum).unwrap();
        let grads = net.backward_per_sample_carrier(&mut acts, &dlogits).unwrap();
        let (clipped, _) = clip_per_sample(&grads.vectors, clip).unwrap();
        let sum = |skip: Option<usize>| -> Vec<f64> {
            let mut acc = vec![0.0; grads.layout.len];
            for (i, v) in clipped.iter().enumerate() {
                if Some(i) != skip {
                    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
                }
            }
            acc
        };
        let full = sum(None);
        for i in 0..clipped.len() {
            let gap: f64 = full.iter().zip(sum(Some(i))).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            worst = worst.max(gap - clip);
        }
    }
    check(worst <= 1e-9, format!("max (‖Δaggregate‖ − C) = {worst:.2e} over 50 batches"))
}

fn criterion_8() -> Outcome {
    let mut g = rng(8);
    for _ in 0..20 {
        let mut net = random_net(&mut g, false);
        let r = g.random_range(1..=8);
        attach(&mut net, &mut g, true, Some(r));
        let m = g.random_range(1..=16);
        let (x, labels) = batch(&mut g, &net, m);
        let (logits, mut acts) = net.forward(&x).unwrap();
        let (_, dlogits) = loss_and_grad(&logits, &labels, Reduction::Sum).unwrap();
        let rgp = net.backward_per_sample_carrier(&mut acts, &dlogits).unwrap().counter;
        let full = net.backward_per_sample_full(&mut acts, &dlogits).unwrap().counter;
        let dims: Vec<(usize, usize, usize)> =
            net.weight_cores().iter().map(|c| (c.weight.rows(), c.weight.cols(), c.carriers().unwrap().rank())).collect();
        let want_rgp: usize = m * dims.iter().map(|&(p, d, r)| r * (p + d)).sum::<usize>();
        let want_full: usize = m * dims.iter().map(|&(p, d, _)| p * d).sum::<usize>();
        if rgp.weight_floats != want_rgp || full.weight_floats != want_full {
            return Err(format!("counter {} / {} vs formula {want_rgp} / {want_full}", rgp.weight_floats, full.weight_floats));
        }
    }
    let spec = NetworkSpec { input_dim: 512, image_shape: None, conv: vec![], hidden: vec![512], classes: 512, zero_head: false };
    let mut net = Network::init(&spec, 8).unwrap();
    attach(&mut net, &mut g, true, Some(8));
    let (x, labels) = batch(&mut g, &net, 64);
    let (logits, mut acts) = net.forward(&x).unwrap();
    let (_, dlogits) = loss_and_grad(&logits, &labels, Reduction::Sum).unwrap();
    let rgp = net.backward_per_sample_carrier(&mut acts, &dlogits).unwrap().counter.weight_floats;
    let full = net.backward_per_sample_full(&mut acts, &dlogits).unwrap().counter.weight_floats;
    let exact = rgp == 64 * 2 * 8 * 1024 && full == 64 * 2 * 512 * 512;
    let ratio = rgp as f64 / full as f64;
    check(exact && ratio < 0.04, format!("counters exact on 20 nets; 512-wide MLP: {rgp} vs {full} floats ({:.2}%)", 100.0 * ratio))
}

/// Shared task for the comparative and ablation runs: 5,000 samples from
/// eight unit-variance blobs on a checkerboard (four per class), 60/40
/// train/test split, two hidden layers of width 256.
fn blobs_config(method: Method, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        blobs_n: 5000,
        blobs_grid: 2,
        blobs_separation: 3.0,
        test_fraction: 0.4,
        hidden: vec![256, 256],
        method,
        seed,
        q: Some(0.01),
        ..Default::default()
    };
    if method.is_private() {
        cfg.epsilon = Some(8.0);
        cfg.delta = 1e-4;
        cfg.epochs = Some(10.0);
        cfg.clip = 1.0;
        cfg.learning_rate = 0.1;
        cfg.rank = 4;
        cfg.power_iters = 1;
    } else {
        // Unclipped gradients are an order of magnitude larger than the
        // clipped DP updates; a smaller step needs more epochs.
        cfg.epochs = Some(60.0);
        cfg.learning_rate = 0.01;
    }
    cfg
}

fn run_cfg(cfg: &TrainConfig, dir: &Path) -> ExperimentReport {
    let (train, test) = load_data(cfg).unwrap();
    run_on(cfg, &train, &test, dir).unwrap()
}

fn criterion_9(dir: &Path) -> Outcome {
    let methods = [Method::Rgp, Method::Dpsgd, Method::RgpRandom, Method::NonprivateFull];
    let mut acc = vec![vec![0.0; 5]; methods.len()];
    for seed in 0..5 {
        for (k, &m) in methods.iter().enumerate() {
            let r = run_cfg(&blobs_config(m, seed), dir);
            if let Some(e) = r.epsilon {
                if e > 8.0 {
                    return Err(format!("{m} spent epsilon {e}"));
                }
            }
            acc[k][seed as usize] = r.test_accuracy;
        }
    }
    let mean = |k: usize| acc[k].iter().sum::<f64>() / 5.0;
    let (rgp, dp, rnd, np) = (0, 1, 2, 3);
    let ordered = |s: usize| acc[rgp][s] >= acc[dp][s] && acc[rgp][s] >= acc[rnd][s] && (0..3).all(|k| acc[np][s] >= acc[k][s]);
    let seeds_ok = (0..5).filter(|&s| ordered(s)).count();
    let means_ok = mean(rgp) >= mean(dp) && mean(rgp) >= mean(rnd) && (0..3).all(|k| mean(np) >= mean(k));
    check(
        means_ok && seeds_ok >= 4,
        format!(
            "mean test accuracy rgp {:.4}, dpsgd {:.4}, rgp-random {:.4}, nonprivate {:.4}; ordering held in {seeds_ok}/5 seeds",
            mean(rgp),
            mean(dp),
            mean(rnd),
            mean(np)
        ),
    )
}

fn criterion_10(dir: &Path) -> Outcome {
    let mut np_rates = Vec::new();
    let mut rgp_rates = Vec::new();
    for seed in 0..3 {
        let base = TrainConfig {
            blobs_n: 500,
            blobs_grid: 2,
            blobs_separation: 2.0,
            test_fraction: 0.5,
            hidden: vec![256, 256],
            seed,
            mi_attack: true,
            ..Default::default()
        };
        let overfit = TrainConfig {
            method: Method::NonprivateFull,
            batch: Some(250),
            steps: Some(1500),
            learning_rate: 0.03,
            ..base.clone()
        };
        let private = TrainConfig {
            method: Method::Rgp,
            q: Some(0.1),
            epochs: Some(10.0),
            epsilon: Some(8.0),
            delta: 1e-4,
            clip: 1.0,
            learning_rate: 0.1,
            rank: 4,
            ..base
        };
        np_rates.push(run_cfg(&overfit, dir).mi.unwrap().success_rate);
        rgp_rates.push(run_cfg(&private, dir).mi.unwrap().success_rate);
    }
    let np_ok = np_rates.iter().filter(|&&r| r >= 0.55).count();
    let rgp_ok = rgp_rates.iter().filter(|&&r| r <= 0.53).count();
    check(
        np_ok >= 2 && rgp_ok >= 2,
        format!("MI success non-private {np_rates:.3?} (≥ 0.55 in {np_ok}/3), rgp ε=8 {rgp_rates:.3?} (≤ 0.53 in {rgp_ok}/3)"),
    )
}

fn criterion_11(dir: &Path) -> Outcome {
    let mut ok = 0;
    let mut detail = Vec::new();
    for seed in 0..3 {
        let on = blobs_config(Method::Rgp, seed);
        let off = TrainConfig { residual_enabled: false, ..on.clone() };
        let a = run_cfg(&on, dir);
        let b = run_cfg(&off, dir);
        let gain_on = a.test_accuracy - a.initial_test_accuracy;
        let gain_off = b.test_accuracy - b.initial_test_accuracy;
        if gain_on >= 0.20 && gain_off.abs() <= 0.05 {
            ok += 1;
        }
        detail.push(format!("{:+.1}/{:+.1}", 100.0 * gain_on, 100.0 * gain_off));
    }
    check(ok >= 2, format!("accuracy change with/without residual (points): {} ; held in {ok}/3", detail.join(", ")))
}

fn criterion_12(dir: &Path) -> Outcome {
    for method in [Method::Rgp, Method::RgpRandom, Method::Dpsgd, Method::NonprivateFull, Method::NonprivateLinear] {
        let mut cfg = TrainConfig { blobs_n: 300, hidden: vec![16, 16], method, seed: 9, q: Some(0.1), steps: Some(15), ..Default::default() };
        if method.is_private() {
            cfg.sigma = Some(1.0);
        }
        let a = run_experiment(&TrainConfig { name: Some("a".into()), ..cfg.clone() }, dir).unwrap();
        let b = run_experiment(&TrainConfig { name: Some("b".into()), ..cfg }, dir).unwrap();
        let (ba, bb) = (std::fs::read(&a.model_path).unwrap(), std::fs::read(&b.model_path).unwrap());
        if ba != bb {
            return Err(format!("{method}: model bytes differ"));
        }
    }
    let spec = NetworkSpec { input_dim: 2, image_shape: None, conv: vec![], hidden: vec![4], classes: 2, zero_head: false };
    let same = encode_model(&Network::init(&spec, 1).unwrap()) == encode_model(&Network::init(&spec, 1).unwrap());
    check(same, "model files identical across re-runs for all five methods".into())
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let criteria: Vec<Criterion> = vec![
        ("1 carrier gradient identity", Box::new(criterion_1)),
        ("2 reconstruction equals projection", Box::new(criterion_2)),
        ("3 forward invariance", Box::new(criterion_3)),
        ("4 least-squares subspace invariance", Box::new(criterion_4)),
        ("5 power-method convergence", Box::new(criterion_5)),
        ("6 accountant correctness", Box::new(criterion_6)),
        ("7 clipped sensitivity", Box::new(criterion_7)),
        ("8 memory accounting", Box::new(criterion_8)),
        ("9 comparative run on blobs", Box::new(|| criterion_9(dir.path()))),
        ("10 membership inference", Box::new(|| criterion_10(dir.path()))),
        ("11 residual-weight ablation", Box::new(|| criterion_11(dir.path()))),
        ("12 determinism", Box::new(|| criterion_12(dir.path()))),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS criterion {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {name}: {d} [{secs:.1}s]");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
