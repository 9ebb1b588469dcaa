//! End-to-end acceptance checks. Runs without the libtest harness so that
//! every criterion prints exactly one PASS/FAIL line even when all succeed.

mod common;

use std::process::ExitCode;
use std::thread;
use std::time::{Duration, Instant};

use common::*;
use dakit::adversarial::{domain_adversarial, domain_adversarial_loss, DomainTag, GradientReversal};
use dakit::gradcam::{grad_cam, grad_cam_from_activations};
use dakit::harness::{cmd_run, RunManifest};
use dakit::losses::*;
use dakit::model::{BackboneSpec, BottleneckSpec, ModelBundle};
use dakit::nn::{relu, relu_backward, sigmoid, Linear, Module};
use dakit::numerics::{softmax_backward, Bandwidth, FeatureMatrix, KernelSpec, ProbabilityMatrix, DEFAULT_LADDER};
use dakit::data::{split_stream, LabeledSet};
use dakit::eval::a_distance;
use dakit::train::*;
use ndarray::{array, Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Duration);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn src(x: &Array2<f64>) -> FeatureMatrix {
    FeatureMatrix::source(x.clone()).unwrap()
}

fn tgt(x: &Array2<f64>) -> FeatureMatrix {
    FeatureMatrix::target(x.clone()).unwrap()
}

fn probs(p: &Array2<f64>) -> ProbabilityMatrix {
    ProbabilityMatrix::new(p.clone()).unwrap()
}

fn zero_at_identity() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut r = rng(seed);
        let (n, d, c) = (r.random_range(2..=16), r.random_range(1..=8), r.random_range(1..=4));
        let x = uniform(&mut r, n, d, 3.0);
        let y = simplex_rows(&mut r, n, c);
        let (fx, py) = (src(&x), probs(&y));
        let k = KernelSpec::default();
        let w = subdomain_weights(&py);
        let vals = [
            ("coral", coral_loss(&fx, &tgt(&x)).unwrap().value),
            ("mmd", mmd_loss(&fx, &tgt(&x), &k).unwrap().components["raw"]),
            ("lmmd", lmmd_loss(&fx, &tgt(&x), &w, &w, &k).unwrap().value),
            ("cmmd", cmmd_loss(&fx, &tgt(&x), &py, &py, &CmmdConfig::default()).unwrap().value),
            ("nwd", nwd_loss(&py, &py, NwdForm::NuclearNorm).unwrap().value),
        ];
        for (name, v) in vals {
            ensure(v.abs() <= 1e-9, || format!("{name} = {v:e} at n={n} d={d} C={c}"))?;
            worst = worst.max(v.abs());
        }
    }
    Ok(format!("max |loss| {worst:.1e} over 20 shapes"))
}

fn oracle_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let mut r = rng(10_000 + seed);
        let (ns, nt, c, d) = (r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=4), r.random_range(1..=5));
        let xs = uniform(&mut r, ns, d, 2.0);
        let xt = uniform(&mut r, nt, d, 2.0);
        let ys = one_hot(&random_labels(&mut r, ns, c), c);
        let yt = simplex_rows(&mut r, nt, c);
        let base = r.random_range(0.3..3.0);
        let kernel = KernelSpec {
            bandwidth: Bandwidth::Fixed(base),
            ..KernelSpec::default()
        };
        let sigmas: Vec<f64> = DEFAULT_LADDER.iter().map(|f| base * f).collect();
        let got = lmmd_loss(&src(&xs), &tgt(&xt), &subdomain_weights(&probs(&ys)), &subdomain_weights(&probs(&yt)), &kernel)
            .unwrap()
            .value;
        let e = (got - lmmd_brute(&xs, &xt, &ys, &yt, &sigmas)).abs();
        ensure(e <= 1e-8, || format!("lmmd seed {seed}: error {e:e}"))?;
        worst = worst.max(e);

        let (b, cc) = (r.random_range(1..=8), r.random_range(2..=6));
        let ps = simplex_rows(&mut r, b, cc);
        let pt = simplex_rows(&mut r, b, cc);
        let e = (bnm_loss(&probs(&pt)).unwrap().value + nuclear_oracle(&pt) / b as f64).abs();
        ensure(e <= 1e-8, || format!("bnm seed {seed}: error {e:e}"))?;
        worst = worst.max(e);
        let want = (nuclear_oracle(&ps) - nuclear_oracle(&pt)) / b as f64;
        let e = (nwd_loss(&probs(&ps), &probs(&pt), NwdForm::NuclearNorm).unwrap().value - want).abs();
        ensure(e <= 1e-8, || format!("nwd seed {seed}: error {e:e}"))?;
        worst = worst.max(e);
    }
    Ok(format!("max error {worst:.1e} over 50 seeds"))
}

/// Smallest singular value or gap between singular values.
fn singular_margin(p: &Array2<f64>) -> f64 {
    let mut e: Vec<f64> = jacobi_eigenvalues(&p.dot(&p.t())).into_iter().map(|v| v.max(0.0).sqrt()).collect();
    e.sort_by(f64::total_cmp);
    e.windows(2).map(|w| w[1] - w[0]).fold(e[0], f64::min)
}

fn gradient_checks() -> Outcome {
    const H: f64 = 1e-3;
    let mut worst = 0.0f64;
    let mut record = |name: &str, a: &Array2<f64>, n: &Array2<f64>| -> Result<(), String> {
        let e = rel_err(a, n, 1e-8);
        worst = worst.max(e);
        ensure(e < 1e-4, || format!("{name}: relative error {e:e}"))
    };
    let (mut checked, mut seed) = (0, 20_000);
    while checked < 5 {
        seed += 1;
        let mut r = rng(seed);
        let xs = uniform(&mut r, 4, 8, 1.0);
        let xt = uniform(&mut r, 4, 8, 1.0);
        let zs = uniform(&mut r, 4, 8, 2.0);
        let zt = uniform(&mut r, 4, 8, 2.0);
        let (ps, pt) = (softmax_rows(&zs), softmax_rows(&zt));
        if singular_margin(&ps) < 1e-3 || singular_margin(&pt) < 1e-3 {
            continue;
        }
        checked += 1;
        let ys = one_hot(&[0, 1, 2, 1], 3);
        let yt = simplex_rows(&mut r, 4, 3);
        let k = KernelSpec {
            bandwidth: Bandwidth::Fixed(2.0),
            ..KernelSpec::default()
        };

        let (_, g) = coral(&src(&xs), &tgt(&xt)).unwrap();
        record("coral", &g.source, &numeric_grad(&xs, H, |x| coral_loss(&src(x), &tgt(&xt)).unwrap().value))?;
        record("coral", &g.target, &numeric_grad(&xt, H, |x| coral_loss(&src(&xs), &tgt(x)).unwrap().value))?;

        let raw = |a: &Array2<f64>, b: &Array2<f64>| mmd_loss(&src(a), &tgt(b), &k).unwrap().components["raw"];
        let (_, g) = mmd(&src(&xs), &tgt(&xt), &k).unwrap();
        record("mmd", &g.source, &numeric_grad(&xs, H, |x| raw(x, &xt)))?;
        record("mmd", &g.target, &numeric_grad(&xt, H, |x| raw(&xs, x)))?;

        let (ws, wt) = (subdomain_weights(&probs(&ys)), subdomain_weights(&probs(&yt)));
        let lm = |a: &Array2<f64>, b: &Array2<f64>| lmmd_loss(&src(a), &tgt(b), &ws, &wt, &k).unwrap().value;
        let (_, g) = lmmd(&src(&xs), &tgt(&xt), &ws, &wt, &k).unwrap();
        record("lmmd", &g.source, &numeric_grad(&xs, H, |x| lm(x, &xt)))?;
        record("lmmd", &g.target, &numeric_grad(&xt, H, |x| lm(&xs, x)))?;

        let cfg = CmmdConfig {
            feature_kernel: k.clone(),
            ..CmmdConfig::default()
        };
        let (py, pyt) = (probs(&ys), probs(&yt));
        let cm = |a: &Array2<f64>, b: &Array2<f64>| cmmd_loss(&src(a), &tgt(b), &py, &pyt, &cfg).unwrap().value;
        let (_, g) = cmmd(&src(&xs), &tgt(&xt), &py, &pyt, &cfg).unwrap();
        record("cmmd", &g.source, &numeric_grad(&xs, H, |x| cm(x, &xt)))?;
        record("cmmd", &g.target, &numeric_grad(&xt, H, |x| cm(&xs, x)))?;

        let p = |z: &Array2<f64>| probs(&softmax_rows(z));
        let (_, gp) = bnm(&probs(&pt)).unwrap();
        record("bnm", &softmax_backward(&pt, &gp), &numeric_grad(&zt, H, |z| bnm_loss(&p(z)).unwrap().value))?;
        let (_, gp) = mutual_info(&probs(&pt));
        record("mi", &softmax_backward(&pt, &gp), &numeric_grad(&zt, H, |z| mutual_info_loss(&p(z)).value))?;
        for form in [NwdForm::NuclearNorm, NwdForm::PerSampleMean] {
            let (_, g) = nwd(&probs(&ps), &probs(&pt), form).unwrap();
            let fs = |z: &Array2<f64>| nwd_loss(&p(z), &probs(&pt), form).unwrap().value;
            let ft = |z: &Array2<f64>| nwd_loss(&probs(&ps), &p(z), form).unwrap().value;
            record("nwd", &softmax_backward(&ps, &g.source), &numeric_grad(&zs, H, fs))?;
            record("nwd", &softmax_backward(&pt, &g.target), &numeric_grad(&zt, H, ft))?;
        }

        let labels = [0usize, 3, 7, 3];
        let (_, g) = cross_entropy(&zs, &labels).unwrap();
        record("cross-entropy", &g, &numeric_grad(&zs, H, |z| cross_entropy(z, &labels).unwrap().0))?;

        let tags = [DomainTag::Source, DomainTag::Source, DomainTag::Target, DomainTag::Target];
        let logits = zs.column(0).to_owned().insert_axis(ndarray::Axis(1));
        let adv = |l: &Array2<f64>| domain_adversarial_loss(&l.column(0).mapv(sigmoid), &tags).unwrap().value;
        let (_, g) = domain_adversarial(&logits.column(0).mapv(sigmoid), &tags).unwrap();
        record("adversarial", &g.insert_axis(ndarray::Axis(1)), &numeric_grad(&logits, H, adv))?;
    }
    Ok(format!("max relative error {worst:.1e} over 5 seeds"))
}

fn grl_contract() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let mut r = rng(30_000 + seed);
        let (l1, l2, l3) = (Linear::new(5, 7, &mut r), Linear::new(7, 6, &mut r), Linear::new(6, 3, &mut r));
        let x = uniform(&mut r, 4, 5, 1.0);
        let g_out = uniform(&mut r, 4, 3, 1.0);
        let grads = |lambda: Option<f64>| {
            let h1 = relu(&l1.forward(&x));
            let h2 = l2.forward(&h1);
            let mut g3 = Linear::zeros(6, 3);
            let mut g = l3.backward(&h2, &g_out, &mut g3);
            if let Some(l) = lambda {
                g = GradientReversal::new(l).unwrap().backward(&g);
            }
            let (mut g1, mut g2) = (Linear::zeros(5, 7), Linear::zeros(7, 6));
            let g = l2.backward(&h1, &g, &mut g2);
            l1.backward(&x, &relu_backward(&h1, &g), &mut g1);
            [g1.flat_params(), g2.flat_params()].concat()
        };
        let plain = grads(None);
        for lambda in [0.1, 1.0, 3.7] {
            for (a, b) in grads(Some(lambda)).iter().zip(&plain) {
                let e = (a + lambda * b).abs() / (lambda * b.abs()).max(1e-300);
                if *b != 0.0 {
                    worst = worst.max(e);
                }
                ensure(e < 1e-10 || (*a == 0.0 && *b == 0.0), || format!("λ={lambda}: {a} vs {b}"))?;
            }
        }
    }
    Ok(format!("max relative error {worst:.1e}"))
}

fn gaussians(seed: u64, shift: f64) -> (FeatureMatrix, FeatureMatrix) {
    let mut r = rng(seed);
    let mut draw = |offset: f64| Array2::from_shape_fn((500, 2), |(_, j)| {
        let z: f64 = StandardNormal.sample(&mut r);
        z + if j == 0 { offset } else { 0.0 }
    });
    let a = draw(0.0);
    let b = draw(shift);
    (src(&a), tgt(&b))
}

fn a_distance_sanity() -> Outcome {
    let mut same = Vec::new();
    let mut apart = Vec::new();
    for seed in 0..10 {
        let (a, b) = gaussians(40_000 + seed, 0.0);
        same.push(a_distance(&a, &b, seed).map_err(|e| e.to_string())?.value);
        let (a, b) = gaussians(41_000 + seed, 10.0);
        apart.push(a_distance(&a, &b, seed).map_err(|e| e.to_string())?.value);
    }
    let (m0, m1) = (median(same), median(apart));
    ensure(m0 <= 0.3 && m1 >= 1.5, || format!("medians {m0:.3} (same) / {m1:.3} (separated)"))?;
    Ok(format!("medians {m0:.3} (same) / {m1:.3} (separated)"))
}

fn proxy_config(alg: Algorithm, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::for_algorithm(alg);
    cfg.seed = seed;
    cfg.scenario.synthetic.seed = seed;
    cfg.iters_per_epoch = Some(50);
    cfg.record_wall_time = false;
    cfg.save_checkpoints = false;
    cfg
}

/// `(best, final)` target accuracies per seed, trained concurrently.
fn proxy_runs(alg: Algorithm, stream_parts: Option<usize>) -> Result<Vec<(f64, f64)>, String> {
    thread::scope(|s| {
        let handles: Vec<_> = (0..5u64)
            .map(|seed| {
                s.spawn(move || {
                    let mut cfg = proxy_config(alg, seed);
                    cfg.scenario.stream_parts = stream_parts;
                    let data = load_scenario(&cfg.scenario, seed).map_err(|e| e.to_string())?;
                    let out = run_experiment(&cfg, &data, None).map_err(|e| e.to_string())?;
                    Ok((out.best_accuracy, out.final_accuracy))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("run panicked")).collect()
    })
}

fn dsan_beats_baseline() -> Outcome {
    let dsan = median(proxy_runs(Algorithm::Dsan, None)?.iter().map(|r| r.0).collect());
    let none = median(proxy_runs(Algorithm::None, None)?.iter().map(|r| r.0).collect());
    let gap = 100.0 * (dsan - none);
    let msg = format!("median best accuracy dsan {:.1}% vs none {:.1}% (+{gap:.1}pp)", 100.0 * dsan, 100.0 * none);
    ensure(gap >= 5.0, || msg.clone())?;
    Ok(msg)
}

fn stream_proxy() -> Outcome {
    for k in 2..=20 {
        for seed in 0..3 {
            let n = 900;
            let plan = split_stream(n, k, seed).map_err(|e| e.to_string())?;
            let parts = plan.parts();
            let mut all: Vec<usize> = parts.concat();
            all.sort_unstable();
            ensure(all == (0..n).collect::<Vec<_>>(), || format!("K={k}: not a partition"))?;
            let (lo, hi) = (parts.iter().map(Vec::len).min().unwrap(), parts.iter().map(Vec::len).max().unwrap());
            ensure(lo > 0 && hi - lo <= 1, || format!("K={k}: part sizes {lo}..{hi}"))?;
            ensure((0..k).all(|e| plan.part_for_epoch(e) == parts[e]), || format!("K={k}: epoch order"))?;
        }
    }
    let dsan = median(proxy_runs(Algorithm::Dsan, Some(10))?.iter().map(|r| r.1).collect());
    let none = median(proxy_runs(Algorithm::None, Some(10))?.iter().map(|r| r.1).collect());
    let msg = format!("K=10 median final accuracy dsan {:.1}% vs none {:.1}%; partitions exact for K=2..20", 100.0 * dsan, 100.0 * none);
    ensure(dsan >= none, || msg.clone())?;
    Ok(msg)
}

fn determinism() -> Outcome {
    let mut cfg = ExperimentConfig::for_algorithm(Algorithm::Dann);
    cfg.epochs = Some(4);
    cfg.iters_per_epoch = Some(20);
    cfg.record_wall_time = false;
    cfg.metrics.balanced_accuracy = true;
    cfg.metrics.a_distance = true;
    let roots = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut logs = Vec::new();
    for root in &roots {
        cmd_run(&cfg, None, root.path(), false).map_err(|e| e.to_string())?;
        let dir = RunManifest::new(&cfg, None, root.path()).map_err(|e| e.to_string())?.out_dir;
        let read = |f: &str| std::fs::read(dir.join(f)).map_err(|e| e.to_string());
        logs.push((read(METRICS_JSONL)?, read(METRICS_CSV)?));
    }
    ensure(logs[0] == logs[1], || "metric logs differ between identical runs".into())?;
    Ok(format!("{} bytes of metric log identical across two runs", logs[0].0.len() + logs[0].1.len()))
}

fn grad_cam_contract() -> Outcome {
    let a = Array3::from_shape_fn((3, 4, 4), |(k, i, j)| (k + i * j) as f64);
    let zero = grad_cam_from_activations(&a, &Array3::zeros((3, 4, 4)), "conv").map_err(|e| e.to_string())?;
    ensure(zero.data.iter().all(|v| *v == 0.0), || "zero gradients gave a non-zero map".into())?;

    let a = Array3::from_shape_vec((1, 2, 2), vec![1.0, 2.0, 3.0, 5.0]).unwrap();
    let g = Array3::from_shape_vec((1, 2, 2), vec![0.5, -0.25, 1.0, 0.75]).unwrap();
    // weight 0.5 → map [[0.5, 1], [1.5, 2.5]] → min-max
    let want = array![[0.0, 0.25], [0.5, 1.0]];
    let got = grad_cam_from_activations(&a, &g, "conv").map_err(|e| e.to_string())?.data;
    let e = (&got - &want).mapv(f64::abs).fold(0.0f64, |m, v| m.max(*v));
    ensure(e <= 1e-9, || format!("2×2 map off by {e:e}"))?;

    let mut r = rng(50_000);
    let mut model = ModelBundle::build(&BackboneSpec::toy_cnn([3, 16, 16], 8), &BottleneckSpec::default(), 3, &mut r)
        .map_err(|e| e.to_string())?;
    let x = uniform(&mut r, 1, 3 * 16 * 16, 1.0);
    let base = grad_cam(&mut model, &x, 2, "conv2").map_err(|e| e.to_string())?;
    let interior = base.data.iter().filter(|v| **v > 0.0 && **v < 1.0).count();
    ensure(interior > 0, || format!("degenerate reference map {:?}", base.data))?;
    let mut worst = 0.0f64;
    for c in [0.01, 2.0, 250.0] {
        let mut scaled = model.clone();
        for (_, mut p) in scaled.classifier.params_mut() {
            p.mapv_inplace(|v| v * c);
        }
        let m = grad_cam(&mut scaled, &x, 2, "conv2").map_err(|e| e.to_string())?;
        let e = (&m.data - &base.data).mapv(f64::abs).fold(0.0f64, |m, v| m.max(*v));
        worst = worst.max(e);
        ensure(e <= 1e-9, || format!("score scale {c}: map changed by {e:e}"))?;
    }
    Ok(format!("zero case exact, 2×2 error {e:.1e}, scale drift {worst:.1e} over {interior} interior cells"))
}

fn unsupervised_contract() -> Outcome {
    let mut cfg = ExperimentConfig::for_algorithm(Algorithm::Dsan);
    cfg.iters_per_epoch = Some(1);
    cfg.scenario.synthetic.samples_per_class = 60;
    let data = load_scenario(&cfg.scenario, cfg.seed).map_err(|e| e.to_string())?;
    let mut shuffled = data.clone();
    let mut labels = data.target.labels.clone();
    labels.shuffle(&mut rng(60_000));
    shuffled.target = LabeledSet::new(data.target.inputs.clone(), labels, data.target.classes).map_err(|e| e.to_string())?;
    ensure(shuffled.target.labels != data.target.labels, || "shuffle was a no-op".into())?;
    let mut hashes = Vec::new();
    for algorithm in Algorithm::ALL {
        cfg.algorithm = algorithm;
        for d in [&data, &shuffled] {
            let mut t = Trainer::new(&cfg, build_model(&cfg, d).map_err(|e| e.to_string())?);
            let b = cfg.batch_size();
            let mut sl = CyclingLoader::new((0..d.source.len()).collect(), b, 11).map_err(|e| e.to_string())?;
            let mut tl = CyclingLoader::new((0..d.target.len()).collect(), b, 12).map_err(|e| e.to_string())?;
            let mut trace = Vec::new();
            for _ in 0..10 {
                t.train_epoch(&d.source, &mut sl, d.target.inputs.as_ref(), &mut tl).map_err(|e| e.to_string())?;
                let p = t.model.flat_params();
                trace.push(matrix_hash(&Array2::from_shape_vec((1, p.len()), p).unwrap()));
            }
            hashes.push(trace);
        }
        let n = hashes.len();
        ensure(hashes[n - 1] == hashes[n - 2], || format!("{algorithm}: parameters depend on target labels"))?;
    }
    Ok(format!("10-step parameter hashes identical for {} algorithms", Algorithm::ALL.len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("zero at identity", zero_at_identity, Duration::from_secs(10)),
        ("oracle equivalence", oracle_equivalence, Duration::from_secs(30)),
        ("gradient checks", gradient_checks, Duration::from_secs(60)),
        ("gradient reversal", grl_contract, Duration::MAX),
        ("A-distance sanity", a_distance_sanity, Duration::from_secs(60)),
        ("synthetic DA proxy", dsan_beats_baseline, Duration::from_secs(300)),
        ("dynamic stream proxy", stream_proxy, Duration::MAX),
        ("determinism", determinism, Duration::MAX),
        ("Grad-CAM contract", grad_cam_contract, Duration::MAX),
        ("unsupervised contract", unsupervised_contract, Duration::MAX),
    ];
    let mut failed = 0;
    for (i, (name, check, budget)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let took = start.elapsed();
        let outcome = outcome.and_then(|m| {
            if took <= budget {
                Ok(m)
            } else {
                Err(format!("{m}; took {took:.1?}, budget {budget:.0?}"))
            }
        });
        match outcome {
            Ok(m) => println!("PASS [{:>2}] {name}: {m} ({took:.2?})", i + 1),
            Err(m) => {
                failed += 1;
                println!("FAIL [{:>2}] {name}: {m} ({took:.2?})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
