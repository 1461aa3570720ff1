//! Acceptance suite. Prints one PASS/FAIL line per criterion with the measured
//! values, then exits nonzero if any criterion failed.
//!
//! Runs without the libtest harness so the lines always reach stdout.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fedcl::config::{ExperimentConfig, PartitionSpec};
use fedcl::federation::{second_moment, ServerHyper, ServerKind, ServerOptState, Weighting};
use fedcl::metrics::{acc, bwt_f, AccuracyMatrix, BwtMode};
use fedcl::model::{init_model, Activation, BackboneSpec, GlobalModel};
use fedcl::numerics::{derive_stream, Layout, Matrix, ParamVector, Purpose, Rng};
use fedcl::runner::{prepare, run_experiment, simulate, simulate_with};
use fedcl::schedule::{build_schedule, OrderingCase};
use std::sync::Arc;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// `‖a − b‖∞ / max(‖b‖∞, tiny)`.
fn rel_inf(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    diff / scale.max(f64::MIN_POSITIVE)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ---------------------------------------------------------------- C1

fn random_model(seed: u64) -> GlobalModel {
    let mut rng = Rng::new(seed, 77);
    let depth = 2 + rng.below(3);
    let layer_dims = (0..depth).map(|_| 2 + rng.below(7)).collect();
    let spec = BackboneSpec {
        input_dim: 2 + rng.below(7),
        layer_dims,
        activation: if rng.below(2) == 0 { Activation::Relu } else { Activation::Tanh },
        skip_window: 1 + rng.below(depth - 1),
    };
    let classes = 2 + rng.below(4);
    let mut model = init_model(&spec, 1, classes, &mut rng).unwrap();
    for v in model.adapter_mut(0).unwrap().params_mut().as_mut_slice() {
        *v += 0.5 * rng.normal();
    }
    model
}

fn c1_gradient_oracle() -> Outcome {
    let eps = 1e-5;
    let tol = 1e-4;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..20 {
        let model = random_model(seed);
        let d = model.backbone().spec().input_dim;
        let classes = model.adapter(0).unwrap().classes();
        let mut rng = Rng::new(seed, 78);
        let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let y: Vec<usize> = (0..4).map(|_| rng.below(classes)).collect();
        let (_, grad) = model.loss_and_grad(0, &x, &y).unwrap();
        let loss_at = |i: usize, h: f64| {
            let mut m = model.clone();
            m.adapter_mut(0).unwrap().params_mut().as_mut_slice()[i] += h;
            m.loss_and_grad(0, &x, &y).unwrap().0
        };
        for (i, &g) in grad.as_slice().iter().enumerate() {
            let fd = (loss_at(i, eps) - loss_at(i, -eps)) / (2.0 * eps);
            // Relative error, floored so components that are zero up to
            // rounding do not divide by zero.
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    outcome(worst < tol, format!("{checked} components, worst relative error {worst:.2e} (tol {tol:.0e})"))
}

// ---------------------------------------------------------------- C2

/// Plain mini-batch SGD written out against the public model API, using the
/// same shuffle stream the runner hands to a client.
fn sgd_oracle(
    model: &GlobalModel,
    task: usize,
    train: &fedcl::data::Dataset,
    shard: &[usize],
    cfg: &ExperimentConfig,
    rng: &mut Rng,
) -> Vec<f64> {
    let mut m = model.clone();
    let mut order = shard.to_vec();
    let batch = if cfg.batch_size == 0 { shard.len() } else { cfg.batch_size };
    for _ in 0..cfg.local_epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let mut idx = chunk.to_vec();
            idx.sort_unstable();
            let x = train.x.select_rows(&idx);
            let y: Vec<usize> = idx.iter().map(|&i| train.y[i]).collect();
            let (_, g) = m.loss_and_grad(task, &x, &y).unwrap();
            let p = m.adapter_mut(task).unwrap().params_mut().as_mut_slice();
            for (w, gi) in p.iter_mut().zip(g.as_slice()) {
                *w -= cfg.client_lr * gi;
            }
        }
    }
    m.adapter(task).unwrap().params().as_slice().to_vec()
}

fn small_cfg() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    if let fedcl::config::DataSource::Synthetic(s) = &mut cfg.data {
        s.classes = 10;
        s.dim = 16;
        s.per_class = 40;
    }
    cfg.layer_dims = vec![16, 16];
    cfg
}

fn c2_fedavg_fixed_point() -> Outcome {
    let mut cfg = small_cfg();
    cfg.tasks = 1;
    cfg.rounds = 1;
    cfg.clients = 4;
    cfg.partition = PartitionSpec::Dirichlet { alpha: 1.0 };
    cfg.server = ServerKind::FedSgd;
    cfg.server_lr = 1.0;
    cfg.beta1 = Some(0.0);
    cfg.weighting = Weighting::SampleWeighted;
    cfg.seed = 11;
    let setup = prepare(&cfg).unwrap();
    let sim = simulate(&cfg).unwrap();
    let train = &setup.split.tasks[0].train;
    let dim = setup.model.adapter(0).unwrap().params().len();
    let mut num = vec![0.0; dim];
    let mut total = 0usize;
    let mut sizes = Vec::new();
    for c in 0..cfg.clients {
        let shard = setup.partition.shard(0, c);
        sizes.push(shard.len());
        if shard.is_empty() {
            continue;
        }
        let mut rng = derive_stream(cfg.seed, 1, c as u64, Purpose::LocalTrain);
        let post = sgd_oracle(&setup.model, 0, train, shard, &cfg, &mut rng);
        for (n, p) in num.iter_mut().zip(&post) {
            *n += shard.len() as f64 * p;
        }
        total += shard.len();
    }
    let want: Vec<f64> = num.iter().map(|n| n / total as f64).collect();
    let got = sim.model.adapter(0).unwrap().params().as_slice();
    let rel = rel_inf(got, &want);
    let distinct = sizes.iter().collect::<std::collections::BTreeSet<_>>().len() > 1;
    outcome(
        rel <= 1e-12 && distinct,
        format!("shard sizes {sizes:?}, relative deviation {rel:.2e} (tol 1e-12)"),
    )
}

// ---------------------------------------------------------------- C3

fn c3_centralized_equivalence() -> Outcome {
    let mut cfg = small_cfg();
    cfg.tasks = 5;
    cfg.rounds = 50;
    cfg.clients = 1;
    cfg.local_epochs = 1;
    cfg.batch_size = 0;
    cfg.case = OrderingCase::SyncFcl;
    cfg.server = ServerKind::FedSgd;
    cfg.server_lr = 1.0;
    cfg.beta1 = Some(0.0);
    cfg.seed = 3;
    let setup = prepare(&cfg).unwrap();
    let q = cfg.phase_len();

    // Centralized reference: full-batch gradient descent on the active task.
    let mut central = setup.model.clone();
    let mut trajectory = Vec::new();
    for r in 1..=cfg.rounds {
        let t = (r - 1) / q;
        let train = &setup.split.tasks[t].train;
        let (_, g) = central.loss_and_grad(t, &train.x, &train.y).unwrap();
        let p = central.adapter_mut(t).unwrap().params_mut().as_mut_slice();
        for (w, gi) in p.iter_mut().zip(g.as_slice()) {
            *w -= cfg.client_lr * gi;
        }
        trajectory.push(central.clone());
    }

    let mut worst: f64 = 0.0;
    simulate_with(&cfg, |r, model| {
        for t in 0..cfg.tasks {
            let got = model.adapter(t).unwrap().params().as_slice();
            let want = trajectory[r - 1].adapter(t).unwrap().params().as_slice();
            worst = worst.max(rel_inf(got, want));
        }
    })
    .unwrap();
    outcome(worst <= 1e-12, format!("{} rounds, worst relative deviation {worst:.2e} (tol 1e-12)", cfg.rounds))
}

// ---------------------------------------------------------------- C4

fn yogi_reference(beta2: f64, v: f64, d: f64) -> f64 {
    let d2 = d * d;
    let sign = if v > d2 {
        1.0
    } else if v < d2 {
        -1.0
    } else {
        0.0
    };
    v - (1.0 - beta2) * d2 * sign
}

fn c4_second_moment_rules() -> Outcome {
    let n = 10_000;
    let mut rng = Rng::new(4, 4);
    let mut adagrad_bad = 0;
    let mut adam_bad = 0;
    let mut yogi_bad = 0;
    for _ in 0..n {
        let beta2 = 0.5 + 0.4999 * rng.uniform();
        let v = (4.0 * rng.normal()).exp() * rng.uniform();
        let d = (2.0 * rng.normal()).exp() * rng.normal();
        let a = second_moment(ServerKind::FedAdagrad, beta2, v, d);
        if !(a >= v) {
            adagrad_bad += 1;
        }
        let m = second_moment(ServerKind::FedAdam, beta2, v, d);
        let (lo, hi) = (v.min(d * d), v.max(d * d));
        // Allow the last bits of rounding in β2·v + (1−β2)·Δ².
        let slack = 4.0 * f64::EPSILON * hi;
        if !(m >= lo - slack && m <= hi + slack) {
            adam_bad += 1;
        }
        if second_moment(ServerKind::FedYogi, beta2, v, d).to_bits() != yogi_reference(beta2, v, d).to_bits() {
            yogi_bad += 1;
        }
    }

    // The same pairs through the vector server path: the first step sets v
    // from τ², the second applies the rule to a random (v, Δ).
    let layout = Arc::new(Layout::new([("w", n)]));
    let mut hyper = ServerHyper::defaults(ServerKind::FedYogi, 0.1);
    hyper.beta1 = 0.0;
    let mut state = ServerOptState::new(hyper).unwrap();
    let g1: Vec<f64> = (0..n).map(|_| (2.0 * rng.normal()).exp() * rng.normal()).collect();
    let g2: Vec<f64> = (0..n).map(|_| (2.0 * rng.normal()).exp() * rng.normal()).collect();
    let mut x = ParamVector::zeros(Arc::clone(&layout));
    state.step(0, &mut x, &ParamVector::from_parts(Arc::clone(&layout), g1.clone()).unwrap()).unwrap();
    state.step(0, &mut x, &ParamVector::from_parts(Arc::clone(&layout), g2.clone()).unwrap()).unwrap();
    let v = state.moments(0).unwrap().second.as_slice();
    let tau2 = hyper.tau * hyper.tau;
    for i in 0..n {
        let want = yogi_reference(hyper.beta2, yogi_reference(hyper.beta2, tau2, g1[i]), g2[i]);
        if v[i].to_bits() != want.to_bits() {
            yogi_bad += 1;
        }
    }
    outcome(
        adagrad_bad + adam_bad + yogi_bad == 0,
        format!("{n} pairs: adagrad violations {adagrad_bad}, adam bound violations {adam_bad}, yogi mismatches {yogi_bad} (scalar and server path)"),
    )
}

// ---------------------------------------------------------------- C5

/// Upper 1% point of the χ² distribution with 9 degrees of freedom.
const CHI2_9_CRIT_001: f64 = 21.666;

fn c5_scheduler_laws() -> Outcome {
    let (rounds, tasks, clients) = (100, 5, 7);
    let q = rounds / tasks;
    let mut notes = Vec::new();
    let mut pass = true;

    let sync = build_schedule(rounds, tasks, clients, OrderingCase::SyncFcl, &mut Rng::new(5, 0)).unwrap();
    let mut per_task = vec![0; tasks];
    let mut single = true;
    for r in 1..=rounds {
        let a = sync.assignments(r);
        single &= a.iter().all(|&t| t == a[0]);
        per_task[a[0]] += 1;
    }
    let sync_ok = single && per_task.iter().all(|&n| n == q);
    pass &= sync_ok;
    notes.push(format!("case2 single-task {single}, rounds per task {per_task:?}"));

    let asy = build_schedule(rounds, tasks, clients, OrderingCase::AsyncFcl, &mut Rng::new(5, 1)).unwrap();
    let mut budget_ok = true;
    for c in 0..clients {
        let mut counts = vec![0; tasks];
        for r in 1..=rounds {
            counts[asy.task_for(r, c)] += 1;
        }
        budget_ok &= counts.iter().all(|&n| n == q);
    }
    pass &= budget_ok;
    notes.push(format!("case3 every client {q} rounds per task {budget_ok}"));

    let (rounds, tasks, clients) = (10_000, 10, 10);
    let fmtl = build_schedule(rounds, tasks, clients, OrderingCase::Fmtl, &mut Rng::new(5, 2)).unwrap();
    let mut counts = vec![0usize; tasks];
    for r in 1..=rounds {
        for t in fmtl.assignments(r) {
            counts[t] += 1;
        }
    }
    let draws = (rounds * clients) as f64;
    let expected = draws / tasks as f64;
    let chi2: f64 = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let chi_ok = chi2 < CHI2_9_CRIT_001;
    pass &= chi_ok;
    notes.push(format!("case1 chi2 {chi2:.2} over {draws} draws (crit {CHI2_9_CRIT_001})"));
    outcome(pass, notes.join("; "))
}

// ---------------------------------------------------------------- C6

fn c6_metric_units() -> Outcome {
    let m = |rows: &[&[f64]]| AccuracyMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
    let a = m(&[&[0.5, 0.6, 0.4, 0.5], &[0.1, 0.2, 0.3, 0.4]]);
    // Terms (0.6−0.5)+(0.5−0.4) and (0.2−0.1)+(0.4−0.3), over T² = 4.
    let lit = bwt_f(&a, 2, BwtMode::Literal).unwrap();
    // Boundary terms (0.4−0.6) and (0.3−0.2), over T(T−1) = 2.
    let bnd = bwt_f(&a, 2, BwtMode::Boundary).unwrap();
    let acc1 = acc(&m(&[&[0.1, 1.0], &[0.3, 1.0]])).unwrap();
    let acc2 = acc(&m(&[&[0.0, 0.75], &[0.0, 0.25]])).unwrap();
    let constant = bwt_f(&m(&[&[0.3; 6], &[0.3; 6], &[0.3; 6]]), 2, BwtMode::Literal).unwrap();
    let constant_b = bwt_f(&m(&[&[0.3; 6], &[0.3; 6], &[0.3; 6]]), 2, BwtMode::Boundary).unwrap();
    // Hand sums of decimal differences carry binary rounding; compare within
    // a few ulps of the exact decimal answer.
    let near = |x: f64, want: f64| (x - want).abs() <= 4.0 * f64::EPSILON * want.abs().max(1.0);
    let pass = near(lit, 0.1)
        && near(bnd, -0.05)
        && acc1 == 1.0
        && acc2 == 0.5
        && constant == 0.0
        && constant_b == 0.0;
    outcome(
        pass,
        format!("bwt literal {lit} (0.1), boundary {bnd} (-0.05), acc {acc1} (1), {acc2} (0.5), constant bwt {constant}/{constant_b}"),
    )
}

// ---------------------------------------------------------------- trends

/// What the trend criteria need from a run.
#[derive(Clone)]
struct Trend {
    acc: f64,
    bwt: Option<f64>,
    cosine: Vec<Vec<f64>>,
    q: usize,
}

#[derive(Default)]
struct Runs {
    cache: BTreeMap<String, Trend>,
}

impl Runs {
    fn get(&mut self, cfg: &ExperimentConfig) -> Trend {
        let key = serde_json::to_string(&cfg.to_flat()).unwrap();
        self.cache
            .entry(key)
            .or_insert_with(|| {
                let sim = simulate(cfg).unwrap();
                Trend {
                    acc: sim.acc().unwrap(),
                    bwt: sim.bwt_f(cfg).unwrap(),
                    cosine: (0..cfg.tasks).map(|t| sim.drift.task_cosine(t)).collect(),
                    q: cfg.phase_len(),
                }
            })
            .clone()
    }

    fn over_seeds(&mut self, f: impl Fn(&mut ExperimentConfig)) -> Vec<Trend> {
        SEEDS
            .iter()
            .map(|&s| {
                let mut cfg = ExperimentConfig::desk();
                cfg.seed = s;
                f(&mut cfg);
                self.get(&cfg)
            })
            .collect()
    }
}

fn mean_acc(runs: &[Trend]) -> f64 {
    mean(&runs.iter().map(|t| t.acc).collect::<Vec<_>>())
}

fn fedsgd(cfg: &mut ExperimentConfig) {
    cfg.server = ServerKind::FedSgd;
    cfg.server_lr = 1.0;
    cfg.beta1 = None;
}

fn c7_ordering(runs: &mut Runs) -> Outcome {
    let a: Vec<f64> = [OrderingCase::Fmtl, OrderingCase::SyncFcl, OrderingCase::AsyncFcl]
        .into_iter()
        .map(|case| mean_acc(&runs.over_seeds(|c| c.case = case)))
        .collect();
    outcome(
        a[0] > a[1] && a[1] > a[2],
        format!("mean ACC case1 {:.4} > case2 {:.4} > case3 {:.4}", a[0], a[1], a[2]),
    )
}

fn c8_adaptive(runs: &mut Runs) -> Outcome {
    let adam = runs.over_seeds(|_| {});
    let sgd = runs.over_seeds(fedsgd);
    let abs_bwt = |rs: &[Trend]| mean(&rs.iter().map(|t| t.bwt.expect("Q >= 2").abs()).collect::<Vec<_>>());
    let (ba, bs) = (abs_bwt(&adam), abs_bwt(&sgd));
    let (aa, as_) = (mean_acc(&adam), mean_acc(&sgd));
    outcome(
        ba < bs && aa >= as_ - 0.005,
        format!("mean |BWT_f| fedadam {ba:.5} < fedsgd {bs:.5}; mean ACC fedadam {aa:.4} vs fedsgd {as_:.4} (allowed 0.5pp below)"),
    )
}

fn c9_non_iid(runs: &mut Runs) -> Outcome {
    let low = mean_acc(&runs.over_seeds(|c| c.partition = PartitionSpec::Dirichlet { alpha: 0.5 }));
    let high = mean_acc(&runs.over_seeds(|c| c.partition = PartitionSpec::Dirichlet { alpha: 8.0 }));
    outcome(low < high, format!("mean ACC alpha=0.5 {low:.4} < alpha=8 {high:.4}"))
}

fn c10_stragglers(runs: &mut Runs) -> Outcome {
    let full = mean_acc(&runs.over_seeds(|_| {}));
    let dropped = mean_acc(&runs.over_seeds(|c| c.drop_prob = 0.2));
    let gap = full - dropped;
    outcome(
        gap.abs() <= 0.10,
        format!("mean ACC drop 0 {full:.4}, drop 0.2 {dropped:.4}, gap {:.2}pp (limit 10pp)", 100.0 * gap),
    )
}

/// Per task: largest cosine distance at a phase-boundary round (`pQ+1`,
/// `p = 1..T−1`) over the median distance of in-phase rounds in which the
/// task's head moved.
fn spike_ratios(run: &Trend) -> Vec<f64> {
    let q = run.q;
    run.cosine
        .iter()
        .map(|series| {
            let tasks = run.cosine.len();
            let peak = (1..tasks).map(|p| series[p * q]).fold(0.0, f64::max);
            let mut inner: Vec<f64> = series
                .iter()
                .enumerate()
                .filter(|&(i, &c)| i % q != 0 && c > 0.0)
                .map(|(_, &c)| c)
                .collect();
            if inner.is_empty() {
                return f64::NAN;
            }
            inner.sort_by(f64::total_cmp);
            let n = inner.len();
            let median = if n % 2 == 1 { inner[n / 2] } else { 0.5 * (inner[n / 2 - 1] + inner[n / 2]) };
            peak / median
        })
        .collect()
}

fn c12_drift_spikes(runs: &mut Runs) -> Outcome {
    let sgd = runs.over_seeds(fedsgd);
    let adam = runs.over_seeds(|_| {});
    let mut majority_everywhere = true;
    let mut counts = Vec::new();
    let mut all_sgd = Vec::new();
    for run in &sgd {
        let r = spike_ratios(run);
        let spiky = r.iter().filter(|&&x| x >= 2.0).count();
        majority_everywhere &= 2 * spiky > r.len();
        counts.push(spiky);
        all_sgd.extend(r);
    }
    let all_adam: Vec<f64> = adam.iter().flat_map(spike_ratios).collect();
    let (ms, ma) = (mean(&all_sgd), mean(&all_adam));
    outcome(
        majority_everywhere && ma < ms,
        format!("fedsgd tasks with ratio >= 2 per seed {counts:?} of 5; mean ratio fedsgd {ms:.2} > fedadam {ma:.2}"),
    )
}

// ---------------------------------------------------------------- C11

fn c11_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::desk();
    cfg.seed = 1;
    cfg.emit_svg = true;
    cfg.output_dir = dir.path().to_path_buf();
    let read_all = |files: &[std::path::PathBuf]| -> BTreeMap<String, Vec<u8>> {
        files
            .iter()
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(p).unwrap()))
            .collect()
    };
    let first = read_all(&run_experiment(&cfg).unwrap().files);
    let second = read_all(&run_experiment(&cfg).unwrap().files);
    let required = ["accuracy_matrix.csv", "drift.csv", "summary.json"];
    let svgs = first.keys().filter(|k| k.ends_with(".svg")).count();
    let present = required.iter().all(|k| first.contains_key(*k)) && svgs > 0;
    let differing: Vec<&String> = first.keys().filter(|k| first.get(*k) != second.get(*k)).collect();
    outcome(
        present && differing.is_empty() && first.len() == second.len(),
        format!("{} files compared ({svgs} svg), differing {differing:?}", first.len()),
    )
}

// ---------------------------------------------------------------- driver

fn main() -> ExitCode {
    let mut runs = Runs::default();
    type Check<'a> = Box<dyn FnOnce(&mut Runs) -> Outcome + 'a>;
    let criteria: Vec<(u32, &str, Duration, Check)> = vec![
        (1, "gradient oracle", Duration::from_secs(5), Box::new(|_| c1_gradient_oracle())),
        (2, "fedavg fixed point", Duration::from_secs(1), Box::new(|_| c2_fedavg_fixed_point())),
        (3, "centralized equivalence", Duration::from_secs(10), Box::new(|_| c3_centralized_equivalence())),
        (4, "second-moment rules", Duration::from_secs(1), Box::new(|_| c4_second_moment_rules())),
        (5, "scheduler laws", Duration::from_secs(5), Box::new(|_| c5_scheduler_laws())),
        (6, "metric units", Duration::from_secs(1), Box::new(|_| c6_metric_units())),
        (7, "trend: task ordering", Duration::from_secs(300), Box::new(c7_ordering)),
        (8, "trend: adaptive optimizer", Duration::from_secs(300), Box::new(c8_adaptive)),
        (9, "non-iid degradation", Duration::from_secs(300), Box::new(c9_non_iid)),
        (10, "straggler robustness", Duration::from_secs(300), Box::new(c10_stragglers)),
        (11, "determinism", Duration::from_secs(120), Box::new(|_| c11_determinism())),
        (12, "drift visibility", Duration::from_secs(300), Box::new(c12_drift_spikes)),
    ];
    let mut failed = 0;
    for (id, name, budget, check) in criteria {
        let start = Instant::now();
        let o = check(&mut runs);
        let took = start.elapsed();
        let pass = o.pass && took <= budget;
        if !pass {
            failed += 1;
        }
        println!(
            "{} C{id:<2} {name}: {} [{:.2}s, limit {}s]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("acceptance: {} of 12 criteria passed", 12 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
