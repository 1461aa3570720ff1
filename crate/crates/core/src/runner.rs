//! The round loop: schedule, stragglers, local training, per-task server
//! steps, evaluation; plus file emission and seed sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::config::{from_flat, DataSource, ExperimentConfig, PartitionSpec};
use crate::data::{
    load_csv, partition_dirichlet, partition_iid, split_tasks_with, synth_blobs, ClientPartition, TaskSplit,
};
use crate::error::{Error, Result};
use crate::federation::{
    aggregate_pseudo_gradient, apply_stragglers, comm_bytes, local_train, LocalOutcome, LocalTrainConfig,
    ServerOptState, StragglerPolicy,
};
use crate::metrics::{acc, bwt_f, cosine_drift, record_round, round_drift, AccuracyMatrix, DriftSeries};
use crate::model::{init_model, GlobalModel};
use crate::numerics::{derive_stream, Purpose};
use crate::schedule::{build_schedule, Schedule};
use crate::svg::{emit_svg, Series};

/// Everything built before round 1.
#[derive(Clone, Debug)]
pub struct Setup {
    pub split: TaskSplit,
    pub partition: ClientPartition,
    pub model: GlobalModel,
    pub schedule: Schedule,
}

/// Build data, partition, initial model and schedule from independent
/// streams of the master seed.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Setup> {
    cfg.validate()?;
    let seed = cfg.seed;
    let ds = match &cfg.data {
        DataSource::Synthetic(s) => synth_blobs(
            s.classes,
            s.dim,
            s.per_class,
            s.spread,
            &mut derive_stream(seed, 0, 0, Purpose::DataSynth),
        )?,
        DataSource::Csv(path) => load_csv(path)?,
    };
    let split = split_tasks_with(
        &ds,
        cfg.tasks,
        cfg.test_fraction,
        cfg.shuffle_classes,
        &mut derive_stream(seed, 0, 0, Purpose::TaskSplit),
    )?;
    let mut part_rng = derive_stream(seed, 0, 0, Purpose::Partition);
    let partition = match cfg.partition {
        PartitionSpec::Iid => partition_iid(&split, cfg.clients, &mut part_rng)?,
        PartitionSpec::Dirichlet { alpha } => partition_dirichlet(&split, cfg.clients, alpha, &mut part_rng)?,
    };
    let model = init_model(
        &cfg.backbone_spec(ds.dim()),
        cfg.tasks,
        split.classes_per_task(),
        &mut derive_stream(seed, 0, 0, Purpose::ModelInit),
    )?;
    let schedule = build_schedule(
        cfg.rounds,
        cfg.tasks,
        cfg.clients,
        cfg.case,
        &mut derive_stream(seed, 0, 0, Purpose::Schedule),
    )?;
    Ok(Setup {
        split,
        partition,
        model,
        schedule,
    })
}

/// In-memory outcome of a run.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub setup: Setup,
    pub model: GlobalModel,
    pub server: ServerOptState,
    pub accuracy: AccuracyMatrix,
    pub drift: DriftSeries,
    /// Per round `(c2s, s2c)` bytes.
    pub comm: Vec<(u64, u64)>,
    pub local_epochs_run: Vec<usize>,
}

impl Simulation {
    pub fn acc(&self) -> Result<f64> {
        acc(&self.accuracy)
    }

    /// `None` when the metric is undefined (e.g. one round per phase).
    pub fn bwt_f(&self, cfg: &ExperimentConfig) -> Result<Option<f64>> {
        match bwt_f(&self.accuracy, cfg.phase_len(), cfg.bwt_mode) {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedMetric(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn total_comm(&self) -> (u64, u64) {
        self.comm
            .iter()
            .fold((0, 0), |(a, b), &(c, s)| (a + c, b + s))
    }
}

fn in_round(round: usize, task: Option<usize>, client: Option<usize>) -> impl FnOnce(Error) -> Error {
    move |e| Error::Round {
        round,
        task,
        client,
        source: Box::new(e),
    }
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<Simulation> {
    simulate_with(cfg, |_, _| {})
}

/// Run every round; `observe(r, model)` sees the server model after round `r`.
pub fn simulate_with(cfg: &ExperimentConfig, mut observe: impl FnMut(usize, &GlobalModel)) -> Result<Simulation> {
    let setup = prepare(cfg)?;
    let seed = cfg.seed;
    let mut model = setup.model.clone();
    let mut server = ServerOptState::new(cfg.server_hyper())?;
    let policy = StragglerPolicy::new(cfg.drop_prob)?;
    let mut accuracy = AccuracyMatrix::new(cfg.tasks, cfg.rounds);
    let mut drift = DriftSeries::default();
    let mut comm = Vec::with_capacity(cfg.rounds);
    let mut local_epochs_run = vec![0; cfg.clients];
    let all_clients: Vec<usize> = (0..cfg.clients).collect();

    for r in 1..=cfg.rounds {
        let survivors = apply_stragglers(
            &all_clients,
            &policy,
            &mut derive_stream(seed, r as u64, 0, Purpose::Straggler),
        );
        let groups = setup.schedule.participants(r, &survivors);
        let jobs: Vec<(usize, usize)> = groups
            .iter()
            .flat_map(|(&t, cs)| cs.iter().map(move |&c| (t, c)))
            .collect();

        let train = |&(t, c): &(usize, usize)| -> Result<Option<LocalOutcome>> {
            let shard = setup.partition.shard(t, c);
            let batch_size = if cfg.batch_size == 0 {
                shard.len().max(1)
            } else {
                cfg.batch_size
            };
            let local = LocalTrainConfig {
                epochs: cfg.local_epochs,
                lr: cfg.client_lr,
                batch_size,
            };
            let start = model.adapter(t).map_err(in_round(r, Some(t), Some(c)))?;
            local_train(
                model.backbone(),
                start,
                &setup.split.tasks[t].train,
                shard,
                c,
                &local,
                &mut derive_stream(seed, r as u64, c as u64, Purpose::LocalTrain),
            )
            .map_err(in_round(r, Some(t), Some(c)))
        };
        #[cfg(feature = "parallel")]
        let outcomes: Vec<Option<LocalOutcome>> = {
            use rayon::prelude::*;
            jobs.par_iter().map(train).collect::<Result<_>>()?
        };
        #[cfg(not(feature = "parallel"))]
        let outcomes: Vec<Option<LocalOutcome>> = jobs.iter().map(train).collect::<Result<_>>()?;

        let mut samples = Vec::new();
        let mut by_task: BTreeMap<usize, Vec<_>> = BTreeMap::new();
        for o in outcomes.into_iter().flatten() {
            local_epochs_run[o.update.client_id] += cfg.local_epochs;
            samples.push(o.drift_samples);
            by_task.entry(o.update.task_id).or_default().push(o.update);
        }
        let prev = model.clone();
        let mut c2s = 0;
        let mut s2c = 0;
        for (t, updates) in &by_task {
            let (c, s) = comm_bytes(updates, prev.adapter(*t)?.params().len());
            c2s += c;
            s2c += s;
            if let Some(g) = aggregate_pseudo_gradient(updates, cfg.weighting).map_err(in_round(r, Some(*t), None))? {
                let adapter = model.adapter_mut(*t)?;
                server.step(*t, adapter.params_mut(), &g).map_err(in_round(r, Some(*t), None))?;
            }
        }
        comm.push((c2s, s2c));
        let cos = cosine_drift(&prev, &model).map_err(in_round(r, None, None))?;
        drift.push(round_drift(&samples, cfg.local_epochs), cos.into_values().collect());
        record_round(&mut accuracy, r, &model, &setup.split).map_err(in_round(r, None, None))?;
        observe(r, &model);
    }
    Ok(Simulation {
        setup,
        model,
        server,
        accuracy,
        drift,
        comm,
        local_epochs_run,
    })
}

/// Summary values and the files a run wrote.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub acc: f64,
    pub bwt_f: Option<f64>,
    pub per_task_final: Vec<f64>,
    pub total_c2s_bytes: u64,
    pub total_s2c_bytes: u64,
    pub files: Vec<PathBuf>,
    pub wall_seconds: f64,
}

/// `summary.json` contents.
pub fn summary_json(cfg: &ExperimentConfig, sim: &Simulation) -> Result<Value> {
    let (c2s, s2c) = sim.total_comm();
    let per_task: Vec<f64> = (0..cfg.tasks)
        .map(|t| sim.accuracy.get(t, cfg.rounds).unwrap_or(f64::NAN))
        .collect();
    Ok(json!({
        "acc": sim.acc()?,
        "bwt_f": sim.bwt_f(cfg)?,
        "bwt_mode": cfg.to_flat()["bwt_mode"],
        "per_task_final": per_task,
        "total_c2s_bytes": c2s,
        "total_s2c_bytes": s2c,
        "config_echo": cfg.to_flat(),
        "master_seed": cfg.seed,
    }))
}

fn comm_csv(comm: &[(u64, u64)]) -> String {
    let mut out = String::from("round,c2s_bytes,s2c_bytes\n");
    for (i, (c, s)) in comm.iter().enumerate() {
        let _ = writeln!(out, "{},{c},{s}", i + 1);
    }
    out
}

fn write(path: &Path, text: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    files.push(path.to_path_buf());
    Ok(())
}

/// Write every output file of `sim` under `cfg.output_dir`.
pub fn write_outputs(cfg: &ExperimentConfig, sim: &Simulation) -> Result<Vec<PathBuf>> {
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    write(&dir.join("accuracy_matrix.csv"), &sim.accuracy.to_csv(), &mut files)?;
    write(&dir.join("drift.csv"), &sim.drift.to_csv(cfg.tasks), &mut files)?;
    write(&dir.join("comm.csv"), &comm_csv(&sim.comm), &mut files)?;
    let summary = serde_json::to_string_pretty(&summary_json(cfg, sim)?)? + "\n";
    write(&dir.join("summary.json"), &summary, &mut files)?;
    write(&dir.join("schedule.json"), &(sim.setup.schedule.to_json()? + "\n"), &mut files)?;
    write(
        &dir.join("partition.json"),
        &(sim.setup.partition.manifest_json()? + "\n"),
        &mut files,
    )?;
    if cfg.emit_svg {
        let task_series = |f: &dyn Fn(usize) -> Vec<f64>| -> Vec<Series> {
            (0..cfg.tasks).map(|t| Series::new(format!("task {}", t + 1), f(t))).collect()
        };
        let acc_series = task_series(&|t| sim.accuracy.row(t).into_iter().map(|v| v.unwrap_or(f64::NAN)).collect());
        let path = dir.join("accuracy.svg");
        emit_svg("Test accuracy per task", "round", "accuracy", &acc_series, &path)?;
        files.push(path);
        let cos_series = task_series(&|t| sim.drift.task_cosine(t));
        let path = dir.join("cosine_drift.svg");
        emit_svg("Head cosine distance between rounds", "round", "cosine distance", &cos_series, &path)?;
        files.push(path);
        let client = [Series::new(
            "client drift",
            sim.drift.client_drift.iter().map(|d| d.unwrap_or(f64::NAN)).collect(),
        )];
        let path = dir.join("client_drift.svg");
        emit_svg("Client drift per round", "round", "mean squared distance", &client, &path)?;
        files.push(path);
    }
    Ok(files)
}

/// Simulate and write all outputs.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    let start = std::time::Instant::now();
    let sim = simulate(cfg)?;
    let files = write_outputs(cfg, &sim)?;
    let (c2s, s2c) = sim.total_comm();
    Ok(RunResult {
        acc: sim.acc()?,
        bwt_f: sim.bwt_f(cfg)?,
        per_task_final: (0..cfg.tasks)
            .map(|t| sim.accuracy.get(t, cfg.rounds).unwrap_or(f64::NAN))
            .collect(),
        total_c2s_bytes: c2s,
        total_s2c_bytes: s2c,
        files,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Map a sweep axis name to its config key.
pub fn sweep_key(axis: &str) -> Result<&'static str> {
    Ok(match axis {
        "eta" | "server_lr" => "server_lr",
        "mu" | "client_lr" => "client_lr",
        "k" | "K" | "local_epochs" => "local_epochs",
        "r" | "R" | "rounds" => "rounds",
        "n" | "N" | "clients" => "clients",
        "alpha" | "dirichlet_alpha" => "dirichlet_alpha",
        "drop_prob" => "drop_prob",
        "server" => "server",
        "case" => "case",
        _ => return Err(Error::config(format!("axis {axis:?} is not sweepable"))),
    })
}

/// One row of `sweep.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub seed: u64,
    pub acc: f64,
    pub bwt_f: Option<f64>,
}

fn value_order(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y),
        _ => a.cmp(b),
    }
}

/// Run the Cartesian product `values × seeds` on top of `base` and return
/// rows sorted by value then seed.
pub fn sweep(base: &ExperimentConfig, axis: &str, values: &[String], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    let key = sweep_key(axis)?;
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::config("sweep needs at least one value and one seed"));
    }
    let mut jobs = Vec::new();
    for v in values {
        for &s in seeds {
            let mut flat = base.to_flat();
            flat.insert(key.to_string(), Value::String(v.clone()));
            flat.insert("seed".into(), json!(s));
            if key == "server" {
                flat.insert("beta1".into(), Value::Null);
            }
            let cfg = from_flat(flat).map_err(|e| Error::config(format!("axis {axis} = {v}: {e}")))?;
            jobs.push((v.clone(), s, cfg));
        }
    }
    let run = |(v, s, cfg): &(String, u64, ExperimentConfig)| -> Result<SweepRow> {
        let sim = simulate(cfg)?;
        Ok(SweepRow {
            value: v.clone(),
            seed: *s,
            acc: sim.acc()?,
            bwt_f: sim.bwt_f(cfg)?,
        })
    };
    #[cfg(feature = "parallel")]
    let mut rows: Vec<SweepRow> = {
        use rayon::prelude::*;
        jobs.par_iter().map(run).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let mut rows: Vec<SweepRow> = jobs.iter().map(run).collect::<Result<_>>()?;
    rows.sort_by(|a, b| value_order(&a.value, &b.value).then(a.seed.cmp(&b.seed)));
    Ok(rows)
}

pub fn sweep_csv(axis: &str, rows: &[SweepRow]) -> String {
    let mut out = String::from("axis,value,seed,acc,bwt_f\n");
    for r in rows {
        let _ = write!(out, "{axis},{},{},{},", r.value, r.seed, r.acc);
        if let Some(b) = r.bwt_f {
            let _ = write!(out, "{b}");
        }
        out.push('\n');
    }
    out
}

/// Run a sweep and write `sweep.csv` under `base.output_dir`.
pub fn run_sweep(base: &ExperimentConfig, axis: &str, values: &[String], seeds: &[u64]) -> Result<PathBuf> {
    let rows = sweep(base, axis, values, seeds)?;
    let dir = &base.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("sweep.csv");
    std::fs::write(&path, sweep_csv(axis, &rows)).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
