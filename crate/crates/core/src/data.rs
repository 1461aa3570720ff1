//! Dataset synthesis and CSV ingestion, class-block task splits, and IID or
//! Dirichlet label-skew partitioning of each task across clients.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Gamma};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<usize>, class_count: usize) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::Input(format!(
                "{} feature rows but {} labels",
                x.rows(),
                y.len()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= class_count) {
            return Err(Error::Input(format!("label {bad} outside [0, {class_count})")));
        }
        Ok(Dataset { x, y, class_count })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            class_count: self.class_count,
        }
    }
}

/// Gaussian blobs: one mean per class drawn uniformly on the unit sphere,
/// samples `mean + N(0, spread²·I)`, stored class by class.
pub fn synth_blobs(
    classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    rng: &mut Rng,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::config("synthetic data needs at least 2 classes"));
    }
    if dim == 0 || per_class == 0 {
        return Err(Error::config("synthetic dim and per_class must be at least 1"));
    }
    if !(spread > 0.0) {
        return Err(Error::config(format!("spread must be positive, got {spread}")));
    }
    let mut means = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut m: Vec<f64>;
        loop {
            m = (0..dim).map(|_| rng.normal()).collect();
            let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                m.iter_mut().for_each(|v| *v /= norm);
                break;
            }
        }
        means.push(m);
    }
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut y = Vec::with_capacity(classes * per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(mean.iter().map(|m| m + spread * rng.normal()));
            y.push(c);
        }
    }
    Dataset::new(Matrix::from_vec(classes * per_class, dim, data)?, y, classes)
}

/// Read rows of `label,f1,...,fd`.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file)
}

pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut data = Vec::new();
    let mut y = Vec::new();
    let mut dim: Option<usize> = None;
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let perr = |msg: String| Error::Parse { line, msg };
        if record.len() < 2 {
            return Err(perr("expected a label and at least one feature".into()));
        }
        let d = record.len() - 1;
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(perr(format!("{d} features, expected {expected}")));
            }
            _ => {}
        }
        let label: i64 = record[0]
            .parse()
            .map_err(|_| perr(format!("label {:?} is not an integer", &record[0])))?;
        if label < 0 {
            return Err(perr(format!("negative label {label}")));
        }
        y.push(label as usize);
        for field in record.iter().skip(1) {
            let v: f64 = field
                .parse()
                .map_err(|_| perr(format!("feature {field:?} is not a number")))?;
            data.push(v);
        }
    }
    let dim = dim.ok_or(Error::Parse {
        line: 1,
        msg: "no data rows".into(),
    })?;
    let class_count = y.iter().max().map_or(0, |m| m + 1);
    Dataset::new(Matrix::from_vec(y.len(), dim, data)?, y, class_count)
}

/// Floats are written in shortest round-trip form.
pub fn write_csv<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    let mut fields = Vec::with_capacity(ds.dim() + 1);
    for i in 0..ds.len() {
        fields.clear();
        fields.push(ds.y[i].to_string());
        fields.extend(ds.x.row(i).iter().map(|v| v.to_string()));
        w.write_record(&fields)
            .map_err(|e| Error::Input(format!("csv write: {e}")))?;
    }
    w.flush()
        .map_err(|e| Error::Input(format!("csv write: {e}")))?;
    Ok(())
}

pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(ds, std::io::BufWriter::new(file))
}

/// One task's classes with its train and test data, labels remapped to
/// positions within `classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub classes: Vec<usize>,
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSplit {
    pub tasks: Vec<TaskData>,
}

impl TaskSplit {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn classes_per_task(&self) -> usize {
        self.tasks.first().map_or(0, |t| t.classes.len())
    }
}

/// Split classes into `tasks` contiguous ascending blocks, holding out a
/// stratified `test_fraction` of every class.
pub fn split_tasks(ds: &Dataset, tasks: usize, test_fraction: f64, rng: &mut Rng) -> Result<TaskSplit> {
    split_tasks_with(ds, tasks, test_fraction, false, rng)
}

/// As [`split_tasks`]; with `shuffle_classes` the class-to-task assignment is
/// drawn from `rng` instead of ascending blocks.
pub fn split_tasks_with(
    ds: &Dataset,
    tasks: usize,
    test_fraction: f64,
    shuffle_classes: bool,
    rng: &mut Rng,
) -> Result<TaskSplit> {
    if tasks == 0 || ds.class_count % tasks != 0 {
        return Err(Error::config(format!(
            "{} classes cannot be split into {tasks} equal tasks",
            ds.class_count
        )));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let per_task = ds.class_count / tasks;
    let mut order: Vec<usize> = (0..ds.class_count).collect();
    if shuffle_classes {
        rng.shuffle(&mut order);
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count];
    for (i, &label) in ds.y.iter().enumerate() {
        by_class[label].push(i);
    }

    let mut out = Vec::with_capacity(tasks);
    for block in order.chunks(per_task) {
        let mut classes = block.to_vec();
        if shuffle_classes {
            classes.sort_unstable();
        }
        let (mut train_idx, mut train_y, mut test_idx, mut test_y) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (local, &class) in classes.iter().enumerate() {
            let mut idx = by_class[class].clone();
            if idx.is_empty() {
                return Err(Error::Input(format!("class {class} has no samples")));
            }
            rng.shuffle(&mut idx);
            let mut n_test = (test_fraction * idx.len() as f64).round() as usize;
            if idx.len() >= 2 {
                n_test = n_test.clamp(1, idx.len() - 1);
            }
            let (test, train) = idx.split_at(n_test);
            let mut test = test.to_vec();
            let mut train = train.to_vec();
            test.sort_unstable();
            train.sort_unstable();
            test_y.extend(std::iter::repeat_n(local, test.len()));
            train_y.extend(std::iter::repeat_n(local, train.len()));
            test_idx.extend(test);
            train_idx.extend(train);
        }
        let k = classes.len();
        out.push(TaskData {
            classes,
            train: Dataset::new(ds.x.select_rows(&train_idx), train_y, k)?,
            test: Dataset::new(ds.x.select_rows(&test_idx), test_y, k)?,
        });
    }
    Ok(TaskSplit { tasks: out })
}

/// `shards[task][client]` lists indices into that task's train set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ClientPartition {
    pub clients: usize,
    pub shards: Vec<Vec<Vec<usize>>>,
}

impl ClientPartition {
    pub fn shard(&self, task: usize, client: usize) -> &[usize] {
        &self.shards[task][client]
    }

    /// Audit manifest: `{"task1": {"client0": [...], ...}, ...}`.
    pub fn manifest_json(&self) -> Result<String> {
        let manifest: BTreeMap<String, BTreeMap<String, &Vec<usize>>> = self
            .shards
            .iter()
            .enumerate()
            .map(|(t, clients)| {
                let inner = clients
                    .iter()
                    .enumerate()
                    .map(|(c, idx)| (format!("client{c}"), idx))
                    .collect();
                (format!("task{}", t + 1), inner)
            })
            .collect();
        Ok(serde_json::to_string_pretty(&manifest)?)
    }
}

/// Shuffle each task's train indices and deal them round-robin.
pub fn partition_iid(split: &TaskSplit, clients: usize, rng: &mut Rng) -> Result<ClientPartition> {
    if clients == 0 {
        return Err(Error::config("clients must be at least 1"));
    }
    let shards = split
        .tasks
        .iter()
        .map(|task| {
            let mut idx: Vec<usize> = (0..task.train.len()).collect();
            rng.shuffle(&mut idx);
            let mut shards = vec![Vec::new(); clients];
            for (i, sample) in idx.into_iter().enumerate() {
                shards[i % clients].push(sample);
            }
            shards
        })
        .collect();
    Ok(ClientPartition { clients, shards })
}

/// Integer counts summing to `total`, proportional to `weights`, by the
/// largest-remainder rule (ties to the lower index).
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Per class, draw `p ~ Dirichlet(alpha·1_N)` and deal that class's samples
/// to clients in proportion to `p`. Shards may be empty.
pub fn partition_dirichlet(
    split: &TaskSplit,
    clients: usize,
    alpha: f64,
    rng: &mut Rng,
) -> Result<ClientPartition> {
    if clients == 0 {
        return Err(Error::config("clients must be at least 1"));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::config(format!("dirichlet alpha must be positive, got {alpha}")));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::config(format!("gamma: {e}")))?;
    let mut shards = Vec::with_capacity(split.len());
    for task in &split.tasks {
        let mut task_shards = vec![Vec::new(); clients];
        for class in 0..task.train.class_count {
            let mut idx: Vec<usize> = (0..task.train.len())
                .filter(|&i| task.train.y[i] == class)
                .collect();
            rng.shuffle(&mut idx);
            let mut p: Vec<f64> = (0..clients).map(|_| gamma.sample(rng.inner_mut())).collect();
            if !(p.iter().sum::<f64>() > 0.0) {
                // Every gamma draw underflowed; fall back to a single owner.
                let owner = rng.below(clients);
                p = (0..clients).map(|c| if c == owner { 1.0 } else { 0.0 }).collect();
            }
            let counts = largest_remainder(&p, idx.len());
            let mut start = 0;
            for (c, n) in counts.into_iter().enumerate() {
                task_shards[c].extend_from_slice(&idx[start..start + n]);
                start += n;
            }
        }
        for s in &mut task_shards {
            s.sort_unstable();
        }
        shards.push(task_shards);
    }
    Ok(ClientPartition { clients, shards })
}
