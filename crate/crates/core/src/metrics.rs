//! Accuracy matrix, ACC, federated backward transfer, and drift series.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::TaskSplit;
use crate::error::{Error, Result};
use crate::model::GlobalModel;
use crate::numerics::cosine_dist_slices;

/// `A[t][r]`: test accuracy of task `t` after round `r` (rounds 1-indexed).
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyMatrix {
    tasks: usize,
    rounds: usize,
    cells: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize, rounds: usize) -> Self {
        AccuracyMatrix {
            tasks,
            rounds,
            cells: vec![None; tasks * rounds],
        }
    }

    /// Complete matrix from per-task rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let rounds = rows.first().map_or(0, Vec::len);
        let mut m = AccuracyMatrix::new(rows.len(), rounds);
        for r in 1..=rounds {
            let col: Vec<f64> = rows
                .iter()
                .map(|row| {
                    row.get(r - 1)
                        .copied()
                        .ok_or_else(|| Error::Input("ragged accuracy rows".into()))
                })
                .collect::<Result<_>>()?;
            m.set_column(r, &col)?;
        }
        if rows.iter().any(|row| row.len() != rounds) {
            return Err(Error::Input("ragged accuracy rows".into()));
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn get(&self, task: usize, round: usize) -> Option<f64> {
        if task >= self.tasks || round == 0 || round > self.rounds {
            return None;
        }
        self.cells[task * self.rounds + round - 1]
    }

    fn at(&self, task: usize, round: usize) -> f64 {
        self.get(task, round).expect("complete matrix")
    }

    pub fn row(&self, task: usize) -> Vec<Option<f64>> {
        (1..=self.rounds).map(|r| self.get(task, r)).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.cells.iter().all(Option::is_some)
    }

    /// Fill column `round`; each column may be written once.
    pub fn set_column(&mut self, round: usize, values: &[f64]) -> Result<()> {
        if round == 0 || round > self.rounds {
            return Err(Error::Protocol(format!("round {round} outside 1..={}", self.rounds)));
        }
        if values.len() != self.tasks {
            return Err(Error::Protocol(format!(
                "column needs {} values, got {}",
                self.tasks,
                values.len()
            )));
        }
        if (0..self.tasks).any(|t| self.get(t, round).is_some()) {
            return Err(Error::Protocol(format!("round {round} already recorded")));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Protocol(format!("accuracy {v} outside [0, 1]")));
        }
        for (t, &v) in values.iter().enumerate() {
            self.cells[t * self.rounds + round - 1] = Some(v);
        }
        Ok(())
    }

    fn require_complete(&self) -> Result<()> {
        if self.is_complete() && self.tasks > 0 && self.rounds > 0 {
            Ok(())
        } else {
            Err(Error::Protocol("accuracy matrix is incomplete".into()))
        }
    }

    /// `task,r1..rR` header then one row per task (tasks 1-indexed).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task");
        for r in 1..=self.rounds {
            let _ = write!(out, ",r{r}");
        }
        out.push('\n');
        for t in 0..self.tasks {
            let _ = write!(out, "{}", t + 1);
            for r in 1..=self.rounds {
                match self.get(t, r) {
                    Some(v) => {
                        let _ = write!(out, ",{v}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .skip(1)
                .map(f64::from_str)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: i as u64 + 1,
                    msg: e.to_string(),
                })?;
            rows.push(row);
        }
        Self::from_rows(&rows)
    }
}

/// Evaluate every task of `model` on its test set and fill column `round`.
pub fn record_round(
    matrix: &mut AccuracyMatrix,
    round: usize,
    model: &GlobalModel,
    split: &TaskSplit,
) -> Result<()> {
    if (0..matrix.tasks).any(|t| matrix.get(t, round).is_some()) {
        return Err(Error::Protocol(format!("round {round} already recorded")));
    }
    let eval = |t: usize| {
        let test = &split.tasks[t].test;
        model.accuracy(t, &test.x, &test.y)
    };
    #[cfg(feature = "parallel")]
    let column: Vec<f64> = {
        use rayon::prelude::*;
        (0..split.len()).into_par_iter().map(eval).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let column: Vec<f64> = (0..split.len()).map(eval).collect::<Result<_>>()?;
    matrix.set_column(round, &column)
}

/// `ACC = (1/T) Σ_t A[t][R]`.
pub fn acc(matrix: &AccuracyMatrix) -> Result<f64> {
    matrix.require_complete()?;
    let r = matrix.rounds;
    Ok((0..matrix.tasks).map(|t| matrix.at(t, r)).sum::<f64>() / matrix.tasks as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BwtMode {
    /// `(1/T²) Σ_t Σ_{p=1..T} (A[t][pQ] − A[t][pQ−1])`.
    #[default]
    Literal,
    /// Mean over tasks and `p = 1..T−1` of `A[t][pQ+1] − A[t][pQ]`: the
    /// change across each phase boundary.
    Boundary,
}

impl FromStr for BwtMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(BwtMode::Literal),
            "boundary" => Ok(BwtMode::Boundary),
            _ => Err(Error::config(format!("unknown bwt mode {s:?}"))),
        }
    }
}

/// Federated backward transfer with phase length `phase_len`.
pub fn bwt_f(matrix: &AccuracyMatrix, phase_len: usize, mode: BwtMode) -> Result<f64> {
    matrix.require_complete()?;
    let t_count = matrix.tasks;
    if phase_len == 0 || phase_len * t_count != matrix.rounds {
        return Err(Error::UndefinedMetric(format!(
            "phase length {phase_len} × {t_count} tasks != {} rounds",
            matrix.rounds
        )));
    }
    match mode {
        BwtMode::Literal => {
            if phase_len < 2 {
                return Err(Error::UndefinedMetric(
                    "bwt_f needs at least 2 rounds per phase".into(),
                ));
            }
            let mut sum = 0.0;
            for t in 0..t_count {
                for p in 1..=t_count {
                    sum += matrix.at(t, p * phase_len) - matrix.at(t, p * phase_len - 1);
                }
            }
            Ok(sum / (t_count * t_count) as f64)
        }
        BwtMode::Boundary => {
            if t_count < 2 {
                return Err(Error::UndefinedMetric(
                    "boundary bwt_f needs at least 2 phases".into(),
                ));
            }
            let mut sum = 0.0;
            for t in 0..t_count {
                for p in 1..t_count {
                    sum += matrix.at(t, p * phase_len + 1) - matrix.at(t, p * phase_len);
                }
            }
            Ok(sum / (t_count * (t_count - 1)) as f64)
        }
    }
}

/// Client drift of one round: the mean squared distance from the broadcast
/// model over every surviving client and local epoch. `samples[c]` holds one
/// client's per-epoch values. `None` when no client trained.
pub fn round_drift(samples: &[Vec<f64>], local_epochs: usize) -> Option<f64> {
    if samples.is_empty() || local_epochs == 0 {
        return None;
    }
    let total: f64 = samples.iter().flatten().sum();
    Some(total / (local_epochs * samples.len()) as f64)
}

/// Per task, cosine distance between the classifier heads (weight and bias)
/// of two consecutive server models.
pub fn cosine_drift(prev: &GlobalModel, cur: &GlobalModel) -> Result<BTreeMap<usize, f64>> {
    if prev.tasks() != cur.tasks() {
        return Err(Error::Layout("models hold different task counts".into()));
    }
    let mut out = BTreeMap::new();
    for t in 0..cur.tasks() {
        let (a, b) = (prev.adapter(t)?, cur.adapter(t)?);
        a.params().check_layout(b.params())?;
        out.insert(t, cosine_dist_slices(a.head_params(), b.head_params())?);
    }
    Ok(out)
}

/// Per-round drift values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DriftSeries {
    /// Client drift per round, `None` when every client straggled.
    pub client_drift: Vec<Option<f64>>,
    /// `head_cosine[r-1][t]`: head cosine distance of task `t` between the
    /// server models after rounds `r-1` and `r` (round 0 is the initial model).
    pub head_cosine: Vec<Vec<f64>>,
}

impl DriftSeries {
    pub fn push(&mut self, client_drift: Option<f64>, head_cosine: Vec<f64>) {
        self.client_drift.push(client_drift);
        self.head_cosine.push(head_cosine);
    }

    pub fn rounds(&self) -> usize {
        self.client_drift.len()
    }

    /// Cosine series of one task.
    pub fn task_cosine(&self, task: usize) -> Vec<f64> {
        self.head_cosine.iter().map(|row| row[task]).collect()
    }

    /// `round,eq2_drift,cos_t1..cos_tT`; missing drift is an empty cell.
    pub fn to_csv(&self, tasks: usize) -> String {
        let mut out = String::from("round,eq2_drift");
        for t in 1..=tasks {
            let _ = write!(out, ",cos_t{t}");
        }
        out.push('\n');
        for (i, (d, cos)) in self.client_drift.iter().zip(&self.head_cosine).enumerate() {
            let _ = write!(out, "{},", i + 1);
            if let Some(d) = d {
                let _ = write!(out, "{d}");
            }
            for c in cos {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }
}
