//! Task ordering across clients and rounds.
//!
//! Rounds are 1-indexed and split into `T` phases of `Q = R/T` rounds; round
//! `r` lies in phase `p = ⌈r/Q⌉`. Task ids are 0-indexed.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{derive_stream, Purpose, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OrderingCase {
    /// Every client draws a task uniformly at random each round.
    Fmtl,
    /// All clients follow the common order `1..T`, one task per phase.
    SyncFcl,
    /// Each client follows its own random permutation, one task per phase.
    #[default]
    AsyncFcl,
}

impl FromStr for OrderingCase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fmtl" | "case1" => Ok(OrderingCase::Fmtl),
            "sync" | "sync_fcl" | "case2" => Ok(OrderingCase::SyncFcl),
            "async" | "async_fcl" | "case3" => Ok(OrderingCase::AsyncFcl),
            _ => Err(Error::config(format!("unknown ordering case {s:?}"))),
        }
    }
}

impl fmt::Display for OrderingCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OrderingCase::Fmtl => "fmtl",
            OrderingCase::SyncFcl => "sync_fcl",
            OrderingCase::AsyncFcl => "async_fcl",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schedule {
    rounds: usize,
    tasks: usize,
    phase_len: usize,
    clients: usize,
    case: OrderingCase,
    /// Per-client task order (async only).
    permutations: Vec<Vec<usize>>,
    /// Keys the per-(round, client) draws of the FMTL case.
    draw_seed: u64,
}

pub fn build_schedule(
    rounds: usize,
    tasks: usize,
    clients: usize,
    case: OrderingCase,
    rng: &mut Rng,
) -> Result<Schedule> {
    if tasks == 0 || rounds == 0 || rounds % tasks != 0 {
        return Err(Error::config(format!(
            "rounds ({rounds}) must be a positive multiple of tasks ({tasks})"
        )));
    }
    if clients == 0 {
        return Err(Error::config("clients must be at least 1"));
    }
    let permutations = if case == OrderingCase::AsyncFcl {
        (0..clients)
            .map(|_| {
                let mut p: Vec<usize> = (0..tasks).collect();
                rng.shuffle(&mut p);
                p
            })
            .collect()
    } else {
        Vec::new()
    };
    let draw_seed = rng.next_u64();
    Ok(Schedule {
        rounds,
        tasks,
        phase_len: rounds / tasks,
        clients,
        case,
        permutations,
        draw_seed,
    })
}

impl Schedule {
    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn clients(&self) -> usize {
        self.clients
    }

    /// `Q`, rounds per phase.
    pub fn phase_len(&self) -> usize {
        self.phase_len
    }

    pub fn case(&self) -> OrderingCase {
        self.case
    }

    pub fn permutations(&self) -> &[Vec<usize>] {
        &self.permutations
    }

    /// Replace the async per-client orders, e.g. with identity permutations.
    pub fn with_permutations(mut self, permutations: Vec<Vec<usize>>) -> Result<Self> {
        if permutations.len() != self.clients {
            return Err(Error::config("one permutation per client required"));
        }
        for p in &permutations {
            let mut sorted = p.clone();
            sorted.sort_unstable();
            if sorted != (0..self.tasks).collect::<Vec<_>>() {
                return Err(Error::config(format!("{p:?} is not a permutation of the tasks")));
            }
        }
        self.permutations = permutations;
        Ok(self)
    }

    /// 1-indexed phase of 1-indexed round `r`.
    pub fn phase(&self, round: usize) -> usize {
        round.div_ceil(self.phase_len)
    }

    /// Rounds that open a phase after the first: `Q+1, 2Q+1, …`.
    pub fn is_phase_start(&self, round: usize) -> bool {
        round > 1 && (round - 1) % self.phase_len == 0
    }

    /// Task of `client` in `round`, using `rng` for the FMTL draw.
    pub fn task_for_with(&self, round: usize, client: usize, rng: &mut Rng) -> usize {
        debug_assert!(round >= 1 && round <= self.rounds);
        match self.case {
            OrderingCase::Fmtl => rng.below(self.tasks),
            OrderingCase::SyncFcl => self.phase(round) - 1,
            OrderingCase::AsyncFcl => self.permutations[client][self.phase(round) - 1],
        }
    }

    /// Task of `client` in `round`; FMTL draws come from the stream keyed by
    /// `(round, client)`.
    pub fn task_for(&self, round: usize, client: usize) -> usize {
        let mut rng = derive_stream(self.draw_seed, round as u64, client as u64, Purpose::TaskDraw);
        self.task_for_with(round, client, &mut rng)
    }

    /// Task of every client in `round`.
    pub fn assignments(&self, round: usize) -> Vec<usize> {
        (0..self.clients).map(|c| self.task_for(round, c)).collect()
    }

    /// `S_t^r`: surviving clients grouped by task. Tasks with no clients are
    /// absent.
    pub fn participants(&self, round: usize, surviving: &[usize]) -> BTreeMap<usize, Vec<usize>> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &c in surviving {
            groups.entry(self.task_for(round, c)).or_default().push(c);
        }
        for v in groups.values_mut() {
            v.sort_unstable();
        }
        groups
    }

    /// Audit dump; tasks are written 1-indexed.
    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Dump {
            case: OrderingCase,
            rounds: usize,
            tasks: usize,
            clients: usize,
            phase_length: usize,
            permutations: Vec<Vec<usize>>,
            /// `assignments[r-1][c]`.
            assignments: Vec<Vec<usize>>,
        }
        let one = |v: &[usize]| v.iter().map(|t| t + 1).collect::<Vec<_>>();
        let dump = Dump {
            case: self.case,
            rounds: self.rounds,
            tasks: self.tasks,
            clients: self.clients,
            phase_length: self.phase_len,
            permutations: self.permutations.iter().map(|p| one(p)).collect(),
            assignments: (1..=self.rounds).map(|r| one(&self.assignments(r))).collect(),
        };
        Ok(serde_json::to_string_pretty(&dump)?)
    }
}
