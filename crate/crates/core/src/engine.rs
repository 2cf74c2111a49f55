//! Chief/worker round loop.
//!
//! Each round every participating worker trains from the current global
//! model (or, if it is an active attacker, crafts a poisoned model), the
//! chief scores the submissions, and the accepted ones are folded in with
//!
//! ```text
//! GM' = GM + (r/n)·Σ_accepted (LM_j − GM)
//! ```
//!
//! where `n` is the total worker count unless [`Divisor::Accepted`] is set.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::attack::{craft_malicious_update, Adversary, CraftRule};
use crate::data::Dataset;
use crate::defense::snapshot::SnapshotRecord;
use crate::defense::{Attestor, DefenseConfig, Verdict, WorkerHistory};
use crate::error::{Error, Result};
use crate::model::{self, ModelArch, Workspace};
use crate::param::{self, linear_combine, ParamVector};
use crate::seed::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub lr: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
}

/// Mini-batch SGD on `shard` starting from `global`. Batches are reshuffled
/// every epoch from `seed`.
pub fn local_train(
    global: &ParamVector,
    data: &Dataset,
    shard: &[usize],
    arch: &ModelArch,
    settings: &TrainSettings,
    seed: u64,
) -> Result<ParamVector> {
    if shard.is_empty() {
        return Err(Error::InvalidArgument("empty shard".into()));
    }
    if settings.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    if global.dim() != arch.param_count() {
        return Err(Error::DimensionMismatch {
            expected: arch.param_count(),
            actual: global.dim(),
        });
    }
    if settings.local_epochs == 0 {
        return Ok(global.clone());
    }
    let mut rng = seed::rng(seed);
    let mut params = global.as_slice().to_vec();
    let mut grad = vec![0.0; params.len()];
    let mut ws = Workspace::new(arch);
    let mut order = shard.to_vec();
    let mut rows: Vec<&[f64]> = Vec::with_capacity(settings.batch_size);
    let mut labels = Vec::with_capacity(settings.batch_size);
    for _ in 0..settings.local_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(settings.batch_size) {
            rows.clear();
            labels.clear();
            for &i in chunk {
                rows.push(data.row(i));
                labels.push(data.label(i));
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
            model::accumulate_grad(&params, arch, &rows, &labels, &mut grad, &mut ws);
            let step = settings.lr / chunk.len() as f64;
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= step * g;
            }
        }
    }
    ParamVector::new(params)
}

/// `GM + (r/n)·Σ (LM_j − GM)` over the supplied updates, in list order.
pub fn aggregate(global: &ParamVector, updates: &[(usize, &ParamVector)], server_lr: f64, n_total: usize) -> Result<ParamVector> {
    if updates.is_empty() {
        return Err(Error::EmptyAggregation);
    }
    if n_total == 0 {
        return Err(Error::InvalidArgument("n_total must be positive".into()));
    }
    let coeff = server_lr / n_total as f64;
    let mut acc = vec![0.0; global.dim()];
    for (_, lm) in updates {
        if lm.dim() != global.dim() {
            return Err(Error::DimensionMismatch {
                expected: global.dim(),
                actual: lm.dim(),
            });
        }
        for ((a, l), g) in acc.iter_mut().zip(lm.as_slice()).zip(global.as_slice()) {
            *a += l - g;
        }
    }
    let sum = ParamVector::new(acc)?;
    linear_combine(global, &[(coeff, &sum)])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Divisor {
    /// Configured worker count `n`.
    Total,
    /// Number of accepted workers this round.
    Accepted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineSettings {
    pub worker_count: usize,
    /// Workers sampled per round; `None` means all of them.
    pub participants: Option<usize>,
    pub train: TrainSettings,
    pub server_lr: f64,
    pub divisor: Divisor,
    pub master_seed: u64,
    /// Train workers on the rayon pool.
    pub parallel: bool,
}

/// Everything the simulation reads but never mutates.
#[derive(Debug, Clone)]
pub struct FederatedData {
    pub arch: ModelArch,
    pub train: Dataset,
    /// One index list into `train` per worker.
    pub shards: Vec<Vec<usize>>,
    pub test: Dataset,
    pub quasi_val: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Benign,
    Attacker,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Benign => "benign",
            Role::Attacker => "attacker",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerRecord {
    pub worker_id: usize,
    pub role: Role,
    /// Submitted a crafted model this round.
    pub attacking: bool,
    pub participated: bool,
    /// `‖LM − GM‖`.
    pub delta: Option<f64>,
    /// `‖LM‖`.
    pub lm_norm: Option<f64>,
    pub delta_rate: Option<f64>,
    pub cosine_sim: Option<f64>,
    pub err_impact: Option<f64>,
    pub verdict: Verdict,
    pub accepted: bool,
    pub train_ms: f64,
    pub defense_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub workers: Vec<WorkerRecord>,
    /// Test accuracy of the global model after this round's aggregation.
    pub global_accuracy: f64,
    pub global_loss: f64,
    /// No worker was accepted and the global model was carried forward.
    pub aggregation_skipped: bool,
    pub train_ms: f64,
    pub defense_ms: f64,
    pub aggregate_ms: f64,
    pub total_ms: f64,
}

impl RoundRecord {
    pub fn accepted_count(&self) -> usize {
        self.workers.iter().filter(|w| w.accepted).count()
    }
}

/// Mutable round state.
#[derive(Debug, Clone)]
pub struct FlState {
    pub global_model: ParamVector,
    pub round: usize,
}

pub struct Simulation<'a> {
    data: &'a FederatedData,
    settings: EngineSettings,
    adversary: Option<Adversary>,
    defense: Option<DefenseConfig>,
    state: FlState,
    histories: Vec<WorkerHistory>,
    rejected_last: Vec<bool>,
    snapshot: Vec<SnapshotRecord>,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

impl<'a> Simulation<'a> {
    pub fn new(
        data: &'a FederatedData,
        settings: EngineSettings,
        adversary: Option<Adversary>,
        defense: Option<DefenseConfig>,
    ) -> Result<Self> {
        let n = settings.worker_count;
        if n == 0 || data.shards.len() != n {
            return Err(Error::Config(format!(
                "{} shards for {n} workers",
                data.shards.len()
            )));
        }
        if data.shards.iter().any(|s| s.is_empty()) {
            return Err(Error::Config("every worker needs a non-empty shard".into()));
        }
        if settings.participants.is_some_and(|m| m == 0 || m > n) {
            return Err(Error::Config("participants must be in 1..=workers".into()));
        }
        if !(settings.server_lr > 0.0 && settings.server_lr.is_finite()) {
            return Err(Error::Config("server_lr must be positive".into()));
        }
        if let Some(adv) = &adversary {
            adv.spec().validate(n)?;
        }
        if let Some(cfg) = &defense {
            cfg.validate()?;
        }
        let window = defense.as_ref().map_or(2, |c| c.window_len);
        let global_model = model::init_params(&data.arch, seed::derive(settings.master_seed, Stream::Init, &[]));
        Ok(Simulation {
            data,
            settings,
            adversary,
            defense,
            state: FlState { global_model, round: 0 },
            histories: (0..n).map(|w| WorkerHistory::new(w, window)).collect(),
            rejected_last: vec![false; n],
            snapshot: Vec::new(),
        })
    }

    pub fn state(&self) -> &FlState {
        &self.state
    }

    pub fn global(&self) -> &ParamVector {
        &self.state.global_model
    }

    pub fn histories(&self) -> &[WorkerHistory] {
        &self.histories
    }

    /// Every history observation so far, in snapshot order.
    pub fn snapshot_records(&self) -> &[SnapshotRecord] {
        &self.snapshot
    }

    fn role(&self, w: usize) -> Role {
        match &self.adversary {
            Some(a) if a.spec().is_attacker(w) => Role::Attacker,
            _ => Role::Benign,
        }
    }

    fn participants(&self, round: usize) -> Vec<usize> {
        let n = self.settings.worker_count;
        match self.settings.participants {
            Some(m) if m < n => {
                let mut ids: Vec<usize> = (0..n).collect();
                let mut rng = seed::rng(seed::derive(self.settings.master_seed, Stream::Participation, &[round as u64]));
                ids.shuffle(&mut rng);
                ids.truncate(m);
                ids.sort_unstable();
                ids
            }
            _ => (0..n).collect(),
        }
    }

    fn train_worker(&self, w: usize, round: usize) -> Result<ParamVector> {
        let seed = seed::derive(self.settings.master_seed, Stream::LocalTrain, &[w as u64, round as u64]);
        local_train(
            &self.state.global_model,
            &self.data.train,
            &self.data.shards[w],
            &self.data.arch,
            &self.settings.train,
            seed,
        )
    }

    /// Runs one full round and advances the state.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let round_start = Instant::now();
        let round = self.state.round;
        let n = self.settings.worker_count;
        let gm = self.state.global_model.clone();
        if let Some(adv) = &mut self.adversary {
            adv.begin_round(round, &gm)?;
        }
        let participants = self.participants(round);
        let attacking: Vec<bool> = (0..n)
            .map(|w| self.adversary.as_ref().is_some_and(|a| a.is_active(round, w)))
            .collect();

        // local models
        let train_start = Instant::now();
        let honest: Vec<usize> = participants.iter().copied().filter(|&w| !attacking[w]).collect();
        let train_one = |&w: &usize| -> (usize, Result<ParamVector>, f64) {
            let t = Instant::now();
            let lm = self.train_worker(w, round);
            (w, lm, ms_since(t))
        };
        let trained: Vec<(usize, Result<ParamVector>, f64)> = if self.settings.parallel {
            honest.par_iter().map(train_one).collect()
        } else {
            honest.iter().map(train_one).collect()
        };
        let mut local: Vec<Option<ParamVector>> = vec![None; n];
        let mut train_ms = vec![0.0; n];
        for (w, lm, ms) in trained {
            local[w] = Some(lm?);
            train_ms[w] = ms;
        }
        if let Some(adv) = &self.adversary {
            let craft = adv.spec().craft;
            let benign_sum = match craft {
                CraftRule::Exact => {
                    let zero = ParamVector::zeros(gm.dim())?;
                    let devs: Vec<ParamVector> = honest
                        .iter()
                        .map(|&w| local[w].as_ref().unwrap().sub(&gm))
                        .collect::<Result<_>>()?;
                    let terms: Vec<(f64, &ParamVector)> = devs.iter().map(|d| (1.0, d)).collect();
                    Some(linear_combine(&zero, &terms)?)
                }
                CraftRule::Approximate => None,
            };
            for &w in participants.iter().filter(|&&w| attacking[w]) {
                let t = Instant::now();
                let target = adv.target(round, w, &gm)?;
                local[w] = Some(craft_malicious_update(&gm, &target, n, self.settings.server_lr, benign_sum.as_ref())?);
                train_ms[w] = ms_since(t);
            }
        }
        let train_total = ms_since(train_start);

        let mut records: Vec<WorkerRecord> = (0..n)
            .map(|w| WorkerRecord {
                worker_id: w,
                role: self.role(w),
                attacking: attacking[w],
                participated: false,
                delta: None,
                lm_norm: None,
                delta_rate: None,
                cosine_sim: None,
                err_impact: None,
                verdict: Verdict::UNCHECKED,
                accepted: false,
                train_ms: train_ms[w],
                defense_ms: 0.0,
            })
            .collect();
        for &w in &participants {
            let lm = local[w].as_ref().unwrap();
            let r = &mut records[w];
            r.participated = true;
            r.delta = Some(param::euclidean_distance(lm, &gm)?);
            r.lm_norm = Some(lm.norm());
            r.accepted = true;
        }

        // attestation
        let defense_start = Instant::now();
        if let Some(cfg) = &self.defense {
            for &w in &participants {
                let t = Instant::now();
                let obs = self.histories[w].record_round(local[w].as_ref().unwrap(), &gm, &self.data.arch, &self.data.quasi_val)?;
                let r = &mut records[w];
                r.cosine_sim = obs.sim;
                r.err_impact = obs.err_impact;
                r.defense_ms += ms_since(t);
                self.snapshot.push(SnapshotRecord {
                    round,
                    worker_id: w,
                    delta: obs.delta,
                    sim: obs.sim,
                    err_impact: obs.err_impact,
                });
            }
            let mut mask = vec![false; n];
            for &w in &participants {
                mask[w] = !(cfg.exclude_rejected && self.rejected_last[w]);
            }
            let attestor = Attestor::new(&self.histories, round, cfg).with_population(mask);
            let mut rejected = vec![false; n];
            for &w in &participants {
                let t = Instant::now();
                let verdict = attestor.verdict(w);
                let r = &mut records[w];
                r.delta_rate = attestor.rate(w);
                r.verdict = verdict;
                r.accepted = verdict.reliable;
                rejected[w] = !verdict.reliable;
                r.defense_ms += ms_since(t);
            }
            self.rejected_last = rejected;
        }
        let defense_total = if self.defense.is_some() { ms_since(defense_start) } else { 0.0 };

        // aggregation over the accepted set
        let agg_start = Instant::now();
        let accepted: Vec<(usize, &ParamVector)> = participants
            .iter()
            .filter(|&&w| records[w].accepted)
            .map(|&w| (w, local[w].as_ref().unwrap()))
            .collect();
        let divisor = match self.settings.divisor {
            Divisor::Total => n,
            Divisor::Accepted => accepted.len().max(1),
        };
        let (next, skipped) = match aggregate(&gm, &accepted, self.settings.server_lr, divisor) {
            Ok(next) => (next, false),
            Err(Error::EmptyAggregation) => (gm.clone(), true),
            Err(e) => return Err(e),
        };
        let aggregate_ms = ms_since(agg_start);

        let eval = model::evaluate_unchecked(
            next.as_slice(),
            &self.data.arch,
            self.data.test.batch().rows(),
            self.data.test.labels(),
        );
        self.state.global_model = next;
        self.state.round += 1;

        Ok(RoundRecord {
            round,
            workers: records,
            global_accuracy: eval.accuracy,
            global_loss: eval.loss,
            aggregation_skipped: skipped,
            train_ms: train_total,
            defense_ms: defense_total,
            aggregate_ms,
            total_ms: ms_since(round_start),
        })
    }
}
