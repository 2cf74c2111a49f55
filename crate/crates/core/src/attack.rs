//! Model-poisoning adversary.
//!
//! An active attacker replaces its local model with a crafted vector whose
//! contribution to the aggregation rule drags the global model onto a
//! malicious target `MM`. With `n` workers and server rate `r` the exact
//! replacement vector is
//!
//! ```text
//! LM = (n/r)·MM − (n/r − 1)·GM − Σ_benign (LM_j − GM)
//! ```
//!
//! which needs the other workers' updates. Once those cancel out the
//! attacker can drop the sum and send `(n/r)·(MM − GM) + GM`.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::param::{linear_combine, ParamVector};
use crate::seed::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMode {
    /// A fresh target every round.
    Untargeted,
    /// One target fixed at the start round.
    Targeted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackPattern {
    /// Attack every round from `start_round`.
    Static,
    /// Behave for `pretence_rounds` after `start_round`, then attack every round.
    Pretence,
    /// After `start_round`, attack each round with `attack_probability`.
    Randomized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CraftRule {
    /// `(n/r)·(MM − GM) + GM`; needs nothing but the global model.
    Approximate,
    /// Exact replacement using the benign workers' deviations (white-box).
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackSpec {
    pub attacker_ids: BTreeSet<usize>,
    pub mode: AttackMode,
    pub pattern: AttackPattern,
    pub start_round: usize,
    pub pretence_rounds: usize,
    pub attack_probability: f64,
    pub collude: bool,
    /// Norm of `MM − GM`.
    pub mm_scale: f64,
    pub craft: CraftRule,
    pub seed: u64,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            attacker_ids: BTreeSet::new(),
            mode: AttackMode::Untargeted,
            pattern: AttackPattern::Static,
            start_round: 30,
            pretence_rounds: 50,
            attack_probability: 0.5,
            collude: false,
            mm_scale: 0.5,
            craft: CraftRule::Approximate,
            seed: 0,
        }
    }
}

impl AttackSpec {
    pub fn validate(&self, worker_count: usize) -> Result<()> {
        if let Some(&bad) = self.attacker_ids.iter().find(|&&id| id >= worker_count) {
            return Err(Error::Config(format!(
                "attacker id {bad} is not a worker (workers are 0..{worker_count})"
            )));
        }
        if !(0.0..=1.0).contains(&self.attack_probability) {
            return Err(Error::Config(format!(
                "attack probability {} outside [0, 1]",
                self.attack_probability
            )));
        }
        if !(self.mm_scale >= 0.0 && self.mm_scale.is_finite()) {
            return Err(Error::Config(format!("mm_scale must be non-negative, got {}", self.mm_scale)));
        }
        Ok(())
    }

    pub fn is_attacker(&self, worker_id: usize) -> bool {
        self.attacker_ids.contains(&worker_id)
    }

    /// Seed of the target stream used by `worker_id`; colluders share one.
    pub fn target_seed(&self, worker_id: usize) -> u64 {
        if self.collude {
            seed::derive(self.seed, Stream::Attack, &[u64::MAX])
        } else {
            seed::derive(self.seed, Stream::Attack, &[worker_id as u64])
        }
    }
}

/// Whether `worker_id` submits a crafted update in `round`. Inactive
/// attackers train honestly.
pub fn pattern_active(spec: &AttackSpec, round: usize, worker_id: usize) -> bool {
    if !spec.is_attacker(worker_id) || round < spec.start_round {
        return false;
    }
    match spec.pattern {
        AttackPattern::Static => true,
        AttackPattern::Pretence => round >= spec.start_round + spec.pretence_rounds,
        AttackPattern::Randomized => {
            let s = seed::derive(spec.seed, Stream::Attack, &[worker_id as u64, round as u64, 0xc0]);
            seed::rng(s).random::<f64>() < spec.attack_probability
        }
    }
}

/// Gaussian direction normalised to unit length.
pub fn random_unit_vector(dim: usize, seed: u64) -> Result<ParamVector> {
    let mut rng = seed::rng(seed);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = crate::param::norm(&v);
        if n > 0.0 {
            return ParamVector::new(v.into_iter().map(|x| x / n).collect());
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaliciousTarget {
    pub mm: ParamVector,
}

/// `MM = GM + mm_scale·u` for a seeded unit direction `u`.
///
/// Untargeted targets draw a new `u` every round. Targeted ones ignore
/// `round` when choosing `u`; callers fix `global` to the model at the
/// start round (see [`Adversary`]).
pub fn sample_malicious_target(
    mode: AttackMode,
    round: usize,
    global: &ParamVector,
    mm_scale: f64,
    stream_seed: u64,
) -> Result<MaliciousTarget> {
    let dir_seed = match mode {
        AttackMode::Untargeted => seed::derive(stream_seed, Stream::Attack, &[round as u64]),
        AttackMode::Targeted => seed::derive(stream_seed, Stream::Attack, &[u64::MAX - 1]),
    };
    let u = random_unit_vector(global.dim(), dir_seed)?;
    Ok(MaliciousTarget {
        mm: linear_combine(global, &[(mm_scale, &u)])?,
    })
}

/// Crafts the poisoned local model. With `benign_deviation_sum` the exact
/// replacement vector is returned, otherwise the large-`t` approximation.
pub fn craft_malicious_update(
    global: &ParamVector,
    target: &MaliciousTarget,
    n: usize,
    r: f64,
    benign_deviation_sum: Option<&ParamVector>,
) -> Result<ParamVector> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::InvalidArgument(format!("server learning rate must be positive, got {r}")));
    }
    if target.mm.dim() != global.dim() {
        return Err(Error::DimensionMismatch {
            expected: global.dim(),
            actual: target.mm.dim(),
        });
    }
    let boost = n as f64 / r;
    match benign_deviation_sum {
        Some(sum) => {
            let mut out = linear_combine(&target.mm, &[(boost - 1.0, &target.mm), (1.0 - boost, global)])?;
            out = linear_combine(&out, &[(-1.0, sum)])?;
            Ok(out)
        }
        None => {
            let offset = target.mm.sub(global)?;
            linear_combine(global, &[(boost, &offset)])
        }
    }
}

/// Stateful wrapper that pins targeted goals at the start round.
#[derive(Debug, Clone)]
pub struct Adversary {
    spec: AttackSpec,
    fixed: BTreeMap<u64, MaliciousTarget>,
}

impl Adversary {
    pub fn new(spec: AttackSpec) -> Self {
        Adversary {
            spec,
            fixed: BTreeMap::new(),
        }
    }

    pub fn spec(&self) -> &AttackSpec {
        &self.spec
    }

    pub fn is_active(&self, round: usize, worker_id: usize) -> bool {
        pattern_active(&self.spec, round, worker_id)
    }

    /// Must be called once per round before [`Adversary::target`].
    pub fn begin_round(&mut self, round: usize, global: &ParamVector) -> Result<()> {
        if self.spec.mode != AttackMode::Targeted || round < self.spec.start_round {
            return Ok(());
        }
        for &id in &self.spec.attacker_ids {
            let s = self.spec.target_seed(id);
            if !self.fixed.contains_key(&s) {
                let t = sample_malicious_target(AttackMode::Targeted, round, global, self.spec.mm_scale, s)?;
                self.fixed.insert(s, t);
            }
        }
        Ok(())
    }

    pub fn target(&self, round: usize, worker_id: usize, global: &ParamVector) -> Result<MaliciousTarget> {
        let s = self.spec.target_seed(worker_id);
        match self.spec.mode {
            AttackMode::Untargeted => sample_malicious_target(AttackMode::Untargeted, round, global, self.spec.mm_scale, s),
            AttackMode::Targeted => self
                .fixed
                .get(&s)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("no fixed target yet at round {round}"))),
        }
    }
}
