use std::collections::VecDeque;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, ModelArch};
use crate::param::{self, ParamVector};

/// What one round added to a worker's history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    /// Distance of the submitted model from the global model it started from.
    pub delta: f64,
    /// Cosine similarity of the output layer with the previous submission.
    pub sim: Option<f64>,
    /// Change in quasi-validation error since the previous submission.
    pub err_impact: Option<f64>,
    /// Quasi-validation error of this submission.
    pub val_error: Option<f64>,
    /// The similarity was forced to 0 because an operand had zero norm.
    pub degenerate: bool,
}

/// Fixed-length behavioural record of one worker. Holds scalars plus a
/// single output-layer vector, never a full model history.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerHistory {
    worker_id: usize,
    window_len: usize,
    deltas: VecDeque<f64>,
    sims: VecDeque<f64>,
    err_impacts: VecDeque<f64>,
    prev_indicative: Option<ParamVector>,
    prev_val_error: Option<f64>,
    degenerate_sims: usize,
}

fn push_bounded(buf: &mut VecDeque<f64>, value: f64, cap: usize) {
    buf.push_back(value);
    while buf.len() > cap {
        buf.pop_front();
    }
}

impl WorkerHistory {
    pub fn new(worker_id: usize, window_len: usize) -> Self {
        WorkerHistory {
            worker_id,
            window_len,
            deltas: VecDeque::with_capacity(window_len + 1),
            sims: VecDeque::with_capacity(window_len + 1),
            err_impacts: VecDeque::with_capacity(window_len + 1),
            prev_indicative: None,
            prev_val_error: None,
            degenerate_sims: 0,
        }
    }

    pub fn worker_id(&self) -> usize {
        self.worker_id
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn deltas(&self) -> &VecDeque<f64> {
        &self.deltas
    }

    pub fn sims(&self) -> &VecDeque<f64> {
        &self.sims
    }

    pub fn err_impacts(&self) -> &VecDeque<f64> {
        &self.err_impacts
    }

    pub fn degenerate_sims(&self) -> usize {
        self.degenerate_sims
    }

    pub fn prev_indicative(&self) -> Option<&ParamVector> {
        self.prev_indicative.as_ref()
    }

    /// Scores the submitted local model against the global model it was
    /// trained from and the chief's quasi-validation set.
    pub fn record_round(
        &mut self,
        lm: &ParamVector,
        gm: &ParamVector,
        arch: &ModelArch,
        quasi_val: &Dataset,
    ) -> Result<Observation> {
        let delta = param::euclidean_distance(lm, gm)?;
        let indicative = model::indicative_features(lm, arch)?;
        let val = model::evaluate(lm, arch, &quasi_val.batch())?;
        let (sim, degenerate) = match &self.prev_indicative {
            Some(prev) => match param::cosine_similarity(&indicative, prev) {
                Ok(s) => (Some(s), false),
                Err(Error::DegenerateVector) => (Some(0.0), true),
                Err(e) => return Err(e),
            },
            None => (None, false),
        };
        let err_impact = self.prev_val_error.map(|prev| val.error_rate - prev);
        self.prev_indicative = Some(indicative);
        self.prev_val_error = Some(val.error_rate);
        let obs = Observation {
            delta,
            sim,
            err_impact,
            val_error: Some(val.error_rate),
            degenerate,
        };
        self.push_observation(&obs);
        Ok(obs)
    }

    /// Appends already-computed scalars, evicting entries beyond the window.
    pub fn push_observation(&mut self, obs: &Observation) {
        let cap = self.window_len;
        push_bounded(&mut self.deltas, obs.delta, cap);
        if let Some(s) = obs.sim {
            push_bounded(&mut self.sims, s, cap);
        }
        if let Some(e) = obs.err_impact {
            push_bounded(&mut self.err_impacts, e, cap);
        }
        if obs.degenerate {
            self.degenerate_sims += 1;
        }
    }
}
