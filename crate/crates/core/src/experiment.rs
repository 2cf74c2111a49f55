//! Seeded multi-arm runs and their CSV output.
//!
//! Every arm rebuilds the same data and initial model from the master seed,
//! so benign behaviour is identical across arms until the attack starts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::attack::Adversary;
use crate::config::{ScenarioConfig, TaskSource};
use crate::data::{self, Dataset, SyntheticSpec};
use crate::defense::snapshot::Snapshot;
use crate::defense::DefenseConfig;
use crate::engine::{EngineSettings, FederatedData, Role, RoundRecord, Simulation, TrainSettings};
use crate::error::{Error, Result};
use crate::model::ModelArch;
use crate::seed::{self, Stream};

pub const ROUNDS_HEADER: &str = "round,worker_id,role,arm,delta,delta_rate,cosine_sim,err_impact,a1,a2,a3,accepted,global_acc,global_loss,train_ms,defense_ms";
pub const SUMMARY_HEADER: &str = "arm,final_acc,final_loss,precision,recall,fpr,uplift_points,uplift_relative,mean_round_ms,mean_defense_ms,overhead_factor";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Arm {
    Baseline,
    Attack,
    Defended,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Baseline, Arm::Attack, Arm::Defended];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Attack => "attack",
            Arm::Defended => "defended",
        }
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Arm> {
        match s.trim() {
            "baseline" => Ok(Arm::Baseline),
            "attack" => Ok(Arm::Attack),
            "defended" => Ok(Arm::Defended),
            other => Err(Error::Config(format!("unknown arm `{other}`"))),
        }
    }
}

/// Parses a comma-separated arm list, dropping duplicates.
pub fn parse_arms(s: &str) -> Result<Vec<Arm>> {
    let mut arms = s.split(',').map(Arm::from_str).collect::<Result<Vec<_>>>()?;
    arms.sort_unstable();
    arms.dedup();
    Ok(arms)
}

fn arch_for(cfg: &ScenarioConfig, input_dim: usize, classes: usize) -> Result<ModelArch> {
    let mut dims = vec![input_dim];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(classes);
    ModelArch::new(dims)
}

fn take_prefix(d: Dataset, limit: Option<usize>) -> Result<Dataset> {
    match limit {
        Some(n) if n < d.len() => d.subset(&(0..n).collect::<Vec<_>>()),
        _ => Ok(d),
    }
}

/// Materialises the task: test split, quasi-validation hold-out and worker
/// shards, all derived from the master seed.
pub fn build_data(cfg: &ScenarioConfig) -> Result<FederatedData> {
    let master = cfg.training.seed;
    let (pool, test) = match &cfg.task.source {
        TaskSource::Synthetic {
            classes,
            input_dim,
            samples_per_class,
            cluster_spread,
            test_fraction,
        } => {
            let all = data::generate_synthetic(&SyntheticSpec {
                seed: seed::derive(master, Stream::Data, &[]),
                class_count: *classes,
                input_dim: *input_dim,
                samples_per_class: *samples_per_class,
                cluster_spread: *cluster_spread,
            })?;
            let test_size = ((all.len() as f64 * test_fraction).round() as usize).clamp(1, all.len() - 1);
            let test_idx = data::stratified_sample(all.labels(), all.class_count(), test_size, seed::derive(master, Stream::Split, &[]))?;
            let mut in_test = vec![false; all.len()];
            for &i in &test_idx {
                in_test[i] = true;
            }
            let rest: Vec<usize> = (0..all.len()).filter(|&i| !in_test[i]).collect();
            (all.subset(&rest)?, all.subset(&test_idx)?)
        }
        TaskSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            train_limit,
            test_limit,
        } => (
            take_prefix(data::load_idx(train_images, train_labels)?, *train_limit)?,
            take_prefix(data::load_idx(test_images, test_labels)?, *test_limit)?,
        ),
    };
    let qv = data::make_quasi_validation(
        &pool,
        cfg.task.quasi_val_size,
        seed::derive(master, Stream::QuasiValidation, &[]),
        cfg.task.quasi_val_noise,
    )?;
    let train = pool.subset(&qv.remaining)?;
    let workers = cfg.training.workers;
    let shards = if cfg.training.replicate_shards {
        vec![(0..train.len()).collect::<Vec<_>>(); workers]
    } else {
        data::partition_noniid(&train, workers, cfg.training.concentration, seed::derive(master, Stream::Partition, &[]))?.into_shards()
    };
    let classes = train.class_count().max(test.class_count());
    Ok(FederatedData {
        arch: arch_for(cfg, train.input_dim(), classes)?,
        train,
        shards,
        test,
        quasi_val: qv.data,
    })
}

fn engine_settings(cfg: &ScenarioConfig) -> EngineSettings {
    let t = &cfg.training;
    EngineSettings {
        worker_count: t.workers,
        participants: t.participants,
        train: TrainSettings {
            lr: t.lr,
            local_epochs: t.local_epochs,
            batch_size: t.batch_size,
        },
        server_lr: t.server_lr,
        divisor: t.divisor,
        master_seed: t.seed,
        parallel: t.parallel,
    }
}

#[derive(Debug, Clone)]
pub struct ArmRun {
    pub arm: Arm,
    pub rounds: Vec<RoundRecord>,
    /// History observations of the defended arm.
    pub snapshot: Option<Snapshot>,
}

impl ArmRun {
    pub fn final_accuracy(&self) -> f64 {
        self.rounds.last().map_or(0.0, |r| r.global_accuracy)
    }

    pub fn final_loss(&self) -> f64 {
        self.rounds.last().map_or(f64::NAN, |r| r.global_loss)
    }

    pub fn mean_round_ms(&self) -> f64 {
        self.rounds.iter().map(|r| r.total_ms).sum::<f64>() / self.rounds.len().max(1) as f64
    }

    pub fn mean_defense_ms(&self) -> f64 {
        self.rounds.iter().map(|r| r.defense_ms).sum::<f64>() / self.rounds.len().max(1) as f64
    }
}

/// Rejection counts against ground truth. Positives are workers that
/// submitted a crafted model that round; negatives are benign workers.
/// Attackers behaving honestly in a round are not counted.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Detection {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
    pub true_neg: usize,
}

impl Detection {
    pub fn from_rounds<'a>(rounds: impl IntoIterator<Item = &'a RoundRecord>) -> Detection {
        let mut d = Detection::default();
        for r in rounds {
            for w in r.workers.iter().filter(|w| w.participated) {
                match (w.attacking, w.role, w.accepted) {
                    (true, _, false) => d.true_pos += 1,
                    (true, _, true) => d.false_neg += 1,
                    (false, Role::Benign, false) => d.false_pos += 1,
                    (false, Role::Benign, true) => d.true_neg += 1,
                    (false, Role::Attacker, _) => {}
                }
            }
        }
        d
    }

    fn ratio(num: usize, den: usize) -> Option<f64> {
        (den > 0).then(|| num as f64 / den as f64)
    }

    pub fn precision(&self) -> Option<f64> {
        Self::ratio(self.true_pos, self.true_pos + self.false_pos)
    }

    pub fn recall(&self) -> Option<f64> {
        Self::ratio(self.true_pos, self.true_pos + self.false_neg)
    }

    pub fn false_positive_rate(&self) -> Option<f64> {
        Self::ratio(self.false_pos, self.false_pos + self.true_neg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmSummary {
    pub arm: Arm,
    pub final_accuracy: f64,
    pub final_loss: f64,
    /// Post-warm-up detection counts; defended arm only.
    pub detection: Option<Detection>,
    pub mean_round_ms: f64,
    pub mean_defense_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub arms: Vec<ArmSummary>,
    /// Defended minus attack-only final accuracy, in accuracy points.
    pub uplift_points: Option<f64>,
    /// The same difference relative to the attack-only accuracy.
    pub uplift_relative: Option<f64>,
    /// Mean defended round time over mean undefended round time.
    pub overhead_factor: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config: ScenarioConfig,
    pub runs: Vec<ArmRun>,
    pub summary: Summary,
}

impl ExperimentReport {
    pub fn run(&self, arm: Arm) -> Option<&ArmRun> {
        self.runs.iter().find(|r| r.arm == arm)
    }
}

/// Runs a single arm on prepared data.
pub fn run_arm(cfg: &ScenarioConfig, data: &FederatedData, arm: Arm) -> Result<ArmRun> {
    let adversary = match arm {
        Arm::Baseline => None,
        Arm::Attack | Arm::Defended => cfg.attack.clone().map(Adversary::new),
    };
    let defense = match arm {
        Arm::Defended => Some(cfg.defense.clone().unwrap_or_default()),
        _ => None,
    };
    let window_len = defense.as_ref().map(|d| d.window_len);
    let mut sim = Simulation::new(data, engine_settings(cfg), adversary, defense)?;
    let mut rounds = Vec::with_capacity(cfg.training.rounds);
    for _ in 0..cfg.training.rounds {
        rounds.push(sim.run_round()?);
    }
    let snapshot = window_len.map(|window_len| Snapshot {
        window_len,
        records: sim.snapshot_records().to_vec(),
    });
    Ok(ArmRun { arm, rounds, snapshot })
}

/// Runs the requested arms in order with identical seeds.
pub fn run_experiment(cfg: &ScenarioConfig, arms: &[Arm]) -> Result<ExperimentReport> {
    cfg.validate()?;
    if arms.is_empty() {
        return Err(Error::Config("no arms requested".into()));
    }
    let data = build_data(cfg)?;
    let mut runs = Vec::with_capacity(arms.len());
    for &arm in arms {
        runs.push(run_arm(cfg, &data, arm)?);
    }
    let summary = summarize(cfg, &runs);
    Ok(ExperimentReport {
        config: cfg.clone(),
        runs,
        summary,
    })
}

pub fn summarize(cfg: &ScenarioConfig, runs: &[ArmRun]) -> Summary {
    let warmup = cfg.defense.as_ref().map_or_else(|| DefenseConfig::default().warmup_rounds, |d| d.warmup_rounds);
    let arms = runs
        .iter()
        .map(|run| ArmSummary {
            arm: run.arm,
            final_accuracy: run.final_accuracy(),
            final_loss: run.final_loss(),
            detection: (run.arm == Arm::Defended).then(|| Detection::from_rounds(run.rounds.iter().filter(|r| r.round >= warmup))),
            mean_round_ms: run.mean_round_ms(),
            mean_defense_ms: run.mean_defense_ms(),
        })
        .collect::<Vec<_>>();
    let find = |arm: Arm| runs.iter().find(|r| r.arm == arm);
    let (uplift_points, uplift_relative) = match (find(Arm::Defended), find(Arm::Attack)) {
        (Some(d), Some(a)) => {
            let diff = d.final_accuracy() - a.final_accuracy();
            let rel = (a.final_accuracy() > 0.0).then(|| diff / a.final_accuracy());
            (Some(100.0 * diff), rel)
        }
        _ => (None, None),
    };
    let overhead_factor = find(Arm::Defended).and_then(|d| {
        let undefended = find(Arm::Attack).or_else(|| find(Arm::Baseline))?;
        let base = undefended.mean_round_ms();
        (base > 0.0).then(|| d.mean_round_ms() / base)
    });
    Summary {
        arms,
        uplift_points,
        uplift_relative,
        overhead_factor,
    }
}

fn na(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// Per-(round, worker) rows for every arm, header included.
pub fn rounds_csv(report: &ExperimentReport) -> String {
    let mut out = String::from(ROUNDS_HEADER);
    out.push('\n');
    for run in &report.runs {
        for r in &run.rounds {
            for w in &r.workers {
                let accepted = if w.participated { w.accepted.to_string() } else { "NA".into() };
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:.3},{:.3}",
                    r.round,
                    w.worker_id,
                    w.role.as_str(),
                    run.arm.as_str(),
                    na(w.delta),
                    na(w.delta_rate),
                    na(w.cosine_sim),
                    na(w.err_impact),
                    w.verdict.a1,
                    w.verdict.a2,
                    w.verdict.a3,
                    accepted,
                    r.global_accuracy,
                    r.global_loss,
                    w.train_ms,
                    w.defense_ms,
                );
            }
        }
    }
    out
}

pub fn summary_csv(report: &ExperimentReport) -> String {
    let s = &report.summary;
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for a in &s.arms {
        let det = a.detection;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{:.3},{:.3},{}",
            a.arm.as_str(),
            a.final_accuracy,
            a.final_loss,
            na(det.and_then(|d| d.precision())),
            na(det.and_then(|d| d.recall())),
            na(det.and_then(|d| d.false_positive_rate())),
            na(s.uplift_points.filter(|_| a.arm == Arm::Defended)),
            na(s.uplift_relative.filter(|_| a.arm == Arm::Defended)),
            a.mean_round_ms,
            a.mean_defense_ms,
            na(s.overhead_factor.filter(|_| a.arm == Arm::Defended)),
        );
    }
    out
}

/// Writes `rounds.csv`, `summary.csv`, the normalised `config.ini` and, for
/// a defended arm, `history.txt` into `dir`.
pub fn emit_csv(report: &ExperimentReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write("rounds.csv", rounds_csv(report))?;
    write("summary.csv", summary_csv(report))?;
    write("config.ini", report.config.to_ini())?;
    if let Some(snap) = report.run(Arm::Defended).and_then(|r| r.snapshot.as_ref()) {
        snap.write(&dir.join("history.txt"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(extra: &str) -> ScenarioConfig {
        let text = format!(
            "[task]\nkind = synthetic\nclasses = 3\ninput_dim = 5\nsamples_per_class = 30\nquasi_val_size = 9\n\
             [model]\nhidden = 6\n[training]\nworkers = 4\nrounds = 6\nseed = 5\n{extra}"
        );
        ScenarioConfig::parse(&text).unwrap()
    }

    #[test]
    fn arm_lists() {
        assert_eq!(parse_arms("defended,baseline,baseline").unwrap(), vec![Arm::Baseline, Arm::Defended]);
        assert!(parse_arms("baseline,chaos").is_err());
    }

    #[test]
    fn data_splits_are_disjoint() {
        let cfg = tiny("");
        let d = build_data(&cfg).unwrap();
        assert_eq!(d.test.len(), 18);
        assert_eq!(d.quasi_val.len(), 9);
        assert_eq!(d.train.len(), 90 - 18 - 9);
        let covered: usize = d.shards.iter().map(Vec::len).sum();
        assert_eq!(covered, d.train.len());
        assert_eq!(d.arch.layer_dims(), &[5, 6, 3]);
    }

    #[test]
    fn csv_shape() {
        let cfg = tiny("[attack]\nattackers = 1\nstart_round = 2\n[defense]\nwarmup_rounds = 2\nwindow_len = 3\n");
        let report = run_experiment(&cfg, &Arm::ALL).unwrap();
        let csv = rounds_csv(&report);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(ROUNDS_HEADER));
        assert_eq!(lines.count(), 6 * 4 * 3);
        assert!(csv.contains(",attacker,attack,"));
        let summary = summary_csv(&report);
        assert_eq!(summary.lines().count(), 4);
        assert!(report.summary.overhead_factor.is_some());
        let snap = report.run(Arm::Defended).unwrap().snapshot.as_ref().unwrap();
        assert_eq!(snap.records.len(), 6 * 4);
    }

    #[test]
    fn baseline_is_arm_independent() {
        let cfg = tiny("[attack]\nattackers = 1\nstart_round = 3\n");
        let report = run_experiment(&cfg, &[Arm::Baseline, Arm::Attack]).unwrap();
        let (b, a) = (&report.runs[0].rounds, &report.runs[1].rounds);
        for t in 0..3 {
            assert_eq!(b[t].global_accuracy, a[t].global_accuracy);
            assert_eq!(b[t].workers[2].delta, a[t].workers[2].delta);
        }
    }
}
