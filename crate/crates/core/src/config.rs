//! Scenario files.
//!
//! INI-style text: `[section]` headers, `key = value` lines and `#`
//! comments. Unknown sections or keys are errors. Only `[task] kind`,
//! `[training] workers` and `[training] rounds` are required; every other
//! key has the default listed in [`ScenarioConfig::to_ini`]'s output.
//! The presence of an `[attack]` or `[defense]` section enables that arm.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attack::{AttackMode, AttackPattern, AttackSpec, CraftRule};
use crate::defense::{DefenseConfig, DetectorSet, OutlierSide, RateStats};
use crate::engine::Divisor;
use crate::error::{Error, Result};
use crate::seed::{self, Stream};

#[derive(Debug, Clone, PartialEq)]
pub enum TaskSource {
    Synthetic {
        classes: usize,
        input_dim: usize,
        samples_per_class: usize,
        cluster_spread: f64,
        /// Share of the pool held out as the test set.
        test_fraction: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Use only the first N training rows.
        train_limit: Option<usize>,
        test_limit: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub source: TaskSource,
    pub quasi_val_size: usize,
    pub quasi_val_noise: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub workers: usize,
    pub rounds: usize,
    /// Local SGD step size.
    pub lr: f64,
    /// Aggregation rate `r`.
    pub server_lr: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Dirichlet concentration; `inf` gives an IID split.
    pub concentration: f64,
    /// Every worker trains on the whole training set.
    pub replicate_shards: bool,
    pub participants: Option<usize>,
    pub divisor: Divisor,
    pub seed: u64,
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub task: TaskConfig,
    /// Hidden layer widths of the MLP.
    pub hidden: Vec<usize>,
    pub training: TrainingConfig,
    pub attack: Option<AttackSpec>,
    pub defense: Option<DefenseConfig>,
    pub output_dir: Option<PathBuf>,
}

const SECTIONS: [&str; 6] = ["task", "model", "training", "attack", "defense", "output"];

struct Entry {
    line: usize,
    value: String,
}

struct Section {
    name: &'static str,
    line: usize,
    entries: BTreeMap<String, Entry>,
}

impl Section {
    fn take_raw(&mut self, key: &str) -> Option<Entry> {
        self.entries.remove(key)
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take_raw(key) {
            None => Ok(None),
            Some(e) => e.value.parse::<T>().map(Some).map_err(|_| Error::ConfigSyntax {
                line: e.line,
                reason: format!("[{}] {key}: cannot parse `{}`", self.name, e.value),
            }),
        }
    }

    fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    fn require<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let line = self.line;
        let name = self.name;
        self.take(key)?.ok_or_else(|| Error::ConfigSyntax {
            line,
            reason: format!("[{name}] missing required key `{key}`"),
        })
    }

    fn get_with<T>(&mut self, key: &str, default: T, parse: impl Fn(&str) -> Option<T>) -> Result<T> {
        match self.take_raw(key) {
            None => Ok(default),
            Some(e) => parse(&e.value).ok_or_else(|| Error::ConfigSyntax {
                line: e.line,
                reason: format!("[{}] {key}: invalid value `{}`", self.name, e.value),
            }),
        }
    }

    fn finish(self) -> Result<()> {
        match self.entries.into_iter().min_by_key(|(_, e)| e.line) {
            None => Ok(()),
            Some((key, e)) => Err(Error::ConfigSyntax {
                line: e.line,
                reason: format!("[{}] unknown key `{key}`", self.name),
            }),
        }
    }
}

fn empty_section(name: &'static str) -> Section {
    Section {
        name,
        line: 0,
        entries: BTreeMap::new(),
    }
}

fn split_sections(text: &str) -> Result<BTreeMap<&'static str, Section>> {
    let mut sections: BTreeMap<&'static str, Section> = BTreeMap::new();
    let mut current: Option<&'static str> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if let Some(rest) = body.strip_prefix('[') {
            let name = rest.strip_suffix(']').map(str::trim).ok_or_else(|| Error::ConfigSyntax {
                line,
                reason: "unterminated section header".into(),
            })?;
            let known = SECTIONS.iter().find(|s| **s == name).ok_or_else(|| Error::ConfigSyntax {
                line,
                reason: format!("unknown section [{name}]"),
            })?;
            if sections.contains_key(known) {
                return Err(Error::ConfigSyntax {
                    line,
                    reason: format!("duplicate section [{name}]"),
                });
            }
            sections.insert(known, Section { line, ..empty_section(known) });
            current = Some(known);
            continue;
        }
        let (key, value) = body.split_once('=').ok_or_else(|| Error::ConfigSyntax {
            line,
            reason: "expected `key = value`".into(),
        })?;
        let section = current.ok_or_else(|| Error::ConfigSyntax {
            line,
            reason: "key outside of any section".into(),
        })?;
        let key = key.trim().to_string();
        let entries = &mut sections.get_mut(section).unwrap().entries;
        if entries.contains_key(&key) {
            return Err(Error::ConfigSyntax {
                line,
                reason: format!("duplicate key `{key}`"),
            });
        }
        entries.insert(
            key,
            Entry {
                line,
                value: value.trim().to_string(),
            },
        );
    }
    Ok(sections)
}

fn parse_list<T: FromStr>(s: &str) -> Option<Vec<T>> {
    if s.is_empty() || s == "none" {
        return Some(Vec::new());
    }
    s.split(',').map(|p| p.trim().parse().ok()).collect()
}

fn parse_optional_count(s: &str) -> Option<Option<usize>> {
    if s == "all" || s == "none" {
        Some(None)
    } else {
        s.parse().ok().map(Some)
    }
}

fn parse_mode(s: &str) -> Option<AttackMode> {
    match s {
        "untargeted" => Some(AttackMode::Untargeted),
        "targeted" => Some(AttackMode::Targeted),
        _ => None,
    }
}

fn parse_pattern(s: &str) -> Option<AttackPattern> {
    match s {
        "static" => Some(AttackPattern::Static),
        "pretence" => Some(AttackPattern::Pretence),
        "randomized" => Some(AttackPattern::Randomized),
        _ => None,
    }
}

fn parse_craft(s: &str) -> Option<CraftRule> {
    match s {
        "approximate" => Some(CraftRule::Approximate),
        "exact" => Some(CraftRule::Exact),
        _ => None,
    }
}

fn parse_side(s: &str) -> Option<OutlierSide> {
    match s {
        "lower" => Some(OutlierSide::Lower),
        "upper" => Some(OutlierSide::Upper),
        "both" => Some(OutlierSide::Both),
        _ => None,
    }
}

fn parse_stats(s: &str) -> Option<RateStats> {
    match s {
        "leave_one_out" => Some(RateStats::LeaveOneOut),
        "population" => Some(RateStats::Population),
        _ => None,
    }
}

fn parse_divisor(s: &str) -> Option<Divisor> {
    match s {
        "total" => Some(Divisor::Total),
        "accepted" => Some(Divisor::Accepted),
        _ => None,
    }
}

fn parse_detectors(s: &str) -> Option<DetectorSet> {
    let mut set = DetectorSet::NONE;
    for name in parse_list::<String>(s)? {
        match name.as_str() {
            "a1" => set.a1 = true,
            "a2" => set.a2 = true,
            "a3" => set.a3 = true,
            _ => return None,
        }
    }
    Some(set)
}

fn mode_str(m: AttackMode) -> &'static str {
    match m {
        AttackMode::Untargeted => "untargeted",
        AttackMode::Targeted => "targeted",
    }
}

fn pattern_str(p: AttackPattern) -> &'static str {
    match p {
        AttackPattern::Static => "static",
        AttackPattern::Pretence => "pretence",
        AttackPattern::Randomized => "randomized",
    }
}

fn craft_str(c: CraftRule) -> &'static str {
    match c {
        CraftRule::Approximate => "approximate",
        CraftRule::Exact => "exact",
    }
}

fn side_str(s: OutlierSide) -> &'static str {
    match s {
        OutlierSide::Lower => "lower",
        OutlierSide::Upper => "upper",
        OutlierSide::Both => "both",
    }
}

fn stats_str(s: RateStats) -> &'static str {
    match s {
        RateStats::LeaveOneOut => "leave_one_out",
        RateStats::Population => "population",
    }
}

fn detectors_str(d: DetectorSet) -> String {
    let names: Vec<&str> = [(d.a1, "a1"), (d.a2, "a2"), (d.a3, "a3")]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
    if names.is_empty() {
        "none".into()
    } else {
        names.join(",")
    }
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    let v: Vec<String> = items.into_iter().map(|x| x.to_string()).collect();
    if v.is_empty() {
        "none".into()
    } else {
        v.join(",")
    }
}

fn opt_count(v: Option<usize>) -> String {
    v.map_or_else(|| "all".to_string(), |n| n.to_string())
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<ScenarioConfig> {
        let mut sections = split_sections(text)?;
        let mut take = |name: &'static str| sections.remove(name);

        let mut task = take("task").ok_or_else(|| Error::ConfigSyntax {
            line: 0,
            reason: "missing [task] section".into(),
        })?;
        let kind: String = task.require("kind")?;
        let source = match kind.as_str() {
            "synthetic" => TaskSource::Synthetic {
                classes: task.get("classes", 10)?,
                input_dim: task.get("input_dim", 20)?,
                samples_per_class: task.get("samples_per_class", 200)?,
                cluster_spread: task.get("cluster_spread", 0.2)?,
                test_fraction: task.get("test_fraction", 0.2)?,
            },
            "idx" => TaskSource::Idx {
                train_images: task.require("train_images")?,
                train_labels: task.require("train_labels")?,
                test_images: task.require("test_images")?,
                test_labels: task.require("test_labels")?,
                train_limit: task.get_with("train_limit", None, parse_optional_count)?,
                test_limit: task.get_with("test_limit", None, parse_optional_count)?,
            },
            other => {
                return Err(Error::Config(format!("unknown task kind `{other}`")));
            }
        };
        let task_cfg = TaskConfig {
            source,
            quasi_val_size: task.get("quasi_val_size", 100)?,
            quasi_val_noise: task.get("quasi_val_noise", 0.05)?,
        };
        task.finish()?;

        let mut model = take("model").unwrap_or_else(|| empty_section("model"));
        let hidden = model.get_with("hidden", vec![30], parse_list)?;
        model.finish()?;

        let mut tr = take("training").ok_or_else(|| Error::ConfigSyntax {
            line: 0,
            reason: "missing [training] section".into(),
        })?;
        let training = TrainingConfig {
            workers: tr.require("workers")?,
            rounds: tr.require("rounds")?,
            lr: tr.get("lr", 0.05)?,
            server_lr: tr.get("server_lr", 1.0)?,
            local_epochs: tr.get("local_epochs", 1)?,
            batch_size: tr.get("batch_size", 16)?,
            concentration: tr.get("concentration", f64::INFINITY)?,
            replicate_shards: tr.get("replicate_shards", false)?,
            participants: tr.get_with("participants", None, parse_optional_count)?,
            divisor: tr.get_with("divisor", Divisor::Total, parse_divisor)?,
            seed: tr.get("seed", 1)?,
            parallel: tr.get("parallel", true)?,
        };
        tr.finish()?;

        let attack = match take("attack") {
            None => None,
            Some(mut a) => {
                let d = AttackSpec::default();
                let spec = AttackSpec {
                    attacker_ids: a
                        .get_with("attackers", Vec::new(), parse_list::<usize>)?
                        .into_iter()
                        .collect::<BTreeSet<_>>(),
                    mode: a.get_with("mode", d.mode, parse_mode)?,
                    pattern: a.get_with("pattern", d.pattern, parse_pattern)?,
                    start_round: a.get("start_round", d.start_round)?,
                    pretence_rounds: a.get("pretence_rounds", d.pretence_rounds)?,
                    attack_probability: a.get("probability", d.attack_probability)?,
                    collude: a.get("collude", d.collude)?,
                    mm_scale: a.get("mm_scale", d.mm_scale)?,
                    craft: a.get_with("craft", d.craft, parse_craft)?,
                    seed: a.get("seed", seed::derive(training.seed, Stream::Attack, &[]))?,
                };
                a.finish()?;
                Some(spec)
            }
        };

        let defense = match take("defense") {
            None => None,
            Some(mut s) => {
                let d = DefenseConfig::default();
                let cfg = DefenseConfig {
                    warmup_rounds: s.get("warmup_rounds", d.warmup_rounds)?,
                    window_len: s.get("window_len", d.window_len)?,
                    sigma_mult: s.get("sigma_mult", d.sigma_mult)?,
                    rate_side: s.get_with("rate_side", d.rate_side, parse_side)?,
                    rate_stats: s.get_with("rate_stats", d.rate_stats, parse_stats)?,
                    exclude_rejected: s.get("exclude_rejected", d.exclude_rejected)?,
                    sim_mean_min: s.get("sim_mean_min", d.sim_mean_min)?,
                    sim_slope_min: s.get("sim_slope_min", d.sim_slope_min)?,
                    err_slope_max: s.get("err_slope_max", d.err_slope_max)?,
                    detectors: s.get_with("detectors", d.detectors, parse_detectors)?,
                };
                s.finish()?;
                Some(cfg)
            }
        };

        let output_dir = match take("output") {
            None => None,
            Some(mut o) => {
                let dir = o.take::<PathBuf>("dir")?;
                o.finish()?;
                dir
            }
        };

        let cfg = ScenarioConfig {
            task: task_cfg,
            hidden,
            training,
            attack,
            defense,
            output_dir,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ScenarioConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ScenarioConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.training;
        if t.workers < 1 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if t.rounds < 1 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", t.lr)));
        }
        if !(t.server_lr > 0.0 && t.server_lr.is_finite()) {
            return Err(Error::Config(format!("server_lr must be positive, got {}", t.server_lr)));
        }
        if t.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if t.concentration.is_nan() || t.concentration <= 0.0 {
            return Err(Error::Config(format!("concentration must be positive, got {}", t.concentration)));
        }
        if t.participants.is_some_and(|m| m == 0 || m > t.workers) {
            return Err(Error::Config("participants must be in 1..=workers".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        if self.task.quasi_val_size < 1 {
            return Err(Error::Config("quasi_val_size must be at least 1".into()));
        }
        if !(self.task.quasi_val_noise >= 0.0 && self.task.quasi_val_noise.is_finite()) {
            return Err(Error::Config("quasi_val_noise must be non-negative".into()));
        }
        if let TaskSource::Synthetic {
            classes,
            input_dim,
            samples_per_class,
            cluster_spread,
            test_fraction,
        } = self.task.source
        {
            if classes < 2 || input_dim < 1 || samples_per_class < 1 {
                return Err(Error::Config("synthetic task needs ≥ 2 classes and positive sizes".into()));
            }
            if !(cluster_spread > 0.0 && cluster_spread.is_finite()) {
                return Err(Error::Config("cluster_spread must be positive".into()));
            }
            if !(test_fraction > 0.0 && test_fraction < 1.0) {
                return Err(Error::Config("test_fraction must be in (0, 1)".into()));
            }
        }
        if let Some(a) = &self.attack {
            a.validate(t.workers)?;
        }
        if let Some(d) = &self.defense {
            d.validate()?;
        }
        Ok(())
    }

    /// Canonical text form: every key, fixed order, defaults spelled out.
    pub fn to_ini(&self) -> String {
        let mut w = IniWriter::default();
        w.section("task");
        match &self.task.source {
            TaskSource::Synthetic {
                classes,
                input_dim,
                samples_per_class,
                cluster_spread,
                test_fraction,
            } => {
                w.kv("kind", "synthetic".into());
                w.kv("classes", classes.to_string());
                w.kv("input_dim", input_dim.to_string());
                w.kv("samples_per_class", samples_per_class.to_string());
                w.kv("cluster_spread", cluster_spread.to_string());
                w.kv("test_fraction", test_fraction.to_string());
            }
            TaskSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
                test_limit,
            } => {
                w.kv("kind", "idx".into());
                w.kv("train_images", train_images.display().to_string());
                w.kv("train_labels", train_labels.display().to_string());
                w.kv("test_images", test_images.display().to_string());
                w.kv("test_labels", test_labels.display().to_string());
                w.kv("train_limit", opt_count(*train_limit));
                w.kv("test_limit", opt_count(*test_limit));
            }
        }
        w.kv("quasi_val_size", self.task.quasi_val_size.to_string());
        w.kv("quasi_val_noise", self.task.quasi_val_noise.to_string());

        w.section("model");
        w.kv("hidden", join(&self.hidden));

        let t = &self.training;
        w.section("training");
        w.kv("workers", t.workers.to_string());
        w.kv("rounds", t.rounds.to_string());
        w.kv("lr", t.lr.to_string());
        w.kv("server_lr", t.server_lr.to_string());
        w.kv("local_epochs", t.local_epochs.to_string());
        w.kv("batch_size", t.batch_size.to_string());
        w.kv("concentration", t.concentration.to_string());
        w.kv("replicate_shards", t.replicate_shards.to_string());
        w.kv("participants", opt_count(t.participants));
        w.kv(
            "divisor",
            match t.divisor {
                Divisor::Total => "total",
                Divisor::Accepted => "accepted",
            }
            .into(),
        );
        w.kv("seed", t.seed.to_string());
        w.kv("parallel", t.parallel.to_string());

        if let Some(a) = &self.attack {
            w.section("attack");
            w.kv("attackers", join(&a.attacker_ids));
            w.kv("mode", mode_str(a.mode).into());
            w.kv("pattern", pattern_str(a.pattern).into());
            w.kv("start_round", a.start_round.to_string());
            w.kv("pretence_rounds", a.pretence_rounds.to_string());
            w.kv("probability", a.attack_probability.to_string());
            w.kv("collude", a.collude.to_string());
            w.kv("mm_scale", a.mm_scale.to_string());
            w.kv("craft", craft_str(a.craft).into());
            w.kv("seed", a.seed.to_string());
        }

        if let Some(d) = &self.defense {
            w.section("defense");
            w.kv("warmup_rounds", d.warmup_rounds.to_string());
            w.kv("window_len", d.window_len.to_string());
            w.kv("sigma_mult", d.sigma_mult.to_string());
            w.kv("rate_side", side_str(d.rate_side).into());
            w.kv("rate_stats", stats_str(d.rate_stats).into());
            w.kv("exclude_rejected", d.exclude_rejected.to_string());
            w.kv("sim_mean_min", d.sim_mean_min.to_string());
            w.kv("sim_slope_min", d.sim_slope_min.to_string());
            w.kv("err_slope_max", d.err_slope_max.to_string());
            w.kv("detectors", detectors_str(d.detectors));
        }

        if let Some(dir) = &self.output_dir {
            w.section("output");
            w.kv("dir", dir.display().to_string());
        }
        w.out
    }
}

#[derive(Default)]
struct IniWriter {
    out: String,
}

impl IniWriter {
    fn section(&mut self, name: &str) {
        if !self.out.is_empty() {
            self.out.push('\n');
        }
        let _ = writeln!(self.out, "[{name}]");
    }

    fn kv(&mut self, key: &str, value: String) {
        let _ = writeln!(self.out, "{key} = {value}");
    }
}
