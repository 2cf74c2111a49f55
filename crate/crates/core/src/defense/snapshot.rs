//! Plain-text history snapshots for offline re-scoring.
//!
//! ```text
//! # attestfl history v1
//! # window_len = 10
//! round,worker_id,delta,sim,err_impact
//! 0,0,1.2345,NA,NA
//! 1,0,1.1,0.998,-0.02
//! ```
//!
//! Records are ordered by round, then worker. `NA` marks a missing value.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Attestor, DefenseConfig, Observation, Verdict, WorkerHistory};
use crate::error::{Error, Result};

pub const MAGIC: &str = "# attestfl history v1";
const HEADER: &str = "round,worker_id,delta,sim,err_impact";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnapshotRecord {
    pub round: usize,
    pub worker_id: usize,
    pub delta: f64,
    pub sim: Option<f64>,
    pub err_impact: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub window_len: usize,
    pub records: Vec<SnapshotRecord>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

impl Snapshot {
    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC}\n# window_len = {}\n{HEADER}\n", self.window_len);
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.round,
                r.worker_id,
                r.delta,
                fmt_opt(r.sim),
                fmt_opt(r.err_impact)
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Snapshot> {
        let err = |line: usize, reason: &str| Error::Snapshot {
            line,
            reason: reason.to_string(),
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end()));
        match lines.next() {
            Some((_, MAGIC)) => {}
            _ => return Err(err(1, "missing or unsupported version line")),
        }
        let window_len = match lines.next() {
            Some((n, l)) => l
                .strip_prefix("# window_len =")
                .and_then(|v| v.trim().parse::<usize>().ok())
                .filter(|&c| c >= 2)
                .ok_or_else(|| err(n, "expected `# window_len = <integer ≥ 2>`"))?,
            None => return Err(err(2, "truncated header")),
        };
        match lines.next() {
            Some((_, HEADER)) => {}
            Some((n, _)) => return Err(err(n, "unexpected column header")),
            None => return Err(err(3, "truncated header")),
        }
        let mut records = Vec::new();
        let mut last = (0usize, None::<usize>);
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(err(n, "expected 5 fields"));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| err(n, &format!("bad integer `{s}`")));
            let real = |s: &str| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(n, &format!("bad number `{s}`")))
            };
            let opt = |s: &str| if s == "NA" { Ok(None) } else { real(s).map(Some) };
            let rec = SnapshotRecord {
                round: int(f[0])?,
                worker_id: int(f[1])?,
                delta: real(f[2])?,
                sim: opt(f[3])?,
                err_impact: opt(f[4])?,
            };
            if rec.delta < 0.0 || rec.sim.is_some_and(|s| !(-1.0..=1.0).contains(&s)) {
                return Err(err(n, "value out of range"));
            }
            let key = (rec.round, Some(rec.worker_id));
            if last.1.is_some() && key <= last {
                return Err(err(n, "records must be sorted by round then worker"));
            }
            last = key;
            records.push(rec);
        }
        Ok(Snapshot { window_len, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Snapshot> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Snapshot::parse(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rescored {
    pub round: usize,
    pub worker_id: usize,
    pub delta_rate: Option<f64>,
    pub verdict: Verdict,
}

/// Replays a snapshot through fresh histories and recomputes every verdict
/// under `cfg`. The snapshot's window length overrides `cfg.window_len`.
pub fn rescore(snapshot: &Snapshot, cfg: &DefenseConfig) -> Result<Vec<Rescored>> {
    let cfg = DefenseConfig {
        window_len: snapshot.window_len,
        ..cfg.clone()
    };
    cfg.validate()?;
    let workers = snapshot.records.iter().map(|r| r.worker_id + 1).max().unwrap_or(0);
    let mut histories: Vec<WorkerHistory> = (0..workers).map(|w| WorkerHistory::new(w, cfg.window_len)).collect();
    let mut rejected_last = vec![false; workers];
    let mut out = Vec::with_capacity(snapshot.records.len());
    let mut i = 0;
    while i < snapshot.records.len() {
        let round = snapshot.records[i].round;
        let mut j = i;
        while j < snapshot.records.len() && snapshot.records[j].round == round {
            j += 1;
        }
        let batch = &snapshot.records[i..j];
        let mut present = vec![false; workers];
        for r in batch {
            histories[r.worker_id].push_observation(&Observation {
                delta: r.delta,
                sim: r.sim,
                err_impact: r.err_impact,
                val_error: None,
                degenerate: false,
            });
            present[r.worker_id] = true;
        }
        let mask = (0..workers)
            .map(|w| present[w] && !(cfg.exclude_rejected && rejected_last[w]))
            .collect();
        let attestor = Attestor::new(&histories, round, &cfg).with_population(mask);
        let mut rejected = vec![false; workers];
        for r in batch {
            let verdict = attestor.verdict(r.worker_id);
            rejected[r.worker_id] = !verdict.reliable;
            out.push(Rescored {
                round,
                worker_id: r.worker_id,
                delta_rate: attestor.rate(r.worker_id),
                verdict,
            });
        }
        rejected_last = rejected;
        i = j;
    }
    Ok(out)
}
