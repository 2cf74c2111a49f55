//! Acceptance suite. Each test prints one `criterion N PASS|FAIL` line to
//! stdout (bypassing the harness capture) and then asserts it.
//!
//! Tests hold a shared lock so timing-sensitive criteria do not compete for
//! CPU with each other.

use std::io::Write as _;
use std::path::PathBuf;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use attestfl::attack::{craft_malicious_update, sample_malicious_target, AttackMode};
use attestfl::config::ScenarioConfig;
use attestfl::defense::convergence_rate;
use attestfl::engine::{aggregate, Role, RoundRecord};
use attestfl::experiment::{self, Arm, ArmRun, ExperimentReport};
use attestfl::model::{self, Batch, ModelArch};
use attestfl::param::{linear_combine, ParamVector};

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: u32, title: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {n:>2} {}: {title}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stdout().write_all(line.as_bytes());
    assert!(pass, "criterion {n} failed: {detail}");
}

// ---------------------------------------------------------------------------
// Shared scenario

const START: usize = 30;
const WARMUP: usize = 10;
const WINDOW: usize = 10;

/// Separable synthetic task: 10 classes, 20 features, 200 samples per class,
/// 10 IID workers, local lr 0.05. Two colluding static untargeted attackers
/// with `mm_scale` 0.5 from round 30 when `attack` is set.
fn scenario(seed: u64, rounds: usize, attack: &str, defense: &str) -> ScenarioConfig {
    let text = format!(
        "[task]\nkind = synthetic\nclasses = 10\ninput_dim = 20\nsamples_per_class = 200\ncluster_spread = 0.2\n\
         [model]\nhidden = 16\n\
         [training]\nworkers = 10\nrounds = {rounds}\nlr = 0.05\nbatch_size = 100\nseed = {seed}\n\
         [attack]\nattackers = 0,1\ncollude = true\nmm_scale = 0.5\nstart_round = {START}\n{attack}\n\
         [defense]\nwarmup_rounds = {WARMUP}\nwindow_len = {WINDOW}\nsigma_mult = 4\nsim_mean_min = 0.9\n{defense}\n"
    );
    ScenarioConfig::parse(&text).unwrap()
}

struct Main {
    report: ExperimentReport,
    baseline_time: Duration,
}

/// Baseline, attack-only and defended arms of the seed-1, 200-round scenario.
fn main_scenario() -> &'static Main {
    static MAIN: OnceLock<Main> = OnceLock::new();
    MAIN.get_or_init(|| {
        let cfg = scenario(1, 200, "", "");
        let data = experiment::build_data(&cfg).unwrap();
        let t = Instant::now();
        let baseline = experiment::run_arm(&cfg, &data, Arm::Baseline).unwrap();
        let baseline_time = t.elapsed();
        let attack = experiment::run_arm(&cfg, &data, Arm::Attack).unwrap();
        let defended = experiment::run_arm(&cfg, &data, Arm::Defended).unwrap();
        let runs = vec![baseline, attack, defended];
        let summary = experiment::summarize(&cfg, &runs);
        Main {
            report: ExperimentReport {
                config: cfg,
                runs,
                summary,
            },
            baseline_time,
        }
    })
}

fn arm(report: &ExperimentReport, a: Arm) -> &ArmRun {
    report.run(a).unwrap()
}

/// Share of crafted submissions rejected in rounds `>= from`.
fn attacker_rejection(rounds: &[RoundRecord], from: usize) -> f64 {
    let (mut hit, mut total) = (0, 0);
    for r in rounds.iter().filter(|r| r.round >= from) {
        for w in r.workers.iter().filter(|w| w.participated && w.attacking) {
            total += 1;
            hit += usize::from(!w.accepted);
        }
    }
    hit as f64 / total.max(1) as f64
}

/// Mean over rounds `>= from` of the per-round benign rejection rate.
fn benign_false_rejection(rounds: &[RoundRecord], from: usize) -> f64 {
    let rates: Vec<f64> = rounds
        .iter()
        .filter(|r| r.round >= from)
        .map(|r| {
            let benign: Vec<_> = r.workers.iter().filter(|w| w.participated && w.role == Role::Benign).collect();
            benign.iter().filter(|w| !w.accepted).count() as f64 / benign.len() as f64
        })
        .collect();
    rates.iter().sum::<f64>() / rates.len() as f64
}

fn pv(v: Vec<f64>) -> ParamVector {
    ParamVector::new(v).unwrap()
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_01_exact_replacement() {
    let _g = serial();
    let t = Instant::now();
    let dim = ModelArch::mnist_mlp().param_count();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let gm = pv((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect());
    let target = sample_malicious_target(AttackMode::Untargeted, 42, &gm, 0.5, 7).unwrap();
    let benign = vec![gm.clone(); 9];
    let zero = ParamVector::zeros(dim).unwrap();
    let deviations: Vec<ParamVector> = benign.iter().map(|b| b.sub(&gm).unwrap()).collect();
    let sum = linear_combine(&zero, &deviations.iter().map(|d| (1.0, d)).collect::<Vec<_>>()).unwrap();
    let evil = craft_malicious_update(&gm, &target, 10, 1.0, Some(&sum)).unwrap();
    let mut updates: Vec<(usize, &ParamVector)> = benign.iter().enumerate().collect();
    updates.push((9, &evil));
    let next = aggregate(&gm, &updates, 1.0, 10).unwrap();
    let worst = (0..dim).map(|i| (next[i] - target.mm[i]).abs()).fold(0.0, f64::max);
    let elapsed = t.elapsed();
    verdict(
        1,
        "exact crafting replaces the global model",
        worst <= 1e-9 && elapsed < Duration::from_secs(1),
        &format!("max |GM' - MM| = {worst:.3e} (<= 1e-9) over {dim} params, {elapsed:.2?} (< 1 s)"),
    );
}

/// Direct evaluation of the weighted convergence rate, written against the
/// formula rather than the production code path.
fn rate_oracle(window: &[f64], t: usize, c: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..window.len() - 1 {
        let step = window[i + 1] - window[i];
        total += 1.0 - (-(t as f64) / (c as f64) * step).exp();
    }
    total / c as f64
}

#[test]
fn criterion_02_convergence_rate_oracle() {
    let _g = serial();
    let t0 = Instant::now();
    let c = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let window: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..2.0)).collect();
        let t = rng.random_range(10..60);
        let got = convergence_rate(&window, t, c).unwrap();
        let want = rate_oracle(&window, t, c);
        let rel = if want == 0.0 { got.abs() } else { ((got - want) / want).abs() };
        worst = worst.max(rel);
    }
    let elapsed = t0.elapsed();
    verdict(
        2,
        "convergence rate matches direct evaluation",
        worst <= 1e-12 && elapsed < Duration::from_secs(5),
        &format!("max relative error {worst:.3e} (<= 1e-12) over 1000 windows, {elapsed:.2?} (< 5 s)"),
    );
}

#[test]
fn criterion_03_gradient_finite_differences() {
    let _g = serial();
    let arch = ModelArch::new(vec![4, 5, 3]).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let params = pv((0..arch.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect());
        let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
        let batch = Batch::new(rows.iter().map(Vec::as_slice).collect(), labels).unwrap();
        let (_, grad) = model::loss_and_grad(&params, &arch, &batch).unwrap();
        for i in 0..arch.param_count() {
            let shifted = |d: f64| {
                let mut p = params.clone().into_inner();
                p[i] += d;
                model::loss_and_grad(&pv(p), &arch, &batch).unwrap().0
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            // relative to the larger magnitude, floored so that exact zeros
            // (dead ReLU units) compare absolutely
            let scale = fd.abs().max(grad[i].abs()).max(1e-6);
            worst = worst.max((grad[i] - fd).abs() / scale);
            coords += 1;
        }
    }
    verdict(
        3,
        "analytic gradient matches central differences",
        worst <= 1e-4,
        &format!("max relative error {worst:.3e} (<= 1e-4) over {coords} coordinates, 20 seeds"),
    );
}

#[test]
fn criterion_04_baseline_convergence() {
    let _g = serial();
    let m = main_scenario();
    let acc = arm(&m.report, Arm::Baseline).final_accuracy();
    verdict(
        4,
        "baseline converges",
        acc >= 0.90 && m.baseline_time < Duration::from_secs(120),
        &format!("final accuracy {acc:.4} (>= 0.90), 200 rounds in {:.2?} (< 2 min)", m.baseline_time),
    );
}

#[test]
fn criterion_05_attack_effectiveness() {
    let _g = serial();
    let m = main_scenario();
    let base = arm(&m.report, Arm::Baseline).final_accuracy();
    let att = arm(&m.report, Arm::Attack).final_accuracy();
    let drop = 100.0 * (base - att);
    verdict(
        5,
        "untargeted attack degrades accuracy",
        drop >= 20.0,
        &format!("baseline {base:.4}, attack-only {att:.4}, drop {drop:.2} points (>= 20)"),
    );
}

#[test]
fn criterion_06_defense_recovery() {
    let _g = serial();
    let m = main_scenario();
    let base = arm(&m.report, Arm::Baseline);
    let att = arm(&m.report, Arm::Attack);
    let def = arm(&m.report, Arm::Defended);
    let gap = 100.0 * (base.final_accuracy() - def.final_accuracy());
    // rounds after warm-up in which the attack is under way
    let from = WARMUP.max(START);
    let window: Vec<usize> = (from..def.rounds.len()).collect();
    let above = window
        .iter()
        .filter(|&&t| def.rounds[t].global_accuracy > att.rounds[t].global_accuracy)
        .count();
    let share = above as f64 / window.len() as f64;
    verdict(
        6,
        "defense recovers accuracy",
        gap <= 5.0 && share >= 0.90,
        &format!(
            "defended {:.4} vs baseline {:.4} ({gap:.2} points, <= 5); above attack-only in {above}/{} rounds from {from} ({:.1}%, >= 90%)",
            def.final_accuracy(),
            base.final_accuracy(),
            window.len(),
            100.0 * share
        ),
    );
}

#[test]
fn criterion_07_detection_quality() {
    let _g = serial();
    let (mut recall, mut fpr) = (Vec::new(), Vec::new());
    for seed in 1..=5 {
        let run = if seed == 1 {
            arm(&main_scenario().report, Arm::Defended).clone()
        } else {
            let cfg = scenario(seed, 200, "", "");
            let data = experiment::build_data(&cfg).unwrap();
            experiment::run_arm(&cfg, &data, Arm::Defended).unwrap()
        };
        recall.push(attacker_rejection(&run.rounds, START + WINDOW));
        fpr.push(benign_false_rejection(&run.rounds, WARMUP));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (r, f) = (mean(&recall), mean(&fpr));
    verdict(
        7,
        "detection quality over 5 seeds",
        r >= 0.90 && f <= 0.05,
        &format!("attacker recall {r:.4} (>= 0.90), benign false rejection {f:.4} per round (<= 0.05); per seed recall {recall:.3?} fpr {fpr:.3?}"),
    );
}

#[test]
fn criterion_08_attack_stage() {
    let _g = serial();
    let mut parts = Vec::new();
    let mut pass = true;
    for start in [30, 130, 190] {
        let mut cfg = scenario(1, 250, "", "");
        cfg.attack.as_mut().unwrap().start_round = start;
        let report = experiment::run_experiment(&cfg, &[Arm::Attack, Arm::Defended]).unwrap();
        let a = arm(&report, Arm::Attack).final_accuracy();
        let d = arm(&report, Arm::Defended).final_accuracy();
        pass &= d > a;
        parts.push(format!("start {start}: defended {d:.4} vs attack-only {a:.4}"));
    }
    verdict(8, "defense helps at every attack stage", pass, &parts.join("; "));
}

#[test]
fn criterion_09_attack_patterns() {
    let _g = serial();
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, extra) in [
        ("static", "pattern = static"),
        ("pretence", "pattern = pretence\npretence_rounds = 50"),
        ("randomized", "pattern = randomized\nprobability = 0.5"),
    ] {
        let cfg = scenario(1, 200, extra, "");
        let report = experiment::run_experiment(&cfg, &[Arm::Attack, Arm::Defended]).unwrap();
        let uplift = report.summary.uplift_points.unwrap();
        pass &= uplift > 10.0;
        parts.push(format!("{name} uplift {uplift:.2} points"));
    }
    verdict(9, "defense helps under every attack pattern (> 10 points)", pass, &parts.join("; "));
}

#[test]
fn criterion_10_targeted_attack() {
    let _g = serial();
    let mut rates = Vec::new();
    for det in ["a1", "a2", "a3"] {
        let cfg = scenario(1, 200, "mode = targeted", &format!("detectors = {det}"));
        let data = experiment::build_data(&cfg).unwrap();
        let run = experiment::run_arm(&cfg, &data, Arm::Defended).unwrap();
        rates.push(attacker_rejection(&run.rounds, START + WINDOW));
    }
    let (a1, a2, a3) = (rates[0], rates[1], rates[2]);
    verdict(
        10,
        "targeted attack: a2 and a3 strong, a1 weak",
        a2 >= 0.70 && a3 >= 0.70 && a1 <= 0.30,
        &format!("post-window rejection a1-only {a1:.3} (<= 0.30), a2-only {a2:.3} (>= 0.70), a3-only {a3:.3} (>= 0.70)"),
    );
}

#[test]
fn criterion_11_scaling_and_overhead() {
    let _g = serial();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut overhead = None;
    for workers in [10usize, 20, 30, 40, 50] {
        let text = format!(
            "[task]\nkind = synthetic\nclasses = 10\ninput_dim = 784\nsamples_per_class = 150\ncluster_spread = 0.05\n\
             [model]\nhidden = 30\n[training]\nworkers = {workers}\nrounds = 12\nseed = 1\n[defense]\n"
        );
        let cfg = ScenarioConfig::parse(&text).unwrap();
        let report = experiment::run_experiment(&cfg, &[Arm::Baseline, Arm::Defended]).unwrap();
        let def = arm(&report, Arm::Defended);
        let mut per_round: Vec<f64> = def.rounds.iter().map(|r| r.defense_ms).collect();
        per_round.sort_by(f64::total_cmp);
        xs.push(workers as f64);
        ys.push(per_round[per_round.len() / 2]);
        if workers == 50 {
            overhead = report.summary.overhead_factor;
        }
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - (intercept + slope * x)).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = 1.0 - ss_res / ss_tot;
    let overhead = overhead.unwrap_or(f64::NAN);
    verdict(
        11,
        "50-worker run, linear defense cost",
        r2 >= 0.9 && overhead.is_finite(),
        &format!(
            "median defense ms/round {:?} for workers 10..50, linear fit R^2 {r2:.4} (>= 0.9), slope {slope:.3} ms/worker; 50-worker overhead factor {overhead:.3}",
            ys.iter().map(|y| (y * 10.0).round() / 10.0).collect::<Vec<_>>()
        ),
    );
}

/// Drops the wall-clock columns (`*_ms`, `overhead_factor`).
fn strip_clock(csv: &str) -> String {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let keep: Vec<usize> = (0..header.len())
        .filter(|&i| !header[i].ends_with("_ms") && header[i] != "overhead_factor")
        .collect();
    std::iter::once(header.join(","))
        .chain(lines.map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            keep.iter().map(|&i| f[i]).collect::<Vec<_>>().join(",")
        }))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn criterion_12_determinism() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario(9, 60, "pattern = randomized", "");
    let mut outputs = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("run{i}"));
        let report = experiment::run_experiment(&cfg, &Arm::ALL).unwrap();
        experiment::emit_csv(&report, &out).unwrap();
        let read = |name: &str| std::fs::read_to_string(out.join(name)).unwrap();
        outputs.push((
            strip_clock(&read("rounds.csv")),
            strip_clock(&read("summary.csv")),
            read("config.ini"),
            read("history.txt"),
        ));
    }
    let same = outputs[0] == outputs[1];
    verdict(
        12,
        "identical seeds give identical CSVs",
        same,
        &format!(
            "{} rounds.csv rows, summary, config and history {}",
            outputs[0].0.lines().count() - 1,
            if same { "byte-identical" } else { "differ" }
        ),
    );
}

#[test]
fn criterion_13_mnist() {
    let _g = serial();
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let files = [
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ];
    if !files.iter().all(|f| dir.join(f).exists()) {
        let _ = std::io::stdout().write_all(
            format!("criterion 13 SKIP: MNIST IDX files not found in {}\n", dir.display()).as_bytes(),
        );
        return;
    }
    let p = |f: &str| dir.join(f).display().to_string();
    let text = format!(
        "[task]\nkind = idx\ntrain_images = {}\ntrain_labels = {}\ntest_images = {}\ntest_labels = {}\n\
         [model]\nhidden = 30\n[training]\nworkers = 10\nrounds = 100\nlr = 0.05\nseed = 1\n\
         [attack]\nattackers = 0,1\ncollude = true\nmm_scale = 0.5\nstart_round = {START}\n\
         [defense]\nwarmup_rounds = {WARMUP}\nwindow_len = {WINDOW}\n",
        p(files[0]),
        p(files[1]),
        p(files[2]),
        p(files[3])
    );
    let cfg = ScenarioConfig::parse(&text).unwrap();
    let report = experiment::run_experiment(&cfg, &Arm::ALL).unwrap();
    let base = arm(&report, Arm::Baseline);
    let att = arm(&report, Arm::Attack);
    let def = arm(&report, Arm::Defended);
    let gap = 100.0 * (base.final_accuracy() - def.final_accuracy());
    let from = WARMUP.max(START);
    let span = def.rounds.len() - from;
    let above = (from..def.rounds.len())
        .filter(|&t| def.rounds[t].global_accuracy > att.rounds[t].global_accuracy)
        .count();
    verdict(
        13,
        "MNIST 784-30-10",
        base.final_accuracy() >= 0.90 && gap <= 5.0 && above as f64 >= 0.9 * span as f64,
        &format!(
            "baseline {:.4} (>= 0.90), attack-only {:.4}, defended {:.4} ({gap:.2} points below baseline, <= 5), above attack-only in {above}/{span} rounds",
            base.final_accuracy(),
            att.final_accuracy(),
            def.final_accuracy()
        ),
    );
}
