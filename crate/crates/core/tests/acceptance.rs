//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;

use adlab::assignment::{AllocationPlan, TestSalt, DEFAULT_PRIME};
use adlab::delivery::Goal;
use adlab::diagnostics::{FeatureKind, OBSERVABLE_T_GATE, SMD_THRESHOLD};
use adlab::experiments::{ab_winner, smallest_interval_90};
use adlab::rng::substream;
use adlab::scenarios::{preset, run_scenario, RunOptions, ScenarioReport, PRESETS};
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use tempfile::TempDir;

const SEED: u64 = 1;
const MASTER_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

const UNIFORMITY_USERS: u64 = 1_000_000;
const UNIFORMITY_BUCKETS: u32 = 1_000;
const UNIFORMITY_QUANTILE: f64 = 0.999;
const CONTINGENCY_CONDITIONS: usize = 10;
const CONTINGENCY_MIN_P: f64 = 0.001;

const LIFT_MIN_KS_P: f64 = 0.01;
const LIFT_MAX_SMD_PCT: f64 = 1.0;

const AB_MAX_KS_P: f64 = 0.001;
const AB_MIN_SMD_PCT: f64 = 10.0;

const ORDERING_RUNG: &str = "1-GOAL, AUDIENCE, & BUDGET";

const RESTRICTED_MIN_KS_P: f64 = 0.05;
const RESTRICTED_MIN_SEEDS: usize = 4;

const CPA_CELLS: [(f64, u64, u64); 2] = [(250.0, 60_000, 20), (180.0, 40_000, 30)];
const CPA_SIMS: usize = 10_000;
const CPA_SEEDS: u64 = 20;
const CPA_MIN_CONFIDENCE: f64 = 0.95;

const NULL_RATE: (f64, f64) = (0.05, 0.15);

const INTERVAL_DRAWS: usize = 100_000;
const INTERVAL_TOL: f64 = 0.05;
const NORMAL_Q95: f64 = 1.6448536269514722;

const GATE_NULL_LEVEL: f64 = 0.05;
const GATE_NULL_TOL: f64 = 0.03;
const GATE_MIN_BIN_N: usize = 5;
const GATE_Z: f64 = 1.96;

struct Gate {
    lines: Vec<(bool, String, String)>,
}

impl Gate {
    fn record(&mut self, name: &str, pass: bool, detail: String) {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.lines.push((pass, name.to_string(), detail));
    }
}

struct Run {
    report: ScenarioReport,
    dir: TempDir,
}

fn run_preset(name: &str, seed: u64) -> Run {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut c = preset(name, seed).expect("preset");
    c.output_dir = Some(dir.path().to_path_buf());
    let report = run_scenario(&c, RunOptions::default()).expect("scenario run");
    Run { report, dir }
}

fn assignment_uniformity(g: &mut Gate) {
    let plan = AllocationPlan::with_buckets(vec![("all".into(), 1.0)], UNIFORMITY_BUCKETS, DEFAULT_PRIME).unwrap();
    let mut counts = vec![0f64; UNIFORMITY_BUCKETS as usize];
    for u in 0..UNIFORMITY_USERS {
        counts[plan.bucket(u, TestSalt(0x5a17)) as usize] += 1.0;
    }
    let e = UNIFORMITY_USERS as f64 / UNIFORMITY_BUCKETS as f64;
    let chi2: f64 = counts.iter().map(|c| (c - e).powi(2) / e).sum();
    let df = (UNIFORMITY_BUCKETS - 1) as f64;
    let crit = ChiSquared::new(df).unwrap().inverse_cdf(UNIFORMITY_QUANTILE);

    let k = CONTINGENCY_CONDITIONS;
    let cplan = AllocationPlan::new((0..k).map(|i| (format!("c{i}"), 1.0 / k as f64)).collect()).unwrap();
    let mut table = vec![0f64; k * k];
    for u in 0..UNIFORMITY_USERS {
        table[cplan.assign(u, TestSalt(0x1001)) * k + cplan.assign(u, TestSalt(0x2002))] += 1.0;
    }
    let rows: Vec<f64> = (0..k).map(|i| table[i * k..(i + 1) * k].iter().sum()).collect();
    let cols: Vec<f64> = (0..k).map(|j| (0..k).map(|i| table[i * k + j]).sum()).collect();
    let n = UNIFORMITY_USERS as f64;
    let mut stat = 0.0;
    for i in 0..k {
        for j in 0..k {
            let e = rows[i] * cols[j] / n;
            stat += (table[i * k + j] - e).powi(2) / e;
        }
    }
    let p = 1.0 - ChiSquared::new(((k - 1) * (k - 1)) as f64).unwrap().cdf(stat);
    g.record(
        "assignment uniformity",
        chi2 < crit && p > CONTINGENCY_MIN_P,
        format!(
            "chi2={chi2:.1} < q{UNIFORMITY_QUANTILE}={crit:.1}; cross-salt contingency p={p:.4} > {CONTINGENCY_MIN_P}"
        ),
    );
}

fn lift_balance(g: &mut Gate, run: &Run) {
    let r = run
        .report
        .row("ALL", "ALL")
        .or_else(|| run.report.rows.first())
        .expect("summary row");
    let n_features = run
        .report
        .kept_outcomes()
        .first()
        .map_or(0, |t| t.comparisons[0].report.stats.len());
    g.record(
        "lift balance",
        r.ks_p > LIFT_MIN_KS_P && r.pct_smd_all <= LIFT_MAX_SMD_PCT,
        format!(
            "{} tests x {n_features} features: KS p={:.4} > {LIFT_MIN_KS_P}; |SMD|>{SMD_THRESHOLD} {:.3}% <= {LIFT_MAX_SMD_PCT}%",
            r.n_tests, r.ks_p, r.pct_smd_all
        ),
    );
}

fn ab_divergence(g: &mut Gate, run: &Run) {
    let r = run
        .report
        .row("ALL", "ALL")
        .or_else(|| run.report.rows.first())
        .expect("summary row");
    g.record(
        "A/B divergence",
        r.ks_p < AB_MAX_KS_P && r.pct_smd_all >= AB_MIN_SMD_PCT,
        format!(
            "{} tests: KS p={:.3e} < {AB_MAX_KS_P} (CvM p={:.3e}); |SMD|>{SMD_THRESHOLD} {:.2}% >= {AB_MIN_SMD_PCT}%",
            r.n_tests, r.ks_p, r.cvm_p, r.pct_smd_all
        ),
    );
}

fn goal_ordering(g: &mut Gate, first: &Run) {
    let mut details = Vec::new();
    let mut pass = true;
    for &seed in &MASTER_SEEDS {
        let owned;
        let report = if seed == SEED {
            &first.report
        } else {
            owned = run_preset("ab_filter_ladder", seed);
            &owned.report
        };
        let conv = report
            .row(ORDERING_RUNG, Goal::Conversion.as_str())
            .map(|r| r.pct_p_below_05);
        let aware = report
            .row(ORDERING_RUNG, Goal::Awareness.as_str())
            .map(|r| r.pct_p_below_05);
        match (conv, aware) {
            (Some(c), Some(a)) => {
                pass &= c > a;
                details.push(format!("seed {seed}: {c:.1}% vs {a:.1}%"));
            }
            _ => {
                pass = false;
                details.push(format!("seed {seed}: missing goal row"));
            }
        }
    }
    g.record(
        "goal ordering",
        pass,
        format!(
            "conversion vs awareness p<=0.05 at '{ORDERING_RUNG}': {}",
            details.join("; ")
        ),
    );
}

fn restricted(g: &mut Gate, first: &Run) {
    let mut ok = 0;
    let mut details = Vec::new();
    for &seed in &MASTER_SEEDS {
        let owned;
        let report = if seed == SEED {
            &first.report
        } else {
            owned = run_preset("ab_restricted", seed);
            &owned.report
        };
        let ks_p = report
            .row("ALL", "ALL")
            .or_else(|| report.rows.first())
            .map_or(0.0, |r| r.ks_p);
        let structured_exceed = report
            .kept_outcomes()
            .iter()
            .flat_map(|t| t.stats())
            .filter(|s| s.kind == FeatureKind::Structured && s.smd.abs() > SMD_THRESHOLD)
            .count();
        let seed_ok = ks_p > RESTRICTED_MIN_KS_P && structured_exceed == 0;
        ok += seed_ok as usize;
        details.push(format!(
            "seed {seed}: KS p={ks_p:.3}, structured exceed={structured_exceed}"
        ));
    }
    g.record(
        "restricted configuration",
        ok >= RESTRICTED_MIN_SEEDS,
        format!(
            "{ok}/{} seeds pass (need {RESTRICTED_MIN_SEEDS}): {}",
            MASTER_SEEDS.len(),
            details.join("; ")
        ),
    );
}

fn cpa_winner(g: &mut Gate) {
    let mut worst = 1.0f64;
    let mut pass = true;
    for seed in 0..CPA_SEEDS {
        let (w, conf) = ab_winner(&CPA_CELLS, CPA_SIMS, &mut substream(seed, 0)).unwrap();
        pass &= w == 1 && conf >= CPA_MIN_CONFIDENCE;
        worst = worst.min(conf);
    }
    g.record(
        "A/B CPA winner",
        pass,
        format!("winner B on {CPA_SEEDS} seeds, min confidence {worst:.4} >= {CPA_MIN_CONFIDENCE}"),
    );
}

fn aa_null(g: &mut Gate, run: &Run) {
    let cells: Vec<bool> = run
        .report
        .outcomes
        .iter()
        .filter_map(|t| t.lift.as_ref())
        .flat_map(|l| l.cells.iter().map(|c| c.conclusive))
        .collect();
    let rate = cells.iter().filter(|&&c| c).count() as f64 / cells.len().max(1) as f64;
    g.record(
        "A/A lift null",
        !cells.is_empty() && (NULL_RATE.0..=NULL_RATE.1).contains(&rate),
        format!(
            "{} tests, conclusive-positive rate {:.3} in [{}, {}]",
            cells.len(),
            rate,
            NULL_RATE.0,
            NULL_RATE.1
        ),
    );
}

fn statistics_oracles(g: &mut Gate) {
    let e = common::oracle_errors(&common::reference());
    let worst = [e.welch_t, e.welch_p, e.smd, e.ks_d, e.ks_p, e.cvm_omega, e.cvm_p];
    let max_err = worst.iter().cloned().fold(0.0, f64::max);
    let mut rng = substream(SEED, 7);
    let xs: Vec<f64> = (0..INTERVAL_DRAWS).map(|_| StandardNormal.sample(&mut rng)).collect();
    let (lo, hi) = smallest_interval_90(&xs).unwrap();
    let interval_ok = (lo + NORMAL_Q95).abs() <= INTERVAL_TOL && (hi - NORMAL_Q95).abs() <= INTERVAL_TOL;
    g.record(
        "statistics oracles",
        max_err < common::ORACLE_TOL && interval_ok,
        format!(
            "max fixture error {max_err:.2e} < {:.0e}; 90% interval ({lo:.4}, {hi:.4}) within {INTERVAL_TOL} of +-{NORMAL_Q95:.4}",
            common::ORACLE_TOL
        ),
    );
}

fn gate_curve(g: &mut Gate, run: &Run) {
    let bins = run.report.gate_curve.clone().unwrap_or_default();
    let mut below_ok = true;
    let mut below = Vec::new();
    for b in bins
        .iter()
        .filter(|b| b.hi <= OBSERVABLE_T_GATE && b.n >= GATE_MIN_BIN_N)
    {
        let m = b.mean.unwrap_or(f64::NAN);
        below_ok &= (m - GATE_NULL_LEVEL).abs() <= GATE_NULL_TOL;
        below.push(format!("{m:.3}"));
    }
    let above: Vec<f64> = run
        .report
        .gate_points()
        .into_iter()
        .filter(|(t, _)| *t > OBSERVABLE_T_GATE)
        .map(|(_, f)| f)
        .collect();
    let n = above.len() as f64;
    let mean = above.iter().sum::<f64>() / n;
    let sd = (above.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let lower = mean - GATE_Z * sd / n.sqrt();
    g.record(
        "gate curve",
        !below.is_empty() && below_ok && above.len() >= 2 && lower > GATE_NULL_LEVEL,
        format!(
            "bins below {OBSERVABLE_T_GATE} (n>={GATE_MIN_BIN_N}) [{}] within {GATE_NULL_TOL} of {GATE_NULL_LEVEL}; beyond: n={} mean {mean:.3}, lower bound {lower:.3} > {GATE_NULL_LEVEL}",
            below.join(", "),
            above.len()
        ),
    );
}

fn csv_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "csv") {
            out.insert(
                path.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&path).unwrap(),
            );
        }
    }
    out
}

fn determinism(g: &mut Gate, first: &BTreeMap<&str, Run>) {
    let mut mismatched: Vec<&str> = Vec::new();
    let mut n_files = 0;
    for name in PRESETS {
        let a = csv_files(first[name].dir.path());
        let b = csv_files(run_preset(name, SEED).dir.path());
        n_files += a.len();
        if a.is_empty() || a != b {
            mismatched.push(name);
        }
    }
    g.record(
        "determinism",
        mismatched.is_empty(),
        format!(
            "{} presets, {n_files} CSVs byte-identical on rerun; mismatched: {mismatched:?}",
            PRESETS.len()
        ),
    );
}

fn main() -> ExitCode {
    let mut g = Gate { lines: Vec::new() };
    assignment_uniformity(&mut g);
    cpa_winner(&mut g);
    statistics_oracles(&mut g);

    let runs: BTreeMap<&str, Run> = PRESETS.iter().map(|&p| (p, run_preset(p, SEED))).collect();
    lift_balance(&mut g, &runs["lift_balance"]);
    ab_divergence(&mut g, &runs["ab_full"]);
    goal_ordering(&mut g, &runs["ab_filter_ladder"]);
    restricted(&mut g, &runs["ab_restricted"]);
    aa_null(&mut g, &runs["lift_null"]);
    gate_curve(&mut g, &runs["gate_curve"]);
    determinism(&mut g, &runs);

    let failed = g.lines.iter().filter(|l| !l.0).count();
    println!("acceptance: {} passed, {failed} failed", g.lines.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
