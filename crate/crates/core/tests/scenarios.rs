use std::fs;
use std::process::Command;

use adlab::delivery::{Audience, Bid, CreativeKind, Goal, Placements};
use adlab::scenarios::{
    effect_split, filter_ladder, load_config, preset, run_scenario, PopulationSpec, RunOptions, TestMetadata,
    TestOutcome,
};

fn outcome(test_id: usize, clicks: Vec<(u64, u64)>) -> TestOutcome {
    TestOutcome {
        test_id,
        metadata: TestMetadata {
            goals: vec![Goal::Awareness; 2],
            audiences: vec![Audience::everyone(); 2],
            daily_budgets: vec![100.0; 2],
            bids: vec![Bid::Auto; 2],
            creative_kinds: vec![CreativeKind::StaticImage; 2],
            creative_hashes: vec![1, 2],
            placements: vec![Placements::Auto; 2],
            frequency_caps: vec![Some(1); 2],
            impressions: clicks.iter().map(|c| c.1).collect(),
            reached_users: clicks.iter().map(|c| c.1).collect(),
        },
        comparisons: vec![],
        balance_error: None,
        lift: None,
        ab: None,
        clicks,
    }
}

#[test]
fn tripled_ctr_is_in_the_significant_stratum() {
    let strong = outcome(0, vec![(300, 10_000), (100, 10_000)]);
    let flat = outcome(1, vec![(100, 10_000), (101, 10_000)]);
    let split = effect_split(&[&strong, &flat]);
    assert_eq!(split.significant, vec![0]);
    assert_eq!(split.not_significant, vec![1]);
}

fn small(name: &str, seed: u64, n_tests: usize) -> adlab::scenarios::ScenarioConfig {
    let mut c = preset(name, seed).unwrap();
    c.population = PopulationSpec { n_users: 4000, dim: 8 };
    c.n_tests = n_tests;
    c
}

#[test]
fn ladder_rungs_never_grow() {
    let r = run_scenario(&small("ab_filter_ladder", 2, 40), RunOptions::default()).unwrap();
    let rungs = filter_ladder();
    let counts: Vec<usize> = rungs
        .iter()
        .map(|rung| r.outcomes.iter().filter(|o| o.decision(&rung.flags).keep).count())
        .collect();
    assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{counts:?}");
    for (rung, &n) in rungs.iter().zip(&counts) {
        if n > 0 {
            assert_eq!(r.row(&rung.name, "ALL").unwrap().n_tests, n, "{}", rung.name);
        }
    }
}

#[test]
fn config_files_round_trip_through_the_loader() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scenario.json");
    let c = small("lift_balance", 4, 3);
    fs::write(&path, serde_json::to_string_pretty(&c).unwrap()).unwrap();
    let loaded = load_config(path.to_str().unwrap(), None).unwrap();
    assert_eq!(loaded, c);
    let reseeded = load_config(path.to_str().unwrap(), Some(99)).unwrap();
    assert_eq!(reseeded.seed, 99);
    assert!(load_config("no_such_preset", None).is_err());
}

#[test]
fn cli_runs_a_config_and_writes_outputs() {
    let bin = env!("CARGO_BIN_EXE_adlab");
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, serde_json::to_string(&small("ab_restricted", 1, 3)).unwrap()).unwrap();
    let out = dir.path().join("out");
    let status = Command::new(bin)
        .args([
            "run",
            cfg.to_str().unwrap(),
            "--seed",
            "5",
            "--out",
            out.to_str().unwrap(),
            "--logs",
        ])
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    for f in ["balance_stats.csv", "pvalues.csv", "summary.json", "results.jsonl"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let header = fs::read_to_string(out.join("balance_stats.csv")).unwrap();
    assert!(header.starts_with("test_id,cell_pair,feature_id,kind,mean_a,mean_b,t,p,smd,goal"));

    let filters = Command::new(bin).args(["filters", "--explain"]).output().unwrap();
    assert!(String::from_utf8_lossy(&filters.stdout).contains("FREQ_RATIO_EXCEEDED"));
    let presets = Command::new(bin).arg("presets").output().unwrap();
    assert!(String::from_utf8_lossy(&presets.stdout).contains("gate_curve"));
    let bad = Command::new(bin)
        .args(["run", "nope", "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!bad.status.success());
}
