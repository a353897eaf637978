//! Config-driven scenario runner: simulates batches of Lift or A/B tests
//! with randomized campaign configurations, filters them, computes balance
//! diagnostics and writes the report files.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::TestSalt;
use crate::delivery::{
    write_exposures_csv, Audience, BackgroundPool, Bid, CampaignConfig, Creative, CreativeKind, Goal, Placement,
    Placements, RelevanceMode, Schedule, WorldConfig,
};
use crate::diagnostics::{
    balance_report, binned_gate_curve, observable_gate, two_proportion_test, BalanceReport, BalanceStat, FeatureKind,
    GateBin, GateResult, UniformitySummary, P_THRESHOLD,
};
use crate::error::{invalid, Error, Result};
use crate::experiments::{
    ab_result, lift_result, run_ab_test, run_lift_test, ABCell, ABResult, ABTestSpec, LiftCell, LiftResult,
    LiftTestSpec, CONTROL_LABEL, DEFAULT_DRAWS, TEST_LABEL,
};
use crate::population::{generate_population, PopulationConfig, ResponseModel, UserProfile, DEFAULT_DIM};
use crate::rng::{derive_seed, substream};

pub const DEFAULT_FREQ_RATIO_MAX: f64 = 1.037;
pub const DEFAULT_MIN_IMPRESSIONS: u64 = 30;
pub const DEFAULT_USERS: usize = 10_000;
pub const DEFAULT_GATE_BINS: usize = 20;

pub const PRESETS: [&str; 8] = [
    "lift_balance",
    "lift_null",
    "ab_full",
    "ab_filter_ladder",
    "ab_restricted",
    "case_study_5cell",
    "effect_split",
    "gate_curve",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TestKind {
    Lift,
    Ab,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub n_users: usize,
    pub dim: usize,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        PopulationSpec {
            n_users: DEFAULT_USERS,
            dim: DEFAULT_DIM,
        }
    }
}

/// Choice sets and ranges from which each test draws its cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CellTemplate {
    pub goals: Vec<Goal>,
    pub audiences: Vec<Audience>,
    pub daily_budget: (f64, f64),
    /// Fixed bids are the goal's reference bid times a draw from this range.
    pub bid_multiplier: (f64, f64),
    pub auto_bid_prob: f64,
    pub placements: Vec<Placements>,
    pub frequency_caps: Vec<Option<u32>>,
    pub creative_kinds: Vec<CreativeKind>,
    /// Creative vectors are standard normal times a draw from this range.
    pub creative_scale: (f64, f64),
}

impl Default for CellTemplate {
    fn default() -> Self {
        CellTemplate {
            goals: vec![Goal::Awareness],
            audiences: vec![Audience::everyone()],
            daily_budget: (1e6, 1e6),
            bid_multiplier: (1.0, 1.0),
            auto_bid_prob: 0.0,
            placements: vec![Placements::Auto],
            frequency_caps: vec![None],
            creative_kinds: vec![CreativeKind::StaticImage],
            creative_scale: (1.0, 1.0),
        }
    }
}

/// Per-test probability that an attribute is drawn separately for every
/// cell instead of once for the whole test.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Variation {
    pub goal: f64,
    pub audience: f64,
    pub budget_bid: f64,
    pub placements: f64,
    pub frequency_cap: f64,
    pub creative_kind: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestTemplate {
    pub kind: TestKind,
    pub n_cells: usize,
    #[serde(default)]
    pub cell: CellTemplate,
    #[serde(default)]
    pub vary: Variation,
    /// All cells share one creative vector.
    #[serde(default)]
    pub identical_creatives: bool,
    /// Exposed share of each Lift cell.
    #[serde(default = "half")]
    pub test_fraction: f64,
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterFlags {
    pub same_goal: bool,
    pub same_audience_budget_bid: bool,
    pub static_image_distinct: bool,
    /// Maximum impressions per reached user in every cell.
    pub freq_ratio_max: Option<f64>,
    pub min_impressions_per_cell: Option<u64>,
}

impl Default for FilterFlags {
    fn default() -> Self {
        FilterFlags {
            same_goal: false,
            same_audience_budget_bid: false,
            static_image_distinct: false,
            freq_ratio_max: None,
            min_impressions_per_cell: Some(DEFAULT_MIN_IMPRESSIONS),
        }
    }
}

impl FilterFlags {
    pub fn none() -> Self {
        FilterFlags {
            min_impressions_per_cell: None,
            ..FilterFlags::default()
        }
    }

    /// Every filter on, at default thresholds.
    pub fn restricted() -> Self {
        FilterFlags {
            same_goal: true,
            same_audience_budget_bid: true,
            static_image_distinct: true,
            freq_ratio_max: Some(DEFAULT_FREQ_RATIO_MAX),
            min_impressions_per_cell: Some(DEFAULT_MIN_IMPRESSIONS),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.freq_ratio_max {
            if r.is_nan() || r < 1.0 {
                return Err(invalid("freq_ratio_max must be at least 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSettings {
    pub horizon_slots: u32,
    pub slots_per_day: u32,
    pub relevance_mode: RelevanceMode,
    pub pacing_interval: u32,
    pub background: BackgroundPool,
    /// Overrides the response model's exposure effect; 0 makes ads inert.
    pub exposure_effect: Option<f64>,
}

impl Default for WorldSettings {
    fn default() -> Self {
        let w = WorldConfig::default();
        WorldSettings {
            horizon_slots: w.horizon_slots,
            slots_per_day: w.slots_per_day,
            relevance_mode: w.relevance_mode,
            pacing_interval: w.pacing_interval,
            background: w.background,
            exposure_effect: None,
        }
    }
}

impl WorldSettings {
    fn world(&self, seed: u64) -> WorldConfig {
        WorldConfig {
            horizon_slots: self.horizon_slots,
            slots_per_day: self.slots_per_day,
            background: self.background,
            relevance_mode: self.relevance_mode,
            pacing_interval: self.pacing_interval,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE", tag = "type")]
pub enum Analysis {
    #[default]
    Standard,
    /// Summaries at each rung of the filter ladder, by goal.
    FilterLadder,
    /// Summaries split by CTR significance between the first two cells.
    EffectSplit,
    GateCurve {
        n_bins: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub population: PopulationSpec,
    pub n_tests: usize,
    pub template: TestTemplate,
    #[serde(default)]
    pub filters: FilterFlags,
    #[serde(default)]
    pub world: WorldSettings,
    #[serde(default)]
    pub analysis: Analysis,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.template;
        if self.n_tests == 0 {
            return Err(invalid("n_tests must be at least 1"));
        }
        if self.population.n_users == 0 || self.population.dim < 2 {
            return Err(invalid("population needs users and at least 2 embedding dimensions"));
        }
        match t.kind {
            TestKind::Lift if t.n_cells == 0 => return Err(invalid("lift tests need a cell")),
            TestKind::Ab if t.n_cells < 2 => return Err(invalid("A/B tests need at least two cells")),
            _ => {}
        }
        let c = &t.cell;
        if c.goals.is_empty()
            || c.audiences.is_empty()
            || c.placements.is_empty()
            || c.frequency_caps.is_empty()
            || c.creative_kinds.is_empty()
        {
            return Err(invalid("cell template choice lists must be nonempty"));
        }
        for (lo, hi) in [c.daily_budget, c.bid_multiplier, c.creative_scale] {
            if !(lo <= hi && lo >= 0.0 && hi.is_finite()) {
                return Err(invalid(format!("bad range ({lo}, {hi})")));
            }
        }
        if c.bid_multiplier.0 <= 0.0 {
            return Err(invalid("bid multipliers must be positive"));
        }
        let v = &t.vary;
        let probs = [
            c.auto_bid_prob,
            v.goal,
            v.audience,
            v.budget_bid,
            v.placements,
            v.frequency_cap,
            v.creative_kind,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(invalid("probabilities must lie in [0, 1]"));
        }
        if let Analysis::GateCurve { n_bins } = self.analysis {
            if n_bins == 0 {
                return Err(invalid("gate curve needs at least one bin"));
            }
        }
        self.filters.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FilterReason {
    GoalMismatch,
    AudienceBudgetBidMismatch,
    NotStaticImage,
    CreativeNotDistinct,
    FreqRatioExceeded,
    LowImpressions,
    /// Balance statistics could not be computed.
    InsufficientRows,
}

impl FilterReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FilterReason::GoalMismatch => "GOAL_MISMATCH",
            FilterReason::AudienceBudgetBidMismatch => "AUDIENCE_BUDGET_BID_MISMATCH",
            FilterReason::NotStaticImage => "NOT_STATIC_IMAGE",
            FilterReason::CreativeNotDistinct => "CREATIVE_NOT_DISTINCT",
            FilterReason::FreqRatioExceeded => "FREQ_RATIO_EXCEEDED",
            FilterReason::LowImpressions => "LOW_IMPRESSIONS",
            FilterReason::InsufficientRows => "INSUFFICIENT_ROWS",
        }
    }

    pub fn explain(self) -> &'static str {
        match self {
            FilterReason::GoalMismatch => "cells optimize for different goals (same_goal)",
            FilterReason::AudienceBudgetBidMismatch => {
                "cells differ in target audience, daily budget or bid (same_audience_budget_bid)"
            }
            FilterReason::NotStaticImage => "some cell uses a non-static-image creative (static_image_distinct)",
            FilterReason::CreativeNotDistinct => "two cells share a creative hash (static_image_distinct)",
            FilterReason::FreqRatioExceeded => "impressions per reached user above freq_ratio_max in some cell",
            FilterReason::LowImpressions => "fewer than min_impressions_per_cell impressions in some cell",
            FilterReason::InsufficientRows => "balance statistics need at least two rows per group",
        }
    }

    pub const ALL: [FilterReason; 7] = [
        FilterReason::GoalMismatch,
        FilterReason::AudienceBudgetBidMismatch,
        FilterReason::NotStaticImage,
        FilterReason::CreativeNotDistinct,
        FilterReason::FreqRatioExceeded,
        FilterReason::LowImpressions,
        FilterReason::InsufficientRows,
    ];
}

/// Configuration and delivery facts of one simulated test, one entry per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestMetadata {
    pub goals: Vec<Goal>,
    pub audiences: Vec<Audience>,
    pub daily_budgets: Vec<f64>,
    pub bids: Vec<Bid>,
    pub creative_kinds: Vec<CreativeKind>,
    pub creative_hashes: Vec<u64>,
    pub placements: Vec<Placements>,
    pub frequency_caps: Vec<Option<u32>>,
    pub impressions: Vec<u64>,
    pub reached_users: Vec<u64>,
}

impl TestMetadata {
    /// The shared goal, or `MIXED`.
    pub fn goal_label(&self) -> &'static str {
        match self.goals.first() {
            Some(g) if self.goals.iter().all(|x| x == g) => g.as_str(),
            _ => "MIXED",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub keep: bool,
    pub reasons: Vec<FilterReason>,
}

fn all_equal<T: PartialEq>(v: &[T]) -> bool {
    v.windows(2).all(|w| w[0] == w[1])
}

pub fn apply_filters(meta: &TestMetadata, flags: &FilterFlags) -> FilterDecision {
    let mut reasons = Vec::new();
    if flags.same_goal && !all_equal(&meta.goals) {
        reasons.push(FilterReason::GoalMismatch);
    }
    if flags.same_audience_budget_bid
        && !(all_equal(&meta.audiences) && all_equal(&meta.daily_budgets) && all_equal(&meta.bids))
    {
        reasons.push(FilterReason::AudienceBudgetBidMismatch);
    }
    if flags.static_image_distinct {
        if meta.creative_kinds.iter().any(|k| *k != CreativeKind::StaticImage) {
            reasons.push(FilterReason::NotStaticImage);
        }
        let mut hashes = meta.creative_hashes.clone();
        hashes.sort_unstable();
        hashes.dedup();
        if hashes.len() != meta.creative_hashes.len() {
            reasons.push(FilterReason::CreativeNotDistinct);
        }
    }
    if let Some(max) = flags.freq_ratio_max {
        let exceeded = meta
            .impressions
            .iter()
            .zip(&meta.reached_users)
            .any(|(&i, &u)| u > 0 && i as f64 / u as f64 > max);
        if exceeded {
            reasons.push(FilterReason::FreqRatioExceeded);
        }
    }
    if let Some(min) = flags.min_impressions_per_cell {
        if meta.impressions.iter().any(|&i| i < min) {
            reasons.push(FilterReason::LowImpressions);
        }
    }
    FilterDecision {
        keep: reasons.is_empty(),
        reasons,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub cell_pair: String,
    pub report: BalanceReport,
    pub gate: Option<GateResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub test_id: usize,
    pub metadata: TestMetadata,
    pub comparisons: Vec<Comparison>,
    /// Why balance statistics are missing, if they are.
    pub balance_error: Option<String>,
    pub lift: Option<LiftResult>,
    pub ab: Option<ABResult>,
    /// Clicks and impressions of every cell (A/B only).
    pub clicks: Vec<(u64, u64)>,
}

impl TestOutcome {
    pub fn stats(&self) -> impl Iterator<Item = &BalanceStat> {
        self.comparisons.iter().flat_map(|c| c.report.stats.iter())
    }

    /// Filter decision including the balance-availability check.
    pub fn decision(&self, flags: &FilterFlags) -> FilterDecision {
        let mut d = apply_filters(&self.metadata, flags);
        if self.comparisons.is_empty() {
            d.reasons.push(FilterReason::InsufficientRows);
            d.keep = false;
        }
        d
    }

    /// Two-proportion CTR test between the first two cells.
    pub fn ctr_test(&self) -> Option<(f64, f64)> {
        match self.clicks.as_slice() {
            [(ca, na), (cb, nb), ..] => two_proportion_test(*ca, *na, *cb, *nb).ok(),
            _ => None,
        }
    }
}

fn uniform_in<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn pick<'a, T, R: Rng + ?Sized>(rng: &mut R, v: &'a [T]) -> &'a T {
    v.choose(rng).expect("nonempty choice list")
}

#[derive(Clone)]
struct CellDraw {
    goal: Goal,
    audience: Audience,
    budget: f64,
    bid_mult: Option<f64>,
    placements: Placements,
    cap: Option<u32>,
    kind: CreativeKind,
}

fn draw_cell<R: Rng + ?Sized>(t: &CellTemplate, rng: &mut R) -> CellDraw {
    CellDraw {
        goal: *pick(rng, &t.goals),
        audience: pick(rng, &t.audiences).clone(),
        budget: uniform_in(rng, t.daily_budget),
        bid_mult: if rng.random_bool(t.auto_bid_prob) {
            None
        } else {
            Some(uniform_in(rng, t.bid_multiplier))
        },
        placements: pick(rng, &t.placements).clone(),
        cap: *pick(rng, &t.frequency_caps),
        kind: *pick(rng, &t.creative_kinds),
    }
}

/// Campaigns of one test, one per cell.
pub fn draw_test_campaigns<R: Rng + ?Sized>(template: &TestTemplate, dim: usize, rng: &mut R) -> Vec<CampaignConfig> {
    let shared = draw_cell(&template.cell, rng);
    let v = template.vary;
    let vary = [
        rng.random_bool(v.goal),
        rng.random_bool(v.audience),
        rng.random_bool(v.budget_bid),
        rng.random_bool(v.placements),
        rng.random_bool(v.frequency_cap),
        rng.random_bool(v.creative_kind),
    ];
    let scale = uniform_in(rng, template.cell.creative_scale);
    let base_vector: Vec<f64> = Creative::random(CreativeKind::StaticImage, dim, rng)
        .vector
        .iter()
        .map(|x| x * scale)
        .collect();
    (0..template.n_cells)
        .map(|k| {
            let own = draw_cell(&template.cell, rng);
            let c = |on: bool| if on { &own } else { &shared };
            let goal = c(vary[0]).goal;
            let bid = match c(vary[2]).bid_mult {
                Some(m) => Bid::Fixed(goal.reference_bid() * m),
                None => Bid::Auto,
            };
            let vector = if template.identical_creatives {
                base_vector.clone()
            } else {
                Creative::random(CreativeKind::StaticImage, dim, rng)
                    .vector
                    .iter()
                    .map(|x| x * scale)
                    .collect()
            };
            CampaignConfig {
                campaign_id: 100 + k as u32,
                goal,
                audience: c(vary[1]).audience.clone(),
                daily_budget: c(vary[2]).budget,
                bid,
                placements: c(vary[3]).placements.clone(),
                schedule: Schedule::Always,
                frequency_cap: c(vary[4]).cap,
                creative: Creative::new(c(vary[5]).kind, vector),
            }
        })
        .collect()
}

fn metadata(campaigns: &[CampaignConfig], impressions: Vec<u64>, reached: Vec<u64>) -> TestMetadata {
    TestMetadata {
        goals: campaigns.iter().map(|c| c.goal).collect(),
        audiences: campaigns.iter().map(|c| c.audience.clone()).collect(),
        daily_budgets: campaigns.iter().map(|c| c.daily_budget).collect(),
        bids: campaigns.iter().map(|c| c.bid).collect(),
        creative_kinds: campaigns.iter().map(|c| c.creative.kind).collect(),
        creative_hashes: campaigns.iter().map(|c| c.creative.hash).collect(),
        placements: campaigns.iter().map(|c| c.placements.clone()).collect(),
        frequency_caps: campaigns.iter().map(|c| c.frequency_cap).collect(),
        impressions,
        reached_users: reached,
    }
}

/// Simulated population and response model shared by a scenario's tests.
pub struct ScenarioWorld {
    pub users: Vec<UserProfile>,
    pub model: ResponseModel,
}

impl ScenarioWorld {
    pub fn new(config: &ScenarioConfig) -> Result<Self> {
        let seed = derive_seed(config.seed, u64::MAX);
        let p = config.population;
        let users = generate_population(&PopulationConfig::standard(p.n_users, p.dim, seed))?;
        let mut model = ResponseModel::standard(p.dim, seed);
        if let Some(e) = config.world.exposure_effect {
            model.exposure_effect = e;
        }
        model.validate()?;
        Ok(ScenarioWorld { users, model })
    }
}

/// Exposure log of one test, kept only when requested.
pub type ExposureLog = Vec<crate::delivery::Exposure>;

pub fn run_test(
    config: &ScenarioConfig,
    world: &ScenarioWorld,
    test_id: usize,
) -> Result<(TestOutcome, ExposureLog, Vec<String>)> {
    let seed = derive_seed(config.seed, test_id as u64);
    let mut rng: ChaCha8Rng = substream(seed, 0);
    let t = &config.template;
    let dim = config.population.dim;
    let campaigns = draw_test_campaigns(t, dim, &mut rng);
    let salt = TestSalt::random(&mut rng);
    let wc = config.world.world(derive_seed(seed, 1));
    let mut post_rng = substream(seed, 2);
    let users = &world.users;
    match t.kind {
        TestKind::Lift => {
            let share = 1.0 / t.n_cells as f64;
            let spec = LiftTestSpec {
                cells: campaigns
                    .iter()
                    .enumerate()
                    .map(|(k, c)| LiftCell {
                        cell_id: k as u32 + 1,
                        config: c.clone(),
                        proportion: share,
                        test_fraction: t.test_fraction,
                    })
                    .collect(),
                salt,
            };
            let run = run_lift_test(&spec, users, &world.model, wc)?;
            let mut impressions = vec![0u64; t.n_cells];
            let mut reached = vec![0u64; t.n_cells];
            for e in &run.exposures {
                impressions[e.cell_id as usize - 1] += 1;
            }
            for (u, m) in run.membership.iter().enumerate() {
                if let (Some(m), Some(_)) = (m, run.first_reach[u]) {
                    if !m.holdout {
                        reached[m.cell] += 1;
                    }
                }
            }
            let mut comparisons = Vec::new();
            let mut balance_error = None;
            for k in 0..t.n_cells {
                let m = run.feature_matrix(users, k)?;
                match balance_report(&m, (TEST_LABEL, CONTROL_LABEL)) {
                    Ok(report) => comparisons.push(Comparison {
                        cell_pair: format!("{}:test-control", k + 1),
                        gate: observable_gate(&report).ok(),
                        report,
                    }),
                    Err(e) => balance_error = Some(e.to_string()),
                }
            }
            if balance_error.is_some() {
                comparisons.clear();
            }
            let mut lift = lift_result(&run, DEFAULT_DRAWS, &mut post_rng)?;
            lift.strip_samples();
            let labels = run
                .exposures
                .iter()
                .map(|e| {
                    if run.membership[e.user].is_some_and(|m| m.holdout) {
                        "control".to_string()
                    } else {
                        "test".to_string()
                    }
                })
                .collect();
            Ok((
                TestOutcome {
                    test_id,
                    metadata: metadata(&campaigns, impressions, reached),
                    comparisons,
                    balance_error,
                    lift: Some(lift),
                    ab: None,
                    clicks: Vec::new(),
                },
                run.exposures,
                labels,
            ))
        }
        TestKind::Ab => {
            let share = 1.0 / t.n_cells as f64;
            let spec = ABTestSpec {
                cells: campaigns
                    .iter()
                    .enumerate()
                    .map(|(k, c)| ABCell {
                        cell_id: k as u32 + 1,
                        config: c.clone(),
                        proportion: share,
                    })
                    .collect(),
                salt,
            };
            let run = run_ab_test(&spec, users, &world.model, wc)?;
            let m = run.feature_matrix(users)?;
            let mut comparisons = Vec::new();
            let mut balance_error = None;
            'pairs: for a in 0..t.n_cells {
                for b in a + 1..t.n_cells {
                    match balance_report(&m, (a as u32, b as u32)) {
                        Ok(report) => comparisons.push(Comparison {
                            cell_pair: format!("{}-{}", a + 1, b + 1),
                            gate: observable_gate(&report).ok(),
                            report,
                        }),
                        Err(e) => {
                            balance_error = Some(e.to_string());
                            comparisons.clear();
                            break 'pairs;
                        }
                    }
                }
            }
            let ab = ab_result(&run, DEFAULT_DRAWS, &mut post_rng)?;
            let labels = run.exposures.iter().map(|e| e.cell_id.to_string()).collect();
            Ok((
                TestOutcome {
                    test_id,
                    metadata: metadata(
                        &campaigns,
                        run.cells.iter().map(|c| c.impressions).collect(),
                        run.cells.iter().map(|c| c.reached_users).collect(),
                    ),
                    comparisons,
                    balance_error,
                    lift: None,
                    clicks: run.cells.iter().map(|c| (c.clicks, c.impressions)).collect(),
                    ab: Some(ab),
                },
                run.exposures,
                labels,
            ))
        }
    }
}

/// One row of the uniformity and exceedance tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    #[serde(rename = "Sub-Sample Criteria")]
    pub subsample: String,
    #[serde(rename = "Sub-Sample (N)")]
    pub n_tests: usize,
    #[serde(rename = "Optimization Goal")]
    pub goal: String,
    #[serde(rename = "P-Values")]
    pub n_pvalues: usize,
    #[serde(rename = "KS Test (D)")]
    pub ks_d: f64,
    #[serde(rename = "KS p")]
    pub ks_p: f64,
    #[serde(rename = "CvM Test (Omega)")]
    pub cvm_omega: f64,
    #[serde(rename = "CvM p")]
    pub cvm_p: f64,
    #[serde(rename = "% p <= 0.05")]
    pub pct_p_below_05: f64,
    #[serde(rename = "All Features")]
    pub pct_smd_all: f64,
    #[serde(rename = "Embedding Dimensions")]
    pub pct_smd_embedding: Option<f64>,
    #[serde(rename = "Structured Features")]
    pub pct_smd_structured: Option<f64>,
    #[serde(skip)]
    pub overall: Option<UniformitySummary>,
}

fn summary_row(subsample: &str, goal: &str, tests: &[&TestOutcome]) -> Option<SummaryRow> {
    let stats: Vec<&BalanceStat> = tests.iter().flat_map(|t| t.stats()).collect();
    if stats.is_empty() {
        return None;
    }
    let overall = UniformitySummary::from_stats(stats.iter().copied()).ok()?;
    let pct_of = |k: FeatureKind| {
        let sel: Vec<&BalanceStat> = stats.iter().copied().filter(|s| s.kind == k).collect();
        (!sel.is_empty()).then(|| {
            100.0
                * sel
                    .iter()
                    .filter(|s| s.smd.abs() > crate::diagnostics::SMD_THRESHOLD)
                    .count() as f64
                / sel.len() as f64
        })
    };
    Some(SummaryRow {
        subsample: subsample.to_string(),
        n_tests: tests.len(),
        goal: goal.to_string(),
        n_pvalues: overall.n_stats,
        ks_d: overall.ks_d,
        ks_p: overall.ks_p,
        cvm_omega: overall.cvm_omega,
        cvm_p: overall.cvm_p,
        pct_p_below_05: 100.0 * overall.frac_p_below_05,
        pct_smd_all: 100.0 * overall.frac_abs_smd_above_020,
        pct_smd_embedding: pct_of(FeatureKind::Embedding),
        pct_smd_structured: pct_of(FeatureKind::Structured),
        overall: Some(overall),
    })
}

/// Rows for `ALL` goals plus one per goal present.
fn rows_by_goal(subsample: &str, tests: &[&TestOutcome]) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = summary_row(subsample, "ALL", tests).into_iter().collect();
    let mut goals: BTreeMap<&str, Vec<&TestOutcome>> = BTreeMap::new();
    for t in tests {
        goals.entry(t.metadata.goal_label()).or_default().push(t);
    }
    if goals.len() > 1 {
        for (g, ts) in &goals {
            rows.extend(summary_row(subsample, g, ts));
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rung {
    pub name: String,
    pub flags: FilterFlags,
}

/// Cumulative filters of the A/B ladder.
pub fn filter_ladder() -> Vec<Rung> {
    let base = FilterFlags::default();
    let goal = FilterFlags {
        same_goal: true,
        ..base
    };
    let audience = FilterFlags {
        same_audience_budget_bid: true,
        ..goal
    };
    let image = FilterFlags::restricted();
    vec![
        Rung {
            name: "ALL".into(),
            flags: base,
        },
        Rung {
            name: "1-GOAL".into(),
            flags: goal,
        },
        Rung {
            name: "1-GOAL, AUDIENCE, & BUDGET".into(),
            flags: audience,
        },
        Rung {
            name: "ABOVE + IMAGE & FREQUENCY".into(),
            flags: image,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSplit {
    pub significant: Vec<usize>,
    pub not_significant: Vec<usize>,
    pub significant_summary: Option<UniformitySummary>,
    pub not_significant_summary: Option<UniformitySummary>,
}

pub const CTR_SIGNIFICANT: &str = "CTR_SIGNIFICANT";
pub const CTR_NOT_SIGNIFICANT: &str = "CTR_NOT_SIGNIFICANT";

/// Split tests by a two-proportion CTR test at the 5% level and summarize
/// balance within each stratum.
pub fn effect_split(tests: &[&TestOutcome]) -> EffectSplit {
    let mut sig = Vec::new();
    let mut not = Vec::new();
    for t in tests {
        match t.ctr_test() {
            Some((_, p)) if p <= P_THRESHOLD => sig.push(*t),
            Some(_) => not.push(*t),
            None => {}
        }
    }
    let summarize = |ts: &[&TestOutcome]| {
        let stats: Vec<&BalanceStat> = ts.iter().flat_map(|t| t.stats()).collect();
        UniformitySummary::from_stats(stats).ok()
    };
    EffectSplit {
        significant: sig.iter().map(|t| t.test_id).collect(),
        not_significant: not.iter().map(|t| t.test_id).collect(),
        significant_summary: summarize(&sig),
        not_significant_summary: summarize(&not),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub seed: u64,
    pub n_tests_simulated: usize,
    pub n_tests_kept: usize,
    pub dropped: BTreeMap<String, usize>,
    pub rows: Vec<SummaryRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub effect_split: Option<EffectSplit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate_curve: Option<Vec<GateBin>>,
    #[serde(skip)]
    pub outcomes: Vec<TestOutcome>,
    #[serde(skip)]
    pub kept: Vec<usize>,
}

impl ScenarioReport {
    pub fn kept_outcomes(&self) -> Vec<&TestOutcome> {
        self.kept.iter().map(|&i| &self.outcomes[i]).collect()
    }

    pub fn row(&self, subsample: &str, goal: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.subsample == subsample && r.goal == goal)
    }

    /// `(max_t_obs, frac_unobs_sig)` over kept comparisons with a gate.
    pub fn gate_points(&self) -> Vec<(f64, f64)> {
        self.kept_outcomes()
            .iter()
            .flat_map(|t| t.comparisons.iter())
            .filter_map(|c| c.gate)
            .map(|g| (g.max_t_obs, g.frac_unobs_sig))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Write per-test exposure logs.
    pub logs: bool,
}

/// Simulate, filter and summarize; writes files when `output_dir` is set.
pub fn run_scenario(config: &ScenarioConfig, options: RunOptions) -> Result<ScenarioReport> {
    config.validate()?;
    let world = ScenarioWorld::new(config)?;
    let results: Vec<(TestOutcome, ExposureLog, Vec<String>)> = (0..config.n_tests)
        .into_par_iter()
        .map(|i| {
            run_test(config, &world, i).map(|(o, log, labels)| {
                if options.logs {
                    (o, log, labels)
                } else {
                    (o, Vec::new(), Vec::new())
                }
            })
        })
        .collect::<Result<_>>()?;
    let mut outcomes = Vec::with_capacity(results.len());
    let mut logs = Vec::new();
    for (o, log, labels) in results {
        outcomes.push(o);
        logs.push((log, labels));
    }

    let mut dropped: BTreeMap<String, usize> = BTreeMap::new();
    let mut kept = Vec::new();
    for (i, o) in outcomes.iter().enumerate() {
        let d = o.decision(&config.filters);
        if d.keep {
            kept.push(i);
        }
        for r in d.reasons {
            *dropped.entry(r.as_str().to_string()).or_default() += 1;
        }
    }
    let kept_refs: Vec<&TestOutcome> = kept.iter().map(|&i| &outcomes[i]).collect();

    let mut rows = Vec::new();
    let mut split = None;
    let mut gate_curve = None;
    let mut pvalue_groups: Vec<(String, Vec<&TestOutcome>)> = Vec::new();
    match config.analysis {
        Analysis::Standard => {
            rows = rows_by_goal(&config.name, &kept_refs);
            pvalue_groups.push((config.name.clone(), kept_refs.clone()));
        }
        Analysis::FilterLadder => {
            for rung in filter_ladder() {
                let ts: Vec<&TestOutcome> = outcomes.iter().filter(|o| o.decision(&rung.flags).keep).collect();
                rows.extend(rows_by_goal(&rung.name, &ts));
                pvalue_groups.push((rung.name, ts));
            }
        }
        Analysis::EffectSplit => {
            let s = effect_split(&kept_refs);
            for (name, ids) in [
                (CTR_SIGNIFICANT, &s.significant),
                (CTR_NOT_SIGNIFICANT, &s.not_significant),
            ] {
                let ts: Vec<&TestOutcome> = ids.iter().map(|&i| &outcomes[i]).collect();
                rows.extend(summary_row(
                    name,
                    ts.first().map_or("ALL", |t| t.metadata.goal_label()),
                    &ts,
                ));
                pvalue_groups.push((name.to_string(), ts));
            }
            split = Some(s);
        }
        Analysis::GateCurve { n_bins } => {
            rows = rows_by_goal(&config.name, &kept_refs);
            pvalue_groups.push((config.name.clone(), kept_refs.clone()));
            let points: Vec<(f64, f64)> = kept_refs
                .iter()
                .flat_map(|t| t.comparisons.iter())
                .filter_map(|c| c.gate)
                .map(|g| (g.max_t_obs, g.frac_unobs_sig))
                .collect();
            gate_curve = Some(binned_gate_curve(&points, n_bins)?);
        }
    }

    let report = ScenarioReport {
        scenario: config.name.clone(),
        seed: config.seed,
        n_tests_simulated: outcomes.len(),
        n_tests_kept: kept.len(),
        dropped,
        rows,
        effect_split: split,
        gate_curve,
        kept,
        outcomes: Vec::new(),
    };
    if let Some(dir) = &config.output_dir {
        fs::create_dir_all(dir)?;
        let kept_refs: Vec<&TestOutcome> = report.kept.iter().map(|&i| &outcomes[i]).collect();
        write_balance_stats(&kept_refs, File::create(dir.join("balance_stats.csv"))?)?;
        write_pvalues(&pvalue_groups, File::create(dir.join("pvalues.csv"))?)?;
        let mut f = BufWriter::new(File::create(dir.join("summary.json"))?);
        serde_json::to_writer_pretty(&mut f, &report)?;
        writeln!(f)?;
        f.flush()?;
        if let Some(bins) = &report.gate_curve {
            write_gate_curve(bins, File::create(dir.join("gate_curve.csv"))?)?;
        }
        write_results(&outcomes, &config.filters, File::create(dir.join("results.jsonl"))?)?;
        if options.logs {
            let log_dir = dir.join("logs");
            fs::create_dir_all(&log_dir)?;
            for (o, (log, labels)) in outcomes.iter().zip(&logs) {
                let f = BufWriter::new(File::create(
                    log_dir.join(format!("test_{:04}_exposures.csv", o.test_id)),
                )?);
                let idx = std::cell::Cell::new(0usize);
                let next = |_: &crate::delivery::Exposure| {
                    let i = idx.get();
                    idx.set(i + 1);
                    labels[i].clone()
                };
                write_exposures_csv(log, next, f)?;
            }
        }
    }
    Ok(ScenarioReport { outcomes, ..report })
}

fn fmt_f(x: f64) -> String {
    format!("{x:.10e}")
}

pub fn write_balance_stats<W: Write>(tests: &[&TestOutcome], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "test_id",
        "cell_pair",
        "feature_id",
        "kind",
        "mean_a",
        "mean_b",
        "t",
        "p",
        "smd",
        "goal",
    ])?;
    for t in tests {
        for c in &t.comparisons {
            for s in &c.report.stats {
                w.write_record([
                    t.test_id.to_string(),
                    c.cell_pair.clone(),
                    s.feature_id.clone(),
                    s.kind.as_str().to_string(),
                    fmt_f(s.mean_test),
                    fmt_f(s.mean_control),
                    fmt_f(s.t),
                    fmt_f(s.p),
                    fmt_f(s.smd),
                    t.metadata.goal_label().to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_pvalues<W: Write>(groups: &[(String, Vec<&TestOutcome>)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["subsample", "goal", "test_id", "cell_pair", "feature_id", "kind", "p"])?;
    for (name, tests) in groups {
        for t in tests {
            for c in &t.comparisons {
                for s in &c.report.stats {
                    w.write_record([
                        name.clone(),
                        t.metadata.goal_label().to_string(),
                        t.test_id.to_string(),
                        c.cell_pair.clone(),
                        s.feature_id.clone(),
                        s.kind.as_str().to_string(),
                        fmt_f(s.p),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_gate_curve<W: Write>(bins: &[GateBin], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["bin_lo", "bin_hi", "n", "mean", "ci_lo", "ci_hi"])?;
    for b in bins {
        let opt = |x: Option<f64>| x.map(fmt_f).unwrap_or_default();
        w.write_record([
            fmt_f(b.lo),
            fmt_f(b.hi),
            b.n.to_string(),
            opt(b.mean),
            opt(b.ci.map(|c| c.0)),
            opt(b.ci.map(|c| c.1)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ResultLine<'a> {
    test_id: usize,
    goal: &'a str,
    keep: bool,
    reasons: Vec<&'static str>,
    metadata: &'a TestMetadata,
    gates: Vec<(&'a str, Option<GateResult>)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    balance_error: &'a Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lift: &'a Option<LiftResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ab: &'a Option<ABResult>,
}

fn write_results<W: Write>(outcomes: &[TestOutcome], flags: &FilterFlags, writer: W) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for o in outcomes {
        let d = o.decision(flags);
        let line = ResultLine {
            test_id: o.test_id,
            goal: o.metadata.goal_label(),
            keep: d.keep,
            reasons: d.reasons.iter().map(|r| r.as_str()).collect(),
            metadata: &o.metadata,
            gates: o.comparisons.iter().map(|c| (c.cell_pair.as_str(), c.gate)).collect(),
            balance_error: &o.balance_error,
            lift: &o.lift,
            ab: &o.ab,
        };
        serde_json::to_writer(&mut w, &line)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn ab_template(n_cells: usize, cell: CellTemplate, vary: Variation, identical: bool) -> TestTemplate {
    TestTemplate {
        kind: TestKind::Ab,
        n_cells,
        cell,
        vary,
        identical_creatives: identical,
        test_fraction: 0.5,
    }
}

fn feed_only() -> Placements {
    Placements::Manual(vec![Placement::Feed])
}

/// Built-in scenario by name.
pub fn preset(name: &str, seed: u64) -> Result<ScenarioConfig> {
    let base = |name: &str, n_tests, template, filters, analysis| ScenarioConfig {
        name: name.to_string(),
        population: PopulationSpec::default(),
        n_tests,
        template,
        filters,
        world: WorldSettings::default(),
        analysis,
        seed,
        output_dir: None,
    };
    let varied = CellTemplate {
        goals: Goal::ALL.to_vec(),
        audiences: vec![
            Audience::everyone(),
            Audience {
                male: Some(true),
                ..Audience::everyone()
            },
            Audience {
                male: Some(false),
                ..Audience::everyone()
            },
            Audience {
                min_age_bin: 2,
                ..Audience::everyone()
            },
            Audience {
                max_age_bin: 2,
                ..Audience::everyone()
            },
            Audience {
                english_only: true,
                ..Audience::everyone()
            },
        ],
        daily_budget: (300.0, 3000.0),
        bid_multiplier: (0.6, 1.6),
        auto_bid_prob: 0.3,
        placements: vec![Placements::Auto, feed_only()],
        frequency_caps: vec![None, Some(1), Some(3)],
        creative_kinds: vec![CreativeKind::StaticImage, CreativeKind::Video],
        creative_scale: (0.3, 1.5),
    };
    let restricted_cell = CellTemplate {
        goals: vec![Goal::Awareness],
        audiences: vec![Audience::everyone()],
        daily_budget: (1e6, 1e6),
        bid_multiplier: (1.0, 1.0),
        auto_bid_prob: 0.0,
        placements: vec![feed_only()],
        frequency_caps: vec![Some(1)],
        creative_kinds: vec![CreativeKind::StaticImage],
        creative_scale: (0.3, 1.5),
    };
    let config = match name {
        "lift_balance" => base(
            name,
            200,
            TestTemplate {
                kind: TestKind::Lift,
                n_cells: 1,
                cell: varied.clone(),
                vary: Variation::default(),
                identical_creatives: false,
                test_fraction: 0.5,
            },
            FilterFlags::none(),
            Analysis::Standard,
        ),
        "lift_null" => {
            let mut c = base(
                name,
                500,
                TestTemplate {
                    kind: TestKind::Lift,
                    n_cells: 1,
                    cell: varied.clone(),
                    vary: Variation::default(),
                    identical_creatives: false,
                    test_fraction: 0.5,
                },
                FilterFlags::none(),
                Analysis::Standard,
            );
            c.world.exposure_effect = Some(0.0);
            c
        }
        "ab_full" => base(
            name,
            100,
            ab_template(
                2,
                CellTemplate {
                    goals: vec![Goal::Conversion],
                    ..varied.clone()
                },
                Variation {
                    goal: 0.0,
                    audience: 0.5,
                    budget_bid: 0.5,
                    placements: 0.5,
                    frequency_cap: 0.5,
                    creative_kind: 0.5,
                },
                false,
            ),
            FilterFlags::default(),
            Analysis::Standard,
        ),
        "ab_filter_ladder" => base(
            name,
            300,
            ab_template(
                2,
                varied.clone(),
                Variation {
                    goal: 0.3,
                    audience: 0.3,
                    budget_bid: 0.3,
                    placements: 0.3,
                    frequency_cap: 0.3,
                    creative_kind: 0.3,
                },
                false,
            ),
            FilterFlags::default(),
            Analysis::FilterLadder,
        ),
        "ab_restricted" => base(
            name,
            20,
            ab_template(2, restricted_cell.clone(), Variation::default(), false),
            FilterFlags::restricted(),
            Analysis::Standard,
        ),
        "case_study_5cell" => base(
            name,
            1,
            ab_template(
                5,
                CellTemplate {
                    audiences: vec![Audience {
                        america_only: true,
                        max_age_bin: 4,
                        ..Audience::everyone()
                    }],
                    ..restricted_cell.clone()
                },
                Variation::default(),
                false,
            ),
            FilterFlags::restricted(),
            Analysis::Standard,
        ),
        "effect_split" => base(
            name,
            100,
            ab_template(
                2,
                CellTemplate {
                    creative_scale: (0.5, 3.0),
                    ..restricted_cell.clone()
                },
                Variation::default(),
                false,
            ),
            FilterFlags::restricted(),
            Analysis::EffectSplit,
        ),
        "gate_curve" => base(
            name,
            240,
            ab_template(
                2,
                CellTemplate {
                    placements: vec![feed_only(), feed_only(), Placements::Auto],
                    creative_kinds: vec![
                        CreativeKind::StaticImage,
                        CreativeKind::StaticImage,
                        CreativeKind::StaticImage,
                        CreativeKind::Video,
                    ],
                    ..restricted_cell.clone()
                },
                Variation {
                    placements: 0.15,
                    creative_kind: 0.15,
                    ..Variation::default()
                },
                false,
            ),
            FilterFlags::default(),
            Analysis::GateCurve {
                n_bins: DEFAULT_GATE_BINS,
            },
        ),
        other => return Err(Error::UnknownPreset(other.to_string())),
    };
    Ok(config)
}

/// Parse a preset name or a JSON config path.
pub fn load_config(name_or_path: &str, seed: Option<u64>) -> Result<ScenarioConfig> {
    if PRESETS.contains(&name_or_path) {
        return preset(name_or_path, seed.unwrap_or(0));
    }
    let path = Path::new(name_or_path);
    if !path.exists() {
        return Err(Error::UnknownPreset(name_or_path.to_string()));
    }
    let mut config: ScenarioConfig = serde_json::from_reader(File::open(path)?)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> TestMetadata {
        TestMetadata {
            goals: vec![Goal::Awareness, Goal::Awareness],
            audiences: vec![Audience::everyone(), Audience::everyone()],
            daily_budgets: vec![100.0, 100.0],
            bids: vec![Bid::Auto, Bid::Auto],
            creative_kinds: vec![CreativeKind::StaticImage; 2],
            creative_hashes: vec![1, 2],
            placements: vec![Placements::Auto; 2],
            frequency_caps: vec![None; 2],
            impressions: vec![1000, 1000],
            reached_users: vec![1000, 1000],
        }
    }

    #[test]
    fn flags_off_keep_everything() {
        let mut m = meta();
        m.goals[1] = Goal::Conversion;
        m.creative_hashes = vec![5, 5];
        m.impressions = vec![2, 3000];
        assert!(apply_filters(&m, &FilterFlags::none()).keep);
    }

    #[test]
    fn goal_mismatch_is_dropped() {
        let mut m = meta();
        m.goals[1] = Goal::Conversion;
        let flags = FilterFlags {
            same_goal: true,
            ..FilterFlags::none()
        };
        let d = apply_filters(&m, &flags);
        assert!(!d.keep);
        assert_eq!(d.reasons, vec![FilterReason::GoalMismatch]);
    }

    #[test]
    fn frequency_ratio_threshold() {
        let mut m = meta();
        m.impressions = vec![1050, 1000];
        let flags = FilterFlags {
            freq_ratio_max: Some(DEFAULT_FREQ_RATIO_MAX),
            ..FilterFlags::none()
        };
        assert_eq!(apply_filters(&m, &flags).reasons, vec![FilterReason::FreqRatioExceeded]);
        m.impressions = vec![1037, 1000];
        assert!(apply_filters(&m, &flags).keep);
    }

    #[test]
    fn creative_and_budget_checks() {
        let mut m = meta();
        m.creative_hashes = vec![3, 3];
        m.creative_kinds[0] = CreativeKind::Video;
        m.daily_budgets[1] = 200.0;
        let d = apply_filters(&m, &FilterFlags::restricted());
        assert_eq!(
            d.reasons,
            vec![
                FilterReason::AudienceBudgetBidMismatch,
                FilterReason::NotStaticImage,
                FilterReason::CreativeNotDistinct
            ]
        );
        m.impressions = vec![29, 500];
        assert!(apply_filters(&m, &FilterFlags::default())
            .reasons
            .contains(&FilterReason::LowImpressions));
    }

    #[test]
    fn ladder_is_cumulative() {
        let rungs = filter_ladder();
        assert_eq!(rungs.len(), 4);
        let on = |f: &FilterFlags| {
            [
                f.same_goal,
                f.same_audience_budget_bid,
                f.static_image_distinct,
                f.freq_ratio_max.is_some(),
            ]
        };
        for w in rungs.windows(2) {
            let (a, b) = (on(&w[0].flags), on(&w[1].flags));
            assert!(a.iter().zip(&b).all(|(x, y)| !x || *y));
        }
    }

    #[test]
    fn presets_resolve_and_validate() {
        for p in PRESETS {
            preset(p, 1).unwrap().validate().unwrap();
        }
        assert!(matches!(preset("nope", 1), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn config_json_round_trip() {
        let c = preset("ab_restricted", 3).unwrap();
        let s = serde_json::to_string(&c).unwrap();
        let back: ScenarioConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn drawn_campaigns_respect_sharing() {
        let t = preset("ab_restricted", 0).unwrap().template;
        let mut rng = substream(1, 0);
        let cs = draw_test_campaigns(&t, 8, &mut rng);
        assert_eq!(cs.len(), 2);
        assert_eq!(cs[0].daily_budget, cs[1].daily_budget);
        assert_eq!(cs[0].bid, cs[1].bid);
        assert_ne!(cs[0].creative.hash, cs[1].creative.hash);
        let m = metadata(&cs, vec![100, 100], vec![100, 100]);
        assert!(apply_filters(&m, &FilterFlags::restricted()).keep);
    }

    #[test]
    fn small_scenario_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = preset("ab_restricted", 9).unwrap();
        c.population = PopulationSpec { n_users: 3000, dim: 8 };
        c.n_tests = 4;
        c.output_dir = Some(dir.path().to_path_buf());
        let r = run_scenario(&c, RunOptions { logs: true }).unwrap();
        assert_eq!(r.n_tests_simulated, 4);
        for f in ["balance_stats.csv", "pvalues.csv", "summary.json", "results.jsonl"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert!(dir.path().join("logs/test_0000_exposures.csv").exists());
        let first = fs::read(dir.path().join("balance_stats.csv")).unwrap();
        run_scenario(&c, RunOptions::default()).unwrap();
        assert_eq!(first, fs::read(dir.path().join("balance_stats.csv")).unwrap());
    }
}
