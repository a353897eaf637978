//! Lift and A/B test harnesses over the delivery engine.
//!
//! Lift tests split each cell's users into an exposed test group and a
//! ghost-control holdout, aggregate outcomes intent-to-treat and summarize
//! incrementality with a Beta posterior. A/B tests split users across
//! alternative campaigns and pick a winner by simulated cost per acquisition.

use rand::Rng;
use rand_distr::{Beta, Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::assignment::{AllocationPlan, TestSalt};
use crate::delivery::{CampaignConfig, Conversion, ConversionSource, Exposure, Routing, World, WorldConfig};
use crate::diagnostics::FeatureMatrix;
use crate::error::{invalid, Error, Result};
use crate::population::{ResponseModel, UserProfile};

pub const DEFAULT_DRAWS: usize = 10_000;
pub const CONCLUSIVE_MASS: f64 = 0.9;
pub const MIN_INTERVAL_SAMPLES: usize = 100;

pub const TEST_LABEL: u32 = 1;
pub const CONTROL_LABEL: u32 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftCell {
    pub cell_id: u32,
    pub config: CampaignConfig,
    /// Share of all users routed to this cell.
    pub proportion: f64,
    /// Share of the cell's users in the exposed test group.
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftTestSpec {
    pub cells: Vec<LiftCell>,
    pub salt: TestSalt,
}

impl LiftTestSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.cells.is_empty() {
            return Err(invalid("lift test has no cells"));
        }
        for c in &self.cells {
            c.config.validate(dim)?;
            if !(c.test_fraction > 0.0 && c.test_fraction < 1.0) {
                return Err(invalid("test_fraction must lie strictly between 0 and 1"));
            }
        }
        self.plan().map(|_| ())
    }

    /// Conditions in order: cell 0 test, cell 0 control, cell 1 test, ...
    pub fn plan(&self) -> Result<AllocationPlan> {
        let mut conditions = Vec::with_capacity(2 * self.cells.len());
        for c in &self.cells {
            conditions.push((format!("{}_test", c.cell_id), c.proportion * c.test_fraction));
            conditions.push((format!("{}_control", c.cell_id), c.proportion * (1.0 - c.test_fraction)));
        }
        AllocationPlan::new(conditions)
    }
}

/// Group membership of a user in a Lift test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiftMembership {
    pub cell: usize,
    pub holdout: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftRun {
    pub cell_ids: Vec<u32>,
    pub membership: Vec<Option<LiftMembership>>,
    /// First tick at which the focal ad won the user's auction, displayed or not.
    pub first_reach: Vec<Option<u64>>,
    pub exposures: Vec<Exposure>,
    pub conversions: Vec<Conversion>,
    pub spend: Vec<f64>,
}

impl LiftRun {
    /// Users with an opportunity, in user order, as `(user, first tick)`.
    pub fn opportunity_reach(&self) -> Vec<(usize, u64)> {
        self.first_reach
            .iter()
            .enumerate()
            .filter_map(|(u, t)| t.map(|t| (u, t)))
            .collect()
    }

    /// Reached users of `cell`, labelled test or control.
    pub fn feature_matrix(&self, users: &[UserProfile], cell: usize) -> Result<FeatureMatrix> {
        let dim = users.first().map(|u| u.dim()).unwrap_or(0);
        let mut m = FeatureMatrix::new(dim);
        for (u, t) in self.first_reach.iter().enumerate() {
            if t.is_none() {
                continue;
            }
            if let Some(g) = self.membership[u] {
                if g.cell == cell {
                    m.push_user(&users[u], if g.holdout { CONTROL_LABEL } else { TEST_LABEL })?;
                }
            }
        }
        Ok(m)
    }
}

pub fn run_lift_test(
    spec: &LiftTestSpec,
    users: &[UserProfile],
    model: &ResponseModel,
    world: WorldConfig,
) -> Result<LiftRun> {
    spec.validate(model.dim())?;
    let plan = spec.plan()?;
    let membership: Vec<Option<LiftMembership>> = users
        .iter()
        .map(|u| {
            let c = plan.assign(u.user_id, spec.salt);
            Some(LiftMembership {
                cell: c / 2,
                holdout: c % 2 == 1,
            })
        })
        .collect();
    let routing = Routing::Ghost {
        cell: membership.iter().map(|m| m.map(|m| m.cell)).collect(),
        holdout: membership.iter().map(|m| m.is_some_and(|m| m.holdout)).collect(),
    };
    let campaigns = spec.cells.iter().map(|c| (c.cell_id, c.config.clone())).collect();
    let mut w = World::new(users, model, world, campaigns, routing)?;
    w.run();
    let mut first_reach = vec![None; users.len()];
    for r in &w.reach {
        let slot: &mut Option<u64> = &mut first_reach[r.user];
        if slot.is_none_or(|t| r.tick < t) {
            *slot = Some(r.tick);
        }
    }
    Ok(LiftRun {
        cell_ids: spec.cells.iter().map(|c| c.cell_id).collect(),
        membership,
        first_reach,
        spend: w.campaigns.iter().map(|c| c.total_spend).collect(),
        exposures: w.exposures,
        conversions: w.conversions,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupStats {
    pub n_users: u64,
    pub unique_converts: u64,
    pub total_conversions: u64,
}

impl GroupStats {
    pub fn rate(&self) -> f64 {
        if self.n_users == 0 {
            0.0
        } else {
            self.unique_converts as f64 / self.n_users as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiftCellStats {
    pub cell_id: u32,
    pub test: GroupStats,
    pub control: GroupStats,
}

/// Intent-to-treat aggregation. Every assigned user counts once toward its
/// group; a conversion counts only if it follows the user's first
/// opportunity.
pub fn aggregate_lift(run: &LiftRun) -> Vec<LiftCellStats> {
    let n = run.membership.len();
    let mut per_user = vec![0u64; n];
    for c in &run.conversions {
        if let Some(t0) = run.first_reach[c.user] {
            if t0 < c.tick {
                per_user[c.user] += 1;
            }
        }
    }
    let mut out: Vec<LiftCellStats> = run
        .cell_ids
        .iter()
        .map(|&cell_id| LiftCellStats {
            cell_id,
            test: GroupStats::default(),
            control: GroupStats::default(),
        })
        .collect();
    for (u, m) in run.membership.iter().enumerate() {
        let Some(m) = m else { continue };
        let g = if m.holdout {
            &mut out[m.cell].control
        } else {
            &mut out[m.cell].test
        };
        g.n_users += 1;
        g.total_conversions += per_user[u];
        g.unique_converts += (per_user[u] > 0) as u64;
    }
    out
}

fn rate_posterior(g: &GroupStats) -> Beta<f64> {
    let c = g.unique_converts.min(g.n_users) as f64;
    Beta::new(c + 1.0, (g.n_users as f64 - c) + 1.0).expect("positive Beta parameters")
}

/// Draws of lift per user, `rate_test - rate_control`, under independent
/// uniform-prior Beta posteriors.
pub fn lift_posterior<R: Rng + ?Sized>(
    test: &GroupStats,
    control: &GroupStats,
    n_draws: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if test.n_users == 0 || control.n_users == 0 {
        return Err(Error::InsufficientData(
            "lift posterior needs users in both groups".into(),
        ));
    }
    let bt = rate_posterior(test);
    let bc = rate_posterior(control);
    Ok((0..n_draws).map(|_| bt.sample(rng) - bc.sample(rng)).collect())
}

/// Shortest span of sorted samples holding `ceil(0.9 n)` of them. Ties go to
/// the lowest start.
pub fn smallest_interval_90(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.len() < MIN_INTERVAL_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "need at least {MIN_INTERVAL_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let k = (0.9 * x.len() as f64).ceil() as usize;
    let mut best = 0usize;
    let mut width = f64::INFINITY;
    for i in 0..=x.len() - k {
        let w = x[i + k - 1] - x[i];
        if w < width {
            width = w;
            best = i;
        }
    }
    Ok((x[best], x[best + k - 1]))
}

/// More than 90% of the posterior lies above zero.
pub fn conclusive(samples: &[f64]) -> bool {
    if samples.is_empty() {
        return false;
    }
    let pos = samples.iter().filter(|&&s| s > 0.0).count();
    pos as f64 > CONCLUSIVE_MASS * samples.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftCellPosterior<'a> {
    pub samples: &'a [f64],
    pub spend: f64,
    pub n_users: u64,
}

fn cost_per_incremental(c: &LiftCellPosterior, lift: f64) -> Option<f64> {
    let incremental = lift * c.n_users as f64;
    (incremental > 0.0).then(|| c.spend / incremental)
}

/// Probability that `a` buys incremental conversions more cheaply than `b`.
/// Each draw resamples one posterior sample per cell; a draw with
/// nonpositive incremental conversions loses, and ties split evenly.
pub fn lift_pairwise_winner<R: Rng + ?Sized>(
    a: &LiftCellPosterior,
    b: &LiftCellPosterior,
    n_draws: usize,
    rng: &mut R,
) -> Result<f64> {
    if !(a.spend > 0.0 && b.spend > 0.0) {
        return Err(invalid("pairwise winner needs positive spend in both cells"));
    }
    if a.samples.is_empty() || b.samples.is_empty() || n_draws == 0 {
        return Err(Error::InsufficientData("no posterior samples".into()));
    }
    let mut wins = 0.0;
    for _ in 0..n_draws {
        let la = a.samples[rng.random_range(0..a.samples.len())];
        let lb = b.samples[rng.random_range(0..b.samples.len())];
        wins += match (cost_per_incremental(a, la), cost_per_incremental(b, lb)) {
            (Some(ca), Some(cb)) if ca < cb => 1.0,
            (Some(ca), Some(cb)) if ca == cb => 0.5,
            (Some(_), None) => 1.0,
            (None, None) => 0.5,
            _ => 0.0,
        };
    }
    Ok(wins / n_draws as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftCellResult {
    pub cell_id: u32,
    pub test: GroupStats,
    pub control: GroupStats,
    pub spend: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samples: Vec<f64>,
    pub interval_90: (f64, f64),
    pub conclusive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftResult {
    pub cells: Vec<LiftCellResult>,
    /// `pairwise_win_probs[i][j]` is the probability cell `i` beats cell `j`.
    pub pairwise_win_probs: Vec<Vec<f64>>,
    /// Cell beating every other cell with probability above one half.
    pub winner: Option<u32>,
}

impl LiftResult {
    pub fn strip_samples(&mut self) {
        for c in &mut self.cells {
            c.samples = Vec::new();
        }
    }
}

pub fn lift_result<R: Rng + ?Sized>(run: &LiftRun, n_draws: usize, rng: &mut R) -> Result<LiftResult> {
    let stats = aggregate_lift(run);
    let mut cells = Vec::with_capacity(stats.len());
    for (s, &spend) in stats.iter().zip(&run.spend) {
        let samples = lift_posterior(&s.test, &s.control, n_draws, rng)?;
        cells.push(LiftCellResult {
            cell_id: s.cell_id,
            test: s.test,
            control: s.control,
            spend,
            interval_90: smallest_interval_90(&samples)?,
            conclusive: conclusive(&samples),
            samples,
        });
    }
    let k = cells.len();
    let mut pairwise = vec![vec![0.5; k]; k];
    let mut winner = None;
    if k > 1 && cells.iter().all(|c| c.spend > 0.0) {
        for i in 0..k {
            for j in i + 1..k {
                let a = LiftCellPosterior {
                    samples: &cells[i].samples,
                    spend: cells[i].spend,
                    n_users: cells[i].test.n_users,
                };
                let b = LiftCellPosterior {
                    samples: &cells[j].samples,
                    spend: cells[j].spend,
                    n_users: cells[j].test.n_users,
                };
                let p = lift_pairwise_winner(&a, &b, n_draws, rng)?;
                pairwise[i][j] = p;
                pairwise[j][i] = 1.0 - p;
            }
        }
        winner = (0..k)
            .find(|&i| (0..k).all(|j| j == i || pairwise[i][j] > 0.5))
            .map(|i| cells[i].cell_id);
    }
    Ok(LiftResult {
        cells,
        pairwise_win_probs: pairwise,
        winner,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ABCell {
    pub cell_id: u32,
    pub config: CampaignConfig,
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ABTestSpec {
    pub cells: Vec<ABCell>,
    pub salt: TestSalt,
}

impl ABTestSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.cells.len() < 2 {
            return Err(invalid("A/B test needs at least two cells"));
        }
        for c in &self.cells {
            c.config.validate(dim)?;
        }
        self.plan().map(|_| ())
    }

    pub fn plan(&self) -> Result<AllocationPlan> {
        AllocationPlan::new(
            self.cells
                .iter()
                .map(|c| (c.cell_id.to_string(), c.proportion))
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ABCellStats {
    pub cell_id: u32,
    pub spend: f64,
    pub impressions: u64,
    pub clicks: u64,
    pub attributed_conversions: u64,
    pub reached_users: u64,
}

impl ABCellStats {
    pub fn impressions_per_user(&self) -> f64 {
        if self.reached_users == 0 {
            0.0
        } else {
            self.impressions as f64 / self.reached_users as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ABRun {
    pub cell_of_user: Vec<Option<usize>>,
    pub exposures: Vec<Exposure>,
    pub conversions: Vec<Conversion>,
    pub cells: Vec<ABCellStats>,
}

impl ABRun {
    /// One row per impression, labelled by cell index.
    pub fn feature_matrix(&self, users: &[UserProfile]) -> Result<FeatureMatrix> {
        let dim = users.first().map(|u| u.dim()).unwrap_or(0);
        let mut m = FeatureMatrix::new(dim);
        let index_of: std::collections::HashMap<u32, usize> =
            self.cells.iter().enumerate().map(|(i, c)| (c.cell_id, i)).collect();
        for e in &self.exposures {
            m.push_user(&users[e.user], index_of[&e.cell_id] as u32)?;
        }
        Ok(m)
    }
}

pub fn run_ab_test(
    spec: &ABTestSpec,
    users: &[UserProfile],
    model: &ResponseModel,
    world: WorldConfig,
) -> Result<ABRun> {
    spec.validate(model.dim())?;
    let plan = spec.plan()?;
    let cell_of_user: Vec<Option<usize>> = users.iter().map(|u| Some(plan.assign(u.user_id, spec.salt))).collect();
    let routing = Routing::CrossCell {
        cell: cell_of_user.clone(),
    };
    let campaigns = spec.cells.iter().map(|c| (c.cell_id, c.config.clone())).collect();
    let mut w = World::new(users, model, world, campaigns, routing)?;
    w.run();
    let mut cells: Vec<ABCellStats> = w
        .campaigns
        .iter()
        .map(|c| ABCellStats {
            cell_id: c.cell_id,
            spend: c.total_spend,
            impressions: c.impressions,
            reached_users: c.freq.iter().filter(|&&f| f > 0).count() as u64,
            ..Default::default()
        })
        .collect();
    for e in &w.exposures {
        let i = cells
            .iter()
            .position(|c| c.cell_id == e.cell_id)
            .expect("exposure cell");
        cells[i].clicks += e.clicked as u64;
    }
    for c in &w.conversions {
        if let (ConversionSource::Attributed, Some(ci)) = (c.source, c.campaign) {
            cells[ci].attributed_conversions += 1;
        }
    }
    Ok(ABRun {
        cell_of_user,
        exposures: w.exposures,
        conversions: w.conversions,
        cells,
    })
}

/// Beta-Binomial CPA simulation over `(spend, impressions, conversions)`
/// per cell. Returns the index of the modal winner and its win fraction.
pub fn ab_winner<R: Rng + ?Sized>(cells: &[(f64, u64, u64)], n_sims: usize, rng: &mut R) -> Result<(usize, f64)> {
    if cells.is_empty() || n_sims == 0 {
        return Err(Error::InsufficientData("ab_winner needs cells and simulations".into()));
    }
    let mut rates = Vec::with_capacity(cells.len());
    for &(spend, impressions, conversions) in cells {
        if !(spend > 0.0 && spend.is_finite()) {
            return Err(invalid(format!("spend must be positive, got {spend}")));
        }
        if conversions > impressions {
            return Err(invalid(format!(
                "{conversions} conversions exceed {impressions} impressions"
            )));
        }
        rates.push(
            Beta::new(conversions as f64 + 1.0, (impressions - conversions) as f64 + 1.0)
                .map_err(|e| invalid(e.to_string()))?,
        );
    }
    let mut wins = vec![0usize; cells.len()];
    for _ in 0..n_sims {
        let mut best: Option<(usize, f64)> = None;
        for (i, (&(spend, impressions, _), beta)) in cells.iter().zip(&rates).enumerate() {
            let rate = beta.sample(rng);
            let simulated = Binomial::new(impressions, rate)
                .map_err(|e| invalid(e.to_string()))?
                .sample(rng);
            if simulated == 0 {
                continue;
            }
            let cpa = spend / simulated as f64;
            if best.is_none_or(|(_, b)| cpa < b) {
                best = Some((i, cpa));
            }
        }
        if let Some((i, _)) = best {
            wins[i] += 1;
        }
    }
    let (winner, &count) = wins
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .expect("nonempty");
    Ok((winner, count as f64 / n_sims as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ABResult {
    pub cells: Vec<ABCellStats>,
    /// `None` when some cell spent nothing.
    pub winner: Option<u32>,
    pub confidence: Option<f64>,
}

pub fn ab_result<R: Rng + ?Sized>(run: &ABRun, n_sims: usize, rng: &mut R) -> Result<ABResult> {
    let (winner, confidence) = if run.cells.iter().all(|c| c.spend > 0.0) {
        let input: Vec<(f64, u64, u64)> = run
            .cells
            .iter()
            .map(|c| (c.spend, c.impressions, c.attributed_conversions))
            .collect();
        let (w, conf) = ab_winner(&input, n_sims, rng)?;
        (Some(run.cells[w].cell_id), Some(conf))
    } else {
        (None, None)
    };
    Ok(ABResult {
        cells: run.cells.clone(),
        winner,
        confidence,
    })
}
