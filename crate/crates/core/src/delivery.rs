//! Ad delivery: opportunity streams, eligibility, relevance prediction,
//! value-ranked auctions against a background pool, budget pacing and
//! frequency capping.
//!
//! A [`World`] owns one test's worth of mutable delivery state and is
//! advanced slot by slot. How a focal campaign may interact with a user
//! (compete and display, compete but be suppressed, or not compete at all)
//! is decided by the [`Routing`] the experiment layer installs.

use std::io::Write;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, LogNormal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::murmur3_x64_128;
use crate::error::{invalid, Error, Result};
use crate::population::{response_probs, ResponseModel, UserProfile, AGE_BINS};
use crate::rng::substream;

/// Sub-slot resolution of event timestamps.
pub const TICKS_PER_SLOT: u64 = 1 << 20;
/// Campaign ids at or above this value belong to background ads.
pub const BACKGROUND_ID_BASE: u32 = 1_000_000;
/// Relevance score used for reach-optimized delivery.
pub const AWARENESS_RELEVANCE: f64 = 0.05;
pub const MIN_MULTIPLIER: f64 = 0.01;
pub const MAX_MULTIPLIER: f64 = 1.0;
/// Multiplicative pacing step applied per controller update.
pub const PACING_STEP: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Goal {
    Awareness,
    Traffic,
    Engagement,
    Leads,
    Conversion,
}

impl Goal {
    pub const ALL: [Goal; 5] = [
        Goal::Awareness,
        Goal::Traffic,
        Goal::Engagement,
        Goal::Leads,
        Goal::Conversion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Goal::Awareness => "AWARENESS",
            Goal::Traffic => "TRAFFIC",
            Goal::Engagement => "ENGAGEMENT",
            Goal::Leads => "LEADS",
            Goal::Conversion => "CONVERSION",
        }
    }

    /// Typical per-impression bid that makes an average user competitive
    /// against the default background pool.
    pub fn reference_bid(self) -> f64 {
        match self {
            Goal::Awareness => 3.0,
            Goal::Traffic | Goal::Engagement | Goal::Leads => 3.0,
            Goal::Conversion => 5.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Placement {
    Feed,
    OtherSurface,
}

impl Placement {
    pub fn as_str(self) -> &'static str {
        match self {
            Placement::Feed => "FEED",
            Placement::OtherSurface => "OTHER_SURFACE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Placements {
    Auto,
    Manual(Vec<Placement>),
}

impl Placements {
    pub fn resolve(&self) -> Vec<Placement> {
        match self {
            Placements::Auto => vec![Placement::Feed, Placement::OtherSurface],
            Placements::Manual(v) => {
                let mut v = v.clone();
                v.sort();
                v.dedup();
                v
            }
        }
    }

    pub fn allows(&self, p: Placement) -> bool {
        match self {
            Placements::Auto => true,
            Placements::Manual(v) => v.contains(&p),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Bid {
    Fixed(f64),
    Auto,
}

impl Bid {
    /// Base bid before pacing. Automatic bidding starts from 1.5x the goal's
    /// reference bid and relies on the pacing multiplier to come down.
    pub fn base(self, goal: Goal) -> f64 {
        match self {
            Bid::Fixed(b) => b,
            Bid::Auto => 1.5 * goal.reference_bid(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CreativeKind {
    StaticImage,
    Video,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Creative {
    pub kind: CreativeKind,
    pub vector: Vec<f64>,
    pub hash: u64,
}

impl Creative {
    pub fn new(kind: CreativeKind, vector: Vec<f64>) -> Self {
        let bytes: Vec<u8> = vector.iter().flat_map(|x| x.to_bits().to_le_bytes()).collect();
        let hash = murmur3_x64_128(&bytes, 0x0c4e_a71e).0;
        Creative { kind, vector, hash }
    }

    pub fn random<R: Rng + ?Sized>(kind: CreativeKind, dim: usize, rng: &mut R) -> Self {
        let v = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Creative::new(kind, v)
    }

    /// Relevance multiplier on the secondary surface, in `[0.5, 1.5)`.
    /// Different creatives suit that surface differently, which is what lets
    /// automatic placement split audiences by device and age.
    pub fn other_surface_affinity(&self) -> f64 {
        0.5 + (self.hash >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// Targeting predicate over structured features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Audience {
    /// `Some(true)` men only, `Some(false)` women only.
    #[serde(default)]
    pub male: Option<bool>,
    #[serde(default)]
    pub min_age_bin: u8,
    #[serde(default = "max_age")]
    pub max_age_bin: u8,
    #[serde(default)]
    pub america_only: bool,
    #[serde(default)]
    pub english_only: bool,
    #[serde(default)]
    pub ios: Option<bool>,
}

fn max_age() -> u8 {
    (AGE_BINS - 1) as u8
}

impl Default for Audience {
    fn default() -> Self {
        Audience::everyone()
    }
}

impl Audience {
    pub fn everyone() -> Self {
        Audience {
            male: None,
            min_age_bin: 0,
            max_age_bin: max_age(),
            america_only: false,
            english_only: false,
            ios: None,
        }
    }

    pub fn matches(&self, u: &UserProfile) -> bool {
        self.male.is_none_or(|m| m == u.gender_male)
            && u.age_bin >= self.min_age_bin
            && u.age_bin <= self.max_age_bin
            && (!self.america_only || u.loc_america)
            && (!self.english_only || u.lang_english)
            && self.ios.is_none_or(|i| i == u.os_ios)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Schedule {
    #[default]
    Always,
    /// Active slot indices within a day.
    DaySlots(Vec<u32>),
}

impl Schedule {
    pub fn is_active(&self, slot: u32, slots_per_day: u32) -> bool {
        match self {
            Schedule::Always => true,
            Schedule::DaySlots(s) => s.contains(&(slot % slots_per_day.max(1))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub campaign_id: u32,
    pub goal: Goal,
    pub audience: Audience,
    /// Budget per pacing day. Zero means the campaign never bids.
    pub daily_budget: f64,
    pub bid: Bid,
    pub placements: Placements,
    #[serde(default)]
    pub schedule: Schedule,
    /// Maximum impressions per user over the whole horizon.
    #[serde(default)]
    pub frequency_cap: Option<u32>,
    pub creative: Creative,
}

impl CampaignConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.daily_budget >= 0.0 && self.daily_budget.is_finite()) {
            return Err(invalid("daily_budget must be finite and nonnegative"));
        }
        if let Bid::Fixed(b) = self.bid {
            if !(b > 0.0 && b.is_finite()) {
                return Err(invalid("fixed bid must be positive"));
            }
        }
        if self.creative.vector.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: self.creative.vector.len(),
            });
        }
        if self.placements.resolve().is_empty() {
            return Err(invalid("placements resolve to an empty set"));
        }
        if self.campaign_id >= BACKGROUND_ID_BASE {
            return Err(invalid("campaign ids collide with the background pool"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdCandidate {
    pub campaign_id: u32,
    pub bid: f64,
    pub relevance: f64,
    pub total_value: f64,
}

impl AdCandidate {
    pub fn new(campaign_id: u32, bid: f64, relevance: f64) -> Self {
        AdCandidate {
            campaign_id,
            bid,
            relevance,
            total_value: bid * relevance,
        }
    }

    pub fn is_background(&self) -> bool {
        self.campaign_id >= BACKGROUND_ID_BASE
    }
}

fn by_value(a: &AdCandidate, b: &AdCandidate) -> std::cmp::Ordering {
    b.total_value
        .total_cmp(&a.total_value)
        .then(a.campaign_id.cmp(&b.campaign_id))
}

/// Winner and runner-up indices. Highest total value wins; ties go to the
/// smaller campaign id.
pub fn run_auction(candidates: &[AdCandidate]) -> Result<(usize, Option<usize>)> {
    if candidates.is_empty() {
        return Err(Error::InsufficientData("auction has no candidates".into()));
    }
    let mut best = 0;
    let mut second: Option<usize> = None;
    for i in 1..candidates.len() {
        if by_value(&candidates[i], &candidates[best]).is_lt() {
            second = Some(best);
            best = i;
        } else if second.is_none_or(|s| by_value(&candidates[i], &candidates[s]).is_lt()) {
            second = Some(i);
        }
    }
    Ok((best, second))
}

/// Indices of `candidates` in auction order.
pub fn rank_candidates(candidates: &[AdCandidate]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..candidates.len()).collect();
    idx.sort_by(|&a, &b| by_value(&candidates[a], &candidates[b]));
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacingState {
    pub spend_so_far: f64,
    pub multiplier: f64,
    pub slot_index: u32,
}

impl Default for PacingState {
    fn default() -> Self {
        PacingState {
            spend_so_far: 0.0,
            multiplier: MAX_MULTIPLIER,
            slot_index: 0,
        }
    }
}

impl PacingState {
    pub fn exhausted(&self, config: &CampaignConfig) -> bool {
        self.spend_so_far >= config.daily_budget
    }

    pub fn effective_bid(&self, config: &CampaignConfig) -> f64 {
        config.bid.base(config.goal) * self.multiplier
    }
}

/// One step of the multiplicative pacing controller. `elapsed_fraction` is
/// the share of the pacing day that has passed.
pub fn pace(state: &mut PacingState, config: &CampaignConfig, elapsed_fraction: f64) -> f64 {
    let elapsed = elapsed_fraction.clamp(0.0, 1.0);
    if config.daily_budget > 0.0 {
        let ratio = state.spend_so_far / config.daily_budget;
        if ratio > elapsed {
            state.multiplier *= PACING_STEP;
        } else if ratio < elapsed {
            state.multiplier /= PACING_STEP;
        }
        state.multiplier = state.multiplier.clamp(MIN_MULTIPLIER, MAX_MULTIPLIER);
    }
    state.multiplier
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Opportunity {
    /// Index into the population slice.
    pub user: usize,
    pub slot: u32,
    pub tick: u64,
    pub placement: Placement,
}

/// Expected opportunities per slot from login recency.
pub fn base_activity_rate(u: &UserProfile) -> f64 {
    if u.active_1d {
        0.35
    } else if u.active_7d {
        0.12
    } else if u.active_28d {
        0.04
    } else {
        0.01
    }
}

/// Time-of-day modulation: younger users peak late in the day.
pub fn time_of_day_factor(u: &UserProfile, slot: u32, slots_per_day: u32) -> f64 {
    let spd = slots_per_day.max(1) as f64;
    let phase = std::f64::consts::TAU * (slot as f64 % spd) / spd;
    let peak = std::f64::consts::TAU * (1.0 - u.age_bin as f64 / AGE_BINS as f64);
    1.0 + 0.5 * (phase - peak).cos()
}

/// Probability an opportunity lands on the feed: higher for older users,
/// lower on iOS.
pub fn feed_share(u: &UserProfile) -> f64 {
    let ios = if u.os_ios { 1.0 } else { 0.0 };
    (0.7 - 0.1 * ios + 0.1 * (u.age_bin as f64 - 2.5)).clamp(0.2, 0.95)
}

pub fn generate_opportunities(
    population: &[UserProfile],
    horizon_slots: u32,
    slots_per_day: u32,
    seed: u64,
) -> Vec<Opportunity> {
    let mut opps: Vec<Opportunity> = population
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, u)| {
            let mut rng = substream(seed, i as u64);
            let base = base_activity_rate(u);
            let feed = feed_share(u);
            let mut out = Vec::new();
            for slot in 0..horizon_slots {
                let rate = base * time_of_day_factor(u, slot, slots_per_day);
                let n = Poisson::new(rate).map_or(0.0, |p| p.sample(&mut rng)) as u64;
                for _ in 0..n {
                    let tick = slot as u64 * TICKS_PER_SLOT + rng.random_range(0..TICKS_PER_SLOT);
                    let placement = if rng.random_bool(feed) {
                        Placement::Feed
                    } else {
                        Placement::OtherSurface
                    };
                    out.push(Opportunity {
                        user: i,
                        slot,
                        tick,
                        placement,
                    });
                }
            }
            out
        })
        .collect();
    opps.sort_by_key(|o| (o.tick, o.user));
    opps
}

/// Eligibility of a focal campaign for one opportunity.
pub fn eligible(
    config: &CampaignConfig,
    user: &UserProfile,
    opportunity: &Opportunity,
    impressions_so_far: u32,
    slots_per_day: u32,
    assignment_ok: bool,
) -> bool {
    assignment_ok
        && config.audience.matches(user)
        && config.placements.allows(opportunity.placement)
        && config.schedule.is_active(opportunity.slot, slots_per_day)
        && config.frequency_cap.is_none_or(|cap| impressions_so_far < cap)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RelevanceMode {
    #[default]
    OracleNoise,
    OnlineLearner,
}

impl std::str::FromStr for RelevanceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ORACLE_NOISE" => Ok(RelevanceMode::OracleNoise),
            "ONLINE_LEARNER" => Ok(RelevanceMode::OnlineLearner),
            other => Err(invalid(format!("unknown relevance mode `{other}`"))),
        }
    }
}

/// Coarse segment of a user for the online learner: a 3 x 3 grid over the
/// first two embedding coordinates.
pub fn learner_segment(u: &UserProfile) -> usize {
    let q = |x: f64| -> usize {
        if x < -0.5 {
            0
        } else if x < 0.5 {
            1
        } else {
            2
        }
    };
    let e0 = u.embedding.first().copied().unwrap_or(0.0);
    let e1 = u.embedding.get(1).copied().unwrap_or(0.0);
    3 * q(e0) + q(e1)
}

pub const LEARNER_SEGMENTS: usize = 9;

/// Beta-Bernoulli rate estimates per learner segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentLearner {
    prior_alpha: f64,
    prior_beta: f64,
    successes: [f64; LEARNER_SEGMENTS],
    trials: [f64; LEARNER_SEGMENTS],
}

impl SegmentLearner {
    pub fn new(prior_mean: f64, prior_strength: f64) -> Self {
        SegmentLearner {
            prior_alpha: prior_mean * prior_strength,
            prior_beta: (1.0 - prior_mean) * prior_strength,
            successes: [0.0; LEARNER_SEGMENTS],
            trials: [0.0; LEARNER_SEGMENTS],
        }
    }

    pub fn prior_mean(&self) -> f64 {
        self.prior_alpha / (self.prior_alpha + self.prior_beta)
    }

    pub fn posterior_mean(&self, segment: usize) -> f64 {
        (self.prior_alpha + self.successes[segment]) / (self.prior_alpha + self.prior_beta + self.trials[segment])
    }

    pub fn observations(&self, segment: usize) -> f64 {
        self.trials[segment]
    }

    /// Thompson draw from the segment posterior.
    pub fn sample<R: Rng + ?Sized>(&self, segment: usize, rng: &mut R) -> f64 {
        let a = self.prior_alpha + self.successes[segment];
        let b = self.prior_beta + self.trials[segment] - self.successes[segment];
        Beta::new(a, b).map_or(self.posterior_mean(segment), |d| d.sample(rng))
    }

    pub fn observe(&mut self, segment: usize, success: bool) {
        self.trials[segment] += 1.0;
        if success {
            self.successes[segment] += 1.0;
        }
    }
}

/// Per-campaign relevance state: outcome learner for the campaign goal and
/// an engagement learner that video creatives feed back through.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevancePredictor {
    pub mode: RelevanceMode,
    pub outcome: SegmentLearner,
    pub engagement: SegmentLearner,
}

impl RelevancePredictor {
    pub fn new(mode: RelevanceMode, model: &ResponseModel, goal: Goal) -> Self {
        let click_prior = crate::population::logistic(model.click_bias);
        let conv_prior = crate::population::logistic(model.conv_bias);
        let outcome_prior = match goal {
            Goal::Conversion => conv_prior,
            _ => click_prior,
        };
        RelevancePredictor {
            mode,
            outcome: SegmentLearner::new(outcome_prior, 20.0),
            engagement: SegmentLearner::new(click_prior, 20.0),
        }
    }

    /// Record an observed impression outcome.
    pub fn observe(&mut self, user: &UserProfile, goal: Goal, clicked: bool, converted: bool) {
        let seg = learner_segment(user);
        self.engagement.observe(seg, clicked);
        let success = match goal {
            Goal::Conversion => converted,
            _ => clicked,
        };
        self.outcome.observe(seg, success);
    }
}

/// Relevance score of `config`'s ad for `user`.
///
/// `latent` is `(p_click, p_conv)` from [`response_probs`]; pass `None` to
/// have it computed here. Reach-optimized image ads score a constant; video
/// ads additionally feed engagement back into the score.
pub fn predict_relevance<R: Rng + ?Sized>(
    predictor: &RelevancePredictor,
    model: &ResponseModel,
    user: &UserProfile,
    config: &CampaignConfig,
    latent: Option<(f64, f64)>,
    noise_rng: &mut R,
) -> Result<f64> {
    if config.goal == Goal::Awareness {
        if config.creative.kind == CreativeKind::Video {
            let l = &predictor.engagement;
            let lift = (l.posterior_mean(learner_segment(user)) / l.prior_mean()).clamp(0.25, 4.0);
            return Ok(AWARENESS_RELEVANCE * lift);
        }
        return Ok(AWARENESS_RELEVANCE);
    }
    match predictor.mode {
        RelevanceMode::OracleNoise => {
            let (p_click, p_conv) = match latent {
                Some(l) => l,
                None => response_probs(model, user, &config.creative.vector)?,
            };
            let p = if config.goal == Goal::Conversion {
                p_conv
            } else {
                p_click
            };
            if model.noise_sd == 0.0 {
                return Ok(p);
            }
            let z: f64 = noise_rng.sample(StandardNormal);
            Ok(p * (model.noise_sd * z).exp())
        }
        RelevanceMode::OnlineLearner => Ok(predictor.outcome.sample(learner_segment(user), noise_rng)),
    }
}

/// Competing ads outside the experiment. Each of the `n_ads` draws a fresh
/// lognormal total value per auction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundPool {
    pub n_ads: u32,
    pub median_value: f64,
    pub log_sd: f64,
}

impl Default for BackgroundPool {
    fn default() -> Self {
        BackgroundPool {
            n_ads: 20,
            median_value: 0.05,
            log_sd: 0.6,
        }
    }
}

impl BackgroundPool {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<AdCandidate>) {
        if self.n_ads == 0 {
            return;
        }
        let dist = LogNormal::new(self.median_value.ln(), self.log_sd).expect("valid pool");
        for j in 0..self.n_ads {
            out.push(AdCandidate::new(BACKGROUND_ID_BASE + j, dist.sample(rng), 1.0));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub horizon_slots: u32,
    pub slots_per_day: u32,
    pub background: BackgroundPool,
    pub relevance_mode: RelevanceMode,
    /// Opportunities between pacing controller updates.
    pub pacing_interval: u32,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            horizon_slots: 28,
            slots_per_day: 4,
            background: BackgroundPool::default(),
            relevance_mode: RelevanceMode::OracleNoise,
            pacing_interval: 64,
            seed: 0,
        }
    }
}

/// How focal campaigns may interact with users, per test type.
#[derive(Debug, Clone, PartialEq)]
pub enum Routing {
    /// `cell[u]` is the campaign index the user belongs to (if any);
    /// `holdout[u]` marks control users whose wins are suppressed.
    Ghost {
        cell: Vec<Option<usize>>,
        holdout: Vec<bool>,
    },
    /// Every assigned user is auctioned by all cells' campaigns; only the
    /// user's own cell may display.
    CrossCell { cell: Vec<Option<usize>> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    None,
    Display,
    Suppress,
}

impl Routing {
    pub fn access(&self, user: usize, campaign: usize) -> Access {
        match self {
            Routing::Ghost { cell, holdout } => match cell[user] {
                Some(c) if c == campaign => {
                    if holdout[user] {
                        Access::Suppress
                    } else {
                        Access::Display
                    }
                }
                _ => Access::None,
            },
            Routing::CrossCell { cell } => match cell[user] {
                Some(c) if c == campaign => Access::Display,
                Some(_) => Access::Suppress,
                None => Access::None,
            },
        }
    }

    fn is_assigned(&self, user: usize) -> bool {
        match self {
            Routing::Ghost { cell, .. } | Routing::CrossCell { cell } => cell[user].is_some(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exposure {
    pub campaign_id: u32,
    pub cell_id: u32,
    pub user: usize,
    pub user_id: u64,
    pub slot: u32,
    pub tick: u64,
    pub placement: Placement,
    pub price: f64,
    pub clicked: bool,
    pub converted: bool,
    pub attributed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ConversionSource {
    Attributed,
    Organic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversion {
    pub user: usize,
    pub tick: u64,
    pub source: ConversionSource,
    /// Campaign index for attributed conversions.
    pub campaign: Option<usize>,
}

/// A win by a focal campaign, displayed or not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReachEvent {
    pub campaign: usize,
    pub user: usize,
    pub tick: u64,
    pub suppressed: bool,
}

#[derive(Debug, Clone)]
pub struct CampaignState {
    pub config: CampaignConfig,
    pub cell_id: u32,
    pub pacing: PacingState,
    pub total_spend: f64,
    pub impressions: u64,
    pub freq: Vec<u32>,
    pub predictor: RelevancePredictor,
    latent: Vec<(f64, f64)>,
}

pub struct World<'a> {
    pub users: &'a [UserProfile],
    pub model: &'a ResponseModel,
    pub config: WorldConfig,
    pub campaigns: Vec<CampaignState>,
    pub routing: Routing,
    pub opportunities: Vec<Opportunity>,
    pub exposures: Vec<Exposure>,
    pub conversions: Vec<Conversion>,
    pub reach: Vec<ReachEvent>,
    rng: ChaCha8Rng,
    next_opportunity: usize,
    processed: u64,
    current_day: u32,
}

impl<'a> World<'a> {
    /// Build a world. `campaigns[i]` is paired with `cell_ids[i]`.
    pub fn new(
        users: &'a [UserProfile],
        model: &'a ResponseModel,
        config: WorldConfig,
        campaigns: Vec<(u32, CampaignConfig)>,
        routing: Routing,
    ) -> Result<Self> {
        model.validate()?;
        if config.horizon_slots > 0 && config.slots_per_day == 0 {
            return Err(invalid("slots_per_day must be positive"));
        }
        let n = users.len();
        let routed = match &routing {
            Routing::Ghost { cell, holdout } => {
                if holdout.len() != n {
                    return Err(invalid("routing holdout length differs from population"));
                }
                cell.len()
            }
            Routing::CrossCell { cell } => cell.len(),
        };
        if routed != n {
            return Err(invalid("routing length differs from population"));
        }
        let mut states = Vec::with_capacity(campaigns.len());
        for (cell_id, cfg) in campaigns {
            cfg.validate(model.dim())?;
            let latent = users
                .par_iter()
                .map(|u| response_probs(model, u, &cfg.creative.vector))
                .collect::<Result<Vec<_>>>()?;
            states.push(CampaignState {
                predictor: RelevancePredictor::new(config.relevance_mode, model, cfg.goal),
                config: cfg,
                cell_id,
                pacing: PacingState::default(),
                total_spend: 0.0,
                impressions: 0,
                freq: vec![0; n],
                latent,
            });
        }
        let opportunities = generate_opportunities(users, config.horizon_slots, config.slots_per_day, config.seed);
        let mut rng = substream(config.seed, u64::MAX);
        let horizon_ticks = config.horizon_slots as u64 * TICKS_PER_SLOT;
        let mut conversions = Vec::new();
        if horizon_ticks > 0 {
            for u in 0..n {
                if routing.is_assigned(u) && model.organic_conversion(&mut rng) {
                    conversions.push(Conversion {
                        user: u,
                        tick: rng.random_range(0..horizon_ticks),
                        source: ConversionSource::Organic,
                        campaign: None,
                    });
                }
            }
        }
        Ok(World {
            users,
            model,
            config,
            campaigns: states,
            routing,
            opportunities,
            exposures: Vec::new(),
            conversions,
            reach: Vec::new(),
            rng,
            next_opportunity: 0,
            processed: 0,
            current_day: 0,
        })
    }

    fn day_fraction(&self, tick: u64) -> f64 {
        let day_ticks = self.config.slots_per_day as u64 * TICKS_PER_SLOT;
        (tick % day_ticks) as f64 / day_ticks as f64
    }

    fn start_day(&mut self, day: u32) {
        self.current_day = day;
        for c in &mut self.campaigns {
            c.pacing.spend_so_far = 0.0;
        }
    }

    /// Run every opportunity belonging to `slot`. Slots must be simulated in
    /// increasing order.
    pub fn simulate_slot(&mut self, slot: u32) {
        let day = slot / self.config.slots_per_day.max(1);
        if day != self.current_day {
            self.start_day(day);
        }
        for c in &mut self.campaigns {
            c.pacing.slot_index = slot;
        }
        let mut candidates: Vec<AdCandidate> = Vec::with_capacity(32);
        let mut owners: Vec<usize> = Vec::with_capacity(8);
        while self.next_opportunity < self.opportunities.len() && self.opportunities[self.next_opportunity].slot <= slot
        {
            let opp = self.opportunities[self.next_opportunity];
            self.next_opportunity += 1;
            if opp.slot < slot {
                continue;
            }
            self.processed += 1;
            if self.processed.is_multiple_of(self.config.pacing_interval.max(1) as u64) {
                let frac = self.day_fraction(opp.tick);
                for c in &mut self.campaigns {
                    pace(&mut c.pacing, &c.config, frac);
                }
            }
            candidates.clear();
            owners.clear();
            self.collect_focal(&opp, &mut candidates, &mut owners);
            if candidates.is_empty() {
                continue;
            }
            self.config.background.draw(&mut self.rng, &mut candidates);
            self.resolve_auction(&opp, &candidates, &owners);
        }
    }

    fn collect_focal(&mut self, opp: &Opportunity, candidates: &mut Vec<AdCandidate>, owners: &mut Vec<usize>) {
        let user = &self.users[opp.user];
        let spd = self.config.slots_per_day;
        for (ci, c) in self.campaigns.iter().enumerate() {
            let access = self.routing.access(opp.user, ci);
            if access == Access::None || c.pacing.exhausted(&c.config) {
                continue;
            }
            if !eligible(&c.config, user, opp, c.freq[opp.user], spd, true) {
                continue;
            }
            let rel = predict_relevance(
                &c.predictor,
                self.model,
                user,
                &c.config,
                Some(c.latent[opp.user]),
                &mut self.rng,
            )
            .expect("latent probabilities are precomputed");
            let rel = if opp.placement == Placement::OtherSurface {
                rel * c.config.creative.other_surface_affinity()
            } else {
                rel
            };
            candidates.push(AdCandidate::new(
                c.config.campaign_id,
                c.pacing.effective_bid(&c.config),
                rel,
            ));
            owners.push(ci);
        }
    }

    fn resolve_auction(&mut self, opp: &Opportunity, candidates: &[AdCandidate], owners: &[usize]) {
        for idx in rank_candidates(candidates) {
            if candidates[idx].is_background() {
                return;
            }
            let ci = owners[idx];
            match self.routing.access(opp.user, ci) {
                Access::Display => {
                    self.reach.push(ReachEvent {
                        campaign: ci,
                        user: opp.user,
                        tick: opp.tick,
                        suppressed: false,
                    });
                    self.impress(opp, ci, candidates[idx].bid);
                    return;
                }
                Access::Suppress => {
                    // Ghost wins count toward frequency so capped delivery
                    // stays symmetric between test and control.
                    if matches!(self.routing, Routing::Ghost { .. }) {
                        self.campaigns[ci].freq[opp.user] += 1;
                    }
                    self.reach.push(ReachEvent {
                        campaign: ci,
                        user: opp.user,
                        tick: opp.tick,
                        suppressed: true,
                    });
                }
                Access::None => unreachable!("ineligible campaigns never enter the auction"),
            }
        }
    }

    fn impress(&mut self, opp: &Opportunity, ci: usize, price: f64) {
        let user = &self.users[opp.user];
        let effect = self.model.exposure_effect;
        let c = &mut self.campaigns[ci];
        let (p_click, p_conv) = c.latent[opp.user];
        let clicked = self.rng.random_bool(p_click.clamp(0.0, 1.0));
        let converted = self.rng.random_bool((p_conv * effect).clamp(0.0, 1.0));
        c.pacing.spend_so_far += price;
        c.total_spend += price;
        c.impressions += 1;
        c.freq[opp.user] += 1;
        c.predictor.observe(user, c.config.goal, clicked, converted);
        self.exposures.push(Exposure {
            campaign_id: c.config.campaign_id,
            cell_id: c.cell_id,
            user: opp.user,
            user_id: user.user_id,
            slot: opp.slot,
            tick: opp.tick,
            placement: opp.placement,
            price,
            clicked,
            converted,
            attributed: converted,
        });
        if converted {
            self.conversions.push(Conversion {
                user: opp.user,
                tick: opp.tick + 1,
                source: ConversionSource::Attributed,
                campaign: Some(ci),
            });
        }
    }

    pub fn run(&mut self) {
        for slot in 0..self.config.horizon_slots {
            self.simulate_slot(slot);
        }
    }
}

/// Write exposures in the delivery CSV schema. `group` labels each row,
/// e.g. `test`/`control` or the A/B cell.
pub fn write_exposures_csv<W: Write>(
    exposures: &[Exposure],
    group: impl Fn(&Exposure) -> String,
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "campaign_id",
        "cell_id",
        "user_id",
        "slot",
        "placement",
        "price",
        "clicked",
        "converted",
        "attributed",
        "group",
    ])?;
    for e in exposures {
        w.write_record([
            e.campaign_id.to_string(),
            e.cell_id.to_string(),
            e.user_id.to_string(),
            e.slot.to_string(),
            e.placement.as_str().to_string(),
            e.price.to_string(),
            (e.clicked as u8).to_string(),
            (e.converted as u8).to_string(),
            (e.attributed as u8).to_string(),
            group(e),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::{generate_population, PopulationConfig};

    fn users(n: usize) -> Vec<UserProfile> {
        generate_population(&PopulationConfig::standard(n, 8, 1)).unwrap()
    }

    fn campaign(id: u32, goal: Goal, dim: usize) -> CampaignConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(id as u64);
        CampaignConfig {
            campaign_id: id,
            goal,
            audience: Audience::everyone(),
            daily_budget: 1e9,
            bid: Bid::Fixed(goal.reference_bid()),
            placements: Placements::Auto,
            schedule: Schedule::Always,
            frequency_cap: None,
            creative: Creative::random(CreativeKind::StaticImage, dim, &mut rng),
        }
    }

    #[test]
    fn auction_single_candidate() {
        let c = [AdCandidate::new(3, 1.0, 0.5)];
        assert_eq!(run_auction(&c).unwrap(), (0, None));
        assert!(run_auction(&[]).is_err());
    }

    #[test]
    fn auction_ranks_by_bid_times_relevance() {
        // 2.0 * 0.1 = 0.2 < 1.0 * 0.3 = 0.3
        let c = [AdCandidate::new(1, 2.0, 0.1), AdCandidate::new(2, 1.0, 0.3)];
        assert_eq!(run_auction(&c).unwrap(), (1, Some(0)));
    }

    #[test]
    fn auction_ties_go_to_lower_id() {
        let c = [
            AdCandidate::new(9, 1.0, 0.5),
            AdCandidate::new(4, 0.5, 1.0),
            AdCandidate::new(7, 0.1, 0.1),
        ];
        assert_eq!(run_auction(&c).unwrap(), (1, Some(0)));
        assert_eq!(rank_candidates(&c), vec![1, 0, 2]);
    }

    #[test]
    fn eligibility_rules() {
        let us = users(200);
        let mut cfg = campaign(1, Goal::Awareness, 8);
        let u = &us[0];
        let opp = Opportunity {
            user: 0,
            slot: 1,
            tick: TICKS_PER_SLOT,
            placement: Placement::Feed,
        };
        assert!(eligible(&cfg, u, &opp, 0, 4, true));
        assert!(!eligible(&cfg, u, &opp, 0, 4, false));

        cfg.frequency_cap = Some(1);
        assert!(eligible(&cfg, u, &opp, 0, 4, true));
        assert!(!eligible(&cfg, u, &opp, 1, 4, true));

        cfg.audience.male = Some(!u.gender_male);
        assert!(!eligible(&cfg, u, &opp, 0, 4, true));
        cfg.audience = Audience::everyone();

        cfg.placements = Placements::Manual(vec![Placement::OtherSurface]);
        assert!(!eligible(&cfg, u, &opp, 0, 4, true));
        cfg.placements = Placements::Auto;

        cfg.schedule = Schedule::DaySlots(vec![0, 2]);
        assert!(!eligible(&cfg, u, &opp, 0, 4, true));
    }

    #[test]
    fn awareness_relevance_is_constant() {
        let us = users(50);
        let model = ResponseModel::standard(8, 0);
        let cfg = campaign(1, Goal::Awareness, 8);
        let pred = RelevancePredictor::new(RelevanceMode::OracleNoise, &model, cfg.goal);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for u in &us {
            let r = predict_relevance(&pred, &model, u, &cfg, None, &mut rng).unwrap();
            assert_eq!(r, AWARENESS_RELEVANCE);
        }
    }

    #[test]
    fn oracle_without_noise_is_exact() {
        let us = users(20);
        let mut model = ResponseModel::standard(8, 0);
        model.noise_sd = 0.0;
        let cfg = campaign(2, Goal::Conversion, 8);
        let pred = RelevancePredictor::new(RelevanceMode::OracleNoise, &model, cfg.goal);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for u in &us {
            let r = predict_relevance(&pred, &model, u, &cfg, None, &mut rng).unwrap();
            let (_, p_conv) = response_probs(&model, u, &cfg.creative.vector).unwrap();
            assert_eq!(r, p_conv);
        }
        let traffic = CampaignConfig {
            goal: Goal::Traffic,
            ..cfg
        };
        let r = predict_relevance(&pred, &model, &us[0], &traffic, None, &mut rng).unwrap();
        assert_eq!(r, response_probs(&model, &us[0], &traffic.creative.vector).unwrap().0);
    }

    #[test]
    fn learner_starts_at_prior() {
        let model = ResponseModel::standard(8, 0);
        let pred = RelevancePredictor::new(RelevanceMode::OnlineLearner, &model, Goal::Traffic);
        let prior = crate::population::logistic(model.click_bias);
        for s in 0..LEARNER_SEGMENTS {
            assert!((pred.outcome.posterior_mean(s) - prior).abs() < 1e-12);
            assert_eq!(pred.outcome.observations(s), 0.0);
        }
    }

    #[test]
    fn learner_moves_toward_observed_rate() {
        let mut l = SegmentLearner::new(0.05, 20.0);
        for i in 0..1000 {
            l.observe(4, i % 2 == 0);
        }
        assert!((l.posterior_mean(4) - 0.5).abs() < 0.02);
        assert!((l.posterior_mean(0) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn pacing_equilibrium_and_direction() {
        let cfg = CampaignConfig {
            daily_budget: 100.0,
            ..campaign(1, Goal::Awareness, 8)
        };
        let mut s = PacingState {
            spend_so_far: 50.0,
            multiplier: 0.5,
            slot_index: 0,
        };
        assert_eq!(pace(&mut s, &cfg, 0.5), 0.5);
        assert!(pace(&mut s, &cfg, 0.4) < 0.5);
        let mut s = PacingState {
            spend_so_far: 10.0,
            multiplier: 0.99,
            slot_index: 0,
        };
        assert_eq!(pace(&mut s, &cfg, 0.5), 1.0);
    }

    #[test]
    fn overspending_halves_multiplier_within_ten_steps() {
        let cfg = CampaignConfig {
            daily_budget: 100.0,
            ..campaign(1, Goal::Awareness, 8)
        };
        let mut s = PacingState {
            spend_so_far: 80.0,
            multiplier: 1.0,
            slot_index: 0,
        };
        let steps = (1..=10)
            .find(|_| pace(&mut s, &cfg, 0.2) <= 0.5)
            .expect("multiplier should halve");
        assert!(steps <= 10);
        // step response: 0.9^k <= 0.5 first at k = 7
        assert_eq!(steps, 7);
    }

    #[test]
    fn exhausted_budget_blocks_bidding() {
        let cfg = CampaignConfig {
            daily_budget: 10.0,
            ..campaign(1, Goal::Awareness, 8)
        };
        let s = PacingState {
            spend_so_far: 10.0,
            multiplier: 1.0,
            slot_index: 0,
        };
        assert!(s.exhausted(&cfg));
    }

    #[test]
    fn empty_horizon_has_no_opportunities() {
        assert!(generate_opportunities(&users(100), 0, 4, 1).is_empty());
    }

    #[test]
    fn opportunity_stream_is_deterministic_and_ordered() {
        let us = users(500);
        let a = generate_opportunities(&us, 8, 4, 3);
        let b = generate_opportunities(&us, 8, 4, 3);
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0].tick <= w[1].tick));
        assert!(a.iter().all(|o| o.tick / TICKS_PER_SLOT == o.slot as u64));
    }

    #[test]
    fn creative_hash_distinguishes_vectors() {
        let a = Creative::new(CreativeKind::StaticImage, vec![1.0, 2.0]);
        let b = Creative::new(CreativeKind::StaticImage, vec![1.0, 2.0]);
        let c = Creative::new(CreativeKind::StaticImage, vec![1.0, 2.5]);
        assert_eq!(a.hash, b.hash);
        assert_ne!(a.hash, c.hash);
        let aff = a.other_surface_affinity();
        assert!((0.5..1.5).contains(&aff));
    }
}
