//! Synthetic user population and the latent response model.
//!
//! Users are drawn from a mixture of segments. Each segment has its own
//! structured-feature distribution and its own embedding centroid, so the
//! structured features and the embedding are correlated through segment
//! membership. The response model scores a user against a creative with a
//! bilinear form, which gives each creative its own "ideal" audience.

use std::io::{Read, Write};

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{splitmix64, substream};

pub const AGE_BINS: usize = 6;
pub const N_STRUCTURED: usize = 14;
pub const DEFAULT_DIM: usize = 72;

/// Structured feature names, in the canonical column order.
pub const STRUCTURED_FEATURES: [&str; N_STRUCTURED] = [
    "male",
    "age_18_24",
    "age_25_34",
    "age_35_44",
    "age_45_54",
    "age_55_64",
    "age_65_plus",
    "ios",
    "english",
    "america",
    "friend_count",
    "active_1d",
    "active_7d",
    "active_28d",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: u64,
    /// Latent mixture component. Not part of the exported CSV.
    #[serde(default)]
    pub segment: usize,
    pub gender_male: bool,
    /// Ordinal age bin in `0..AGE_BINS`.
    pub age_bin: u8,
    pub os_ios: bool,
    pub lang_english: bool,
    pub loc_america: bool,
    pub friend_count: u32,
    pub active_1d: bool,
    pub active_7d: bool,
    pub active_28d: bool,
    pub embedding: Vec<f64>,
}

fn b(x: bool) -> f64 {
    if x {
        1.0
    } else {
        0.0
    }
}

impl UserProfile {
    /// The 14 structured features as reals, in [`STRUCTURED_FEATURES`] order.
    pub fn structured_features(&self) -> [f64; N_STRUCTURED] {
        let mut out = [0.0; N_STRUCTURED];
        out[0] = b(self.gender_male);
        out[1 + self.age_bin as usize] = 1.0;
        out[7] = b(self.os_ios);
        out[8] = b(self.lang_english);
        out[9] = b(self.loc_america);
        out[10] = self.friend_count as f64;
        out[11] = b(self.active_1d);
        out[12] = b(self.active_7d);
        out[13] = b(self.active_28d);
        out
    }

    /// Structured features followed by the embedding.
    pub fn write_feature_row(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.structured_features());
        out.extend_from_slice(&self.embedding);
    }

    pub fn dim(&self) -> usize {
        self.embedding.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentParams {
    pub weight: f64,
    pub p_male: f64,
    pub age_probs: [f64; AGE_BINS],
    pub p_ios: f64,
    pub p_english: f64,
    pub p_america: f64,
    pub friends_log_mean: f64,
    pub friends_log_sd: f64,
    pub p_active_28d: f64,
    pub p_active_7d_given_28d: f64,
    pub p_active_1d_given_7d: f64,
    pub embedding_mean: Vec<f64>,
    #[serde(default = "one")]
    pub embedding_sd: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationConfig {
    pub n_users: usize,
    pub dim: usize,
    pub segments: Vec<SegmentParams>,
    /// Loading of centred age and gender onto the first two embedding axes.
    #[serde(default)]
    pub structured_loading: f64,
    pub seed: u64,
}

impl PopulationConfig {
    /// Four-segment population used by the presets.
    pub fn standard(n_users: usize, dim: usize, seed: u64) -> Self {
        // Centroids come from a fixed stream so segment geometry does not
        // change with the population seed.
        let mut geo = ChaCha8Rng::seed_from_u64(0x5eed_ce17);
        let mut centroid =
            |scale: f64| -> Vec<f64> { (0..dim).map(|_| scale * geo.sample::<f64, _>(StandardNormal)).collect() };
        let segments = vec![
            SegmentParams {
                weight: 0.3,
                p_male: 0.55,
                age_probs: [0.35, 0.35, 0.15, 0.08, 0.05, 0.02],
                p_ios: 0.6,
                p_english: 0.8,
                p_america: 0.5,
                friends_log_mean: 5.5,
                friends_log_sd: 0.8,
                p_active_28d: 0.95,
                p_active_7d_given_28d: 0.9,
                p_active_1d_given_7d: 0.75,
                embedding_mean: centroid(0.6),
                embedding_sd: 1.0,
            },
            SegmentParams {
                weight: 0.3,
                p_male: 0.45,
                age_probs: [0.05, 0.2, 0.35, 0.25, 0.1, 0.05],
                p_ios: 0.45,
                p_english: 0.7,
                p_america: 0.4,
                friends_log_mean: 5.0,
                friends_log_sd: 0.8,
                p_active_28d: 0.9,
                p_active_7d_given_28d: 0.8,
                p_active_1d_given_7d: 0.55,
                embedding_mean: centroid(0.6),
                embedding_sd: 1.0,
            },
            SegmentParams {
                weight: 0.2,
                p_male: 0.4,
                age_probs: [0.02, 0.05, 0.13, 0.25, 0.3, 0.25],
                p_ios: 0.3,
                p_english: 0.75,
                p_america: 0.35,
                friends_log_mean: 4.5,
                friends_log_sd: 0.9,
                p_active_28d: 0.8,
                p_active_7d_given_28d: 0.65,
                p_active_1d_given_7d: 0.4,
                embedding_mean: centroid(0.6),
                embedding_sd: 1.0,
            },
            SegmentParams {
                weight: 0.2,
                p_male: 0.6,
                age_probs: [0.3, 0.4, 0.18, 0.08, 0.03, 0.01],
                p_ios: 0.25,
                p_english: 0.3,
                p_america: 0.1,
                friends_log_mean: 5.2,
                friends_log_sd: 0.8,
                p_active_28d: 0.9,
                p_active_7d_given_28d: 0.8,
                p_active_1d_given_7d: 0.6,
                embedding_mean: centroid(0.6),
                embedding_sd: 1.0,
            },
        ];
        PopulationConfig {
            n_users,
            dim,
            segments,
            structured_loading: 0.3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 {
            return Err(invalid("n_users must be at least 1"));
        }
        if self.dim == 0 {
            return Err(invalid("embedding dimension must be positive"));
        }
        if self.segments.is_empty() {
            return Err(invalid("at least one segment is required"));
        }
        let total: f64 = self.segments.iter().map(|s| s.weight).sum();
        if (total - 1.0).abs() > 1e-9 || self.segments.iter().any(|s| s.weight < 0.0) {
            return Err(invalid(format!(
                "segment weights must be nonnegative and sum to 1 (got {total})"
            )));
        }
        for (i, s) in self.segments.iter().enumerate() {
            if s.embedding_mean.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    got: s.embedding_mean.len(),
                });
            }
            let age_total: f64 = s.age_probs.iter().sum();
            if (age_total - 1.0).abs() > 1e-9 {
                return Err(invalid(format!("segment {i}: age_probs must sum to 1")));
            }
            let probs = [
                s.p_male,
                s.p_ios,
                s.p_english,
                s.p_america,
                s.p_active_28d,
                s.p_active_7d_given_28d,
                s.p_active_1d_given_7d,
            ];
            if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(invalid(format!("segment {i}: probabilities must lie in [0, 1]")));
            }
            if s.friends_log_sd < 0.0 || s.embedding_sd < 0.0 {
                return Err(invalid(format!("segment {i}: negative scale parameter")));
            }
        }
        Ok(())
    }
}

fn draw_user(config: &PopulationConfig, seg_dist: &WeightedIndex<f64>, index: usize) -> UserProfile {
    let mut rng = substream(config.seed, index as u64);
    let segment = seg_dist.sample(&mut rng);
    let s = &config.segments[segment];
    let gender_male = rng.random_bool(s.p_male);
    let age_bin = WeightedIndex::new(s.age_probs)
        .expect("validated age probabilities")
        .sample(&mut rng) as u8;
    let os_ios = rng.random_bool(s.p_ios);
    let lang_english = rng.random_bool(s.p_english);
    let loc_america = rng.random_bool(s.p_america);
    let log_friends: f64 = Normal::new(s.friends_log_mean, s.friends_log_sd)
        .expect("validated scale")
        .sample(&mut rng);
    let friend_count = log_friends.exp().floor().clamp(0.0, 5000.0) as u32;
    let active_28d = rng.random_bool(s.p_active_28d);
    let active_7d = active_28d && rng.random_bool(s.p_active_7d_given_28d);
    let active_1d = active_7d && rng.random_bool(s.p_active_1d_given_7d);
    let mut embedding: Vec<f64> = s
        .embedding_mean
        .iter()
        .map(|m| m + s.embedding_sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    if config.structured_loading != 0.0 {
        embedding[0] += config.structured_loading * (age_bin as f64 - 2.5) / 1.7;
        if embedding.len() > 1 {
            embedding[1] += config.structured_loading * if gender_male { 1.0 } else { -1.0 };
        }
    }
    UserProfile {
        // splitmix64 is a bijection, so distinct indices give distinct ids.
        user_id: splitmix64((index as u64).wrapping_add(config.seed.rotate_left(29))),
        segment,
        gender_male,
        age_bin,
        os_ios,
        lang_english,
        loc_america,
        friend_count,
        active_1d,
        active_7d,
        active_28d,
        embedding,
    }
}

/// Draw `config.n_users` profiles. Each user has its own RNG substream, so
/// the output is identical whether generation runs serially or in parallel.
pub fn generate_population(config: &PopulationConfig) -> Result<Vec<UserProfile>> {
    config.validate()?;
    let weights: Vec<f64> = config.segments.iter().map(|s| s.weight).collect();
    let seg_dist = WeightedIndex::new(&weights).map_err(|e| invalid(e.to_string()))?;
    Ok((0..config.n_users)
        .into_par_iter()
        .map(|i| draw_user(config, &seg_dist, i))
        .collect())
}

/// Ground-truth behaviour of users towards creatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseModel {
    pub click_weight: Vec<f64>,
    pub conv_weight: Vec<f64>,
    pub click_bias: f64,
    pub conv_bias: f64,
    /// Probability that a user converts organically during the horizon.
    pub organic_rate: f64,
    /// Log-scale noise on oracle relevance predictions.
    pub noise_sd: f64,
    /// Multiplier on the conversion probability realised by an impression.
    /// `0.0` makes every creative causally inert.
    #[serde(default = "one")]
    pub exposure_effect: f64,
}

impl ResponseModel {
    pub fn standard(dim: usize, seed: u64) -> Self {
        let mut rng = substream(seed, 0x7e5_90e5);
        let click_scale = 0.9 / (dim as f64).sqrt();
        let conv_scale = 1.2 / (dim as f64).sqrt();
        let click_weight = (0..dim)
            .map(|_| click_scale * (1.0 + 0.5 * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let conv_weight = (0..dim)
            .map(|_| conv_scale * (1.0 + 0.5 * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        ResponseModel {
            click_weight,
            conv_weight,
            click_bias: -3.0,
            conv_bias: -3.6,
            organic_rate: 0.05,
            noise_sd: 0.3,
            exposure_effect: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.click_weight.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.click_weight.len() != self.conv_weight.len() {
            return Err(Error::DimensionMismatch {
                expected: self.click_weight.len(),
                got: self.conv_weight.len(),
            });
        }
        if !(0.0..=1.0).contains(&self.organic_rate) {
            return Err(invalid("organic_rate must lie in [0, 1]"));
        }
        if self.noise_sd < 0.0 || !self.noise_sd.is_finite() {
            return Err(invalid("noise_sd must be a finite nonnegative number"));
        }
        if !(0.0..=1.0).contains(&self.exposure_effect) {
            return Err(invalid("exposure_effect must lie in [0, 1]"));
        }
        let finite = self
            .click_weight
            .iter()
            .chain(&self.conv_weight)
            .chain([&self.click_bias, &self.conv_bias])
            .all(|w| w.is_finite());
        if !finite {
            return Err(invalid("response weights must be finite"));
        }
        Ok(())
    }

    /// Bernoulli(`organic_rate`), independent of any exposure.
    pub fn organic_conversion<R: Rng + ?Sized>(&self, rng: &mut R) -> bool {
        rng.random_bool(self.organic_rate)
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Latent click and conversion probabilities of `user` for a creative.
pub fn response_probs(model: &ResponseModel, user: &UserProfile, creative_vec: &[f64]) -> Result<(f64, f64)> {
    let d = model.dim();
    if user.embedding.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: user.embedding.len(),
        });
    }
    if creative_vec.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: creative_vec.len(),
        });
    }
    let mut click = model.click_bias;
    let mut conv = model.conv_bias;
    for (((e, c), wc), wv) in user
        .embedding
        .iter()
        .zip(creative_vec)
        .zip(&model.click_weight)
        .zip(&model.conv_weight)
    {
        let uc = e * c;
        click += wc * uc;
        conv += wv * uc;
    }
    Ok((logistic(click), logistic(conv)))
}

fn bool_field(s: &str) -> Result<bool> {
    match s {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        other => Err(invalid(format!("expected 0/1, got `{other}`"))),
    }
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| invalid(format!("cannot parse `{s}`")))
}

/// Write one row per user: `user_id`, the 14 structured features, `e0..e{d-1}`.
pub fn write_population_csv<W: Write>(users: &[UserProfile], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let dim = users.first().map_or(0, UserProfile::dim);
    let mut header: Vec<String> = vec!["user_id".into()];
    header.extend(STRUCTURED_FEATURES.iter().map(|s| s.to_string()));
    header.extend((0..dim).map(|k| format!("e{k}")));
    w.write_record(&header)?;
    for u in users {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        rec.push(u.user_id.to_string());
        for (i, v) in u.structured_features().iter().enumerate() {
            rec.push(if i == 10 {
                u.friend_count.to_string()
            } else {
                format!("{}", *v as u8)
            });
        }
        rec.extend(u.embedding.iter().map(|e| e.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_population_csv<R: Read>(reader: R) -> Result<Vec<UserProfile>> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    if header.len() < 1 + N_STRUCTURED {
        return Err(invalid("population CSV has too few columns"));
    }
    for (i, name) in STRUCTURED_FEATURES.iter().enumerate() {
        if &header[i + 1] != *name {
            return Err(Error::MissingFeature(name.to_string()));
        }
    }
    let dim = header.len() - 1 - N_STRUCTURED;
    let mut users = Vec::new();
    for row in r.records() {
        let row = row?;
        let mut age_bin = None;
        for a in 0..AGE_BINS {
            if bool_field(&row[2 + a])? {
                if age_bin.is_some() {
                    return Err(invalid("more than one age bin set"));
                }
                age_bin = Some(a as u8);
            }
        }
        let active_1d = bool_field(&row[12])?;
        let active_7d = bool_field(&row[13])?;
        let active_28d = bool_field(&row[14])?;
        if (active_1d && !active_7d) || (active_7d && !active_28d) {
            return Err(invalid("activity recency flags are not nested"));
        }
        let embedding = (0..dim)
            .map(|k| parse::<f64>(&row[1 + N_STRUCTURED + k]))
            .collect::<Result<Vec<_>>>()?;
        users.push(UserProfile {
            user_id: parse(&row[0])?,
            segment: 0,
            gender_male: bool_field(&row[1])?,
            age_bin: age_bin.ok_or_else(|| invalid("no age bin set"))?,
            os_ios: bool_field(&row[8])?,
            lang_english: bool_field(&row[9])?,
            loc_america: bool_field(&row[10])?,
            friend_count: parse(&row[11])?,
            active_1d,
            active_7d,
            active_28d,
            embedding,
        });
    }
    Ok(users)
}
