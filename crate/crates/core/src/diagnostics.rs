//! Covariate balance diagnostics.
//!
//! Per-feature Welch t-tests and standardized mean differences between two
//! groups, goodness-of-fit tests of pooled p-values against Uniform(0, 1),
//! exceedance summaries and the observable-feature gate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::population::{UserProfile, N_STRUCTURED, STRUCTURED_FEATURES};
use crate::special::{cvm_asymptotic_cdf, kolmogorov_exact_cdf, kolmogorov_sf, normal_cdf, student_t_two_sided};

pub const SMD_THRESHOLD: f64 = 0.20;
pub const P_THRESHOLD: f64 = 0.05;
/// Two-tailed 5% cutoff applied to unobservable features by the gate.
pub const UNOBSERVABLE_T_CUTOFF: f64 = 1.965;
/// Largest tolerated |t| among gender and age before the gate fails.
pub const OBSERVABLE_T_GATE: f64 = 1.5;
/// Sample size at or below which the KS p-value uses the exact distribution.
pub const KS_EXACT_MAX_N: usize = 100;

pub const GENDER_FEATURE: &str = "male";
pub const AGE_FEATURES: [&str; 6] = [
    "age_18_24",
    "age_25_34",
    "age_35_44",
    "age_45_54",
    "age_55_64",
    "age_65_plus",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FeatureKind {
    Structured,
    Embedding,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Structured => "STRUCTURED",
            FeatureKind::Embedding => "EMBEDDING",
        }
    }
}

pub fn feature_names(dim: usize) -> Vec<String> {
    STRUCTURED_FEATURES
        .iter()
        .map(|s| s.to_string())
        .chain((0..dim).map(|k| format!("emb_{k}")))
        .collect()
}

pub fn feature_kind(column: usize) -> FeatureKind {
    if column < N_STRUCTURED {
        FeatureKind::Structured
    } else {
        FeatureKind::Embedding
    }
}

/// Rows of impressed observations with a group label each. Columns are the
/// 14 structured features followed by `dim` embedding coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    data: Vec<f64>,
    labels: Vec<u32>,
}

impl FeatureMatrix {
    pub fn new(dim: usize) -> Self {
        FeatureMatrix {
            dim,
            data: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn n_cols(&self) -> usize {
        N_STRUCTURED + self.dim
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn push_user(&mut self, user: &UserProfile, label: u32) -> Result<()> {
        if user.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: user.dim(),
            });
        }
        user.write_feature_row(&mut self.data);
        self.labels.push(label);
        Ok(())
    }

    pub fn push_row(&mut self, row: &[f64], label: u32) -> Result<()> {
        if row.len() != self.n_cols() {
            return Err(Error::DimensionMismatch {
                expected: self.n_cols(),
                got: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        self.labels.push(label);
        Ok(())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.n_cols();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn count(&self, label: u32) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn column(&self, col: usize, label: u32) -> Vec<f64> {
        (0..self.n_rows())
            .filter(|&i| self.labels[i] == label)
            .map(|i| self.row(i)[col])
            .collect()
    }
}

/// Running mean and variance (Welford).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub n: usize,
    pub mean: f64,
    m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        let mut m = Moments::default();
        for &x in xs {
            m.push(x);
        }
        m
    }

    /// Sample variance (n - 1 denominator).
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub t: f64,
    pub p: f64,
    pub df: f64,
}

fn welch_from_moments(a: &Moments, b: &Moments) -> WelchTest {
    let va = a.variance() / a.n as f64;
    let vb = b.variance() / b.n as f64;
    let se2 = va + vb;
    let diff = a.mean - b.mean;
    if se2 == 0.0 {
        let df = (a.n + b.n - 2) as f64;
        return if diff == 0.0 {
            WelchTest { t: 0.0, p: 1.0, df }
        } else {
            WelchTest {
                t: diff.signum() * f64::INFINITY,
                p: 0.0,
                df,
            }
        };
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (va * va / (a.n - 1) as f64 + vb * vb / (b.n - 1) as f64);
    WelchTest {
        t,
        p: student_t_two_sided(t, df),
        df,
    }
}

fn check_sizes(na: usize, nb: usize) -> Result<()> {
    if na < 2 || nb < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 observations per group (got {na} and {nb})"
        )));
    }
    Ok(())
}

/// Welch's unequal-variance t-test, two-sided. `t` is positive when `a` has
/// the larger mean. Two constant groups with equal means give `(0, 1)`.
pub fn welch_t(group_a: &[f64], group_b: &[f64]) -> Result<WelchTest> {
    check_sizes(group_a.len(), group_b.len())?;
    Ok(welch_from_moments(
        &Moments::from_slice(group_a),
        &Moments::from_slice(group_b),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Smd {
    pub value: f64,
    /// Pooled variance was zero; `value` is reported as 0.
    pub degenerate: bool,
}

fn smd_from_moments(a: &Moments, b: &Moments) -> Smd {
    let pooled = ((a.n - 1) as f64 * a.variance() + (b.n - 1) as f64 * b.variance()) / (a.n + b.n - 2) as f64;
    if pooled > 0.0 {
        Smd {
            value: (a.mean - b.mean) / pooled.sqrt(),
            degenerate: false,
        }
    } else {
        Smd {
            value: 0.0,
            degenerate: true,
        }
    }
}

/// Standardized mean difference `a - b` with the pooled standard deviation.
pub fn smd(group_a: &[f64], group_b: &[f64]) -> Result<Smd> {
    check_sizes(group_a.len(), group_b.len())?;
    Ok(smd_from_moments(
        &Moments::from_slice(group_a),
        &Moments::from_slice(group_b),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceStat {
    pub feature_id: String,
    pub column: usize,
    pub kind: FeatureKind,
    pub mean_test: f64,
    pub mean_control: f64,
    pub s_test: f64,
    pub s_control: f64,
    pub n_test: usize,
    pub n_control: usize,
    pub t: f64,
    pub p: f64,
    pub smd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OmitReason {
    ConstantColumn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub stats: Vec<BalanceStat>,
    pub omitted: Vec<(String, OmitReason)>,
}

impl BalanceReport {
    pub fn get(&self, feature_id: &str) -> Option<&BalanceStat> {
        self.stats.iter().find(|s| s.feature_id == feature_id)
    }
}

/// One [`BalanceStat`] per column comparing `group_pair.0` (treated as
/// "test") with `group_pair.1`. Columns constant across both groups are
/// omitted.
pub fn balance_report(matrix: &FeatureMatrix, group_pair: (u32, u32)) -> Result<BalanceReport> {
    let w = matrix.n_cols();
    let mut ma = vec![Moments::default(); w];
    let mut mb = vec![Moments::default(); w];
    let mut first: Option<&[f64]> = None;
    let mut constant = vec![true; w];
    for i in 0..matrix.n_rows() {
        let l = matrix.label(i);
        let target = if l == group_pair.0 {
            &mut ma
        } else if l == group_pair.1 {
            &mut mb
        } else {
            continue;
        };
        let row = matrix.row(i);
        for (m, &x) in target.iter_mut().zip(row) {
            m.push(x);
        }
        match first {
            None => first = Some(row),
            Some(f) => {
                for c in 0..w {
                    if row[c] != f[c] {
                        constant[c] = false;
                    }
                }
            }
        }
    }
    let (na, nb) = (ma[0].n, mb[0].n);
    if na == 0 || nb == 0 {
        return Err(Error::InsufficientData(format!(
            "group {} has no rows",
            if na == 0 { group_pair.0 } else { group_pair.1 }
        )));
    }
    check_sizes(na, nb)?;
    let names = feature_names(matrix.dim());
    let mut stats = Vec::with_capacity(w);
    let mut omitted = Vec::new();
    for c in 0..w {
        if constant[c] {
            omitted.push((names[c].clone(), OmitReason::ConstantColumn));
            continue;
        }
        let welch = welch_from_moments(&ma[c], &mb[c]);
        let d = smd_from_moments(&ma[c], &mb[c]);
        stats.push(BalanceStat {
            feature_id: names[c].clone(),
            column: c,
            kind: feature_kind(c),
            mean_test: ma[c].mean,
            mean_control: mb[c].mean,
            s_test: ma[c].variance().sqrt(),
            s_control: mb[c].variance().sqrt(),
            n_test: na,
            n_control: nb,
            t: welch.t,
            p: welch.p,
            smd: d.value,
        });
    }
    Ok(BalanceReport { stats, omitted })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GofTest {
    pub statistic: f64,
    pub p: f64,
}

fn sorted_unit(pvals: &[f64]) -> Result<Vec<f64>> {
    if pvals.is_empty() {
        return Err(Error::InsufficientData("no p-values".into()));
    }
    if let Some(bad) = pvals.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::OutOfRange(format!("p-value {bad} outside [0, 1]")));
    }
    let mut v = pvals.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// One-sample Kolmogorov–Smirnov test against Uniform(0, 1).
pub fn ks_uniform(pvals: &[f64]) -> Result<GofTest> {
    let x = sorted_unit(pvals)?;
    let n = x.len();
    let nf = n as f64;
    let mut d = 0.0f64;
    for (i, &xi) in x.iter().enumerate() {
        let above = (i + 1) as f64 / nf - xi;
        let below = xi - i as f64 / nf;
        d = d.max(above).max(below);
    }
    let p = if n <= KS_EXACT_MAX_N {
        1.0 - kolmogorov_exact_cdf(n, d)
    } else {
        kolmogorov_sf(nf.sqrt() * d)
    };
    Ok(GofTest {
        statistic: d,
        p: p.clamp(0.0, 1.0),
    })
}

/// Cramér–von Mises test against Uniform(0, 1). The statistic is
/// `1/(12n) + sum (x_(i) - (2i-1)/(2n))^2`; the p-value uses the limiting
/// distribution.
pub fn cvm_uniform(pvals: &[f64]) -> Result<GofTest> {
    let x = sorted_unit(pvals)?;
    let nf = x.len() as f64;
    let mut omega = 1.0 / (12.0 * nf);
    for (i, &xi) in x.iter().enumerate() {
        let r = xi - (2.0 * i as f64 + 1.0) / (2.0 * nf);
        omega += r * r;
    }
    Ok(GofTest {
        statistic: omega,
        p: (1.0 - cvm_asymptotic_cdf(omega)).clamp(0.0, 1.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformitySummary {
    pub n_stats: usize,
    pub ks_d: f64,
    pub ks_p: f64,
    pub cvm_omega: f64,
    pub cvm_p: f64,
    pub frac_p_below_05: f64,
    pub frac_abs_smd_above_020: f64,
}

impl UniformitySummary {
    pub fn from_stats<'a>(stats: impl IntoIterator<Item = &'a BalanceStat>) -> Result<Self> {
        let stats: Vec<&BalanceStat> = stats.into_iter().collect();
        let pvals: Vec<f64> = stats.iter().map(|s| s.p).collect();
        let ks = ks_uniform(&pvals)?;
        let cvm = cvm_uniform(&pvals)?;
        let n = stats.len() as f64;
        Ok(UniformitySummary {
            n_stats: stats.len(),
            ks_d: ks.statistic,
            ks_p: ks.p,
            cvm_omega: cvm.statistic,
            cvm_p: cvm.p,
            frac_p_below_05: stats.iter().filter(|s| s.p <= P_THRESHOLD).count() as f64 / n,
            frac_abs_smd_above_020: stats.iter().filter(|s| s.smd.abs() > SMD_THRESHOLD).count() as f64 / n,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryByKind {
    pub overall: UniformitySummary,
    pub structured: Option<UniformitySummary>,
    pub embedding: Option<UniformitySummary>,
}

/// Pool balance stats across tests, overall and by feature kind.
pub fn summarize(stats: &[BalanceStat]) -> Result<SummaryByKind> {
    if stats.is_empty() {
        return Err(Error::InsufficientData("no balance stats to summarize".into()));
    }
    let of_kind = |k: FeatureKind| {
        let sel: Vec<&BalanceStat> = stats.iter().filter(|s| s.kind == k).collect();
        if sel.is_empty() {
            None
        } else {
            UniformitySummary::from_stats(sel).ok()
        }
    };
    Ok(SummaryByKind {
        overall: UniformitySummary::from_stats(stats)?,
        structured: of_kind(FeatureKind::Structured),
        embedding: of_kind(FeatureKind::Embedding),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    pub max_t_obs: f64,
    pub frac_unobs_sig: f64,
    pub pass: bool,
}

pub fn is_observable(feature_id: &str) -> bool {
    feature_id == GENDER_FEATURE || AGE_FEATURES.contains(&feature_id)
}

/// Largest |t| among gender and age bins, share of the remaining features
/// with |t| above the two-tailed 5% cutoff, and whether the observable
/// maximum stays within the gate.
pub fn observable_gate(report: &BalanceReport) -> Result<GateResult> {
    if report.get(GENDER_FEATURE).is_none() {
        return Err(Error::MissingFeature(GENDER_FEATURE.into()));
    }
    if !AGE_FEATURES.iter().any(|a| report.get(a).is_some()) {
        return Err(Error::MissingFeature("age bins".into()));
    }
    let mut max_t = 0.0f64;
    let mut others = 0usize;
    let mut sig = 0usize;
    for s in &report.stats {
        if is_observable(&s.feature_id) {
            max_t = max_t.max(s.t.abs());
        } else {
            others += 1;
            if s.t.abs() > UNOBSERVABLE_T_CUTOFF {
                sig += 1;
            }
        }
    }
    if others == 0 {
        return Err(Error::InsufficientData("no unobservable features in report".into()));
    }
    Ok(GateResult {
        max_t_obs: max_t,
        frac_unobs_sig: sig as f64 / others as f64,
        pass: max_t <= OBSERVABLE_T_GATE,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateBin {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub mean: Option<f64>,
    /// Normal-approximation 95% interval; `None` with fewer than 2 points.
    pub ci: Option<(f64, f64)>,
}

/// Equal-width bins over `[0, max max_t_obs]` with the per-bin mean of
/// `frac_unobs_sig`.
pub fn binned_gate_curve(tests: &[(f64, f64)], n_bins: usize) -> Result<Vec<GateBin>> {
    if n_bins == 0 || tests.len() < n_bins {
        return Err(Error::InsufficientData(format!(
            "{} tests for {n_bins} bins",
            tests.len()
        )));
    }
    let hi = tests.iter().map(|t| t.0).fold(0.0f64, f64::max);
    let width = if hi > 0.0 { hi / n_bins as f64 } else { 1.0 };
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); n_bins];
    for &(t, f) in tests {
        let b = ((t / width) as usize).min(n_bins - 1);
        groups[b].push(f);
    }
    Ok(groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let m = Moments::from_slice(g);
            let mean = (m.n > 0).then_some(m.mean);
            let ci = (m.n >= 2).then(|| {
                let half = 1.96 * (m.variance() / m.n as f64).sqrt();
                (m.mean - half, m.mean + half)
            });
            GateBin {
                lo: i as f64 * width,
                hi: (i + 1) as f64 * width,
                n: m.n,
                mean,
                ci,
            }
        })
        .collect())
}

/// Two-sided pooled two-proportion z-test. Returns `(z, p)`.
pub fn two_proportion_test(successes_a: u64, n_a: u64, successes_b: u64, n_b: u64) -> Result<(f64, f64)> {
    if n_a == 0 || n_b == 0 || successes_a > n_a || successes_b > n_b {
        return Err(Error::InsufficientData("invalid proportion counts".into()));
    }
    let pa = successes_a as f64 / n_a as f64;
    let pb = successes_b as f64 / n_b as f64;
    let pooled = (successes_a + successes_b) as f64 / (n_a + n_b) as f64;
    let se = (pooled * (1.0 - pooled) * (1.0 / n_a as f64 + 1.0 / n_b as f64)).sqrt();
    if se == 0.0 {
        return Ok((0.0, 1.0));
    }
    let z = (pa - pb) / se;
    Ok((z, 2.0 * normal_cdf(-z.abs())))
}
