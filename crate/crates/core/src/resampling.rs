//! Percentile bootstrap for the adjusted prevalence.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::point::{adjusted_prevalence, clamp_unit, IntervalEstimate, Method, StudyCounts, SINGULAR_EPS};
use crate::stochastics::{check_level, BinomialSampler, SeedSpec};

/// Stream labels for the three binomial axes.
pub(crate) const AXIS_R: u64 = 0x7261_7465; // "rate"
pub(crate) const AXIS_P: u64 = 0x7365_6e73; // "sens"
pub(crate) const AXIS_Q: u64 = 0x7370_6563; // "spec"

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub level: f64,
    pub seed: SeedSpec,
}

impl BootstrapConfig {
    pub fn new(replicates: usize, level: f64, seed: SeedSpec) -> Self {
        Self {
            replicates,
            level,
            seed,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::domain("bootstrap needs at least one replicate"));
        }
        check_level(self.level)
    }
}

/// Quantile of sorted `values` by linear interpolation between order
/// statistics at 0-based position `(len - 1) * u`.
pub fn percentile(values: &[f64], u: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::domain("percentile of an empty sequence"));
    }
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::domain(format!("percentile level must lie in [0, 1], got {u}")));
    }
    let pos = (values.len() - 1) as f64 * u;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(values[lo] + frac * (values[hi] - values[lo]))
}

/// Equal-tailed percentile interval of the replicate statistics. Sorts in
/// place; `NaN`s are not expected.
pub(crate) fn percentile_bounds(values: &mut [f64], level: f64) -> Result<(f64, f64)> {
    values.sort_by(f64::total_cmp);
    let tail = 0.5 * (1.0 - level);
    Ok((percentile(values, tail)?, percentile(values, 1.0 - tail)?))
}

/// Assemble a bootstrap interval from raw replicate statistics.
pub(crate) fn bootstrap_interval(
    point: f64,
    mut stats: Vec<f64>,
    skipped: usize,
    cfg: &BootstrapConfig,
) -> Result<IntervalEstimate> {
    if stats.is_empty() {
        return Err(Error::InferenceFailed(format!(
            "all {} bootstrap replicates were singular",
            cfg.replicates
        )));
    }
    let (lo, hi) = percentile_bounds(&mut stats, cfg.level)?;
    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("replicates".into(), cfg.replicates.into());
    diagnostics.insert("skipped_singular".into(), skipped.into());
    diagnostics.insert("raw_point".into(), point.into());
    diagnostics.insert("raw_lower".into(), lo.into());
    diagnostics.insert("raw_upper".into(), hi.into());
    let lower = clamp_unit(lo);
    let upper = clamp_unit(hi);
    Ok(IntervalEstimate {
        method: Method::Bootstrap,
        point: clamp_unit(point).clamp(lower, upper),
        lower,
        upper,
        level: cfg.level,
        diagnostics,
    })
}

/// Replicate estimates from resampling each binomial experiment at its
/// observed rate, plus the number of singular replicates dropped.
pub(crate) fn bootstrap_draws(counts: &StudyCounts, replicates: usize, seed: SeedSpec) -> Result<(Vec<f64>, usize)> {
    let obs = counts.rates();
    let sample_r = BinomialSampler::new(counts.tested, obs.r)?;
    let sample_p = BinomialSampler::new(counts.positive_panel, obs.p)?;
    let sample_q = BinomialSampler::new(counts.negative_panel, obs.q)?;
    let (mut rng_r, mut rng_p, mut rng_q) = (
        seed.derive(AXIS_R).rng(),
        seed.derive(AXIS_P).rng(),
        seed.derive(AXIS_Q).rng(),
    );
    let (big_d, big_m, big_n) = (
        counts.tested as f64,
        counts.positive_panel as f64,
        counts.negative_panel as f64,
    );

    let mut stats = Vec::with_capacity(replicates);
    let mut skipped = 0usize;
    for _ in 0..replicates {
        let r = sample_r.sample(&mut rng_r) as f64 / big_d;
        let p = sample_p.sample(&mut rng_p) as f64 / big_m;
        let q = sample_q.sample(&mut rng_q) as f64 / big_n;
        if p + q - 1.0 <= SINGULAR_EPS {
            skipped += 1;
            continue;
        }
        let fp = 1.0 - q;
        stats.push((r - fp) / (p - fp));
    }
    Ok((stats, skipped))
}

/// Non-singular bootstrap replicates of the estimator.
pub fn bootstrap_replicates(counts: &StudyCounts, replicates: usize, seed: SeedSpec) -> Result<Vec<f64>> {
    counts.validate()?;
    adjusted_prevalence(counts.rates())?;
    Ok(bootstrap_draws(counts, replicates, seed)?.0)
}

/// Percentile bootstrap: resample each of the three binomial experiments at
/// its observed rate and take percentiles of the recomputed estimator.
/// Replicates whose resampled test is uninformative are dropped.
pub fn bootstrap_ci(counts: &StudyCounts, cfg: &BootstrapConfig) -> Result<IntervalEstimate> {
    counts.validate()?;
    cfg.validate()?;
    let point = adjusted_prevalence(counts.rates())?;
    let (stats, skipped) = bootstrap_draws(counts, cfg.replicates, cfg.seed)?;
    bootstrap_interval(point, stats, skipped, cfg)
}
