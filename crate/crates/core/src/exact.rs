//! Exact Monte Carlo test inversion over a net of nuisance parameters.
//!
//! For a hypothesised prevalence `pi`, every nuisance triple `(r, p, q)` with
//! `f(r, p, q) = pi` inside the box `I_r x I_p x I_q` defines a simple null.
//! The null distribution of the Wald statistic is simulated at each net point;
//! the composite p-value is the maximum over the net, and the confidence
//! interval collects every `pi` whose p-value clears `alpha - alpha_adjustment`.
//!
//! Hybrid variants pin some nuisance coordinates at their estimates, which
//! shrinks the net to one free axis.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::point::{clamp_unit, IntervalEstimate, Method, RateTriple, SampleSizes, StudyCounts, SINGULAR_EPS};
use crate::resampling::{AXIS_P, AXIS_Q, AXIS_R};
use crate::stochastics::{
    check_level, clopper_pearson, gaussian_quantile, mix64, BinomialSampler, ExactBinomialCI, GaussianSampler,
    SeedSpec,
};

/// Tuning of the exact and hybrid procedures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactConfig {
    /// Monte Carlo replicates per net point.
    pub replicates: usize,
    /// Evenly spaced points per free nuisance axis.
    pub net_points_per_axis: usize,
    /// Confidence level of each nuisance interval.
    pub nuisance_level: f64,
    /// Nominal test size.
    pub alpha: f64,
    /// Resolution of the prevalence scan.
    pub pi_grid_step: f64,
    /// Bisection tolerance for interval endpoints.
    pub pi_refine_tol: f64,
    pub seed: SeedSpec,
    /// Give every (prevalence, net point) pair its own stream instead of
    /// sharing one stream per net point across prevalence values.
    #[serde(default)]
    pub independent_streams: bool,
}

impl Default for ExactConfig {
    fn default() -> Self {
        Self {
            replicates: 3000,
            net_points_per_axis: 30,
            nuisance_level: 0.999,
            alpha: 0.05,
            pi_grid_step: 5e-4,
            pi_refine_tol: 1e-4,
            seed: SeedSpec::new(0, 0),
            independent_streams: false,
        }
    }
}

impl ExactConfig {
    /// Bonferroni correction for the joint coverage of the three nuisance
    /// intervals.
    pub fn alpha_adjustment(&self) -> f64 {
        3.0 * (1.0 - self.nuisance_level)
    }

    /// p-values at or above this are accepted.
    pub fn acceptance_threshold(&self) -> f64 {
        self.alpha - self.alpha_adjustment()
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::domain("replicates must be at least 1"));
        }
        if self.net_points_per_axis < 2 {
            return Err(Error::domain("net_points_per_axis must be at least 2"));
        }
        check_level(self.nuisance_level)?;
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::domain(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.pi_grid_step > 0.0 && self.pi_grid_step <= 1.0) {
            return Err(Error::domain("pi_grid_step must lie in (0, 1]"));
        }
        if !(self.pi_refine_tol > 0.0) {
            return Err(Error::domain("pi_refine_tol must be positive"));
        }
        Ok(())
    }
}

/// Nuisance coordinates pinned at their point estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Fixed {
    pub p: bool,
    pub r: bool,
}

impl Fixed {
    pub const NONE: Fixed = Fixed { p: false, r: false };
    pub const P: Fixed = Fixed { p: true, r: false };
    pub const R: Fixed = Fixed { p: false, r: true };
    pub const PR: Fixed = Fixed { p: true, r: true };

    pub fn method(&self) -> Method {
        match (self.p, self.r) {
            (false, false) => Method::Exact,
            (true, false) => Method::HybridP,
            (false, true) => Method::HybridR,
            (true, true) => Method::HybridPr,
        }
    }

    pub fn for_method(method: Method) -> Result<Fixed> {
        match method {
            Method::Exact | Method::HybridLambda => Ok(Fixed::NONE),
            Method::HybridP | Method::HybridLambdaP => Ok(Fixed::P),
            Method::HybridR => Ok(Fixed::R),
            Method::HybridPr => Ok(Fixed::PR),
            other => Err(Error::Usage(format!("`{other}` is not a test-inversion method"))),
        }
    }
}

/// Confidence box for the nuisance parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuisanceBox {
    pub r: ExactBinomialCI,
    pub p: ExactBinomialCI,
    pub q: ExactBinomialCI,
}

impl NuisanceBox {
    pub fn contains(&self, t: &RateTriple) -> bool {
        self.r.contains(t.r) && self.p.contains(t.p) && self.q.contains(t.q)
    }
}

/// Nuisance triples consistent with a hypothesised prevalence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceNet {
    pub pi: f64,
    pub points: Vec<RateTriple>,
}

impl NuisanceNet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A p-value profile over prevalence values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PValueCurve {
    pub method: Method,
    pub pis: Vec<f64>,
    pub pvalues: Vec<f64>,
}

/// How the positive-test rate is distributed under a simple null.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RateModel {
    /// `d ~ Bin(D, r)`; the rate interval is Clopper–Pearson on `d`.
    Binomial { positives: u64 },
    /// Weighted count `~ N(D r, lambda D r)` (stratum weighting).
    Poisson { lambda: f64 },
    /// Weighted count `~ N(D r, lambda D r (1 - r))` (individual weighting).
    Bernoulli { lambda: f64 },
}

/// Everything the test inversion needs: observed rates, experiment sizes and
/// the model for the positive-test rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NullModel {
    pub observed: RateTriple,
    pub sizes: SampleSizes,
    pub true_positives: u64,
    pub true_negatives: u64,
    pub rate_model: RateModel,
}

/// Relative tolerance under which two statistics count as tied.
const TIE_TOLERANCE: f64 = 1e-9;

/// Observed estimate and standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Observed {
    pub pi_hat: f64,
    pub se: f64,
}

/// `|pi_hat - pi| / se`, with a zero standard error mapped to 0 (exact match)
/// or infinity.
#[inline]
pub(crate) fn abs_statistic(pi_hat: f64, se: f64, pi: f64) -> f64 {
    let diff = (pi_hat - pi).abs();
    if se > 0.0 {
        diff / se
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

impl NullModel {
    pub fn unweighted(counts: &StudyCounts) -> Result<Self> {
        counts.validate()?;
        Ok(Self {
            observed: counts.rates(),
            sizes: counts.sizes(),
            true_positives: counts.true_positives,
            true_negatives: counts.true_negatives,
            rate_model: RateModel::Binomial {
                positives: counts.positives,
            },
        })
    }

    /// Leading variance term, before division by `D (p + q - 1)^2`.
    #[inline]
    fn rate_variance(&self, r: f64) -> f64 {
        match self.rate_model {
            RateModel::Binomial { .. } => r * (1.0 - r),
            RateModel::Poisson { lambda } => lambda * r,
            RateModel::Bernoulli { lambda } => lambda * r * (1.0 - r),
        }
    }

    /// Estimate and standard error at a rate triple; `None` if singular.
    #[inline]
    pub(crate) fn estimate(&self, r: f64, p: f64, q: f64) -> Option<(f64, f64)> {
        let s = p + q - 1.0;
        if s <= SINGULAR_EPS {
            return None;
        }
        let fp = 1.0 - q;
        let pi = (r - fp) / (p - fp);
        let s2 = s * s;
        let var = self.rate_variance(r) / (self.sizes.tested as f64 * s2)
            + pi * pi * p * (1.0 - p) / (self.sizes.positive_panel as f64 * s2)
            + (r - p) * (r - p) * q * (1.0 - q) / (self.sizes.negative_panel as f64 * s2 * s2);
        Some((pi, var.max(0.0).sqrt()))
    }

    pub(crate) fn observed(&self) -> Result<Observed> {
        let t = self.observed;
        self.estimate(t.r, t.p, t.q)
            .map(|(pi_hat, se)| Observed { pi_hat, se })
            .ok_or(Error::Singular(t.informativeness()))
    }

    /// Nuisance box at `level`: Clopper–Pearson for the panels, and for the
    /// rate either Clopper–Pearson (binomial) or the equal-tailed Gaussian
    /// interval under the weighted model.
    pub fn nuisance_box(&self, level: f64) -> Result<NuisanceBox> {
        check_level(level)?;
        let r = match self.rate_model {
            RateModel::Binomial { positives } => clopper_pearson(positives, self.sizes.tested, level)?,
            RateModel::Poisson { .. } | RateModel::Bernoulli { .. } => {
                let z = gaussian_quantile(1.0 - 0.5 * (1.0 - level))?;
                let r_hat = self.observed.r;
                let half = z * (self.rate_variance(r_hat) / self.sizes.tested as f64).sqrt();
                ExactBinomialCI {
                    lower: clamp_unit(r_hat - half),
                    upper: clamp_unit(r_hat + half),
                    level,
                }
            }
        };
        Ok(NuisanceBox {
            r,
            p: clopper_pearson(self.true_positives, self.sizes.positive_panel, level)?,
            q: clopper_pearson(self.true_negatives, self.sizes.negative_panel, level)?,
        })
    }

    /// Monte Carlo test of the simple null `(r, p, q) = null`.
    ///
    /// Counts replicates with `|T*| >= observed_abs_t`. With `stop_at =
    /// Some(c)`, simulation halts as soon as the comparison of the final count
    /// against `c` is decided; the returned count is then only meaningful
    /// relative to `c`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn count_exceedances(
        &self,
        pi: f64,
        observed_abs_t: f64,
        null: &RateTriple,
        replicates: usize,
        stream: SeedSpec,
        stop_at: Option<usize>,
        clamp_flag: Option<&AtomicBool>,
        panels: Option<&PanelDraws>,
    ) -> Result<usize> {
        let big_d = self.sizes.tested as f64;
        let big_m = self.sizes.positive_panel as f64;
        let big_n = self.sizes.negative_panel as f64;
        let sample_p = BinomialSampler::new(self.sizes.positive_panel, null.p)?;
        let sample_q = BinomialSampler::new(self.sizes.negative_panel, null.q)?;
        enum RateDraw {
            Binomial(BinomialSampler),
            Gaussian(GaussianSampler),
        }
        let rate_draw = match self.rate_model {
            RateModel::Binomial { .. } => RateDraw::Binomial(BinomialSampler::new(self.sizes.tested, null.r)?),
            RateModel::Poisson { .. } | RateModel::Bernoulli { .. } => {
                let mean = big_d * null.r;
                RateDraw::Gaussian(GaussianSampler::new(mean, big_d * self.rate_variance(null.r))?)
            }
        };
        let mut rng_r = stream.derive(AXIS_R).rng();
        let mut rng_p = stream.derive(AXIS_P).rng();
        let mut rng_q = stream.derive(AXIS_Q).rng();

        // Statistics equal in exact arithmetic can differ by rounding; count
        // them as ties.
        let tie_floor = if observed_abs_t.is_finite() {
            observed_abs_t - TIE_TOLERANCE * observed_abs_t.max(1.0)
        } else {
            observed_abs_t
        };
        let mut count = 0usize;
        for b in 0..replicates {
            let r = match &rate_draw {
                RateDraw::Binomial(s) => s.sample(&mut rng_r) as f64 / big_d,
                RateDraw::Gaussian(g) => {
                    let x = g.sample(&mut rng_r) / big_d;
                    if !(0.0..=1.0).contains(&x) {
                        if let Some(flag) = clamp_flag {
                            flag.store(true, Ordering::Relaxed);
                        }
                    }
                    clamp_unit(x)
                }
            };
            let (p, q) = match panels {
                Some(d) => (d.p[b], d.q[b]),
                None => (
                    sample_p.sample(&mut rng_p) as f64 / big_m,
                    sample_q.sample(&mut rng_q) as f64 / big_n,
                ),
            };
            let abs_t = match self.estimate(r, p, q) {
                Some((pi_star, se_star)) => abs_statistic(pi_star, se_star, pi),
                None => f64::INFINITY,
            };
            if abs_t >= tie_floor {
                count += 1;
            }
            if let Some(c) = stop_at {
                let remaining = replicates - b - 1;
                if count >= c || count + remaining < c {
                    break;
                }
            }
        }
        Ok(count)
    }

    /// Panel replicate ratios `(m*/M, n*/N)` at `null`, drawn from the same
    /// sub-streams `count_exceedances` uses.
    pub(crate) fn panel_draws(&self, null: &RateTriple, replicates: usize, stream: SeedSpec) -> Result<PanelDraws> {
        let big_m = self.sizes.positive_panel as f64;
        let big_n = self.sizes.negative_panel as f64;
        let sample_p = BinomialSampler::new(self.sizes.positive_panel, null.p)?;
        let sample_q = BinomialSampler::new(self.sizes.negative_panel, null.q)?;
        let mut rng_p = stream.derive(AXIS_P).rng();
        let mut rng_q = stream.derive(AXIS_Q).rng();
        Ok(PanelDraws {
            p: (0..replicates).map(|_| sample_p.sample(&mut rng_p) as f64 / big_m).collect(),
            q: (0..replicates).map(|_| sample_q.sample(&mut rng_q) as f64 / big_n).collect(),
        })
    }

    /// Candidate triples for `pi`, before filtering by the box.
    fn net(&self, pi: f64, nbox: &NuisanceBox, fixed: Fixed, k: usize) -> NuisanceNet {
        let ps = even_grid(nbox.p.lower, nbox.p.upper, k);
        let qs = even_grid(nbox.q.lower, nbox.q.upper, k);
        let obs = self.observed;
        let mut points = Vec::new();
        let mut push = |t: RateTriple| {
            if nbox.contains(&t) {
                points.push(t);
            }
        };
        match (fixed.p, fixed.r) {
            (false, false) => {
                for &p in &ps {
                    for &q in &qs {
                        push(RateTriple::new(rate_for(pi, p, q), p, q));
                    }
                }
            }
            (true, false) => {
                for &q in &qs {
                    push(RateTriple::new(rate_for(pi, obs.p, q), obs.p, q));
                }
            }
            (false, true) => {
                if pi > 0.0 {
                    // f(r_hat, p, q) = pi solved for p along the q axis.
                    for &q in &qs {
                        let p = (obs.r - (1.0 - pi) * (1.0 - q)) / pi;
                        push(RateTriple::new(obs.r, p, q));
                    }
                } else {
                    // pi = 0 pins q = 1 - r_hat and leaves p free.
                    let q = 1.0 - obs.r;
                    for &p in &ps {
                        push(RateTriple::new(obs.r, p, q));
                    }
                }
            }
            (true, true) => {
                if pi < 1.0 {
                    let q = 1.0 - (obs.r - pi * obs.p) / (1.0 - pi);
                    push(RateTriple::new(obs.r, obs.p, q));
                }
            }
        }
        NuisanceNet { pi, points }
    }

    /// Range of prevalence values reachable inside the box, clamped to [0, 1].
    fn achievable_range(&self, nbox: &NuisanceBox, fixed: Fixed) -> (f64, f64) {
        let obs = self.observed;
        let rs: Vec<f64> = if fixed.r { vec![obs.r] } else { vec![nbox.r.lower, nbox.r.upper] };
        let ps: Vec<f64> = if fixed.p { vec![obs.p] } else { vec![nbox.p.lower, nbox.p.upper] };
        let qs = [nbox.q.lower, nbox.q.upper];
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &r in &rs {
            for &p in &ps {
                for &q in &qs {
                    let s = p + q - 1.0;
                    if s <= SINGULAR_EPS {
                        return (0.0, 1.0);
                    }
                    let v = (r - (1.0 - q)) / (p - (1.0 - q));
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
        }
        (clamp_unit(lo), clamp_unit(hi))
    }
}

/// Precomputed panel replicates for one net point.
pub(crate) struct PanelDraws {
    p: Vec<f64>,
    q: Vec<f64>,
}

/// `r` solving `f(r, p, q) = pi`.
#[inline]
fn rate_for(pi: f64, p: f64, q: f64) -> f64 {
    pi * p + (1.0 - pi) * (1.0 - q)
}

/// `k` evenly spaced points from `lo` to `hi`, both ends exact.
fn even_grid(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    if k == 1 || hi <= lo {
        return vec![lo];
    }
    let step = (hi - lo) / (k - 1) as f64;
    (0..k)
        .map(|i| if i == k - 1 { hi } else { lo + step * i as f64 })
        .collect()
}

/// Stream for a net point: keyed by its `(p, q)` coordinates so the same
/// point shares replicates across prevalence values and methods.
fn point_stream(cfg: &ExactConfig, pi: f64, t: &RateTriple) -> SeedSpec {
    let key = mix64(t.p.to_bits()) ^ mix64(t.q.to_bits()).rotate_left(32);
    let s = cfg.seed.derive(key);
    if cfg.independent_streams {
        s.derive(pi.to_bits())
    } else {
        s
    }
}

/// Smallest count `c` with `c / replicates >= threshold`.
fn needed_count(threshold: f64, replicates: usize) -> usize {
    if threshold <= 0.0 {
        return 0;
    }
    let b = replicates as f64;
    let mut c = (threshold * b).floor().max(0.0) as usize;
    while c <= replicates && (c as f64) / b < threshold {
        c += 1;
    }
    c
}

/// The test-inversion engine for a fixed dataset and configuration.
pub(crate) struct Inversion<'a> {
    pub model: NullModel,
    pub cfg: &'a ExactConfig,
    pub fixed: Fixed,
    pub nbox: NuisanceBox,
    pub observed: Observed,
    /// Set when a Gaussian rate draw fell outside [0, 1] and was clamped.
    pub clamped: AtomicBool,
    /// Panel replicates keyed by net point; they do not depend on the
    /// prevalence when streams are shared across prevalence values.
    panels: Mutex<HashMap<(u64, u64), Arc<PanelDraws>>>,
}

impl<'a> Inversion<'a> {
    pub fn new(model: NullModel, fixed: Fixed, cfg: &'a ExactConfig) -> Result<Self> {
        cfg.validate()?;
        let nbox = model.nuisance_box(cfg.nuisance_level)?;
        let observed = model.observed()?;
        Ok(Self {
            model,
            cfg,
            fixed,
            nbox,
            observed,
            clamped: AtomicBool::new(false),
            panels: Mutex::new(HashMap::new()),
        })
    }

    pub fn net(&self, pi: f64) -> NuisanceNet {
        self.model.net(pi, &self.nbox, self.fixed, self.cfg.net_points_per_axis)
    }

    /// Cached panel replicates for `pt`, when reuse across prevalence values
    /// is possible.
    fn panels_for(&self, pi: f64, pt: &RateTriple) -> Result<Option<Arc<PanelDraws>>> {
        // With r fixed the net moves in (p, q) as pi changes, so points are
        // rarely revisited.
        if self.cfg.independent_streams || self.fixed.r {
            return Ok(None);
        }
        let key = (pt.p.to_bits(), pt.q.to_bits());
        if let Some(d) = self.panels.lock().expect("panel cache poisoned").get(&key) {
            return Ok(Some(Arc::clone(d)));
        }
        let draws = Arc::new(self.model.panel_draws(pt, self.cfg.replicates, point_stream(self.cfg, pi, pt))?);
        self.panels.lock().expect("panel cache poisoned").insert(key, Arc::clone(&draws));
        Ok(Some(draws))
    }

    fn count(&self, pi: f64, t_obs: f64, pt: &RateTriple, stop_at: Option<usize>) -> Result<usize> {
        let panels = self.panels_for(pi, pt)?;
        self.model.count_exceedances(
            pi,
            t_obs,
            pt,
            self.cfg.replicates,
            point_stream(self.cfg, pi, pt),
            stop_at,
            Some(&self.clamped),
            panels.as_deref(),
        )
    }

    fn observed_abs_t(&self, pi: f64) -> f64 {
        abs_statistic(self.observed.pi_hat, self.observed.se, pi)
    }

    /// Composite p-value: maximum over the net, 0 for an empty net.
    pub fn pvalue(&self, pi: f64) -> Result<f64> {
        let net = self.net(pi);
        let t_obs = self.observed_abs_t(pi);
        let b = self.cfg.replicates;
        let counts: Result<Vec<usize>> = net
            .points
            .par_iter()
            .map(|pt| self.count(pi, t_obs, pt, None))
            .collect();
        Ok(counts?.into_iter().max().map_or(0.0, |c| c as f64 / b as f64))
    }

    /// Whether `pvalue(pi) >= threshold`, stopping early where possible.
    pub fn accepts(&self, pi: f64) -> Result<bool> {
        let net = self.net(pi);
        let t_obs = self.observed_abs_t(pi);
        let b = self.cfg.replicates;
        let need = needed_count(self.cfg.acceptance_threshold(), b);
        if need == 0 {
            return Ok(!net.is_empty());
        }
        if need > b {
            return Ok(false);
        }
        net.points.par_iter().try_fold(
            || false,
            |found, pt| -> Result<bool> {
                if found {
                    return Ok(true);
                }
                let c = self.count(pi, t_obs, pt, Some(need))?;
                Ok(c >= need)
            },
        )
        .try_reduce(|| false, |a, b| Ok(a || b))
    }

    /// Scan, take the convex hull of accepted prevalences and refine both
    /// ends by bisection.
    pub fn interval(&self, method: Method) -> Result<IntervalEstimate> {
        let cfg = self.cfg;
        let (lo, hi) = self.model.achievable_range(&self.nbox, self.fixed);
        let step = cfg.pi_grid_step;
        let start = (lo / step).floor() as i64;
        let end = (hi / step).ceil() as i64;
        let mut grid: Vec<f64> = (start..=end)
            .map(|i| (i as f64 * step).clamp(0.0, 1.0))
            .collect();
        let point = clamp_unit(self.observed.pi_hat);
        grid.push(point);
        grid.sort_by(f64::total_cmp);
        grid.dedup();

        let accepted: Result<Vec<bool>> = grid.par_iter().map(|&pi| self.accepts(pi)).collect();
        let accepted = accepted?;
        let first = accepted.iter().position(|&a| a);
        let last = accepted.iter().rposition(|&a| a);
        let (first, last) = match (first, last) {
            (Some(f), Some(l)) => (f, l),
            _ => {
                return Err(Error::InferenceFailed(format!(
                    "no prevalence in [{lo}, {hi}] reached p-value {}",
                    cfg.acceptance_threshold()
                )))
            }
        };
        let gaps = accepted[first..=last].iter().filter(|&&a| !a).count();

        let lower = if first == 0 {
            grid[0]
        } else {
            self.refine(grid[first - 1], grid[first])?
        };
        let upper = if last == grid.len() - 1 {
            grid[last]
        } else {
            self.refine(grid[last + 1], grid[last])?
        };

        let mut out = IntervalEstimate {
            method,
            point: point.clamp(lower, upper),
            lower,
            upper,
            level: 1.0 - cfg.alpha,
            diagnostics: BTreeMap::new(),
        };
        out.note("raw_point", self.observed.pi_hat);
        out.note("replicates", cfg.replicates);
        out.note("net_points_per_axis", cfg.net_points_per_axis);
        out.note("nuisance_level", cfg.nuisance_level);
        out.note("acceptance_threshold", cfg.acceptance_threshold());
        out.note("scan_range", vec![lo, hi]);
        out.note("grid_points", grid.len());
        out.note("accepted_grid_points", accepted.iter().filter(|&&a| a).count());
        if gaps > 0 {
            out.note("non_contiguous", true);
            out.note("rejected_inside_hull", gaps);
        }
        if !out.contains(point) {
            out.note("point_outside_interval", true);
        }
        if self.clamped.load(Ordering::Relaxed) {
            out.note("gaussian_rate_clamped", true);
        }
        Ok(out)
    }

    /// Bisection between a rejected and an accepted prevalence; returns the
    /// accepted side.
    fn refine(&self, mut rejected: f64, mut accepted: f64) -> Result<f64> {
        while (accepted - rejected).abs() > self.cfg.pi_refine_tol {
            let mid = 0.5 * (accepted + rejected);
            if self.accepts(mid)? {
                accepted = mid;
            } else {
                rejected = mid;
            }
        }
        Ok(accepted)
    }
}

/// Clopper–Pearson box for `(r, p, q)` at the configured nuisance level.
pub fn nuisance_box(counts: &StudyCounts, cfg: &ExactConfig) -> Result<NuisanceBox> {
    NullModel::unweighted(counts)?.nuisance_box(cfg.nuisance_level)
}

/// Full net for `pi`: evenly spaced `(p_i, q_j)` over the box with `r`
/// solved from `f(r, p_i, q_j) = pi`, kept when `r` lies in `I_r`.
pub fn build_net(pi: f64, nbox: &NuisanceBox, cfg: &ExactConfig) -> NuisanceNet {
    let k = cfg.net_points_per_axis;
    let ps = even_grid(nbox.p.lower, nbox.p.upper, k);
    let qs = even_grid(nbox.q.lower, nbox.q.upper, k);
    let points = ps
        .iter()
        .flat_map(|&p| qs.iter().map(move |&q| RateTriple::new(rate_for(pi, p, q), p, q)))
        .filter(|t| nbox.contains(t))
        .collect();
    NuisanceNet { pi, points }
}

/// Monte Carlo p-value of the simple null `(r, p, q) = null` for the
/// hypothesis `prevalence = pi`.
pub fn point_null_pvalue(
    counts: &StudyCounts,
    pi: f64,
    null: &RateTriple,
    cfg: &ExactConfig,
    stream: SeedSpec,
) -> Result<f64> {
    cfg.validate()?;
    let model = NullModel::unweighted(counts)?;
    let obs = model.observed()?;
    let t_obs = abs_statistic(obs.pi_hat, obs.se, pi);
    let c = model.count_exceedances(pi, t_obs, null, cfg.replicates, stream, None, None, None)?;
    Ok(c as f64 / cfg.replicates as f64)
}

/// The stream `exact_pvalue` uses for a given net point.
pub fn net_point_stream(cfg: &ExactConfig, pi: f64, point: &RateTriple) -> SeedSpec {
    point_stream(cfg, pi, point)
}

/// Exact composite p-value for `prevalence = pi`.
pub fn exact_pvalue(counts: &StudyCounts, pi: f64, cfg: &ExactConfig) -> Result<f64> {
    hybrid_pvalue(counts, pi, Fixed::NONE, cfg)
}

/// Exact confidence interval by test inversion.
pub fn exact_ci(counts: &StudyCounts, cfg: &ExactConfig) -> Result<IntervalEstimate> {
    hybrid_ci(counts, Fixed::NONE, cfg)
}

/// Composite p-value with the `fixed` coordinates pinned at their estimates.
pub fn hybrid_pvalue(counts: &StudyCounts, pi: f64, fixed: Fixed, cfg: &ExactConfig) -> Result<f64> {
    Inversion::new(NullModel::unweighted(counts)?, fixed, cfg)?.pvalue(pi)
}

/// Hybrid interval; `Fixed::NONE` gives the exact interval.
pub fn hybrid_ci(counts: &StudyCounts, fixed: Fixed, cfg: &ExactConfig) -> Result<IntervalEstimate> {
    Inversion::new(NullModel::unweighted(counts)?, fixed, cfg)?.interval(fixed.method())
}

/// Net used by `hybrid_pvalue` at `pi`.
pub fn hybrid_net(counts: &StudyCounts, pi: f64, fixed: Fixed, cfg: &ExactConfig) -> Result<NuisanceNet> {
    Ok(Inversion::new(NullModel::unweighted(counts)?, fixed, cfg)?.net(pi))
}

/// Prevalence grid `lo, lo + step, ...` up to and including `hi`.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub(crate) fn pi_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(lo < hi) {
        return Err(Error::Usage(format!("pi range must satisfy lo < hi, got [{lo}, {hi}]")));
    }
    if !(step > 0.0) {
        return Err(Error::Usage("pi step must be positive".into()));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| lo + step * i as f64).collect())
}

/// p-values of `method` over a prevalence grid.
///
/// `delta` and `delta_logit` use the normal approximation, `bootstrap` the
/// two-sided percentile p-value `2 min(F*(pi), 1 - F*(pi))` of the bootstrap
/// distribution (replicates and seed taken from `cfg`), the inversion methods
/// their Monte Carlo p-values.
pub fn pvalue_curve(
    counts: &StudyCounts,
    method: Method,
    pi_range: (f64, f64),
    step: f64,
    cfg: &ExactConfig,
) -> Result<PValueCurve> {
    let pis = pi_grid(pi_range.0, pi_range.1, step)?;
    let model = NullModel::unweighted(counts)?;
    let pvalues = match method {
        Method::Delta | Method::DeltaLogit => {
            let obs = model.observed()?;
            asymptotic_curve(method, obs, &pis)
        }
        Method::Bootstrap => {
            let stats = crate::resampling::bootstrap_replicates(counts, cfg.replicates, cfg.seed)?;
            bootstrap_curve(&stats, &pis)
        }
        Method::Exact | Method::HybridP | Method::HybridR | Method::HybridPr => {
            let inv = Inversion::new(model, Fixed::for_method(method)?, cfg)?;
            pis.iter().map(|&pi| inv.pvalue(pi)).collect::<Result<Vec<_>>>()?
        }
        Method::HybridLambda | Method::HybridLambdaP => {
            return Err(Error::Usage(format!("`{method}` needs a weighted dataset")))
        }
    };
    Ok(PValueCurve { method, pis, pvalues })
}

pub(crate) fn asymptotic_curve(method: Method, obs: Observed, pis: &[f64]) -> Vec<f64> {
    use crate::stochastics::gaussian_two_sided_pvalue;
    pis.iter()
        .map(|&pi| match method {
            Method::DeltaLogit => {
                let (a, b) = (obs.pi_hat, pi);
                if a <= 0.0 || a >= 1.0 || b <= 0.0 || b >= 1.0 {
                    if a == b {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    let se = obs.se / (a * (1.0 - a));
                    let d = (a / (1.0 - a)).ln() - (b / (1.0 - b)).ln();
                    gaussian_two_sided_pvalue(abs_statistic(d, se, 0.0))
                }
            }
            _ => gaussian_two_sided_pvalue(abs_statistic(obs.pi_hat, obs.se, pi)),
        })
        .collect()
}

pub(crate) fn bootstrap_curve(stats: &[f64], pis: &[f64]) -> Vec<f64> {
    let mut sorted = stats.to_vec();
    sorted.sort_by(f64::total_cmp);
    let b = sorted.len() as f64;
    pis.iter()
        .map(|&pi| {
            if sorted.is_empty() {
                return 0.0;
            }
            let below = sorted.partition_point(|&x| x < pi) as f64;
            let at_or_below = sorted.partition_point(|&x| x <= pi) as f64;
            (2.0 * (at_or_below / b).min(1.0 - below / b)).min(1.0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::function::gamma::ln_gamma;

    fn santa_clara() -> StudyCounts {
        StudyCounts::new(50, 3330, 130, 157, 368, 371).unwrap()
    }

    fn small_cfg(b: usize, seed: u64) -> ExactConfig {
        ExactConfig {
            replicates: b,
            net_points_per_axis: 10,
            seed: SeedSpec::new(seed, 0),
            ..ExactConfig::default()
        }
    }

    #[test]
    fn config_threshold() {
        let cfg = ExactConfig::default();
        assert!((cfg.alpha_adjustment() - 0.003).abs() < 1e-12);
        assert!((cfg.acceptance_threshold() - 0.047).abs() < 1e-12);
        assert_eq!(needed_count(0.047, 3000), 141);
        assert_eq!(needed_count(0.047, 500), 24);
        assert_eq!(needed_count(0.05, 100), 5);
        assert!(ExactConfig { net_points_per_axis: 1, ..cfg }.validate().is_err());
    }

    #[test]
    fn box_boundaries() {
        let c = StudyCounts::new(0, 100, 50, 60, 80, 80).unwrap();
        let b = nuisance_box(&c, &ExactConfig::default()).unwrap();
        assert_eq!(b.r.lower, 0.0);
        assert_eq!(b.q.upper, 1.0);
        let sc = nuisance_box(&santa_clara(), &ExactConfig::default()).unwrap();
        let cp = clopper_pearson(368, 371, 0.999).unwrap();
        assert_eq!(sc.q, cp);
    }

    #[test]
    fn net_points_satisfy_equation_and_box() {
        let cfg = ExactConfig::default();
        let b = nuisance_box(&santa_clara(), &cfg).unwrap();
        let net = build_net(0.01, &b, &cfg);
        assert!(!net.is_empty() && net.len() <= 900);
        for t in &net.points {
            let f = (t.r + t.q - 1.0) / (t.p + t.q - 1.0);
            assert!((f - 0.01).abs() < 1e-12);
            assert!(b.contains(t));
        }
        // Exhaustive re-check: every grid pair with r in I_r is present.
        let ps = even_grid(b.p.lower, b.p.upper, 30);
        let qs = even_grid(b.q.lower, b.q.upper, 30);
        let expected = ps
            .iter()
            .flat_map(|&p| qs.iter().map(move |&q| (p, q)))
            .filter(|&(p, q)| b.r.contains(0.01 * p + 0.99 * (1.0 - q)))
            .count();
        assert_eq!(expected, net.len());
    }

    #[test]
    fn empty_and_degenerate_nets() {
        let cfg = ExactConfig::default();
        let b = nuisance_box(&santa_clara(), &cfg).unwrap();
        assert!(build_net(0.5, &b, &cfg).is_empty());
        let point = |x: f64| ExactBinomialCI {
            lower: x,
            upper: x,
            level: 0.999,
        };
        let degenerate = NuisanceBox {
            r: point(rate_for(0.2, 0.9, 0.95)),
            p: point(0.9),
            q: point(0.95),
        };
        let net = build_net(0.2, &degenerate, &cfg);
        assert_eq!(net.len(), 1);
    }

    #[test]
    fn empty_net_pvalue_is_zero() {
        let cfg = small_cfg(50, 1);
        assert_eq!(exact_pvalue(&santa_clara(), 0.5, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn pvalue_at_estimate_is_one() {
        let c = santa_clara();
        let cfg = small_cfg(200, 2);
        let t = c.rates();
        let pi_hat = (t.r + t.q - 1.0) / (t.p + t.q - 1.0);
        let p = point_null_pvalue(&c, pi_hat, &t, &cfg, SeedSpec::new(9, 9)).unwrap();
        assert_eq!(p, 1.0);
        assert!(exact_pvalue(&c, pi_hat, &cfg).unwrap() > 0.9);
    }

    #[test]
    fn single_replicate_is_an_indicator() {
        let c = santa_clara();
        let cfg = small_cfg(1, 3);
        let null = RateTriple::new(0.02 * 0.83 + 0.98 * 0.01, 0.83, 0.99);
        for s in 0..20 {
            let p = point_null_pvalue(&c, 0.02, &null, &cfg, SeedSpec::new(s, 1)).unwrap();
            assert!(p == 0.0 || p == 1.0);
        }
    }

    fn binom_pmf(k: u64, n: u64, p: f64) -> f64 {
        if p == 0.0 {
            return if k == 0 { 1.0 } else { 0.0 };
        }
        if p == 1.0 {
            return if k == n { 1.0 } else { 0.0 };
        }
        let (k, n) = (k as f64, n as f64);
        (ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0) + k * p.ln() + (n - k) * (1.0 - p).ln()).exp()
    }

    /// Exact p-value of a simple null by enumerating all outcomes.
    fn enumerated_pvalue(counts: &StudyCounts, pi: f64, null: &RateTriple) -> f64 {
        let (big_d, big_m, big_n) = (counts.tested, counts.positive_panel, counts.negative_panel);
        let stat = |d: u64, m: u64, n: u64| -> f64 {
            let (r, p, q) = (d as f64 / big_d as f64, m as f64 / big_m as f64, n as f64 / big_n as f64);
            let s = p + q - 1.0;
            if s <= 1e-12 {
                return f64::INFINITY;
            }
            let est = (r + q - 1.0) / s;
            let var = r * (1.0 - r) / (big_d as f64 * s * s)
                + est * est * p * (1.0 - p) / (big_m as f64 * s * s)
                + (r - p).powi(2) * q * (1.0 - q) / (big_n as f64 * s.powi(4));
            let se = var.sqrt();
            if se > 0.0 {
                (est - pi).abs() / se
            } else if (est - pi).abs() < 1e-15 {
                0.0
            } else {
                f64::INFINITY
            }
        };
        let observed = stat(counts.positives, counts.true_positives, counts.true_negatives);
        let mut total = 0.0;
        for d in 0..=big_d {
            for m in 0..=big_m {
                for n in 0..=big_n {
                    if stat(d, m, n) >= observed - 1e-12 {
                        total += binom_pmf(d, big_d, null.r) * binom_pmf(m, big_m, null.p) * binom_pmf(n, big_n, null.q);
                    }
                }
            }
        }
        total
    }

    #[test]
    fn point_null_matches_enumeration_on_tiny_instance() {
        let c = StudyCounts::new(1, 3, 2, 3, 2, 3).unwrap();
        let cfg = small_cfg(100_000, 4);
        for &(pi, p, q) in &[(0.3, 2.0 / 3.0, 2.0 / 3.0), (0.5, 0.8, 0.7), (0.1, 2.0 / 3.0, 0.9)] {
            let null = RateTriple::new(rate_for(pi, p, q), p, q);
            let exact = enumerated_pvalue(&c, pi, &null);
            let mc = point_null_pvalue(&c, pi, &null, &cfg, SeedSpec::new(17, 3)).unwrap();
            let se = (exact * (1.0 - exact) / 1e5).sqrt().max(1e-6);
            assert!((mc - exact).abs() <= 3.0 * se, "pi={pi}: mc {mc} vs exact {exact}");
        }
    }

    #[test]
    fn early_stopping_agrees_with_full_count() {
        let c = santa_clara();
        let model = NullModel::unweighted(&c).unwrap();
        let obs = model.observed().unwrap();
        let need = needed_count(0.047, 500);
        for (i, pi) in [0.0, 0.005, 0.015, 0.02, 0.025].iter().enumerate() {
            let null = RateTriple::new(rate_for(*pi, 0.8, 0.995), 0.8, 0.995);
            let t = abs_statistic(obs.pi_hat, obs.se, *pi);
            let s = SeedSpec::new(5, i as u64);
            let full = model.count_exceedances(*pi, t, &null, 500, s, None, None, None).unwrap();
            let early = model.count_exceedances(*pi, t, &null, 500, s, Some(need), None, None).unwrap();
            let panels = model.panel_draws(&null, 500, s).unwrap();
            let cached = model.count_exceedances(*pi, t, &null, 500, s, None, None, Some(&panels)).unwrap();
            assert_eq!(full, cached);
            assert_eq!(full >= need, early >= need);
        }
    }

    #[test]
    fn max_dominance_over_net_points() {
        let c = santa_clara();
        let cfg = small_cfg(300, 6);
        let nbox = nuisance_box(&c, &cfg).unwrap();
        for &pi in &[0.004, 0.012, 0.02] {
            let composite = exact_pvalue(&c, pi, &cfg).unwrap();
            let net = build_net(pi, &nbox, &cfg);
            for pt in &net.points {
                let single = point_null_pvalue(&c, pi, pt, &cfg, net_point_stream(&cfg, pi, pt)).unwrap();
                assert!(composite >= single);
            }
        }
    }

    #[test]
    fn hybrid_nets() {
        let c = santa_clara();
        let cfg = small_cfg(100, 7);
        assert_eq!(
            hybrid_pvalue(&c, 0.01, Fixed::NONE, &cfg).unwrap(),
            exact_pvalue(&c, 0.01, &cfg).unwrap()
        );
        for &pi in &[0.0, 0.005, 0.01, 0.02] {
            let net = hybrid_net(&c, pi, Fixed::PR, &cfg).unwrap();
            assert!(net.len() <= cfg.net_points_per_axis);
            let net = hybrid_net(&c, pi, Fixed::P, &cfg).unwrap();
            assert!(net.len() <= cfg.net_points_per_axis);
            for t in net.points.iter().chain(hybrid_net(&c, pi, Fixed::R, &cfg).unwrap().points.iter()) {
                assert!(((t.r + t.q - 1.0) / (t.p + t.q - 1.0) - pi).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn hybrid_p_dominated_when_nets_nest() {
        // Perfect sensitivity panel: p_hat = 1 is the top of the p grid, so the
        // hybrid net is a subset of the exact net and shares its streams.
        let c = StudyCounts::new(40, 2000, 60, 60, 290, 300).unwrap();
        let cfg = small_cfg(200, 8);
        for &pi in &[0.005, 0.01, 0.02, 0.03] {
            let exact_net = hybrid_net(&c, pi, Fixed::NONE, &cfg).unwrap();
            let hyb_net = hybrid_net(&c, pi, Fixed::P, &cfg).unwrap();
            assert!(hyb_net.points.iter().all(|t| exact_net.points.contains(t)));
            let e = exact_pvalue(&c, pi, &cfg).unwrap();
            let h = hybrid_pvalue(&c, pi, Fixed::P, &cfg).unwrap();
            assert!(e >= h, "pi={pi}: {e} < {h}");
        }
    }

    #[test]
    fn hybrid_pr_contains_estimate_with_perfect_panels() {
        let c = StudyCounts::new(300, 1000, 50, 50, 80, 80).unwrap();
        let cfg = small_cfg(300, 9);
        let ci = hybrid_ci(&c, Fixed::PR, &cfg).unwrap();
        assert!(ci.contains(0.3), "{ci:?}");
    }

    #[test]
    fn degenerate_observed_statistic_is_usable() {
        // d = 0 and n = N: the observed standard error is zero.
        let c = StudyCounts::new(0, 500, 45, 50, 100, 100).unwrap();
        let cfg = small_cfg(200, 10);
        let ci = exact_ci(&c, &cfg).unwrap();
        assert_eq!(ci.lower, 0.0);
        assert!(ci.upper > 0.0 && ci.upper < 0.05, "{ci:?}");
    }

    #[test]
    fn exact_ci_deterministic_and_contains_estimate() {
        let c = StudyCounts::new(30, 1500, 90, 100, 290, 300).unwrap();
        let cfg = small_cfg(300, 11);
        let a = exact_ci(&c, &cfg).unwrap();
        let b = exact_ci(&c, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.contains(a.point));
        assert!(a.lower <= a.upper);
    }

    #[test]
    fn curves() {
        let c = santa_clara();
        let cfg = small_cfg(200, 12);
        let t = c.rates();
        let pi_hat = (t.r + t.q - 1.0) / (t.p + t.q - 1.0);
        let delta = pvalue_curve(&c, Method::Delta, (0.0, 0.03), 0.001, &cfg).unwrap();
        assert_eq!(delta.pis.len(), 31);
        let nearest = delta
            .pis
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - pi_hat).abs().total_cmp(&(b.1 - pi_hat).abs()))
            .unwrap()
            .0;
        let peak = delta.pvalues.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(peak, nearest);
        let at_hat = pvalue_curve(&c, Method::Delta, (pi_hat, pi_hat + 0.01), 0.01, &cfg).unwrap();
        assert!(at_hat.pvalues[0] > 1.0 - 1e-12);

        let exact = pvalue_curve(&c, Method::Exact, (0.0, 0.1), 0.01, &cfg).unwrap();
        assert!(exact.pvalues.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert_eq!(*exact.pvalues.last().unwrap(), 0.0);

        assert!(matches!(
            pvalue_curve(&c, Method::HybridLambda, (0.0, 0.1), 0.01, &cfg),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            pvalue_curve(&c, Method::Delta, (0.1, 0.0), 0.01, &cfg),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn bootstrap_curve_matches_percentile_interval() {
        let stats: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
        let p = bootstrap_curve(&stats, &[0.5, 0.0, 1.5]);
        assert!((p[0] - 1.0).abs() < 0.01);
        assert!(p[1] <= 0.01);
        assert_eq!(p[2], 0.0);
    }
}
