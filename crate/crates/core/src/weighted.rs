//! Weighted prevalence: stratum-specific and individual-specific designs.
//!
//! The weighted positive count `d_w` is treated as Gaussian with variance
//! inflated by `lambda` relative to simple random sampling. Test inversion
//! then runs with `lambda` pinned at its estimate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{ExactConfig, Fixed, Inversion, NullModel, PValueCurve, RateModel};
use crate::point::{
    clamp_unit, logit_interval, two_sided_z, wald_interval, IntervalEstimate, Method, RateTriple, SampleSizes,
    SINGULAR_EPS,
};
use crate::resampling::{bootstrap_interval, BootstrapConfig, AXIS_P, AXIS_Q, AXIS_R};
use crate::stochastics::{BinomialSampler, SeedSpec};

/// Stratum expected positive counts below this make the Gaussian
/// approximation questionable.
pub const LOW_COUNT_WARNING: f64 = 10.0;

/// Reference panels shared by all weighted designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Panels {
    #[serde(rename = "m")]
    pub true_positives: u64,
    #[serde(rename = "M")]
    pub positive_panel: u64,
    #[serde(rename = "n")]
    pub true_negatives: u64,
    #[serde(rename = "N")]
    pub negative_panel: u64,
}

impl Panels {
    pub fn new(m: u64, big_m: u64, n: u64, big_n: u64) -> Result<Self> {
        let panels = Self {
            true_positives: m,
            positive_panel: big_m,
            true_negatives: n,
            negative_panel: big_n,
        };
        panels.validate()?;
        Ok(panels)
    }

    pub fn validate(&self) -> Result<()> {
        for (k, n, kf, nf) in [
            (self.true_positives, self.positive_panel, "m", "M"),
            (self.true_negatives, self.negative_panel, "n", "N"),
        ] {
            if n == 0 {
                return Err(Error::validation(nf, format!("{nf} must be positive")));
            }
            if k > n {
                return Err(Error::validation(kf, format!("{kf} exceeds {nf} ({k} > {n})")));
            }
        }
        Ok(())
    }

    pub fn sensitivity(&self) -> f64 {
        self.true_positives as f64 / self.positive_panel as f64
    }

    pub fn specificity(&self) -> f64 {
        self.true_negatives as f64 / self.negative_panel as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    /// Population share of the stratum.
    #[serde(rename = "w")]
    pub weight: f64,
    #[serde(rename = "D")]
    pub tested: u64,
    #[serde(rename = "d")]
    pub positives: u64,
}

/// Strata with known population shares; sampling is random within strata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumDesign {
    pub strata: Vec<Stratum>,
    #[serde(flatten)]
    pub panels: Panels,
}

impl StratumDesign {
    pub fn new(strata: Vec<Stratum>, panels: Panels) -> Result<Self> {
        let design = Self { strata, panels };
        design.validate()?;
        Ok(design)
    }

    pub fn validate(&self) -> Result<()> {
        if self.strata.is_empty() {
            return Err(Error::validation("strata", "at least one stratum is required"));
        }
        for (s, st) in self.strata.iter().enumerate() {
            if !(st.weight.is_finite() && st.weight >= 0.0) {
                return Err(Error::validation(format!("strata[{s}].w"), "weight must be finite and non-negative"));
            }
            if st.tested == 0 {
                return Err(Error::validation(format!("strata[{s}].D"), "D must be positive"));
            }
            if st.positives > st.tested {
                return Err(Error::validation(
                    format!("strata[{s}].d"),
                    format!("d exceeds D ({} > {})", st.positives, st.tested),
                ));
            }
        }
        let total: f64 = self.strata.iter().map(|s| s.weight).sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::validation("strata.w", format!("weights must sum to 1, got {total}")));
        }
        self.panels.validate()
    }

    pub fn tested(&self) -> u64 {
        self.strata.iter().map(|s| s.tested).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    #[serde(rename = "w")]
    pub weight: f64,
    #[serde(rename = "d")]
    pub positive: bool,
}

/// Per-subject weights (summing to the number tested) and test results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualDesign {
    pub subjects: Vec<Subject>,
    #[serde(flatten)]
    pub panels: Panels,
}

impl IndividualDesign {
    pub fn new(subjects: Vec<Subject>, panels: Panels) -> Result<Self> {
        let design = Self { subjects, panels };
        design.validate()?;
        Ok(design)
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() {
            return Err(Error::validation("subjects", "at least one subject is required"));
        }
        for (i, s) in self.subjects.iter().enumerate() {
            if !(s.weight.is_finite() && s.weight >= 0.0) {
                return Err(Error::validation(format!("subjects[{i}].w"), "weight must be finite and non-negative"));
            }
        }
        let d = self.subjects.len() as f64;
        let total: f64 = self.subjects.iter().map(|s| s.weight).sum();
        if (total - d).abs() > 1e-6 * d {
            return Err(Error::validation(
                "subjects.w",
                format!("weights must sum to the number of subjects ({d}), got {total}"),
            ));
        }
        self.panels.validate()
    }
}

/// Either weighting scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightedDesign {
    Stratum(StratumDesign),
    Individual(IndividualDesign),
}

impl WeightedDesign {
    pub fn panels(&self) -> Panels {
        match self {
            WeightedDesign::Stratum(s) => s.panels,
            WeightedDesign::Individual(i) => i.panels,
        }
    }

    pub fn summary(&self) -> Result<WeightedSummary> {
        match self {
            WeightedDesign::Stratum(s) => stratum_summary(s),
            WeightedDesign::Individual(i) => individual_summary(i),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    Stratum,
    Individual,
}

/// Sufficient statistics of a weighted design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedSummary {
    pub r_w_hat: f64,
    pub lambda_hat: f64,
    /// Total number tested.
    #[serde(rename = "D")]
    pub tested: u64,
    pub kind: WeightKind,
    /// No weighted positives: `lambda_hat` set to 1.
    pub lambda_fallback: bool,
    /// Some stratum has `D_s r_s` below [`LOW_COUNT_WARNING`].
    pub low_count_warning: bool,
}

impl WeightedSummary {
    fn rate_model(&self) -> RateModel {
        match self.kind {
            WeightKind::Stratum => RateModel::Poisson { lambda: self.lambda_hat },
            WeightKind::Individual => RateModel::Bernoulli { lambda: self.lambda_hat },
        }
    }

    pub(crate) fn null_model(&self, panels: &Panels) -> NullModel {
        NullModel {
            observed: RateTriple::new(self.r_w_hat, panels.sensitivity(), panels.specificity()),
            sizes: SampleSizes {
                tested: self.tested,
                positive_panel: panels.positive_panel,
                negative_panel: panels.negative_panel,
            },
            true_positives: panels.true_positives,
            true_negatives: panels.true_negatives,
            rate_model: self.rate_model(),
        }
    }

    fn annotate(&self, out: &mut IntervalEstimate) {
        out.note("r_w_hat", self.r_w_hat);
        out.note("lambda_hat", self.lambda_hat);
        out.note(
            "weighting",
            match self.kind {
                WeightKind::Stratum => "stratum",
                WeightKind::Individual => "individual",
            },
        );
        if self.lambda_fallback {
            out.note("lambda_fallback", true);
        }
        if self.low_count_warning {
            out.note("low_stratum_count", true);
        }
    }
}

/// `r_w = sum w~_s d_s / D` with `w~_s = w_s D / D_s`, and
/// `lambda = sum w~_s w_s r_s / r_w`.
pub fn stratum_summary(design: &StratumDesign) -> Result<WeightedSummary> {
    design.validate()?;
    let big_d = design.tested() as f64;
    let mut d_w = 0.0;
    let mut inflated = 0.0;
    let mut low = false;
    for s in &design.strata {
        let tilde = s.weight * big_d / s.tested as f64;
        let r_s = s.positives as f64 / s.tested as f64;
        d_w += tilde * s.positives as f64;
        inflated += tilde * s.weight * r_s;
        if (s.positives as f64) < LOW_COUNT_WARNING {
            low = true;
        }
    }
    let r_w_hat = d_w / big_d;
    let (lambda_hat, lambda_fallback) = if r_w_hat > 0.0 { (inflated / r_w_hat, false) } else { (1.0, true) };
    Ok(WeightedSummary {
        r_w_hat,
        lambda_hat,
        tested: design.tested(),
        kind: WeightKind::Stratum,
        lambda_fallback,
        low_count_warning: low,
    })
}

/// `r_w = sum w_i d_i / D` and `lambda = sum w_i^2 d_i / sum w_i d_i`.
pub fn individual_summary(design: &IndividualDesign) -> Result<WeightedSummary> {
    design.validate()?;
    let (mut s1, mut s2) = (0.0, 0.0);
    for s in design.subjects.iter().filter(|s| s.positive) {
        s1 += s.weight;
        s2 += s.weight * s.weight;
    }
    let big_d = design.subjects.len();
    let (lambda_hat, lambda_fallback) = if s1 > 0.0 { (s2 / s1, false) } else { (1.0, true) };
    Ok(WeightedSummary {
        r_w_hat: s1 / big_d as f64,
        lambda_hat,
        tested: big_d as u64,
        kind: WeightKind::Individual,
        lambda_fallback,
        low_count_warning: false,
    })
}

/// Unclamped weighted prevalence `f(r_w, p, q)`.
pub fn weighted_estimate(summary: &WeightedSummary, panels: &Panels) -> Result<f64> {
    let (p, q) = (panels.sensitivity(), panels.specificity());
    let s = p + q - 1.0;
    if s <= SINGULAR_EPS {
        return Err(Error::Singular(s));
    }
    Ok((summary.r_w_hat - (1.0 - q)) / (p - (1.0 - q)))
}

/// Delta-method standard deviation with the rate term `lambda r_w` (stratum)
/// or `lambda r_w (1 - r_w)` (individual).
pub fn weighted_sigma(summary: &WeightedSummary, panels: &Panels) -> Result<f64> {
    let model = summary.null_model(panels);
    let t = model.observed;
    model
        .estimate(t.r, t.p, t.q)
        .map(|(_, se)| se)
        .ok_or(Error::Singular(t.informativeness()))
}

fn estimate_and_sigma(design: &WeightedDesign) -> Result<(WeightedSummary, f64, f64)> {
    let summary = design.summary()?;
    let panels = design.panels();
    Ok((summary, weighted_estimate(&summary, &panels)?, weighted_sigma(&summary, &panels)?))
}

/// `pi_w +/- z sigma_w`, clamped to [0, 1].
pub fn weighted_delta_ci(design: &WeightedDesign, level: f64) -> Result<IntervalEstimate> {
    two_sided_z(level)?;
    let (summary, est, se) = estimate_and_sigma(design)?;
    let mut out = wald_interval(Method::Delta, est, se, level)?;
    summary.annotate(&mut out);
    Ok(out)
}

/// Logit-scale delta interval for the weighted prevalence.
pub fn weighted_delta_logit_ci(design: &WeightedDesign, level: f64) -> Result<IntervalEstimate> {
    let (summary, est, se) = estimate_and_sigma(design)?;
    let mut out = logit_interval(Method::DeltaLogit, est, se, level)?;
    summary.annotate(&mut out);
    Ok(out)
}

/// Simple parametric bootstrap on the weighted rate: `r* ~ Bin(D, r_w)/D`
/// with the panels resampled binomially. The weighting enters only through
/// `r_w`; no variance inflation is applied.
pub fn weighted_bootstrap_ci(design: &WeightedDesign, cfg: &BootstrapConfig) -> Result<IntervalEstimate> {
    cfg.validate()?;
    let (summary, est, _) = estimate_and_sigma(design)?;
    let panels = design.panels();
    let stats = weighted_bootstrap_replicates(&summary, &panels, cfg.replicates, cfg.seed)?;
    let skipped = cfg.replicates - stats.len();
    let mut out = bootstrap_interval(est, stats, skipped, cfg)?;
    summary.annotate(&mut out);
    Ok(out)
}

pub(crate) fn weighted_bootstrap_replicates(
    summary: &WeightedSummary,
    panels: &Panels,
    replicates: usize,
    seed: SeedSpec,
) -> Result<Vec<f64>> {
    let sample_r = BinomialSampler::new(summary.tested, clamp_unit(summary.r_w_hat))?;
    let sample_p = BinomialSampler::new(panels.positive_panel, panels.sensitivity())?;
    let sample_q = BinomialSampler::new(panels.negative_panel, panels.specificity())?;
    let (mut rng_r, mut rng_p, mut rng_q) = (
        seed.derive(AXIS_R).rng(),
        seed.derive(AXIS_P).rng(),
        seed.derive(AXIS_Q).rng(),
    );
    let (big_d, big_m, big_n) = (
        summary.tested as f64,
        panels.positive_panel as f64,
        panels.negative_panel as f64,
    );
    let mut stats = Vec::with_capacity(replicates);
    for _ in 0..replicates {
        let r = sample_r.sample(&mut rng_r) as f64 / big_d;
        let p = sample_p.sample(&mut rng_p) as f64 / big_m;
        let q = sample_q.sample(&mut rng_q) as f64 / big_n;
        if p + q - 1.0 > SINGULAR_EPS {
            stats.push((r - (1.0 - q)) / (p - (1.0 - q)));
        }
    }
    Ok(stats)
}

fn weighted_fixing(method: Method) -> Result<Fixed> {
    match method {
        Method::HybridLambda => Ok(Fixed::NONE),
        Method::HybridLambdaP => Ok(Fixed::P),
        other => Err(Error::Usage(format!(
            "`{other}` is not a weighted test-inversion method (use hybrid_lambda or hybrid_lambda_p)"
        ))),
    }
}

/// Composite p-value for `pi_w = pi` with `lambda` pinned at its estimate
/// (and `p` too for [`Method::HybridLambdaP`]).
pub fn weighted_hybrid_pvalue(design: &WeightedDesign, pi: f64, method: Method, cfg: &ExactConfig) -> Result<f64> {
    let summary = design.summary()?;
    let inv = Inversion::new(summary.null_model(&design.panels()), weighted_fixing(method)?, cfg)?;
    inv.pvalue(pi)
}

/// Hybrid interval for the weighted prevalence.
pub fn weighted_hybrid_ci(design: &WeightedDesign, method: Method, cfg: &ExactConfig) -> Result<IntervalEstimate> {
    let summary = design.summary()?;
    let inv = Inversion::new(summary.null_model(&design.panels()), weighted_fixing(method)?, cfg)?;
    let mut out = inv.interval(method)?;
    summary.annotate(&mut out);
    Ok(out)
}

/// Interval for any method applicable to a weighted design.
pub fn weighted_ci(
    design: &WeightedDesign,
    method: Method,
    level: f64,
    exact: &ExactConfig,
    boot: &BootstrapConfig,
) -> Result<IntervalEstimate> {
    match method {
        Method::Delta => weighted_delta_ci(design, level),
        Method::DeltaLogit => weighted_delta_logit_ci(design, level),
        Method::Bootstrap => weighted_bootstrap_ci(design, boot),
        Method::HybridLambda | Method::HybridLambdaP => weighted_hybrid_ci(design, method, exact),
        other => Err(Error::Usage(format!("`{other}` does not apply to weighted data"))),
    }
}

/// p-value curve for a weighted design.
pub fn weighted_pvalue_curve(
    design: &WeightedDesign,
    method: Method,
    pi_range: (f64, f64),
    step: f64,
    cfg: &ExactConfig,
) -> Result<PValueCurve> {
    use crate::exact::{asymptotic_curve, bootstrap_curve, pi_grid, Observed};
    let pis = pi_grid(pi_range.0, pi_range.1, step)?;
    let summary = design.summary()?;
    let panels = design.panels();
    let pvalues = match method {
        Method::Delta | Method::DeltaLogit => {
            let obs = Observed {
                pi_hat: weighted_estimate(&summary, &panels)?,
                se: weighted_sigma(&summary, &panels)?,
            };
            asymptotic_curve(method, obs, &pis)
        }
        Method::Bootstrap => {
            weighted_estimate(&summary, &panels)?;
            let stats = weighted_bootstrap_replicates(&summary, &panels, cfg.replicates, cfg.seed)?;
            bootstrap_curve(&stats, &pis)
        }
        Method::HybridLambda | Method::HybridLambdaP => {
            let inv = Inversion::new(summary.null_model(&panels), weighted_fixing(method)?, cfg)?;
            pis.iter().map(|&pi| inv.pvalue(pi)).collect::<Result<Vec<_>>>()?
        }
        other => return Err(Error::Usage(format!("`{other}` does not apply to weighted data"))),
    };
    Ok(PValueCurve { method, pis, pvalues })
}
