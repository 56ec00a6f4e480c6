//! Closed-form prevalence estimator, its delta-method variance, the Wald
//! statistic and the two asymptotic intervals.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::stochastics::{check_level, gaussian_quantile};

/// Values of `p + q - 1` at or below this are treated as an uninformative test.
pub const SINGULAR_EPS: f64 = 1e-12;

/// Counts from the three binomial experiments: the survey (`d` of `D`
/// positive), the positive reference panel (`m` of `M` detected) and the
/// negative reference panel (`n` of `N` correctly negative).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StudyCounts {
    #[serde(rename = "d")]
    pub positives: u64,
    #[serde(rename = "D")]
    pub tested: u64,
    #[serde(rename = "m")]
    pub true_positives: u64,
    #[serde(rename = "M")]
    pub positive_panel: u64,
    #[serde(rename = "n")]
    pub true_negatives: u64,
    #[serde(rename = "N")]
    pub negative_panel: u64,
}

impl StudyCounts {
    /// Validating constructor, arguments in `(d, D, m, M, n, N)` order.
    pub fn new(d: u64, big_d: u64, m: u64, big_m: u64, n: u64, big_n: u64) -> Result<Self> {
        let counts = Self {
            positives: d,
            tested: big_d,
            true_positives: m,
            positive_panel: big_m,
            true_negatives: n,
            negative_panel: big_n,
        };
        counts.validate()?;
        Ok(counts)
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("D", self.tested, "d", self.positives),
            ("M", self.positive_panel, "m", self.true_positives),
            ("N", self.negative_panel, "n", self.true_negatives),
        ];
        for (total_name, total, hits_name, hits) in checks {
            if total == 0 {
                return Err(Error::validation(total_name, format!("{total_name} must be at least 1")));
            }
            if hits > total {
                return Err(Error::validation(
                    hits_name,
                    format!("{hits_name} exceeds {total_name} ({hits} > {total})"),
                ));
            }
        }
        Ok(())
    }

    /// Observed rates `(d/D, m/M, n/N)`.
    pub fn rates(&self) -> RateTriple {
        RateTriple {
            r: self.positives as f64 / self.tested as f64,
            p: self.true_positives as f64 / self.positive_panel as f64,
            q: self.true_negatives as f64 / self.negative_panel as f64,
        }
    }

    pub fn sizes(&self) -> SampleSizes {
        SampleSizes {
            tested: self.tested,
            positive_panel: self.positive_panel,
            negative_panel: self.negative_panel,
        }
    }
}

/// The three experiment sizes `(D, M, N)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSizes {
    pub tested: u64,
    pub positive_panel: u64,
    pub negative_panel: u64,
}

/// Positive-test rate, sensitivity and specificity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateTriple {
    pub r: f64,
    pub p: f64,
    pub q: f64,
}

impl RateTriple {
    pub fn new(r: f64, p: f64, q: f64) -> Self {
        Self { r, p, q }
    }

    /// `p + q - 1`, the denominator of the estimator.
    #[inline]
    pub fn informativeness(&self) -> f64 {
        self.p + self.q - 1.0
    }
}

/// Tag naming the procedure that produced an interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Delta,
    DeltaLogit,
    Bootstrap,
    Exact,
    HybridP,
    HybridR,
    HybridPr,
    HybridLambda,
    HybridLambdaP,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Delta,
        Method::DeltaLogit,
        Method::Bootstrap,
        Method::Exact,
        Method::HybridP,
        Method::HybridR,
        Method::HybridPr,
        Method::HybridLambda,
        Method::HybridLambdaP,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Delta => "delta",
            Method::DeltaLogit => "delta_logit",
            Method::Bootstrap => "bootstrap",
            Method::Exact => "exact",
            Method::HybridP => "hybrid_p",
            Method::HybridR => "hybrid_r",
            Method::HybridPr => "hybrid_pr",
            Method::HybridLambda => "hybrid_lambda",
            Method::HybridLambdaP => "hybrid_lambda_p",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    /// Accepts both `delta_logit` and the CLI spelling `delta-logit`.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| Error::Usage(format!("unknown method `{s}`")))
    }
}

/// A method-tagged confidence interval for prevalence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub method: Method,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    #[serde(default)]
    pub diagnostics: BTreeMap<String, Value>,
}

impl IntervalEstimate {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }

    pub(crate) fn note(&mut self, key: &str, value: impl Into<Value>) {
        self.diagnostics.insert(key.to_string(), value.into());
    }
}

#[inline]
pub(crate) fn clamp_unit(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// `f(r, p, q) = (r + q - 1) / (p + q - 1)`, unclamped. Evaluated as
/// `(r - (1 - q)) / (p - (1 - q))` so that `f(r, 1, 1) == r` exactly.
pub fn adjusted_prevalence(t: RateTriple) -> Result<f64> {
    let s = t.informativeness();
    if s <= SINGULAR_EPS {
        return Err(Error::Singular(s));
    }
    let fp = 1.0 - t.q;
    Ok((t.r - fp) / (t.p - fp))
}

/// Estimate and delta variance in one pass; `None` when singular. Used in the
/// Monte Carlo inner loops where an `Error` would be wasted work.
#[inline]
pub(crate) fn estimate_and_variance(
    r: f64,
    p: f64,
    q: f64,
    big_d: f64,
    big_m: f64,
    big_n: f64,
) -> Option<(f64, f64)> {
    let s = p + q - 1.0;
    if s <= SINGULAR_EPS {
        return None;
    }
    let fp = 1.0 - q;
    let pi = (r - fp) / (p - fp);
    let s2 = s * s;
    let var = r * (1.0 - r) / (big_d * s2)
        + pi * pi * p * (1.0 - p) / (big_m * s2)
        + (r - p) * (r - p) * q * (1.0 - q) / (big_n * s2 * s2);
    Some((pi, var))
}

/// Delta-method variance of the estimator at `t`.
pub fn delta_variance(t: RateTriple, sizes: SampleSizes) -> Result<f64> {
    if sizes.tested == 0 || sizes.positive_panel == 0 || sizes.negative_panel == 0 {
        return Err(Error::domain("sample sizes must be at least 1"));
    }
    estimate_and_variance(
        t.r,
        t.p,
        t.q,
        sizes.tested as f64,
        sizes.positive_panel as f64,
        sizes.negative_panel as f64,
    )
    .map(|(_, v)| v)
    .ok_or(Error::Singular(t.informativeness()))
}

/// Point estimate and standard error evaluated at the observed rates.
pub fn estimate_with_se(counts: &StudyCounts) -> Result<(f64, f64)> {
    counts.validate()?;
    let t = counts.rates();
    let pi = adjusted_prevalence(t)?;
    let var = delta_variance(t, counts.sizes())?;
    Ok((pi, var.sqrt()))
}

/// Wald statistic `(pi_hat - pi) / se_hat`.
pub fn test_statistic(counts: &StudyCounts, pi: f64) -> Result<f64> {
    let (pi_hat, se) = estimate_with_se(counts)?;
    if se <= 0.0 {
        return Err(Error::DegenerateStatistic);
    }
    Ok((pi_hat - pi) / se)
}

pub(crate) fn two_sided_z(level: f64) -> Result<f64> {
    check_level(level)?;
    gaussian_quantile(1.0 - 0.5 * (1.0 - level))
}

/// Symmetric interval `est ± z·se`, clamped, with the raw values recorded.
pub(crate) fn wald_interval(method: Method, est: f64, se: f64, level: f64) -> Result<IntervalEstimate> {
    let z = two_sided_z(level)?;
    let (lo, hi) = (est - z * se, est + z * se);
    let mut out = IntervalEstimate {
        method,
        point: clamp_unit(est),
        lower: clamp_unit(lo),
        upper: clamp_unit(hi),
        level,
        diagnostics: BTreeMap::new(),
    };
    out.note("raw_point", est);
    out.note("raw_lower", lo);
    out.note("raw_upper", hi);
    out.note("se", se);
    Ok(out)
}

/// Interval built on the logit scale and mapped back. Falls back to the
/// clamped Wald interval when the estimate is at or beyond 0 or 1.
pub(crate) fn logit_interval(method: Method, est: f64, se: f64, level: f64) -> Result<IntervalEstimate> {
    let z = two_sided_z(level)?;
    if est <= 0.0 || est >= 1.0 {
        let mut out = wald_interval(method, est, se, level)?;
        if est <= 0.0 {
            out.lower = 0.0;
        } else {
            out.upper = 1.0;
        }
        out.note("logit_fallback", true);
        return Ok(out);
    }
    let logit = (est / (1.0 - est)).ln();
    let half = z * se / (est * (1.0 - est));
    let expit = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut out = IntervalEstimate {
        method,
        point: est,
        lower: expit(logit - half),
        upper: expit(logit + half),
        level,
        diagnostics: BTreeMap::new(),
    };
    out.note("raw_point", est);
    out.note("se", se);
    Ok(out)
}

/// Delta-method interval `pi_hat ± z·se_hat`, clamped to [0, 1].
pub fn delta_ci(counts: &StudyCounts, level: f64) -> Result<IntervalEstimate> {
    let (pi, se) = estimate_with_se(counts)?;
    wald_interval(Method::Delta, pi, se, level)
}

/// Delta-method interval on the logit scale.
///
/// Estimates of exactly 0 or 1 (e.g. no positives at all) have no logit; the
/// result is then `[0, delta upper]` (or `[delta lower, 1]`) with
/// `logit_fallback` set in the diagnostics.
pub fn delta_logit_ci(counts: &StudyCounts, level: f64) -> Result<IntervalEstimate> {
    let (pi, se) = estimate_with_se(counts)?;
    logit_interval(Method::DeltaLogit, pi, se, level)
}
