//! Coverage and length of confidence intervals under simulated data.

use rand_distr::{Distribution, LogNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{hybrid_ci, ExactConfig, Fixed};
use crate::point::{delta_ci, delta_logit_ci, IntervalEstimate, Method, StudyCounts};
use crate::resampling::{bootstrap_ci, BootstrapConfig};
use crate::stochastics::{gaussian_quantile, BinomialSampler, SeedSpec};
use crate::weighted::{
    weighted_ci, IndividualDesign, Panels, Stratum, StratumDesign, Subject, WeightedDesign,
};

const LABEL_DATA: u64 = 0x6461_7461;
const LABEL_METHOD: u64 = 0x6d65_7468;

/// Truth for one stratum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StratumTruth {
    #[serde(rename = "w")]
    pub weight: f64,
    pub prevalence: f64,
    #[serde(rename = "D")]
    pub tested: u64,
}

/// How the surveyed population is generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Population {
    /// Simple random sample of `D` with prevalence `pi0`.
    Unweighted {
        pi0: f64,
        #[serde(rename = "D")]
        tested: u64,
    },
    /// Independent strata with known shares.
    Stratified { strata: Vec<StratumTruth> },
    /// Subjects with weights and `pi_i = expit(intercept + slope w_i)`.
    Individual { weights: Vec<f64>, intercept: f64, slope: f64 },
}

impl Population {
    /// The prevalence every interval should cover.
    pub fn target(&self) -> f64 {
        match self {
            Population::Unweighted { pi0, .. } => *pi0,
            Population::Stratified { strata } => strata.iter().map(|s| s.weight * s.prevalence).sum(),
            Population::Individual {
                weights,
                intercept,
                slope,
            } => individual_target(weights, *intercept, *slope),
        }
    }

    fn validate(&self) -> Result<()> {
        let unit = |x: f64, field: &str| {
            if (0.0..=1.0).contains(&x) {
                Ok(())
            } else {
                Err(Error::validation(field, format!("must lie in [0, 1], got {x}")))
            }
        };
        match self {
            Population::Unweighted { pi0, tested } => {
                unit(*pi0, "pi0")?;
                if *tested == 0 {
                    return Err(Error::validation("D", "D must be positive"));
                }
            }
            Population::Stratified { strata } => {
                if strata.is_empty() {
                    return Err(Error::validation("strata", "at least one stratum is required"));
                }
                for (s, st) in strata.iter().enumerate() {
                    unit(st.prevalence, &format!("strata[{s}].prevalence"))?;
                    if st.tested == 0 {
                        return Err(Error::validation(format!("strata[{s}].D"), "D must be positive"));
                    }
                }
                let total: f64 = strata.iter().map(|s| s.weight).sum();
                if (total - 1.0).abs() > 1e-10 {
                    return Err(Error::validation("strata.w", format!("weights must sum to 1, got {total}")));
                }
            }
            Population::Individual { weights, .. } => {
                if weights.is_empty() {
                    return Err(Error::validation("weights", "at least one subject is required"));
                }
                let d = weights.len() as f64;
                let total: f64 = weights.iter().sum();
                if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || (total - d).abs() > 1e-6 * d {
                    return Err(Error::validation("weights", "weights must be non-negative and sum to D"));
                }
            }
        }
        Ok(())
    }
}

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn individual_target(weights: &[f64], intercept: f64, slope: f64) -> f64 {
    weights.iter().map(|&w| w * expit(intercept + slope * w)).sum::<f64>() / weights.len() as f64
}

/// Intercept `a` such that `D^-1 sum w_i expit(a + slope w_i) = target`.
pub fn solve_intercept(weights: &[f64], slope: f64, target: f64) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::domain("target prevalence must lie in (0, 1)"));
    }
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if individual_target(weights, mid, slope) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// One simulation cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub population: Population,
    /// True sensitivity.
    pub p0: f64,
    /// True specificity.
    pub q0: f64,
    #[serde(rename = "M")]
    pub positive_panel: u64,
    #[serde(rename = "N")]
    pub negative_panel: u64,
    pub methods: Vec<Method>,
    pub replications: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    /// Replicates per net point for the exact method.
    #[serde(default = "default_exact_replicates")]
    pub exact_replicates: usize,
    /// Replicates per net point for hybrid methods.
    #[serde(default = "default_hybrid_replicates")]
    pub hybrid_replicates: usize,
    #[serde(default = "default_bootstrap_replicates")]
    pub bootstrap_replicates: usize,
    #[serde(default = "default_net")]
    pub net_points_per_axis: usize,
    pub seed: SeedSpec,
}

fn default_level() -> f64 {
    0.95
}
fn default_exact_replicates() -> usize {
    500
}
fn default_hybrid_replicates() -> usize {
    1000
}
fn default_bootstrap_replicates() -> usize {
    500
}
fn default_net() -> usize {
    30
}

impl SimScenario {
    pub fn new(population: Population, p0: f64, q0: f64, big_m: u64, big_n: u64, methods: Vec<Method>) -> Self {
        Self {
            population,
            p0,
            q0,
            positive_panel: big_m,
            negative_panel: big_n,
            methods,
            replications: 500,
            level: default_level(),
            exact_replicates: default_exact_replicates(),
            hybrid_replicates: default_hybrid_replicates(),
            bootstrap_replicates: default_bootstrap_replicates(),
            net_points_per_axis: default_net(),
            seed: SeedSpec::new(0, 0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.population.validate()?;
        for (x, f) in [(self.p0, "p0"), (self.q0, "q0")] {
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::validation(f, format!("must lie in [0, 1], got {x}")));
            }
        }
        if self.positive_panel == 0 || self.negative_panel == 0 {
            return Err(Error::validation("M/N", "panel sizes must be positive"));
        }
        if self.replications == 0 {
            return Err(Error::validation("replications", "at least one replication is required"));
        }
        if self.methods.is_empty() {
            return Err(Error::validation("methods", "at least one method is required"));
        }
        let weighted = !matches!(self.population, Population::Unweighted { .. });
        for &m in &self.methods {
            let ok = match m {
                Method::Delta | Method::DeltaLogit | Method::Bootstrap => true,
                Method::HybridLambda | Method::HybridLambdaP => weighted,
                _ => !weighted,
            };
            if !ok {
                return Err(Error::Usage(format!("method `{m}` does not apply to this population")));
            }
        }
        Ok(())
    }

    fn exact_config(&self, method: Method, seed: SeedSpec) -> ExactConfig {
        let replicates = if method == Method::Exact {
            self.exact_replicates
        } else {
            self.hybrid_replicates
        };
        ExactConfig {
            replicates,
            net_points_per_axis: self.net_points_per_axis,
            alpha: 1.0 - self.level,
            seed,
            ..ExactConfig::default()
        }
    }
}

/// Coverage and length for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub coverage: f64,
    /// Mean interval length over replications that produced an interval.
    pub length: f64,
    pub coverage_se: f64,
    /// Replications where the method failed; counted as not covering.
    pub failures: usize,
}

/// Result of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    /// The prevalence the intervals target.
    pub pi0: f64,
    pub q0: f64,
    pub replications: usize,
    pub methods: Vec<MethodSummary>,
}

impl SimResult {
    pub fn method(&self, m: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }
}

/// Per-replication outcome: for each method, `Some((covered, length))` or
/// `None` on failure.
type Outcome = Vec<Option<(bool, f64)>>;

fn tally(scenario: &SimScenario, target: f64, outcomes: Vec<Outcome>) -> SimResult {
    let reps = outcomes.len();
    let methods = scenario
        .methods
        .iter()
        .enumerate()
        .map(|(k, &method)| {
            let mut covered = 0usize;
            let mut failures = 0usize;
            let mut total_len = 0.0;
            for o in &outcomes {
                match o[k] {
                    Some((c, len)) => {
                        covered += c as usize;
                        total_len += len;
                    }
                    None => failures += 1,
                }
            }
            let coverage = covered as f64 / reps as f64;
            let ok = reps - failures;
            MethodSummary {
                method,
                coverage,
                length: if ok > 0 { total_len / ok as f64 } else { 0.0 },
                coverage_se: (coverage * (1.0 - coverage) / reps as f64).sqrt(),
                failures,
            }
        })
        .collect();
    SimResult {
        pi0: target,
        q0: scenario.q0,
        replications: reps,
        methods,
    }
}

fn outcome(ci: Result<IntervalEstimate>, target: f64) -> Option<(bool, f64)> {
    ci.ok().map(|ci| (ci.lower <= target && target <= ci.upper, ci.length()))
}

fn draw_panels(scenario: &SimScenario, seed: SeedSpec) -> Result<(u64, u64)> {
    let m = BinomialSampler::new(scenario.positive_panel, scenario.p0)?.sample(&mut seed.derive(1).rng());
    let n = BinomialSampler::new(scenario.negative_panel, scenario.q0)?.sample(&mut seed.derive(2).rng());
    Ok((m, n))
}

fn apparent_rate(pi: f64, p: f64, q: f64) -> f64 {
    (pi * p + (1.0 - pi) * (1.0 - q)).clamp(0.0, 1.0)
}

fn replication_seeds(scenario: &SimScenario, rep: usize) -> (SeedSpec, SeedSpec) {
    let base = scenario.seed.derive(rep as u64);
    (base.derive(LABEL_DATA), base.derive(LABEL_METHOD))
}

fn run_replications<F>(scenario: &SimScenario, one: F) -> Result<SimResult>
where
    F: Fn(usize) -> Result<Outcome> + Send + Sync,
{
    scenario.validate()?;
    let target = scenario.population.target();
    let outcomes: Result<Vec<Outcome>> = (0..scenario.replications).into_par_iter().map(one).collect();
    Ok(tally(scenario, target, outcomes?))
}

/// Simple random sampling: `d ~ Bin(D, r0)`, `m ~ Bin(M, p0)`, `n ~ Bin(N, q0)`.
pub fn run_unweighted_cell(scenario: &SimScenario) -> Result<SimResult> {
    let (pi0, tested) = match scenario.population {
        Population::Unweighted { pi0, tested } => (pi0, tested),
        _ => return Err(Error::Usage("run_unweighted_cell needs an unweighted population".into())),
    };
    run_replications(scenario, |rep| {
        let (data, methods) = replication_seeds(scenario, rep);
        let r0 = apparent_rate(pi0, scenario.p0, scenario.q0);
        let d = BinomialSampler::new(tested, r0)?.sample(&mut data.derive(0).rng());
        let (m, n) = draw_panels(scenario, data)?;
        let counts = StudyCounts::new(d, tested, m, scenario.positive_panel, n, scenario.negative_panel)?;
        Ok(scenario
            .methods
            .iter()
            .map(|&method| {
                let seed = methods.derive(method as u64);
                let ci = match method {
                    Method::Delta => delta_ci(&counts, scenario.level),
                    Method::DeltaLogit => delta_logit_ci(&counts, scenario.level),
                    Method::Bootstrap => bootstrap_ci(
                        &counts,
                        &BootstrapConfig::new(scenario.bootstrap_replicates, scenario.level, seed),
                    ),
                    other => Fixed::for_method(other)
                        .and_then(|fixed| hybrid_ci(&counts, fixed, &scenario.exact_config(other, seed))),
                };
                outcome(ci, pi0)
            })
            .collect())
    })
}

fn weighted_outcomes(scenario: &SimScenario, design: &WeightedDesign, target: f64, methods: SeedSpec) -> Outcome {
    scenario
        .methods
        .iter()
        .map(|&method| {
            let seed = methods.derive(method as u64);
            let exact = scenario.exact_config(method, seed);
            let boot = BootstrapConfig::new(scenario.bootstrap_replicates, scenario.level, seed);
            outcome(weighted_ci(design, method, scenario.level, &exact, &boot), target)
        })
        .collect()
}

/// Stratified sampling with `d_s ~ Bin(D_s, r_s)`.
pub fn run_stratified_cell(scenario: &SimScenario) -> Result<SimResult> {
    let strata = match &scenario.population {
        Population::Stratified { strata } => strata,
        _ => return Err(Error::Usage("run_stratified_cell needs a stratified population".into())),
    };
    let target = scenario.population.target();
    run_replications(scenario, |rep| {
        let (data, methods) = replication_seeds(scenario, rep);
        let drawn = strata
            .iter()
            .enumerate()
            .map(|(s, st)| {
                let r = apparent_rate(st.prevalence, scenario.p0, scenario.q0);
                let d = BinomialSampler::new(st.tested, r)?.sample(&mut data.derive_path(&[0, s as u64]).rng());
                Ok(Stratum {
                    weight: st.weight,
                    tested: st.tested,
                    positives: d,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (m, n) = draw_panels(scenario, data)?;
        let panels = Panels::new(m, scenario.positive_panel, n, scenario.negative_panel)?;
        let design = WeightedDesign::Stratum(StratumDesign::new(drawn, panels)?);
        Ok(weighted_outcomes(scenario, &design, target, methods))
    })
}

/// Individually weighted sampling with `d_i ~ Ber(r_i)`.
pub fn run_individual_cell(scenario: &SimScenario) -> Result<SimResult> {
    let (weights, intercept, slope) = match &scenario.population {
        Population::Individual {
            weights,
            intercept,
            slope,
        } => (weights, *intercept, *slope),
        _ => return Err(Error::Usage("run_individual_cell needs an individual population".into())),
    };
    let target = scenario.population.target();
    let rates: Vec<f64> = weights
        .iter()
        .map(|&w| apparent_rate(expit(intercept + slope * w), scenario.p0, scenario.q0))
        .collect();
    run_replications(scenario, |rep| {
        use rand::Rng;
        let (data, methods) = replication_seeds(scenario, rep);
        let mut rng = data.derive(0).rng();
        let subjects = weights
            .iter()
            .zip(&rates)
            .map(|(&w, &r)| Subject {
                weight: w,
                positive: rng.random::<f64>() < r,
            })
            .collect();
        let (m, n) = draw_panels(scenario, data)?;
        let panels = Panels::new(m, scenario.positive_panel, n, scenario.negative_panel)?;
        let design = WeightedDesign::Individual(IndividualDesign::new(subjects, panels)?);
        Ok(weighted_outcomes(scenario, &design, target, methods))
    })
}

/// Run a cell of any population kind.
pub fn run_cell(scenario: &SimScenario) -> Result<SimResult> {
    match scenario.population {
        Population::Unweighted { .. } => run_unweighted_cell(scenario),
        Population::Stratified { .. } => run_stratified_cell(scenario),
        Population::Individual { .. } => run_individual_cell(scenario),
    }
}

/// Log-normal weights with median 0.48 and quartiles near 0.22 and 1.11,
/// rescaled to sum to `count`.
pub fn generate_weights(count: usize, seed: SeedSpec) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::domain("count must be at least 1"));
    }
    let q75 = gaussian_quantile(0.75)?;
    let sigma = (1.11f64.ln() - 0.22f64.ln()) / (2.0 * q75);
    let dist = LogNormal::new(0.48f64.ln(), sigma).map_err(|e| Error::domain(e.to_string()))?;
    let mut rng = seed.rng();
    let mut w: Vec<f64> = (0..count).map(|_| dist.sample(&mut rng)).collect();
    let scale = count as f64 / w.iter().sum::<f64>();
    w.iter_mut().for_each(|x| *x *= scale);
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableFormat {
    Csv,
    Json,
}

impl std::str::FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TableFormat::Csv),
            "json" => Ok(TableFormat::Json),
            other => Err(Error::Usage(format!("unknown table format `{other}` (expected csv or json)"))),
        }
    }
}

/// One row of an emitted table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: Method,
    pub pi0: f64,
    pub q0: f64,
    pub coverage: f64,
    pub length: f64,
    pub coverage_se: f64,
}

pub const TABLE_COLUMNS: [&str; 6] = ["method", "pi0", "q0", "coverage", "length", "coverage_se"];

pub fn table_rows(results: &[SimResult]) -> Vec<TableRow> {
    results
        .iter()
        .flat_map(|r| {
            r.methods.iter().map(move |m| TableRow {
                method: m.method,
                pi0: r.pi0,
                q0: r.q0,
                coverage: m.coverage,
                length: m.length,
                coverage_se: m.coverage_se,
            })
        })
        .collect()
}

pub fn rows_to_csv(rows: &[TableRow]) -> String {
    let mut out = TABLE_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.method, r.pi0, r.q0, r.coverage, r.length, r.coverage_se
        ));
    }
    out
}

/// Render results with a stable column order.
pub fn emit_table(results: &[SimResult], format: TableFormat) -> Result<String> {
    let rows = table_rows(results);
    match format {
        TableFormat::Csv => Ok(rows_to_csv(&rows)),
        TableFormat::Json => {
            let mut s = serde_json::to_string_pretty(&rows).map_err(|e| Error::domain(e.to_string()))?;
            s.push('\n');
            Ok(s)
        }
    }
}

/// Parse a JSON table produced by [`emit_table`].
pub fn parse_table_json(text: &str) -> Result<Vec<TableRow>> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        location: format!("line {}, column {}", e.line(), e.column()),
        message: e.to_string(),
    })
}

/// Specificities of the preset simulation grids.
pub const Q0_GRID: [f64; 12] = [0.970, 0.980, 0.984, 0.986, 0.988, 0.990, 0.992, 0.994, 0.996, 0.998, 0.999, 1.0];

/// Stratum shares, prevalences and sizes of the stratified design.
pub fn stratified_truth() -> Vec<StratumTruth> {
    let w = [0.05, 0.07, 0.08, 0.15, 0.25, 0.40];
    let pi = [0.0003, 0.0070, 0.0007, 0.0007, 0.0077, 0.0233];
    let big = [500, 700, 300, 800, 230, 800];
    (0..6)
        .map(|s| StratumTruth {
            weight: w[s],
            prevalence: pi[s],
            tested: big[s],
        })
        .collect()
}

/// Named simulation grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Unweighted, `N = 371`, six methods.
    Table3,
    /// Unweighted, `N = 3324`, four methods.
    Table4,
    /// Stratified design.
    Table6,
    /// Individually weighted design with generated weights.
    Table7,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table3" => Ok(Preset::Table3),
            "table4" => Ok(Preset::Table4),
            "table6" => Ok(Preset::Table6),
            "table7" => Ok(Preset::Table7),
            other => Err(Error::Usage(format!(
                "unknown preset `{other}` (expected table3, table4, table6 or table7)"
            ))),
        }
    }
}

/// Weight-model slope for the individual design.
pub const INDIVIDUAL_SLOPE: f64 = 0.17;

impl Preset {
    /// One scenario per specificity in [`Q0_GRID`].
    pub fn scenarios(self, replications: usize, seed: u64) -> Result<Vec<SimScenario>> {
        let (population, big_n, methods) = match self {
            Preset::Table3 => (
                Population::Unweighted {
                    pi0: 0.012,
                    tested: 3330,
                },
                371,
                vec![
                    Method::Exact,
                    Method::Delta,
                    Method::Bootstrap,
                    Method::HybridP,
                    Method::HybridR,
                    Method::HybridPr,
                ],
            ),
            Preset::Table4 => (
                Population::Unweighted {
                    pi0: 0.012,
                    tested: 3330,
                },
                3324,
                vec![Method::Bootstrap, Method::Delta, Method::Exact, Method::HybridP],
            ),
            Preset::Table6 => (
                Population::Stratified {
                    strata: stratified_truth(),
                },
                371,
                vec![Method::Bootstrap, Method::Delta, Method::HybridLambda, Method::HybridLambdaP],
            ),
            Preset::Table7 => {
                let weights = generate_weights(3330, SeedSpec::new(seed, 0).derive(0x7765_6967))?;
                let intercept = solve_intercept(&weights, INDIVIDUAL_SLOPE, 0.012)?;
                (
                    Population::Individual {
                        weights,
                        intercept,
                        slope: INDIVIDUAL_SLOPE,
                    },
                    371,
                    vec![Method::Bootstrap, Method::Delta, Method::HybridLambda, Method::HybridLambdaP],
                )
            }
        };
        Ok(Q0_GRID
            .iter()
            .enumerate()
            .map(|(i, &q0)| SimScenario {
                replications,
                seed: SeedSpec::new(seed, i as u64),
                ..SimScenario::new(population.clone(), 0.83, q0, 157, big_n, methods.clone())
            })
            .collect())
    }
}
