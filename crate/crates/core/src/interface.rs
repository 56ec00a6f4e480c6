//! Dataset files, estimation drivers and machine-readable result documents.
//!
//! JSON is the canonical dataset format. CSV is accepted for stratum and
//! subject tables, with the panel counts given as `# key=value` directive
//! lines above the header.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{hybrid_ci, pvalue_curve, ExactConfig, Fixed, PValueCurve};
use crate::point::{delta_ci, delta_logit_ci, IntervalEstimate, Method, StudyCounts};
use crate::resampling::{bootstrap_ci, BootstrapConfig};
use crate::stochastics::SeedSpec;
use crate::weighted::{
    weighted_ci, weighted_pvalue_curve, IndividualDesign, Panels, Stratum, StratumDesign, Subject, WeightedDesign,
    WeightedSummary,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_NAME: &str = "prevex";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Stream of the master seed used by the test-inversion methods.
pub const STREAM_INVERSION: u64 = 0;
/// Stream of the master seed used by the bootstrap.
pub const STREAM_BOOTSTRAP: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Unweighted,
    Stratum,
    Individual,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Unweighted => "unweighted",
            DatasetKind::Stratum => "stratum",
            DatasetKind::Individual => "individual",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "unweighted" => Ok(DatasetKind::Unweighted),
            "stratum" => Ok(DatasetKind::Stratum),
            "individual" => Ok(DatasetKind::Individual),
            other => Err(Error::validation("kind", format!("unknown dataset kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Unweighted(StudyCounts),
    Weighted(WeightedDesign),
}

/// A validated dataset with its schema version and optional label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDataset", into = "RawDataset")]
pub struct DatasetFile {
    pub schema_version: u32,
    pub label: Option<String>,
    pub data: Dataset,
}

impl DatasetFile {
    pub fn unweighted(counts: StudyCounts, label: Option<String>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            label,
            data: Dataset::Unweighted(counts),
        }
    }

    pub fn weighted(design: WeightedDesign, label: Option<String>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            label,
            data: Dataset::Weighted(design),
        }
    }

    pub fn kind(&self) -> DatasetKind {
        match &self.data {
            Dataset::Unweighted(_) => DatasetKind::Unweighted,
            Dataset::Weighted(WeightedDesign::Stratum(_)) => DatasetKind::Stratum,
            Dataset::Weighted(WeightedDesign::Individual(_)) => DatasetKind::Individual,
        }
    }
}

/// On-disk JSON layout: one flat object, fields present according to `kind`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    schema_version: u32,
    kind: DatasetKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    d: Option<u64>,
    #[serde(rename = "D", default, skip_serializing_if = "Option::is_none")]
    big_d: Option<u64>,
    m: u64,
    #[serde(rename = "M")]
    big_m: u64,
    n: u64,
    #[serde(rename = "N")]
    big_n: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    strata: Option<Vec<Stratum>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subjects: Option<Vec<RawSubject>>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSubject {
    w: f64,
    /// Test result as 0 or 1.
    d: u64,
}

fn require<T>(value: Option<T>, field: &str, kind: DatasetKind) -> Result<T> {
    value.ok_or_else(|| Error::validation(field, format!("`{field}` is required for kind {kind}")))
}

fn forbid<T>(value: &Option<T>, field: &str, kind: DatasetKind) -> Result<()> {
    match value {
        Some(_) => Err(Error::validation(field, format!("`{field}` is not allowed for kind {kind}"))),
        None => Ok(()),
    }
}

fn subjects_from_raw(raw: &[RawSubject]) -> Result<Vec<Subject>> {
    raw.iter()
        .enumerate()
        .map(|(i, s)| match s.d {
            0 | 1 => Ok(Subject {
                weight: s.w,
                positive: s.d == 1,
            }),
            other => Err(Error::validation(
                format!("subjects[{i}].d"),
                format!("d must be 0 or 1, got {other}"),
            )),
        })
        .collect()
}

impl TryFrom<RawDataset> for DatasetFile {
    type Error = Error;

    fn try_from(raw: RawDataset) -> Result<Self> {
        if raw.schema_version != SCHEMA_VERSION {
            return Err(Error::validation(
                "schema_version",
                format!("unsupported schema version {} (expected {SCHEMA_VERSION})", raw.schema_version),
            ));
        }
        let kind = raw.kind;
        let panels = Panels {
            true_positives: raw.m,
            positive_panel: raw.big_m,
            true_negatives: raw.n,
            negative_panel: raw.big_n,
        };
        let data = match kind {
            DatasetKind::Unweighted => {
                forbid(&raw.strata, "strata", kind)?;
                forbid(&raw.subjects, "subjects", kind)?;
                let counts = StudyCounts {
                    positives: require(raw.d, "d", kind)?,
                    tested: require(raw.big_d, "D", kind)?,
                    true_positives: raw.m,
                    positive_panel: raw.big_m,
                    true_negatives: raw.n,
                    negative_panel: raw.big_n,
                };
                counts.validate()?;
                Dataset::Unweighted(counts)
            }
            DatasetKind::Stratum => {
                forbid(&raw.d, "d", kind)?;
                forbid(&raw.big_d, "D", kind)?;
                forbid(&raw.subjects, "subjects", kind)?;
                let design = StratumDesign {
                    strata: require(raw.strata, "strata", kind)?,
                    panels,
                };
                design.validate()?;
                Dataset::Weighted(WeightedDesign::Stratum(design))
            }
            DatasetKind::Individual => {
                forbid(&raw.d, "d", kind)?;
                forbid(&raw.big_d, "D", kind)?;
                forbid(&raw.strata, "strata", kind)?;
                let subjects = subjects_from_raw(&require(raw.subjects, "subjects", kind)?)?;
                let design = IndividualDesign { subjects, panels };
                design.validate()?;
                Dataset::Weighted(WeightedDesign::Individual(design))
            }
        };
        Ok(DatasetFile {
            schema_version: raw.schema_version,
            label: raw.label,
            data,
        })
    }
}

impl From<DatasetFile> for RawDataset {
    fn from(file: DatasetFile) -> Self {
        let kind = file.kind();
        let mut raw = RawDataset {
            schema_version: file.schema_version,
            kind,
            label: file.label,
            d: None,
            big_d: None,
            m: 0,
            big_m: 0,
            n: 0,
            big_n: 0,
            strata: None,
            subjects: None,
        };
        let panels = match file.data {
            Dataset::Unweighted(c) => {
                raw.d = Some(c.positives);
                raw.big_d = Some(c.tested);
                Panels {
                    true_positives: c.true_positives,
                    positive_panel: c.positive_panel,
                    true_negatives: c.true_negatives,
                    negative_panel: c.negative_panel,
                }
            }
            Dataset::Weighted(WeightedDesign::Stratum(s)) => {
                raw.strata = Some(s.strata);
                s.panels
            }
            Dataset::Weighted(WeightedDesign::Individual(ind)) => {
                raw.subjects = Some(
                    ind.subjects
                        .iter()
                        .map(|s| RawSubject {
                            w: s.weight,
                            d: u64::from(s.positive),
                        })
                        .collect(),
                );
                ind.panels
            }
        };
        raw.m = panels.true_positives;
        raw.big_m = panels.positive_panel;
        raw.n = panels.true_negatives;
        raw.big_n = panels.negative_panel;
        raw
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    Json,
    Csv,
}

impl DataFormat {
    /// Format implied by a file name: `.csv` is CSV, anything else JSON.
    pub fn from_path(path: &str) -> Self {
        if path.to_ascii_lowercase().ends_with(".csv") {
            DataFormat::Csv
        } else {
            DataFormat::Json
        }
    }
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "json" => Ok(DataFormat::Json),
            "csv" => Ok(DataFormat::Csv),
            other => Err(Error::Usage(format!("unknown format `{other}` (expected json or csv)"))),
        }
    }
}

/// Parse and validate a dataset. Errors carry the line of the offending
/// input where it can be determined.
pub fn parse_dataset(text: &str, format: DataFormat) -> Result<DatasetFile> {
    match format {
        DataFormat::Json => parse_json(text),
        DataFormat::Csv => parse_csv(text),
    }
}

/// Serialize a dataset. CSV is only available for weighted datasets.
pub fn emit_dataset(file: &DatasetFile, format: DataFormat) -> Result<String> {
    match format {
        DataFormat::Json => {
            let mut s = serde_json::to_string_pretty(file)
                .map_err(|e| Error::InferenceFailed(format!("cannot serialize dataset: {e}")))?;
            s.push('\n');
            Ok(s)
        }
        DataFormat::Csv => emit_csv(file),
    }
}

fn with_line(err: Error, line: Option<usize>) -> Error {
    match (err, line) {
        (Error::Validation { field, message }, Some(line)) => Error::Validation {
            field,
            message: format!("{message} (line {line})"),
        },
        (err, _) => err,
    }
}

fn parse_json(text: &str) -> Result<DatasetFile> {
    let raw: RawDataset = serde_json::from_str(text).map_err(|e| Error::Parse {
        location: format!("line {} column {}", e.line(), e.column()),
        message: json_message(&e),
    })?;
    DatasetFile::try_from(raw).map_err(|err| {
        let line = match &err {
            Error::Validation { field, .. } => json_field_line(text, &field_path(field)),
            _ => None,
        };
        with_line(err, line)
    })
}

/// serde_json appends " at line L column C" to its messages; the location is
/// reported separately.
fn json_message(e: &serde_json::Error) -> String {
    let full = e.to_string();
    match full.rfind(" at line ") {
        Some(i) => full[..i].to_string(),
        None => full,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Key(String),
    Index(usize),
}

/// Split a field name such as `strata[2].d` into path segments.
fn field_path(field: &str) -> Vec<Segment> {
    let mut out = Vec::new();
    for part in field.split('.') {
        let mut rest = part;
        if let Some(i) = rest.find('[') {
            if i > 0 {
                out.push(Segment::Key(rest[..i].to_string()));
            }
            rest = &rest[i..];
            while let Some(stripped) = rest.strip_prefix('[') {
                let Some(end) = stripped.find(']') else { break };
                if let Ok(idx) = stripped[..end].parse() {
                    out.push(Segment::Index(idx));
                }
                rest = &stripped[end + 1..];
            }
        } else if !rest.is_empty() {
            out.push(Segment::Key(rest.to_string()));
        }
    }
    out
}

enum Frame {
    Object { key: Option<String>, expect_key: bool },
    Array { index: usize },
}

/// Line of the value at `path` in well-formed JSON `text`, falling back to
/// the longest prefix of `path` that is present.
fn json_field_line(text: &str, path: &[Segment]) -> Option<usize> {
    (1..=path.len()).rev().find_map(|n| json_value_line(text, &path[..n]))
}

fn json_value_line(text: &str, target: &[Segment]) -> Option<usize> {
    let mut stack: Vec<Frame> = Vec::new();
    let mut line = 1;
    let mut at_value = true;
    let mut chars = text.chars().peekable();
    let current = |stack: &[Frame]| -> Vec<Segment> {
        stack
            .iter()
            .map(|f| match f {
                Frame::Object { key, .. } => Segment::Key(key.clone().unwrap_or_default()),
                Frame::Array { index } => Segment::Index(*index),
            })
            .collect()
    };
    while let Some(c) = chars.next() {
        if c == '\n' {
            line += 1;
            continue;
        }
        if c.is_whitespace() {
            continue;
        }
        if at_value && c != ']' && c != '}' {
            if current(&stack) == target {
                return Some(line);
            }
            at_value = false;
        }
        match c {
            '{' => stack.push(Frame::Object {
                key: None,
                expect_key: true,
            }),
            '[' => {
                stack.push(Frame::Array { index: 0 });
                at_value = true;
            }
            '}' | ']' => {
                stack.pop();
                at_value = false;
            }
            ':' => at_value = true,
            ',' => match stack.last_mut() {
                Some(Frame::Object { expect_key, .. }) => *expect_key = true,
                Some(Frame::Array { index }) => {
                    *index += 1;
                    at_value = true;
                }
                None => {}
            },
            '"' => {
                let mut s = String::new();
                while let Some(ch) = chars.next() {
                    match ch {
                        '\\' => {
                            if let Some(esc) = chars.next() {
                                s.push(esc);
                            }
                        }
                        '"' => break,
                        _ => s.push(ch),
                    }
                }
                if let Some(Frame::Object { key, expect_key }) = stack.last_mut() {
                    if *expect_key {
                        *key = Some(s);
                        *expect_key = false;
                    }
                }
            }
            _ => {}
        }
    }
    None
}

/// Directive lines (`# key=value`) and the data table of a CSV dataset.
struct CsvDirectives {
    values: Vec<(String, String, usize)>,
}

impl CsvDirectives {
    fn get(&self, key: &str) -> Option<(&str, usize)> {
        self.values
            .iter()
            .rev()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, line)| (v.as_str(), *line))
    }

    fn count(&self, key: &str) -> Result<Option<u64>> {
        match self.get(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|_| Error::Parse {
                location: format!("line {line}"),
                message: format!("`{key}` must be a non-negative integer, got `{v}`"),
            }),
        }
    }
}

fn read_directives(text: &str) -> Result<CsvDirectives> {
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let Some(body) = line.trim_start().strip_prefix('#') else { continue };
        let Some((k, v)) = body.split_once('=') else { continue };
        let key = k.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(Error::Parse {
                location: format!("line {}", i + 1),
                message: format!("malformed directive `{}`", body.trim()),
            });
        }
        values.push((key.to_string(), v.trim().to_string(), i + 1));
    }
    Ok(CsvDirectives { values })
}

fn csv_error(e: csv::Error) -> Error {
    let location = e
        .position()
        .map_or_else(|| "unknown position".to_string(), |p| format!("line {}", p.line()));
    Error::Parse {
        location,
        message: e.to_string(),
    }
}

fn read_table<T: serde::de::DeserializeOwned>(text: &str, columns: &[&str]) -> Result<(Vec<T>, Vec<usize>, usize)> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(csv_error)?.clone();
    let header_line = reader.position().line() as usize;
    for col in columns {
        if !headers.iter().any(|h| h == *col) {
            return Err(Error::Parse {
                location: format!("line {}", header_line.max(1)),
                message: format!("missing column `{col}` (expected columns {})", columns.join(",")),
            });
        }
    }
    if let Some(extra) = headers.iter().find(|h| !columns.contains(h)) {
        return Err(Error::Parse {
            location: format!("line {}", header_line.max(1)),
            message: format!("unexpected column `{extra}` (expected columns {})", columns.join(",")),
        });
    }
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let row = record.deserialize(Some(&headers)).map_err(|e| {
            let message = match e.kind() {
                csv::ErrorKind::Deserialize { err, .. } => match err.field() {
                    Some(f) => format!("column `{}`: {}", headers.get(f as usize).unwrap_or("?"), err.kind()),
                    None => err.kind().to_string(),
                },
                _ => e.to_string(),
            };
            Error::Parse {
                location: format!("line {line}"),
                message,
            }
        })?;
        rows.push(row);
        lines.push(line);
    }
    Ok((rows, lines, header_line))
}

fn parse_csv(text: &str) -> Result<DatasetFile> {
    let directives = read_directives(text)?;
    let kind: DatasetKind = match directives.get("kind") {
        Some((v, line)) => v.parse().map_err(|e| with_line(e, Some(line)))?,
        None => {
            return Err(Error::validation(
                "kind",
                "CSV datasets need a `# kind=stratum` or `# kind=individual` directive",
            ))
        }
    };
    let schema_version = match directives.get("schema_version") {
        None => SCHEMA_VERSION,
        Some((v, line)) => v.parse().map_err(|_| Error::Parse {
            location: format!("line {line}"),
            message: format!("`schema_version` must be an integer, got `{v}`"),
        })?,
    };
    let panel = |key: &str| -> Result<u64> {
        directives
            .count(key)?
            .ok_or_else(|| Error::validation(key, format!("missing `# {key}=...` directive")))
    };
    let mut raw = RawDataset {
        schema_version,
        kind,
        label: directives.get("label").map(|(v, _)| v.to_string()),
        d: None,
        big_d: None,
        m: panel("m")?,
        big_m: panel("M")?,
        n: panel("n")?,
        big_n: panel("N")?,
        strata: None,
        subjects: None,
    };
    let (record_lines, header_line) = match kind {
        DatasetKind::Unweighted => {
            return Err(Error::Usage(
                "CSV is accepted for stratum and individual tables only; use JSON for unweighted counts".into(),
            ))
        }
        DatasetKind::Stratum => {
            let (rows, lines, header) = read_table::<Stratum>(text, &["w", "D", "d"])?;
            raw.strata = Some(rows);
            (lines, header)
        }
        DatasetKind::Individual => {
            let (rows, lines, header) = read_table::<RawSubject>(text, &["w", "d"])?;
            raw.subjects = Some(rows);
            (lines, header)
        }
    };
    DatasetFile::try_from(raw).map_err(|err| {
        let line = match &err {
            Error::Validation { field, .. } => match field_path(field).as_slice() {
                [Segment::Key(_), Segment::Index(i), ..] => record_lines.get(*i).copied(),
                [Segment::Key(k)] => directives.get(k).map(|(_, l)| l),
                [Segment::Key(_), Segment::Key(_)] => Some(header_line),
                _ => None,
            },
            _ => None,
        };
        with_line(err, line)
    })
}

fn emit_csv(file: &DatasetFile) -> Result<String> {
    let Dataset::Weighted(design) = &file.data else {
        return Err(Error::Usage("unweighted datasets are written as JSON only".into()));
    };
    let panels = design.panels();
    let mut out = format!("# schema_version={}\n# kind={}\n", file.schema_version, file.kind());
    if let Some(label) = &file.label {
        out.push_str(&format!("# label={label}\n"));
    }
    out.push_str(&format!(
        "# m={}\n# M={}\n# n={}\n# N={}\n",
        panels.true_positives, panels.positive_panel, panels.true_negatives, panels.negative_panel
    ));
    let mut writer = csv::Writer::from_writer(Vec::new());
    let result = match design {
        WeightedDesign::Stratum(s) => s.strata.iter().try_for_each(|st| writer.serialize(st)),
        WeightedDesign::Individual(ind) => ind.subjects.iter().try_for_each(|s| {
            writer.serialize(RawSubject {
                w: s.weight,
                d: u64::from(s.positive),
            })
        }),
    };
    result.map_err(|e| Error::InferenceFailed(format!("cannot write CSV: {e}")))?;
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::InferenceFailed(format!("cannot write CSV: {e}")))?;
    out.push_str(&String::from_utf8_lossy(&bytes));
    Ok(out)
}

/// Settings of an estimation run; together with the dataset they determine
/// every numeric output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateConfig {
    pub methods: Vec<Method>,
    pub level: f64,
    /// Monte Carlo replicates for the bootstrap and per net point.
    pub replicates: usize,
    pub net_points_per_axis: usize,
    pub nuisance_level: f64,
    pub pi_grid_step: f64,
    pub pi_refine_tol: f64,
    pub seed: u64,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        let exact = ExactConfig::default();
        Self {
            methods: vec![Method::Delta, Method::DeltaLogit, Method::Bootstrap, Method::Exact],
            level: 0.95,
            replicates: exact.replicates,
            net_points_per_axis: exact.net_points_per_axis,
            nuisance_level: exact.nuisance_level,
            pi_grid_step: exact.pi_grid_step,
            pi_refine_tol: exact.pi_refine_tol,
            seed: 0,
        }
    }
}

impl EstimateConfig {
    pub fn exact_config(&self) -> ExactConfig {
        ExactConfig {
            replicates: self.replicates,
            net_points_per_axis: self.net_points_per_axis,
            nuisance_level: self.nuisance_level,
            alpha: 1.0 - self.level,
            pi_grid_step: self.pi_grid_step,
            pi_refine_tol: self.pi_refine_tol,
            seed: SeedSpec::new(self.seed, STREAM_INVERSION),
            independent_streams: false,
        }
    }

    pub fn bootstrap_config(&self) -> BootstrapConfig {
        BootstrapConfig::new(self.replicates, self.level, SeedSpec::new(self.seed, STREAM_BOOTSTRAP))
    }

    /// Configuration handed to the p-value curve of `method`: bootstrap
    /// curves use the bootstrap stream so they match the bootstrap interval.
    fn curve_config(&self, method: Method) -> ExactConfig {
        let mut cfg = self.exact_config();
        if method == Method::Bootstrap {
            cfg.seed = SeedSpec::new(self.seed, STREAM_BOOTSTRAP);
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
}

impl Default for ToolInfo {
    fn default() -> Self {
        Self {
            name: TOOL_NAME.to_string(),
            version: TOOL_VERSION.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodFailure {
    pub method: Method,
    pub error: String,
}

/// Run details that vary between otherwise identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub wall_time_seconds: f64,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDocument {
    pub tool: ToolInfo,
    pub dataset: DatasetFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weighted_summary: Option<WeightedSummary>,
    pub config: EstimateConfig,
    pub intervals: Vec<IntervalEstimate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<MethodFailure>,
    /// Where a p-value curve for this run was written, if anywhere.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pcurve: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<RunMetadata>,
}

impl ResultDocument {
    pub fn interval(&self, method: Method) -> Option<&IntervalEstimate> {
        self.intervals.iter().find(|i| i.method == method)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InferenceFailed(format!("cannot serialize result: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    /// One row per interval: `method,point,lower,upper,level`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,point,lower,upper,level\n");
        for i in &self.intervals {
            out.push_str(&format!("{},{},{},{},{}\n", i.method, i.point, i.lower, i.upper, i.level));
        }
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            location: format!("line {} column {}", e.line(), e.column()),
            message: json_message(&e),
        })
    }
}

/// Interval for any method applicable to unweighted counts.
pub fn unweighted_ci(
    counts: &StudyCounts,
    method: Method,
    level: f64,
    exact: &ExactConfig,
    boot: &BootstrapConfig,
) -> Result<IntervalEstimate> {
    match method {
        Method::Delta => delta_ci(counts, level),
        Method::DeltaLogit => delta_logit_ci(counts, level),
        Method::Bootstrap => bootstrap_ci(counts, boot),
        Method::HybridLambda | Method::HybridLambdaP => {
            Err(Error::Usage(format!("`{method}` needs a weighted dataset")))
        }
        other => hybrid_ci(counts, Fixed::for_method(other)?, exact),
    }
}

fn check_methods(methods: &[Method], kind: DatasetKind) -> Result<()> {
    if methods.is_empty() {
        return Err(Error::Usage("no methods requested".into()));
    }
    for &m in methods {
        let weighted_only = matches!(m, Method::HybridLambda | Method::HybridLambdaP);
        let unweighted_only = matches!(m, Method::Exact | Method::HybridP | Method::HybridR | Method::HybridPr);
        if (kind == DatasetKind::Unweighted && weighted_only) || (kind != DatasetKind::Unweighted && unweighted_only) {
            return Err(Error::Usage(format!("method `{m}` does not apply to {kind} datasets")));
        }
    }
    Ok(())
}

/// Run every requested method. Methods whose inference fails are listed in
/// `failures`; usage and validation problems abort the run.
pub fn estimate(file: &DatasetFile, cfg: &EstimateConfig) -> Result<ResultDocument> {
    check_methods(&cfg.methods, file.kind())?;
    let exact = cfg.exact_config();
    exact.validate()?;
    let boot = cfg.bootstrap_config();
    let mut intervals = Vec::new();
    let mut failures = Vec::new();
    let weighted_summary = match &file.data {
        Dataset::Unweighted(_) => None,
        Dataset::Weighted(design) => design.summary().ok(),
    };
    for &method in &cfg.methods {
        let ci = match &file.data {
            Dataset::Unweighted(counts) => unweighted_ci(counts, method, cfg.level, &exact, &boot),
            Dataset::Weighted(design) => weighted_ci(design, method, cfg.level, &exact, &boot),
        };
        match ci {
            Ok(ci) => intervals.push(ci),
            Err(e @ (Error::Usage(_) | Error::Validation { .. })) => return Err(e),
            Err(e) => failures.push(MethodFailure {
                method,
                error: e.to_string(),
            }),
        }
    }
    Ok(ResultDocument {
        tool: ToolInfo::default(),
        dataset: file.clone(),
        weighted_summary,
        config: cfg.clone(),
        intervals,
        failures,
        pcurve: None,
        metadata: None,
    })
}

/// Prevalence range and resolution of a p-value curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveGrid {
    pub pi_min: f64,
    pub pi_max: f64,
    pub pi_step: f64,
}

impl CurveGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.pi_min.is_finite() && self.pi_max.is_finite() && self.pi_step.is_finite()) {
            return Err(Error::Usage("curve bounds must be finite".into()));
        }
        if self.pi_min >= self.pi_max {
            return Err(Error::Usage(format!(
                "pi-min ({}) must be below pi-max ({})",
                self.pi_min, self.pi_max
            )));
        }
        if self.pi_min < 0.0 || self.pi_max > 1.0 {
            return Err(Error::Usage("curve bounds must lie in [0, 1]".into()));
        }
        if self.pi_step <= 0.0 {
            return Err(Error::Usage("pi-step must be positive".into()));
        }
        Ok(())
    }
}

/// p-value curves for each requested method on a shared grid.
pub fn pvalue_curves(file: &DatasetFile, cfg: &EstimateConfig, grid: &CurveGrid) -> Result<Vec<PValueCurve>> {
    grid.validate()?;
    check_methods(&cfg.methods, file.kind())?;
    cfg.exact_config().validate()?;
    let range = (grid.pi_min, grid.pi_max);
    cfg.methods
        .iter()
        .map(|&method| {
            let c = cfg.curve_config(method);
            match &file.data {
                Dataset::Unweighted(counts) => pvalue_curve(counts, method, range, grid.pi_step, &c),
                Dataset::Weighted(design) => weighted_pvalue_curve(design, method, range, grid.pi_step, &c),
            }
        })
        .collect()
}

/// Long-format CSV with columns `method,pi,pvalue`.
pub fn curves_to_csv(curves: &[PValueCurve]) -> String {
    let mut out = String::from("method,pi,pvalue\n");
    for c in curves {
        for (pi, p) in c.pis.iter().zip(&c.pvalues) {
            out.push_str(&format!("{},{},{}\n", c.method, pi, p));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SANTA_CLARA: &str = r#"{
  "schema_version": 1,
  "kind": "unweighted",
  "label": "Santa Clara",
  "d": 50,
  "D": 3330,
  "m": 130,
  "M": 157,
  "n": 368,
  "N": 371
}"#;

    const STRATA_CSV: &str = "# kind=stratum
# m=130
# M=157
# n=368
# N=371
w,D,d
0.5,100,2
0.5,200,3
";

    fn field_and_message(e: Error) -> (String, String) {
        match e {
            Error::Validation { field, message } => (field, message),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn parses_unweighted_json() {
        let f = parse_dataset(SANTA_CLARA, DataFormat::Json).unwrap();
        assert_eq!(f.kind(), DatasetKind::Unweighted);
        assert_eq!(f.label.as_deref(), Some("Santa Clara"));
        assert_eq!(f.data, Dataset::Unweighted(StudyCounts::new(50, 3330, 130, 157, 368, 371).unwrap()));
    }

    #[test]
    fn count_exceeding_total_names_field_and_line() {
        let text = SANTA_CLARA.replace("\"d\": 50", "\"d\": 60").replace("3330", "50");
        let (field, message) = field_and_message(parse_dataset(&text, DataFormat::Json).unwrap_err());
        assert_eq!(field, "d");
        assert!(message.contains("d exceeds D"), "{message}");
        assert!(message.contains("line 5"), "{message}");
    }

    #[test]
    fn syntax_error_has_location() {
        let text = SANTA_CLARA.replace("\"D\": 3330,", "\"D\": 3330");
        match parse_dataset(&text, DataFormat::Json).unwrap_err() {
            Error::Parse { location, .. } => assert!(location.starts_with("line 7"), "{location}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn type_error_has_location() {
        let text = SANTA_CLARA.replace("\"m\": 130", "\"m\": -3");
        match parse_dataset(&text, DataFormat::Json).unwrap_err() {
            Error::Parse { location, .. } => assert!(location.starts_with("line 7"), "{location}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_and_missing_fields() {
        let text = SANTA_CLARA.replace("\"label\"", "\"title\"");
        assert!(matches!(parse_dataset(&text, DataFormat::Json), Err(Error::Parse { .. })));
        let text = SANTA_CLARA.replace("\"d\": 50,", "");
        let (field, _) = field_and_message(parse_dataset(&text, DataFormat::Json).unwrap_err());
        assert_eq!(field, "d");
        let text = SANTA_CLARA.replace("\"schema_version\": 1", "\"schema_version\": 2");
        let (field, message) = field_and_message(parse_dataset(&text, DataFormat::Json).unwrap_err());
        assert_eq!(field, "schema_version");
        assert!(message.contains("line 2"), "{message}");
    }

    #[test]
    fn stratum_json_error_points_at_stratum_line() {
        let text = r#"{"schema_version": 1, "kind": "stratum", "m": 1, "M": 2, "n": 1, "N": 2,
 "strata": [
  {"w": 0.5, "D": 10, "d": 1},
  {"w": 0.5, "D": 10, "d": 11}
 ]}"#;
        let (field, message) = field_and_message(parse_dataset(text, DataFormat::Json).unwrap_err());
        assert_eq!(field, "strata[1].d");
        assert!(message.contains("line 4"), "{message}");
    }

    #[test]
    fn subject_outcome_must_be_binary() {
        let text = r#"{"schema_version": 1, "kind": "individual", "m": 1, "M": 2, "n": 1, "N": 2,
 "subjects": [
  {"w": 1.0, "d": 1},
  {"w": 1.0, "d": 2}
 ]}"#;
        let (field, message) = field_and_message(parse_dataset(text, DataFormat::Json).unwrap_err());
        assert_eq!(field, "subjects[1].d");
        assert!(message.contains("line 4"), "{message}");
    }

    #[test]
    fn stratum_csv_parses() {
        let f = parse_dataset(STRATA_CSV, DataFormat::Csv).unwrap();
        match f.data {
            Dataset::Weighted(WeightedDesign::Stratum(s)) => {
                assert_eq!(s.strata.len(), 2);
                assert_eq!(s.strata[1].positives, 3);
                assert_eq!(s.panels.negative_panel, 371);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stratum_csv_errors_carry_lines() {
        let bad = STRATA_CSV.replace("0.5,200,3", "0.5,200,300");
        let (field, message) = field_and_message(parse_dataset(&bad, DataFormat::Csv).unwrap_err());
        assert_eq!(field, "strata[1].d");
        assert!(message.contains("line 8"), "{message}");

        let bad = STRATA_CSV.replace("0.5,200,3", "0.5,abc,3");
        match parse_dataset(&bad, DataFormat::Csv).unwrap_err() {
            Error::Parse { location, .. } => assert_eq!(location, "line 8"),
            other => panic!("{other:?}"),
        }

        let bad = STRATA_CSV.replace("# n=368", "# n=400");
        let (field, message) = field_and_message(parse_dataset(&bad, DataFormat::Csv).unwrap_err());
        assert_eq!(field, "n");
        assert!(message.contains("line 4"), "{message}");

        let bad = STRATA_CSV.replace("# M=157\n", "");
        let (field, _) = field_and_message(parse_dataset(&bad, DataFormat::Csv).unwrap_err());
        assert_eq!(field, "M");

        let bad = STRATA_CSV.replace("w,D,d", "w,D,x");
        assert!(matches!(parse_dataset(&bad, DataFormat::Csv), Err(Error::Parse { .. })));
    }

    #[test]
    fn round_trips() {
        for (text, fmt) in [(SANTA_CLARA, DataFormat::Json), (STRATA_CSV, DataFormat::Csv)] {
            let f = parse_dataset(text, fmt).unwrap();
            let json = emit_dataset(&f, DataFormat::Json).unwrap();
            assert_eq!(parse_dataset(&json, DataFormat::Json).unwrap(), f);
            if fmt == DataFormat::Csv {
                let csv = emit_dataset(&f, DataFormat::Csv).unwrap();
                assert_eq!(parse_dataset(&csv, DataFormat::Csv).unwrap(), f);
            }
        }
        let f = parse_dataset(SANTA_CLARA, DataFormat::Json).unwrap();
        assert!(matches!(emit_dataset(&f, DataFormat::Csv), Err(Error::Usage(_))));
    }

    #[test]
    fn field_paths() {
        assert_eq!(
            field_path("strata[2].d"),
            vec![Segment::Key("strata".into()), Segment::Index(2), Segment::Key("d".into())]
        );
        assert_eq!(field_path("M"), vec![Segment::Key("M".into())]);
    }

    #[test]
    fn estimate_runs_and_reproduces() {
        let f = parse_dataset(SANTA_CLARA, DataFormat::Json).unwrap();
        let cfg = EstimateConfig {
            methods: vec![Method::Delta, Method::DeltaLogit, Method::Bootstrap],
            replicates: 500,
            seed: 3,
            ..EstimateConfig::default()
        };
        let doc = estimate(&f, &cfg).unwrap();
        assert_eq!(doc.intervals.len(), 3);
        let back = ResultDocument::from_json(&doc.to_json().unwrap()).unwrap();
        assert_eq!(back, doc);
        let again = estimate(&back.dataset, &back.config).unwrap();
        assert_eq!(again.to_json().unwrap(), doc.to_json().unwrap());
        assert!(doc.to_csv().starts_with("method,point,lower,upper,level\ndelta,"));
    }

    #[test]
    fn estimate_rejects_mismatched_methods() {
        let f = parse_dataset(SANTA_CLARA, DataFormat::Json).unwrap();
        let cfg = EstimateConfig {
            methods: vec![Method::HybridLambda],
            ..EstimateConfig::default()
        };
        assert!(matches!(estimate(&f, &cfg), Err(Error::Usage(_))));
        let w = parse_dataset(STRATA_CSV, DataFormat::Csv).unwrap();
        let cfg = EstimateConfig {
            methods: vec![Method::Exact],
            ..EstimateConfig::default()
        };
        assert!(matches!(estimate(&w, &cfg), Err(Error::Usage(_))));
    }

    #[test]
    fn inference_failures_are_recorded() {
        let f = DatasetFile::unweighted(StudyCounts::new(10, 100, 5, 10, 50, 100).unwrap(), None);
        let cfg = EstimateConfig {
            methods: vec![Method::Delta, Method::DeltaLogit],
            ..EstimateConfig::default()
        };
        let doc = estimate(&f, &cfg).unwrap();
        assert!(doc.intervals.is_empty());
        assert_eq!(doc.failures.len(), 2);
    }

    #[test]
    fn curve_grid_checks() {
        let f = parse_dataset(SANTA_CLARA, DataFormat::Json).unwrap();
        let cfg = EstimateConfig {
            methods: vec![Method::Delta],
            ..EstimateConfig::default()
        };
        let bad = CurveGrid {
            pi_min: 0.02,
            pi_max: 0.01,
            pi_step: 0.001,
        };
        assert!(matches!(pvalue_curves(&f, &cfg, &bad), Err(Error::Usage(_))));
        let grid = CurveGrid {
            pi_min: 0.0,
            pi_max: 0.03,
            pi_step: 0.001,
        };
        let curves = pvalue_curves(&f, &cfg, &grid).unwrap();
        let csv = curves_to_csv(&curves);
        assert!(csv.starts_with("method,pi,pvalue\ndelta,0,"));
        assert_eq!(csv.lines().count(), 1 + curves[0].pis.len());
    }
}
