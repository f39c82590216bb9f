//! Plot-ready series, comparison tables and trend checks over iteration
//! reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::learning::{IterationReport, SystemKind};
use crate::theory::TheoryReport;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("inconsistent input: {0}")]
    Consistency(String),
    #[error("invalid trend spec: {0}")]
    Spec(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub const SERIES_HEADER: &str = "system,iteration,x,y";

pub const ACC_VS_ANNOTATIONS: &str = "test_acc_vs_annotations";
pub const ACC_VS_ITERATION: &str = "test_acc_vs_iteration";
pub const INTERACTIONS_PER_Q: &str = "interactions_per_q";
pub const E_I: &str = "e_i";
pub const BETA_I: &str = "beta_i";
pub const EPS_TILDE_I: &str = "eps_tilde_i";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub system: String,
    pub iteration: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub system: String,
    pub name: String,
    pub points: Vec<SeriesPoint>,
}

/// Reports of one experiment, possibly spanning several systems.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSet {
    pub experiment_id: String,
    pub reports: Vec<IterationReport>,
}

fn group(reports: &[IterationReport]) -> BTreeMap<SystemKind, Vec<&IterationReport>> {
    let mut by: BTreeMap<SystemKind, Vec<&IterationReport>> = BTreeMap::new();
    for r in reports {
        by.entry(r.system).or_default().push(r);
    }
    for v in by.values_mut() {
        v.sort_by_key(|r| r.iteration);
    }
    by
}

/// Accuracy-vs-annotations and accuracy-vs-iteration series per system,
/// interactions per question for the interactive systems and diagnostic
/// series where reports carry them. Annotation totals are cross-checked
/// against per-iteration increments.
pub fn build_series(sets: &[ReportSet]) -> Result<Vec<Series>, MetricsError> {
    let Some(first) = sets.first() else {
        return Err(MetricsError::Consistency("no reports".into()));
    };
    if let Some(other) = sets.iter().find(|s| s.experiment_id != first.experiment_id) {
        return Err(MetricsError::Consistency(format!("mixed experiment ids {:?} and {:?}", first.experiment_id, other.experiment_id)));
    }
    let all: Vec<IterationReport> = sets.iter().flat_map(|s| s.reports.iter().cloned()).collect();
    let mut out = Vec::new();
    for (system, reports) in group(&all) {
        let name = system.as_str().to_string();
        let mut cum = 0;
        for (i, r) in reports.iter().enumerate() {
            if i > 0 && r.iteration == reports[i - 1].iteration {
                return Err(MetricsError::Consistency(format!("{name}: duplicate iteration {}", r.iteration)));
            }
            cum += r.new_annotations;
            if cum != r.annotations_cum {
                return Err(MetricsError::Consistency(format!("{name}: iteration {} reports {} annotations, increments sum to {cum}", r.iteration, r.annotations_cum)));
            }
        }
        let series = |series: &str, pick: &dyn Fn(&IterationReport) -> Option<(f64, f64)>| Series {
            system: name.clone(),
            name: series.to_string(),
            points: reports
                .iter()
                .filter_map(|r| pick(r).map(|(x, y)| SeriesPoint { system: name.clone(), iteration: r.iteration, x, y }))
                .collect(),
        };
        out.push(series(ACC_VS_ANNOTATIONS, &|r| Some((r.annotations_cum as f64, r.test_acc))));
        out.push(series(ACC_VS_ITERATION, &|r| Some((r.iteration as f64, r.test_acc))));
        if system.is_interactive() {
            out.push(series(INTERACTIONS_PER_Q, &|r| (r.iteration > 0).then_some((r.iteration as f64, r.interactions_per_q))));
        }
        if reports.iter().any(|r| r.diagnostics.is_some()) {
            out.push(series(E_I, &|r| r.diagnostics.map(|d| (r.iteration as f64, d.e))));
            out.push(series(BETA_I, &|r| r.diagnostics.map(|d| (r.iteration as f64, d.beta))));
            out.push(series(EPS_TILDE_I, &|r| r.diagnostics.map(|d| (r.iteration as f64, d.eps_tilde))));
        }
    }
    Ok(out)
}

/// Diagnostic series of a tabular run, under the system name `label`.
pub fn theory_series(report: &TheoryReport, label: &str) -> Vec<Series> {
    let make = |name: &str, ys: &[f64]| Series {
        system: label.to_string(),
        name: name.to_string(),
        points: ys.iter().enumerate().map(|(i, y)| SeriesPoint { system: label.to_string(), iteration: i + 1, x: (i + 1) as f64, y: *y }).collect(),
    };
    vec![make(E_I, &report.e_i), make(BETA_I, &report.beta_i), make(EPS_TILDE_I, &report.eps_tilde_i)]
}

/// Per `(system, iteration)` means over seeds. Annotation counts are
/// rounded means; every seed must cover the same iterations.
pub fn average_reports(per_seed: &[Vec<IterationReport>]) -> Result<Vec<IterationReport>, MetricsError> {
    let Some(first) = per_seed.first() else {
        return Err(MetricsError::Consistency("no seeds".into()));
    };
    let n = per_seed.len() as f64;
    let mut out = Vec::with_capacity(first.len());
    for (i, base) in first.iter().enumerate() {
        let rows: Vec<&IterationReport> = per_seed.iter().map(|s| s.get(i)).collect::<Option<_>>().ok_or_else(|| MetricsError::Consistency("seeds cover different iterations".into()))?;
        if rows.iter().any(|r| r.system != base.system || r.iteration != base.iteration) {
            return Err(MetricsError::Consistency("seeds cover different iterations".into()));
        }
        let mean = |f: &dyn Fn(&IterationReport) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        let mut avg = base.clone();
        avg.test_acc = mean(&|r| r.test_acc);
        avg.val_acc = mean(&|r| r.val_acc);
        avg.interactions_per_q = mean(&|r| r.interactions_per_q);
        avg.questions_seen = mean(&|r| r.questions_seen as f64).round() as usize;
        avg.new_examples = mean(&|r| r.new_examples as f64).round() as usize;
        avg.new_annotations = mean(&|r| r.new_annotations as f64).round() as usize;
        avg.annotations_cum = mean(&|r| r.annotations_cum as f64).round() as usize;
        avg.diagnostics = if rows.iter().all(|r| r.diagnostics.is_some()) {
            let d = |f: &dyn Fn(&crate::learning::StepDiagnostics) -> f64| rows.iter().map(|r| f(r.diagnostics.as_ref().expect("checked"))).sum::<f64>() / n;
            Some(crate::learning::StepDiagnostics { e: d(&|x| x.e), beta: d(&|x| x.beta), eps_tilde: d(&|x| x.eps_tilde) })
        } else {
            None
        };
        avg.error = rows.iter().find_map(|r| r.error.clone());
        out.push(avg);
    }
    // Rounded means can break the running-sum relation; restore it.
    let mut cum: BTreeMap<SystemKind, usize> = BTreeMap::new();
    for r in &mut out {
        let prev = cum.get(&r.system).copied().unwrap_or(0);
        r.new_annotations = r.annotations_cum.saturating_sub(prev);
        r.annotations_cum = prev + r.new_annotations;
        cum.insert(r.system, r.annotations_cum);
    }
    Ok(out)
}

/// Final-iteration comparison table as CSV.
pub fn final_table(reports: &[IterationReport]) -> String {
    let mut out = String::from("system,iteration,test_acc,val_acc,annotations_cum\n");
    for (system, rows) in group(reports) {
        if let Some(last) = rows.last() {
            out.push_str(&format!("{},{},{},{},{}\n", system, last.iteration, last.test_acc, last.val_acc, last.annotations_cum));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coord {
    X,
    Y,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Final,
    /// Every iteration at or after `from`.
    Every { from: usize },
}

/// `lower ≤ upper + tolerance` (or `<` when strict) on one coordinate of a
/// series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub series: String,
    pub coord: Coord,
    pub lower: String,
    pub upper: String,
    pub scope: Scope,
    pub tolerance: f64,
    pub strict: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// slope < −tolerance
    Decreasing,
    /// slope ≤ tolerance
    NonIncreasing,
    /// slope > tolerance
    Increasing,
    /// slope ≥ −tolerance
    NonDecreasing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub system: String,
    pub series: String,
    pub direction: Direction,
    pub slope_tolerance: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrendSpec {
    pub orderings: Vec<OrderingCheck>,
    pub trends: Vec<TrendCheck>,
}

impl TrendSpec {
    /// Fewer annotations for the interactive systems than for full expert
    /// supervision at every iteration, the final-accuracy ordering of the
    /// baselines, and a non-increasing confident-error rate.
    pub fn default_orderings() -> Self {
        let ord = |series: &str, coord, lower: SystemKind, upper: SystemKind, scope, tolerance, strict| OrderingCheck {
            series: series.into(),
            coord,
            lower: lower.as_str().into(),
            upper: upper.as_str().into(),
            scope,
            tolerance,
            strict,
        };
        use SystemKind::*;
        TrendSpec {
            orderings: vec![
                ord(ACC_VS_ANNOTATIONS, Coord::X, NeilStar, Neil, Scope::Every { from: 1 }, 0.0, true),
                ord(ACC_VS_ANNOTATIONS, Coord::X, Neil, FullExpert, Scope::Every { from: 1 }, 0.0, true),
                ord(ACC_VS_ITERATION, Coord::Y, SelfTrain, Neil, Scope::Final, 0.0, false),
                ord(ACC_VS_ITERATION, Coord::Y, Neil, FullExpert, Scope::Final, 0.02, false),
                ord(ACC_VS_ITERATION, Coord::Y, BinaryUser, Neil, Scope::Final, 0.0, false),
            ],
            trends: vec![TrendCheck { system: Neil.as_str().into(), series: E_I.into(), direction: Direction::NonIncreasing, slope_tolerance: 0.0 }],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub description: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub checks: Vec<CheckResult>,
}

impl TrendReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Least-squares slope of `y` against `x`; zero for fewer than two points.
pub fn least_squares_slope(points: &[(f64, f64)]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    if sxx == 0.0 { 0.0 } else { sxy / sxx }
}

fn find<'s>(series: &'s [Series], system: &str, name: &str) -> Result<&'s Series, MetricsError> {
    series
        .iter()
        .find(|s| s.system == system && s.name == name)
        .ok_or_else(|| MetricsError::Spec(format!("missing series {name} for {system}")))
}

pub fn check_trends(series: &[Series], spec: &TrendSpec) -> Result<TrendReport, MetricsError> {
    let mut checks = Vec::new();
    for o in &spec.orderings {
        let lo = find(series, &o.lower, &o.series)?;
        let hi = find(series, &o.upper, &o.series)?;
        let value = |p: &SeriesPoint| match o.coord {
            Coord::X => p.x,
            Coord::Y => p.y,
        };
        let pairs: Vec<(usize, f64, f64)> = match o.scope {
            Scope::Final => match (lo.points.last(), hi.points.last()) {
                (Some(a), Some(b)) => vec![(a.iteration, value(a), value(b))],
                _ => return Err(MetricsError::Spec(format!("empty series {}", o.series))),
            },
            Scope::Every { from } => lo
                .points
                .iter()
                .filter(|p| p.iteration >= from)
                .map(|a| {
                    hi.points
                        .iter()
                        .find(|b| b.iteration == a.iteration)
                        .map(|b| (a.iteration, value(a), value(b)))
                        .ok_or_else(|| MetricsError::Spec(format!("{} has no iteration {}", o.upper, a.iteration)))
                })
                .collect::<Result<_, _>>()?,
        };
        let violation = pairs.iter().find(|(_, a, b)| if o.strict { !(*a < b + o.tolerance) } else { !(*a <= b + o.tolerance) });
        let rel = if o.strict { "<" } else { "<=" };
        checks.push(CheckResult {
            description: format!("{}.{:?} {} {rel} {} + {}", o.series, o.coord, o.lower, o.upper, o.tolerance),
            passed: violation.is_none() && !pairs.is_empty(),
            detail: match violation {
                Some((it, a, b)) => format!("iteration {it}: {a} vs {b}"),
                None => format!("{} comparisons", pairs.len()),
            },
        });
    }
    for t in &spec.trends {
        let s = find(series, &t.system, &t.series)?;
        let pts: Vec<(f64, f64)> = s.points.iter().map(|p| (p.x, p.y)).collect();
        let slope = least_squares_slope(&pts);
        let passed = match t.direction {
            Direction::Decreasing => slope < -t.slope_tolerance,
            Direction::NonIncreasing => slope <= t.slope_tolerance,
            Direction::Increasing => slope > t.slope_tolerance,
            Direction::NonDecreasing => slope >= -t.slope_tolerance,
        };
        checks.push(CheckResult {
            description: format!("{} {} {:?}", t.system, t.series, t.direction),
            passed,
            detail: format!("slope {slope:e} over {} points", pts.len()),
        });
    }
    Ok(TrendReport { checks })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

/// Writes `{dir}/{experiment_id}/{system}/{series}.{csv|json}` and returns
/// the paths in write order.
pub fn emit(dir: &Path, experiment_id: &str, series: &[Series], format: Format) -> Result<Vec<PathBuf>, MetricsError> {
    let mut paths = Vec::with_capacity(series.len());
    for s in series {
        let sys_dir = dir.join(experiment_id).join(&s.system);
        std::fs::create_dir_all(&sys_dir)?;
        let path = match format {
            Format::Csv => {
                let path = sys_dir.join(format!("{}.csv", s.name));
                let mut w = csv::Writer::from_path(&path)?;
                if s.points.is_empty() {
                    w.write_record(SERIES_HEADER.split(','))?;
                }
                for p in &s.points {
                    w.serialize(p)?;
                }
                w.flush()?;
                path
            }
            Format::Json => {
                let path = sys_dir.join(format!("{}.json", s.name));
                std::fs::write(&path, serde_json::to_string_pretty(&s.points)?)?;
                path
            }
        };
        paths.push(path);
    }
    Ok(paths)
}

pub fn read_series_csv(path: &Path) -> Result<Vec<SeriesPoint>, MetricsError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn read_series_json(path: &Path) -> Result<Vec<SeriesPoint>, MetricsError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
