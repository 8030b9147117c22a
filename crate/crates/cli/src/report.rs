use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::output::{read_summary, SummaryRow};

/// A curve over the sweep: one protocol, or the gap between two.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Series {
    Protocol(String),
    Difference(String, String),
}

impl TryFrom<String> for Series {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        match s.split_once('-') {
            Some((a, b)) if !a.is_empty() && !b.is_empty() => {
                Ok(Series::Difference(a.to_string(), b.to_string()))
            }
            Some(_) => Err(format!("bad series `{s}`")),
            None if s.is_empty() => Err("empty series".into()),
            None => Ok(Series::Protocol(s)),
        }
    }
}

impl From<Series> for String {
    fn from(s: Series) -> String {
        s.to_string()
    }
}

impl fmt::Display for Series {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Series::Protocol(p) => f.write_str(p),
            Series::Difference(a, b) => write!(f, "{a}-{b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrendKind {
    /// Strictly increasing in the swept parameter.
    Increasing { series: Series },
    Decreasing { series: Series },
    /// Spread over the sweep below `tol` of the mean.
    Constant { series: Series, tol: f64 },
    /// `a` strictly below `b` at every point.
    Dominates { a: Series, b: Series },
    LinearFit { series: Series, min_r2: f64 },
    /// `a <= factor * b + slack` at every point, with `slack` taken from
    /// series `a` in another column.
    WithinFactor {
        a: Series,
        b: Series,
        factor: f64,
        #[serde(default)]
        slack: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendAssertion {
    pub name: String,
    #[serde(default)]
    pub experiment: Option<String>,
    /// A summary column, or `col/col` for a ratio of seed means.
    pub metric: String,
    #[serde(flatten)]
    pub kind: TrendKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    Skip,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Skip => "SKIP",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssertionResult {
    pub name: String,
    pub verdict: Verdict,
    pub evidence: String,
}

impl fmt::Display for AssertionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", self.verdict, self.name, self.evidence)
    }
}

type Curve = Vec<(f64, f64)>;

fn fmt_curve(c: &Curve) -> String {
    let pts: Vec<String> = c.iter().map(|(x, y)| format!("{x}:{y:.4}")).collect();
    format!("[{}]", pts.join(" "))
}

/// Seed-mean of `metric` per sweep point for one protocol, ordered by the
/// numeric sweep value.
fn protocol_curve(rows: &[&SummaryRow], protocol: &str, metric: &str) -> Result<Curve> {
    let (num, den) = match metric.split_once('/') {
        Some((a, b)) => (a, Some(b)),
        None => (metric, None),
    };
    let mut acc: BTreeMap<String, (f64, f64, u32)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.protocol == protocol) {
        let n = r.metric(num).with_context(|| format!("no column `{num}`"))?;
        let d = match den {
            Some(d) => r.metric(d).with_context(|| format!("no column `{d}`"))?,
            None => 1.0,
        };
        let e = acc.entry(r.sweep_value.clone()).or_default();
        e.0 += n;
        e.1 += d;
        e.2 += 1;
    }
    let mut curve = Vec::new();
    for (x, (n, d, k)) in acc {
        let x: f64 = if x.is_empty() { 0.0 } else { x.parse().with_context(|| format!("sweep value `{x}` is not numeric"))? };
        let y = match den {
            Some(_) => n / d,
            None => n / f64::from(k),
        };
        curve.push((x, y));
    }
    curve.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(curve)
}

fn curve(rows: &[&SummaryRow], series: &Series, metric: &str) -> Result<Curve> {
    match series {
        Series::Protocol(p) => protocol_curve(rows, p, metric),
        Series::Difference(a, b) => {
            let ca = protocol_curve(rows, a, metric)?;
            let cb = protocol_curve(rows, b, metric)?;
            if ca.len() != cb.len() || ca.iter().zip(&cb).any(|(p, q)| p.0 != q.0) {
                bail!("series {a} and {b} cover different sweep points");
            }
            Ok(ca.iter().zip(&cb).map(|(p, q)| (p.0, p.1 - q.1)).collect())
        }
    }
}

/// Coefficient of determination of the least-squares line.
pub fn r_squared(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    if sxx == 0.0 {
        return 0.0;
    }
    sxy * sxy / (sxx * syy)
}

fn evaluate_kind(rows: &[&SummaryRow], kind: &TrendKind, metric: &str) -> Result<(bool, String)> {
    Ok(match kind {
        TrendKind::Increasing { series } | TrendKind::Decreasing { series } => {
            let c = curve(rows, series, metric)?;
            let up = matches!(kind, TrendKind::Increasing { .. });
            let ok = c.len() >= 2
                && c.windows(2).all(|w| if up { w[1].1 > w[0].1 } else { w[1].1 < w[0].1 });
            (ok, format!("{series} {}", fmt_curve(&c)))
        }
        TrendKind::Constant { series, tol } => {
            let c = curve(rows, series, metric)?;
            let ys: Vec<f64> = c.iter().map(|p| p.1).collect();
            let max = ys.iter().copied().fold(f64::MIN, f64::max);
            let min = ys.iter().copied().fold(f64::MAX, f64::min);
            let mean = ys.iter().sum::<f64>() / ys.len().max(1) as f64;
            let spread = if max == min { 0.0 } else { (max - min) / mean.abs() };
            (
                !ys.is_empty() && spread < *tol,
                format!("{series} spread {:.4}% (limit {}%) {}", spread * 100.0, tol * 100.0, fmt_curve(&c)),
            )
        }
        TrendKind::Dominates { a, b } => {
            let ca = curve(rows, a, metric)?;
            let cb = curve(rows, b, metric)?;
            let ok = !ca.is_empty()
                && ca.len() == cb.len()
                && ca.iter().zip(&cb).all(|(p, q)| p.0 == q.0 && p.1 < q.1);
            (ok, format!("{a} {} < {b} {}", fmt_curve(&ca), fmt_curve(&cb)))
        }
        TrendKind::LinearFit { series, min_r2 } => {
            let c = curve(rows, series, metric)?;
            let r2 = if c.len() >= 2 { r_squared(&c) } else { 0.0 };
            (r2 >= *min_r2, format!("{series} r2 {r2:.6} (min {min_r2}) {}", fmt_curve(&c)))
        }
        TrendKind::WithinFactor { a, b, factor, slack } => {
            let ca = curve(rows, a, metric)?;
            let cb = curve(rows, b, metric)?;
            let cs = match slack {
                Some(col) => curve(rows, a, col)?,
                None => ca.iter().map(|p| (p.0, 0.0)).collect(),
            };
            let ok = !ca.is_empty()
                && ca.len() == cb.len()
                && ca
                    .iter()
                    .zip(&cb)
                    .zip(&cs)
                    .all(|((p, q), s)| p.0 == q.0 && p.1 <= factor * q.1 + s.1);
            (
                ok,
                format!(
                    "{a} {} <= {factor} x {b} {} + {} {}",
                    fmt_curve(&ca),
                    fmt_curve(&cb),
                    slack.as_deref().unwrap_or("0"),
                    fmt_curve(&cs)
                ),
            )
        }
    })
}

fn mentioned(kind: &TrendKind) -> Vec<&Series> {
    match kind {
        TrendKind::Increasing { series }
        | TrendKind::Decreasing { series }
        | TrendKind::Constant { series, .. }
        | TrendKind::LinearFit { series, .. } => vec![series],
        TrendKind::Dominates { a, b } | TrendKind::WithinFactor { a, b, .. } => vec![a, b],
    }
}

fn protocols_of(s: &Series) -> Vec<&str> {
    match s {
        Series::Protocol(p) => vec![p],
        Series::Difference(a, b) => vec![a, b],
    }
}

/// Evaluates one assertion from summary rows alone. Skips when the rows
/// hold no data for the experiment or a named protocol.
pub fn evaluate(rows: &[SummaryRow], a: &TrendAssertion) -> AssertionResult {
    let selected: Vec<&SummaryRow> = rows
        .iter()
        .filter(|r| a.experiment.as_ref().is_none_or(|e| *e == r.experiment))
        .collect();
    let missing = mentioned(&a.kind)
        .into_iter()
        .flat_map(protocols_of)
        .find(|p| !selected.iter().any(|r| r.protocol == *p));
    let (verdict, evidence) = match missing {
        _ if selected.is_empty() => (Verdict::Skip, "no rows for this experiment".to_string()),
        Some(p) => (Verdict::Skip, format!("no rows for protocol {p}")),
        None => match evaluate_kind(&selected, &a.kind, &a.metric) {
            Ok((true, e)) => (Verdict::Pass, format!("{}: {e}", a.metric)),
            Ok((false, e)) => (Verdict::Fail, format!("{}: {e}", a.metric)),
            Err(e) => (Verdict::Fail, format!("{e:#}")),
        },
    };
    AssertionResult {
        name: a.name.clone(),
        verdict,
        evidence,
    }
}

fn s(p: &str) -> Series {
    Series::try_from(p.to_string()).expect("valid series")
}

fn assertion(name: &str, experiment: &str, metric: &str, kind: TrendKind) -> TrendAssertion {
    TrendAssertion {
        name: name.to_string(),
        experiment: Some(experiment.to_string()),
        metric: metric.to_string(),
        kind,
    }
}

/// The trend checks for the four preset experiments.
pub fn builtin_assertions() -> Vec<TrendAssertion> {
    let mut v = vec![assertion(
        "fig2 fresh rt grows with check cost",
        "fig2",
        "rt_mean",
        TrendKind::Increasing { series: s("fresh") },
    )];
    for p in ["mcd", "nxn", "perfect"] {
        v.push(assertion(
            &format!("fig2 {p} rt steady under check cost"),
            "fig2",
            "rt_mean",
            TrendKind::Constant {
                series: s(p),
                tol: 0.01,
            },
        ));
    }
    for p in ["mcd", "fresh", "nxn", "perfect"] {
        v.push(assertion(
            &format!("fig3 {p} pc grows with item size"),
            "fig3",
            "pc_mean",
            TrendKind::Increasing { series: s(p) },
        ));
    }
    v.push(assertion(
        "fig3 mcd control overhead over perfect is size independent",
        "fig3",
        "pc_mean",
        TrendKind::Constant {
            series: s("mcd-perfect"),
            tol: 0.05,
        },
    ));
    v.push(assertion(
        "fig3 fresh pc above mcd",
        "fig3",
        "pc_mean",
        TrendKind::Dominates {
            a: s("mcd"),
            b: s("fresh"),
        },
    ));
    for b in ["nxn", "fresh"] {
        v.push(assertion(
            &format!("fig4 mcd so below {b}"),
            "fig4",
            "so_per_cycle",
            TrendKind::Dominates { a: s("mcd"), b: s(b) },
        ));
    }
    v.push(assertion(
        "fig4 nxn so share of cycle shrinks with item size",
        "fig4",
        "so_per_cycle/cycle_len_mean",
        TrendKind::Decreasing { series: s("nxn") },
    ));
    v.push(assertion(
        "fig5 fresh pc linear in item position",
        "fig5",
        "pc_mean",
        TrendKind::LinearFit {
            series: s("fresh"),
            min_r2: 0.99,
        },
    ));
    v.push(assertion(
        "fig5 mcd pc close to perfect",
        "fig5",
        "pc_mean",
        TrendKind::WithinFactor {
            a: s("mcd"),
            b: s("perfect"),
            factor: 1.10,
            slack: Some("pc_control".into()),
        },
    ));
    v.push(assertion(
        "fig5 nxn pc above mcd",
        "fig5",
        "pc_mean",
        TrendKind::Dominates {
            a: s("mcd"),
            b: s("nxn"),
        },
    ));
    v
}

/// `summary.csv` in `dir` and in each direct subdirectory.
pub fn load_rows(dir: &Path) -> Result<Vec<SummaryRow>> {
    let mut files = Vec::new();
    let top = dir.join("summary.csv");
    if top.is_file() {
        files.push(top);
    }
    let mut subdirs: Vec<_> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot read {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("summary.csv").is_file())
        .collect();
    subdirs.sort();
    files.extend(subdirs.into_iter().map(|d| d.join("summary.csv")));
    if files.is_empty() {
        bail!("no summary.csv under {}", dir.display());
    }
    let mut rows = Vec::new();
    for f in files {
        rows.extend(read_summary(&f)?);
    }
    Ok(rows)
}

pub fn load_assertions(path: &Path) -> Result<Vec<TrendAssertion>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} is not a list of assertions", path.display()))
}

/// Built-in suite plus `extra`, evaluated over the CSVs under `dir`.
pub fn cmd_report(dir: &Path, extra: &[TrendAssertion]) -> Result<Vec<AssertionResult>> {
    let rows = load_rows(dir)?;
    Ok(builtin_assertions()
        .iter()
        .chain(extra)
        .map(|a| evaluate(&rows, a))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(exp: &str, x: &str, p: &str, seed: u64, so: f64, pc: f64) -> SummaryRow {
        SummaryRow {
            experiment: exp.into(),
            sweep_param: "item_size".into(),
            sweep_value: x.into(),
            protocol: p.into(),
            seed,
            rt_mean: 0.0,
            rt_p95: 0.0,
            pc_mean: pc,
            pc_listen: pc,
            pc_control: 0.0,
            pc_check: 0.0,
            pc_tx: 0.0,
            so_per_cycle: so,
            cycle_len_mean: 100.0,
            commits: 1,
            rejections: 0,
            rereads: 0,
            restarts: 0,
            incomplete: 0,
        }
    }

    #[test]
    fn dominance_needs_every_point() {
        let mut rows = vec![
            row("e", "16", "mcd", 1, 202.0, 0.0),
            row("e", "64", "mcd", 1, 202.0, 0.0),
            row("e", "16", "nxn", 1, 315.0, 0.0),
            row("e", "64", "nxn", 1, 315.0, 0.0),
        ];
        let a = assertion("d", "e", "so_per_cycle", TrendKind::Dominates { a: s("mcd"), b: s("nxn") });
        assert_eq!(evaluate(&rows, &a).verdict, Verdict::Pass);
        rows[1].so_per_cycle = 400.0;
        assert_eq!(evaluate(&rows, &a).verdict, Verdict::Fail);
    }

    #[test]
    fn points_sort_numerically_and_average_seeds() {
        let rows = vec![
            row("e", "256", "mcd", 1, 0.0, 30.0),
            row("e", "64", "mcd", 1, 0.0, 19.0),
            row("e", "64", "mcd", 2, 0.0, 21.0),
            row("e", "1024", "mcd", 1, 0.0, 40.0),
        ];
        let refs: Vec<&SummaryRow> = rows.iter().collect();
        let c = curve(&refs, &s("mcd"), "pc_mean").unwrap();
        assert_eq!(c, vec![(64.0, 20.0), (256.0, 30.0), (1024.0, 40.0)]);
        let a = assertion("i", "e", "pc_mean", TrendKind::Increasing { series: s("mcd") });
        assert_eq!(evaluate(&rows, &a).verdict, Verdict::Pass);
    }

    #[test]
    fn constant_uses_relative_spread() {
        let rows = vec![
            row("e", "1", "mcd", 1, 0.0, 100.0),
            row("e", "2", "mcd", 1, 0.0, 100.5),
        ];
        let tight = assertion("c", "e", "pc_mean", TrendKind::Constant { series: s("mcd"), tol: 0.01 });
        assert_eq!(evaluate(&rows, &tight).verdict, Verdict::Pass);
        let tighter = assertion("c", "e", "pc_mean", TrendKind::Constant { series: s("mcd"), tol: 0.001 });
        assert_eq!(evaluate(&rows, &tighter).verdict, Verdict::Fail);
    }

    #[test]
    fn r_squared_of_a_line_is_one() {
        let pts: Vec<(f64, f64)> = (1..6).map(|x| (f64::from(x), 3.0 * f64::from(x) + 2.0)).collect();
        assert!((r_squared(&pts) - 1.0).abs() < 1e-12);
        let noisy = [(1.0, 1.0), (2.0, 5.0), (3.0, 2.0), (4.0, 6.0)];
        assert!(r_squared(&noisy) < 0.9);
    }

    #[test]
    fn missing_experiment_is_skipped() {
        let rows = vec![row("fig3", "16", "mcd", 1, 0.0, 1.0)];
        let results: Vec<_> = builtin_assertions().iter().map(|a| evaluate(&rows, a)).collect();
        assert!(results.iter().filter(|r| r.name.starts_with("fig2")).all(|r| r.verdict == Verdict::Skip));
    }

    #[test]
    fn assertions_parse_from_json() {
        let a: Vec<TrendAssertion> = serde_json::from_str(
            r#"[{"name": "x", "experiment": "fig4", "metric": "so_per_cycle",
                 "kind": "dominates", "a": "mcd", "b": "nxn"},
                {"name": "y", "metric": "pc_mean", "kind": "constant", "series": "mcd-perfect", "tol": 0.05}]"#,
        )
        .unwrap();
        assert_eq!(a[0].kind, TrendKind::Dominates { a: s("mcd"), b: s("nxn") });
        assert_eq!(
            a[1].kind,
            TrendKind::Constant {
                series: Series::Difference("mcd".into(), "perfect".into()),
                tol: 0.05
            }
        );
    }
}
