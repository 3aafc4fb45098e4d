//! Metrics CSV, privacy-ledger CSV and SVG charts.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str =
    "iter,transmitted,train_loss,test_acc,eps_bound,eps_max_client,jammer_var,avg_tx_power,wall_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub iteration: usize,
    pub transmitted: bool,
    pub train_loss: f64,
    pub test_acc: f64,
    pub eps_bound: f64,
    pub eps_max_client: f64,
    pub jammer_var: f64,
    pub avg_tx_power: f64,
    pub wall_ms: u64,
}

/// Nine significant digits; infinities as `inf`.
pub fn fmt_float(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.8e}")
    }
}

pub fn metrics_csv(metrics: &[RoundMetrics]) -> String {
    let mut s = String::with_capacity(64 * (metrics.len() + 1));
    s.push_str(METRICS_HEADER);
    s.push('\n');
    for m in metrics {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            m.iteration,
            u8::from(m.transmitted),
            fmt_float(m.train_loss),
            fmt_float(m.test_acc),
            fmt_float(m.eps_bound),
            fmt_float(m.eps_max_client),
            fmt_float(m.jammer_var),
            fmt_float(m.avg_tx_power),
            m.wall_ms
        );
    }
    s
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(contents.as_bytes())?;
    Ok(())
}

pub fn emit_csv(metrics: &[RoundMetrics], path: &Path) -> Result<()> {
    write_file(path, &metrics_csv(metrics))
}

fn field<T: std::str::FromStr>(line: usize, name: &str, v: Option<&str>) -> Result<T> {
    let v = v.ok_or_else(|| Error::Parse(format!("line {line}: missing {name}")))?;
    v.parse()
        .map_err(|_| Error::Parse(format!("line {line}: bad {name} `{v}`")))
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<RoundMetrics>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => return Err(Error::Parse(format!("unexpected header {other:?}"))),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let n = i + 2;
            let mut f = l.split(',');
            let m = RoundMetrics {
                iteration: field(n, "iter", f.next())?,
                transmitted: field::<u8>(n, "transmitted", f.next())? == 1,
                train_loss: field(n, "train_loss", f.next())?,
                test_acc: field(n, "test_acc", f.next())?,
                eps_bound: field(n, "eps_bound", f.next())?,
                eps_max_client: field(n, "eps_max_client", f.next())?,
                jammer_var: field(n, "jammer_var", f.next())?,
                avg_tx_power: field(n, "avg_tx_power", f.next())?,
                wall_ms: field(n, "wall_ms", f.next())?,
            };
            if f.next().is_some() {
                return Err(Error::Parse(format!("line {n}: too many fields")));
            }
            Ok(m)
        })
        .collect()
}

/// One transmitting round as seen by the accountant.
#[derive(Debug, Clone, PartialEq)]
pub struct LedgerRow {
    pub iteration: usize,
    pub sigma_sq: f64,
    pub slack: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerTrace {
    pub delta: f64,
    pub data_size: usize,
    pub rows: Vec<LedgerRow>,
}

/// Exact (shortest round-trip) float text, so replay reproduces the run's
/// ledger bit for bit.
pub fn ledger_csv(trace: &LedgerTrace) -> String {
    let k = trace.rows.first().map_or(0, |r| r.slack.len());
    let mut s = format!("# delta={:?} data_size={}\niter,sigma_sq", trace.delta, trace.data_size);
    for i in 0..k {
        let _ = write!(s, ",s_{i}");
    }
    s.push('\n');
    for r in &trace.rows {
        let _ = write!(s, "{},{:?}", r.iteration, r.sigma_sq);
        for v in &r.slack {
            let _ = write!(s, ",{v:?}");
        }
        s.push('\n');
    }
    s
}

pub fn parse_ledger_csv(text: &str) -> Result<LedgerTrace> {
    let mut lines = text.lines();
    let meta = lines
        .next()
        .and_then(|l| l.strip_prefix('#'))
        .ok_or_else(|| Error::Parse("missing `# delta=... data_size=...` line".into()))?;
    let (mut delta, mut data_size) = (None, None);
    for kv in meta.split_whitespace() {
        match kv.split_once('=') {
            Some(("delta", v)) => delta = Some(field::<f64>(1, "delta", Some(v))?),
            Some(("data_size", v)) => data_size = Some(field::<usize>(1, "data_size", Some(v))?),
            _ => return Err(Error::Parse(format!("line 1: unexpected `{kv}`"))),
        }
    }
    let header = lines.next().ok_or_else(|| Error::Parse("missing header".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 2 || cols[0] != "iter" || cols[1] != "sigma_sq" {
        return Err(Error::Parse(format!("unexpected header `{header}`")));
    }
    let k = cols.len() - 2;
    let rows = lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let n = i + 3;
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != k + 2 {
                return Err(Error::Parse(format!("line {n}: expected {} fields", k + 2)));
            }
            Ok(LedgerRow {
                iteration: field(n, "iter", Some(f[0]))?,
                sigma_sq: field(n, "sigma_sq", Some(f[1]))?,
                slack: f[2..]
                    .iter()
                    .map(|v| field(n, "slack", Some(v)))
                    .collect::<Result<_>>()?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(LedgerTrace {
        delta: delta.ok_or_else(|| Error::Parse("missing delta".into()))?,
        data_size: data_size.ok_or_else(|| Error::Parse("missing data_size".into()))?,
        rows,
    })
}

/// A labelled run for the charts.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub metrics: Vec<RoundMetrics>,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const WIDTH: f64 = 640.0;
const CHART_H: f64 = 220.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 35.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn chart(out: &mut String, title: &str, y0: f64, series: &[Series], get: fn(&RoundMetrics) -> f64) {
    let finite = series
        .iter()
        .flat_map(|s| s.metrics.iter().map(get))
        .filter(|v| v.is_finite());
    let (mut lo, mut hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let xmax = series
        .iter()
        .flat_map(|s| s.metrics.iter().map(|m| m.iteration))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let xmin = series
        .iter()
        .flat_map(|s| s.metrics.iter().map(|m| m.iteration))
        .min()
        .unwrap_or(0) as f64;
    let xspan = if xmax > xmin { xmax - xmin } else { 1.0 };

    let pw = WIDTH - LEFT - RIGHT;
    let ph = CHART_H - TOP - BOTTOM;
    let _ = writeln!(
        out,
        r#"<g transform="translate(0,{y0})"><text x="{}" y="18" font-size="14" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
    );
    if !lo.is_finite() {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">no finite values</text></g>"#,
            LEFT + pw / 2.0,
            TOP + ph / 2.0
        );
        return;
    }
    if hi == lo {
        let pad = if lo == 0.0 { 0.5 } else { lo.abs() * 0.05 };
        lo -= pad;
        hi += pad;
    }
    let px = |it: usize| LEFT + (it as f64 - xmin) / xspan * pw;
    let py = |v: f64| TOP + (hi - v) / (hi - lo) * ph;
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{}</text><text x="{}" y="{}" font-size="11" text-anchor="end">{}</text>"#,
        LEFT - 4.0,
        TOP + 4.0,
        fmt_axis(hi),
        LEFT - 4.0,
        TOP + ph,
        fmt_axis(lo)
    );
    let _ = writeln!(
        out,
        r#"<text x="{LEFT}" y="{}" font-size="11" text-anchor="middle">{}</text><text x="{}" y="{}" font-size="11" text-anchor="middle">{}</text><text x="{}" y="{}" font-size="11" text-anchor="middle">iteration</text>"#,
        TOP + ph + 14.0,
        xmin,
        LEFT + pw,
        TOP + ph + 14.0,
        xmax,
        LEFT + pw / 2.0,
        TOP + ph + 28.0
    );
    for (idx, s) in series.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        // Non-finite values split the line into separate segments.
        let mut segments: Vec<Vec<String>> = vec![Vec::new()];
        for m in &s.metrics {
            let v = get(m);
            if v.is_finite() {
                segments.last_mut().unwrap().push(format!("{:.2},{:.2}", px(m.iteration), py(v)));
            } else if !segments.last().unwrap().is_empty() {
                segments.push(Vec::new());
            }
        }
        for seg in segments.iter().filter(|s| !s.is_empty()) {
            let _ = writeln!(
                out,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                seg.join(" ")
            );
        }
        let ly = TOP + 12.0 + 16.0 * idx as f64;
        let lx = WIDTH - RIGHT + 10.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}" font-size="11">{}</text>"#,
            lx + 18.0,
            lx + 22.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    out.push_str("</g>\n");
}

fn fmt_axis(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.4}")
    }
}

/// Charts of test accuracy, training loss and the ε bound against
/// iteration, one line per series.
pub fn render_svg(series: &[Series]) -> Result<String> {
    if series.is_empty() || series.iter().any(|s| s.metrics.is_empty()) {
        return Err(Error::InvalidInput("no series to plot".into()));
    }
    let charts: [(&str, fn(&RoundMetrics) -> f64); 3] = [
        ("test accuracy", |m| m.test_acc),
        ("training loss", |m| m.train_loss),
        ("epsilon bound", |m| m.eps_bound),
    ];
    let height = CHART_H * charts.len() as f64;
    let mut out = format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{height}\" viewBox=\"0 0 {WIDTH} {height}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (i, (title, get)) in charts.iter().enumerate() {
        chart(&mut out, title, CHART_H * i as f64, series, *get);
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn emit_svg(series: &[Series], path: &Path) -> Result<()> {
    write_file(path, &render_svg(series)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(it: usize, acc: f64) -> RoundMetrics {
        RoundMetrics {
            iteration: it,
            transmitted: it % 2 == 1,
            train_loss: 2.25,
            test_acc: acc,
            eps_bound: f64::INFINITY,
            eps_max_client: 0.1 * it as f64,
            jammer_var: 0.0,
            avg_tx_power: 1.0 / 3.0,
            wall_ms: 0,
        }
    }

    #[test]
    fn csv_header_and_rows() {
        let text = metrics_csv(&[row(1, 0.5), row(2, 0.25)]);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(METRICS_HEADER));
        assert_eq!(text.lines().count(), 3);
        assert!(!text.contains('\r'));
        assert!(text.contains(",inf,"));
        let back = parse_metrics_csv(&text).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].test_acc, 0.5);
        assert!(back[0].eps_bound.is_infinite());
        assert_eq!(metrics_csv(&back), text);
    }

    #[test]
    fn nine_significant_digits() {
        assert_eq!(fmt_float(1.0 / 3.0), "3.33333333e-1");
        assert_eq!(fmt_float(0.0), "0.00000000e0");
    }

    #[test]
    fn ledger_roundtrip_is_exact() {
        let trace = LedgerTrace {
            delta: 1e-5,
            data_size: 1234,
            rows: vec![
                LedgerRow { iteration: 1, sigma_sq: 0.1 + 0.2, slack: vec![1.0, 1.0 / 3.0 + 1.0] },
                LedgerRow { iteration: 3, sigma_sq: 7e-300, slack: vec![2.5, 1.0] },
            ],
        };
        assert_eq!(parse_ledger_csv(&ledger_csv(&trace)).unwrap(), trace);
    }

    #[test]
    fn svg_basics() {
        assert!(render_svg(&[]).is_err());
        let s = Series { label: "a<b".into(), metrics: vec![row(1, 0.5), row(2, 0.5)] };
        let svg = render_svg(&[s]).unwrap();
        assert!(svg.contains("a&lt;b"));
        assert!(svg.contains("no finite values"));
        assert!(!svg.contains("href"));
    }
}
