//! Static SVG charts built from metric records.
//!
//! Three families are written, each as `{family}_{metric}.svg`:
//! `methods` (box plots over runs, all environments pooled), `environments`
//! (median per environment and method) and `sweep` (median and IQR band
//! against the sweep value, for labels like `true-dag[n_e=200]`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::write_text;
use crate::metrics::{quantile_sorted, MetricRecord, ALL_ENVIRONMENTS};

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 70.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

struct Stats {
    min: f64,
    q1: f64,
    median: f64,
    q3: f64,
    max: f64,
}

fn stats(values: &[f64]) -> Stats {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Stats {
        min: v[0],
        q1: quantile_sorted(&v, 0.25),
        median: quantile_sorted(&v, 0.5),
        q3: quantile_sorted(&v, 0.75),
        max: v[v.len() - 1],
    }
}

/// Splits `base[key=value]` into `(base, key, value)`.
pub fn parse_sweep_label(label: &str) -> Option<(&str, &str, f64)> {
    let (base, rest) = label.split_once('[')?;
    let inner = rest.strip_suffix(']')?;
    let (key, value) = inner.split_once('=')?;
    Some((base, key, value.parse().ok()?))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Canvas {
    body: String,
    y_lo: f64,
    y_hi: f64,
}

impl Canvas {
    fn new(title: &str, y_label: &str, values: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
        lo = lo.min(0.0);
        if !(hi > lo) {
            hi = lo + 1.0;
        }
        hi += 0.05 * (hi - lo);
        let mut body = String::new();
        writeln!(
            body,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        )
        .unwrap();
        writeln!(body, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
        writeln!(
            body,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            W / 2.0,
            escape(title)
        )
        .unwrap();
        writeln!(
            body,
            r#"<text transform="translate(16 {}) rotate(-90)" text-anchor="middle">{}</text>"#,
            TOP + (H - TOP - BOTTOM) / 2.0,
            escape(y_label)
        )
        .unwrap();
        let mut c = Self {
            body,
            y_lo: lo,
            y_hi: hi,
        };
        c.axes();
        c
    }

    fn y(&self, v: f64) -> f64 {
        H - BOTTOM - (v - self.y_lo) / (self.y_hi - self.y_lo) * (H - TOP - BOTTOM)
    }

    fn axes(&mut self) {
        let x0 = LEFT;
        let y0 = H - BOTTOM;
        writeln!(
            self.body,
            r#"<line x1="{x0}" y1="{TOP}" x2="{x0}" y2="{y0}" stroke="black"/><line x1="{x0}" y1="{y0}" x2="{}" y2="{y0}" stroke="black"/>"#,
            W - RIGHT
        )
        .unwrap();
        for k in 0..=4 {
            let v = self.y_lo + (self.y_hi - self.y_lo) * k as f64 / 4.0;
            let y = self.y(v);
            writeln!(
                self.body,
                r#"<line x1="{}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
                x0 - 4.0,
                x0 - 6.0,
                y + 4.0,
                tick(v)
            )
            .unwrap();
        }
    }

    fn x_label(&mut self, x: f64, text: &str) {
        writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            H - BOTTOM + 18.0,
            escape(text)
        )
        .unwrap();
    }

    fn legend(&mut self, names: &[String]) {
        for (k, name) in names.iter().enumerate() {
            let y = H - 22.0;
            let x = LEFT + 130.0 * k as f64;
            writeln!(
                self.body,
                r#"<rect x="{x:.2}" y="{:.2}" width="10" height="10" fill="{}"/><text x="{:.2}" y="{y:.2}">{}</text>"#,
                y - 9.0,
                PALETTE[k % PALETTE.len()],
                x + 14.0,
                escape(name)
            )
            .unwrap();
        }
    }

    fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

fn tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn methods_chart(metric: &str, groups: &BTreeMap<String, Vec<f64>>) -> String {
    let all: Vec<f64> = groups.values().flatten().copied().collect();
    let mut c = Canvas::new(&format!("{metric} by method"), metric, all.into_iter());
    let slot = (W - LEFT - RIGHT) / groups.len() as f64;
    for (k, (method, values)) in groups.iter().enumerate() {
        let s = stats(values);
        let cx = LEFT + slot * (k as f64 + 0.5);
        let half = (slot * 0.3).min(30.0);
        let color = PALETTE[k % PALETTE.len()];
        writeln!(
            c.body,
            r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="{color}"/>"#,
            c.y(s.min),
            c.y(s.max)
        )
        .unwrap();
        writeln!(
            c.body,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.3" stroke="{color}"/>"#,
            cx - half,
            c.y(s.q3),
            2.0 * half,
            (c.y(s.q1) - c.y(s.q3)).max(0.5)
        )
        .unwrap();
        writeln!(
            c.body,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="2"/>"#,
            cx - half,
            c.y(s.median),
            cx + half,
            c.y(s.median)
        )
        .unwrap();
        c.x_label(cx, method);
    }
    c.finish()
}

fn environments_chart(metric: &str, groups: &BTreeMap<(String, String), Vec<f64>>) -> String {
    let envs: Vec<String> = {
        let mut e: Vec<String> = groups.keys().map(|(_, e)| e.clone()).collect();
        e.sort_by_key(|s| (s.parse::<u64>().unwrap_or(u64::MAX), s.clone()));
        e.dedup();
        e
    };
    let methods: Vec<String> = {
        let mut m: Vec<String> = groups.keys().map(|(m, _)| m.clone()).collect();
        m.dedup();
        m
    };
    let medians: BTreeMap<&(String, String), f64> =
        groups.iter().map(|(k, v)| (k, stats(v).median)).collect();
    let mut c = Canvas::new(
        &format!("median {metric} by environment"),
        metric,
        medians.values().copied(),
    );
    let slot = (W - LEFT - RIGHT) / envs.len() as f64;
    let bar = slot * 0.8 / methods.len() as f64;
    for (ei, env) in envs.iter().enumerate() {
        let x0 = LEFT + slot * ei as f64 + slot * 0.1;
        for (mi, method) in methods.iter().enumerate() {
            if let Some(&v) = medians.get(&(method.clone(), env.clone())) {
                let top = c.y(v.max(c.y_lo));
                let base = c.y(c.y_lo.max(0.0));
                writeln!(
                    c.body,
                    r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                    x0 + bar * mi as f64,
                    top.min(base),
                    bar,
                    (base - top).abs(),
                    PALETTE[mi % PALETTE.len()]
                )
                .unwrap();
            }
        }
        c.x_label(LEFT + slot * (ei as f64 + 0.5), &format!("env {env}"));
    }
    c.legend(&methods);
    c.finish()
}

type SweepSeries = BTreeMap<String, BTreeMap<u64, (f64, Vec<f64>)>>;

fn sweep_chart(metric: &str, key: &str, series: &SweepSeries) -> String {
    let all: Vec<f64> = series
        .values()
        .flat_map(|s| s.values().flat_map(|(_, v)| v.iter().copied()))
        .collect();
    let (x_lo, x_hi) = series
        .values()
        .flat_map(|s| s.values().map(|(x, _)| *x))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let span = if x_hi > x_lo { x_hi - x_lo } else { 1.0 };
    let px = |x: f64| LEFT + 20.0 + (x - x_lo) / span * (W - LEFT - RIGHT - 40.0);
    let mut c = Canvas::new(&format!("median {metric} against {key}"), metric, all.into_iter());
    let mut xs: Vec<f64> = series.values().flat_map(|s| s.values().map(|(x, _)| *x)).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    for &x in &xs {
        c.x_label(px(x), &format!("{x}"));
    }
    let names: Vec<String> = series.keys().cloned().collect();
    for (k, points) in series.values().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let st: Vec<(f64, Stats)> = points.values().map(|(x, v)| (*x, stats(v))).collect();
        let upper: Vec<String> = st.iter().map(|(x, s)| format!("{:.2},{:.2}", px(*x), c.y(s.q3))).collect();
        let lower: Vec<String> = st.iter().rev().map(|(x, s)| format!("{:.2},{:.2}", px(*x), c.y(s.q1))).collect();
        writeln!(
            c.body,
            r#"<polygon points="{} {}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            upper.join(" "),
            lower.join(" ")
        )
        .unwrap();
        let line: Vec<String> = st.iter().map(|(x, s)| format!("{:.2},{:.2}", px(*x), c.y(s.median))).collect();
        writeln!(
            c.body,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        )
        .unwrap();
        for (x, s) in &st {
            writeln!(
                c.body,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                px(*x),
                c.y(s.median)
            )
            .unwrap();
        }
    }
    c.legend(&names);
    c.finish()
}

/// Renders every applicable chart into `dir` and returns the paths written.
pub fn write_plots(records: &[MetricRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::Empty("no metric records to plot".into()));
    }
    crate::io::create_dir(dir)?;
    let metrics: Vec<String> = {
        let mut m: Vec<String> = records.iter().map(|r| r.metric.clone()).collect();
        m.sort();
        m.dedup();
        m
    };
    let mut files = Vec::new();
    for metric in &metrics {
        let of_metric = records.iter().filter(|r| &r.metric == metric);

        let mut plain: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut per_env: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        let mut sweeps: BTreeMap<String, SweepSeries> = BTreeMap::new();
        for r in of_metric {
            if let Some((base, key, x)) = parse_sweep_label(&r.method) {
                if r.environment == ALL_ENVIRONMENTS {
                    sweeps
                        .entry(key.to_string())
                        .or_default()
                        .entry(base.to_string())
                        .or_default()
                        .entry(x.to_bits())
                        .or_insert_with(|| (x, Vec::new()))
                        .1
                        .push(r.value);
                }
            } else if r.environment == ALL_ENVIRONMENTS {
                plain.entry(r.method.clone()).or_default().push(r.value);
            } else {
                per_env
                    .entry((r.method.clone(), r.environment.clone()))
                    .or_default()
                    .push(r.value);
            }
        }
        // Order sweep points by value rather than by bit pattern.
        for series in sweeps.values_mut() {
            for points in series.values_mut() {
                let mut v: Vec<(f64, Vec<f64>)> = std::mem::take(points).into_values().collect();
                v.sort_by(|a, b| a.0.total_cmp(&b.0));
                *points = v.into_iter().enumerate().map(|(k, p)| (k as u64, p)).collect();
            }
        }

        let mut emit = |name: String, svg: String| -> Result<()> {
            let path = dir.join(name);
            write_text(&path, &svg)?;
            files.push(path);
            Ok(())
        };
        if !plain.is_empty() {
            emit(format!("methods_{metric}.svg"), methods_chart(metric, &plain))?;
        }
        if !per_env.is_empty() {
            emit(
                format!("environments_{metric}.svg"),
                environments_chart(metric, &per_env),
            )?;
        }
        for (key, series) in &sweeps {
            let name = if sweeps.len() == 1 {
                format!("sweep_{metric}.svg")
            } else {
                format!("sweep_{metric}_{key}.svg")
            };
            emit(name, sweep_chart(metric, key, series))?;
        }
    }
    Ok(files)
}
