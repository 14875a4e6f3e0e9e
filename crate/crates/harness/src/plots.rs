//! SVG box plots of bias.
//!
//! One file per (parameter group, γ, rate): a grid of panels with one row
//! per missingness mechanism and one column per (α, λ²) level, each panel
//! holding a box per method. Quartiles use linear interpolation at
//! position `(n + 1)p`; whiskers reach the most extreme point within
//! 1.5 IQR of the box. Values outside the y-range are not drawn and are
//! counted in `captions.txt`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ssm_impute::metrics::{BoxStats, PARAMETER_GROUPS};

use crate::method::Method;
use crate::records::{FitRecord, NO_MECHANISM};
use crate::tables::{slice_dir_name, slices};

pub const CAPTIONS_FILE: &str = "captions.txt";

#[derive(Debug, Clone)]
pub struct PlotSpec {
    /// The y-axis spans `[-y_limit, y_limit]`.
    pub y_limit: f64,
    pub parameters: Vec<String>,
    pub panel_width: f64,
    pub panel_height: f64,
}

impl Default for PlotSpec {
    fn default() -> Self {
        Self {
            y_limit: 0.5,
            parameters: PARAMETER_GROUPS.iter().map(|(g, _)| g.to_string()).collect(),
            panel_width: 260.0,
            panel_height: 200.0,
        }
    }
}

/// One box of a panel after clamping to the y-range.
#[derive(Debug, Clone, PartialEq)]
pub struct ClampedBox {
    pub stats: Option<BoxStats>,
    /// Outlying points inside the y-range.
    pub drawn_outliers: Vec<f64>,
    /// Values outside the y-range, whether outliers or not.
    pub n_out_of_range: usize,
}

pub fn clamp_box(values: &[f64], y_limit: f64) -> ClampedBox {
    let stats = BoxStats::from_values(values);
    let drawn_outliers = stats
        .as_ref()
        .map(|s| s.outliers.iter().copied().filter(|v| v.abs() <= y_limit).collect())
        .unwrap_or_default();
    ClampedBox {
        stats,
        drawn_outliers,
        n_out_of_range: values.iter().filter(|v| v.abs() > y_limit).count(),
    }
}

fn group_members(parameter: &str) -> Vec<String> {
    PARAMETER_GROUPS
        .iter()
        .find(|(g, _)| *g == parameter)
        .map_or_else(|| vec![parameter.to_string()], |(_, m)| m.iter().map(|s| s.to_string()).collect())
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-9
}

struct Panel {
    mechanism: String,
    alpha: f64,
    lambda2: f64,
}

fn sorted_levels(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup_by(|a, b| close(*a, *b));
    v
}

/// Draws one SVG; returns the document and caption lines.
fn render_figure(records: &[&FitRecord], parameter: &str, title: &str, spec: &PlotSpec) -> (String, Vec<String>) {
    let members = group_members(parameter);
    let recs: Vec<&FitRecord> = records.iter().copied().filter(|r| members.contains(&r.parameter)).collect();
    let mut mechanisms: Vec<String> = recs.iter().filter(|r| r.method.uses_mask()).map(|r| r.mechanism.clone()).collect();
    mechanisms.sort_by_key(|m| ssm_impute::missingness::Mechanism::ALL.iter().position(|x| x.as_str() == m));
    mechanisms.dedup();
    let alphas = sorted_levels(recs.iter().map(|r| r.alpha));
    let lambdas = sorted_levels(recs.iter().map(|r| r.lambda2));
    let mut methods: Vec<Method> = recs.iter().map(|r| r.method).collect();
    methods.sort();
    methods.dedup();
    let combos: Vec<(f64, f64)> = alphas.iter().flat_map(|&a| lambdas.iter().map(move |&l| (a, l))).collect();

    let (pw, ph) = (spec.panel_width, spec.panel_height);
    let (left, top, gap) = (60.0, 50.0, 40.0);
    let width = left + combos.len().max(1) as f64 * (pw + gap);
    let height = top + mechanisms.len().max(1) as f64 * (ph + gap + 30.0);
    let mut svg = String::new();
    let mut captions = Vec::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<text x="{left}" y="24" font-size="14">{title}</text>"#);

    let lim = spec.y_limit;
    for (ri, mech) in mechanisms.iter().enumerate() {
        for (ci, &(alpha, lambda2)) in combos.iter().enumerate() {
            let panel = Panel { mechanism: mech.clone(), alpha, lambda2 };
            let x0 = left + ci as f64 * (pw + gap);
            let y0 = top + ri as f64 * (ph + gap + 30.0);
            let ymap = |v: f64| y0 + (lim - v.clamp(-lim, lim)) / (2.0 * lim) * ph;
            let _ = writeln!(
                svg,
                r#"<rect x="{x0}" y="{y0}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
            );
            let _ = writeln!(
                svg,
                r#"<text x="{x0}" y="{:.1}">{} alpha={} lambda2={}</text>"#,
                y0 - 4.0,
                panel.mechanism,
                panel.alpha,
                panel.lambda2
            );
            for tick in [-lim, 0.0, lim] {
                let y = ymap(tick);
                let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{tick}</text>"#, x0 - 4.0, y + 4.0);
            }
            let _ = writeln!(
                svg,
                r##"<line x1="{x0}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#999" stroke-dasharray="4 3"/>"##,
                x0 + pw,
                ymap(0.0),
                ymap(0.0)
            );
            let slot = pw / methods.len().max(1) as f64;
            for (mi, method) in methods.iter().enumerate() {
                let values: Vec<f64> = recs
                    .iter()
                    .filter(|r| {
                        r.method == *method
                            && close(r.alpha, alpha)
                            && close(r.lambda2, lambda2)
                            && (r.mechanism == *mech || r.mechanism == NO_MECHANISM)
                    })
                    .filter_map(|r| r.replicate().map(|x| x.bias()))
                    .collect();
                let cx = x0 + (mi as f64 + 0.5) * slot;
                let _ = writeln!(
                    svg,
                    r#"<text x="{cx:.1}" y="{:.1}" text-anchor="end" transform="rotate(-35 {cx:.1} {:.1})">{method}</text>"#,
                    y0 + ph + 14.0,
                    y0 + ph + 14.0
                );
                let b = clamp_box(&values, lim);
                if b.n_out_of_range > 0 {
                    captions.push(format!(
                        "{title}: {} alpha={} lambda2={} {method}: {} of {} value(s) outside [-{lim}, {lim}] not drawn",
                        panel.mechanism,
                        panel.alpha,
                        panel.lambda2,
                        b.n_out_of_range,
                        values.len()
                    ));
                }
                let Some(s) = b.stats else { continue };
                let hw = (slot * 0.3).min(18.0);
                let _ = writeln!(
                    svg,
                    r#"<line x1="{cx:.1}" x2="{cx:.1}" y1="{:.1}" y2="{:.1}" stroke="black"/>"#,
                    ymap(s.upper_whisker),
                    ymap(s.q3)
                );
                let _ = writeln!(
                    svg,
                    r#"<line x1="{cx:.1}" x2="{cx:.1}" y1="{:.1}" y2="{:.1}" stroke="black"/>"#,
                    ymap(s.q1),
                    ymap(s.lower_whisker)
                );
                let _ = writeln!(
                    svg,
                    r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#cfe0f3" stroke="black"/>"##,
                    cx - hw,
                    ymap(s.q3),
                    2.0 * hw,
                    ymap(s.q1) - ymap(s.q3)
                );
                if s.median.abs() <= lim {
                    let _ = writeln!(
                        svg,
                        r#"<line x1="{:.1}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="black" stroke-width="2"/>"#,
                        cx - hw,
                        cx + hw,
                        ymap(s.median),
                        ymap(s.median)
                    );
                }
                for v in &b.drawn_outliers {
                    let _ = writeln!(svg, r#"<circle cx="{cx:.1}" cy="{:.1}" r="2" fill="none" stroke="black"/>"#, ymap(*v));
                }
            }
        }
    }
    svg.push_str("</svg>\n");
    (svg, captions)
}

/// Writes one SVG per (parameter, γ, rate) slice plus the caption file.
pub fn emit_plots(records: &[FitRecord], out_dir: &Path, spec: &PlotSpec) -> anyhow::Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let kept: Vec<&FitRecord> = records.iter().filter(|r| !r.failed()).collect();
    let mut written = Vec::new();
    let mut captions = Vec::new();
    for (gamma, rate) in slices(&kept) {
        let recs: Vec<&FitRecord> = kept
            .iter()
            .copied()
            .filter(|r| close(r.gamma, gamma) && (!r.method.uses_mask() || close(r.rate, rate)))
            .collect();
        for p in &spec.parameters {
            let title = format!("bias_{p}_{}", slice_dir_name(gamma, rate));
            let (svg, caps) = render_figure(&recs, p, &title, spec);
            let path = out_dir.join(format!("{title}.svg"));
            fs::write(&path, svg)?;
            written.push(path);
            captions.extend(caps);
        }
    }
    let path = out_dir.join(CAPTIONS_FILE);
    let mut body = captions.join("\n");
    if !body.is_empty() {
        body.push('\n');
    }
    fs::write(&path, body)?;
    written.push(path);
    Ok(written)
}
