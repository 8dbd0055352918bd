//! Artificial-input probes of a trained tokenizer and their reporting:
//! low/mid/high embeddings for numerical features, per-code embeddings for
//! categorical features, a quantitative correlation-recovery report, and
//! CSV/SVG scatter output for the t-SNE map.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tokenizer::{FeatureKind, FeatureSchema, Tokenizer};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Level {
    Low,
    Mid,
    High,
    /// Categorical code.
    Code(usize),
}

impl Level {
    pub fn label(&self) -> String {
        match self {
            Level::Low => "low".into(),
            Level::Mid => "mid".into(),
            Level::High => "high".into(),
            Level::Code(c) => format!("c{c}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbePoint {
    pub feature: String,
    pub level: Level,
    pub vector: Vec<f64>,
}

/// Three artificial inputs per numerical feature: the embeddings of
/// standardized values −3, 0 and +3, i.e. `−3·w+b`, `b`, `3·w+b`.
pub fn probe_numerical(store: &ParamStore, schema: &FeatureSchema) -> Result<Vec<ProbePoint>> {
    let mut out = Vec::new();
    for f in &schema.features {
        if f.kind != FeatureKind::Numerical {
            continue;
        }
        let w = store.get(&Tokenizer::weight_name(f))?.data();
        let b = store.get(&Tokenizer::bias_name(f))?.data();
        let at = |x: f64| -> Vec<f64> {
            w.iter().zip(b).map(|(wi, bi)| x * wi + bi).collect()
        };
        out.push(ProbePoint {
            feature: f.name.clone(),
            level: Level::Low,
            vector: at(-3.0),
        });
        out.push(ProbePoint {
            feature: f.name.clone(),
            level: Level::Mid,
            vector: b.to_vec(),
        });
        out.push(ProbePoint {
            feature: f.name.clone(),
            level: Level::High,
            vector: at(3.0),
        });
    }
    Ok(out)
}

/// One probe per (categorical feature, code): the lookup row plus bias.
pub fn probe_categorical(store: &ParamStore, schema: &FeatureSchema) -> Result<Vec<ProbePoint>> {
    let mut out = Vec::new();
    for f in &schema.features {
        let card = match f.kind {
            FeatureKind::Categorical => f.cardinality.unwrap(),
            FeatureKind::Numerical => continue,
        };
        let w = store.get(&Tokenizer::weight_name(f))?;
        let m = w.shape()[1];
        let b = store.get(&Tokenizer::bias_name(f))?.data();
        for c in 0..card {
            let row = &w.data()[c * m..(c + 1) * m];
            out.push(ProbePoint {
                feature: f.name.clone(),
                level: Level::Code(c),
                vector: row.iter().zip(b).map(|(wi, bi)| wi + bi).collect(),
            });
        }
    }
    Ok(out)
}

/// All probes, numerical then categorical, schema order within each kind.
pub fn probe_all(store: &ParamStore, schema: &FeatureSchema) -> Result<Vec<ProbePoint>> {
    let mut out = probe_numerical(store, schema)?;
    out.extend(probe_categorical(store, schema)?);
    Ok(out)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairCosine {
    pub a: String,
    pub b: String,
    pub cosine: f64,
}

/// Direction-cosine ranking of planted feature pairs against all
/// numerical pairs, plus the mid-level cluster check.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    /// All numerical feature pairs, sorted by cosine, descending.
    pub pairs: Vec<PairCosine>,
    /// 1-based rank of each planted pair within `pairs`.
    pub planted_ranks: Vec<(String, String, usize)>,
    /// Mean pairwise distance among mid-level probe vectors.
    pub mid_mean_distance: f64,
    /// Mean pairwise distance among all numerical probe vectors.
    pub all_mean_distance: f64,
}

impl CorrelationReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "pair cosines (descending):");
        for p in &self.pairs {
            let _ = writeln!(out, "  {:<6} {:<6} {:+.4}", p.a, p.b, p.cosine);
        }
        let _ = writeln!(out, "planted pair ranks (of {}):", self.pairs.len());
        for (a, b, r) in &self.planted_ranks {
            let _ = writeln!(out, "  {a:<6} {b:<6} #{r}");
        }
        let _ = writeln!(
            out,
            "mid-level mean distance {:.4} vs all-point {:.4}",
            self.mid_mean_distance, self.all_mean_distance
        );
        out
    }
}

/// Build the report from a tokenizer store. `planted` lists feature-name
/// pairs the generator correlated; order within a pair is ignored.
pub fn correlation_report(
    store: &ParamStore,
    schema: &FeatureSchema,
    planted: &[(String, String)],
) -> Result<CorrelationReport> {
    let points = probe_numerical(store, schema)?;
    let names: Vec<&str> = schema
        .features
        .iter()
        .filter(|f| f.kind == FeatureKind::Numerical)
        .map(|f| f.name.as_str())
        .collect();
    // direction of increasing value: high − low = 6w
    let mut directions = Vec::with_capacity(names.len());
    for chunk in points.chunks(3) {
        let low = &chunk[0].vector;
        let high = &chunk[2].vector;
        directions.push(
            high.iter()
                .zip(low)
                .map(|(h, l)| h - l)
                .collect::<Vec<f64>>(),
        );
    }

    let mut pairs = Vec::new();
    for i in 0..names.len() {
        for j in (i + 1)..names.len() {
            pairs.push(PairCosine {
                a: names[i].to_string(),
                b: names[j].to_string(),
                cosine: cosine(&directions[i], &directions[j]),
            });
        }
    }
    pairs.sort_by(|x, y| y.cosine.partial_cmp(&x.cosine).unwrap());

    let mut planted_ranks = Vec::new();
    for (a, b) in planted {
        let rank = pairs
            .iter()
            .position(|p| {
                (p.a == *a && p.b == *b) || (p.a == *b && p.b == *a)
            })
            .ok_or_else(|| {
                Error::Config(format!("planted pair ({a}, {b}) has no numerical match"))
            })?;
        planted_ranks.push((a.clone(), b.clone(), rank + 1));
    }

    let mids: Vec<&Vec<f64>> = points
        .iter()
        .filter(|p| p.level == Level::Mid)
        .map(|p| &p.vector)
        .collect();
    let all: Vec<&Vec<f64>> = points.iter().map(|p| &p.vector).collect();
    let mean_dist = |set: &[&Vec<f64>]| -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..set.len() {
            for j in (i + 1)..set.len() {
                sum += euclidean(set[i], set[j]);
                count += 1;
            }
        }
        sum / count as f64
    };

    Ok(CorrelationReport {
        planted_ranks,
        mid_mean_distance: mean_dist(&mids),
        all_mean_distance: mean_dist(&all),
        pairs,
    })
}

// ── Scatter output ─────────────────────────────────────────────────────

/// Color palette indexed by feature position; wraps for wide schemas.
const PALETTE: [&str; 13] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
    "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#637939", "#8c6d31",
];

fn feature_order(points: &[ProbePoint]) -> Vec<String> {
    let mut names = Vec::new();
    for p in points {
        if !names.contains(&p.feature) {
            names.push(p.feature.clone());
        }
    }
    names
}

pub fn scatter_csv(points: &[ProbePoint], coords: &[[f64; 2]]) -> Result<String> {
    if points.len() != coords.len() {
        return Err(Error::Contract(format!(
            "{} points but {} coordinates",
            points.len(),
            coords.len()
        )));
    }
    let mut out = String::from("name,level,x,y\n");
    for (p, c) in points.iter().zip(coords) {
        let _ = writeln!(out, "{},{},{},{}", p.feature, p.level.label(), c[0], c[1]);
    }
    Ok(out)
}

fn marker(level: &Level, x: f64, y: f64, color: &str) -> String {
    let r = 5.0;
    match level {
        Level::Mid | Level::Code(_) => format!(
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r}" fill="{color}"/>"#
        ),
        Level::Low => format!(
            r#"<path d="M {:.2} {:.2} L {:.2} {:.2} L {:.2} {:.2} Z" fill="{color}"/>"#,
            x - r,
            y - r,
            x + r,
            y - r,
            x,
            y + r
        ),
        Level::High => format!(
            r#"<path d="M {:.2} {:.2} L {:.2} {:.2} L {:.2} {:.2} Z" fill="{color}"/>"#,
            x - r,
            y + r,
            x + r,
            y + r,
            x,
            y - r
        ),
    }
}

pub fn scatter_svg(points: &[ProbePoint], coords: &[[f64; 2]]) -> Result<String> {
    if points.len() != coords.len() {
        return Err(Error::Contract(format!(
            "{} points but {} coordinates",
            points.len(),
            coords.len()
        )));
    }
    for (i, c) in coords.iter().enumerate() {
        if !c[0].is_finite() || !c[1].is_finite() {
            return Err(Error::Numeric(format!("coordinate {i} is non-finite")));
        }
    }
    let names = feature_order(points);
    let (width, height, pad) = (640.0, 480.0, 40.0);
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for c in coords {
        min_x = min_x.min(c[0]);
        max_x = max_x.max(c[0]);
        min_y = min_y.min(c[1]);
        max_y = max_y.max(c[1]);
    }
    let span_x = (max_x - min_x).max(1e-12);
    let span_y = (max_y - min_y).max(1e-12);
    let sx = |x: f64| pad + (x - min_x) / span_x * (width - 2.0 * pad);
    let sy = |y: f64| height - pad - (y - min_y) / span_y * (height - 2.0 * pad);

    let mut out = String::new();
    out.push_str(r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    out.push('\n');
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(
        out,
        r#"<rect width="{width}" height="{height}" fill="white"/>"#
    );
    for (p, c) in points.iter().zip(coords) {
        let fi = names.iter().position(|n| *n == p.feature).unwrap();
        let color = PALETTE[fi % PALETTE.len()];
        let _ = writeln!(
            out,
            "<g><title>{} {}</title>{}</g>",
            p.feature,
            p.level.label(),
            marker(&p.level, sx(c[0]), sy(c[1]), color)
        );
    }
    // legend: one row per feature
    for (fi, name) in names.iter().enumerate() {
        let color = PALETTE[fi % PALETTE.len()];
        let y = 14.0 + 14.0 * fi as f64;
        let _ = writeln!(
            out,
            r#"<circle cx="10" cy="{:.2}" r="4" fill="{color}"/><text x="20" y="{:.2}" font-size="11" font-family="sans-serif">{name}</text>"#,
            y,
            y + 4.0
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Write both scatter artifacts; re-emission with identical inputs is
/// byte-identical.
pub fn emit_scatter(
    points: &[ProbePoint],
    coords: &[[f64; 2]],
    csv_path: &Path,
    svg_path: &Path,
) -> Result<()> {
    std::fs::write(csv_path, scatter_csv(points, coords)?)?;
    std::fs::write(svg_path, scatter_svg(points, coords)?)?;
    Ok(())
}
