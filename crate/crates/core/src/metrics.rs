//! Structure metrics relating embedding geometry to signatures.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cosine_matrix, cosine_matrix_of_rows, fractional_ranks, pca_project, pearson, Matrix};
use crate::train::Snapshot;

/// Off-diagonal upper-triangle entries, row-major.
pub fn upper_triangle(m: &Matrix) -> Vec<f64> {
    let n = m.rows();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn check_square(m: &Matrix, op: &'static str) -> Result<usize> {
    if m.rows() != m.cols() {
        return Err(Error::Shape {
            op,
            left: m.shape(),
            right: (m.rows(), m.rows()),
        });
    }
    Ok(m.rows())
}

fn degenerate(e: Error) -> Error {
    match e {
        Error::ZeroVariance(_) => Error::Degenerate("degenerate structure".into()),
        other => other,
    }
}

/// Pearson correlation between pairwise cosines and `|α − α′|` over
/// distinct pairs. Near −1 means similarity falls with distance.
pub fn r_order(cos: &Matrix, values: &[f64]) -> Result<f64> {
    let n = check_square(cos, "r_order")?;
    if n != values.len() {
        return Err(Error::Shape {
            op: "r_order",
            left: cos.shape(),
            right: (values.len(), 1),
        });
    }
    if n < 3 {
        return Err(Error::Empty("r_order needs at least three anchors"));
    }
    let mut dist = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            dist.push((values[i] - values[j]).abs());
        }
    }
    pearson(&upper_triangle(cos), &dist).map_err(degenerate)
}

/// Pearson correlation between the off-diagonal entries of two similarity
/// matrices.
pub fn r_cos(a: &Matrix, b: &Matrix) -> Result<f64> {
    check_square(a, "r_cos")?;
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "r_cos",
            left: a.shape(),
            right: b.shape(),
        });
    }
    pearson(&upper_triangle(a), &upper_triangle(b)).map_err(degenerate)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenAlignment {
    /// Correlation of row `s` of the two similarity matrices, diagonal excluded.
    pub r_d: f64,
    /// Mean of row `s` of the embedding similarity, diagonal excluded.
    pub mean: f64,
}

pub fn per_token_alignment(emb: &Matrix, sig: &Matrix, s: usize) -> Result<TokenAlignment> {
    let n = check_square(emb, "per_token_alignment")?;
    if emb.shape() != sig.shape() {
        return Err(Error::Shape {
            op: "per_token_alignment",
            left: emb.shape(),
            right: sig.shape(),
        });
    }
    if s >= n {
        return Err(Error::UnknownToken(s as u32));
    }
    let row = |m: &Matrix| -> Vec<f64> { (0..n).filter(|&j| j != s).map(|j| m[(s, j)]).collect() };
    let (e, g) = (row(emb), row(sig));
    let mean = e.iter().sum::<f64>() / e.len().max(1) as f64;
    Ok(TokenAlignment {
        r_d: pearson(&e, &g).map_err(degenerate)?,
        mean,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecileBucket {
    /// 1..=10; bucket k holds pairs with `(k−1)/10 ≤ p_emb < k/10`.
    pub decile: usize,
    pub count: usize,
    /// Mean signature percentile; NaN for an empty bucket.
    pub mean: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentCurve {
    pub buckets: Vec<DecileBucket>,
}

impl AlignmentCurve {
    pub fn means(&self) -> Vec<f64> {
        self.buckets.iter().map(|b| b.mean).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "decile,count,mean,q25,median,q75")?;
        for b in &self.buckets {
            writeln!(w, "{},{},{:.6},{:.6},{:.6},{:.6}", b.decile, b.count, b.mean, b.q25, b.median, b.q75)?;
        }
        Ok(())
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Buckets distinct pairs by the percentile of their embedding similarity
/// and summarises the signature-similarity percentile within each bucket.
pub fn percentile_alignment(emb: &Matrix, sig: &Matrix) -> Result<AlignmentCurve> {
    check_square(emb, "percentile_alignment")?;
    if emb.shape() != sig.shape() {
        return Err(Error::Shape {
            op: "percentile_alignment",
            left: emb.shape(),
            right: sig.shape(),
        });
    }
    let pe = fractional_ranks(&upper_triangle(emb));
    let ps = fractional_ranks(&upper_triangle(sig));
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); 10];
    for (e, s) in pe.iter().zip(&ps) {
        let k = ((e * 10.0).floor() as usize).min(9);
        groups[k].push(*s);
    }
    let buckets = groups
        .into_iter()
        .enumerate()
        .map(|(k, mut g)| {
            g.sort_by(f64::total_cmp);
            let mean = if g.is_empty() { f64::NAN } else { g.iter().sum::<f64>() / g.len() as f64 };
            DecileBucket {
                decile: k + 1,
                count: g.len(),
                mean,
                q25: quantile(&g, 0.25),
                median: quantile(&g, 0.5),
                q75: quantile(&g, 0.75),
            }
        })
        .collect();
    Ok(AlignmentCurve { buckets })
}

/// Mean of the off-diagonal entries.
pub fn mean_offdiag(m: &Matrix) -> f64 {
    let v = upper_triangle(m);
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Median of the off-diagonal entries.
pub fn median_offdiag(m: &Matrix) -> f64 {
    let mut v = upper_triangle(m);
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.5)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructurePoint {
    pub epoch: usize,
    /// `None` when the anchor cosines are constant.
    pub r_order: Option<f64>,
    pub mean_cos: f64,
}

/// Anchor-embedding structure of one parameter snapshot.
pub fn anchor_structure(w_e: &Matrix, anchor_ids: &[usize], anchor_values: &[f64]) -> Result<(Option<f64>, f64)> {
    let cos = cosine_matrix(&w_e.select_cols(anchor_ids))?;
    let r = match r_order(&cos, anchor_values) {
        Ok(r) => Some(r),
        Err(Error::Degenerate(_)) => None,
        Err(e) => return Err(e),
    };
    Ok((r, mean_offdiag(&cos)))
}

pub fn structure_timeline(snapshots: &[Snapshot], anchor_ids: &[usize], anchor_values: &[f64]) -> Result<Vec<StructurePoint>> {
    if snapshots.len() < 2 {
        return Err(Error::Empty("structure_timeline needs two snapshots"));
    }
    snapshots
        .iter()
        .map(|s| {
            let (r_order, mean_cos) = anchor_structure(&s.params.w_e, anchor_ids, anchor_values)?;
            Ok(StructurePoint {
                epoch: s.epoch,
                r_order,
                mean_cos,
            })
        })
        .collect()
}

pub fn write_structure_csv<W: Write>(points: &[StructurePoint], mut w: W) -> Result<()> {
    writeln!(w, "epoch,r_order,mean_cos")?;
    for p in points {
        let r = p.r_order.map_or_else(|| "nan".to_string(), |r| format!("{r:.6}"));
        writeln!(w, "{},{},{:.6}", p.epoch, r, p.mean_cos)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RingDiagnostic {
    /// Cosine between the first and last label of the cycle.
    pub wrap_similarity: f64,
    pub median_offdiag: f64,
    /// Correlation of cosine with circular distance over distinct pairs.
    pub circular_r: f64,
    pub passes: bool,
}

/// Checks whether unembedding rows of cyclically ordered labels close into
/// a ring: the two ends must be more similar than a typical pair.
pub fn ring_diagnostic(w_u_rows: &Matrix) -> Result<RingDiagnostic> {
    let n = w_u_rows.rows();
    if n < 3 {
        return Err(Error::Empty("ring diagnostic needs three labels"));
    }
    let cos = cosine_matrix_of_rows(w_u_rows)?;
    let mut circ = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let d = j - i;
            circ.push(d.min(n - d) as f64);
        }
    }
    let wrap = cos[(0, n - 1)];
    let median = median_offdiag(&cos);
    Ok(RingDiagnostic {
        wrap_similarity: wrap,
        median_offdiag: median,
        circular_r: pearson(&upper_triangle(&cos), &circ).map_err(degenerate)?,
        passes: wrap > median,
    })
}

/// Length of the longest subsequence that is monotone in either direction.
pub fn monotone_count(values: &[f64]) -> usize {
    fn longest(values: &[f64], le: impl Fn(f64, f64) -> bool) -> usize {
        let mut best = vec![1usize; values.len()];
        for i in 0..values.len() {
            for j in 0..i {
                if le(values[j], values[i]) {
                    best[i] = best[i].max(best[j] + 1);
                }
            }
        }
        best.into_iter().max().unwrap_or(0)
    }
    longest(values, |a, b| a <= b).max(longest(values, |a, b| a >= b))
}

/// First principal coordinate of each column.
pub fn pca_1d(columns: &Matrix) -> Result<Vec<f64>> {
    Ok(pca_project(columns, 1)?.row(0).to_vec())
}

/// Diverging blue–white–red colour for a value in [−1, 1].
fn diverging(v: f64) -> (u8, u8, u8) {
    let t = v.clamp(-1.0, 1.0);
    let lerp = |a: f64, b: f64, s: f64| (a + (b - a) * s).round() as u8;
    if t < 0.0 {
        let s = -t;
        (lerp(255.0, 33.0, s), lerp(255.0, 102.0, s), lerp(255.0, 172.0, s))
    } else {
        (lerp(255.0, 178.0, t), lerp(255.0, 24.0, t), lerp(255.0, 43.0, t))
    }
}

/// Square heatmap with token-labelled axes. Values are clamped to [−1, 1].
pub fn write_heatmap_svg<W: Write, L: std::fmt::Display>(m: &Matrix, labels: &[L], title: &str, mut w: W) -> Result<()> {
    let n = check_square(m, "heatmap")?;
    if labels.len() != n {
        return Err(Error::Shape {
            op: "heatmap labels",
            left: m.shape(),
            right: (labels.len(), 1),
        });
    }
    let cell = (600 / n.max(1)).clamp(4, 24);
    let margin = 60;
    let size = margin + cell * n + 10;
    let font = (cell as f64 * 0.6).clamp(4.0, 11.0);
    writeln!(w, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{}" font-family="sans-serif">"#, size + 20)?;
    writeln!(w, r#"<text x="{margin}" y="14" font-size="13">{}</text>"#, escape(title))?;
    for i in 0..n {
        for j in 0..n {
            let (r, g, b) = diverging(m[(i, j)]);
            writeln!(
                w,
                r#"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="rgb({r},{g},{b})"/>"#,
                margin + j * cell,
                margin + i * cell
            )?;
        }
    }
    let step = (n / 40).max(1);
    for (k, l) in labels.iter().enumerate().step_by(step) {
        let c = margin + k * cell + cell / 2;
        writeln!(w, r#"<text x="{}" y="{c}" font-size="{font}" text-anchor="end" dominant-baseline="middle">{}</text>"#, margin - 3, escape(&l.to_string()))?;
        writeln!(w, r#"<text x="{c}" y="{}" font-size="{font}" text-anchor="start" transform="rotate(-90 {c} {})">{}</text>"#, margin - 3, margin - 3, escape(&l.to_string()))?;
    }
    writeln!(w, "</svg>")?;
    Ok(())
}

/// Line chart of one or more series sharing an x axis.
pub fn write_line_svg<W: Write>(x: &[f64], series: &[(&str, Vec<f64>)], title: &str, mut w: W) -> Result<()> {
    let (wd, ht, pad) = (640.0, 360.0, 50.0);
    let finite = |v: &f64| v.is_finite();
    let xs: Vec<f64> = x.iter().copied().filter(finite).collect();
    let ys: Vec<f64> = series.iter().flat_map(|(_, s)| s.iter().copied().filter(finite)).collect();
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::Empty("line chart data"));
    }
    let (x0, x1) = (xs.iter().copied().fold(f64::INFINITY, f64::min), xs.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let (y0, y1) = (ys.iter().copied().fold(f64::INFINITY, f64::min), ys.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let sx = |v: f64| pad + (v - x0) / (x1 - x0).max(1e-12) * (wd - 2.0 * pad);
    let sy = |v: f64| ht - pad - (v - y0) / (y1 - y0).max(1e-12) * (ht - 2.0 * pad);
    writeln!(w, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{wd}" height="{ht}" font-family="sans-serif">"#)?;
    writeln!(w, r#"<text x="{pad}" y="20" font-size="13">{}</text>"#, escape(title))?;
    writeln!(w, r#"<rect x="{pad}" y="{pad}" width="{}" height="{}" fill="none" stroke="grey"/>"#, wd - 2.0 * pad, ht - 2.0 * pad)?;
    writeln!(w, r#"<text x="{pad}" y="{}" font-size="10">{x0:.3}</text>"#, ht - pad + 14.0)?;
    writeln!(w, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{x1:.3}</text>"#, wd - pad, ht - pad + 14.0)?;
    writeln!(w, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{y0:.3}</text>"#, pad - 4.0, ht - pad)?;
    writeln!(w, r#"<text x="{}" y="{pad}" font-size="10" text-anchor="end">{y1:.3}</text>"#, pad - 4.0)?;
    const COLORS: [&str; 4] = ["#b2182b", "#2166ac", "#1b7837", "#762a83"];
    for (k, (name, ys)) in series.iter().enumerate() {
        let pts: Vec<String> = x
            .iter()
            .zip(ys)
            .filter(|(a, b)| a.is_finite() && b.is_finite())
            .map(|(a, b)| format!("{:.2},{:.2}", sx(*a), sy(*b)))
            .collect();
        let color = COLORS[k % COLORS.len()];
        writeln!(w, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "))?;
        writeln!(w, r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#, wd - pad - 100.0, pad + 14.0 * (k + 1) as f64, escape(name))?;
    }
    writeln!(w, "</svg>")?;
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
