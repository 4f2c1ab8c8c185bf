//! Image-to-gene and gene-to-image retrieval.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::{Array1, ArrayView1, Axis};

use super::metrics::metric_pcc;
use crate::blob::write_atomic;
use crate::error::{Result, SealError};
use crate::expr::{SpotTable, Stage};
use seal_autodiff::Mat;

pub const DEFAULT_K: usize = 50;
pub const EXPAND_PCC: f64 = 0.3;
pub const QUERY_PERCENTILE: f64 = 75.0;

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Cosine similarity of `q` against every row of `refs`; errors on zero norms.
pub fn cosine_scores(q: ArrayView1<f64>, refs: &Mat) -> Result<Vec<f64>> {
    if q.len() != refs.ncols() {
        return Err(SealError::DimensionMismatch(format!(
            "query width {} vs reference width {}",
            q.len(),
            refs.ncols()
        )));
    }
    let qn = norm(q);
    if qn == 0.0 {
        return Err(SealError::Numerical("query embedding has zero norm".into()));
    }
    refs.rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let rn = norm(r);
            if rn == 0.0 {
                Err(SealError::Numerical(format!("reference embedding {i} has zero norm")))
            } else {
                Ok((q.dot(&r) / (qn * rn)).clamp(-1.0, 1.0))
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightMode {
    /// Similarities used as written, negative values included.
    #[default]
    Verbatim,
    /// Negative similarities clamped to zero.
    ClampZero,
}

/// Similarity-weighted average of the panels of the top-`k` references.
pub fn i2g_retrieve(query: ArrayView1<f64>, ref_embeddings: &Mat, ref_panels: &Mat, k: usize, mode: WeightMode) -> Result<Array1<f64>> {
    let n = ref_embeddings.nrows();
    if n == 0 {
        return Err(SealError::Empty("no reference embeddings".into()));
    }
    if ref_panels.nrows() != n {
        return Err(SealError::DimensionMismatch(format!(
            "{n} reference embeddings but {} panels",
            ref_panels.nrows()
        )));
    }
    if k == 0 || k > n {
        return Err(SealError::InvalidArgument(format!("K = {k} must be in 1..={n}")));
    }
    let sims = cosine_scores(query, ref_embeddings)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    let top = &order[..k];
    let weights: Vec<f64> = top
        .iter()
        .map(|&i| match mode {
            WeightMode::Verbatim => sims[i],
            WeightMode::ClampZero => sims[i].max(0.0),
        })
        .collect();
    let total: f64 = weights.iter().sum();
    if total.abs() < 1e-12 {
        return Err(SealError::Numerical(format!("retrieval weights sum to {total:e}")));
    }
    let mut out = Array1::zeros(ref_panels.ncols());
    for (&i, w) in top.iter().zip(&weights) {
        out.scaled_add(*w / total, &ref_panels.row(i));
    }
    Ok(out)
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MolecularQuery {
    pub active_genes: Vec<String>,
    pub expanded_genes: Vec<String>,
    pub query_vector: Array1<f64>,
    pub query_embedding: Array1<f64>,
    pub kept_spots: Vec<usize>,
}

/// Builds an in-silico profile from a set of active genes.
///
/// A gene joins the expanded set when its pooled PCC with any active gene
/// exceeds 0.3. Spots are kept when at least half of the expanded genes
/// are above that gene's 75th percentile.
pub fn g2i_build_query<F>(active: &[String], table: &SpotTable, embed: F) -> Result<MolecularQuery>
where
    F: FnOnce(&Mat) -> Result<Mat>,
{
    if table.stage != Stage::Smoothed {
        return Err(SealError::Stage(format!(
            "g2i_build_query needs smoothed data, {} is {}",
            table.sample_id,
            table.stage.as_str()
        )));
    }
    if active.is_empty() {
        return Err(SealError::InvalidArgument("no active genes".into()));
    }
    let idx_of = |g: &String| {
        table
            .gene_names
            .iter()
            .position(|n| n == g)
            .ok_or_else(|| SealError::InvalidArgument(format!("active gene {g} not in panel")))
    };
    let active_idx: Vec<usize> = active.iter().map(idx_of).collect::<Result<_>>()?;
    let x = &table.values;
    let cols: Vec<Vec<f64>> = (0..x.ncols()).map(|j| x.column(j).to_vec()).collect();
    let mut expanded: BTreeSet<usize> = active_idx.iter().copied().collect();
    for j in 0..x.ncols() {
        if expanded.contains(&j) {
            continue;
        }
        let mut best = f64::NEG_INFINITY;
        for &a in &active_idx {
            best = best.max(metric_pcc(&cols[j], &cols[a])?.value);
        }
        if best > EXPAND_PCC {
            expanded.insert(j);
        }
    }
    let thresholds: Vec<(usize, f64)> = expanded.iter().map(|&j| (j, percentile(&cols[j], QUERY_PERCENTILE))).collect();
    let need = thresholds.len() as f64 * 0.5;
    let kept: Vec<usize> = (0..x.nrows())
        .filter(|&i| thresholds.iter().filter(|(j, t)| x[[i, *j]] > *t).count() as f64 >= need)
        .collect();
    if kept.is_empty() {
        return Err(SealError::Empty("no spot passes the query filter".into()));
    }
    let sub = x.select(Axis(0), &kept);
    let emb = embed(&sub)?;
    if emb.nrows() != kept.len() {
        return Err(SealError::DimensionMismatch(format!(
            "embedder returned {} rows for {} spots",
            emb.nrows(),
            kept.len()
        )));
    }
    Ok(MolecularQuery {
        active_genes: active.to_vec(),
        expanded_genes: expanded.iter().map(|&j| table.gene_names[j].clone()).collect(),
        query_vector: sub.mean_axis(Axis(0)).expect("non-empty"),
        query_embedding: emb.mean_axis(Axis(0)).expect("non-empty"),
        kept_spots: kept,
    })
}

/// Cosine similarity of the query embedding to every patch.
pub fn g2i_similarity_map(query: &MolecularQuery, patch_embeddings: &Mat) -> Result<Vec<f64>> {
    cosine_scores(query.query_embedding.view(), patch_embeddings)
}

pub fn write_similarity_tsv(path: &Path, coords: &[(f64, f64)], scores: &[f64]) -> Result<()> {
    if coords.len() != scores.len() {
        return Err(SealError::DimensionMismatch(format!("{} coords for {} scores", coords.len(), scores.len())));
    }
    let mut s = String::from("x\ty\tscore\n");
    for ((x, y), v) in coords.iter().zip(scores) {
        let _ = writeln!(s, "{x}\t{y}\t{v}");
    }
    write_atomic(path, s.as_bytes())
}

/// Rasterizes scores on the grid spanned by the distinct coordinates; a
/// blue (−1) to red (+1) ramp, black where no patch falls.
pub fn write_similarity_png(path: &Path, coords: &[(f64, f64)], scores: &[f64], cell_px: u32) -> Result<()> {
    if coords.len() != scores.len() || coords.is_empty() {
        return Err(SealError::DimensionMismatch(format!("{} coords for {} scores", coords.len(), scores.len())));
    }
    let axis = |f: fn(&(f64, f64)) -> f64| {
        let mut v: Vec<f64> = coords.iter().map(f).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    };
    let xs = axis(|c| c.0);
    let ys = axis(|c| c.1);
    let cell = cell_px.max(1);
    let (w, h) = (xs.len() as u32 * cell, ys.len() as u32 * cell);
    let mut buf = vec![0u8; (w * h * 3) as usize];
    for ((x, y), s) in coords.iter().zip(scores) {
        let cx = xs.partition_point(|v| v < x) as u32;
        let cy = ys.partition_point(|v| v < y) as u32;
        let t = ((s.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round() as u8;
        for py in cy * cell..(cy + 1) * cell {
            for px in cx * cell..(cx + 1) * cell {
                let o = ((py * w + px) * 3) as usize;
                buf[o] = t;
                buf[o + 1] = 0;
                buf[o + 2] = 255 - t;
            }
        }
    }
    let file = File::create(path).map_err(|e| SealError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w, h);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| SealError::Malformed(format!("png header: {e}")))?;
    writer
        .write_image_data(&buf)
        .map_err(|e| SealError::Malformed(format!("png data: {e}")))?;
    Ok(())
}
