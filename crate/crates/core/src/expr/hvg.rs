//! Highly variable gene selection by binned variance stabilization.

use std::cmp::Ordering;

use super::table::{SpotTable, Stage};
use crate::error::{Result, SealError};

/// Per-gene pooled statistics and standardized variance.
#[derive(Debug, Clone)]
pub struct HvgStats {
    pub gene: String,
    pub mean: f64,
    pub variance: f64,
    pub expected_sd: f64,
    pub standardized_variance: f64,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Computes standardized variances over the pooled spots of `tables`.
///
/// Genes are ranked by mean (ties by name) into `n_bins` equal-count bins.
/// The expected standard deviation of a gene is the median standard deviation
/// in its bin; each entry is standardized by it, clipped to `±√N`, and the
/// standardized variance is `Σ z² / (N − 1)`.
pub fn hvg_stats(tables: &[SpotTable], n_bins: usize) -> Result<Vec<HvgStats>> {
    if n_bins < 1 {
        return Err(SealError::InvalidArgument("n_bins must be at least 1".into()));
    }
    let first = tables.first().ok_or_else(|| SealError::Empty("no tables for HVG selection".into()))?;
    for t in tables {
        if t.stage < Stage::Logged {
            return Err(SealError::Stage(format!(
                "select_hvg needs logged data, {} is {}",
                t.sample_id,
                t.stage.as_str()
            )));
        }
        if t.gene_names != first.gene_names {
            return Err(SealError::InvalidArgument(format!("sample {} has a different panel", t.sample_id)));
        }
    }
    let g = first.n_genes();
    let n: usize = tables.iter().map(SpotTable::n_spots).sum();
    let nf = n as f64;

    let mut sums = vec![0.0; g];
    for t in tables {
        for row in t.values.rows() {
            for (j, &v) in row.iter().enumerate() {
                sums[j] += v;
            }
        }
    }
    let means: Vec<f64> = sums.iter().map(|s| s / nf).collect();
    let mut ss = vec![0.0; g];
    for t in tables {
        for row in t.values.rows() {
            for (j, &v) in row.iter().enumerate() {
                let d = v - means[j];
                ss[j] += d * d;
            }
        }
    }
    let denom = if n > 1 { nf - 1.0 } else { 1.0 };
    let variances: Vec<f64> = ss.iter().map(|s| s / denom).collect();
    let sds: Vec<f64> = variances.iter().map(|v| v.sqrt()).collect();

    let mut by_mean: Vec<usize> = (0..g).collect();
    by_mean.sort_by(|&a, &b| {
        means[a]
            .partial_cmp(&means[b])
            .unwrap_or(Ordering::Equal)
            .then_with(|| first.gene_names[a].cmp(&first.gene_names[b]))
    });
    let mut bin_of = vec![0usize; g];
    for (rank, &j) in by_mean.iter().enumerate() {
        bin_of[j] = rank * n_bins / g.max(1);
    }
    let mut expected = vec![0.0; n_bins];
    for (b, e) in expected.iter_mut().enumerate() {
        let mut members: Vec<f64> = (0..g).filter(|&j| bin_of[j] == b).map(|j| sds[j]).collect();
        if !members.is_empty() {
            *e = median(&mut members);
        }
    }

    let clip = nf.sqrt();
    let mut zsq = vec![0.0; g];
    for t in tables {
        for row in t.values.rows() {
            for (j, &v) in row.iter().enumerate() {
                let d = v - means[j];
                let e = expected[bin_of[j]];
                let z = if e > 0.0 {
                    (d / e).clamp(-clip, clip)
                } else if d == 0.0 {
                    0.0
                } else {
                    clip.copysign(d)
                };
                zsq[j] += z * z;
            }
        }
    }
    Ok((0..g)
        .map(|j| HvgStats {
            gene: first.gene_names[j].clone(),
            mean: means[j],
            variance: variances[j],
            expected_sd: expected[bin_of[j]],
            standardized_variance: if n > 1 { zsq[j] / (nf - 1.0) } else { 0.0 },
        })
        .collect())
}

/// Top `n_top` genes by standardized variance, ties broken by name.
pub fn select_hvg(tables: &[SpotTable], n_top: usize, n_bins: usize) -> Result<Vec<String>> {
    let mut stats = hvg_stats(tables, n_bins)?;
    if n_top > stats.len() {
        return Err(SealError::InvalidArgument(format!(
            "n_top {n_top} exceeds panel size {}",
            stats.len()
        )));
    }
    stats.sort_by(|a, b| {
        b.standardized_variance
            .partial_cmp(&a.standardized_variance)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.gene.cmp(&b.gene))
    });
    Ok(stats.into_iter().take(n_top).map(|s| s.gene).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::table::SpotCoord;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn logged(values: Array2<f64>, names: Vec<String>) -> SpotTable {
        let n = values.nrows();
        SpotTable {
            sample_id: "s".into(),
            patient_id: "p".into(),
            organ: "o".into(),
            domain_id: 0,
            barcodes: (0..n).map(|i| format!("b{i}")).collect(),
            coords: vec![
                SpotCoord {
                    row: 0,
                    col: 0,
                    x_um: 0.0,
                    y_um: 0.0
                };
                n
            ],
            values,
            gene_names: names,
            stage: Stage::Logged,
        }
    }

    /// Standardized variance computed gene by gene with no shared state.
    fn oracle(values: &Array2<f64>, names: &[String], n_bins: usize) -> Vec<(String, f64)> {
        let (n, g) = values.dim();
        let stat = |j: usize| {
            let col: Vec<f64> = values.column(j).to_vec();
            let m = col.iter().sum::<f64>() / n as f64;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            (m, v.sqrt(), col)
        };
        let all: Vec<_> = (0..g).map(stat).collect();
        let mut order: Vec<usize> = (0..g).collect();
        order.sort_by(|&a, &b| all[a].0.partial_cmp(&all[b].0).unwrap().then(names[a].cmp(&names[b])));
        let mut out = Vec::new();
        for j in 0..g {
            let rank = order.iter().position(|&x| x == j).unwrap();
            let bin = rank * n_bins / g;
            let mut sds: Vec<f64> = order
                .iter()
                .enumerate()
                .filter(|(r, _)| r * n_bins / g == bin)
                .map(|(_, &k)| all[k].1)
                .collect();
            sds.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let e = if sds.len() % 2 == 1 {
                sds[sds.len() / 2]
            } else {
                (sds[sds.len() / 2 - 1] + sds[sds.len() / 2]) / 2.0
            };
            let clip = (n as f64).sqrt();
            let s: f64 = all[j].2.iter().map(|x| ((x - all[j].0) / e).clamp(-clip, clip).powi(2)).sum();
            out.push((names[j].clone(), s / (n as f64 - 1.0)));
        }
        out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        out
    }

    #[test]
    fn ten_fold_variance_genes_are_the_top_twenty() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (n, g) = (300, 200);
        let names: Vec<String> = (0..g).map(|j| format!("gene{j:03}")).collect();
        let mut values = Array2::zeros((n, g));
        let high: Vec<usize> = (0..20).map(|k| 3 + k * 9).collect();
        let unit = Normal::new(0.0, 1.0).unwrap();
        for j in 0..g {
            let sd = if high.contains(&j) { 10f64.sqrt() } else { 1.0 };
            for i in 0..n {
                values[[i, j]] = 1.0 + 0.05 * j as f64 + sd * unit.sample(&mut rng);
            }
        }
        let t = logged(values.clone(), names.clone());
        let top = select_hvg(&[t], 20, 20).unwrap();
        let ranked = oracle(&values, &names, 20);
        let oracle_top: Vec<String> = ranked.iter().take(20).map(|x| x.0.clone()).collect();
        assert_eq!(top, oracle_top);
        let mut expected: Vec<String> = high.iter().map(|&j| names[j].clone()).collect();
        let mut got = top.clone();
        expected.sort();
        got.sort();
        assert_eq!(got, expected);
    }

    #[test]
    fn constant_gene_is_last_and_identity_when_n_top_is_all() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let values = Array2::from_shape_fn((40, 5), |(_, j)| if j == 2 { 1.0 } else { rng.random_range(0.0..3.0) });
        let names: Vec<String> = ["a", "b", "c", "d", "e"].iter().map(|s| s.to_string()).collect();
        let t = logged(values, names.clone());
        let all = select_hvg(&[t.clone()], 5, 2).unwrap();
        assert_eq!(all.last().unwrap(), "c");
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, names);
        assert!(select_hvg(&[t.clone()], 6, 2).is_err());
        assert!(select_hvg(&[t], 2, 0).is_err());
    }

    #[test]
    fn permutation_invariant_in_gene_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, g) = (50, 12);
        let values = Array2::from_shape_fn((n, g), |(_, j)| rng.random_range(0.0..1.0) * (1 + j % 4) as f64);
        let names: Vec<String> = (0..g).map(|j| format!("g{j}")).collect();
        let base = select_hvg(&[logged(values.clone(), names.clone())], 6, 3).unwrap();
        let perm: Vec<usize> = (0..g).rev().collect();
        let mut pv = Array2::zeros((n, g));
        for (k, &j) in perm.iter().enumerate() {
            pv.column_mut(k).assign(&values.column(j));
        }
        let pn: Vec<String> = perm.iter().map(|&j| names[j].clone()).collect();
        assert_eq!(select_hvg(&[logged(pv, pn)], 6, 3).unwrap(), base);
    }
}
