//! Hexagonal spot adjacency and neighborhood smoothing.
//!
//! Visium array coordinates place a spot's six neighbors at `(r, c±2)` and
//! `(r±1, c±1)`; alternating rows are offset by one column.

use std::collections::HashMap;

use ndarray::{Array2, Axis, Zip};

use super::table::{SpotTable, Stage};
use crate::error::{Result, SealError};

const OFFSETS: [(i64, i64); 6] = [(0, -2), (0, 2), (-1, -1), (-1, 1), (1, -1), (1, 1)];

#[derive(Debug, Clone, PartialEq)]
pub struct HexLattice {
    pub neighbors: Vec<Vec<usize>>,
    pub source_sample: String,
}

impl HexLattice {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn is_symmetric(&self) -> bool {
        self.neighbors
            .iter()
            .enumerate()
            .all(|(i, ns)| ns.iter().all(|&j| j != i && j < self.len() && self.neighbors[j].contains(&i)))
    }
}

pub fn build_hex_adjacency(table: &SpotTable) -> Result<HexLattice> {
    let mut at: HashMap<(i64, i64), usize> = HashMap::with_capacity(table.n_spots());
    for (i, c) in table.coords.iter().enumerate() {
        if at.insert((c.row, c.col), i).is_some() {
            return Err(SealError::Duplicate(format!(
                "array position ({}, {}) in {}",
                c.row, c.col, table.sample_id
            )));
        }
    }
    let neighbors = table
        .coords
        .iter()
        .map(|c| {
            OFFSETS
                .iter()
                .filter_map(|(dr, dc)| at.get(&(c.row + dr, c.col + dc)).copied())
                .collect()
        })
        .collect();
    Ok(HexLattice {
        neighbors,
        source_sample: table.sample_id.clone(),
    })
}

/// Averages each spot with the mean of its on-tissue neighbors:
/// `out = (x + mean(neighbors)) / 2`. Spots without neighbors are unchanged.
///
/// Neighbor rows are accumulated slot by slot over the whole matrix, in the
/// same order as a per-spot loop over each neighbor list.
pub fn smooth_local(table: &SpotTable, lattice: &HexLattice) -> Result<SpotTable> {
    table.require_stage(Stage::Logged, "smooth_local")?;
    if lattice.len() != table.n_spots() {
        return Err(SealError::DimensionMismatch(format!(
            "lattice has {} spots, table {} has {}",
            lattice.len(),
            table.sample_id,
            table.n_spots()
        )));
    }
    let x = &table.values;
    let n = x.nrows();
    let max_deg = lattice.neighbors.iter().map(Vec::len).max().unwrap_or(0);
    let mut sum = Array2::<f64>::zeros(x.dim());
    for slot in 0..max_deg {
        let idx: Vec<usize> = (0..n).map(|i| lattice.neighbors[i].get(slot).copied().unwrap_or(i)).collect();
        let has: Vec<bool> = (0..n).map(|i| lattice.neighbors[i].len() > slot).collect();
        let gathered = x.select(Axis(0), &idx);
        for (i, (mut srow, grow)) in sum.rows_mut().into_iter().zip(gathered.rows()).enumerate() {
            if has[i] {
                srow += &grow;
            }
        }
    }
    let mut out = table.clone();
    for (i, mut row) in out.values.rows_mut().into_iter().enumerate() {
        let deg = lattice.neighbors[i].len();
        if deg == 0 {
            continue;
        }
        let d = deg as f64;
        Zip::from(&mut row)
            .and(&sum.row(i))
            .for_each(|o, &s| *o = (*o + s / d) / 2.0);
    }
    out.stage = Stage::Smoothed;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::table::SpotCoord;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(rows: i64, per_row: i64, genes: usize, fill: impl Fn(usize, usize) -> f64) -> SpotTable {
        let mut coords = Vec::new();
        for r in 0..rows {
            for k in 0..per_row {
                coords.push(SpotCoord {
                    row: r,
                    col: 2 * k + (r % 2),
                    x_um: 0.0,
                    y_um: 0.0,
                });
            }
        }
        let n = coords.len();
        SpotTable {
            sample_id: "s".into(),
            patient_id: "p".into(),
            organ: "o".into(),
            domain_id: 0,
            barcodes: (0..n).map(|i| format!("b{i}")).collect(),
            coords,
            values: Array2::from_shape_fn((n, genes), |(i, j)| fill(i, j)),
            gene_names: (0..genes).map(|j| format!("g{j}")).collect(),
            stage: Stage::Logged,
        }
    }

    /// Per-spot double loop.
    fn naive(table: &SpotTable, lat: &HexLattice) -> Array2<f64> {
        let x = &table.values;
        let mut out = x.clone();
        for i in 0..x.nrows() {
            let ns = &lat.neighbors[i];
            if ns.is_empty() {
                continue;
            }
            for g in 0..x.ncols() {
                let mut s = 0.0;
                for &j in ns {
                    s += x[[j, g]];
                }
                let ctx = s / ns.len() as f64;
                out[[i, g]] = (x[[i, g]] + ctx) / 2.0;
            }
        }
        out
    }

    #[test]
    fn neighbor_counts() {
        let t = grid(5, 5, 1, |_, _| 0.0);
        let lat = build_hex_adjacency(&t).unwrap();
        assert!(lat.is_symmetric());
        // row 2, k=2 is interior
        assert_eq!(lat.neighbors[2 * 5 + 2].len(), 6);
        assert!(lat.neighbors[0].len() < 6);
        let single = grid(1, 1, 1, |_, _| 0.0);
        assert!(build_hex_adjacency(&single).unwrap().neighbors[0].is_empty());
        let mut dup = grid(1, 2, 1, |_, _| 0.0);
        dup.coords[1] = dup.coords[0];
        assert!(build_hex_adjacency(&dup).is_err());
    }

    #[test]
    fn smoothing_examples() {
        let t = grid(3, 3, 1, |_, _| 1.0);
        let lat = build_hex_adjacency(&t).unwrap();
        let s = smooth_local(&t, &lat).unwrap();
        assert!(s.values.iter().all(|&v| v == 1.0));
        assert_eq!(s.stage, Stage::Smoothed);

        let t = grid(3, 3, 1, |i, _| if i == 4 { 0.0 } else { 2.0 });
        let lat = build_hex_adjacency(&t).unwrap();
        assert_eq!(lat.neighbors[4].len(), 6);
        let s = smooth_local(&t, &lat).unwrap();
        assert_eq!(s.values[[4, 0]], 1.0);

        let single = grid(1, 1, 2, |_, j| j as f64 + 0.5);
        let lat = build_hex_adjacency(&single).unwrap();
        assert_eq!(smooth_local(&single, &lat).unwrap().values, single.values);
    }

    #[test]
    fn vectorized_matches_naive_loop_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut t = grid(9, 9, 5, |_, _| 0.0);
        t.values.mapv_inplace(|_| rng.random_range(0.0..5.0));
        // knock out a few spots so edge cases occur inside the grid
        let keep: Vec<usize> = (0..t.n_spots()).filter(|i| i % 7 != 3).collect();
        let t = t.select_spots(&keep);
        let lat = build_hex_adjacency(&t).unwrap();
        let fast = smooth_local(&t, &lat).unwrap();
        let slow = naive(&t, &lat);
        for (a, b) in fast.values.iter().zip(slow.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn size_mismatch() {
        let t = grid(2, 2, 1, |_, _| 0.0);
        let lat = build_hex_adjacency(&grid(1, 1, 1, |_, _| 0.0)).unwrap();
        assert!(matches!(smooth_local(&t, &lat), Err(SealError::DimensionMismatch(_))));
    }

    proptest! {
        #[test]
        fn output_within_neighborhood_range(seed in any::<u64>(), rows in 1i64..6, per in 1i64..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = grid(rows, per, 2, |_, _| 0.0);
            t.values.mapv_inplace(|_| rng.random_range(-3.0..3.0));
            let lat = build_hex_adjacency(&t).unwrap();
            prop_assert!(lat.is_symmetric());
            let s = smooth_local(&t, &lat).unwrap();
            for i in 0..t.n_spots() {
                for g in 0..2 {
                    let mut lo = t.values[[i, g]];
                    let mut hi = lo;
                    for &j in &lat.neighbors[i] {
                        lo = lo.min(t.values[[j, g]]);
                        hi = hi.max(t.values[[j, g]]);
                    }
                    let v = s.values[[i, g]];
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }
}
