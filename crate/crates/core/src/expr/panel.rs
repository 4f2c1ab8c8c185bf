use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::table::{SpotTable, Stage};
use crate::blob::write_atomic;
use crate::error::{Result, SealError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Hvg,
    Supplement,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Hvg => "hvg",
            Provenance::Supplement => "supplement",
        }
    }
}

/// Ordered training gene panel. The order is the column order of every
/// downstream matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenePanel {
    pub genes: Vec<String>,
    pub provenance: Vec<Provenance>,
    pub target_size: usize,
}

impl GenePanel {
    pub fn len(&self) -> usize {
        self.genes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.genes.is_empty()
    }

    pub fn index_of(&self, gene: &str) -> Option<usize> {
        self.genes.iter().position(|g| g == gene)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = String::from("gene\tprovenance\n");
        for (g, p) in self.genes.iter().zip(&self.provenance) {
            let _ = writeln!(s, "{g}\t{}", p.as_str());
        }
        write_atomic(path, s.as_bytes())
    }

    pub fn read(path: &Path) -> Result<GenePanel> {
        if !path.exists() {
            return Err(SealError::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| SealError::io(path, e))?;
        let mut genes = Vec::new();
        let mut provenance = Vec::new();
        for (ln, line) in text.lines().enumerate().skip(1) {
            if line.is_empty() {
                continue;
            }
            let (g, p) = line
                .split_once('\t')
                .ok_or_else(|| SealError::Malformed(format!("{}:{}: expected gene<TAB>provenance", path.display(), ln + 1)))?;
            genes.push(g.to_string());
            provenance.push(match p {
                "hvg" => Provenance::Hvg,
                "supplement" => Provenance::Supplement,
                other => return Err(SealError::Malformed(format!("unknown provenance '{other}'"))),
            });
        }
        let target_size = provenance.iter().filter(|p| **p == Provenance::Hvg).count();
        Ok(GenePanel {
            genes,
            provenance,
            target_size,
        })
    }
}

/// Outcome of greedy panel harmonization.
#[derive(Debug, Clone)]
pub struct Harmonized {
    pub shared_genes: Vec<String>,
    pub kept: Vec<SpotTable>,
    pub dropped: Vec<String>,
}

/// Greedy panel overlap selection.
///
/// The reference starts as the largest panel. Samples are visited in
/// descending panel size; a sample is kept when it shares at least
/// `min_overlap` genes with the current reference, which then shrinks to the
/// intersection. Kept samples are returned in input order with their columns
/// restricted to the final reference, in the largest panel's order.
pub fn harmonize_panels(samples: Vec<SpotTable>, min_overlap: usize) -> Result<Harmonized> {
    if samples.is_empty() {
        return Err(SealError::Empty("no samples to harmonize".into()));
    }
    if min_overlap == 0 {
        return Err(SealError::InvalidArgument("min_overlap must be at least 1".into()));
    }
    for s in &samples {
        s.require_stage(Stage::RawCounts, "harmonize_panels")?;
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    // stable: equal-size panels keep input order
    order.sort_by_key(|&i| std::cmp::Reverse(samples[i].n_genes()));

    let largest = &samples[order[0]];
    let reference_order = largest.gene_names.clone();
    let mut reference: HashSet<&str> = largest.gene_names.iter().map(String::as_str).collect();
    let mut keep = vec![false; samples.len()];
    for &i in &order {
        let panel: HashSet<&str> = samples[i].gene_names.iter().map(String::as_str).collect();
        let inter: HashSet<&str> = reference.intersection(&panel).copied().collect();
        if inter.len() >= min_overlap {
            keep[i] = true;
            reference = inter;
        }
    }
    let shared: Vec<String> = reference_order
        .iter()
        .filter(|g| reference.contains(g.as_str()))
        .cloned()
        .collect();

    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (i, s) in samples.into_iter().enumerate() {
        if keep[i] {
            kept.push(s.restrict_to(&shared)?);
        } else {
            dropped.push(s.sample_id);
        }
    }
    if kept.is_empty() {
        return Err(SealError::Empty(format!(
            "every sample was dropped at min_overlap={min_overlap}"
        )));
    }
    Ok(Harmonized {
        shared_genes: shared,
        kept,
        dropped,
    })
}

/// Renames genes; columns that land on the same name are summed.
pub fn rename_genes(table: &SpotTable, mapping: &BTreeMap<String, String>) -> Result<SpotTable> {
    table.require_stage(Stage::RawCounts, "rename_genes")?;
    let mut names: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut target_of = Vec::with_capacity(table.n_genes());
    for g in &table.gene_names {
        let new = mapping.get(g).cloned().unwrap_or_else(|| g.clone());
        let next = names.len();
        let t = *index.entry(new.clone()).or_insert_with(|| {
            names.push(new);
            next
        });
        target_of.push(t);
    }
    let mut values = Array2::zeros((table.n_spots(), names.len()));
    for (src, &dst) in target_of.iter().enumerate() {
        let mut col = values.column_mut(dst);
        col += &table.values.column(src);
    }
    Ok(SpotTable {
        values,
        gene_names: names,
        ..table.clone()
    })
}

fn require_shared_panel(tables: &[SpotTable]) -> Result<()> {
    let first = &tables
        .first()
        .ok_or_else(|| SealError::Empty("no tables".into()))?
        .gene_names;
    for t in &tables[1..] {
        if &t.gene_names != first {
            return Err(SealError::InvalidArgument(format!(
                "sample {} does not share the panel of {}",
                t.sample_id, tables[0].sample_id
            )));
        }
    }
    Ok(())
}

/// Removes genes that are nonzero in fewer than `min_frac` of all pooled spots.
pub fn filter_genes_by_prevalence(tables: &[SpotTable], min_frac: f64) -> Result<Vec<SpotTable>> {
    require_shared_panel(tables)?;
    if !(0.0..=1.0).contains(&min_frac) {
        return Err(SealError::InvalidArgument(format!("min_frac {min_frac} outside [0,1]")));
    }
    for t in tables {
        t.require_stage(Stage::RawCounts, "filter_genes_by_prevalence")?;
    }
    let n_genes = tables[0].n_genes();
    let total: usize = tables.iter().map(SpotTable::n_spots).sum();
    let mut nonzero = vec![0usize; n_genes];
    for t in tables {
        for row in t.values.rows() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    nonzero[j] += 1;
                }
            }
        }
    }
    let keep: Vec<usize> = (0..n_genes)
        .filter(|&j| total > 0 && nonzero[j] as f64 / total as f64 >= min_frac)
        .collect();
    if keep.is_empty() {
        return Err(SealError::Empty(format!("every gene is below prevalence {min_frac}")));
    }
    Ok(tables.iter().map(|t| t.select_genes(&keep)).collect())
}

/// HVG list followed by supplement genes not already present.
pub fn supplement_panel(hvg: &[String], supplement: &[String]) -> GenePanel {
    let mut seen = HashSet::new();
    let mut genes = Vec::new();
    let mut provenance = Vec::new();
    for g in hvg {
        if seen.insert(g.clone()) {
            genes.push(g.clone());
            provenance.push(Provenance::Hvg);
        }
    }
    let target_size = genes.len();
    for g in supplement {
        if seen.insert(g.clone()) {
            genes.push(g.clone());
            provenance.push(Provenance::Supplement);
        }
    }
    GenePanel {
        genes,
        provenance,
        target_size,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::table::SpotCoord;

    pub(crate) fn table(id: &str, genes: &[&str], values: Vec<Vec<f64>>) -> SpotTable {
        let n = values.len();
        let g = genes.len();
        let flat: Vec<f64> = values.into_iter().flatten().collect();
        SpotTable {
            sample_id: id.into(),
            patient_id: id.into(),
            organ: "x".into(),
            domain_id: 0,
            barcodes: (0..n).map(|i| format!("b{i}")).collect(),
            coords: (0..n)
                .map(|i| SpotCoord {
                    row: 0,
                    col: 2 * i as i64,
                    x_um: 0.0,
                    y_um: 0.0,
                })
                .collect(),
            values: Array2::from_shape_vec((n, g), flat).unwrap(),
            gene_names: genes.iter().map(|s| s.to_string()).collect(),
            stage: Stage::RawCounts,
        }
    }

    #[test]
    fn harmonize_drops_disjoint_panel() {
        let a = table("a", &["A", "B", "C", "D"], vec![vec![1.0, 2.0, 3.0, 4.0]]);
        let b = table("b", &["C", "A", "B"], vec![vec![30.0, 10.0, 20.0]]);
        let c = table("c", &["X", "Y"], vec![vec![1.0, 1.0]]);
        let h = harmonize_panels(vec![a, b, c], 3).unwrap();
        assert_eq!(h.shared_genes, vec!["A", "B", "C"]);
        assert_eq!(h.dropped, vec!["c"]);
        assert_eq!(h.kept.len(), 2);
        assert_eq!(h.kept[1].values.row(0).to_vec(), vec![10.0, 20.0, 30.0]);
        for k in &h.kept {
            assert_eq!(k.gene_names, h.shared_genes);
        }
    }

    #[test]
    fn harmonize_single_sample_is_identity() {
        let a = table("a", &["A", "B"], vec![vec![1.0, 2.0]]);
        let h = harmonize_panels(vec![a.clone()], 1).unwrap();
        assert_eq!(h.shared_genes, a.gene_names);
        assert!(h.dropped.is_empty());
        assert_eq!(h.kept[0], a);
    }

    #[test]
    fn harmonize_errors() {
        assert!(matches!(harmonize_panels(vec![], 1), Err(SealError::Empty(_))));
        let a = table("a", &["A", "B"], vec![vec![1.0, 2.0]]);
        assert!(matches!(harmonize_panels(vec![a], 5000), Err(SealError::Empty(_))));
    }

    #[test]
    fn harmonize_min_overlap_threshold() {
        let big: Vec<String> = (0..6000).map(|i| format!("G{i}")).collect();
        let small: Vec<String> = (0..4999).map(|i| format!("G{i}")).collect();
        let okay: Vec<String> = (0..5000).map(|i| format!("G{i}")).collect();
        let mk = |id: &str, genes: &[String]| {
            let refs: Vec<&str> = genes.iter().map(String::as_str).collect();
            table(id, &refs, vec![vec![1.0; genes.len()]])
        };
        let h = harmonize_panels(vec![mk("big", &big), mk("small", &small), mk("ok", &okay)], 5000).unwrap();
        // 'ok' (5000) is visited before 'small' (4999); afterwards the reference has 5000 genes
        assert_eq!(h.dropped, vec!["small"]);
        assert_eq!(h.shared_genes.len(), 5000);
    }

    #[test]
    fn rename_cases() {
        let t = table("a", &["ENSG1", "KRAS"], vec![vec![1.0, 5.0]]);
        let m: BTreeMap<String, String> = [("ENSG1".to_string(), "TP53".to_string())].into();
        let r = rename_genes(&t, &m).unwrap();
        assert_eq!(r.gene_names, vec!["TP53", "KRAS"]);
        assert_eq!(r.values, t.values);

        let t = table("a", &["ENSG1", "ENSG2"], vec![vec![1.0, 2.0]]);
        let m: BTreeMap<String, String> = [
            ("ENSG1".to_string(), "TP53".to_string()),
            ("ENSG2".to_string(), "TP53".to_string()),
        ]
        .into();
        let r = rename_genes(&t, &m).unwrap();
        assert_eq!(r.gene_names, vec!["TP53"]);
        assert_eq!(r.values.row(0).to_vec(), vec![3.0]);

        let r = rename_genes(&t, &BTreeMap::new()).unwrap();
        assert_eq!(r, t);
    }

    #[test]
    fn prevalence_filter() {
        let mut rows = vec![vec![1.0, 1.0]; 20];
        for r in rows.iter_mut().skip(1) {
            r[1] = 0.0;
        }
        let t = table("a", &["common", "rare"], rows);
        let out = filter_genes_by_prevalence(&[t.clone()], 0.10).unwrap();
        assert_eq!(out[0].gene_names, vec!["common"]);
        let out = filter_genes_by_prevalence(&[t.clone()], 0.0).unwrap();
        assert_eq!(out[0].gene_names, t.gene_names);
        let z = table("z", &["a"], vec![vec![0.0]; 3]);
        assert!(matches!(filter_genes_by_prevalence(&[z], 0.1), Err(SealError::Empty(_))));
    }

    #[test]
    fn prevalence_is_pooled_across_tables() {
        let a = table("a", &["g"], vec![vec![1.0], vec![0.0]]);
        let b = table("b", &["g"], vec![vec![0.0]; 8]);
        // 1/10 pooled, exactly at the threshold
        let out = filter_genes_by_prevalence(&[a.clone(), b.clone()], 0.10).unwrap();
        assert_eq!(out[1].gene_names, vec!["g"]);
        assert!(filter_genes_by_prevalence(&[a, b], 0.11).is_err());
    }

    #[test]
    fn supplement_dedupes() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let p = supplement_panel(&s(&["A", "B"]), &s(&["B", "C"]));
        assert_eq!(p.genes, s(&["A", "B", "C"]));
        assert_eq!(p.provenance, vec![Provenance::Hvg, Provenance::Hvg, Provenance::Supplement]);
        let p = supplement_panel(&s(&["A", "B"]), &[]);
        assert_eq!(p.genes, s(&["A", "B"]));
    }
}
