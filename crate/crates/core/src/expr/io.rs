//! Sample directory format.
//!
//! * `genes.tsv`: one gene name per line.
//! * `spots.tsv`: header line, then `barcode  array_row  array_col  x_um  y_um`.
//! * `counts.tsv`: sparse `spot_index  gene_index  count` triplets, 0-based.
//!
//! A dataset root holds one such directory per sample plus `samples.tsv`
//! (`sample_id  patient_id  organ  domain_id`, with a header line).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::table::{SpotCoord, SpotTable, Stage};
use crate::blob::write_atomic;
use crate::error::{Result, SealError};

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(SealError::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| SealError::io(path, e))
}

fn parse<T: std::str::FromStr>(field: &str, what: &str, path: &Path, line: usize) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| SealError::Malformed(format!("{}:{}: bad {what} '{field}'", path.display(), line + 1)))
}

/// Sample metadata as listed in a dataset's `samples.tsv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMeta {
    pub sample_id: String,
    pub patient_id: String,
    pub organ: String,
    pub domain_id: usize,
}

/// Reads one sample directory. Metadata defaults to the directory name as
/// sample and patient id, organ `unknown`, domain 0.
pub fn load_sample(dir: &Path) -> Result<SpotTable> {
    let genes_path = dir.join("genes.tsv");
    let gene_names: Vec<String> = read_text(&genes_path)?
        .lines()
        .map(|l| l.trim_end_matches('\r').to_string())
        .filter(|l| !l.is_empty())
        .collect();

    let spots_path = dir.join("spots.tsv");
    let spots_text = read_text(&spots_path)?;
    let mut barcodes = Vec::new();
    let mut coords = Vec::new();
    for (ln, line) in spots_text.lines().enumerate().skip(1) {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(SealError::Malformed(format!(
                "{}:{}: expected 5 fields, got {}",
                spots_path.display(),
                ln + 1,
                f.len()
            )));
        }
        barcodes.push(f[0].to_string());
        coords.push(SpotCoord {
            row: parse(f[1], "array_row", &spots_path, ln)?,
            col: parse(f[2], "array_col", &spots_path, ln)?,
            x_um: parse(f[3], "x_um", &spots_path, ln)?,
            y_um: parse(f[4], "y_um", &spots_path, ln)?,
        });
    }

    let n_spots = barcodes.len();
    let n_genes = gene_names.len();
    let counts_path = dir.join("counts.tsv");
    let counts_text = read_text(&counts_path)?;
    let mut values = Array2::<f64>::zeros((n_spots, n_genes));
    for (ln, line) in counts_text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(SealError::Malformed(format!(
                "{}:{}: expected 3 fields, got {}",
                counts_path.display(),
                ln + 1,
                f.len()
            )));
        }
        let spot: usize = parse(f[0], "spot_index", &counts_path, ln)?;
        let gene: usize = parse(f[1], "gene_index", &counts_path, ln)?;
        let count: f64 = parse(f[2], "count", &counts_path, ln)?;
        if spot >= n_spots {
            return Err(SealError::IndexOutOfRange(format!(
                "{}:{}: spot index {spot} >= {n_spots}",
                counts_path.display(),
                ln + 1
            )));
        }
        if gene >= n_genes {
            return Err(SealError::IndexOutOfRange(format!(
                "{}:{}: gene index {gene} >= {n_genes}",
                counts_path.display(),
                ln + 1
            )));
        }
        if !(count >= 0.0) || count.fract() != 0.0 || !count.is_finite() {
            return Err(SealError::Malformed(format!(
                "{}:{}: count {count} is not a non-negative integer",
                counts_path.display(),
                ln + 1
            )));
        }
        values[[spot, gene]] += count;
    }

    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sample".to_string());
    let table = SpotTable {
        sample_id: name.clone(),
        patient_id: name,
        organ: "unknown".into(),
        domain_id: 0,
        barcodes,
        coords,
        values,
        gene_names,
        stage: Stage::RawCounts,
    };
    table.validate()?;
    Ok(table)
}

/// Writes a raw-count sample directory.
pub fn write_sample(table: &SpotTable, dir: &Path) -> Result<()> {
    table.require_stage(Stage::RawCounts, "write_sample")?;
    fs::create_dir_all(dir).map_err(|e| SealError::io(dir, e))?;
    let mut genes = String::new();
    for g in &table.gene_names {
        genes.push_str(g);
        genes.push('\n');
    }
    write_atomic(&dir.join("genes.tsv"), genes.as_bytes())?;

    let mut spots = String::from("barcode\tarray_row\tarray_col\tx_um\ty_um\n");
    for (b, c) in table.barcodes.iter().zip(&table.coords) {
        let _ = writeln!(spots, "{b}\t{}\t{}\t{}\t{}", c.row, c.col, c.x_um, c.y_um);
    }
    write_atomic(&dir.join("spots.tsv"), spots.as_bytes())?;

    let mut counts = String::new();
    for ((i, j), &v) in table.values.indexed_iter() {
        if v != 0.0 {
            let _ = writeln!(counts, "{i}\t{j}\t{}", v as u64);
        }
    }
    write_atomic(&dir.join("counts.tsv"), counts.as_bytes())
}

pub fn read_sample_index(path: &Path) -> Result<Vec<SampleMeta>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(SealError::Malformed(format!(
                "{}:{}: expected 4 fields",
                path.display(),
                ln + 1
            )));
        }
        out.push(SampleMeta {
            sample_id: f[0].to_string(),
            patient_id: f[1].to_string(),
            organ: f[2].to_string(),
            domain_id: parse(f[3], "domain_id", path, ln)?,
        });
    }
    Ok(out)
}

pub fn write_sample_index(path: &Path, metas: &[SampleMeta]) -> Result<()> {
    let mut s = String::from("sample_id\tpatient_id\torgan\tdomain_id\n");
    for m in metas {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", m.sample_id, m.patient_id, m.organ, m.domain_id);
    }
    write_atomic(path, s.as_bytes())
}

/// Loads every sample listed in `<root>/samples.tsv`, applying its metadata.
pub fn load_dataset(root: &Path) -> Result<Vec<SpotTable>> {
    let metas = read_sample_index(&root.join("samples.tsv"))?;
    if metas.is_empty() {
        return Err(SealError::Empty(format!("{} lists no samples", root.display())));
    }
    metas
        .iter()
        .map(|m| {
            let mut t = load_sample(&root.join(&m.sample_id))?;
            t.sample_id = m.sample_id.clone();
            t.patient_id = m.patient_id.clone();
            t.organ = m.organ.clone();
            t.domain_id = m.domain_id;
            Ok(t)
        })
        .collect()
}

/// Two-column `old  new` gene mapping.
pub fn read_mapping(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = read_text(path)?;
    let mut out = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 2 || f[0].is_empty() || f[1].is_empty() {
            return Err(SealError::Malformed(format!(
                "{}:{}: mapping lines need two non-empty TAB-separated columns",
                path.display(),
                ln + 1
            )));
        }
        if out.insert(f[0].to_string(), f[1].to_string()).is_some() {
            return Err(SealError::Malformed(format!(
                "{}:{}: gene {} mapped twice",
                path.display(),
                ln + 1,
                f[0]
            )));
        }
    }
    Ok(out)
}

/// One name per line; blank lines ignored.
pub fn read_gene_list(path: &Path) -> Result<Vec<String>> {
    Ok(read_text(path)?
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect())
}

/// Key-value manifest: `patient_id  split`.
pub fn write_kv(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut s = String::new();
    for (k, v) in pairs {
        let _ = writeln!(s, "{k}\t{v}");
    }
    write_atomic(path, s.as_bytes())
}

pub fn read_kv(path: &Path) -> Result<HashMap<String, String>> {
    let text = read_text(path)?;
    let mut out = HashMap::new();
    for (ln, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('\t')
            .ok_or_else(|| SealError::Malformed(format!("{}:{}: expected key<TAB>value", path.display(), ln + 1)))?;
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

pub fn sample_dir(root: &Path, sample_id: &str) -> PathBuf {
    root.join(sample_id)
}
