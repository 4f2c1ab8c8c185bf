use std::collections::HashSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SealError};

/// Processing stage of a [`SpotTable`]. Transitions only move forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    RawCounts,
    Normalized,
    Logged,
    Smoothed,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::RawCounts => "raw_counts",
            Stage::Normalized => "normalized",
            Stage::Logged => "logged",
            Stage::Smoothed => "smoothed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpotCoord {
    pub row: i64,
    pub col: i64,
    pub x_um: f64,
    pub y_um: f64,
}

/// Dense spot × gene expression for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SpotTable {
    pub sample_id: String,
    pub patient_id: String,
    pub organ: String,
    pub domain_id: usize,
    pub barcodes: Vec<String>,
    pub coords: Vec<SpotCoord>,
    pub values: Array2<f64>,
    pub gene_names: Vec<String>,
    pub stage: Stage,
}

impl SpotTable {
    pub fn n_spots(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_genes(&self) -> usize {
        self.values.ncols()
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        if self.barcodes.len() != self.n_spots() || self.coords.len() != self.n_spots() {
            return Err(SealError::DimensionMismatch(format!(
                "{}: {} barcodes / {} coords for {} spots",
                self.sample_id,
                self.barcodes.len(),
                self.coords.len(),
                self.n_spots()
            )));
        }
        if self.gene_names.len() != self.n_genes() {
            return Err(SealError::DimensionMismatch(format!(
                "{}: {} gene names for {} columns",
                self.sample_id,
                self.gene_names.len(),
                self.n_genes()
            )));
        }
        let mut seen = HashSet::new();
        for b in &self.barcodes {
            if !seen.insert(b.as_str()) {
                return Err(SealError::Duplicate(format!("barcode {b} in sample {}", self.sample_id)));
            }
        }
        for &v in &self.values {
            if !v.is_finite() {
                return Err(SealError::Malformed(format!("non-finite value in {}", self.sample_id)));
            }
            if self.stage == Stage::RawCounts && (v < 0.0 || v.fract() != 0.0) {
                return Err(SealError::Malformed(format!(
                    "raw count {v} is not a non-negative integer in {}",
                    self.sample_id
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn require_stage(&self, stage: Stage, op: &str) -> Result<()> {
        if self.stage != stage {
            return Err(SealError::Stage(format!(
                "{op} needs stage {}, sample {} is {}",
                stage.as_str(),
                self.sample_id,
                self.stage.as_str()
            )));
        }
        Ok(())
    }

    /// Keeps the given columns, in the given order.
    pub fn select_genes(&self, cols: &[usize]) -> SpotTable {
        let mut values = Array2::zeros((self.n_spots(), cols.len()));
        for (j, &c) in cols.iter().enumerate() {
            values.column_mut(j).assign(&self.values.column(c));
        }
        SpotTable {
            values,
            gene_names: cols.iter().map(|&c| self.gene_names[c].clone()).collect(),
            ..self.clone_meta()
        }
    }

    /// Keeps the given rows, in the given order.
    pub fn select_spots(&self, rows: &[usize]) -> SpotTable {
        let mut values = Array2::zeros((rows.len(), self.n_genes()));
        for (i, &r) in rows.iter().enumerate() {
            values.row_mut(i).assign(&self.values.row(r));
        }
        SpotTable {
            barcodes: rows.iter().map(|&r| self.barcodes[r].clone()).collect(),
            coords: rows.iter().map(|&r| self.coords[r]).collect(),
            values,
            ..self.clone_meta()
        }
    }

    /// Reorders columns to `genes`; every name must exist.
    pub fn restrict_to(&self, genes: &[String]) -> Result<SpotTable> {
        let cols = genes
            .iter()
            .map(|g| {
                self.gene_names.iter().position(|n| n == g).ok_or_else(|| {
                    SealError::InvalidArgument(format!("gene {g} not in panel of {}", self.sample_id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.select_genes(&cols))
    }

    fn clone_meta(&self) -> SpotTable {
        SpotTable {
            sample_id: self.sample_id.clone(),
            patient_id: self.patient_id.clone(),
            organ: self.organ.clone(),
            domain_id: self.domain_id,
            barcodes: self.barcodes.clone(),
            coords: self.coords.clone(),
            values: Array2::zeros((0, 0)),
            gene_names: self.gene_names.clone(),
            stage: self.stage,
        }
    }
}
