use super::table::{SpotTable, Stage};
use crate::error::{Result, SealError};

/// Count-normalization target used when none is configured.
///
/// The source recipe writes the constant as `×1e-4`; the common toolchain
/// convention is a per-spot total of `1e4`, which is what this default uses.
pub const DEFAULT_TARGET_SUM: f64 = 1e4;

/// Removes spots whose counts are all zero.
pub fn drop_empty_spots(table: &SpotTable) -> Result<SpotTable> {
    table.require_stage(Stage::RawCounts, "drop_empty_spots")?;
    let keep: Vec<usize> = table
        .values
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(_, r)| r.iter().any(|&v| v != 0.0))
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return Err(SealError::Empty(format!("every spot of {} is empty", table.sample_id)));
    }
    if keep.len() == table.n_spots() {
        return Ok(table.clone());
    }
    Ok(table.select_spots(&keep))
}

/// Scales each spot so that its counts sum to `target_sum`.
pub fn count_normalize(table: &SpotTable, target_sum: f64) -> Result<SpotTable> {
    table.require_stage(Stage::RawCounts, "count_normalize")?;
    if !(target_sum > 0.0) {
        return Err(SealError::InvalidArgument(format!("target_sum {target_sum} must be positive")));
    }
    let mut out = table.clone();
    for (i, mut row) in out.values.rows_mut().into_iter().enumerate() {
        let s: f64 = row.sum();
        if s == 0.0 {
            return Err(SealError::InvalidArgument(format!(
                "spot {} of {} has zero total; drop empty spots first",
                table.barcodes[i], table.sample_id
            )));
        }
        row.mapv_inplace(|v| v / s * target_sum);
    }
    out.stage = Stage::Normalized;
    Ok(out)
}

pub fn log1p_transform(table: &SpotTable) -> Result<SpotTable> {
    table.require_stage(Stage::Normalized, "log1p_transform")?;
    if let Some(v) = table.values.iter().find(|v| **v < 0.0) {
        return Err(SealError::InvalidArgument(format!(
            "negative entry {v} in {}",
            table.sample_id
        )));
    }
    let mut out = table.clone();
    out.values.mapv_inplace(f64::ln_1p);
    out.stage = Stage::Logged;
    Ok(out)
}
