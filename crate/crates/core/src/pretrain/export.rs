use std::io::Write;
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::encoders::{RepresentationModel, UserContext};
use crate::ingest::CheckInSequence;
use crate::nn::{device, DTYPE};
use crate::{Error, Result};

/// Deterministic `[N, 2h]` rows `z_s ‖ z_t`, row `i` for `seqs[i]`.
pub fn export_representations(model: &RepresentationModel, seqs: &[CheckInSequence]) -> Result<Tensor> {
    if seqs.is_empty() {
        return Ok(Tensor::zeros((0, model.representation_dim()), DTYPE, &device())?);
    }
    let mut parts = Vec::new();
    for chunk in seqs.chunks(256) {
        let refs: Vec<&CheckInSequence> = chunk.iter().collect();
        parts.push(model.represent(&model.batch(&refs)?, UserContext::Social)?);
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// Sidecar entry describing one exported row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowInfo {
    pub row: usize,
    pub split: String,
    /// Index within its split.
    pub sequence: usize,
    pub user: u64,
    pub start_time: i64,
    pub length: usize,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    rows: usize,
    dim: usize,
    /// Columns `[0, h)` are the spatial part, `[h, 2h)` the temporal part.
    hidden_dim: usize,
    sequences: &'a [RowInfo],
}

/// Writes `matrix` as headerless CSV (one row per sequence) and the row
/// descriptions as JSON.
pub fn write_representations(matrix: &Tensor, rows: &[RowInfo], csv_path: &Path, sidecar_path: &Path) -> Result<()> {
    let (n, dim) = matrix.dims2()?;
    if n != rows.len() {
        return Err(Error::InvalidArgument(format!("{n} rows but {} descriptions", rows.len())));
    }
    let values = matrix.to_vec2::<f64>()?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(csv_path).map_err(|e| Error::io(csv_path, e))?);
    for row in values {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(",")).map_err(|e| Error::io(csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(csv_path, e))?;
    let sidecar = Sidecar {
        rows: n,
        dim,
        hidden_dim: dim / 2,
        sequences: rows,
    };
    std::fs::write(sidecar_path, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(sidecar_path, e))
}
