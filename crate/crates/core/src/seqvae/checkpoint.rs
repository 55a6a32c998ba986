use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Dims, Standardizer, TdcivModel};
use super::{ModelConfig, SeqVaeError};
use crate::diffmath::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    version: u32,
    config: ModelConfig,
    dims: Dims,
    standardizer: Standardizer,
    params: Vec<Param>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Param {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// JSON document with a version, the configuration, sizes, standardization
/// and every named parameter tensor.
pub fn write_checkpoint(model: &TdcivModel, out: impl Write) -> Result<(), SeqVaeError> {
    if !model.is_finite() {
        return Err(SeqVaeError::Checkpoint("refusing to write non-finite parameters".into()));
    }
    let params = model
        .dims
        .layout()
        .into_iter()
        .zip(&model.params)
        .map(|((name, rows, cols), t)| Param { name, rows, cols, data: t.data().to_vec() })
        .collect();
    let doc = Document {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        dims: model.dims,
        standardizer: model.standardizer.clone(),
        params,
    };
    let mut out = out;
    serde_json::to_writer_pretty(&mut out, &doc)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn read_checkpoint(input: impl Read) -> Result<TdcivModel, SeqVaeError> {
    let doc: Document = serde_json::from_reader(input)?;
    if doc.version != CHECKPOINT_VERSION {
        return Err(SeqVaeError::Checkpoint(format!(
            "unsupported version {} (expected {CHECKPOINT_VERSION})",
            doc.version
        )));
    }
    doc.config.validate()?;
    let layout = doc.dims.layout();
    if layout.len() != doc.params.len() {
        return Err(SeqVaeError::Checkpoint(format!(
            "expected {} parameter tensors, found {}",
            layout.len(),
            doc.params.len()
        )));
    }
    let mut params = Vec::with_capacity(layout.len());
    for ((name, rows, cols), p) in layout.into_iter().zip(doc.params) {
        if p.name != name || p.rows != rows || p.cols != cols || p.data.len() != rows * cols {
            return Err(SeqVaeError::Checkpoint(format!(
                "parameter `{}` ({}x{}, {} values) does not match `{name}` ({rows}x{cols})",
                p.name,
                p.rows,
                p.cols,
                p.data.len()
            )));
        }
        params.push(Tensor::new(rows, cols, p.data));
    }
    let s = &doc.standardizer;
    let t = s.horizon();
    if s.outcome_scale.len() != t
        || s.input_mean.len() != t * doc.dims.input
        || s.input_scale.len() != t * doc.dims.input
    {
        return Err(SeqVaeError::Checkpoint("standardizer shape does not match the model".into()));
    }
    Ok(TdcivModel { config: doc.config, dims: doc.dims, standardizer: doc.standardizer, params })
}

pub fn save_checkpoint(model: &TdcivModel, path: &Path) -> Result<(), SeqVaeError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TdcivModel, SeqVaeError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
