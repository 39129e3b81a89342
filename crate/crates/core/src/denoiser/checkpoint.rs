//! Checkpoint directories: `header.json` with hyperparameters and schedule,
//! plus one AIDA `f64` file per weight tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tape::Tensor;
use super::tsc::{TscConfig, TscParams};
use crate::data::{load_aida, save_aida, AidaArray, ArrayData};
use crate::diffusion::{make_schedule, NoiseSchedule};
use crate::error::{AidError, Result};

const FORMAT: &str = "aid-tsc";
const FORMAT_VERSION: u32 = 1;
const HEADER: &str = "header.json";

/// Trained weights together with the schedule they were trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: TscParams,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Checkpoint {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.params.config().steps, self.beta_min, self.beta_max)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    model: TscConfig,
    beta_min: f64,
    beta_max: f64,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    file: String,
    rows: usize,
    cols: usize,
}

/// Writes `ckpt` into directory `dir`, creating it if its parent exists.
pub fn save_checkpoint(dir: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let dir = dir.as_ref();
    if !dir.exists() {
        fs::create_dir(dir)?;
    }
    let p = &ckpt.params;
    let mut tensors = Vec::new();
    for (name, t) in p.names().iter().zip(p.tensors()) {
        let file = format!("{name}.aida");
        let arr = AidaArray::new(
            vec![t.rows() as u64, t.cols() as u64],
            ArrayData::F64(t.data().to_vec()),
        )?;
        save_aida(dir.join(&file), &arr)?;
        tensors.push(Entry {
            name: name.clone(),
            file,
            rows: t.rows(),
            cols: t.cols(),
        });
    }
    let header = Header {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        model: p.config().clone(),
        beta_min: ckpt.beta_min,
        beta_max: ckpt.beta_max,
        tensors,
    };
    let text = serde_json::to_string_pretty(&header)
        .map_err(|e| AidError::config(format!("cannot encode checkpoint header: {e}")))?;
    fs::write(dir.join(HEADER), text + "\n")?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(HEADER))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| {
        AidError::format(
            e.column() as u64,
            format!("checkpoint header line {}: {e}", e.line()),
        )
    })?;
    if header.format != FORMAT || header.version != FORMAT_VERSION {
        return Err(AidError::format(
            0,
            format!(
                "unsupported checkpoint {} v{}",
                header.format, header.version
            ),
        ));
    }
    header.model.validate()?;
    let specs = header.model.tensor_specs();
    if specs.len() != header.tensors.len() {
        return Err(AidError::format(
            0,
            "checkpoint tensor list does not match model",
        ));
    }
    let mut tensors = Vec::with_capacity(specs.len());
    for ((name, shape), e) in specs.iter().zip(&header.tensors) {
        if *name != e.name || *shape != (e.rows, e.cols) {
            return Err(AidError::format(
                0,
                format!(
                    "checkpoint entry `{}` does not match model tensor `{name}`",
                    e.name
                ),
            ));
        }
        if e.file.contains(['/', '\\']) {
            return Err(AidError::format(
                0,
                format!("bad tensor file name `{}`", e.file),
            ));
        }
        let arr = load_aida(dir.join(&e.file))?;
        if arr.dims != [e.rows as u64, e.cols as u64] {
            return Err(AidError::format(
                16,
                format!("`{}` stored with dims {:?}", e.file, arr.dims),
            ));
        }
        tensors.push(Tensor::from_vec(e.rows, e.cols, arr.as_f64()?.to_vec())?);
    }
    let params = TscParams::from_tensors(header.model, tensors)?;
    let ckpt = Checkpoint {
        params,
        beta_min: header.beta_min,
        beta_max: header.beta_max,
    };
    ckpt.schedule()?;
    Ok(ckpt)
}
