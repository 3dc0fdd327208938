//! Checkpoint files: a TOML header describing every stored tensor, followed
//! by the tensor data as little-endian IEEE-754 doubles.
//!
//! ```text
//! survfuse-checkpoint 1\n
//! header-bytes <N>\n
//! <N bytes of TOML>
//! <payload: Σ rows·cols little-endian f64, in header order>
//! ```
//!
//! The header carries the run configuration, fold, epoch bookkeeping, gene
//! names, module membership and a `[[tensors]]` table (name and shape) for
//! the gene scaler and every model parameter. Loading checks the payload
//! length and rebuilds the network to confirm that names and shapes fit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use survfuse_core::cv::Checkpoint;
use survfuse_core::encoders::{GeneScaler, ModuleMembership};
use survfuse_core::{ParamStore, RunConfig, Tensor};

use crate::error::{Error, Result};

const MAGIC: &str = "survfuse-checkpoint 1";
const SCALER_MEAN: &str = "scaler.mean";
const SCALER_SCALE: &str = "scaler.scale";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct Header {
    fold_id: usize,
    epoch: usize,
    epochs_trained: usize,
    best_validation_loss: f64,
    gene_names: Vec<String>,
    modules: Vec<Vec<usize>>,
    config: RunConfig,
    tensors: Vec<TensorEntry>,
}

/// A checkpoint together with the gene order its scaler was fitted on.
#[derive(Clone, Debug, PartialEq)]
pub struct SavedCheckpoint {
    pub checkpoint: Checkpoint,
    pub gene_names: Vec<String>,
}

pub fn encode(checkpoint: &Checkpoint, gene_names: &[String]) -> Result<Vec<u8>> {
    let genes = checkpoint.scaler.mean.len();
    if gene_names.len() != genes {
        return Err(Error::Usage(format!(
            "{} gene names for a scaler over {genes} genes",
            gene_names.len()
        )));
    }
    let mut tensors = vec![
        TensorEntry {
            name: SCALER_MEAN.into(),
            shape: [1, genes],
        },
        TensorEntry {
            name: SCALER_SCALE.into(),
            shape: [1, genes],
        },
    ];
    let mut payload: Vec<f64> = checkpoint.scaler.mean.iter().chain(&checkpoint.scaler.scale).copied().collect();
    for (_, name, t) in checkpoint.params.iter() {
        tensors.push(TensorEntry {
            name: name.to_owned(),
            shape: [t.rows(), t.cols()],
        });
        payload.extend_from_slice(t.data());
    }
    let header = Header {
        fold_id: checkpoint.fold_id,
        epoch: checkpoint.epoch,
        epochs_trained: checkpoint.epochs_trained,
        best_validation_loss: checkpoint.best_validation_loss,
        gene_names: gene_names.to_vec(),
        modules: checkpoint.membership.modules.clone(),
        config: checkpoint.config.clone(),
        tensors,
    };
    let text = toml::to_string(&header).map_err(|e| Error::Usage(format!("cannot serialise checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(text.len() + 64 + payload.len() * 8);
    out.extend_from_slice(format!("{MAGIC}\nheader-bytes {}\n", text.len()).as_bytes());
    out.extend_from_slice(text.as_bytes());
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn take_line<'a>(bytes: &'a [u8], path: &Path) -> Result<(&'a str, &'a [u8])> {
    let end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "truncated checkpoint preamble"))?;
    let line = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::format(path, "preamble is not UTF-8"))?;
    Ok((line, &bytes[end + 1..]))
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<SavedCheckpoint> {
    let (magic, rest) = take_line(bytes, path)?;
    if magic != MAGIC {
        return Err(Error::format(path, format!("not a checkpoint: expected {MAGIC:?}, found {magic:?}")));
    }
    let (len_line, rest) = take_line(rest, path)?;
    let header_len: usize = len_line
        .strip_prefix("header-bytes ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::format(path, format!("bad header length line {len_line:?}")))?;
    if rest.len() < header_len {
        return Err(Error::format(path, "truncated header"));
    }
    let text = std::str::from_utf8(&rest[..header_len]).map_err(|_| Error::format(path, "header is not UTF-8"))?;
    let header: Header = toml::from_str(text).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    let payload = &rest[header_len..];

    let expected: usize = header.tensors.iter().map(|t| t.shape[0] * t.shape[1]).sum();
    if payload.len() != expected * 8 {
        return Err(Error::format(
            path,
            format!("payload holds {} bytes, header describes {} doubles", payload.len(), expected),
        ));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut take = |n: usize| values.by_ref().take(n).collect::<Vec<f64>>();

    let mut entries = header.tensors.into_iter();
    let mut scaler_part = |name: &str| -> Result<Vec<f64>> {
        match entries.next() {
            Some(e) if e.name == name && e.shape == [1, header.gene_names.len()] => Ok(take(e.shape[1])),
            _ => Err(Error::format(path, format!("expected {name} with one entry per gene"))),
        }
    };
    let scaler = GeneScaler {
        mean: scaler_part(SCALER_MEAN)?,
        scale: scaler_part(SCALER_SCALE)?,
    };
    let mut params = ParamStore::new();
    for e in entries {
        let t = Tensor::matrix(e.shape[0], e.shape[1], take(e.shape[0] * e.shape[1]))
            .map_err(|err| Error::format(path, format!("tensor {}: {err}", e.name)))?;
        params.add(e.name, t);
    }
    let membership = ModuleMembership::new(header.modules, header.gene_names.len())
        .map_err(|e| Error::format(path, format!("module membership: {e}")))?;
    let checkpoint = Checkpoint {
        config: header.config,
        fold_id: header.fold_id,
        membership,
        scaler,
        params,
        epoch: header.epoch,
        epochs_trained: header.epochs_trained,
        best_validation_loss: header.best_validation_loss,
    };
    checkpoint.model().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(SavedCheckpoint {
        checkpoint,
        gene_names: header.gene_names,
    })
}

pub fn save(path: &Path, checkpoint: &Checkpoint, gene_names: &[String]) -> Result<()> {
    fs::write(path, encode(checkpoint, gene_names)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<SavedCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
