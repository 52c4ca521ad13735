//! Checkpoint container.
//!
//! ```text
//! b"AFSCKPT\0" | u32 version | u64 header_len | header (UTF-8 JSON) | f64 LE payload
//! ```
//!
//! The header lists every parameter (name, group, shape) in store order; the
//! payload holds their values back to back as little-endian `f64`, so a load
//! restores the exact bits that were saved.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use affordsplat_core::params::{ParamGroup, ParamStore};
use affordsplat_core::tensor::Tensor;
use affordsplat_core::textmod::Vocabulary;
use affordsplat_core::train::{EpochStats, Model, Stage};
use serde::{Deserialize, Serialize};

use crate::compact::read_framed_header;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"AFSCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub rows: usize,
    pub cols: usize,
}

/// Everything in a checkpoint except the parameter values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub stage: Stage,
    /// Epochs trained in `stage`; with best-model selection this is the
    /// epoch the saved parameters come from.
    pub epoch: usize,
    pub loss_history: Vec<EpochStats>,
    /// Validation mIoU per epoch, when validation ran.
    pub val_history: Vec<Option<f64>>,
    pub dataset_fingerprint: u64,
    pub config: ExperimentConfig,
    pub model: Model,
    pub vocabulary: Vec<String>,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub store: ParamStore,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        stage: Stage,
        epoch: usize,
        loss_history: Vec<EpochStats>,
        val_history: Vec<Option<f64>>,
        dataset_fingerprint: u64,
        config: ExperimentConfig,
        model: Model,
        vocab: &Vocabulary,
        store: ParamStore,
    ) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| ParamEntry { name: p.name.clone(), group: p.group, rows: p.value.rows(), cols: p.value.cols() })
            .collect();
        let header = CheckpointHeader {
            stage,
            epoch,
            loss_history,
            val_history,
            dataset_fingerprint,
            config,
            model,
            vocabulary: vocab.tokens().to_vec(),
            params,
        };
        Self { header, store }
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Ok(Vocabulary::from_tokens(self.header.vocabulary.clone())?)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let json = serde_json::to_vec(&self.header).map_err(|e| Error::format(e.to_string()))?;
        let io = |e: std::io::Error| Error::format(format!("writing checkpoint: {e}"));
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        let mut buf = Vec::with_capacity(self.store.scalar_count() * 8);
        for (_, p) in self.store.iter() {
            for x in p.value.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        w.write_all(&buf).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let header: CheckpointHeader = read_framed_header(&mut r, MAGIC, VERSION, "checkpoint")?;
        let mut store = ParamStore::new();
        let mut buf = Vec::new();
        for e in &header.params {
            buf.resize(e.rows * e.cols * 8, 0);
            r.read_exact(&mut buf).map_err(|_| Error::format(format!("checkpoint payload ends inside '{}'", e.name)))?;
            let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            if store.id(&e.name).is_some() {
                return Err(Error::format(format!("checkpoint repeats parameter '{}'", e.name)));
            }
            store.add(&e.name, e.group, Tensor::from_vec(e.rows, e.cols, data));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| Error::format(e.to_string()))? != 0 {
            return Err(Error::format("checkpoint has trailing bytes after the payload"));
        }
        Ok(Self { header, store })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(f))
    }

    /// Header only, without reading the parameter payload.
    pub fn load_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        read_framed_header(&mut BufReader::new(f), MAGIC, VERSION, "checkpoint")
    }
}
