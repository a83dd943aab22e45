//! Flat binary parameter container with a versioned header.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! [0..8)    magic  b"SAFETUN1"
//! [8..12)   format version (u32), currently 1
//! [12..16)  manifest length in bytes (u32)
//! [16..+n)  manifest: JSON (model config, adapter placement, freeze state, epoch,
//!           kind, and one entry per parameter: name, rows, cols, trainable, byte
//!           offset into the data section)
//! [..end)   data section: f64 buffers in manifest order, little-endian
//! ```
//!
//! Two kinds share the format: `full` holds every parameter; `snapshot` holds only
//! adapters and the head (what training mutates), small enough to write every epoch.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamKind};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SAFETUN1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Full,
    Snapshot,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct ManifestEntry {
    name: String,
    rows: usize,
    cols: usize,
    trainable: bool,
    offset: u64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub epoch: usize,
    pub config: ModelConfig,
    pub placement: Vec<bool>,
    pub frozen: Vec<bool>,
    pub freeze_epoch: Vec<Option<usize>>,
}

/// A parsed checkpoint: metadata plus raw little-endian parameter bytes.
#[derive(Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    trainable: Vec<bool>,
    buffers: Vec<Vec<u8>>,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), source }
}

impl Checkpoint {
    fn collect(model: &Model, meta: CheckpointMeta, snapshot_only: bool) -> Checkpoint {
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut trainable = Vec::new();
        let mut buffers = Vec::new();
        for (pid, m) in model.store.metas.iter().enumerate() {
            if snapshot_only && matches!(model.kind_of(pid), ParamKind::Base) {
                continue;
            }
            names.push(m.name.clone());
            shapes.push((m.rows, m.cols));
            trainable.push(m.trainable);
            let t = &model.store.values[pid];
            let mut raw = Vec::with_capacity(t.data.len() * 8);
            for v in &t.data {
                raw.extend_from_slice(&v.to_le_bytes());
            }
            buffers.push(raw);
        }
        Checkpoint { meta, names, shapes, trainable, buffers }
    }

    /// Every parameter, for end-of-run artifacts and exact resumption of analysis.
    pub fn full(model: &Model, frozen: &[bool], freeze_epoch: &[Option<usize>], epoch: usize) -> Checkpoint {
        let meta = CheckpointMeta {
            kind: CheckpointKind::Full,
            epoch,
            config: model.cfg.clone(),
            placement: model.placement.clone(),
            frozen: frozen.to_vec(),
            freeze_epoch: freeze_epoch.to_vec(),
        };
        Checkpoint::collect(model, meta, false)
    }

    /// Adapters and head only — everything training can change.
    pub fn snapshot(model: &Model, frozen: &[bool], freeze_epoch: &[Option<usize>], epoch: usize) -> Checkpoint {
        let meta = CheckpointMeta {
            kind: CheckpointKind::Snapshot,
            epoch,
            config: model.cfg.clone(),
            placement: model.placement.clone(),
            frozen: frozen.to_vec(),
            freeze_epoch: freeze_epoch.to_vec(),
        };
        Checkpoint::collect(model, meta, true)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.names.len());
        let mut offset = 0u64;
        for i in 0..self.names.len() {
            entries.push(ManifestEntry {
                name: self.names[i].clone(),
                rows: self.shapes[i].0,
                cols: self.shapes[i].1,
                trainable: self.trainable[i],
                offset,
            });
            offset += self.buffers[i].len() as u64;
        }
        #[derive(serde::Serialize)]
        struct Manifest<'a> {
            meta: &'a CheckpointMeta,
            params: &'a [ManifestEntry],
        }
        let manifest = serde_json::to_vec(&Manifest { meta: &self.meta, params: &entries })
            .map_err(|e| Error::Checkpoint(format!("manifest serialization failed: {e}")))?;
        let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
        let mut write = |bytes: &[u8]| f.write_all(bytes).map_err(|e| io_err(path, e));
        write(MAGIC)?;
        write(&VERSION.to_le_bytes())?;
        write(&(manifest.len() as u32).to_le_bytes())?;
        write(&manifest)?;
        for buf in &self.buffers {
            write(buf)?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let mut f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| io_err(path, e))?;
        let corrupt = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
        if bytes.len() < 16 || &bytes[0..8] != MAGIC {
            return Err(corrupt("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(corrupt(&format!("unsupported format version {version}")));
        }
        let mlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + mlen {
            return Err(corrupt("truncated manifest"));
        }
        #[derive(serde::Deserialize)]
        struct Manifest {
            meta: CheckpointMeta,
            params: Vec<ManifestEntry>,
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + mlen])
            .map_err(|e| corrupt(&format!("manifest parse failed: {e}")))?;
        let data = &bytes[16 + mlen..];
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut trainable = Vec::new();
        let mut buffers = Vec::new();
        for e in &manifest.params {
            let len = e.rows * e.cols * 8;
            let start = e.offset as usize;
            if start + len > data.len() {
                return Err(corrupt(&format!("parameter {} overruns the data section", e.name)));
            }
            names.push(e.name.clone());
            shapes.push((e.rows, e.cols));
            trainable.push(e.trainable);
            buffers.push(data[start..start + len].to_vec());
        }
        Ok(Checkpoint { meta: manifest.meta, names, shapes, trainable, buffers })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Raw little-endian bytes of one parameter, for bit-exactness comparisons.
    pub fn raw(&self, name: &str) -> Option<&[u8]> {
        self.names.iter().position(|n| n == name).map(|i| self.buffers[i].as_slice())
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("no parameter named {name}")))?;
        let (rows, cols) = self.shapes[i];
        let data: Vec<f64> = self.buffers[i]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::from_vec(rows, cols, data)
    }

    /// Reconstruct a full model. Only valid for `full` checkpoints.
    pub fn to_model(&self) -> Result<Model> {
        if self.meta.kind != CheckpointKind::Full {
            return Err(Error::Checkpoint("cannot rebuild a model from a snapshot".into()));
        }
        let mut model =
            Model::shape_only(&self.meta.config, &self.meta.placement, &self.meta.frozen)?;
        self.apply_to(&mut model)?;
        for meta in &model.store.metas {
            if self.raw(&meta.name).is_none() {
                return Err(Error::Checkpoint(format!(
                    "full checkpoint is missing parameter {}",
                    meta.name
                )));
            }
        }
        Ok(model)
    }

    /// Copy every contained parameter into `model`, which must match in config.
    pub fn apply_to(&self, model: &mut Model) -> Result<()> {
        let want = serde_json::to_string(&model.cfg).expect("config serializes");
        let have = serde_json::to_string(&self.meta.config).expect("config serializes");
        if want != have {
            return Err(Error::Checkpoint(
                "checkpoint's model configuration differs from the target model".into(),
            ));
        }
        for (i, name) in self.names.iter().enumerate() {
            let pid = model
                .store
                .pid(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            let m = &model.store.metas[pid];
            if (m.rows, m.cols) != self.shapes[i] {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape [{}x{}] here but [{}x{}] in the checkpoint",
                    m.rows, m.cols, self.shapes[i].0, self.shapes[i].1
                )));
            }
            model.store.values[pid] = self.tensor(name)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            vocab_size: 9,
            max_seq: 5,
            n_classes: 2,
            lora_rank: 2,
            lora_alpha: 4.0,
            lora_dropout: 0.0,
        }
    }

    #[test]
    fn full_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let model = Model::init(&cfg(), 5).unwrap();
        let frozen = vec![true, false];
        let fe = vec![Some(3), None];
        Checkpoint::full(&model, &frozen, &fe, 7).write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back.meta.epoch, 7);
        assert_eq!(back.meta.frozen, frozen);
        assert_eq!(back.meta.freeze_epoch, fe);
        let rebuilt = back.to_model().unwrap();
        for (a, b) in model.store.values.iter().zip(&rebuilt.store.values) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn snapshots_cover_exactly_the_mutable_parameters() {
        let model = Model::init(&cfg(), 5).unwrap();
        let snap = Checkpoint::snapshot(&model, &[false, false], &[None, None], 0);
        for name in snap.names() {
            assert!(
                name.contains("adapter") || name.starts_with("head."),
                "unexpected snapshot entry {name}"
            );
        }
        // 2 layers x 4 adapter matrices + head.w + head.b.
        assert_eq!(snap.names().len(), 2 * 4 + 2);
        // Applying a snapshot restores mutated values.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snap.bin");
        snap.write(&path).unwrap();
        let mut changed = Model::init(&cfg(), 5).unwrap();
        let pid = changed.store.pid("head.w").unwrap();
        changed.store.values[pid].data[0] += 1.0;
        Checkpoint::read(&path).unwrap().apply_to(&mut changed).unwrap();
        let orig = Model::init(&cfg(), 5).unwrap();
        assert_eq!(
            changed.store.values[pid].data[0].to_bits(),
            orig.store.values[pid].data[0].to_bits()
        );
    }

    #[test]
    fn corrupt_and_mismatched_inputs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(Checkpoint::read(&path), Err(Error::Checkpoint(_))));

        let model = Model::init(&cfg(), 5).unwrap();
        let snap = Checkpoint::snapshot(&model, &[false, false], &[None, None], 0);
        let other_cfg = ModelConfig { d_model: 16, d_ff: 24, ..cfg() };
        let mut other = Model::init(&other_cfg, 5).unwrap();
        assert!(snap.apply_to(&mut other).is_err());
        assert!(snap.to_model().is_err(), "snapshots cannot rebuild full models");
    }
}
