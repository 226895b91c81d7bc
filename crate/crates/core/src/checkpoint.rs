//! Checkpoint format: a TOML manifest (format version, model config, class
//! names, variant, active mask, provenance, optional trainer section) next to
//! a binary tensor file — 8-byte magic, then per tensor rank and dims as u64
//! little-endian followed by f32 little-endian data. Saving snaps parameters
//! to f32 in place, so a restored model reproduces the saved one bit-exactly.

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Provenance, Variant};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 8] = *b"XPNCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model: ModelConfig,
    variant: Variant,
    class_names: Vec<String>,
    active: Vec<bool>,
    /// Tensor names, in file order.
    params: Vec<String>,
    /// Sparse: only slots with projection provenance.
    #[serde(default)]
    provenance: Vec<ProvenanceEntry>,
    /// Free-form section owned by the trainer (optimizer/loop state).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trainer: Option<toml::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProvenanceEntry {
    slot: usize,
    #[serde(flatten)]
    record: Provenance,
}

/// Round every parameter to f32 precision in place. Idempotent.
pub fn snap_to_f32(model: &mut Model) {
    for e in &mut model.params.entries {
        e.value.mapv_inplace(|v| v as f32 as f64);
    }
}

pub fn write_tensors(path: &Path, tensors: &[(&str, &ArrayD<f64>)]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_u64::<LittleEndian>(tensors.len() as u64)?;
    for (_, t) in tensors {
        w.write_u64::<LittleEndian>(t.ndim() as u64)?;
        for &d in t.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in t.iter() {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensors(path: &Path, expected: usize) -> Result<Vec<ArrayD<f64>>> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic {magic:?}", path.display())));
    }
    let n = r.read_u64::<LittleEndian>()? as usize;
    if n != expected {
        return Err(Error::Checkpoint(format!(
            "{}: {n} tensors in file, manifest lists {expected}",
            path.display()
        )));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let rank = r.read_u64::<LittleEndian>()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("implausible tensor rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.read_u64::<LittleEndian>()? as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.read_f32::<LittleEndian>()? as f64);
        }
        out.push(
            ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| Error::Checkpoint(format!("tensor shape: {e}")))?,
        );
    }
    Ok(out)
}

/// Save the model into `dir` (manifest.toml + tensors.bin), snapping
/// parameters to f32 so a reload is bit-exact against the saved model.
pub fn save(dir: &Path, model: &mut Model, trainer: Option<toml::Value>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    snap_to_f32(model);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: model.config.clone(),
        variant: model.variant,
        class_names: model.class_names.clone(),
        active: model.active.clone(),
        params: model.params.entries.iter().map(|e| e.name.clone()).collect(),
        provenance: model
            .provenance
            .iter()
            .enumerate()
            .filter_map(|(slot, p)| p.clone().map(|record| ProvenanceEntry { slot, record }))
            .collect(),
        trainer,
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest serialization: {e}")))?;
    std::fs::write(dir.join("manifest.toml"), text)?;
    let tensors: Vec<(&str, &ArrayD<f64>)> = model
        .params
        .entries
        .iter()
        .map(|e| (e.name.as_str(), &e.value))
        .collect();
    write_tensors(&dir.join("tensors.bin"), &tensors)
}

/// Load a model (and the trainer section, if present) from `dir`.
pub fn load(dir: &Path) -> Result<(Model, Option<toml::Value>)> {
    let text = std::fs::read_to_string(dir.join("manifest.toml"))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join("manifest.toml").display())))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("manifest parse: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    if manifest.class_names.len() != manifest.model.num_classes {
        return Err(Error::Checkpoint(format!(
            "{} class names for {} classes",
            manifest.class_names.len(),
            manifest.model.num_classes
        )));
    }
    let mut model = Model::new(manifest.model, manifest.variant, manifest.class_names)?;
    if manifest.active.len() != model.active.len() {
        return Err(Error::Checkpoint(format!(
            "active mask length {} != {} prototype slots",
            manifest.active.len(),
            model.active.len()
        )));
    }
    if manifest.params.len() != model.params.entries.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors in manifest, model defines {}",
            manifest.params.len(),
            model.params.entries.len()
        )));
    }
    let tensors = read_tensors(&dir.join("tensors.bin"), manifest.params.len())?;
    for (name, value) in manifest.params.iter().zip(tensors) {
        let idx = model
            .params
            .entries
            .iter()
            .position(|e| &e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor '{name}' in checkpoint")))?;
        let entry = &mut model.params.entries[idx];
        if entry.value.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' shape {:?} does not match model shape {:?}",
                value.shape(),
                entry.value.shape()
            )));
        }
        entry.value = value;
    }
    model.active = manifest.active;
    for entry in manifest.provenance {
        if entry.slot >= model.provenance.len() {
            return Err(Error::Checkpoint(format!(
                "provenance slot {} out of range ({} slots)",
                entry.slot,
                model.provenance.len()
            )));
        }
        model.provenance[entry.slot] = Some(entry.record);
    }
    Ok((model, manifest.trainer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BackboneId;
    use ndarray::{ArrayD, IxDyn};

    fn tiny_model() -> Model {
        let config = ModelConfig {
            num_classes: 2,
            prototypes_per_class: 2,
            feature_dim: 4,
            input_size: (32, 32),
            backbone: BackboneId::SmallCnn,
            backbone_channels: [2, 3, 4, 4],
            seed: 11,
        };
        Model::new(config, Variant::Xprotonet, vec!["a".into(), "b".into()]).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact_after_snap() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny_model();
        m.active[3] = false;
        save(dir.path(), &mut m, None).unwrap();
        let (loaded, trainer) = load(dir.path()).unwrap();
        assert!(trainer.is_none());
        assert_eq!(loaded.active, m.active);
        for (a, b) in loaded.params.entries.iter().zip(&m.params.entries) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.shape(), b.value.shape());
            for (x, y) in a.value.iter().zip(b.value.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{}", a.name);
            }
        }
        // forward pass identical to the saved (snapped) model
        let images = ArrayD::from_shape_fn(IxDyn(&[2, 1, 32, 32]), |i| {
            ((i[0] * 31 + i[2] * 7 + i[3] * 3) % 17) as f64 / 17.0
        });
        let a = m.forward(&images).unwrap();
        let b = loaded.forward(&images).unwrap();
        for (x, y) in a.probabilities.iter().zip(b.probabilities.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn trainer_section_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny_model();
        let extra: toml::Value = toml::from_str("epoch = 7\nstage = \"joint\"").unwrap();
        save(dir.path(), &mut m, Some(extra)).unwrap();
        let (_, trainer) = load(dir.path()).unwrap();
        let t = trainer.unwrap();
        assert_eq!(t.get("epoch").and_then(|v| v.as_integer()), Some(7));
        assert_eq!(t.get("stage").and_then(|v| v.as_str()), Some("joint"));
    }

    #[test]
    fn unknown_format_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny_model();
        save(dir.path(), &mut m, None).unwrap();
        let path = dir.path().join("manifest.toml");
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("format_version = 1", "format_version = 99");
        std::fs::write(&path, text).unwrap();
        let Err(err) = load(dir.path()) else { panic!("expected version error") };
        assert!(err.to_string().contains("format version 99"));
    }

    #[test]
    fn shape_mismatch_is_an_explicit_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny_model();
        save(dir.path(), &mut m, None).unwrap();
        // rewrite tensors.bin with a corrupted first tensor shape
        let names: Vec<String> = m.params.entries.iter().map(|e| e.name.clone()).collect();
        let mut tensors: Vec<ArrayD<f64>> =
            m.params.entries.iter().map(|e| e.value.clone()).collect();
        tensors[0] = ArrayD::zeros(IxDyn(&[1, 1, 3, 3]));
        let pairs: Vec<(&str, &ArrayD<f64>)> =
            names.iter().map(|n| n.as_str()).zip(tensors.iter()).collect();
        write_tensors(&dir.path().join("tensors.bin"), &pairs).unwrap();
        let Err(err) = load(dir.path()) else { panic!("expected shape error") };
        assert!(err.to_string().contains("does not match model shape"));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("t.bin"), b"NOTMAGIC\0\0\0\0\0\0\0\0").unwrap();
        assert!(read_tensors(&dir.path().join("t.bin"), 0).is_err());
    }

    #[test]
    fn snap_is_idempotent() {
        let mut m = tiny_model();
        snap_to_f32(&mut m);
        let first: Vec<u64> = m.params.entries.iter().flat_map(|e| e.value.iter().map(|v| v.to_bits())).collect();
        snap_to_f32(&mut m);
        let second: Vec<u64> = m.params.entries.iter().flat_map(|e| e.value.iter().map(|v| v.to_bits())).collect();
        assert_eq!(first, second);
    }
}
