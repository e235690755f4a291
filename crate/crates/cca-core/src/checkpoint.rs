//! Flat binary checkpoint container.
//!
//! Layout: magic `CCA1`, one precision byte (0 = f64, 1 = f32), record count
//! (u32 LE), then per record: name length (u32 LE), UTF-8 name bytes, rank
//! (u32 LE), dims (u32 LE each), values (little-endian f64 or f32 per the
//! precision byte). Round-trips are bit-exact; f32 files are exact because
//! every stored value is already f32-quantized in that mode.
//!
//! Model checkpoints hold only parameters. Training-state files reuse the
//! same container with extra `optim.*` and `train.*` records.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::CcaModel;
use crate::nn::AdamState;
use crate::tensor::Precision;

const MAGIC: &[u8; 4] = b"CCA1";

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl Record {
    pub fn scalar(name: &str, value: f64) -> Self {
        Record {
            name: name.into(),
            dims: vec![1],
            values: vec![value],
        }
    }
}

fn precision_tag(p: Precision) -> u8 {
    match p {
        Precision::F64 => 0,
        Precision::F32 => 1,
    }
}

fn tag_precision(tag: u8) -> Result<Precision> {
    match tag {
        0 => Ok(Precision::F64),
        1 => Ok(Precision::F32),
        other => Err(Error::Checkpoint(format!("unknown precision tag {other}"))),
    }
}

pub fn write_container(path: &Path, precision: Precision, records: &[Record]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[precision_tag(precision)])?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for r in records {
        let name = r.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(r.dims.len() as u32).to_le_bytes())?;
        for &d in &r.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let expected: usize = r.dims.iter().product();
        if expected != r.values.len() {
            return Err(Error::Checkpoint(format!(
                "record {:?}: dims {:?} need {expected} values, got {}",
                r.name,
                r.dims,
                r.values.len()
            )));
        }
        match precision {
            Precision::F64 => {
                for &v in &r.values {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Precision::F32 => {
                for &v in &r.values {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<(Precision, Vec<Record>)> {
    let mut r = std::io::BufReader::new(
        fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?,
    );
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let precision = tag_precision(tag[0])?;
    let mut count_bytes = [0u8; 4];
    r.read_exact(&mut count_bytes)?;
    let count = u32::from_le_bytes(count_bytes) as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let mut len_bytes = [0u8; 4];
        r.read_exact(&mut len_bytes)?;
        let mut name_bytes = vec![0u8; u32::from_le_bytes(len_bytes) as usize];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
        r.read_exact(&mut len_bytes)?;
        let rank = u32::from_le_bytes(len_bytes) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut len_bytes)?;
            dims.push(u32::from_le_bytes(len_bytes) as usize);
        }
        let numel: usize = dims.iter().product();
        let mut values = Vec::with_capacity(numel);
        match precision {
            Precision::F64 => {
                let mut buf = [0u8; 8];
                for _ in 0..numel {
                    r.read_exact(&mut buf)?;
                    values.push(f64::from_le_bytes(buf));
                }
            }
            Precision::F32 => {
                let mut buf = [0u8; 4];
                for _ in 0..numel {
                    r.read_exact(&mut buf)?;
                    values.push(f32::from_le_bytes(buf) as f64);
                }
            }
        }
        records.push(Record { name, dims, values });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last record".into()));
    }
    Ok((precision, records))
}

fn store_records(store: &crate::nn::ParamStore) -> Vec<Record> {
    store
        .iter()
        .map(|(_, p)| Record {
            name: p.name.clone(),
            dims: p.tensor.shape().to_vec(),
            values: p.tensor.data().to_vec(),
        })
        .collect()
}

fn param_records(model: &CcaModel) -> Vec<Record> {
    store_records(&model.store)
}

pub fn save_model(path: &Path, model: &CcaModel) -> Result<()> {
    write_container(path, model.config.precision, &param_records(model))
}

/// Write an arbitrary parameter snapshot (e.g. the best epoch's weights).
pub fn save_params(path: &Path, precision: Precision, store: &crate::nn::ParamStore) -> Result<()> {
    write_container(path, precision, &store_records(store))
}

/// Load parameters by name into an already-constructed model. Every model
/// parameter must be present with matching dims; unknown records are an
/// error, so a checkpoint pins the architecture it was written from.
pub fn load_model(path: &Path, model: &mut CcaModel) -> Result<()> {
    let (precision, records) = read_container(path)?;
    load_params_from_records(path, precision, &records, model, false)
}

fn load_params_from_records(
    path: &Path,
    precision: Precision,
    records: &[Record],
    model: &mut CcaModel,
    allow_extra: bool,
) -> Result<()> {
    if precision != model.config.precision {
        return Err(Error::Checkpoint(format!(
            "{}: precision {:?} does not match configured {:?}",
            path.display(),
            precision,
            model.config.precision
        )));
    }
    let mut assigned = 0usize;
    for r in records {
        let Some(id) = model.store.id_of(&r.name) else {
            if allow_extra && (r.name.starts_with("optim.") || r.name.starts_with("train.")) {
                continue;
            }
            return Err(Error::Checkpoint(format!(
                "{}: record {:?} does not name a model parameter",
                path.display(),
                r.name
            )));
        };
        let param = model.store.get_mut(id);
        if param.tensor.shape() != r.dims.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{}: record {:?} has dims {:?}, model expects {:?}",
                path.display(),
                r.name,
                r.dims,
                param.tensor.shape()
            )));
        }
        param.tensor.data_mut().copy_from_slice(&r.values);
        assigned += 1;
    }
    if assigned != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {assigned} of {} model parameters present",
            path.display(),
            model.store.len()
        )));
    }
    Ok(())
}

pub struct TrainState {
    pub adam: AdamState,
    pub next_epoch: usize,
    pub best_val_acc: f64,
}

pub fn save_train_state(
    path: &Path,
    model: &CcaModel,
    adam: &AdamState,
    next_epoch: usize,
    best_val_acc: f64,
) -> Result<()> {
    let mut records = param_records(model);
    records.push(Record::scalar("optim.step", adam.step as f64));
    for (i, (_, p)) in model.store.iter().enumerate() {
        records.push(Record {
            name: format!("optim.m.{}", p.name),
            dims: p.tensor.shape().to_vec(),
            values: adam.m[i].clone(),
        });
        records.push(Record {
            name: format!("optim.v.{}", p.name),
            dims: p.tensor.shape().to_vec(),
            values: adam.v[i].clone(),
        });
    }
    records.push(Record::scalar("train.next_epoch", next_epoch as f64));
    records.push(Record::scalar("train.best_val_acc", best_val_acc));
    write_container(path, model.config.precision, &records)
}

/// Restore parameters and optimizer state; `lr` re-seeds the hyperparameters
/// the container does not carry.
pub fn load_train_state(path: &Path, model: &mut CcaModel, lr: f64) -> Result<TrainState> {
    let (precision, records) = read_container(path)?;
    load_params_from_records(path, precision, &records, model, true)?;
    let find = |name: &str| -> Result<&Record> {
        records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing record {name:?}", path.display())))
    };
    let mut adam = AdamState::new(&model.store, lr);
    adam.step = find("optim.step")?.values[0] as u64;
    for (i, (_, p)) in model.store.iter().enumerate() {
        let m = find(&format!("optim.m.{}", p.name))?;
        let v = find(&format!("optim.v.{}", p.name))?;
        if m.values.len() != p.tensor.numel() || v.values.len() != p.tensor.numel() {
            return Err(Error::Checkpoint(format!(
                "optimizer moments for {:?} have wrong size",
                p.name
            )));
        }
        adam.m[i] = m.values.clone();
        adam.v[i] = v.values.clone();
    }
    let next_epoch = find("train.next_epoch")?.values[0] as usize;
    let best_val_acc = find("train.best_val_acc")?.values[0];
    Ok(TrainState {
        adam,
        next_epoch,
        best_val_acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{EmbedType, EncoderConfig};
    use crate::rng::{sub_rng, Domain};

    fn tiny_model(seed: u64) -> CcaModel {
        let mut r = sub_rng(seed, Domain::Init, 0);
        CcaModel::init(EncoderConfig::tiny(EmbedType::Type2), &mut r).unwrap()
    }

    #[test]
    fn container_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.cca");
        let records = vec![
            Record {
                name: "a.weight".into(),
                dims: vec![2, 3],
                values: vec![0.1, -0.2, 1.0 / 3.0, f64::MIN_POSITIVE, 1e300, -0.0],
            },
            Record::scalar("b", 42.5),
        ];
        write_container(&path, Precision::F64, &records).unwrap();
        let (p, back) = read_container(&path).unwrap();
        assert_eq!(p, Precision::F64);
        assert_eq!(back.len(), 2);
        for (orig, read) in records.iter().zip(&back) {
            assert_eq!(orig.name, read.name);
            assert_eq!(orig.dims, read.dims);
            for (a, b) in orig.values.iter().zip(&read.values) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.cca");
        fs::write(&path, b"NOPE\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_container(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn model_save_load_restores_parameters_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cca");
        let model = tiny_model(1);
        save_model(&path, &model).unwrap();
        let mut other = tiny_model(2);
        let differs = model
            .store
            .iter()
            .zip(other.store.iter())
            .any(|((_, a), (_, b))| a.tensor.data() != b.tensor.data());
        assert!(differs, "different seeds must differ before loading");
        load_model(&path, &mut other).unwrap();
        for ((_, a), (_, b)) in model.store.iter().zip(other.store.iter()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn architecture_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cca");
        save_model(&path, &tiny_model(1)).unwrap();
        let mut r = sub_rng(1, Domain::Init, 0);
        let mut type1 = CcaModel::init(EncoderConfig::tiny(EmbedType::Type1), &mut r).unwrap();
        assert!(load_model(&path, &mut type1).is_err());
    }

    #[test]
    fn train_state_round_trips_adam() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.cca");
        let model = tiny_model(3);
        let mut adam = AdamState::new(&model.store, 1e-3);
        adam.step = 17;
        for m in adam.m.iter_mut() {
            for (j, v) in m.iter_mut().enumerate() {
                *v = j as f64 * 0.25;
            }
        }
        save_train_state(&path, &model, &adam, 5, 0.875).unwrap();
        let mut restored = tiny_model(4);
        let state = load_train_state(&path, &mut restored, 1e-3).unwrap();
        assert_eq!(state.adam.step, 17);
        assert_eq!(state.next_epoch, 5);
        assert_eq!(state.best_val_acc, 0.875);
        assert_eq!(state.adam.m, adam.m);
        assert_eq!(state.adam.v, adam.v);
        for ((_, a), (_, b)) in model.store.iter().zip(restored.store.iter()) {
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
    }
}
