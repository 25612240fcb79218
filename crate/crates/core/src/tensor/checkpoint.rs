//! Binary checkpoint container.
//!
//! Layout (little endian): magic, version `u32`, dtype code `u8`, step
//! `u64`, optimizer state, parameter records (name, shape, value, first and
//! second moments), running statistics, a JSON metadata blob, and a
//! trailing FNV-1a checksum over everything before it.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{Adam, DType, ParamStore, RunningStats, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"HKNT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint holds {found:?} values, expected {expected:?}")]
    DTypeMismatch { expected: DType, found: DType },
    #[error("unknown dtype code {0}")]
    UnknownDType(u8),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checksum mismatch")]
    Checksum,
    #[error("checkpoint does not match model: {0}")]
    Layout(String),
    #[error("invalid utf-8 in checkpoint")]
    Utf8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub step: u64,
    pub optimizer: Adam,
    pub params: Vec<StoredTensor<T>>,
    pub stats: Vec<RunningStats<T>>,
    /// Free-form JSON (run configuration, sampler state, ...).
    pub metadata: String,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn capture(store: &ParamStore<T>, optimizer: Adam, step: u64, metadata: String) -> Self {
        Self {
            step,
            optimizer,
            params: store
                .params()
                .iter()
                .map(|p| StoredTensor {
                    name: p.name.clone(),
                    value: p.value.clone(),
                    m: p.m.clone(),
                    v: p.v.clone(),
                })
                .collect(),
            stats: store.buffers().to_vec(),
            metadata,
        }
    }

    /// Copies values, moments and running statistics into `store`, which must
    /// have the same parameter names and shapes in the same order.
    pub fn restore(&self, store: &mut ParamStore<T>) -> Result<(), CheckpointError> {
        if store.len() != self.params.len() || store.buffers().len() != self.stats.len() {
            return Err(CheckpointError::Layout(format!(
                "{} parameters / {} statistics in checkpoint, {} / {} in model",
                self.params.len(),
                self.stats.len(),
                store.len(),
                store.buffers().len()
            )));
        }
        for (dst, src) in store.params().iter().zip(&self.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(CheckpointError::Layout(format!(
                    "parameter {} {:?} vs {} {:?}",
                    src.name,
                    src.value.shape(),
                    dst.name,
                    dst.value.shape()
                )));
            }
        }
        for (dst, src) in store.buffers().iter().zip(&self.stats) {
            if dst.name != src.name || dst.mean.len() != src.mean.len() {
                return Err(CheckpointError::Layout(format!(
                    "statistics {} vs {}",
                    src.name, dst.name
                )));
            }
        }
        for (dst, src) in store.params_mut().iter_mut().zip(&self.params) {
            dst.value = src.value.clone();
            dst.m = src.m.clone();
            dst.v = src.v.clone();
            dst.grad.fill(T::ZERO);
        }
        for (dst, src) in store.buffers_mut().iter_mut().zip(&self.stats) {
            *dst = src.clone();
        }
        Ok(())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_values<T: Scalar>(out: &mut Vec<u8>, v: &[T]) {
    for &x in v {
        x.write_le(out);
    }
}

pub fn encode_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.extend_from_slice(&ckpt.step.to_le_bytes());
    let o = &ckpt.optimizer;
    for f in [o.learning_rate, o.beta1, o.beta2, o.epsilon] {
        out.extend_from_slice(&f.to_le_bytes());
    }
    out.extend_from_slice(&o.step.to_le_bytes());
    out.extend_from_slice(&(ckpt.params.len() as u64).to_le_bytes());
    for p in &ckpt.params {
        put_str(&mut out, &p.name);
        for d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_values(&mut out, p.value.data());
        put_values(&mut out, p.m.data());
        put_values(&mut out, p.v.data());
    }
    out.extend_from_slice(&(ckpt.stats.len() as u64).to_le_bytes());
    for s in &ckpt.stats {
        put_str(&mut out, &s.name);
        out.extend_from_slice(&(s.mean.len() as u64).to_le_bytes());
        put_values(&mut out, &s.mean);
        put_values(&mut out, &s.var);
    }
    put_str(&mut out, &ckpt.metadata);
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        if end > self.buf.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize, CheckpointError> {
        let v = self.u64()?;
        // Anything longer than the remaining buffer cannot be valid.
        if v > self.buf.len() as u64 {
            return Err(CheckpointError::Truncated);
        }
        Ok(v as usize)
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Utf8)
    }
    fn values<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>, CheckpointError> {
        let w = T::DTYPE.size();
        let bytes = self.take(n.checked_mul(w).ok_or(CheckpointError::Truncated)?)?;
        Ok(bytes.chunks_exact(w).map(T::read_le).collect())
    }
}

fn header(bytes: &[u8]) -> Result<DType, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let code = r.u8()?;
    DType::from_code(code).ok_or(CheckpointError::UnknownDType(code))
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>, CheckpointError> {
    let found = header(bytes)?;
    if found != T::DTYPE {
        return Err(CheckpointError::DTypeMismatch {
            expected: T::DTYPE,
            found,
        });
    }
    if bytes.len() < 8 {
        return Err(CheckpointError::Truncated);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if fnv1a(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
        return Err(CheckpointError::Checksum);
    }
    let mut r = Reader { buf: body, pos: 9 };
    let step = r.u64()?;
    let optimizer = Adam {
        learning_rate: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        epsilon: r.f64()?,
        step: r.u64()?,
    };
    let n_params = r.len()?;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = r.string()?;
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.len()?;
        }
        let n: usize = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or(CheckpointError::Truncated)?;
        let tensor = |v: Vec<T>| {
            Tensor::from_vec(shape, v).map_err(|e| CheckpointError::Layout(e.to_string()))
        };
        let value = tensor(r.values(n)?)?;
        let m = tensor(r.values(n)?)?;
        let v = tensor(r.values(n)?)?;
        params.push(StoredTensor { name, value, m, v });
    }
    let n_stats = r.len()?;
    let mut stats = Vec::with_capacity(n_stats);
    for _ in 0..n_stats {
        let name = r.string()?;
        let c = r.len()?;
        let mean = r.values(c)?;
        let var = r.values(c)?;
        stats.push(RunningStats { name, mean, var });
    }
    let metadata = r.string()?;
    if r.pos != body.len() {
        return Err(CheckpointError::Layout("trailing bytes".into()));
    }
    Ok(Checkpoint {
        step,
        optimizer,
        params,
        stats,
        metadata,
    })
}

/// Element type recorded in a checkpoint file, without decoding the rest.
pub fn checkpoint_dtype(path: &Path) -> Result<DType, CheckpointError> {
    let bytes = fs::read(path)?;
    header(&bytes)
}

pub fn write_checkpoint<T: Scalar>(
    path: &Path,
    ckpt: &Checkpoint<T>,
) -> Result<(), CheckpointError> {
    let bytes = encode_checkpoint(ckpt);
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>, CheckpointError> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        let a = s.add(
            "a",
            Tensor::from_vec([1, 1, 1, 3], vec![1.0, -2.5, 3.25]).unwrap(),
        );
        s.get_mut(a).m.fill(0.5);
        s.get_mut(a).v.fill(0.25);
        let b = s.add_running_stats("bn", 2);
        s.update_running_stats(b, &[1.0, 2.0], &[3.0, 4.0], 0.9);
        s
    }

    #[test]
    fn round_trip() {
        let s = sample_store();
        let mut adam = Adam::new(1e-3);
        adam.step = 7;
        let c = Checkpoint::capture(&s, adam, 7, "{\"k\":1}".into());
        let back: Checkpoint<f32> = decode_checkpoint(&encode_checkpoint(&c)).unwrap();
        assert_eq!(back, c);
        let mut fresh = ParamStore::new();
        fresh.add("a", Tensor::zeros([1, 1, 1, 3]));
        fresh.add_running_stats("bn", 2);
        back.restore(&mut fresh).unwrap();
        assert_eq!(fresh, s);
    }

    #[test]
    fn rejects_damage() {
        let c = Checkpoint::capture(&sample_store(), Adam::new(1e-3), 0, String::new());
        let mut bytes = encode_checkpoint(&c);
        assert!(matches!(
            decode_checkpoint::<f64>(&bytes),
            Err(CheckpointError::DTypeMismatch { .. })
        ));
        let last = bytes.len() - 20;
        bytes[last] ^= 1;
        assert!(matches!(
            decode_checkpoint::<f32>(&bytes),
            Err(CheckpointError::Checksum)
        ));
        assert!(matches!(
            decode_checkpoint::<f32>(&bytes[..6]),
            Err(CheckpointError::Truncated)
        ));
        assert!(matches!(
            decode_checkpoint::<f32>(b"NOPE00000000"),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn restore_checks_layout() {
        let c = Checkpoint::capture(&sample_store(), Adam::new(1e-3), 0, String::new());
        let mut other = ParamStore::<f32>::new();
        other.add("a", Tensor::zeros([1, 1, 1, 4]));
        other.add_running_stats("bn", 2);
        assert!(matches!(
            c.restore(&mut other),
            Err(CheckpointError::Layout(_))
        ));
    }
}
