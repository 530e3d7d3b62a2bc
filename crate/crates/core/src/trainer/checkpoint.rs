//! Binary training snapshots.
//!
//! Layout (little endian): `b"SSGF"`, `u32` version, `u64` length + JSON
//! metadata, `u32` tensor count, then per tensor a `u32` length + UTF-8
//! name, a `u8` dtype tag (0 = f32, 1 = f64), a `u32` rank, `u64` dims and
//! the raw element bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Counters, HyperParams, TrainState};
use crate::error::{Error, Result};
use crate::nn::{init_params, DiscriminatorNet, GeneratorNet, NetConfig};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"SSGF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte seed, hex.
    pub seed: String,
    pub stream: u64,
    /// Decimal; does not fit a JSON number.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::CorruptCheckpoint(format!("rng {what}"));
        if self.seed.len() != 64 {
            return Err(bad("seed"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad("seed"))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("position"))?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub net: NetConfig,
    pub hp: HyperParams,
    pub counters: Counters,
    pub rng: RngState,
    /// Adam update counts per generator / discriminator parameter.
    pub g_adam_steps: Vec<u64>,
    pub d_adam_steps: Vec<u64>,
    pub has_snapshot: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl StoredTensor {
    fn of<T: Scalar>(t: &Tensor<T>) -> Self {
        Self {
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            bytes: T::to_le_bytes_vec(t.data()),
        }
    }

    /// Decodes into `T`, converting between float widths if needed.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match self.dtype {
            DType::F32 => f32::from_le_bytes_slice(&self.bytes).into_iter().map(|v| T::from_f64(v as f64)).collect(),
            DType::F64 => f64::from_le_bytes_slice(&self.bytes).into_iter().map(T::from_f64).collect(),
        };
        Ok(Tensor::new(self.shape.clone(), data)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, StoredTensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::InvalidInput(format!("metadata: {e}")))?;
        let mut out = Vec::with_capacity(meta.len() + self.tensors.iter().map(|(_, t)| t.bytes.len() + 64).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(match t.dtype {
                DType::F32 => 0,
                DType::F64 => 1,
            });
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch { found: version, expected: VERSION });
        }
        let meta_len = r.len_u64()?;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::CorruptCheckpoint(format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?;
            let dtype = match r.take(1)?[0] {
                0 => DType::F32,
                1 => DType::F64,
                t => return Err(Error::CorruptCheckpoint(format!("unknown dtype tag {t}"))),
            };
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len_u64()).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(dtype.size_of()))
                .ok_or_else(|| Error::CorruptCheckpoint(format!("tensor {name} is too large")))?;
            let data = r.take(numel)?.to_vec();
            tensors.push((name, StoredTensor { dtype, shape, bytes: data }));
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { meta, tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::CorruptCheckpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len_u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::CorruptCheckpoint(format!("length {v} overflows")))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let io = |source| Error::Io { path: path.to_path_buf(), source };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    // Write then rename so an interrupted save leaves the old file intact.
    let tmp = path.with_extension("ssgf.tmp");
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(&ckpt.to_bytes()?).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    Checkpoint::from_bytes(&bytes)
}

fn bn_name(i: usize, what: &str) -> String {
    format!("g.bn{i}.{what}")
}

fn sn_name(i: usize) -> String {
    format!("d.sn{i}.u")
}

fn push_d<T: Scalar>(out: &mut Vec<(String, StoredTensor)>, prefix: &str, d: &DiscriminatorNet<T>) {
    for (n, t) in d.params().iter() {
        out.push((format!("{prefix}{n}"), StoredTensor::of(t)));
    }
    for (i, s) in d.sn_states().iter().enumerate() {
        out.push((format!("{prefix}{}", sn_name(i)), StoredTensor::of(&s.u)));
    }
}

fn load_into<T: Scalar>(ckpt: &Checkpoint, name: &str, dst: &mut Tensor<T>) -> Result<()> {
    let stored = ckpt.tensor(name).ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor {name}")))?;
    if stored.shape != dst.shape() {
        return Err(Error::CorruptCheckpoint(format!(
            "tensor {name} has shape {:?}, configuration expects {:?}",
            stored.shape,
            dst.shape()
        )));
    }
    *dst = stored.to_tensor()?;
    Ok(())
}

fn restore_d<T: Scalar>(ckpt: &Checkpoint, prefix: &str, d: &mut DiscriminatorNet<T>) -> Result<()> {
    for (n, t) in d.params_mut().iter_mut() {
        load_into(ckpt, &format!("{prefix}{n}"), t)?;
    }
    for (i, s) in d.sn_states_mut().iter_mut().enumerate() {
        load_into(ckpt, &format!("{prefix}{}", sn_name(i)), &mut s.u)?;
    }
    Ok(())
}

fn restore_g<T: Scalar>(ckpt: &Checkpoint, g: &mut GeneratorNet<T>) -> Result<()> {
    if !ckpt.tensors.iter().any(|(n, _)| n.starts_with("g.")) {
        return Err(Error::MissingGenerator);
    }
    for (n, t) in g.params_mut().iter_mut() {
        load_into(ckpt, n, t)?;
    }
    for (i, s) in g.bn_states_mut().iter_mut().enumerate() {
        load_into(ckpt, &bn_name(i, "running_mean"), &mut s.running_mean)?;
        load_into(ckpt, &bn_name(i, "running_var"), &mut s.running_var)?;
    }
    Ok(())
}

fn fresh_nets<T: Scalar>(meta: &CheckpointMeta) -> Result<(GeneratorNet<T>, DiscriminatorNet<T>)> {
    let (g, mut d) = init_params(&meta.net, meta.hp.seed)?;
    d.set_sn_iters(meta.hp.sn_iters);
    Ok((g, d))
}

impl<T: Scalar> TrainState<T> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        // Without adversarial training the generator is never used, so it
        // is left out.
        let with_g = self.hp.gan;
        let mut tensors = Vec::new();
        if with_g {
            for (n, t) in self.g.params().iter() {
                tensors.push((n.to_string(), StoredTensor::of(t)));
            }
            for (i, s) in self.g.bn_states().iter().enumerate() {
                tensors.push((bn_name(i, "running_mean"), StoredTensor::of(&s.running_mean)));
                tensors.push((bn_name(i, "running_var"), StoredTensor::of(&s.running_var)));
            }
        }
        push_d(&mut tensors, "", &self.d);
        let mut groups = vec![(self.d.params(), &self.d_moments)];
        if with_g {
            groups.insert(0, (self.g.params(), &self.g_moments));
        }
        for (store, moments) in groups {
            for ((n, _), m) in store.iter().zip(moments.iter()) {
                tensors.push((format!("adam.m:{n}"), StoredTensor::of(&m.m)));
                tensors.push((format!("adam.v:{n}"), StoredTensor::of(&m.v)));
            }
        }
        if let Some(d1) = &self.d1 {
            push_d(&mut tensors, "d1:", d1.net());
        }
        Checkpoint {
            meta: CheckpointMeta {
                net: self.net.clone(),
                hp: self.hp.clone(),
                counters: self.counters,
                rng: RngState::capture(&self.rng),
                g_adam_steps: if with_g { self.g_moments.iter().map(|m| m.step).collect() } else { Vec::new() },
                d_adam_steps: self.d_moments.iter().map(|m| m.step).collect(),
                has_snapshot: self.d1.is_some(),
            },
            tensors,
        }
    }

    /// Rebuilds the full training state; every tensor is checked against
    /// the shapes the stored configuration implies.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = &ckpt.meta;
        let (mut g, mut d) = fresh_nets::<T>(meta)?;
        if meta.hp.gan {
            restore_g(ckpt, &mut g)?;
        }
        restore_d(ckpt, "", &mut d)?;
        let mut state = TrainState::assemble(meta.net.clone(), meta.hp.clone(), g, d, meta.rng.restore()?)?;
        let mut groups = vec![(state.d.params(), &mut state.d_moments, &meta.d_adam_steps)];
        if meta.hp.gan {
            groups.push((state.g.params(), &mut state.g_moments, &meta.g_adam_steps));
        }
        for (store, moments, steps) in groups {
            if steps.len() != moments.len() {
                return Err(Error::CorruptCheckpoint(format!(
                    "{} optimizer step counts for {} parameters",
                    steps.len(),
                    moments.len()
                )));
            }
            for (((n, _), m), &step) in store.iter().zip(moments.iter_mut()).zip(steps) {
                load_into(ckpt, &format!("adam.m:{n}"), &mut m.m)?;
                load_into(ckpt, &format!("adam.v:{n}"), &mut m.v)?;
                m.step = step;
            }
        }
        if meta.has_snapshot {
            let (_, mut d1) = fresh_nets::<T>(meta)?;
            restore_d(ckpt, "d1:", &mut d1)?;
            state.d1 = Some(d1.snapshot());
        }
        state.counters = meta.counters;
        Ok(state)
    }
}

/// The trained discriminator alone.
pub fn load_discriminator<T: Scalar>(ckpt: &Checkpoint) -> Result<DiscriminatorNet<T>> {
    let (_, mut d) = fresh_nets::<T>(&ckpt.meta)?;
    restore_d(ckpt, "", &mut d)?;
    Ok(d)
}

/// The trained generator alone.
pub fn load_generator<T: Scalar>(ckpt: &Checkpoint) -> Result<GeneratorNet<T>> {
    let (mut g, _) = fresh_nets::<T>(&ckpt.meta)?;
    restore_g(ckpt, &mut g)?;
    Ok(g)
}
