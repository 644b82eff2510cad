//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `CRSC`, version `u16`, digest (length `u16`
//! + bytes), counters `step u64`, `epoch u64`, `cursor u64`, generator seed
//! (32 bytes), stream `u64`, word position `u128`; named parameter tensors;
//! Adam step and per-parameter moments; loss and validation history; the
//! optional best-state snapshot. Values are stored as `f64` whatever the
//! model's scalar type, which is exact for `f32` and `f64`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::trainer::{BestState, TrainState, Trainer};
use crate::autodiff::{AdamState, ParamStore, Tensor};
use crate::data::io::write_atomic;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"CRSC";
const VERSION: u16 = 1;

/// Decoded checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub digest: String,
    pub params: Vec<(String, Tensor<T>)>,
    pub state: TrainState<T>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor<T: Scalar>(&mut self, t: &Tensor<T>) {
        self.u8(t.rank() as u8);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v.as_f64());
        }
    }
    fn tensors<T: Scalar>(&mut self, ts: &[Tensor<T>]) {
        self.u64(ts.len() as u64);
        ts.iter().for_each(|t| self.tensor(t));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn truncated() -> Error {
    Error::Checkpoint("file is truncated".into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        // every counted element occupies at least one byte
        if n as usize > self.bytes.len() - self.pos {
            return Err(truncated());
        }
        Ok(n as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8 name".into()))
    }
    fn tensor<T: Scalar>(&mut self) -> Result<Tensor<T>> {
        let rank = self.u8()? as usize;
        let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n.checked_mul(8).is_none_or(|b| b > self.bytes.len() - self.pos) {
            return Err(truncated());
        }
        let data = (0..n).map(|_| self.f64().map(T::lit)).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
    fn tensors<T: Scalar>(&mut self) -> Result<Vec<Tensor<T>>> {
        let n = self.len()?;
        (0..n).map(|_| self.tensor()).collect()
    }
}

pub fn encode_checkpoint<T: Scalar>(digest: &str, store: &ParamStore<T>, state: &TrainState<T>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u16(VERSION);
    w.str(digest);
    w.u64(state.step);
    w.u64(state.epoch);
    w.u64(state.cursor as u64);
    w.0.extend_from_slice(&state.rng.get_seed());
    w.u64(state.rng.get_stream());
    w.0.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    w.u64(store.len() as u64);
    for id in store.ids() {
        w.str(store.name(id));
        w.tensor(store.value(id));
    }
    w.u64(state.adam.step);
    w.u64(state.adam.steps.len() as u64);
    state.adam.steps.iter().for_each(|&s| w.u64(s));
    w.tensors(&state.adam.m);
    w.tensors(&state.adam.v);
    w.u64(state.losses.len() as u64);
    state.losses.iter().for_each(|&l| w.f64(l));
    w.u64(state.validations.len() as u64);
    for &(s, a) in &state.validations {
        w.u64(s);
        w.f64(a);
    }
    match &state.best {
        None => w.u8(0),
        Some(b) => {
            w.u8(1);
            w.f64(b.metric);
            w.u64(b.step);
            w.tensors(&b.params);
        }
    }
    w.0
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let digest = r.str()?;
    let (step, epoch, cursor) = (r.u64()?, r.u64()?, r.u64()? as usize);
    let seed: [u8; 32] = r.array()?;
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.array()?);
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let n = r.len()?;
    let params = (0..n).map(|_| Ok((r.str()?, r.tensor()?))).collect::<Result<Vec<_>>>()?;
    let adam_step = r.u64()?;
    let k = r.len()?;
    let steps = (0..k).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let adam = AdamState {
        m: r.tensors()?,
        v: r.tensors()?,
        steps,
        step: adam_step,
    };
    let k = r.len()?;
    let losses = (0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let k = r.len()?;
    let validations = (0..k).map(|_| Ok((r.u64()?, r.f64()?))).collect::<Result<Vec<_>>>()?;
    let best = match r.u8()? {
        0 => None,
        1 => Some(BestState {
            metric: r.f64()?,
            step: r.u64()?,
            params: r.tensors()?,
        }),
        other => return Err(Error::Checkpoint(format!("bad best-state flag {other}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    if adam.m.len() != params.len() || adam.v.len() != params.len() || adam.steps.len() != params.len() {
        return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
    }
    Ok(Checkpoint {
        digest,
        params,
        state: TrainState {
            step,
            epoch,
            cursor,
            adam,
            rng,
            best,
            losses,
            validations,
        },
    })
}

pub fn checkpoint_save<T: Scalar>(path: &Path, digest: &str, store: &ParamStore<T>, state: &TrainState<T>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(digest, store, state))
}

pub fn checkpoint_load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    decode_checkpoint(&fs::read(path)?)
}

impl<T: Scalar> Checkpoint<T> {
    /// Copies the stored parameters into `store` after checking names and shapes.
    pub fn restore_params(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (id, (name, value)) in store.ids().zip(&self.params) {
            if store.name(id) != name || store.value(id).shape() != value.shape() {
                return Err(Error::Checkpoint(format!("parameter `{name}` does not match the model")));
            }
        }
        store.set_values(self.params.iter().map(|(_, v)| v.clone()).collect())
    }
}

impl<T: Scalar> Trainer<'_, T> {
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint_save(path, self.digest(), &self.model.store, &self.state)
    }

    /// Continues from a checkpoint written by a run with the same setup.
    pub fn resume(&mut self, path: &Path) -> Result<()> {
        let ckpt = checkpoint_load::<T>(path)?;
        if ckpt.digest != self.digest() {
            return Err(Error::Checkpoint("config digest does not match this run".into()));
        }
        let mut store = self.model.store.clone();
        ckpt.restore_params(&mut store)?;
        self.model.store = store;
        self.state = ckpt.state;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::fusion::Model;

    fn model() -> Model<f64> {
        Model::new(ModelConfig::reduced(), 1).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let mut state = TrainState::new(&m, 4);
        state.step = 9;
        state.losses = vec![1.5, 0.25];
        state.validations = vec![(4, 0.5)];
        state.best = Some(BestState {
            metric: 0.5,
            step: 4,
            params: m.store.values().to_vec(),
        });
        let bytes = encode_checkpoint("abc", &m.store, &state);
        let back = decode_checkpoint::<f64>(&bytes).unwrap();
        assert_eq!(back.digest, "abc");
        assert_eq!(back.state, state);
        let mut other = Model::<f64>::new(ModelConfig::reduced(), 2).unwrap();
        back.restore_params(&mut other.store).unwrap();
        assert_eq!(other.store.values(), m.store.values());
    }

    #[test]
    fn truncation_is_a_clean_error() {
        let m = model();
        let bytes = encode_checkpoint("d", &m.store, &TrainState::new(&m, 0));
        for cut in [0, 5, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint::<f64>(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
        }
    }

    #[test]
    fn f32_models_round_trip() {
        let m = Model::<f32>::new(ModelConfig::reduced(), 3).unwrap();
        let bytes = encode_checkpoint("x", &m.store, &TrainState::new(&m, 0));
        let back = decode_checkpoint::<f32>(&bytes).unwrap();
        assert!(back.params.iter().zip(m.store.values()).all(|((_, a), b)| a == b));
    }

    #[test]
    fn mismatched_models_are_rejected() {
        let m = model();
        let bytes = encode_checkpoint("x", &m.store, &TrainState::new(&m, 0));
        let ckpt = decode_checkpoint::<f64>(&bytes).unwrap();
        let mut other = Model::<f64>::new(ModelConfig::reduced().with_fusion(crate::config::FusionVariant::MidLate), 0).unwrap();
        assert!(ckpt.restore_params(&mut other.store).is_err());
    }
}
