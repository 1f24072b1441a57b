//! Named parameter storage and the `ACED1` checkpoint format.
//!
//! Checkpoint layout, parameters in store order:
//!
//! ```text
//! ACED1\n
//! <name>\n
//! <batch> <channels> <height> <width>\n
//! <numel little-endian f64 values>
//! ...
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use super::rng::Rng;
use super::tape::Tape;
use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8] = b"ACED1\n";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a zero-valued parameter. Names must be unique.
    pub fn insert(&mut self, name: &str, shape: Shape) -> Result<()> {
        self.insert_tensor(name, Tensor::zeros(shape))
    }

    pub fn insert_tensor(&mut self, name: &str, mut value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        if name.is_empty() || name.contains('\n') {
            return Err(Error::InvalidArgument(format!("invalid parameter name {name:?}")));
        }
        value.requires_grad = true;
        value.grad = None;
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Uniform initialisation in `[-s, s]`, `s = sqrt(1 / fan_in)` with
    /// `fan_in = inC * kH * kW` taken from each weight's shape. Rank-1-like
    /// bias tensors (1, C, 1, 1) use the fan-in of the preceding weight
    /// in store order.
    pub fn init_uniform(&mut self, rng: &mut Rng) {
        let mut last_fan_in = 1;
        for t in self.params.values_mut() {
            let [o, i, kh, kw] = t.shape().0;
            let is_bias = o == 1 && kh == 1 && kw == 1;
            let fan_in = if is_bias { last_fan_in } else { i * kh * kw };
            if !is_bias {
                last_fan_in = fan_in;
            }
            let s = (1.0 / fan_in as f64).sqrt();
            for v in t.data_mut() {
                *v = rng.uniform(-s, s);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Copies gradients of every parameter bound on `tape` after its
    /// backward pass. Parameters not reached by the loss get zeros.
    pub fn load_grads(&mut self, tape: &Tape) -> Result<()> {
        for (name, var) in tape.bound_params() {
            let t = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
            let grad = tape
                .grad(var)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            t.grad = Some(grad);
        }
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for (name, t) in &self.params {
            let [b, c, h, wd] = t.shape().0;
            writeln!(w, "{name}")?;
            writeln!(w, "{b} {c} {h} {wd}")?;
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("file shorter than magic".into()))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut store = ParamStore::new();
        loop {
            let mut name = String::new();
            if r.read_line(&mut name)? == 0 {
                break;
            }
            let name = name
                .strip_suffix('\n')
                .ok_or_else(|| Error::Checkpoint("unterminated name line".into()))?;
            let mut dims = String::new();
            r.read_line(&mut dims)?;
            let dims: Vec<usize> = dims
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Checkpoint(format!("shape line for `{name}`: {e}")))?;
            let shape: [usize; 4] = dims
                .try_into()
                .map_err(|_| Error::Checkpoint(format!("shape line for `{name}` needs 4 counts")))?;
            let shape = Shape(shape);
            let mut bytes = vec![0u8; shape.numel() * 8];
            r.read_exact(&mut bytes)
                .map_err(|_| Error::Checkpoint(format!("truncated values for `{name}`")))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            store.insert_tensor(name, Tensor::new(shape, data)?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_checkpoint(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_checkpoint(std::fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_layout_is_exact() {
        let mut store = ParamStore::new();
        store
            .insert_tensor("w", Tensor::new(Shape::new(1, 1, 1, 2), vec![1.0, -2.5]).unwrap())
            .unwrap();
        let mut buf = Vec::new();
        store.write_checkpoint(&mut buf).unwrap();
        let mut want = b"ACED1\nw\n1 1 1 2\n".to_vec();
        want.extend_from_slice(&1.0f64.to_le_bytes());
        want.extend_from_slice(&(-2.5f64).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn checkpoint_round_trip_keeps_order() {
        let mut rng = Rng::new(3);
        let mut store = ParamStore::new();
        store.insert("zeta.weight", Shape::new(2, 3, 3, 3)).unwrap();
        store.insert("zeta.bias", Shape::new(1, 2, 1, 1)).unwrap();
        store.insert("alpha.weight", Shape::new(1, 2, 1, 1)).unwrap();
        store.init_uniform(&mut rng);
        let mut buf = Vec::new();
        store.write_checkpoint(&mut buf).unwrap();
        let back = ParamStore::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, store);
        assert_eq!(
            back.names().collect::<Vec<_>>(),
            ["zeta.weight", "zeta.bias", "alpha.weight"]
        );
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(ParamStore::read_checkpoint(&b"ACED2\n"[..]).is_err());
        assert!(ParamStore::read_checkpoint(&b"ACED1\nw\n1 1 1 2\n\0\0\0"[..]).is_err());
        assert!(ParamStore::read_checkpoint(&b"ACED1\nw\n1 1 2\n"[..]).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("a", Shape::SCALAR).unwrap();
        assert!(store.insert("a", Shape::SCALAR).is_err());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut store = ParamStore::new();
        store.insert("w", Shape::new(8, 4, 3, 3)).unwrap();
        store.insert("b", Shape::new(1, 8, 1, 1)).unwrap();
        store.init_uniform(&mut Rng::new(0));
        let s = (1.0f64 / 36.0).sqrt();
        for (_, t) in store.iter() {
            assert!(t.data().iter().all(|v| v.abs() <= s));
            assert!(t.requires_grad);
        }
    }
}
