//! Named parameter storage, the Adam optimizer and the flat weight-file codec.
//!
//! Weight files are a bare sequence of little-endian records:
//!
//! ```text
//! u32 name_len | name (utf-8, name_len bytes) | u32 rank | rank x u32 dims | f32 payload
//! ```
//!
//! The payload holds `product(dims)` values in row-major order. There is no
//! header and no trailer.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::Path;
use std::rc::Rc;

use crate::{Float, Grads, Tape, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum WeightFileError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed weight file: {0}")]
    Malformed(String),
    #[error("missing parameter `{0}`")]
    Missing(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    Shape { name: String, expected: Vec<usize>, found: Vec<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Float> {
    names: Vec<String>,
    values: Vec<Rc<Tensor<T>>>,
}

/// Tape variables for every parameter of one store, in store order.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter `{name}`");
        self.names.push(name);
        self.values.push(Rc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        assert_eq!(value.shape(), self.values[id.0].shape(), "shape change for `{}`", self.names[id.0]);
        self.values[id.0] = Rc::new(value);
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Rc::make_mut(&mut self.values[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    /// Record every parameter as a gradient-carrying leaf.
    pub fn bind(&self, tape: &Tape<T>) -> Bound {
        Bound { vars: self.values.iter().map(|v| tape.leaf_rc(Rc::clone(v))).collect() }
    }

    /// Record every parameter as a constant (frozen network).
    pub fn bind_frozen(&self, tape: &Tape<T>) -> Bound {
        Bound { vars: self.values.iter().map(|v| tape.constant_rc(Rc::clone(v))).collect() }
    }

    /// Bitwise equality of every parameter.
    pub fn same_values(&self, other: &Self) -> bool {
        self.names == other.names && self.values.iter().zip(&other.values).all(|(a, b)| a.as_ref() == b.as_ref())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), WeightFileError> {
        for (name, value) in self.names.iter().zip(&self.values) {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(value.shape().len() as u32).to_le_bytes())?;
            for &d in value.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in value.data() {
                w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), WeightFileError> {
        let f = std::fs::File::create(path)?;
        self.write_to(io::BufWriter::new(f))
    }

    /// Overwrite every parameter from a weight file. All names must be
    /// present with matching shapes; extra records are ignored.
    pub fn load(&mut self, path: &Path) -> Result<(), WeightFileError> {
        let records = read_records(io::BufReader::new(std::fs::File::open(path)?))?;
        self.assign(&records)
    }

    pub fn assign(&mut self, records: &BTreeMap<String, Tensor<f32>>) -> Result<(), WeightFileError> {
        for i in 0..self.values.len() {
            let name = &self.names[i];
            let rec = records.get(name).ok_or_else(|| WeightFileError::Missing(name.clone()))?;
            if rec.shape() != self.values[i].shape() {
                return Err(WeightFileError::Shape {
                    name: name.clone(),
                    expected: self.values[i].shape().to_vec(),
                    found: rec.shape().to_vec(),
                });
            }
            self.values[i] = Rc::new(rec.cast());
        }
        Ok(())
    }
}

/// Parse every record of a weight file.
pub fn read_records<R: Read>(mut r: R) -> Result<BTreeMap<String, Tensor<f32>>, WeightFileError> {
    let mut out = BTreeMap::new();
    loop {
        let mut len = [0u8; 4];
        match r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len) as usize;
        if name_len > 4096 {
            return Err(WeightFileError::Malformed(format!("name length {name_len}")));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| WeightFileError::Malformed("name is not utf-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(WeightFileError::Malformed(format!("rank {rank} for `{name}`")));
        }
        let dims = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = dims.iter().product();
        let mut payload = vec![0u8; 4 * n];
        r.read_exact(&mut payload).map_err(truncated)?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.insert(name, Tensor::from_vec(&dims, data));
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, WeightFileError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: io::Error) -> WeightFileError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        WeightFileError::Malformed("truncated record".into())
    } else {
        e.into()
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T: Float> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros = |t: &Rc<Tensor<T>>| Tensor::zeros(t.shape());
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: store.values.iter().map(zeros).collect(),
            v: store.values.iter().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update from gradients gathered on the tape where `bound`
    /// was recorded. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, bound: &Bound, grads: &Grads<T>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let step = T::of(self.lr * c2.sqrt() / c1);
        let eps = T::of(self.eps * c2.sqrt());
        for (i, &var) in bound.vars.iter().enumerate() {
            let Some(g) = grads.get(var) else { continue };
            let p = Rc::make_mut(&mut store.values[i]);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((pv, mv), vv), &gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                *pv -= step * *mv / (vv.sqrt() + eps);
            }
        }
    }
}
