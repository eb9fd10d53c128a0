use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{cast, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation, resampled outside two sigma.
    TruncNormal(f64),
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub group: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Named learnable arrays plus a per-group frozen flag.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
    frozen: BTreeSet<String>,
}

pub(crate) fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn add(
        &mut self,
        name: &str,
        group: &str,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let len: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![T::zero(); len],
            Init::Ones => vec![T::one(); len],
            Init::TruncNormal(std) => (0..len).map(|_| cast(trunc_normal(rng, std))).collect(),
        };
        let id = ParamId(self.params.len());
        self.index.insert(name.to_string(), id.0);
        self.params.push(Param {
            name: name.to_string(),
            group: group.to_string(),
            shape: shape.to_vec(),
            data,
        });
        Ok(id)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.params[id.0].data
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].data
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Scalar count of every parameter whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.data.len())
            .sum()
    }

    pub fn groups(&self) -> BTreeSet<String> {
        self.params.iter().map(|p| p.group.clone()).collect()
    }

    pub fn freeze_group(&mut self, group: &str) {
        self.frozen.insert(group.to_string());
    }

    pub fn freeze_all(&mut self) {
        self.frozen = self.groups();
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen.contains(&self.params[id.0].group)
    }

    pub fn grads(&self) -> Grads<T> {
        Grads {
            data: self.params.iter().map(|p| vec![T::zero(); p.data.len()]).collect(),
        }
    }

    /// SHA-256 over names, shapes and raw little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for d in &p.shape {
                h.update((*d as u64).to_le_bytes());
            }
            buf.clear();
            for &v in &p.data {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex_string(&h.finalize())
    }

    /// Copies values from another store for every parameter present in both
    /// with equal shape. Returns the number of copied parameters.
    pub fn copy_matching_from(&mut self, other: &ParamStore<T>, map_name: impl Fn(&str) -> Option<String>) -> usize {
        let mut copied = 0;
        for p in &mut self.params {
            let Some(src_name) = map_name(&p.name) else { continue };
            if let Some(src) = other.id(&src_name).map(|id| other.param(id)) {
                if src.shape == p.shape {
                    p.data.copy_from_slice(&src.data);
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn convert<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|&v| cast::<U>(crate::tensor::to_f64(v))).collect(),
                })
                .collect(),
            index: self.index.clone(),
            frozen: self.frozen.clone(),
        }
    }

    pub fn perturb(&mut self, rng: &mut ChaCha8Rng, std: f64) {
        for p in &mut self.params {
            for v in &mut p.data {
                *v += cast(rng.gen_range(-1.0..1.0) * std);
            }
        }
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Gradient buffers parallel to a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads<T> {
    pub data: Vec<Vec<T>>,
}

impl<T: Real> Grads<T> {
    #[inline]
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.data[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.data[id.0]
    }

    pub fn zero(&mut self) {
        for g in &mut self.data {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.data {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn add(&mut self, other: &Grads<T>) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_all_zero(&self, id: ParamId) -> bool {
        self.data[id.0].iter().all(|v| *v == T::zero())
    }
}
