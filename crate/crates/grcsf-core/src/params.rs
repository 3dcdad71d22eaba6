//! Named parameter sets, initializers, the Adam optimizer, and checkpoint IO.
//!
//! Parameters live in insertion order (an [`IndexMap`]), which fixes the
//! enumeration order everywhere: binding onto a tape, gradient reduction,
//! Adam updates, and checkpoint layout all iterate identically, so runs are
//! reproducible and checkpoints byte-stable.

use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::io;
use crate::tape::{c, Elem, Tape, VarId};
use crate::{Error, Result};

const CKPT_MAGIC: &[u8; 4] = b"GRCK";
const CKPT_VERSION: u32 = 1;

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug)]
pub struct ParamSet<T: Elem> {
    entries: IndexMap<String, ArrayD<T>>,
}

impl<T: Elem> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: IndexMap::new() }
    }

    /// Inserts a tensor under a unique name; duplicate names are a bug.
    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> &ArrayD<T> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<T> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<T>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }

    /// Casts every tensor to another element type.
    pub fn cast<U: Elem>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for (name, v) in &self.entries {
            out.insert(name.clone(), v.mapv(|x| U::from_f64(x.to_f64().unwrap()).unwrap()));
        }
        out
    }

    /// Registers every parameter as a tape leaf, preserving order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Binding {
        let mut ids = IndexMap::new();
        for (name, v) in &self.entries {
            ids.insert(name.clone(), tape.leaf(v.clone()));
        }
        Binding { ids }
    }
}

/// Tape handles for a bound [`ParamSet`].
pub struct Binding {
    ids: IndexMap<String, VarId>,
}

impl Binding {
    /// Builds a binding from explicit name/id pairs, for harnesses that
    /// create their own leaves (e.g. finite-difference drivers).
    pub fn from_ids(ids: IndexMap<String, VarId>) -> Binding {
        Binding { ids }
    }

    pub fn id(&self, name: &str) -> VarId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, VarId)> {
        self.ids.iter().map(|(n, &v)| (n, v))
    }

    /// Collects gradients for all bound parameters, zeros where a parameter
    /// did not participate in the graph.
    pub fn grads<T: Elem>(
        &self,
        tape: &Tape<T>,
        grads: &mut crate::tape::Gradients<T>,
    ) -> IndexMap<String, ArrayD<T>> {
        let mut out = IndexMap::new();
        for (name, &id) in &self.ids {
            let g = grads
                .take(id)
                .unwrap_or_else(|| ArrayD::zeros(tape.value(id).raw_dim()));
            out.insert(name.clone(), g);
        }
        out
    }
}

/// Accumulates per-sample gradient maps into a running sum.
pub fn accumulate_grads<T: Elem>(
    acc: &mut IndexMap<String, ArrayD<T>>,
    item: &IndexMap<String, ArrayD<T>>,
) {
    if acc.is_empty() {
        for (k, v) in item {
            acc.insert(k.clone(), v.clone());
        }
    } else {
        for (k, v) in item {
            *acc.get_mut(k).expect("grad key mismatch") += v;
        }
    }
}

/// Scales every gradient in place (e.g. 1/batch for mean reduction).
pub fn scale_grads<T: Elem>(acc: &mut IndexMap<String, ArrayD<T>>, factor: T) {
    for v in acc.values_mut() {
        v.mapv_inplace(|x| x * factor);
    }
}

/// Weight initializer with a deterministic draw order. Values are sampled in
/// `f64` and cast, so `f32` and `f64` models start from identical weights.
pub struct Init {
    rng: ChaCha12Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: crate::seeding::rng_for(seed, &[0x1217]) }
    }

    fn normal_f64(&mut self, std: f64) -> f64 {
        // Box-Muller on two uniform draws keeps us independent of
        // distribution-crate sampling internals.
        let u1: f64 = self.rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = self.rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
    }

    /// He (Kaiming) normal: `N(0, sqrt(2 / fan_in))`.
    pub fn he<T: Elem>(&mut self, shape: &[usize], fan_in: usize) -> ArrayD<T> {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        self.normal(shape, std)
    }

    /// Xavier/Glorot normal: `N(0, sqrt(2 / (fan_in + fan_out)))`.
    pub fn xavier<T: Elem>(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> ArrayD<T> {
        let std = (2.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        self.normal(shape, std)
    }

    pub fn normal<T: Elem>(&mut self, shape: &[usize], std: f64) -> ArrayD<T> {
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n).map(|_| c::<T>(self.normal_f64(std))).collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    pub fn zeros<T: Elem>(&mut self, shape: &[usize]) -> ArrayD<T> {
        ArrayD::zeros(IxDyn(shape))
    }

    pub fn ones<T: Elem>(&mut self, shape: &[usize]) -> ArrayD<T> {
        ArrayD::ones(IxDyn(shape))
    }

    pub fn constant<T: Elem>(&mut self, shape: &[usize], v: f64) -> ArrayD<T> {
        ArrayD::from_elem(IxDyn(shape), c::<T>(v))
    }
}

/// Adam optimizer (decoupled from any model structure; state is keyed by
/// parameter name).
pub struct Adam<T: Elem> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: IndexMap<String, ArrayD<T>>,
    v: IndexMap<String, ArrayD<T>>,
}

impl<T: Elem> Adam<T> {
    pub fn new() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: IndexMap::new(), v: IndexMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr` and bias-corrected moments.
    pub fn step(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &IndexMap<String, ArrayD<T>>,
        lr: f64,
    ) {
        self.step += 1;
        let b1 = c::<T>(self.beta1);
        let b2 = c::<T>(self.beta2);
        let one = T::one();
        let bc1 = c::<T>(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = c::<T>(1.0 - self.beta2.powi(self.step as i32));
        let lr = c::<T>(lr);
        let eps = c::<T>(self.eps);
        for (name, g) in grads {
            let p = params.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p = *p - lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

impl<T: Elem> Default for Adam<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CkptEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CkptHeader {
    entries: Vec<CkptEntry>,
    meta: serde_json::Value,
}

/// Serializes parameters as `GRCK` checkpoint bytes: magic, version, JSON
/// header (names, shapes, caller metadata), then contiguous little-endian
/// `f32` blobs in parameter order.
pub fn checkpoint_bytes<T: Elem>(params: &ParamSet<T>, meta: &serde_json::Value) -> Vec<u8> {
    let header = CkptHeader {
        entries: params
            .iter()
            .map(|(n, v)| CkptEntry { name: n.clone(), shape: v.shape().to_vec() })
            .collect(),
        meta: meta.clone(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, v) in params.iter() {
        for x in v.iter() {
            out.extend_from_slice(&(x.to_f64().unwrap() as f32).to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint<T: Elem>(
    path: &Path,
    params: &ParamSet<T>,
    meta: &serde_json::Value,
) -> Result<()> {
    io::atomic_write(path, &checkpoint_bytes(params, meta))
}

/// Loads a `GRCK` checkpoint into the requested element type, returning the
/// parameters and the caller metadata stored alongside them.
pub fn load_checkpoint<T: Elem>(path: &Path) -> Result<(ParamSet<T>, serde_json::Value)> {
    let bytes = io::read_bytes(path)?;
    parse_checkpoint(&bytes).map_err(|m| Error::format(path, m))
}

fn parse_checkpoint<T: Elem>(
    bytes: &[u8],
) -> std::result::Result<(ParamSet<T>, serde_json::Value), String> {
    if bytes.len() < 12 {
        return Err("truncated header".into());
    }
    if &bytes[0..4] != CKPT_MAGIC {
        return Err("bad magic, expected GRCK".into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + hlen {
        return Err("truncated JSON header".into());
    }
    let header: CkptHeader =
        serde_json::from_slice(&bytes[12..12 + hlen]).map_err(|e| e.to_string())?;
    let mut offset = 12 + hlen;
    let mut params = ParamSet::new();
    for e in &header.entries {
        let n: usize = e.shape.iter().product();
        let need = n * 4;
        if bytes.len() < offset + need {
            return Err(format!("truncated data for {}", e.name));
        }
        let data: Vec<T> = bytes[offset..offset + need]
            .chunks_exact(4)
            .map(|chunk| c::<T>(f32::from_le_bytes(chunk.try_into().unwrap()) as f64))
            .collect();
        params.insert(
            e.name.clone(),
            ArrayD::from_shape_vec(IxDyn(&e.shape), data).map_err(|e| e.to_string())?,
        );
        offset += need;
    }
    if offset != bytes.len() {
        return Err("trailing bytes after parameter data".into());
    }
    Ok((params, header.meta))
}
