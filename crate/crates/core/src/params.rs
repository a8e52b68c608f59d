//! Named parameter storage, the `FCMP` model file format, initialization and
//! the Adam optimizer.
//!
//! `FCMP` layout (little-endian): magic `"FCMP"`, version `u8`, count `u32`,
//! then per tensor (names sorted lexicographically): name length `u16`, UTF-8
//! name, rank `u8`, dims as `u32` each, `f32` payload.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FCMP_MAGIC: &[u8; 4] = b"FCMP";
pub const FCMP_VERSION: u8 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::State(format!("parameter `{name}` not initialized")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Copies every tensor whose name starts with `prefix` from `other`.
    pub fn merge_prefixed(&mut self, other: &ParamStore, prefix: &str) {
        for (k, v) in other.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.insert(k.clone(), v.clone());
        }
    }

    /// Rounds every value to `f32` precision, matching what a save/load
    /// round trip produces.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// Scalar metadata stored as a one-element tensor named `meta.<key>`.
    pub fn set_meta(&mut self, key: &str, v: f64) {
        self.insert(format!("meta.{key}"), Tensor::scalar(v as f32 as f64));
    }

    pub fn meta(&self, key: &str) -> Result<f64> {
        Ok(self.get(&format!("meta.{key}"))?.item())
    }

    /// A 64-bit tag stored exactly as four 16-bit chunks.
    pub fn set_tag(&mut self, key: &str, tag: u64) {
        let chunks = (0..4).map(|i| ((tag >> (16 * i)) & 0xffff) as f64).collect();
        self.insert(format!("meta.{key}"), Tensor::from_parts(vec![4], chunks));
    }

    pub fn tag(&self, key: &str) -> Result<u64> {
        let t = self.get(&format!("meta.{key}"))?;
        if t.len() != 4 {
            return Err(Error::State(format!("meta.{key} is not a tag")));
        }
        Ok(t.data()
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &c)| acc | ((c as u64) << (16 * i))))
    }

    /// Hash of every non-metadata tensor name and shape.
    pub fn arch_hash(&self) -> u64 {
        let mut h = Sha256::new();
        for (name, t) in self.iter().filter(|(n, _)| !n.starts_with("meta.")) {
            h.update(name.as_bytes());
            h.update([0u8]);
            for &d in t.shape() {
                h.update((d as u32).to_le_bytes());
            }
            h.update([0xffu8]);
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("digest length"))
    }

    /// Fails unless the tag `arch` matches both `expected` and the stored shapes.
    pub fn check_arch(&self, expected: u64, what: &str) -> Result<()> {
        let stored = self
            .tag("arch")
            .map_err(|_| Error::format(0, format!("{what} model file has no architecture tag")))?;
        if stored != expected || self.arch_hash() != expected {
            return Err(Error::format(
                0,
                format!("{what} architecture mismatch (file {stored:016x}, expected {expected:016x})"),
            ));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(FCMP_MAGIC);
        out.push(FCMP_VERSION);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize || t.rank() > u8::MAX as usize {
                return Err(Error::Contract(format!("cannot serialize `{name}`")));
            }
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4, "magic")? != FCMP_MAGIC {
            return Err(Error::format(0, "bad magic, expected FCMP"));
        }
        let version = r.u8("version")?;
        if version != FCMP_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let count = r.u32("tensor count")?;
        let mut store = ParamStore::new();
        let mut prev: Option<String> = None;
        for _ in 0..count {
            let at = r.pos;
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::format(at + 2, "name is not UTF-8"))?
                .to_string();
            if prev.as_deref().is_some_and(|p| p >= name.as_str()) {
                return Err(Error::format(at, format!("`{name}` out of sorted order")));
            }
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dim")? as usize);
            }
            let n: usize = shape.iter().product();
            let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::format(r.pos, "size overflow"))?, "payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::format(at, e.to_string()))?;
            prev = Some(name.clone());
            store.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos, "trailing bytes after last tensor"));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Cursor over a byte slice that reports truncation with the byte offset.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos,
                format!("truncated while reading {what} ({n} bytes needed)"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Kaiming-style normal initialization scaled for leaky-ReLU(0.2).
pub fn kaiming<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let gain = (2.0 / (1.0 + crate::autodiff::LEAKY_SLOPE.powi(2))).sqrt();
    let std = gain / (fan_in as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Adds `<name>.w` `[out, in, k, k]` and zero `<name>.b` for a convolution.
pub fn init_conv<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut R,
) {
    store.insert(format!("{name}.w"), kaiming(&[cout, cin, k, k], cin * k * k, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

/// Adds `<name>.w` `[in, out, k, k]` and zero `<name>.b` for a transposed
/// convolution with the given stride.
pub fn init_deconv<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    rng: &mut R,
) {
    let fan_in = (cin * k * k / (stride * stride)).max(1);
    store.insert(format!("{name}.w"), kaiming(&[cin, cout, k, k], fan_in, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

/// Adds an all-zero convolution (weights and bias).
pub fn init_zero_conv(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize) {
    store.insert(format!("{name}.w"), Tensor::zeros(&[cout, cin, k, k]));
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

/// Parameters of a store attached to one graph. Names are bound lazily;
/// names rejected by the trainable filter become constants.
pub struct Bound<'g, 's> {
    graph: &'g Graph,
    store: &'s ParamStore,
    trainable: Box<dyn Fn(&str) -> bool + 's>,
    vars: RefCell<BTreeMap<String, Var<'g>>>,
}

impl<'g, 's> Bound<'g, 's> {
    pub fn all(graph: &'g Graph, store: &'s ParamStore) -> Self {
        Self::filtered(graph, store, |_| true)
    }

    pub fn frozen(graph: &'g Graph, store: &'s ParamStore) -> Self {
        Self::filtered(graph, store, |_| false)
    }

    pub fn filtered(
        graph: &'g Graph,
        store: &'s ParamStore,
        trainable: impl Fn(&str) -> bool + 's,
    ) -> Self {
        Bound {
            graph,
            store,
            trainable: Box::new(trainable),
            vars: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn get(&self, name: &str) -> Result<Var<'g>> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(*v);
        }
        let t = self.store.get(name)?.clone();
        let v = if (self.trainable)(name) {
            self.graph.param(t)
        } else {
            self.graph.constant(t)
        };
        self.vars.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn w(&self, layer: &str) -> Result<Var<'g>> {
        self.get(&format!("{layer}.w"))
    }

    pub fn b(&self, layer: &str) -> Result<Var<'g>> {
        self.get(&format!("{layer}.b"))
    }

    /// Gradients of every bound trainable parameter (zeros if unused).
    pub fn grads(&self, g: &Gradients) -> GradStore {
        let mut out = GradStore::default();
        for (name, v) in self.vars.borrow().iter() {
            if (self.trainable)(name) {
                out.0.insert(name.clone(), g.wrt_or_zeros(*v));
            }
        }
        out
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradStore(pub BTreeMap<String, Tensor>);

impl GradStore {
    /// Adds `other` into `self`, name by name.
    pub fn accumulate(&mut self, other: GradStore) {
        for (k, v) in other.0 {
            match self.0.get_mut(&k) {
                Some(acc) => acc.add_assign(&v),
                None => {
                    self.0.insert(k, v);
                }
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.0.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn norm(&self) -> f64 {
        self.0
            .values()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().all(Tensor::all_finite)
    }

    /// Sums per-sample gradient stores in the given order.
    pub fn sum_ordered(items: impl IntoIterator<Item = GradStore>) -> GradStore {
        let mut acc = GradStore::default();
        for g in items {
            acc.accumulate(g);
        }
        acc
    }
}

/// Adam with optional global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_clip(mut self, norm: f64) -> Self {
        self.clip_norm = Some(norm);
        self
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradStore, lr: f64) {
        self.step += 1;
        let clip = match self.clip_norm {
            Some(c) => {
                let n = grads.norm();
                if n > c {
                    c / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in &grads.0 {
            let Some(p) = store.get_mut(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for i in 0..g.len() {
                let gi = g.data()[i] * clip;
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                let mi = *mi;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let vi = *vi;
                p.data_mut()[i] -= lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Cosine learning-rate decay from `base` to `base * floor` over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize, floor: f64) -> f64 {
    let t = (step as f64 / total.max(1) as f64).min(1.0);
    base * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn sample_store() -> ParamStore {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
        let mut s = ParamStore::new();
        init_conv(&mut s, "b.conv", 3, 4, 3, &mut rng);
        init_deconv(&mut s, "a.up", 4, 2, 4, 2, &mut rng);
        s.set_meta("c_min", -1.25);
        s.set_tag("arch", 0xdead_beef_0123_4567);
        s
    }

    #[test]
    fn fcmp_round_trip_after_f32_rounding() {
        let mut s = sample_store();
        s.round_to_f32();
        let bytes = s.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"FCMP");
        let back = ParamStore::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.tag("arch").unwrap(), 0xdead_beef_0123_4567);
        assert_eq!(back.meta("c_min").unwrap(), -1.25);
    }

    #[test]
    fn fcmp_names_sorted() {
        let bytes = sample_store().to_bytes().unwrap();
        let first_name_len = u16::from_le_bytes([bytes[9], bytes[10]]) as usize;
        assert_eq!(&bytes[11..11 + first_name_len], b"a.up.b");
    }

    #[test]
    fn fcmp_truncation_reports_offset() {
        let bytes = sample_store().to_bytes().unwrap();
        for cut in [3, 7, 20, bytes.len() - 1] {
            match ParamStore::from_bytes(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            ParamStore::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::new(&[2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new();
        for _ in 0..2000 {
            let grads = {
                let g = Graph::new();
                let b = Bound::all(&g, &s);
                let loss = b.get("x").unwrap().square().sum();
                b.grads(&g.backward(loss).unwrap())
            };
            opt.step(&mut s, &grads, 0.01);
        }
        assert!(s.get("x").unwrap().data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100, 0.1), 1e-3);
        assert!((cosine_lr(1e-3, 100, 100, 0.1) - 1e-4).abs() < 1e-15);
    }
}
