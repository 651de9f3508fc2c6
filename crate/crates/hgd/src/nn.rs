//! Parameter storage, layer primitives, and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{Id, Tape, TensorData};

pub type ParamId = usize;

pub struct Param {
    pub name: String,
    pub value: TensorData,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Named parameter arrays plus their Adam moment buffers.
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), index: BTreeMap::new() }
    }

    pub fn register(&mut self, name: &str, value: TensorData) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "parameter {name} registered twice"
        );
        let n = value.numel();
        let id = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            value,
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, id: ParamId) -> &TensorData {
        &self.params[id].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Maps store parameters to tape leaves, created lazily once per tape.
pub struct Binding {
    ids: Vec<Option<Id>>,
    train: bool,
}

impl Binding {
    pub fn new(store: &ParamStore, train: bool) -> Self {
        Binding { ids: vec![None; store.len()], train }
    }

    pub fn bind(&mut self, tape: &mut Tape, store: &ParamStore, pid: ParamId) -> Id {
        if let Some(id) = self.ids[pid] {
            return id;
        }
        let id = tape.leaf(store.get(pid).clone(), self.train);
        self.ids[pid] = Some(id);
        id
    }

    pub fn tape_id(&self, pid: ParamId) -> Option<Id> {
        self.ids[pid]
    }

    /// Pairs of (param, tape leaf) that were actually used on this tape.
    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Id)> + '_ {
        self.ids
            .iter()
            .enumerate()
            .filter_map(|(pid, id)| id.map(|i| (pid, i)))
    }
}

/// Standard normal sample via Box-Muller, driven by the run RNG.
pub fn randn(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

pub fn gaussian_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, sigma: f64) -> TensorData {
    let n = shape.iter().product();
    TensorData::new(shape, (0..n).map(|_| randn(rng) * sigma).collect())
}

const INIT_SIGMA: f64 = 0.02;

#[derive(Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.register(
            &format!("{name}.w"),
            gaussian_tensor(rng, vec![co, ci, k, k], INIT_SIGMA),
        );
        let b = store.register(&format!("{name}.b"), TensorData::zeros(vec![co]));
        Conv2d { w, b, stride, pad }
    }

    pub fn apply(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        bind: &mut Binding,
        x: Id,
    ) -> Id {
        let w = bind.bind(t, store, self.w);
        let b = bind.bind(t, store, self.b);
        t.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl InstanceNorm {
    pub fn new(store: &mut ParamStore, name: &str, ch: usize) -> Self {
        let gamma = store.register(
            &format!("{name}.gamma"),
            TensorData::new(vec![ch], vec![1.0; ch]),
        );
        let beta = store.register(&format!("{name}.beta"), TensorData::zeros(vec![ch]));
        InstanceNorm { gamma, beta }
    }

    pub fn apply(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        bind: &mut Binding,
        x: Id,
    ) -> Id {
        let g = bind.bind(t, store, self.gamma);
        let b = bind.bind(t, store, self.beta);
        t.instance_norm(x, g, b, 1e-5)
    }
}

#[derive(Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        n_in: usize,
        n_out: usize,
    ) -> Self {
        let w = store.register(
            &format!("{name}.w"),
            gaussian_tensor(rng, vec![n_out, n_in], INIT_SIGMA),
        );
        let b = store.register(&format!("{name}.b"), TensorData::zeros(vec![n_out]));
        Linear { w, b }
    }

    pub fn apply(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        bind: &mut Binding,
        x: Id,
    ) -> Id {
        let w = bind.bind(t, store, self.w);
        let b = bind.bind(t, store, self.b);
        t.linear(x, w, b)
    }
}

/// Adam with decoupled step counter per optimizer group.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam { lr, beta1, beta2, eps: 1e-8, t: 0 }
    }

    /// One update over `(param, gradient)` pairs.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, &TensorData)]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for &(pid, g) in grads {
            let p = store.get_mut(pid);
            assert_eq!(p.value.numel(), g.numel(), "grad shape mismatch for {}", p.name);
            for i in 0..g.data.len() {
                let gi = g.data[i];
                p.m[i] = self.beta1 * p.m[i] + (1.0 - self.beta1) * gi;
                p.v[i] = self.beta2 * p.v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = p.m[i] / b1t;
                let vhat = p.v[i] / b2t;
                p.value.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
