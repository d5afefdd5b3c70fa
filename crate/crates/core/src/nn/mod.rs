//! Parameter storage, per-pass graph binding, and the composite layers
//! shared by the encoders, the language stub and the decoder.

mod blocks;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::tensor::gradcheck::GradCheckReport;
use crate::tensor::{Real, Tape, Tensor, Var};

pub use blocks::{
    dense_positional, Attention, AttentionConfig, LayerNorm, Linear, Mlp2, PatchEmbed, PatchGrid, TransformerBlock,
};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors. Frozen parameters carry
/// `requires_grad == false`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name:?}");
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.get(id).requires_grad).collect()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn accumulate(&mut self, grads: Vec<(ParamId, Vec<T>)>) {
        for (id, g) in grads {
            self.tensors[id.0]
                .accumulate_grad(&g)
                .expect("graph gradients match parameter shapes");
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// FNV-1a over the names and raw bytes of the selected parameters.
    pub fn checksum(&self, mut select: impl FnMut(&str, &Tensor<T>) -> bool) -> u64 {
        use std::hash::Hasher;
        let mut h = fnv::FnvHasher::default();
        for (_, name, t) in self.iter() {
            if !select(name, t) {
                continue;
            }
            h.write(name.as_bytes());
            for v in t.data() {
                h.write(&v.as_f64().to_le_bytes());
            }
        }
        h.finish()
    }
}

/// Deterministic parameter initialiser. Values are drawn in 64-bit and
/// cast when the store is converted to the training precision.
pub struct ParamInit {
    store: ParamStore<f64>,
    rng: Xoshiro256PlusPlus,
    scope: Vec<String>,
    trainable: bool,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        ParamInit {
            store: ParamStore::default(),
            rng: Xoshiro256PlusPlus::seed_from_u64(seed),
            scope: Vec::new(),
            trainable: true,
        }
    }

    /// Restarts the random stream; used to give a sub-network a seed of its
    /// own regardless of what was built before it.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    }

    /// Runs `f` on a separate stream seeded with `seed`, then resumes the
    /// original stream where it left off.
    pub fn with_seed<R>(&mut self, seed: u64, f: impl FnOnce(&mut Self) -> R) -> R {
        let saved = std::mem::replace(&mut self.rng, Xoshiro256PlusPlus::seed_from_u64(seed));
        let r = f(self);
        self.rng = saved;
        r
    }

    /// Parameters created while `trainable` is false are frozen.
    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn push_scope(&mut self, name: &str) {
        self.scope.push(name.to_string());
    }

    pub fn pop_scope(&mut self) {
        self.scope.pop();
    }

    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.push_scope(name);
        let r = f(self);
        self.pop_scope();
        r
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.scope.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    fn add(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> ParamId {
        let mut t = Tensor::new(shape, data).expect("initialiser shapes are valid");
        t.requires_grad = self.trainable;
        let full = self.full_name(name);
        self.store.insert(&full, t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect();
        self.add(name, shape, data)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        use rand::Rng;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.add(name, shape, data)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let n: usize = shape.iter().product();
        self.add(name, shape, vec![value; n])
    }

    pub fn finish(self) -> ParamStore<f64> {
        self.store
    }
}

/// Probe events recorded by instrumented forward passes.
pub type ProbeLog = Vec<String>;

/// One forward pass: a tape plus lazy bindings of parameters as leaves.
pub struct Graph<'p, T: Real> {
    pub tape: Tape<T>,
    params: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
    probe: Option<ProbeLog>,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            probe: None,
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    /// Leaf for parameter `id`, recorded on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.get(id));
        self.bound[id.0] = Some(v);
        v
    }

    pub fn enable_probe(&mut self) {
        self.probe = Some(Vec::new());
    }

    pub fn record(&mut self, event: impl FnOnce() -> String) {
        if let Some(log) = &mut self.probe {
            log.push(event());
        }
    }

    pub fn take_probe(&mut self) -> ProbeLog {
        self.probe.take().unwrap_or_default()
    }

    /// Gradients of every bound trainable parameter after `tape.backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<T>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.tape.grad(v).map(|g| (ParamId(i), g.to_vec()))
            })
            .collect()
    }
}

/// Finite-difference check of `d loss / d θ` for every trainable value of
/// `store`, where `f` builds the scalar loss on a fresh graph.
pub fn check_param_gradients<F>(store: &ParamStore<f64>, f: F) -> crate::tensor::Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> crate::tensor::Result<Var>,
{
    use crate::tensor::gradcheck::{DEFAULT_FLOOR, DEFAULT_STEP};
    let mut g = Graph::new(store);
    let loss = f(&mut g)?;
    g.tape.backward(loss)?;
    let analytic: HashMap<ParamId, Vec<f64>> = g.param_grads().into_iter().collect();
    drop(g);

    let eval = |s: &ParamStore<f64>| -> crate::tensor::Result<f64> {
        let mut g = Graph::new(s);
        let loss = f(&mut g)?;
        Ok(g.tape.value(loss)[0])
    };
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for id in store.trainable_ids() {
        for e in 0..store.get(id).len() {
            let orig = store.get(id).data()[e];
            work.get_mut(id).data_mut()[e] = orig + DEFAULT_STEP;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[e] = orig - DEFAULT_STEP;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * DEFAULT_STEP);
            let a = analytic.get(&id).map_or(0.0, |g| g[e]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DEFAULT_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_err || report.checked == 1 {
                report.max_rel_err = rel;
                report.worst = (id.index(), e);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
