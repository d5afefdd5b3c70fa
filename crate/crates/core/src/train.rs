//! Training: flat `key = value` configuration, the warmup/decay schedule,
//! AdamW with gradient accumulation, and checkpoints.
//!
//! One iteration is one optimizer step over `batch_size × grad_accum_steps`
//! samples; the schedule advances once per step.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::decoder::DecoderKind;
use crate::forge::{sub_seed, DatasetManifest, ForgeError};
use crate::losses::LossWeights;
use crate::model::{Model, ModelConfig, TraceMode};
use crate::nn::{Graph, ParamId, ParamStore};
use crate::stub::{TokenSequence, Vocabulary};
use crate::tensor::{read_checkpoint, write_checkpoint, ArrayData, NamedArray};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },
    #[error("invalid training config: {0}")]
    Invalid(String),
    #[error("lr_at: iteration {iter} outside 0..={total}")]
    IterOutOfRange { iter: usize, total: usize },
    #[error("step {step}: {component} loss is not finite ({value})")]
    NonFinite {
        step: usize,
        component: &'static str,
        value: f64,
    },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("dataset has no records")]
    EmptyDataset,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Forge(#[from] ForgeError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "FORGE_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_iters: usize,
    pub total_iters: usize,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub loss: LossWeights,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            warmup_iters: 100,
            total_iters: 2000,
            batch_size: 4,
            grad_accum_steps: 4,
            loss: LossWeights::default(),
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            model: ModelConfig::default(),
        }
    }
}

fn decoder_name(k: DecoderKind) -> &'static str {
    match k {
        DecoderKind::Fusion => "fusion",
        DecoderKind::SingleCrossAttention => "single-cross",
    }
}

fn trace_name(t: TraceMode) -> &'static str {
    match t {
        TraceMode::Enabled => "enabled",
        TraceMode::Zeroed => "zeroed",
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Invalid(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        for (k, v) in [
            ("total_iters", self.total_iters),
            ("batch_size", self.batch_size),
            ("grad_accum_steps", self.grad_accum_steps),
        ] {
            if v == 0 {
                return bad(format!("{k} must be positive"));
            }
        }
        if self.warmup_iters > self.total_iters {
            return bad(format!(
                "warmup_iters {} exceeds total_iters {}",
                self.warmup_iters, self.total_iters
            ));
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{k} = {v} must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps {} must be positive", self.adam_eps));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        self.loss.validate()?;
        self.model.grid()?;
        Ok(())
    }

    /// Applies the `FORGE_SEED` override when the value is present.
    pub fn with_seed_override(mut self, value: Option<&str>) -> Result<Self> {
        if let Some(v) = value {
            self.seed = v.trim().parse().map_err(|e| TrainError::Invalid(format!("{SEED_ENV}={v:?}: {e}")))?;
        }
        Ok(self)
    }

    /// Parses `key = value` lines on top of the defaults. Blank lines and
    /// `#` comments are ignored; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| TrainError::Config { line: i + 1, reason };
            let (k, v) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            fn num<T: std::str::FromStr>(k: &str, v: &str) -> std::result::Result<T, String>
            where
                T::Err: std::fmt::Display,
            {
                v.parse().map_err(|e| format!("{k}: cannot parse {v:?}: {e}"))
            }
            let m = &mut c.model;
            let r: std::result::Result<(), String> = (|| {
                match k {
                    "learning_rate" => c.learning_rate = num(k, v)?,
                    "warmup_iters" => c.warmup_iters = num(k, v)?,
                    "total_iters" => c.total_iters = num(k, v)?,
                    "batch_size" => c.batch_size = num(k, v)?,
                    "grad_accum_steps" => c.grad_accum_steps = num(k, v)?,
                    "lambda_txt" => c.loss.lambda_txt = num(k, v)?,
                    "lambda_mask" => c.loss.lambda_mask = num(k, v)?,
                    "lambda_bce" => c.loss.lambda_bce = num(k, v)?,
                    "lambda_dice" => c.loss.lambda_dice = num(k, v)?,
                    "seed" => c.seed = num(k, v)?,
                    "beta1" => c.beta1 = num(k, v)?,
                    "beta2" => c.beta2 = num(k, v)?,
                    "adam_eps" => c.adam_eps = num(k, v)?,
                    "weight_decay" => c.weight_decay = num(k, v)?,
                    "image_size" => m.image_size = num(k, v)?,
                    "patch_size" => m.patch_size = num(k, v)?,
                    "dim" => m.dim = num(k, v)?,
                    "heads" => m.heads = num(k, v)?,
                    "mlp_hidden" => m.mlp_hidden = num(k, v)?,
                    "trace_blocks" => m.trace_blocks = num(k, v)?,
                    "backbone_blocks" => m.backbone_blocks = num(k, v)?,
                    "lifted_channels" => m.lifted_channels = num(k, v)?,
                    "constrained_mid" => m.constrained_mid = num(k, v)?,
                    "d_llm" => m.d_llm = num(k, v)?,
                    "prompt_dim" => m.prompt_dim = num(k, v)?,
                    "stub_hidden" => m.stub_hidden = num(k, v)?,
                    "aux_tokens" => m.aux_tokens = num(k, v)?,
                    "decoder" => {
                        m.decoder = match v {
                            "fusion" => DecoderKind::Fusion,
                            "single-cross" => DecoderKind::SingleCrossAttention,
                            _ => return Err(format!("decoder: expected fusion or single-cross, got {v:?}")),
                        }
                    }
                    "trace" => {
                        m.trace = match v {
                            "enabled" => TraceMode::Enabled,
                            "zeroed" => TraceMode::Zeroed,
                            _ => return Err(format!("trace: expected enabled or zeroed, got {v:?}")),
                        }
                    }
                    _ => return Err(format!("unknown key {k:?}")),
                }
                Ok(())
            })();
            r.map_err(err)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Canonical text form; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("learning_rate", format!("{:?}", self.learning_rate));
        kv("warmup_iters", self.warmup_iters.to_string());
        kv("total_iters", self.total_iters.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("grad_accum_steps", self.grad_accum_steps.to_string());
        kv("lambda_txt", format!("{:?}", self.loss.lambda_txt));
        kv("lambda_mask", format!("{:?}", self.loss.lambda_mask));
        kv("lambda_bce", format!("{:?}", self.loss.lambda_bce));
        kv("lambda_dice", format!("{:?}", self.loss.lambda_dice));
        kv("seed", self.seed.to_string());
        kv("beta1", format!("{:?}", self.beta1));
        kv("beta2", format!("{:?}", self.beta2));
        kv("adam_eps", format!("{:?}", self.adam_eps));
        kv("weight_decay", format!("{:?}", self.weight_decay));
        kv("image_size", m.image_size.to_string());
        kv("patch_size", m.patch_size.to_string());
        kv("dim", m.dim.to_string());
        kv("heads", m.heads.to_string());
        kv("mlp_hidden", m.mlp_hidden.to_string());
        kv("trace_blocks", m.trace_blocks.to_string());
        kv("backbone_blocks", m.backbone_blocks.to_string());
        kv("lifted_channels", m.lifted_channels.to_string());
        kv("constrained_mid", m.constrained_mid.to_string());
        kv("d_llm", m.d_llm.to_string());
        kv("prompt_dim", m.prompt_dim.to_string());
        kv("stub_hidden", m.stub_hidden.to_string());
        kv("aux_tokens", m.aux_tokens.to_string());
        kv("decoder", decoder_name(m.decoder).into());
        kv("trace", trace_name(m.trace).into());
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| TrainError::Invalid(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

/// Linear warmup from 0 to the peak over `warmup_iters`, then linear decay
/// to 0 at `total_iters`.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> Result<f64> {
    let (w, t, peak) = (cfg.warmup_iters, cfg.total_iters, cfg.learning_rate);
    if iter > t {
        return Err(TrainError::IterOutOfRange { iter, total: t });
    }
    Ok(if iter < w {
        peak * iter as f64 / w as f64
    } else if t == w {
        peak
    } else {
        peak * (t - iter) as f64 / (t - w) as f64
    })
}

/// Adam moments for every trainable parameter, with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    ids: Vec<ParamId>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let ids = store.trainable_ids();
        let zeros = || ids.iter().map(|&id| vec![0f32; store.get(id).len()]).collect();
        AdamW {
            m: zeros(),
            v: zeros(),
            ids,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates every trainable parameter from `grads` (same order as the
    /// optimizer's ids); a missing gradient counts as zero.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Option<Vec<f32>>], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (k, &id) in self.ids.iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                let g = grads[k].as_ref().map_or(0.0, |g| g[i] as f64);
                let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = (mi / c1) / ((vi / c2).sqrt() + cfg.adam_eps) + cfg.weight_decay * p[i] as f64;
                p[i] = (p[i] as f64 - lr * update) as f32;
            }
        }
    }
}

/// One preloaded training example with its cached content features.
#[derive(Debug, Clone)]
pub struct Example {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub text: TokenSequence,
    pub content: Tensor<f32>,
}

/// Loads a dataset's images and computes content features once.
pub fn load_examples(model: &Model, store: &ParamStore<f32>, data: &DatasetManifest) -> Result<Vec<Example>> {
    let vocab = &model.vocab;
    (0..data.len())
        .map(|i| {
            let (image, mask) = data.load_pair(i)?;
            let content = model.content_features(store, &image)?;
            let text = vocab.encode(&data.records[i].text).map_err(ForgeError::from)?;
            Ok(Example {
                image,
                mask,
                text,
                content,
            })
        })
        .collect()
}

/// Per-step record of the mean losses over the step's samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub text: f64,
    pub mask: f64,
}

/// Sampler position: epoch `e` visits the examples in the order of a
/// shuffle seeded from `(seed, e)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerState {
    pub epoch: u64,
    pub cursor: u64,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub store: ParamStore<f32>,
    pub opt: AdamW,
    pub iter: usize,
    pub sampler: SamplerState,
    order: Vec<usize>,
}

fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut crate::forge::rng(sub_seed(seed, 0x5A3D_0000 + epoch)));
    order
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (model, store) = Model::build(cfg.model.clone(), cfg.seed)?;
        let store = store.cast::<f32>();
        let opt = AdamW::new(&store);
        Ok(Trainer {
            cfg,
            model,
            store,
            opt,
            iter: 0,
            sampler: SamplerState { epoch: 0, cursor: 0 },
            order: Vec::new(),
        })
    }

    /// Next `k` example indices from the epoch-shuffled stream.
    pub fn draw(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.order.len() != n {
                self.order = epoch_order(self.cfg.seed, self.sampler.epoch, n);
            }
            if self.sampler.cursor as usize >= n {
                self.sampler.epoch += 1;
                self.sampler.cursor = 0;
                self.order = epoch_order(self.cfg.seed, self.sampler.epoch, n);
            }
            out.push(self.order[self.sampler.cursor as usize]);
            self.sampler.cursor += 1;
        }
        out
    }

    /// Gradient of the mean loss over `batch`, in the optimizer's id order,
    /// plus the mean (total, text, mask) losses.
    pub fn gradients(&self, batch: &[&Example], step: usize) -> Result<(Vec<Option<Vec<f32>>>, [f64; 3])> {
        let mut acc: Vec<Option<Vec<f32>>> = vec![None; self.store.len()];
        let mut sums = [0f64; 3];
        let scale = 1.0 / batch.len() as f32;
        for ex in batch {
            let mut g = Graph::new(&self.store);
            let out = self.model.forward(&mut g, &ex.image, &ex.content)?;
            let (total, txt, mask) = self.model.loss(&mut g, &out, &ex.text, &ex.mask, &self.cfg.loss)?;
            // components before the total, so the message names the culprit
            for (k, (name, v)) in [(1, ("text", txt)), (2, ("mask", mask)), (0, ("total", total))] {
                let x = g.tape.value(v)[0] as f64;
                if !x.is_finite() {
                    return Err(TrainError::NonFinite {
                        step,
                        component: name,
                        value: x,
                    });
                }
                sums[k] += x;
            }
            g.tape.backward(total)?;
            for (id, grad) in g.param_grads() {
                let slot = acc[id.index()].get_or_insert_with(|| vec![0f32; grad.len()]);
                for (a, b) in slot.iter_mut().zip(&grad) {
                    *a += b * scale;
                }
            }
        }
        let n = batch.len() as f64;
        let ordered = self.opt.ids.iter().map(|id| acc[id.index()].take()).collect();
        Ok((ordered, sums.map(|s| s / n)))
    }

    /// One optimizer step over `batch_size × grad_accum_steps` examples
    /// drawn from `data`: micro-batch gradients are averaged, AdamW updates
    /// the trainable parameters, and the trace kernels are re-projected.
    pub fn step(&mut self, data: &[Example]) -> Result<StepLog> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let step = self.iter + 1;
        let (b, k) = (self.cfg.batch_size, self.cfg.grad_accum_steps);
        let idx = self.draw(data.len(), b * k);
        let mut total: Vec<Option<Vec<f32>>> = vec![None; self.opt.ids.len()];
        let mut losses = [0f64; 3];
        for micro in idx.chunks(b) {
            let batch: Vec<&Example> = micro.iter().map(|&i| &data[i]).collect();
            let (grads, l) = self.gradients(&batch, step)?;
            for (t, g) in total.iter_mut().zip(grads) {
                if let Some(g) = g {
                    let t = t.get_or_insert_with(|| vec![0f32; g.len()]);
                    for (a, b) in t.iter_mut().zip(&g) {
                        *a += b / k as f32;
                    }
                }
            }
            for (s, v) in losses.iter_mut().zip(l) {
                *s += v / k as f64;
            }
        }
        let lr = lr_at(step, &self.cfg)?;
        self.opt.step(&mut self.store, &total, lr, &self.cfg);
        self.model.project_constraints(&mut self.store);
        self.iter = step;
        Ok(StepLog {
            step,
            lr,
            loss: losses[0],
            text: losses[1],
            mask: losses[2],
        })
    }

    /// Runs the remaining iterations, calling `log` after each step.
    pub fn run(&mut self, data: &[Example], mut log: impl FnMut(&StepLog)) -> Result<()> {
        while self.iter < self.cfg.total_iters {
            let l = self.step(data)?;
            log(&l);
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            iter: self.iter,
            sampler: self.sampler,
            params: self.store.clone(),
        }
    }
}

/// Loads `manifest`, trains for `cfg.total_iters` steps and returns the
/// final checkpoint.
pub fn train(cfg: TrainConfig, manifest: &DatasetManifest, log: impl FnMut(&StepLog)) -> Result<Checkpoint> {
    let mut t = Trainer::new(cfg)?;
    let data = load_examples(&t.model, &t.store, manifest)?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    t.run(&data, log)?;
    Ok(t.checkpoint())
}

const META_CONFIG: &str = "meta.config";
const META_ITER: &str = "meta.iter";
const META_SAMPLER: &str = "meta.sampler";

/// Parameters plus everything needed to rebuild the model and continue the
/// data stream.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub iter: usize,
    pub sampler: SamplerState,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn to_arrays(&self) -> Vec<NamedArray> {
        let mut out = vec![
            NamedArray {
                name: META_CONFIG.into(),
                shape: vec![self.config.to_text().len()],
                data: ArrayData::U8(self.config.to_text().into_bytes()),
            },
            NamedArray {
                name: META_ITER.into(),
                shape: vec![1],
                data: ArrayData::U64(vec![self.iter as u64]),
            },
            NamedArray {
                name: META_SAMPLER.into(),
                shape: vec![2],
                data: ArrayData::U64(vec![self.sampler.epoch, self.sampler.cursor]),
            },
        ];
        for (_, name, t) in self.params.iter() {
            out.push(NamedArray {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: ArrayData::F32(t.data().to_vec()),
            });
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let err = |e: std::io::Error| TrainError::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        };
        let f = fs::File::create(path).map_err(err)?;
        let mut w = std::io::BufWriter::new(f);
        write_checkpoint(&mut w, &self.to_arrays()).map_err(err)?;
        use std::io::Write;
        w.flush().map_err(err)
    }

    /// Reads a checkpoint and rebuilds the model it belongs to.
    pub fn load(path: impl AsRef<Path>) -> Result<(Checkpoint, Model)> {
        let path = path.as_ref();
        let fail = |reason: String| TrainError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let f = fs::File::open(path).map_err(|e| fail(e.to_string()))?;
        let arrays = read_checkpoint(std::io::BufReader::new(f)).map_err(|e| fail(e.to_string()))?;
        let find = |name: &str| arrays.iter().find(|a| a.name == name).ok_or_else(|| fail(format!("missing {name}")));
        let config = match &find(META_CONFIG)?.data {
            ArrayData::U8(b) => {
                let text = String::from_utf8(b.clone()).map_err(|e| fail(format!("config is not UTF-8: {e}")))?;
                TrainConfig::parse(&text)?
            }
            _ => return Err(fail(format!("{META_CONFIG} has the wrong dtype"))),
        };
        let iter = match &find(META_ITER)?.data {
            ArrayData::U64(v) if v.len() == 1 => v[0] as usize,
            _ => return Err(fail(format!("{META_ITER} must be one u64"))),
        };
        let sampler = match &find(META_SAMPLER)?.data {
            ArrayData::U64(v) if v.len() == 2 => SamplerState {
                epoch: v[0],
                cursor: v[1],
            },
            _ => return Err(fail(format!("{META_SAMPLER} must be two u64"))),
        };
        let (model, fresh) = Model::build(config.model.clone(), config.seed)?;
        let mut params = fresh.cast::<f32>();
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            let name = params.name(id).to_string();
            let a = find(&name)?;
            let t = params.get_mut(id);
            if a.shape != t.shape() {
                return Err(fail(format!("{name}: shape {:?}, model expects {:?}", a.shape, t.shape())));
            }
            match &a.data {
                ArrayData::F32(v) => t.data_mut().copy_from_slice(v),
                _ => return Err(fail(format!("{name}: expected f32 values"))),
            }
        }
        let n_params = arrays.len() - 3;
        if n_params != params.len() {
            return Err(fail(format!("{n_params} parameter arrays, model has {}", params.len())));
        }
        Ok((
            Checkpoint {
                config,
                iter,
                sampler,
                params,
            },
            model,
        ))
    }
}

/// Default vocabulary file contents, for run directories.
pub fn vocab_file() -> String {
    Vocabulary::default().to_file_string()
}
