//! Toy joint training: a token embedder and a one-block attention classifier
//! trained together with learnable tokenizer coordinates.

use izoo_autograd::{cosine_lr, Adam, AdamConfig, ParamSet, Scalar, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::difaug::{augment_query, rand_augment};
use crate::error::{CoreError, Result};
use crate::inr2d::{Arch, Inr2d};
use crate::qc::{run_batch, QcPolicy};
use crate::seed::{self, item_seed};
use crate::synth::bars_image;
use crate::tokenizer::{reg_loss_var, Field, Strategy, TokenGrouping};

/// Named parameter tensors in a fixed order.
const PARAM_NAMES: [&str; 12] = [
    "embed.weight",
    "embed.bias",
    "embed.pos",
    "attn.q",
    "attn.k",
    "attn.v",
    "mlp.w1",
    "mlp.b1",
    "mlp.w2",
    "mlp.b2",
    "head.weight",
    "head.bias",
];

/// Embedder and classifier parameters, stored in 64-bit and bound to a tape per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub tokens: usize,
    pub token_dim: usize,
    pub embed: usize,
    pub classes: usize,
    /// Flat values in `PARAM_NAMES` order.
    pub params: Vec<Vec<f64>>,
}

/// Tape handles for one bound [`ToyModel`].
#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub embed_w: Var,
    pub embed_b: Var,
    pub pos: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
    pub head_w: Var,
    pub head_b: Var,
}

impl ModelVars {
    fn from_slice(v: &[Var]) -> Self {
        Self {
            embed_w: v[0],
            embed_b: v[1],
            pos: v[2],
            wq: v[3],
            wk: v[4],
            wv: v[5],
            mlp_w1: v[6],
            mlp_b1: v[7],
            mlp_w2: v[8],
            mlp_b2: v[9],
            head_w: v[10],
            head_b: v[11],
        }
    }
}

impl ToyModel {
    pub fn init(tokens: usize, token_dim: usize, embed: usize, classes: usize, seed: u64) -> Result<Self> {
        if tokens == 0 || token_dim == 0 || embed == 0 || classes < 2 {
            return Err(CoreError::invalid("toy model needs tokens, inputs, embedding and at least two classes"));
        }
        let mut rng = seed::rng(seed);
        let mut uniform = |n: usize, bound: f64| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-bound..bound)).collect() };
        let e = embed as f64;
        let params = vec![
            uniform(embed * token_dim, 1.0 / (token_dim as f64).sqrt()),
            vec![0.0; embed],
            uniform(tokens * embed, 0.02),
            uniform(embed * embed, 1.0 / e.sqrt()),
            uniform(embed * embed, 1.0 / e.sqrt()),
            uniform(embed * embed, 1.0 / e.sqrt()),
            uniform(2 * embed * embed, 1.0 / e.sqrt()),
            vec![0.0; 2 * embed],
            uniform(2 * embed * embed, 1.0 / (2.0 * e).sqrt()),
            vec![0.0; embed],
            uniform(classes * embed, 1.0 / e.sqrt()),
            vec![0.0; classes],
        ];
        Ok(Self {
            tokens,
            token_dim,
            embed,
            classes,
            params,
        })
    }

    fn shapes(&self) -> [Vec<usize>; 12] {
        let (n, d, e, c) = (self.tokens, self.token_dim, self.embed, self.classes);
        [
            vec![e, d],
            vec![e],
            vec![n, e],
            vec![e, e],
            vec![e, e],
            vec![e, e],
            vec![2 * e, e],
            vec![2 * e],
            vec![e, 2 * e],
            vec![e],
            vec![c, e],
            vec![c],
        ]
    }

    pub fn param_set<T: Scalar>(&self) -> ParamSet<T> {
        let mut set = ParamSet::new();
        for ((name, shape), values) in PARAM_NAMES.iter().zip(self.shapes()).zip(&self.params) {
            set.push(*name, Tensor::from_f64(&shape, values));
        }
        set
    }

    pub fn load_param_set<T: Scalar>(&mut self, set: &ParamSet<T>) {
        for (i, p) in self.params.iter_mut().enumerate() {
            *p = set.get(i).to_f64_vec();
        }
    }

    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> ModelVars {
        let vars: Vec<Var> = self
            .shapes()
            .iter()
            .zip(&self.params)
            .map(|(shape, values)| {
                let t = Tensor::from_f64(shape, values);
                if trainable {
                    tape.leaf(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        ModelVars::from_slice(&vars)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }
}

/// Shared per-token linear map plus positional embedding: `[N, K, C]` → `[N, E]`.
pub fn embed_tokens<T: Scalar>(tape: &mut Tape<T>, vars: &ModelVars, tokens: Var) -> Result<Var> {
    let shape = tape.shape(tokens).to_vec();
    if shape.len() != 3 {
        return Err(CoreError::invalid(format!("tokens must be [N, K, C], got {shape:?}")));
    }
    let flat = tape.reshape(tokens, &[shape[0], shape[1] * shape[2]])?;
    let e = tape.linear(flat, vars.embed_w, vars.embed_b)?;
    Ok(tape.add(e, vars.pos)?)
}

/// Single-head attention weights `[N, N]` for embedded tokens `[N, E]`.
pub fn attention<T: Scalar>(tape: &mut Tape<T>, vars: &ModelVars, x: Var) -> Result<Var> {
    let e = tape.shape(x)[1] as f64;
    let q = tape.matmul_t(x, vars.wq)?;
    let k = tape.matmul_t(x, vars.wk)?;
    let s = tape.matmul_t(q, k)?;
    let s = tape.scale(s, 1.0 / e.sqrt());
    Ok(tape.softmax(s))
}

/// Logits `[1, classes]` for one image's tokens: attention and a ReLU MLP,
/// each with a residual connection, then mean-pooling and a linear head.
pub fn classify<T: Scalar>(tape: &mut Tape<T>, vars: &ModelVars, tokens: Var) -> Result<Var> {
    let x = embed_tokens(tape, vars, tokens)?;
    let a = attention(tape, vars, x)?;
    let v = tape.matmul_t(x, vars.wv)?;
    let h = tape.matmul(a, v)?;
    let y = tape.add(x, h)?;
    let m = tape.linear(y, vars.mlp_w1, vars.mlp_b1)?;
    let m = tape.relu(m);
    let m = tape.linear(m, vars.mlp_w2, vars.mlp_b2)?;
    let y = tape.add(y, m)?;
    let pooled = tape.mean_axis(y, 0)?;
    let e = tape.shape(pooled)[0];
    let pooled = tape.reshape(pooled, &[1, e])?;
    Ok(tape.linear(pooled, vars.head_w, vars.head_b)?)
}

/// Logits `[B, classes]` for a batch of INRs queried at the grouping's coordinates.
/// `coords` is the activated `[N·K, D]` coordinate tensor.
pub fn forward<T: Scalar, F: Field>(
    tape: &mut Tape<T>,
    fields: &[&F],
    grouping: &TokenGrouping,
    coords: Var,
    vars: &ModelVars,
) -> Result<Var> {
    let rows = fields
        .iter()
        .map(|f| {
            let v = f.query_var(tape, coords)?;
            let t = tape.reshape(v, &[grouping.tokens(), grouping.per_token(), f.out_dim()])?;
            classify(tape, vars, t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(tape.concat(&rows, 0)?)
}

/// Plain 64-bit logits for one INR under the current grouping.
pub fn predict_logits(model: &ToyModel, grouping: &TokenGrouping, inr: &Inr2d) -> Result<Vec<f64>> {
    let mut tape = Tape::<f64>::new();
    let vars = model.bind(&mut tape, false);
    let raw = tape.constant(grouping.raw_tensor());
    let coords = grouping.activate(&mut tape, raw)?;
    let logits = forward(&mut tape, &[inr], grouping, coords, &vars)?;
    Ok(tape.value(logits).to_f64_vec())
}

pub fn predict(model: &ToyModel, grouping: &TokenGrouping, inr: &Inr2d) -> Result<usize> {
    let logits = predict_logits(model, grouping, inr)?;
    Ok(argmax(&logits))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fitted INRs with class labels.
#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub items: Vec<(Inr2d, usize)>,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Oriented-bar images, `per_class` per class, fitted under QC. Items
    /// failing the threshold are dropped.
    pub fn bars(
        size: usize,
        classes: usize,
        per_class: usize,
        arch: Arch,
        policy: &QcPolicy,
        seed: u64,
        workers: usize,
    ) -> Result<Self> {
        let mut images = Vec::with_capacity(classes * per_class);
        let mut labels = Vec::with_capacity(classes * per_class);
        for c in 0..classes {
            for k in 0..per_class {
                let id = format!("bars-{c}-{k}");
                let img = bars_image(size, size, c, classes, item_seed(seed, &id))?;
                images.push((id, img));
                labels.push(c);
            }
        }
        let mut items = Vec::with_capacity(images.len());
        for (res, label) in run_batch(&images, arch, policy, seed, workers).into_iter().zip(labels) {
            let (inr, rec) = res?;
            if rec.passed {
                items.push((inr, label));
            }
        }
        Ok(Self {
            height: size,
            width: size,
            classes,
            items,
        })
    }

    /// Seeded shuffle split into `(train, val)` index lists.
    pub fn split(&self, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut idx: Vec<usize> = (0..self.items.len()).collect();
        idx.shuffle(&mut seed::rng(seed));
        let n_val = ((self.items.len() as f64 * val_fraction).round() as usize).min(idx.len());
        let train = idx.split_off(n_val);
        (train, idx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentOptions {
    pub n_ops: usize,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub patch: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub w_reg: f64,
    /// Regularizer radius; defaults to the grouping's `min(1/H, 1/W)`.
    pub alpha: Option<f64>,
    pub embed: usize,
    pub val_fraction: f64,
    pub augment: Option<AugmentOptions>,
    /// Record activated coordinates after every epoch.
    pub trajectory: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::LearnablePixels,
            patch: 4,
            epochs: 300,
            batch: 4,
            lr: 1e-4,
            lr_min: 1e-6,
            w_reg: 1.0,
            alpha: None,
            embed: 32,
            val_fraction: 0.25,
            augment: None,
            trajectory: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub cross_entropy: f64,
    /// Regularizer value at the end of the epoch.
    pub reg: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub violating_pairs: usize,
}

#[derive(Debug, Clone)]
pub struct TrainedState {
    pub model: ToyModel,
    pub grouping: TokenGrouping,
    pub metrics: Vec<EpochMetrics>,
    pub val_accuracy: f64,
    pub trajectory: Vec<Vec<f64>>,
}

impl TrainedState {
    pub fn final_violating_pairs(&self) -> usize {
        self.metrics.last().map_or(0, |m| m.violating_pairs)
    }
}

pub fn accuracy(model: &ToyModel, grouping: &TokenGrouping, data: &ToyDataset, idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for &i in idx {
        let (inr, label) = &data.items[i];
        hits += (predict(model, grouping, inr)? == *label) as usize;
    }
    Ok(hits as f64 / idx.len() as f64)
}

/// Jointly train embedder, classifier and grouping coordinates with one Adam.
pub fn train_joint(data: &ToyDataset, cfg: &TrainConfig) -> Result<TrainedState> {
    if data.is_empty() || cfg.batch == 0 {
        return Err(CoreError::invalid("training needs data and a positive batch size"));
    }
    if !(cfg.lr > 0.0) || cfg.w_reg < 0.0 {
        return Err(CoreError::invalid("learning rate must be positive and w_reg non-negative"));
    }
    let mut grouping = TokenGrouping::build(cfg.strategy, &[data.height, data.width], cfg.patch, cfg.seed)?;
    let alpha = cfg.alpha.unwrap_or_else(|| grouping.default_alpha());
    let token_dim = grouping.per_token() * 3;
    let mut model = ToyModel::init(grouping.tokens(), token_dim, cfg.embed, data.classes, cfg.seed)?;
    let (train, val) = data.split(cfg.val_fraction, cfg.seed);
    if train.is_empty() {
        return Err(CoreError::invalid("split left no training items"));
    }

    let mut params = model.param_set::<f32>();
    let learnable = grouping.is_learnable();
    if learnable {
        params.push("tokenizer.raw", grouping.raw_tensor());
    }
    let mut adam = Adam::new(&params, AdamConfig::default());
    let steps_per_epoch = train.len().div_ceil(cfg.batch);
    let total = cfg.epochs * steps_per_epoch;
    let mut rng = seed::rng(cfg.seed ^ 0x5eed);
    let mut order = train.clone();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut trajectory = Vec::new();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut ce_sum, mut hits) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let mut tape = Tape::<f32>::new();
            let vars: Vec<Var> = params.values().iter().map(|t| tape.leaf(t.clone())).collect();
            let mv = ModelVars::from_slice(&vars);
            let raw = if learnable { vars[PARAM_NAMES.len()] } else { tape.constant(grouping.raw_tensor()) };
            let coords = grouping.activate(&mut tape, raw)?;
            let mut rows = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let inr = &data.items[i].0;
                let values = match cfg.augment {
                    Some(a) => {
                        let spec = rand_augment(rng.gen(), a.n_ops, a.magnitude)?;
                        augment_query(&mut tape, inr, &spec, coords, data.height, data.width)?.0
                    }
                    None => inr.query(&mut tape, coords)?,
                };
                let t = tape.reshape(values, &[grouping.tokens(), grouping.per_token(), 3])?;
                rows.push(classify(&mut tape, &mv, t)?);
            }
            let logits = tape.concat(&rows, 0)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| data.items[i].1).collect();
            let ce = tape.softmax_cross_entropy(logits, &labels)?;
            let loss = if cfg.w_reg > 0.0 && learnable {
                let r = reg_loss_var(&mut tape, coords, grouping.per_token(), alpha)?;
                let r = tape.scale(r, cfg.w_reg);
                tape.add(ce, r)?
            } else {
                ce
            };
            let lv = tape.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(CoreError::NonFiniteLoss {
                    iteration: step,
                    lr: cosine_lr(step, total, cfg.lr, cfg.lr_min),
                });
            }
            let lg = tape.value(logits).to_f64_vec();
            for (r, &label) in lg.chunks(data.classes).zip(&labels) {
                hits += (argmax(r) == label) as usize;
            }
            loss_sum += lv * chunk.len() as f64;
            ce_sum += tape.value(ce).item() as f64 * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor<f32>> = vars
                .iter()
                .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
                .collect();
            adam.step(&mut params, &g, cosine_lr(step, total, cfg.lr, cfg.lr_min))?;
            step += 1;
        }
        model.load_param_set(&params);
        if learnable {
            grouping.set_raw(params.get(PARAM_NAMES.len()).to_f64_vec())?;
        }
        if cfg.trajectory {
            trajectory.push(grouping.activated());
        }
        let n = train.len() as f64;
        metrics.push(EpochMetrics {
            epoch,
            loss: loss_sum / n,
            cross_entropy: ce_sum / n,
            reg: grouping.reg_value(alpha),
            train_accuracy: hits as f64 / n,
            val_accuracy: accuracy(&model, &grouping, data, &val)?,
            violating_pairs: grouping.close_pairs(alpha),
        });
    }
    let val_accuracy = metrics.last().map_or(accuracy(&model, &grouping, data, &val)?, |m| m.val_accuracy);
    Ok(TrainedState {
        model,
        grouping,
        metrics,
        val_accuracy,
        trajectory,
    })
}
