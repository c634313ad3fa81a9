//! A small fully connected ReLU network trained with label smoothing by
//! mini-batch SGD with momentum.
//!
//! Everything runs in `f64` on one thread. Given the same data and
//! [`TrainConfig`] the resulting parameters are bitwise reproducible: the
//! shuffle order is drawn from a seeded generator and batch gradients are
//! summed sequentially in sample order.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_dataset, write_logit_records, LogitRecord, MixtureSpec, Sample};
use crate::error::{Error, Result};
use crate::losses::{grad_ls_logits, SmoothingConfig, TargetDistribution};
use crate::scores::{logsumexp, softmax, softmax_into, LogitVector};

pub const INIT_SCHEME: &str = "uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
}

/// Dense layer, weights stored row-major as `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn affine(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.inputs).zip(&self.biases))
        {
            *o = b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Layer>,
    activation: Activation,
}

/// Gradients with the same layout as the model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    fn zeros_like(model: &MlpModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    fn clear(&mut self) {
        for l in &mut self.layers {
            l.weights.fill(0.0);
            l.biases.fill(0.0);
        }
    }

    /// All entries, layer by layer, weights before biases.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect()
    }
}

impl MlpModel {
    /// All-zero parameters for the given layer sizes `[input, hidden.., output]`.
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidConfig(format!("bad layer sizes {sizes:?}")));
        }
        if *sizes.last().unwrap() < 2 {
            return Err(Error::InvalidConfig(
                "output layer needs at least 2 classes".into(),
            ));
        }
        Ok(Self {
            layers: sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
            activation: Activation::Relu,
        })
    }

    /// Fan-in scaled uniform initialisation, see [`INIT_SCHEME`].
    pub fn init(sizes: &[usize], seed: u64) -> Result<Self> {
        let mut model = Self::zeros(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &mut model.layers {
            let bound = 1.0 / (l.inputs as f64).sqrt();
            for w in l.weights.iter_mut().chain(l.biases.iter_mut()) {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(model)
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig(
                "model needs at least one layer".into(),
            ));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.biases.len() != l.outputs {
                return Err(Error::InvalidConfig(format!(
                    "layer {i} has inconsistent shapes"
                )));
            }
            if i > 0 && layers[i - 1].outputs != l.inputs {
                return Err(Error::InvalidConfig(format!(
                    "layer {i} input size mismatch"
                )));
            }
        }
        if layers.last().unwrap().outputs < 2 {
            return Err(Error::InvalidConfig(
                "output layer needs at least 2 classes".into(),
            ));
        }
        Ok(Self {
            layers,
            activation: Activation::Relu,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].inputs)
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// Mutable access to parameter `i` in [`Gradients::flatten`] order.
    pub fn parameter_mut(&mut self, mut i: usize) -> Option<&mut f64> {
        for l in &mut self.layers {
            if i < l.weights.len() {
                return Some(&mut l.weights[i]);
            }
            i -= l.weights.len();
            if i < l.biases.len() {
                return Some(&mut l.biases[i]);
            }
            i -= l.biases.len();
        }
        None
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|w| w.is_finite()))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has dimension {}, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<LogitVector> {
        self.check_input(x)?;
        let mut ws = Workspace::new(self);
        self.forward_ws(x, &mut ws);
        LogitVector::new(ws.pre.last().unwrap().clone())
    }

    /// Fills `ws.pre` (pre-activations) and `ws.post` (activations).
    fn forward_ws(&self, x: &[f64], ws: &mut Workspace) {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (done, rest) = ws.post.split_at_mut(i);
            let input: &[f64] = if i == 0 { x } else { &done[i - 1] };
            layer.affine(input, &mut ws.pre[i]);
            if i < last {
                for (a, h) in rest[0].iter_mut().zip(&ws.pre[i]) {
                    *a = h.max(0.0);
                }
            }
        }
    }

    /// Back-propagates `ws.delta[last]` (the logit gradient) and adds the
    /// parameter gradients into `grads`. Requires a prior `forward_ws`.
    fn backward_ws(&self, x: &[f64], ws: &mut Workspace, grads: &mut Gradients) {
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input: &[f64] = if i == 0 { x } else { &ws.post[i - 1] };
            let g = &mut grads.layers[i];
            let (lower, upper) = ws.delta.split_at_mut(i);
            let delta = &upper[0];
            for ((grow, gb), d) in g
                .weights
                .chunks_exact_mut(layer.inputs)
                .zip(g.biases.iter_mut())
                .zip(delta)
            {
                *gb += d;
                if *d != 0.0 {
                    for (gw, a) in grow.iter_mut().zip(input) {
                        *gw += d * a;
                    }
                }
            }
            if i > 0 {
                let below = &mut lower[i - 1];
                below.fill(0.0);
                for (row, d) in layer.weights.chunks_exact(layer.inputs).zip(delta) {
                    if *d != 0.0 {
                        for (b, w) in below.iter_mut().zip(row) {
                            *b += d * w;
                        }
                    }
                }
                for (b, h) in below.iter_mut().zip(&ws.pre[i - 1]) {
                    if *h <= 0.0 {
                        *b = 0.0;
                    }
                }
            }
        }
    }

    /// Parameter gradients of an arbitrary logit-level gradient `seed`.
    pub fn backprop_logit_gradient(&self, x: &[f64], seed: &[f64]) -> Result<Gradients> {
        self.check_input(x)?;
        if seed.len() != self.num_classes() {
            return Err(Error::invalid(format!(
                "seed gradient has {} entries, model has {} classes",
                seed.len(),
                self.num_classes()
            )));
        }
        let mut ws = Workspace::new(self);
        let mut grads = Gradients::zeros_like(self);
        self.forward_ws(x, &mut ws);
        ws.delta.last_mut().unwrap().copy_from_slice(seed);
        self.backward_ws(x, &mut ws, &mut grads);
        Ok(grads)
    }

    /// Gradients of `loss_ls(softmax(forward(x)), target, cfg)` with respect
    /// to every parameter.
    pub fn backward(
        &self,
        x: &[f64],
        target: &TargetDistribution,
        cfg: &SmoothingConfig,
    ) -> Result<Gradients> {
        let logits = self.forward(x)?;
        let seed = grad_ls_logits(&softmax(&logits), target, cfg)?;
        self.backprop_logit_gradient(x, &seed)
    }
}

struct Workspace {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

impl Workspace {
    fn new(model: &MlpModel) -> Self {
        let sizes: Vec<usize> = model.layers.iter().map(|l| l.outputs).collect();
        let alloc = || sizes.iter().map(|s| vec![0.0; *s]).collect::<Vec<_>>();
        Self {
            pre: alloc(),
            post: alloc(),
            delta: alloc(),
            probs: vec![0.0; model.num_classes()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            epochs: 60,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            hidden: vec![64, 64],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !self.alpha.is_finite() || self.alpha > 1.0 {
            return bad(format!("alpha must be <= 1, got {}", self.alpha));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        Ok(())
    }

    pub fn layer_sizes(&self, input: usize, classes: usize) -> Vec<usize> {
        std::iter::once(input)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(classes))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub model: MlpModel,
    /// Mean training loss of each epoch, measured during the epoch.
    pub epoch_losses: Vec<f64>,
}

/// Draws `n_train` points from `spec` and trains on them.
pub fn train(spec: &MixtureSpec, n_train: usize, tcfg: &TrainConfig) -> Result<MlpModel> {
    let data = sample_dataset(spec, n_train);
    Ok(train_on(&data, spec.num_classes(), tcfg)?.model)
}

pub fn train_on(data: &[Sample], num_classes: usize, tcfg: &TrainConfig) -> Result<TrainRun> {
    tcfg.validate()?;
    let dim = data
        .first()
        .map(|s| s.x.len())
        .ok_or_else(|| Error::invalid("empty training set"))?;
    let smoothing = SmoothingConfig::new(tcfg.alpha, num_classes)?;
    let mut model = MlpModel::init(&tcfg.layer_sizes(dim, num_classes), tcfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    rng.set_stream(1);

    let uniform = tcfg.alpha / num_classes as f64;
    let mut ws = Workspace::new(&model);
    let mut grads = Gradients::zeros_like(&model);
    let mut velocity = Gradients::zeros_like(&model);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(tcfg.epochs);

    for epoch in 0..tcfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(tcfg.batch_size) {
            grads.clear();
            for &i in batch {
                let s = &data[i];
                if s.label >= num_classes || s.x.len() != dim {
                    return Err(Error::invalid(format!("sample {i} does not fit the model")));
                }
                model.forward_ws(&s.x, &mut ws);
                let logits = ws.pre.last().unwrap();
                let lse = logsumexp(logits);
                softmax_into(logits, &mut ws.probs);
                let seed = ws.delta.last_mut().unwrap();
                for (k, (d, p)) in seed.iter_mut().zip(&ws.probs).enumerate() {
                    let t = if k == s.label {
                        1.0 - smoothing.alpha()
                    } else {
                        0.0
                    } + uniform;
                    *d = p - t;
                    total += t * (lse - logits[k]);
                }
                model.backward_ws(&s.x, &mut ws, &mut grads);
            }
            let scale = 1.0 / batch.len() as f64;
            for ((layer, g), v) in model
                .layers
                .iter_mut()
                .zip(&grads.layers)
                .zip(&mut velocity.layers)
            {
                let params = layer.weights.iter_mut().chain(layer.biases.iter_mut());
                let gs = g.weights.iter().chain(&g.biases);
                let vs = v.weights.iter_mut().chain(v.biases.iter_mut());
                for ((w, g), v) in params.zip(gs).zip(vs) {
                    *v = tcfg.momentum * *v + g * scale + tcfg.weight_decay * *w;
                    *w -= tcfg.learning_rate * *v;
                }
            }
        }
        let mean = total / data.len() as f64;
        if !mean.is_finite() || !model.all_finite() {
            return Err(Error::Diverged { epoch });
        }
        epoch_losses.push(mean);
    }
    Ok(TrainRun {
        model,
        epoch_losses,
    })
}

/// Evaluates the model on every sample and packages the logits.
pub fn logit_records(
    model: &MlpModel,
    data: &[Sample],
    source_tag: Option<&str>,
) -> Result<Vec<LogitRecord>> {
    data.iter()
        .map(|s| LogitRecord::new(model.forward(&s.x)?, s.label, source_tag.map(String::from)))
        .collect()
}

/// Writes the logit-record file for `data` and returns the row count.
pub fn dump_logits(
    model: &MlpModel,
    data: &[Sample],
    source_tag: Option<&str>,
    path: &Path,
) -> Result<usize> {
    let records = logit_records(model, data, source_tag)?;
    write_logit_records(path, model.num_classes(), &records)?;
    Ok(records.len())
}
