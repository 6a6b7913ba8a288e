//! A small 2→H→H→C rectifier network with either an evidential head
//! (α = ReLU(s) + 1) or a softmax head, trained by manual backpropagation
//! and Adam.

use serde::{Deserialize, Serialize};

use crate::dirichlet::{argmax, mean_probability, DirichletParams};
use crate::error::{Error, Result};
use crate::gradients::{flat_kl_grad_alpha, uce_grad_alpha, ufce_grad_alpha};
use crate::losses::{
    energy_score, ent_regularizer, eus_multiplier, softmax, softmax_entropy, uce, ufce, LossConfig,
    ENERGY_BOUND_WEIGHT,
};
use crate::metrics::{evaluate, Scorer};
use crate::rng::Stream;
use crate::synth::{DatasetSplit, LabeledPoint, Role};

pub const MODEL_VERSION: &str = "evidloss-model-v1";
pub const PROB_CLAMP: f64 = 1e-12;
pub const INPUT_DIM: usize = 2;

const INIT_STREAM: u64 = 0;
const EVIDENTIAL_HEAD_BIAS: f64 = 6.0;
const SHUFFLE_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    UceEnt,
    Ufce,
    UfceEusEr,
    UceEusEr,
    Ce,
    Focal,
    EnergyBoundedCe,
    EnergyBoundedFocal,
}

impl LossKind {
    pub const ALL: [LossKind; 8] = [
        LossKind::UceEnt,
        LossKind::Ufce,
        LossKind::UfceEusEr,
        LossKind::UceEusEr,
        LossKind::Ce,
        LossKind::Focal,
        LossKind::EnergyBoundedCe,
        LossKind::EnergyBoundedFocal,
    ];

    pub fn head(self) -> Head {
        match self {
            LossKind::UceEnt | LossKind::Ufce | LossKind::UfceEusEr | LossKind::UceEusEr => {
                Head::Evidential
            }
            _ => Head::Softmax,
        }
    }

    /// Whether pseudo-OOD samples take part in the objective.
    pub fn uses_ood(self) -> bool {
        matches!(
            self,
            LossKind::UfceEusEr
                | LossKind::UceEusEr
                | LossKind::EnergyBoundedCe
                | LossKind::EnergyBoundedFocal
        )
    }

    fn uses_eus(self) -> bool {
        matches!(self, LossKind::UfceEusEr | LossKind::UceEusEr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Evidential,
    Softmax,
}

impl Head {
    /// Scorer used for the OOD task when none is requested explicitly.
    pub fn default_scorer(self) -> Scorer {
        match self {
            Head::Evidential => Scorer::Evidential,
            Head::Softmax => Scorer::Entropy,
        }
    }
}

/// Fully connected layer; `weights` is row-major with one row per output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, b) in self.weights.chunks_exact(self.inputs).zip(&self.bias) {
            out.push(b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>());
        }
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.bias)
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub version: String,
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub head: Head,
    /// Energy-score temperature.
    pub temperature: f64,
    pub layers: Vec<Dense>,
}

/// Logits and the Dirichlet parameters read off them.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Vec<f64>,
    pub alpha: DirichletParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Uncertainties {
    pub p_bar: Vec<f64>,
    pub u_alea: f64,
    pub u_epis: f64,
    pub energy: f64,
    pub softmax_entropy: f64,
}

impl Uncertainties {
    pub fn predicted_class(&self) -> usize {
        argmax(&self.p_bar)
    }
}

/// Layer inputs and pre-activations from one forward pass.
struct Cache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Cache {
    fn logits(&self) -> &[f64] {
        self.pre.last().expect("at least one layer")
    }
}

fn relu_grad(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        0.0
    }
}

fn evidential_alpha(logits: &[f64]) -> Result<DirichletParams> {
    DirichletParams::new(logits.iter().map(|s| s.max(0.0) + 1.0).collect())
}

impl MlpModel {
    pub fn zeros(hidden: usize, classes: usize, head: Head) -> Self {
        MlpModel {
            version: MODEL_VERSION.to_string(),
            input_dim: INPUT_DIM,
            hidden,
            classes,
            head,
            temperature: 1.0,
            layers: vec![
                Dense::zeros(INPUT_DIM, hidden),
                Dense::zeros(hidden, hidden),
                Dense::zeros(hidden, classes),
            ],
        }
    }

    /// He-normal weights and zero biases, except that an evidential head
    /// starts with positive logit biases so every class receives gradient.
    pub fn init(hidden: usize, classes: usize, head: Head, seed: u64) -> Self {
        let mut model = MlpModel::zeros(hidden, classes, head);
        let mut stream = Stream::new(seed, INIT_STREAM);
        for layer in &mut model.layers {
            let scale = (2.0 / layer.inputs as f64).sqrt();
            for w in &mut layer.weights {
                *w = scale * stream.normal();
            }
        }
        if head == Head::Evidential {
            model.layers[2]
                .bias
                .iter_mut()
                .for_each(|b| *b = EVIDENTIAL_HEAD_BIAS);
        }
        model
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.params().copied())
            .collect()
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                got: values.len(),
            });
        }
        let slots = self.layers.iter_mut().flat_map(|l| l.params_mut());
        for (slot, &v) in slots.zip(values) {
            *slot = v;
        }
        Ok(())
    }

    fn run(&self, x: &[f64]) -> Result<Cache> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        let depth = self.layers.len();
        let mut inputs = Vec::with_capacity(depth);
        let mut pre = Vec::with_capacity(depth);
        let mut a = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.outputs);
            layer.apply(&a, &mut z);
            let next = if i + 1 < depth {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                Vec::new()
            };
            inputs.push(std::mem::replace(&mut a, next));
            pre.push(z);
        }
        let cache = Cache { inputs, pre };
        if cache.logits().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(cache)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        let cache = self.run(x)?;
        let logits = cache.logits().to_vec();
        let alpha = evidential_alpha(&logits)?;
        Ok(Forward { logits, alpha })
    }

    /// Expected probabilities come from α for the evidential head and from
    /// the softmax otherwise; the epistemic score is C/α0 in both cases.
    pub fn predict_uncertainties(&self, x: &[f64]) -> Result<Uncertainties> {
        let f = self.forward(x)?;
        let p_bar = match self.head {
            Head::Evidential => mean_probability(&f.alpha).into_vec(),
            Head::Softmax => softmax(&f.logits),
        };
        let u_alea = -p_bar.iter().fold(f64::NEG_INFINITY, |m, &p| m.max(p));
        Ok(Uncertainties {
            u_alea,
            u_epis: self.classes as f64 / f.alpha.alpha0(),
            energy: energy_score(&f.logits, self.temperature)?,
            softmax_entropy: softmax_entropy(&f.logits)?,
            p_bar,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("version").and_then(|v| v.as_str()) {
            Some(MODEL_VERSION) => {}
            Some(other) => return Err(Error::Version(other.to_string())),
            None => return Err(Error::Version("<missing>".into())),
        }
        let model: MlpModel = serde_json::from_value(value)?;
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let dims = [
            (self.input_dim, self.hidden),
            (self.hidden, self.hidden),
            (self.hidden, self.classes),
        ];
        if self.layers.len() != dims.len() || self.classes < 2 || self.hidden == 0 {
            return Err(Error::InvalidInput("model architecture mismatch".into()));
        }
        for (layer, &(i, o)) in self.layers.iter().zip(&dims) {
            if layer.inputs != i
                || layer.outputs != o
                || layer.weights.len() != i * o
                || layer.bias.len() != o
            {
                return Err(Error::InvalidInput("model layer shape mismatch".into()));
            }
        }
        if self.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(())
    }
}

/// Parameter gradients of one batch objective.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f64,
    /// Same shapes as the model layers.
    pub layers: Vec<Dense>,
    /// Frozen epistemic multipliers, one per batch element (1 where unused).
    pub eus_multipliers: Vec<f64>,
    /// Contributing samples whose logits are all ≤ 0, so no gradient reaches α.
    pub dead_samples: usize,
}

impl Gradients {
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.params().copied())
            .collect()
    }
}

fn contributes(kind: LossKind, p: &LabeledPoint) -> bool {
    p.label.is_some() || (p.role != Role::Id && kind.uses_ood())
}

/// Loss contribution of one sample and its derivative with respect to the
/// logits. `id_scale` and `ood_scale` are the reciprocal group sizes.
fn head_terms(
    logits: &[f64],
    point: &LabeledPoint,
    kind: LossKind,
    cfg: &LossConfig,
    (id_scale, ood_scale): (f64, f64),
    eus: f64,
) -> Result<(f64, Vec<f64>)> {
    match kind.head() {
        Head::Evidential => {
            let alpha = evidential_alpha(logits)?;
            let (value, mut grad) = match point.label {
                Some(c) => {
                    let (v, g) = match kind {
                        LossKind::UceEnt => {
                            let mut v = uce(&alpha, c)?;
                            let mut g = uce_grad_alpha(&alpha, c)?;
                            if cfg.beta != 0.0 {
                                v += cfg.beta * ent_regularizer(&alpha)?;
                                let kl = flat_kl_grad_alpha(&alpha)?;
                                g.iter_mut().zip(kl).for_each(|(a, b)| *a += cfg.beta * b);
                            }
                            (v, g)
                        }
                        LossKind::Ufce => (
                            ufce(&alpha, c, cfg.gamma)?,
                            ufce_grad_alpha(&alpha, c, cfg.gamma)?,
                        ),
                        LossKind::UfceEusEr => (
                            eus * ufce(&alpha, c, cfg.gamma)?,
                            scaled(ufce_grad_alpha(&alpha, c, cfg.gamma)?, eus),
                        ),
                        LossKind::UceEusEr => (
                            eus * uce(&alpha, c)?,
                            scaled(uce_grad_alpha(&alpha, c)?, eus),
                        ),
                        _ => unreachable!("deterministic kinds use the softmax head"),
                    };
                    let w = cfg.class_weight(c) * id_scale;
                    (w * v, scaled(g, w))
                }
                None => {
                    let w = cfg.lambda * ood_scale;
                    (
                        w * ent_regularizer(&alpha)?,
                        scaled(flat_kl_grad_alpha(&alpha)?, w),
                    )
                }
            };
            for (g, &s) in grad.iter_mut().zip(logits) {
                *g *= relu_grad(s);
            }
            Ok((value, grad))
        }
        Head::Softmax => {
            let mut value = 0.0;
            let mut grad = vec![0.0; logits.len()];
            if let Some(c) = point.label {
                let p = softmax(logits);
                let raw = p[c];
                let pc = raw.max(PROB_CLAMP);
                let gamma = match kind {
                    LossKind::Ce | LossKind::EnergyBoundedCe => 0.0,
                    _ => cfg.gamma,
                };
                let q = 1.0 - pc;
                let w = cfg.class_weight(c) * id_scale;
                value += w * -(q.powf(gamma) * pc.ln());
                if raw >= PROB_CLAMP {
                    let lead = if gamma == 0.0 || q <= 0.0 {
                        0.0
                    } else {
                        gamma * q.powf(gamma - 1.0) * pc.ln()
                    };
                    let dl_dpc = w * (lead - q.powf(gamma) / pc);
                    for (j, g) in grad.iter_mut().enumerate() {
                        let delta = if j == c { 1.0 } else { 0.0 };
                        *g += dl_dpc * pc * (delta - p[j]);
                    }
                }
            }
            if matches!(
                kind,
                LossKind::EnergyBoundedCe | LossKind::EnergyBoundedFocal
            ) {
                let t = cfg.temperature;
                let energy = energy_score(logits, t)?;
                let (hinge, sign, scale) = match point.label {
                    Some(_) => ((energy - cfg.m_in).max(0.0), 1.0, id_scale),
                    None => ((cfg.m_out - energy).max(0.0), -1.0, ood_scale),
                };
                let w = ENERGY_BOUND_WEIGHT * scale;
                value += w * hinge * hinge;
                let dl_de = w * 2.0 * hinge * sign;
                let scaled_logits: Vec<f64> = logits.iter().map(|l| l / t).collect();
                for (g, q) in grad.iter_mut().zip(softmax(&scaled_logits)) {
                    *g -= dl_de * q;
                }
            }
            Ok((value, grad))
        }
    }
}

fn scaled(mut v: Vec<f64>, s: f64) -> Vec<f64> {
    v.iter_mut().for_each(|x| *x *= s);
    v
}

fn group_scales(batch: &[LabeledPoint], kind: LossKind) -> (f64, f64) {
    let n_id = batch.iter().filter(|p| p.label.is_some()).count();
    let n_ood = batch
        .iter()
        .filter(|p| p.label.is_none() && contributes(kind, p))
        .count();
    let inv = |n: usize| if n == 0 { 0.0 } else { 1.0 / n as f64 };
    (inv(n_id), inv(n_ood))
}

fn check_batch(model: &MlpModel, batch: &[LabeledPoint], kind: LossKind) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if kind.head() != model.head {
        return Err(Error::InvalidConfig(format!(
            "train.loss_kind: {kind:?} needs a {:?} head",
            kind.head()
        )));
    }
    for p in batch {
        if let Some(c) = p.label {
            if c >= model.classes {
                return Err(Error::ClassIndex {
                    index: c,
                    classes: model.classes,
                });
            }
        }
    }
    Ok(())
}

fn eus_for(
    model: &MlpModel,
    logits: &[f64],
    p: &LabeledPoint,
    kind: LossKind,
    xi: f64,
) -> Result<f64> {
    if !(kind.uses_eus() && p.label.is_some()) {
        return Ok(1.0);
    }
    let alpha0 = evidential_alpha(logits)?.alpha0();
    Ok(eus_multiplier(alpha0, model.classes, xi))
}

/// The batch objective. With `frozen_eus` the epistemic multipliers are
/// taken as given instead of being read off the current forward pass.
pub fn batch_loss(
    model: &MlpModel,
    batch: &[LabeledPoint],
    kind: LossKind,
    cfg: &LossConfig,
    frozen_eus: Option<&[f64]>,
) -> Result<f64> {
    check_batch(model, batch, kind)?;
    let scales = group_scales(batch, kind);
    let mut total = 0.0;
    for (i, p) in batch.iter().enumerate() {
        if !contributes(kind, p) {
            continue;
        }
        let cache = model.run(&p.x)?;
        let eus = match frozen_eus {
            Some(m) => m[i],
            None => eus_for(model, cache.logits(), p, kind, cfg.xi)?,
        };
        total += head_terms(cache.logits(), p, kind, cfg, scales, eus)?.0;
    }
    Ok(total)
}

/// Exact parameter gradients of [`batch_loss`], with the epistemic
/// multipliers held constant.
pub fn backward(
    model: &MlpModel,
    batch: &[LabeledPoint],
    kind: LossKind,
    cfg: &LossConfig,
) -> Result<Gradients> {
    check_batch(model, batch, kind)?;
    let scales = group_scales(batch, kind);
    let mut grads: Vec<Dense> = model
        .layers
        .iter()
        .map(|l| Dense::zeros(l.inputs, l.outputs))
        .collect();
    let mut loss = 0.0;
    let mut multipliers = vec![1.0; batch.len()];
    let mut dead = 0;
    for (i, p) in batch.iter().enumerate() {
        if !contributes(kind, p) {
            continue;
        }
        let cache = model.run(&p.x)?;
        let eus = eus_for(model, cache.logits(), p, kind, cfg.xi)?;
        multipliers[i] = eus;
        let (value, mut delta) = head_terms(cache.logits(), p, kind, cfg, scales, eus)?;
        loss += value;
        if model.head == Head::Evidential && cache.logits().iter().all(|&s| s <= 0.0) {
            dead += 1;
        }
        for l in (0..model.layers.len()).rev() {
            let layer = &model.layers[l];
            let input = &cache.inputs[l];
            let g = &mut grads[l];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                row.iter_mut().zip(input).for_each(|(w, &a)| *w += d * a);
            }
            if l == 0 {
                break;
            }
            let below = &cache.pre[l - 1];
            let mut next = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                next.iter_mut().zip(row).for_each(|(n, &w)| *n += d * w);
            }
            for (n, &z) in next.iter_mut().zip(below) {
                *n *= relu_grad(z);
            }
            delta = next;
        }
    }
    Ok(Gradients {
        loss,
        layers: grads,
        eus_multipliers: multipliers,
        dead_samples: dead,
    })
}

fn default_loss_kind() -> LossKind {
    LossKind::UfceEusEr
}

/// Optimizer and schedule settings. `loss` and `seed` are supplied by the
/// enclosing run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_loss_kind")]
    pub loss_kind: LossKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub hidden: usize,
    #[serde(skip)]
    pub loss: LossConfig,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss_kind: default_loss_kind(),
            learning_rate: 1e-3,
            weight_decay: 1e-7,
            batch_size: 128,
            epochs: 50,
            hidden: 64,
            loss: LossConfig::default(),
            seed: 7,
        }
    }
}

impl TrainConfig {
    /// Checks a user-supplied configuration.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(
                "train.learning_rate: must be positive".into(),
            ));
        }
        self.check_runnable()
    }

    /// The weaker check `train` enforces; a zero learning rate is allowed
    /// and leaves the parameters untouched.
    fn check_runnable(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::InvalidConfig(format!("train.{key}: {why}")));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate", "must be finite and non-negative");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be finite and non-negative");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.hidden == 0 {
            return bad("hidden", "must be at least 1");
        }
        self.loss.validate()
    }
}

/// Adam with L2 weight decay folded into the gradient.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, model: &mut MlpModel, grads: &Gradients, lr: f64, weight_decay: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let g_iter = grads.layers.iter().flat_map(|l| l.params());
        let p_iter = model.layers.iter_mut().flat_map(|l| l.params_mut());
        for (((p, &g), m), v) in p_iter.zip(g_iter).zip(&mut self.m).zip(&mut self.v) {
            let g = g + weight_decay * *p;
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Objective over the whole training set at the end of the epoch.
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_ece: f64,
    pub val_mis_auroc: Option<f64>,
    pub val_ood_auroc: Option<f64>,
    pub val_ood_aupr: Option<f64>,
}

/// Epoch 0 holds the initial model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const CSV_HEADER: [&'static str; 7] = [
        "epoch",
        "train_loss",
        "val_accuracy",
        "val_ece",
        "val_mis_auroc",
        "val_ood_auroc",
        "val_ood_aupr",
    ];

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(Self::CSV_HEADER).map_err(io)?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.val_accuracy.to_string(),
                r.val_ece.to_string(),
                opt(r.val_mis_auroc),
                opt(r.val_ood_auroc),
                opt(r.val_ood_aupr),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn record(
    epoch: usize,
    model: &MlpModel,
    train_set: &[LabeledPoint],
    val: &[LabeledPoint],
    cfg: &TrainConfig,
) -> Result<EpochRecord> {
    let train_loss = batch_loss(model, train_set, cfg.loss_kind, &cfg.loss, None)?;
    let m = evaluate(model, val, model.head.default_scorer())?;
    Ok(EpochRecord {
        epoch,
        train_loss,
        val_accuracy: m.accuracy,
        val_ece: m.ece,
        val_mis_auroc: m.mis_auroc,
        val_ood_auroc: m.ood_auroc,
        val_ood_aupr: m.ood_aupr,
    })
}

fn diverged(epoch: usize, batch: usize, reason: impl Into<String>) -> Error {
    Error::Divergence {
        epoch,
        batch,
        reason: reason.into(),
    }
}

/// Trains a fresh model on `split.train`, recording validation metrics on
/// `split.val` after every epoch.
pub fn train(cfg: &TrainConfig, split: &DatasetSplit) -> Result<(MlpModel, TrainHistory)> {
    cfg.check_runnable()?;
    let kind = cfg.loss_kind;
    let train_set: Vec<LabeledPoint> = split
        .train
        .iter()
        .filter(|p| contributes(kind, p))
        .copied()
        .collect();
    let classes = train_set
        .iter()
        .filter_map(|p| p.label)
        .max()
        .map_or(0, |m| m + 1);
    if classes < 2 {
        return Err(Error::InvalidInput(
            "training data must cover at least two classes".into(),
        ));
    }
    if split.val.iter().all(|p| p.label.is_none()) {
        return Err(Error::InvalidInput(
            "validation split has no labeled points".into(),
        ));
    }
    let mut model = MlpModel::init(cfg.hidden, classes, kind.head(), cfg.seed);
    model.temperature = cfg.loss.temperature;
    let mut adam = Adam::new(model.num_params());
    let mut shuffle = Stream::new(cfg.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory::default();
    history
        .records
        .push(record(0, &model, &train_set, &split.val, cfg)?);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 1..=cfg.epochs {
        shuffle.shuffle(&mut order);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train_set[i]));
            let grads = backward(&model, &batch, kind, &cfg.loss)
                .map_err(|e| diverged(epoch, b, e.to_string()))?;
            if !grads.loss.is_finite() {
                return Err(diverged(epoch, b, "non-finite loss"));
            }
            adam.step(&mut model, &grads, cfg.learning_rate, cfg.weight_decay);
            if model
                .layers
                .iter()
                .flat_map(|l| l.params())
                .any(|p| !p.is_finite())
            {
                return Err(diverged(epoch, b, "non-finite parameters"));
            }
        }
        let rec = record(epoch, &model, &train_set, &split.val, cfg)
            .map_err(|e| diverged(epoch, 0, e.to_string()))?;
        history.records.push(rec);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SyntheticDatasetSpec};

    fn micro_batch() -> Vec<LabeledPoint> {
        vec![
            LabeledPoint::id([0.7, -0.4], 0),
            LabeledPoint::id([-0.5, 0.9], 2),
            LabeledPoint::ood([0.2, 0.3], Role::PseudoOod),
            LabeledPoint::ood([-0.8, -0.6], Role::PseudoOod),
        ]
    }

    fn margin(model: &MlpModel, batch: &[LabeledPoint]) -> f64 {
        batch
            .iter()
            .flat_map(|p| model.run(&p.x).unwrap().pre)
            .flatten()
            .fold(f64::INFINITY, |m, z| m.min(z.abs()))
    }

    /// A micro-net whose pre-activations all sit well away from the kinks,
    /// with evidential logits biased positive so gradients reach α.
    fn micro_model(head: Head, batch: &[LabeledPoint]) -> MlpModel {
        for seed in 0..500 {
            let mut m = MlpModel::init(4, 3, head, seed);
            if head == Head::Evidential {
                m.layers[2].bias = vec![1.5, 1.0, 0.5];
            }
            if margin(&m, batch) > 0.05 {
                return m;
            }
        }
        panic!("no kink-free micro-net found");
    }

    fn test_loss_cfg() -> LossConfig {
        LossConfig {
            gamma: 1.5,
            beta: 0.1,
            lambda: 0.5,
            xi: 2.0,
            m_in: -3.0,
            m_out: 1.0,
            positive_class_weight: 2.0,
            ..LossConfig::default()
        }
    }

    #[test]
    fn full_network_gradient_matches_finite_differences() {
        let batch = micro_batch();
        let cfg = test_loss_cfg();
        let h = 1e-4;
        for kind in LossKind::ALL {
            let model = micro_model(kind.head(), &batch);
            let g = backward(&model, &batch, kind, &cfg).unwrap();
            let analytic = g.flat();
            let base = model.params();
            let mut probe = model.clone();
            for (i, &a) in analytic.iter().enumerate() {
                let mut p = base.clone();
                p[i] = base[i] + h;
                probe.set_params(&p).unwrap();
                let up = batch_loss(&probe, &batch, kind, &cfg, Some(&g.eus_multipliers)).unwrap();
                p[i] = base[i] - h;
                probe.set_params(&p).unwrap();
                let down =
                    batch_loss(&probe, &batch, kind, &cfg, Some(&g.eus_multipliers)).unwrap();
                let numeric = (up - down) / (2.0 * h);
                let tol = 1e-4 * a.abs().max(numeric.abs()) + 1e-9;
                assert!(
                    (a - numeric).abs() <= tol,
                    "{kind:?} param {i}: analytic {a}, numeric {numeric}"
                );
            }
            assert!(
                analytic.iter().any(|g| g.abs() > 1e-6),
                "{kind:?} has a zero gradient"
            );
        }
    }

    #[test]
    fn backward_loss_matches_batch_loss() {
        let batch = micro_batch();
        let cfg = test_loss_cfg();
        for kind in LossKind::ALL {
            let model = micro_model(kind.head(), &batch);
            let g = backward(&model, &batch, kind, &cfg).unwrap();
            let l = batch_loss(&model, &batch, kind, &cfg, None).unwrap();
            assert_eq!(g.loss, l, "{kind:?}");
        }
    }

    #[test]
    fn eus_gradient_is_scaled_ufce_gradient() {
        let batch = [LabeledPoint::id([0.3, -0.2], 1)];
        let model = micro_model(Head::Evidential, &batch);
        let plain = LossConfig {
            xi: 0.0,
            ..test_loss_cfg()
        };
        let strong = LossConfig {
            xi: 3.0,
            ..test_loss_cfg()
        };
        let g0 = backward(&model, &batch, LossKind::UfceEusEr, &plain).unwrap();
        let g1 = backward(&model, &batch, LossKind::UfceEusEr, &strong).unwrap();
        let m = g1.eus_multipliers[0];
        let alpha0 = model.forward(&batch[0].x).unwrap().alpha.alpha0();
        assert_eq!(m, eus_multiplier(alpha0, 3, 3.0));
        for (a, b) in g1.flat().iter().zip(g0.flat()) {
            assert!((a - m * b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn dead_head_gives_zero_gradient() {
        let mut model = MlpModel::init(4, 3, Head::Evidential, 3);
        model.layers[2].bias = vec![-1e3; 3];
        let batch = micro_batch();
        let g = backward(&model, &batch, LossKind::UfceEusEr, &LossConfig::default()).unwrap();
        assert_eq!(g.dead_samples, 4);
        assert!(g.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_model_outputs() {
        let model = MlpModel::zeros(8, 3, Head::Evidential);
        let f = model.forward(&[1.5, -2.0]).unwrap();
        assert_eq!(f.logits, vec![0.0; 3]);
        assert_eq!(f.alpha.alpha(), &[1.0; 3]);
        let u = model.predict_uncertainties(&[1.5, -2.0]).unwrap();
        assert_eq!(u.u_epis, 1.0);
        assert!(u.p_bar.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn alpha_never_below_one() {
        let model = MlpModel::init(16, 4, Head::Evidential, 1);
        let mut st = Stream::new(2, 0);
        for _ in 0..200 {
            let x = [10.0 * st.normal(), 10.0 * st.normal()];
            let f = model.forward(&x).unwrap();
            assert!(f.alpha.alpha().iter().all(|&a| a >= 1.0));
        }
    }

    #[test]
    fn forward_rejects_bad_input() {
        let model = MlpModel::zeros(4, 3, Head::Evidential);
        assert!(model.forward(&[f64::NAN, 0.0]).is_err());
        assert!(model.forward(&[0.0]).is_err());
    }

    #[test]
    fn model_json_round_trip_and_version_check() {
        let model = MlpModel::init(5, 3, Head::Softmax, 4);
        let text = model.to_json().unwrap();
        assert_eq!(MlpModel::from_json(&text).unwrap(), model);
        let wrong = text.replace(MODEL_VERSION, "evidloss-model-v0");
        assert!(matches!(
            MlpModel::from_json(&wrong),
            Err(Error::Version(_))
        ));
        assert!(MlpModel::from_json("{").is_err());
    }

    fn small_split() -> DatasetSplit {
        generate(&SyntheticDatasetSpec {
            n_id_per_class: 60,
            n_pseudo_ood: 40,
            n_true_ood: 10,
            ..SyntheticDatasetSpec::default()
        })
        .unwrap()
    }

    fn small_cfg(kind: LossKind) -> TrainConfig {
        TrainConfig {
            loss_kind: kind,
            epochs: 3,
            hidden: 8,
            batch_size: 16,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic() {
        let split = small_split();
        for kind in [LossKind::UfceEusEr, LossKind::EnergyBoundedFocal] {
            let cfg = small_cfg(kind);
            let (a, ha) = train(&cfg, &split).unwrap();
            let (b, hb) = train(&cfg, &split).unwrap();
            assert_eq!(a, b);
            assert_eq!(ha, hb);
        }
    }

    #[test]
    fn ufce_at_gamma_zero_retraces_uce() {
        let split = small_split();
        let mut ufce_cfg = small_cfg(LossKind::Ufce);
        ufce_cfg.loss.gamma = 0.0;
        let mut uce_cfg = small_cfg(LossKind::UceEnt);
        uce_cfg.loss.beta = 0.0;
        let (a, ha) = train(&ufce_cfg, &split).unwrap();
        let (b, hb) = train(&uce_cfg, &split).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(ha, hb);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let split = small_split();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..small_cfg(LossKind::UceEusEr)
        };
        let (model, _) = train(&cfg, &split).unwrap();
        let init = MlpModel::init(cfg.hidden, 3, Head::Evidential, cfg.seed);
        assert_eq!(model.params(), init.params());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("train.epochs"));
        assert!(train(&cfg, &small_split()).is_err());
    }

    #[test]
    fn default_training_reduces_loss() {
        let split = generate(&SyntheticDatasetSpec::default()).unwrap();
        let (_, history) = train(&TrainConfig::default(), &split).unwrap();
        let first = history.records.first().unwrap().train_loss;
        let last = history.records.last().unwrap().train_loss;
        assert_eq!(history.records.len(), 51);
        assert!(last < first, "{first} -> {last}");
    }
}
