//! Highway-network wake-word detector: architecture, inference, training
//! and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::{FeatureFrontend, FrontendState};
use crate::metrics::{score_clips, DecisionConfig, FrameTiming, MetricsReport, ScoredClip};

pub const CHECKPOINT_FORMAT: u32 = 1;

/// Layer widths and depths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub feature_width: usize,
    pub feature_layers: usize,
    pub bottleneck: usize,
    /// Frames stacked on each side of the centre frame.
    pub context: usize,
    pub classifier_width: usize,
    pub classifier_layers: usize,
    /// Initial gate bias; negative values start close to the identity.
    pub gate_bias_init: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            feature_width: 128,
            feature_layers: 4,
            bottleneck: 64,
            context: 3,
            classifier_width: 128,
            classifier_layers: 6,
            gate_bias_init: -1.0,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_width == 0 || self.bottleneck == 0 || self.classifier_width == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Affine map `x W + b` with `W` stored input-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize, bias: f64) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            w: Array2::from_shape_fn((inputs, outputs), |_| rng.random_range(-limit..limit)),
            b: Array2::from_elem((1, outputs), bias),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.w.ncols()
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }
}

/// `y = T(x) * H(x) + (1 - T(x)) * x` with a logistic gate and tanh transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighwayLayer {
    pub transform: Linear,
    pub gate: Linear,
}

fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl HighwayLayer {
    pub fn new(rng: &mut ChaCha8Rng, width: usize, gate_bias: f64) -> Self {
        Self {
            transform: Linear::init(rng, width, width, 0.0),
            gate: Linear::init(rng, width, width, gate_bias),
        }
    }

    pub fn width(&self) -> usize {
        self.transform.inputs()
    }

    /// Rows of `x` are frames.
    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.width() {
            return Err(Error::Invariant(format!(
                "highway layer of width {} fed {} features",
                self.width(),
                x.ncols()
            )));
        }
        let h = self.transform.apply(x).mapv(f64::tanh);
        let t = self.gate.apply(x).mapv(logistic);
        Ok(x + &(&t * &(&h - x)))
    }
}

#[derive(Debug, Clone)]
pub struct DetectorModel {
    arch: ArchConfig,
    frontend: FeatureFrontend,
    input: Linear,
    feature_block: Vec<HighwayLayer>,
    bottleneck: Linear,
    projection: Linear,
    classifier_block: Vec<HighwayLayer>,
    output: Linear,
}

/// Handles of every weight bound on a tape, in [`DetectorModel::param_names`] order.
pub struct BoundModel {
    vars: Vec<Var>,
}

fn stack_context(x: &Array2<f64>, radius: usize) -> Array2<f64> {
    let (t, f) = x.dim();
    let width = 2 * radius + 1;
    let mut out = Array2::zeros((t, width * f));
    for row in 0..t {
        for j in 0..width {
            let r = (row as isize + j as isize - radius as isize).clamp(0, t as isize - 1) as usize;
            out.slice_mut(ndarray::s![row, j * f..(j + 1) * f]).assign(&x.row(r));
        }
    }
    out
}

fn affine_on_tape(tape: &mut Tape, x: Var, (w, b): (Var, Var)) -> Var {
    let m = tape.matmul(x, w);
    tape.add_row(m, b)
}

fn highway_on_tape(tape: &mut Tape, x: Var, transform: (Var, Var), gate: (Var, Var)) -> Var {
    let h = affine_on_tape(tape, x, transform);
    let h = tape.tanh(h);
    let t = affine_on_tape(tape, x, gate);
    let t = tape.sigmoid(t);
    let diff = tape.sub(h, x);
    let carry = tape.mul(t, diff);
    tape.add(x, carry)
}

impl DetectorModel {
    pub fn new(frontend: FeatureFrontend, arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = frontend.n_features();
        let stacked = arch.bottleneck * (2 * arch.context + 1);
        Ok(Self {
            input: Linear::init(&mut rng, f, arch.feature_width, 0.0),
            feature_block: (0..arch.feature_layers)
                .map(|_| HighwayLayer::new(&mut rng, arch.feature_width, arch.gate_bias_init))
                .collect(),
            bottleneck: Linear::init(&mut rng, arch.feature_width, arch.bottleneck, 0.0),
            projection: Linear::init(&mut rng, stacked, arch.classifier_width, 0.0),
            classifier_block: (0..arch.classifier_layers)
                .map(|_| HighwayLayer::new(&mut rng, arch.classifier_width, arch.gate_bias_init))
                .collect(),
            output: Linear::init(&mut rng, arch.classifier_width, 1, 0.0),
            arch,
            frontend,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn frontend(&self) -> &FeatureFrontend {
        &self.frontend
    }

    pub fn output_layer_mut(&mut self) -> &mut Linear {
        &mut self.output
    }

    pub fn feature_block_mut(&mut self) -> &mut [HighwayLayer] {
        &mut self.feature_block
    }

    pub fn timing(&self) -> FrameTiming {
        let c = self.frontend.config();
        FrameTiming {
            hop: c.hop,
            sample_rate: c.sample_rate,
        }
    }

    fn linears(&self) -> Vec<(String, &Linear)> {
        let mut out = vec![("input".to_string(), &self.input)];
        for (i, l) in self.feature_block.iter().enumerate() {
            out.push((format!("feature.{i}.transform"), &l.transform));
            out.push((format!("feature.{i}.gate"), &l.gate));
        }
        out.push(("bottleneck".into(), &self.bottleneck));
        out.push(("projection".into(), &self.projection));
        for (i, l) in self.classifier_block.iter().enumerate() {
            out.push((format!("classifier.{i}.transform"), &l.transform));
            out.push((format!("classifier.{i}.gate"), &l.gate));
        }
        out.push(("output".into(), &self.output));
        out
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out = vec![&mut self.input];
        for l in &mut self.feature_block {
            out.push(&mut l.transform);
            out.push(&mut l.gate);
        }
        out.push(&mut self.bottleneck);
        out.push(&mut self.projection);
        for l in &mut self.classifier_block {
            out.push(&mut l.transform);
            out.push(&mut l.gate);
        }
        out.push(&mut self.output);
        out
    }

    /// Weight and bias names, two per affine map.
    pub fn param_names(&self) -> Vec<String> {
        self.linears()
            .into_iter()
            .flat_map(|(n, _)| [format!("{n}.w"), format!("{n}.b")])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.linears().iter().map(|(_, l)| l.w.len() + l.b.len()).sum()
    }

    /// Puts every weight on `tape`, as trainable parameters or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let mut vars = Vec::new();
        for (name, l) in self.linears() {
            for (suffix, t) in [("w", &l.w), ("b", &l.b)] {
                vars.push(if trainable {
                    tape.param(format!("{name}.{suffix}"), t.clone())
                } else {
                    tape.constant(t.clone())
                });
            }
        }
        BoundModel { vars }
    }

    /// Per-frame logits for a `frames x features` node.
    pub fn logits_on_tape(&self, tape: &mut Tape, bound: &BoundModel, features: Var) -> Var {
        let mut it = bound.vars.chunks(2).map(|c| (c[0], c[1]));
        let mut x = affine_on_tape(tape, features, it.next().expect("input"));
        for _ in 0..self.feature_block.len() {
            let (t, g) = (it.next().expect("transform"), it.next().expect("gate"));
            x = highway_on_tape(tape, x, t, g);
        }
        x = affine_on_tape(tape, x, it.next().expect("bottleneck"));
        x = tape.context(x, self.arch.context);
        x = affine_on_tape(tape, x, it.next().expect("projection"));
        for _ in 0..self.classifier_block.len() {
            let (t, g) = (it.next().expect("transform"), it.next().expect("gate"));
            x = highway_on_tape(tape, x, t, g);
        }
        affine_on_tape(tape, x, it.next().expect("output"))
    }

    fn check_features(&self, features: &Array2<f64>) -> Result<()> {
        if features.ncols() != self.frontend.n_features() {
            return Err(Error::Invariant(format!(
                "expected {} features per frame, got {}",
                self.frontend.n_features(),
                features.ncols()
            )));
        }
        Ok(())
    }

    /// Per-frame logits, evaluated directly without a tape.
    pub fn logits(&self, features: &Array2<f64>) -> Result<Array1<f64>> {
        self.check_features(features)?;
        let mut x = self.input.apply(features);
        for l in &self.feature_block {
            x = l.forward(&x)?;
        }
        x = self.bottleneck.apply(&x);
        x = self.projection.apply(&stack_context(&x, self.arch.context));
        for l in &self.classifier_block {
            x = l.forward(&x)?;
        }
        Ok(self.output.apply(&x).index_axis_move(Axis(1), 0))
    }

    pub fn posteriors(&self, features: &Array2<f64>) -> Result<Vec<f64>> {
        Ok(self.logits(features)?.iter().map(|&z| logistic(z)).collect())
    }

    pub fn posteriors_for_clip(&self, clip: &crate::audio::AudioClip) -> Result<Vec<f64>> {
        self.posteriors(&self.frontend.extract(clip)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT,
            arch: self.arch.clone(),
            frontend: self.frontend.state(),
            weights: self
                .linears()
                .into_iter()
                .map(|(n, l)| (n, l.clone()))
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format_version != CHECKPOINT_FORMAT {
            return Err(Error::Compatibility(format!(
                "checkpoint format {} (expected {CHECKPOINT_FORMAT})",
                ck.format_version
            )));
        }
        let frontend = FeatureFrontend::from_state(&ck.frontend)?;
        let mut model = Self::new(frontend, ck.arch.clone(), 0)?;
        let names: Vec<String> = model.linears().into_iter().map(|(n, _)| n).collect();
        if names.len() != ck.weights.len() {
            return Err(Error::Compatibility("checkpoint layer count does not match its header".into()));
        }
        for (name, slot) in names.iter().zip(model.linears_mut()) {
            let stored = ck
                .weights
                .get(name)
                .ok_or_else(|| Error::Compatibility(format!("checkpoint lacks layer {name}")))?;
            if stored.w.dim() != slot.w.dim() || stored.b.dim() != slot.b.dim() {
                return Err(Error::Compatibility(format!("layer {name} has the wrong shape")));
            }
            *slot = stored.clone();
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        Self::from_checkpoint(&ck)
    }
}

/// Structured-text weight file with an architecture header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub arch: ArchConfig,
    pub frontend: FrontendState,
    pub weights: BTreeMap<String, Linear>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Clips per gradient step.
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Epochs without held-out F1 improvement before stopping.
    pub patience: usize,
    /// Random crop length in frames; clips shorter than this are used whole.
    pub crop_frames: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 8,
            seed: 0,
            optimizer: Optimizer::Adam,
            patience: 5,
            crop_frames: 300,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.epochs == 0 || self.batch_size == 0 || self.crop_frames == 0 {
            return Err(Error::Config(format!("invalid training configuration: {self:?}")));
        }
        Ok(())
    }
}

/// Normalized features with 0/1 frame labels.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub features: Array2<f64>,
    pub labels: Vec<f64>,
}

/// Held-out clips used for early stopping.
pub struct Validation<'a> {
    pub examples: &'a [TrainingExample],
    pub clips: Vec<ScoredClip>,
    pub decision: &'a DecisionConfig,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DetectorModel,
    /// Mean training BCE per epoch.
    pub loss_curve: Vec<f64>,
    /// Held-out F1 per epoch, when validation data was given.
    pub validation_f1: Vec<f64>,
    pub best_epoch: usize,
}

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::B1.powi(self.step);
        let c2 = 1.0 - Self::B2.powi(self.step);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            ndarray::Zip::from(&mut **p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = Self::B1 * *m + (1.0 - Self::B1) * g;
                    *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
                });
        }
    }
}

fn crop(ex: &TrainingExample, len: usize, rng: &mut ChaCha8Rng) -> (Array2<f64>, Array2<f64>) {
    let t = ex.features.nrows();
    let (start, n) = if t > len {
        (rng.random_range(0..=t - len), len)
    } else {
        (0, t)
    };
    let feats = ex.features.slice(ndarray::s![start..start + n, ..]).to_owned();
    let labels = Array2::from_shape_vec((n, 1), ex.labels[start..start + n].to_vec()).expect("label column");
    (feats, labels)
}

impl DetectorModel {
    /// Mean frame BCE of one batch and its gradients, in `param_names` order.
    pub fn batch_gradients(&self, batch: &[(Array2<f64>, Array2<f64>)]) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, true);
        let mut total = None;
        for (feats, labels) in batch {
            self.check_features(feats)?;
            let x = tape.constant(feats.clone());
            let z = self.logits_on_tape(&mut tape, &bound, x);
            let l = tape.bce_with_logits(z, labels.clone());
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l),
            });
        }
        let total = total.ok_or_else(|| Error::Data("empty batch".into()))?;
        let loss = tape.scale(total, 1.0 / batch.len() as f64);
        let grads = tape.grad(loss)?;
        let shapes: Vec<(usize, usize)> = bound.vars.iter().map(|&v| tape.value(v).dim()).collect();
        let g = bound
            .vars
            .iter()
            .zip(shapes)
            .map(|(&v, s)| grads.wrt(v, s))
            .collect();
        Ok((tape.scalar_value(loss), g))
    }

    fn weights_mut(&mut self) -> Vec<&mut Tensor> {
        self.linears_mut()
            .into_iter()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }

    pub fn evaluate_examples(&self, v: &Validation<'_>) -> Result<MetricsReport> {
        let mut clips = v.clips.clone();
        for (c, ex) in clips.iter_mut().zip(v.examples) {
            c.posteriors = self.posteriors(&ex.features)?;
        }
        Ok(score_clips(&clips, v.decision, self.timing()))
    }
}

/// Minimizes frame-level BCE; deterministic in `cfg.seed`.
pub fn train(
    mut model: DetectorModel,
    data: &[TrainingExample],
    validation: Option<Validation<'_>>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let positives = data.iter().flat_map(|e| &e.labels).filter(|&&y| y > 0.5).count();
    let frames: usize = data.iter().map(|e| e.labels.len()).sum();
    if positives == 0 || positives == frames {
        return Err(Error::Data("training data must contain both positive and negative frames".into()));
    }
    for ex in data {
        if ex.labels.len() != ex.features.nrows() {
            return Err(Error::Data("label count differs from frame count".into()));
        }
    }
    let shapes: Vec<(usize, usize)> = model.weights_mut().iter().map(|t| t.dim()).collect();
    let mut adam = Adam::new(&shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut loss_curve = Vec::new();
    let mut validation_f1 = Vec::new();
    let mut best: Option<(f64, usize, DetectorModel)> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| crop(&data[i], cfg.crop_frames, &mut rng)).collect();
            let (loss, grads) = model.batch_gradients(&batch)?;
            if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::Numeric(format!("non-finite gradient in epoch {epoch}")));
            }
            let mut params = model.weights_mut();
            match cfg.optimizer {
                Optimizer::Adam => adam.update(&mut params, &grads, cfg.learning_rate),
                Optimizer::Sgd => {
                    for (p, g) in params.iter_mut().zip(&grads) {
                        p.scaled_add(-cfg.learning_rate, g);
                    }
                }
            }
            sum += loss;
            batches += 1;
        }
        loss_curve.push(sum / batches as f64);
        if let Some(v) = &validation {
            let f1 = model.evaluate_examples(v)?.f1;
            validation_f1.push(f1);
            if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
                best = Some((f1, epoch, model.clone()));
            } else if epoch - best.as_ref().map_or(0, |b| b.1) >= cfg.patience {
                break;
            }
        }
    }
    let (model, best_epoch) = match best {
        Some((_, epoch, m)) => (m, epoch),
        None => (model, loss_curve.len() - 1),
    };
    Ok(TrainOutcome {
        model,
        loss_curve,
        validation_f1,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::relative_error;
    use crate::features::FrontendConfig;

    fn small_frontend() -> FeatureFrontend {
        FeatureFrontend::new(FrontendConfig {
            n_filters: 8,
            ..FrontendConfig::default()
        })
        .unwrap()
    }

    fn small_arch() -> ArchConfig {
        ArchConfig {
            feature_width: 6,
            feature_layers: 2,
            bottleneck: 4,
            context: 1,
            classifier_width: 5,
            classifier_layers: 2,
            gate_bias_init: -1.0,
        }
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn highway_gate_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = HighwayLayer::new(&mut rng, 5, 0.0);
        let x = random(3, 5, 2);
        layer.gate.b.fill(-1000.0);
        let closed = layer.forward(&x).unwrap();
        assert!(closed.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-12));
        layer.gate.b.fill(1000.0);
        let open = layer.forward(&x).unwrap();
        let h = layer.transform.apply(&x).mapv(f64::tanh);
        assert!(open.iter().zip(&h).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(matches!(layer.forward(&random(3, 4, 3)), Err(Error::Invariant(_))));
    }

    #[test]
    fn highway_matches_scalar_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = HighwayLayer::new(&mut rng, 7, 0.3);
        let x = random(4, 7, 5);
        let y = layer.forward(&x).unwrap();
        for r in 0..4 {
            for j in 0..7 {
                let mut h = layer.transform.b[[0, j]];
                let mut t = layer.gate.b[[0, j]];
                for i in 0..7 {
                    h += x[[r, i]] * layer.transform.w[[i, j]];
                    t += x[[r, i]] * layer.gate.w[[i, j]];
                }
                let t = 1.0 / (1.0 + (-t).exp());
                let expected = t * h.tanh() + (1.0 - t) * x[[r, j]];
                assert!((y[[r, j]] - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_output_layer_gives_one_half() {
        let mut m = DetectorModel::new(small_frontend(), small_arch(), 0).unwrap();
        m.output.w.fill(0.0);
        m.output.b.fill(0.0);
        let p = m.posteriors(&random(11, 8, 1)).unwrap();
        assert_eq!(p.len(), 11);
        assert!(p.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn tape_and_direct_forward_agree() {
        let m = DetectorModel::new(small_frontend(), small_arch(), 3).unwrap();
        let f = random(9, 8, 2);
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, false);
        let x = tape.constant(f.clone());
        let z = m.logits_on_tape(&mut tape, &bound, x);
        let direct = m.logits(&f).unwrap();
        for (a, b) in tape.value(z).iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
        let p = m.posteriors(&f).unwrap();
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(p, m.posteriors(&f).unwrap());
    }

    #[test]
    fn input_gradient_of_mean_posterior() {
        let m = DetectorModel::new(small_frontend(), small_arch(), 8).unwrap();
        let f = random(6, 8, 9);
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, false);
        let x = tape.param("features", f.clone());
        let z = m.logits_on_tape(&mut tape, &bound, x);
        let p = tape.sigmoid(z);
        let loss = tape.mean(p);
        let g = tape.grad(loss).unwrap().wrt(x, f.dim());
        let mean_post = |f: &Array2<f64>| {
            let p = m.posteriors(f).unwrap();
            p.iter().sum::<f64>() / p.len() as f64
        };
        for r in 0..6 {
            for c in 0..8 {
                let eps = 1e-5;
                let mut up = f.clone();
                up[[r, c]] += eps;
                let mut down = f.clone();
                down[[r, c]] -= eps;
                let numeric = (mean_post(&up) - mean_post(&down)) / (2.0 * eps);
                assert!(relative_error(g[[r, c]], numeric) < 1e-3 || (g[[r, c]] - numeric).abs() < 1e-9);
            }
        }
    }

    fn toy_data(n: usize, seed: u64) -> Vec<TrainingExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let t = 40;
                let mut labels = vec![0.0; t];
                let start = rng.random_range(5..25);
                labels[start..start + 8].iter_mut().for_each(|y| *y = 1.0);
                let features = Array2::from_shape_fn((t, 8), |(r, c)| {
                    labels[r] * if c < 4 { 2.0 } else { -1.0 } + rng.random_range(-0.3..0.3)
                });
                TrainingExample { features, labels }
            })
            .collect()
    }

    #[test]
    fn training_descends_and_is_deterministic() {
        let data = toy_data(10, 1);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 4,
            crop_frames: 32,
            ..TrainConfig::default()
        };
        let model = DetectorModel::new(small_frontend(), small_arch(), 2).unwrap();
        let a = train(model.clone(), &data, None, &cfg).unwrap();
        let b = train(model, &data, None, &cfg).unwrap();
        assert!(a.loss_curve.last().unwrap() < &a.loss_curve[0]);
        assert_eq!(a.loss_curve, b.loss_curve);
        assert_eq!(a.model.to_checkpoint(), b.model.to_checkpoint());
    }

    #[test]
    fn single_class_corpus_is_rejected() {
        let mut data = toy_data(3, 2);
        for ex in &mut data {
            ex.labels.iter_mut().for_each(|y| *y = 0.0);
        }
        let model = DetectorModel::new(small_frontend(), small_arch(), 2).unwrap();
        assert!(matches!(train(model, &data, None, &TrainConfig::default()), Err(Error::Data(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = DetectorModel::new(small_frontend(), small_arch(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        m.save(&path).unwrap();
        let back = DetectorModel::load(&path).unwrap();
        let f = random(5, 8, 1);
        assert_eq!(m.posteriors(&f).unwrap(), back.posteriors(&f).unwrap());
        let mut ck = m.to_checkpoint();
        ck.format_version = 99;
        assert!(matches!(DetectorModel::from_checkpoint(&ck), Err(Error::Compatibility(_))));
        let mut ck = m.to_checkpoint();
        ck.arch.bottleneck = 3;
        assert!(matches!(DetectorModel::from_checkpoint(&ck), Err(Error::Compatibility(_))));
    }
}
