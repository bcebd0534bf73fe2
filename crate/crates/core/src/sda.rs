//! Stacked denoising autoencoder classifier.
//!
//! Training runs in two phases. [`pretrain`] fits each hidden layer in turn as a
//! denoising autoencoder on the clean codes of the layer below. [`fine_tune`]
//! then trains the whole stack plus a softmax output layer on labeled patches,
//! applying updates only to the layers a mask opens.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Patch, PatchLabel};
use crate::nn::backprop::{classifier_gradients, dae_gradients, forward_stack};
use crate::nn::layers::sgd_step;
use crate::nn::{LayerParams, LogisticLayer, Matrix, TrainConfig};
use crate::rng::{self, Rng};

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const N_CLASSES: usize = 2;

// Stream ids keep the random draws of each training phase independent.
const STREAM_INIT: u64 = 0;
const STREAM_OUTPUT_INIT: u64 = 1_000;
const STREAM_PRETRAIN_ORDER: u64 = 2_000;
const STREAM_CORRUPTION: u64 = 3_000;
const STREAM_FINETUNE_ORDER: u64 = 4_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub level: f64,
    pub seed: u64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            level: 0.10,
            seed: 0,
        }
    }
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.level) {
            return Err(Error::param("corruption", format!("{} outside [0, 1]", self.level)));
        }
        Ok(())
    }
}

/// Masking noise: each component is zeroed independently with probability `level`.
pub struct Corruptor {
    level: f64,
    rng: Rng,
}

impl Corruptor {
    pub fn new(level: f64, rng: Rng) -> Self {
        Self { level, rng }
    }

    /// Zeroes components in place, drawing a fresh mask on every call.
    pub fn apply(&mut self, x: &mut [f64]) {
        if self.level <= 0.0 {
            return;
        }
        for v in x.iter_mut() {
            if self.rng.random_bool(self.level) {
                *v = 0.0;
            }
        }
    }
}

/// One corrupted presentation of `x`.
pub fn corrupt(x: &[f64], spec: &CorruptionSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut out = x.to_vec();
    Corruptor::new(spec.level, rng::seeded(spec.seed)).apply(&mut out);
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    /// Mean per-component reconstruction loss of each epoch, per hidden layer.
    pub pretrain: Vec<Vec<f64>>,
    /// Mean classification loss of each fine-tuning epoch.
    pub finetune: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub magnification: Option<String>,
    pub seed: u64,
    pub history: TrainingHistory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdaModel {
    pub hidden: Vec<LayerParams>,
    pub output: LogisticLayer,
    pub patch_side: usize,
    pub metadata: ModelMetadata,
}

impl SdaModel {
    /// Randomly initialized network with `layer_sizes` hidden units per layer.
    pub fn init(patch_side: usize, layer_sizes: &[usize], seed: u64) -> Result<Self> {
        if patch_side == 0 {
            return Err(Error::param("patch_side", "must be positive"));
        }
        if layer_sizes.is_empty() || layer_sizes.contains(&0) {
            return Err(Error::param("layer_sizes", "need at least one non-empty layer"));
        }
        let mut n_in = patch_side * patch_side;
        let mut hidden = Vec::with_capacity(layer_sizes.len());
        for (k, &n) in layer_sizes.iter().enumerate() {
            hidden.push(LayerParams::init(
                n_in,
                n,
                &mut rng::derived(seed, STREAM_INIT + k as u64),
            ));
            n_in = n;
        }
        Ok(Self {
            hidden,
            output: Self::fresh_output(n_in, seed),
            patch_side,
            metadata: ModelMetadata {
                seed,
                ..Default::default()
            },
        })
    }

    pub(crate) fn fresh_output(n_inputs: usize, seed: u64) -> LogisticLayer {
        LogisticLayer::init(n_inputs, N_CLASSES, &mut rng::derived(seed, STREAM_OUTPUT_INIT))
    }

    pub fn input_dim(&self) -> usize {
        self.patch_side * self.patch_side
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.hidden.iter().map(LayerParams::n_hidden).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(Error::Model("no hidden layers".into()));
        }
        let mut n_in = self.input_dim();
        for (k, l) in self.hidden.iter().enumerate() {
            if l.n_inputs() != n_in || l.b.len() != l.n_hidden() || l.c.len() != l.n_inputs() {
                return Err(Error::DimensionMismatch(format!(
                    "hidden layer {k} is {}x{} but receives {n_in} inputs",
                    l.n_hidden(),
                    l.n_inputs()
                )));
            }
            n_in = l.n_hidden();
        }
        if self.output.n_inputs() != n_in
            || self.output.n_classes() != N_CLASSES
            || self.output.d.len() != N_CLASSES
        {
            return Err(Error::DimensionMismatch(format!(
                "output layer is {}x{}, expected {N_CLASSES}x{n_in}",
                self.output.n_classes(),
                self.output.n_inputs()
            )));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.hidden.iter().all(LayerParams::all_finite) && self.output.all_finite()
    }

    /// Class probabilities `[background, particle]` for one patch.
    pub fn probabilities(&self, patch: &Patch) -> Result<Vec<f64>> {
        self.check_side(patch)?;
        let mut h = patch.values.clone();
        for l in &self.hidden {
            h = l.encode(&h)?;
        }
        self.output.probabilities(&h)
    }

    fn check_side(&self, patch: &Patch) -> Result<()> {
        if patch.side != self.patch_side || patch.values.len() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "patch side {} but model expects {}",
                patch.side, self.patch_side
            )));
        }
        Ok(())
    }
}

fn patch_matrix(patches: &[&Patch], dim: usize) -> Matrix {
    let mut data = Vec::with_capacity(patches.len() * dim);
    for p in patches {
        data.extend_from_slice(&p.values);
    }
    Matrix::from_vec(patches.len(), dim, data).expect("patch sizes checked")
}

fn check_patches(patches: &[Patch], side: Option<usize>) -> Result<usize> {
    let first = patches.first().ok_or(Error::Empty("patch set"))?;
    let side = side.unwrap_or(first.side);
    if let Some(p) = patches
        .iter()
        .find(|p| p.side != side || p.values.len() != side * side)
    {
        return Err(Error::DimensionMismatch(format!(
            "patch side {} differs from {side}",
            p.side
        )));
    }
    Ok(side)
}

fn rows_of(data: &Matrix, idx: &[usize]) -> Matrix {
    let cols = data.cols();
    let mut out = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        out.extend_from_slice(data.row(i));
    }
    Matrix::from_vec(idx.len(), cols, out).expect("sized")
}

/// Trains one layer as a denoising autoencoder on `data` (one sample per row).
///
/// Returns the mean per-component reconstruction loss of every epoch.
pub fn pretrain_layer(
    layer: &mut LayerParams,
    data: &Matrix,
    config: &TrainConfig,
    corruptor: &mut Corruptor,
    order_rng: &mut Rng,
) -> Result<Vec<f64>> {
    config.validate()?;
    if data.cols() != layer.n_inputs() {
        return Err(Error::DimensionMismatch(format!(
            "layer expects {} inputs, data has {}",
            layer.n_inputs(),
            data.cols()
        )));
    }
    let n = data.rows();
    let dim = data.cols() as f64;
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(order_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let clean = rows_of(data, batch);
            let mut noisy = clean.clone();
            corruptor.apply(noisy.data_mut());
            let (loss, g) = dae_gradients(layer, &clean, &noisy);
            epoch_loss += loss / dim * batch.len() as f64;
            sgd_step(layer.w.data_mut(), g.w.data(), config.learning_rate)?;
            sgd_step(&mut layer.b, &g.b, config.learning_rate)?;
            sgd_step(&mut layer.c, &g.c, config.learning_rate)?;
        }
        if !layer.all_finite() {
            return Err(Error::Model(format!("non-finite parameters after epoch {epoch}")));
        }
        history.push(epoch_loss / n as f64);
    }
    Ok(history)
}

/// Mean per-component loss of reconstructing each row from itself, no corruption.
pub fn reconstruction_error(layer: &LayerParams, data: &Matrix) -> f64 {
    let z = layer.decode_batch(&layer.encode_batch(data));
    crate::nn::layers::cross_entropy_sum(data.data(), z.data()) / data.data().len() as f64
}

/// Greedy layer-wise pre-training.
///
/// Layer `k` is trained on the clean codes of the trained layers below it and
/// corrupts only its own input. The output layer is initialized, not trained.
pub fn pretrain(
    patches: &[Patch],
    config: &TrainConfig,
    corruption: &CorruptionSpec,
    layer_sizes: &[usize],
) -> Result<SdaModel> {
    config.validate()?;
    corruption.validate()?;
    let side = check_patches(patches, None)?;
    let mut model = SdaModel::init(side, layer_sizes, config.seed)?;
    let refs: Vec<&Patch> = patches.iter().collect();
    let mut data = patch_matrix(&refs, side * side);
    for k in 0..model.hidden.len() {
        let mut corruptor = Corruptor::new(
            corruption.level,
            rng::derived(corruption.seed, STREAM_CORRUPTION + k as u64),
        );
        let mut order_rng = rng::derived(config.seed, STREAM_PRETRAIN_ORDER + k as u64);
        let history = pretrain_layer(
            &mut model.hidden[k],
            &data,
            config,
            &mut corruptor,
            &mut order_rng,
        )?;
        model.metadata.history.pretrain.push(history);
        if k + 1 < model.hidden.len() {
            data = model.hidden[k].encode_batch(&data);
        }
    }
    Ok(model)
}

/// Supervised training of the full stack.
///
/// Only hidden layers whose mask entry is `true` (and the output layer when
/// `train_output`) are updated; everything else is left bit-identical.
pub fn fine_tune(
    model: &SdaModel,
    patches: &[Patch],
    config: &TrainConfig,
    trainable_mask: &[bool],
    train_output: bool,
) -> Result<SdaModel> {
    config.validate()?;
    if trainable_mask.len() != model.hidden.len() {
        return Err(Error::param(
            "trainable_mask",
            format!(
                "{} entries for {} hidden layers",
                trainable_mask.len(),
                model.hidden.len()
            ),
        ));
    }
    check_patches(patches, Some(model.patch_side))?;
    let labels: Vec<usize> = patches
        .iter()
        .map(|p| p.label.map(PatchLabel::index))
        .collect::<Option<_>>()
        .ok_or(Error::param("patches", "fine-tuning needs labeled patches"))?;

    let mut tuned = model.clone();
    if !train_output && !trainable_mask.contains(&true) {
        return Ok(tuned);
    }
    let refs: Vec<&Patch> = patches.iter().collect();
    let data = patch_matrix(&refs, model.input_dim());
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut order_rng = rng::derived(config.seed, STREAM_FINETUNE_ORDER);
    let lr = config.learning_rate;
    for epoch in 0..config.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let x = rows_of(&data, batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = classifier_gradients(
                &tuned.hidden,
                &tuned.output,
                &x,
                &y,
                trainable_mask,
                train_output,
            );
            epoch_loss += loss * batch.len() as f64;
            for (layer, g) in tuned.hidden.iter_mut().zip(&grads.layers) {
                if let Some((gw, gb)) = g {
                    sgd_step(layer.w.data_mut(), gw.data(), lr)?;
                    sgd_step(&mut layer.b, gb, lr)?;
                }
            }
            if let Some((gv, gd)) = &grads.output {
                sgd_step(tuned.output.v.data_mut(), gv.data(), lr)?;
                sgd_step(&mut tuned.output.d, gd, lr)?;
            }
        }
        if !tuned.all_finite() {
            return Err(Error::Model(format!("non-finite parameters after epoch {epoch}")));
        }
        tuned.metadata.history.finetune.push(epoch_loss / patches.len() as f64);
    }
    Ok(tuned)
}

/// Most probable label and the particle probability.
pub fn predict(model: &SdaModel, patch: &Patch) -> Result<(PatchLabel, f64)> {
    let p = model.probabilities(patch)?;
    Ok((argmax_label(&p), p[PatchLabel::Particle.index()]))
}

fn argmax_label(p: &[f64]) -> PatchLabel {
    if p[PatchLabel::Particle.index()] > p[PatchLabel::Background.index()] {
        PatchLabel::Particle
    } else {
        PatchLabel::Background
    }
}

/// [`predict`] over many patches with batched products.
pub fn predict_many(model: &SdaModel, patches: &[Patch]) -> Result<Vec<(PatchLabel, f64)>> {
    if patches.is_empty() {
        return Ok(Vec::new());
    }
    for p in patches {
        model.check_side(p)?;
    }
    let refs: Vec<&Patch> = patches.iter().collect();
    let acts = forward_stack(&model.hidden, &patch_matrix(&refs, model.input_dim()));
    let logits = model.output.logits_batch(acts.last().expect("non-empty"));
    Ok((0..logits.rows())
        .map(|r| {
            let p = crate::nn::softmax(logits.row(r));
            (argmax_label(&p), p[PatchLabel::Particle.index()])
        })
        .collect())
}

/// Fraction of labeled patches whose predicted label matches.
pub fn accuracy(model: &SdaModel, patches: &[Patch]) -> Result<f64> {
    if patches.is_empty() {
        return Err(Error::Empty("evaluation patches"));
    }
    let preds = predict_many(model, patches)?;
    let correct = preds
        .iter()
        .zip(patches)
        .filter(|((label, _), p)| p.label == Some(*label))
        .count();
    Ok(correct as f64 / patches.len() as f64)
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    c: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct OutputDoc {
    #[serde(rename = "V")]
    v: Vec<Vec<f64>>,
    d: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    format_version: u32,
    patch_side: usize,
    layer_sizes: Vec<usize>,
    layers: Vec<LayerDoc>,
    output: OutputDoc,
    #[serde(default)]
    metadata: ModelMetadata,
}

impl SdaModel {
    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDoc {
            format_version: MODEL_FORMAT_VERSION,
            patch_side: self.patch_side,
            layer_sizes: self.layer_sizes(),
            layers: self
                .hidden
                .iter()
                .map(|l| LayerDoc {
                    w: l.w.to_rows(),
                    b: l.b.clone(),
                    c: l.c.clone(),
                })
                .collect(),
            output: OutputDoc {
                v: self.output.v.to_rows(),
                d: self.output.d.clone(),
            },
            metadata: self.metadata.clone(),
        };
        serde_json::to_string(&doc).map_err(|e| Error::Model(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::Model(format!("malformed or truncated model: {e}")))?;
        let version = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Model("missing format_version".into()))?;
        if version != u64::from(MODEL_FORMAT_VERSION) {
            return Err(Error::ModelVersion {
                found: u32::try_from(version).unwrap_or(u32::MAX),
                expected: MODEL_FORMAT_VERSION,
            });
        }
        let doc: ModelDoc =
            serde_json::from_value(value).map_err(|e| Error::Model(e.to_string()))?;
        if doc.layers.len() != doc.layer_sizes.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} layers listed, {} stored",
                doc.layer_sizes.len(),
                doc.layers.len()
            )));
        }
        let hidden = doc
            .layers
            .into_iter()
            .map(|l| LayerParams::new(Matrix::from_rows(&l.w)?, l.b, l.c))
            .collect::<Result<Vec<_>>>()?;
        if let Some((k, _)) = hidden
            .iter()
            .zip(&doc.layer_sizes)
            .enumerate()
            .find(|(_, (l, &n))| l.n_hidden() != n)
        {
            return Err(Error::DimensionMismatch(format!(
                "layer {k} size disagrees with layer_sizes"
            )));
        }
        let model = SdaModel {
            hidden,
            output: LogisticLayer::new(Matrix::from_rows(&doc.output.v)?, doc.output.d)?,
            patch_side: doc.patch_side,
            metadata: doc.metadata,
        };
        model.validate()?;
        if !model.all_finite() {
            return Err(Error::Model("non-finite parameter".into()));
        }
        Ok(model)
    }
}

pub fn save_model(model: &SdaModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = model.to_json()?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SdaModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SdaModel::from_json(&text).map_err(|e| match e {
        Error::ModelVersion { .. } => e,
        other => Error::format(path, other.to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_patches(n: usize, side: usize, seed: u64) -> Vec<Patch> {
        let mut rng = rng::seeded(seed);
        (0..n)
            .map(|i| {
                let dark = i % 2 == 0;
                let values = (0..side * side)
                    .map(|_| {
                        if dark {
                            rng.random_range(0.0..0.3)
                        } else {
                            rng.random_range(0.7..1.0)
                        }
                    })
                    .collect();
                let label = if dark {
                    PatchLabel::Particle
                } else {
                    PatchLabel::Background
                };
                Patch::new(side, values, (0.0, 0.0)).unwrap().with_label(label)
            })
            .collect()
    }

    fn cfg(epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            epochs,
            batch_size: 10,
            seed: 7,
        }
    }

    #[test]
    fn corruption_extremes() {
        let x = vec![0.3; 100];
        assert_eq!(corrupt(&x, &CorruptionSpec { level: 0.0, seed: 1 }).unwrap(), x);
        assert!(corrupt(&x, &CorruptionSpec { level: 1.0, seed: 1 })
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        assert!(corrupt(&x, &CorruptionSpec { level: 1.5, seed: 1 }).is_err());
    }

    #[test]
    fn corruption_rate_within_binomial_bound() {
        let x = vec![1.0; 100_000];
        let out = corrupt(&x, &CorruptionSpec { level: 0.1, seed: 5 }).unwrap();
        let zeroed = out.iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
        assert!((0.094..=0.106).contains(&zeroed), "{zeroed}");
        assert!(out.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn corruptor_draws_fresh_masks() {
        let mut c = Corruptor::new(0.5, rng::seeded(3));
        let mut a = vec![1.0; 64];
        let mut b = vec![1.0; 64];
        c.apply(&mut a);
        c.apply(&mut b);
        assert_ne!(a, b);
    }

    #[test]
    fn zero_epochs_is_initialization() {
        let patches = toy_patches(20, 4, 1);
        let model = pretrain(&patches, &cfg(0, 0.1), &CorruptionSpec::default(), &[8, 5]).unwrap();
        let init = SdaModel::init(4, &[8, 5], 7).unwrap();
        assert_eq!(model.hidden, init.hidden);
        assert_eq!(model.output, init.output);
    }

    #[test]
    fn pretraining_is_deterministic_and_reduces_loss() {
        let patches = toy_patches(100, 5, 2);
        let corruption = CorruptionSpec { level: 0.1, seed: 3 };
        let a = pretrain(&patches, &cfg(30, 0.1), &corruption, &[16, 8]).unwrap();
        let b = pretrain(&patches, &cfg(30, 0.1), &corruption, &[16, 8]).unwrap();
        assert_eq!(a, b);
        let h = &a.metadata.history.pretrain[0];
        assert!(h.last().unwrap() < h.first().unwrap(), "{h:?}");
    }

    #[test]
    fn pretraining_touches_one_layer_at_a_time() {
        let patches = toy_patches(30, 4, 4);
        let corruption = CorruptionSpec::default();
        let one = pretrain(&patches, &cfg(5, 0.1), &corruption, &[6]).unwrap();
        let two = pretrain(&patches, &cfg(5, 0.1), &corruption, &[6, 3]).unwrap();
        // The first layer never sees the second layer's training.
        assert_eq!(one.hidden[0], two.hidden[0]);
    }

    #[test]
    fn pretrain_rejects_bad_input() {
        let corruption = CorruptionSpec::default();
        assert!(pretrain(&[], &cfg(1, 0.1), &corruption, &[4]).is_err());
        let mut mixed = toy_patches(4, 3, 1);
        mixed.extend(toy_patches(2, 4, 1));
        assert!(pretrain(&mixed, &cfg(1, 0.1), &corruption, &[4]).is_err());
    }

    #[test]
    fn frozen_fine_tune_is_identity() {
        let patches = toy_patches(20, 4, 5);
        let model = SdaModel::init(4, &[6, 6, 6], 1).unwrap();
        let out = fine_tune(&model, &patches, &cfg(10, 0.5), &[false; 3], false).unwrap();
        assert_eq!(out, model);
    }

    #[test]
    fn masked_layers_stay_bit_identical() {
        let patches = toy_patches(20, 4, 6);
        let model = SdaModel::init(4, &[6, 6, 6], 1).unwrap();
        let out = fine_tune(&model, &patches, &cfg(10, 0.5), &[false, false, true], true).unwrap();
        assert_eq!(out.hidden[0], model.hidden[0]);
        assert_eq!(out.hidden[1], model.hidden[1]);
        assert_ne!(out.hidden[2], model.hidden[2]);
        assert_ne!(out.output, model.output);
    }

    #[test]
    fn separable_toys_are_learned() {
        let patches = toy_patches(40, 4, 8);
        let model = SdaModel::init(4, &[10, 10, 10], 2).unwrap();
        let tuned = fine_tune(&model, &patches, &cfg(50, 0.5), &[true; 3], true).unwrap();
        assert_eq!(accuracy(&tuned, &patches).unwrap(), 1.0);
        let dark = Patch::new(4, vec![0.1; 16], (0.0, 0.0)).unwrap();
        let (label, p) = predict(&tuned, &dark).unwrap();
        assert_eq!(label, PatchLabel::Particle);
        assert!(p > 0.9, "{p}");
    }

    #[test]
    fn fine_tune_checks_inputs() {
        let model = SdaModel::init(4, &[6, 6], 1).unwrap();
        let patches = toy_patches(4, 4, 1);
        assert!(fine_tune(&model, &patches, &cfg(1, 0.1), &[true], true).is_err());
        let unlabeled: Vec<Patch> = patches
            .iter()
            .map(|p| Patch {
                label: None,
                ..p.clone()
            })
            .collect();
        assert!(fine_tune(&model, &unlabeled, &cfg(1, 0.1), &[true, true], true).is_err());
    }

    #[test]
    fn zero_model_predicts_half() {
        let mut model = SdaModel::init(3, &[4], 0).unwrap();
        model.hidden[0] = LayerParams::zeros(9, 4);
        model.output = LogisticLayer::zeros(4, 2);
        let patch = Patch::new(3, vec![0.4; 9], (0.0, 0.0)).unwrap();
        let p = model.probabilities(&patch).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        assert_eq!(predict(&model, &patch).unwrap().1, 0.5);
        let wrong = Patch::new(2, vec![0.4; 4], (0.0, 0.0)).unwrap();
        assert!(predict(&model, &wrong).is_err());
    }

    #[test]
    fn probabilities_sum_to_one() {
        let model = SdaModel::init(4, &[7, 3], 11).unwrap();
        for p in toy_patches(10, 4, 3) {
            let probs = model.probabilities(&p).unwrap();
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let (label, pp) = predict(&model, &p).unwrap();
            assert_eq!(pp, probs[1]);
            assert_eq!(label == PatchLabel::Particle, probs[1] > probs[0]);
        }
        let batch = predict_many(&model, &toy_patches(10, 4, 3)).unwrap();
        for (p, (l, pp)) in toy_patches(10, 4, 3).iter().zip(batch) {
            let (l1, p1) = predict(&model, p).unwrap();
            assert_eq!(l, l1);
            assert!((pp - p1).abs() < 1e-14);
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let patches = toy_patches(20, 4, 9);
        let mut model = pretrain(&patches, &cfg(3, 0.1), &CorruptionSpec::default(), &[5, 4]).unwrap();
        model = fine_tune(&model, &patches, &cfg(3, 0.1), &[true, true], true).unwrap();
        model.metadata.magnification = Some("db1".into());
        let back = SdaModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let model = SdaModel::init(2, &[2], 0).unwrap();
        let text = model.to_json().unwrap().replace("\"format_version\":1", "\"format_version\":99");
        assert!(matches!(
            SdaModel::from_json(&text),
            Err(Error::ModelVersion { found: 99, .. })
        ));
    }

    #[test]
    fn truncated_and_inconsistent_files_fail() {
        let model = SdaModel::init(2, &[3], 0).unwrap();
        let text = model.to_json().unwrap();
        assert!(SdaModel::from_json(&text[..text.len() / 2]).is_err());
        let bad = text.replace("\"layer_sizes\":[3]", "\"layer_sizes\":[4]");
        assert!(SdaModel::from_json(&bad).is_err());
        let side = text.replace("\"patch_side\":2", "\"patch_side\":3");
        assert!(SdaModel::from_json(&side).is_err());
    }

    #[test]
    fn minimal_hand_written_file() {
        let text = r#"{
            "format_version": 1,
            "patch_side": 1,
            "layer_sizes": [2],
            "layers": [{"W": [[0.5], [-0.5]], "b": [0, 0], "c": [0]}],
            "output": {"V": [[1, 0], [0, 1]], "d": [0, 0]}
        }"#;
        let model = SdaModel::from_json(text).unwrap();
        assert_eq!(model.layer_sizes(), vec![2]);
        assert_eq!(model.input_dim(), 1);
        assert_eq!(model.output.n_classes(), 2);
    }
}
