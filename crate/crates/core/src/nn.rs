//! A small 1D convolutional classifier: stacked `conv -> ReLU` blocks with
//! stride 1 and no padding, global average pooling and a dense softmax head.
//!
//! Training runs in f64 for exact gradient checks; the selected weights are
//! rounded to f32 so an in-memory model and its checkpoint agree bit for bit.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::{Container, Tensor};
use crate::dataset::{MtsDataset, MtsSample};
use crate::error::{Error, Result};
use crate::seed;
use crate::util::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnnConfig {
    pub conv_layers: Vec<ConvSpec>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            conv_layers: vec![
                ConvSpec { filters: 32, kernel: 8 },
                ConvSpec { filters: 64, kernel: 5 },
                ConvSpec { filters: 128, kernel: 3 },
            ],
            epochs: 500,
            batch_size: 16,
            learning_rate: 1e-3,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl CnnConfig {
    pub fn kernels(&self) -> Vec<usize> {
        self.conv_layers.iter().map(|l| l.kernel).collect()
    }

    /// Checks the architecture against an input length and returns the
    /// per-layer output lengths.
    pub fn layer_lengths(&self, input_len: usize) -> Result<Vec<usize>> {
        if self.conv_layers.len() < 2 {
            return Err(Error::Config("the CNN needs at least two convolutional layers".into()));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("batch size and learning rate must be positive".into()));
        }
        let mut len = input_len;
        let mut out = Vec::with_capacity(self.conv_layers.len());
        for (l, spec) in self.conv_layers.iter().enumerate() {
            if spec.kernel < 2 || spec.filters == 0 {
                return Err(Error::Config(format!(
                    "layer {l}: kernel width must be >= 2 and filters >= 1"
                )));
            }
            if len < spec.kernel {
                return Err(Error::Config(format!(
                    "layer {l}: kernel {} does not fit input of length {len}",
                    spec.kernel
                )));
            }
            len = len - spec.kernel + 1;
            out.push(len);
        }
        Ok(out)
    }
}

/// Receptive-field metadata of one conv layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveField {
    /// Input steps feeding one neuron.
    pub length: usize,
    /// Input steps between adjacent neurons.
    pub jump: usize,
    /// Neurons per channel.
    pub neurons: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub filters: usize,
    pub in_channels: usize,
    pub kernel: usize,
    /// `filters x in_channels x kernel`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    #[inline]
    fn w(&self, f: usize, c: usize) -> &[f64] {
        let o = (f * self.in_channels + c) * self.kernel;
        &self.weights[o..o + self.kernel]
    }

    fn forward(&self, input: &[f64], in_len: usize) -> Vec<f64> {
        let out_len = in_len - self.kernel + 1;
        let mut out = vec![0.0; self.filters * out_len];
        for f in 0..self.filters {
            let row = &mut out[f * out_len..(f + 1) * out_len];
            row.fill(self.bias[f]);
            for c in 0..self.in_channels {
                let x = &input[c * in_len..(c + 1) * in_len];
                for (k, &w) in self.w(f, c).iter().enumerate() {
                    for (o, &xv) in row.iter_mut().zip(&x[k..k + out_len]) {
                        *o += w * xv;
                    }
                }
            }
            row.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingHistory {
    /// Mean training cross-entropy; entry 0 is measured before any update.
    pub epoch_losses: Vec<f64>,
    pub val_accuracies: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedCnn {
    pub config: CnnConfig,
    pub in_channels: usize,
    pub input_len: usize,
    pub classes: usize,
    pub conv: Vec<ConvLayer>,
    /// `classes x last_filters`, row-major.
    pub head_weights: Vec<f64>,
    pub head_bias: Vec<f64>,
    pub receptive_fields: Vec<ReceptiveField>,
    pub history: TrainingHistory,
}

/// Post-ReLU activations of one conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    pub layer: usize,
    pub channels: usize,
    pub neurons: usize,
    pub values: Vec<f64>,
}

impl ActivationTensor {
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c * self.neurons..(c + 1) * self.neurons]
    }

    #[inline]
    pub fn get(&self, c: usize, n: usize) -> f64 {
        self.values[c * self.neurons + n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub probs: Vec<f64>,
    pub activations: Vec<ActivationTensor>,
}

/// Inclusive input-time interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

impl Window {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, t: usize) -> bool {
        (self.start..=self.end).contains(&t)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

impl TrainedCnn {
    /// Glorot-uniform weights, zero biases.
    pub fn init(cfg: &CnnConfig, in_channels: usize, input_len: usize, classes: usize, seed: u64) -> Result<Self> {
        let lengths = cfg.layer_lengths(input_len)?;
        if classes < 1 || in_channels < 1 {
            return Err(Error::Config("need at least one channel and one class".into()));
        }
        let mut rng = seed::rng(seed);
        let mut conv = Vec::with_capacity(cfg.conv_layers.len());
        let mut fields = Vec::with_capacity(cfg.conv_layers.len());
        let mut channels = in_channels;
        let mut rf = 1;
        for (spec, &neurons) in cfg.conv_layers.iter().zip(&lengths) {
            let fan_in = (channels * spec.kernel) as f64;
            let fan_out = (spec.filters * spec.kernel) as f64;
            let limit = (6.0 / (fan_in + fan_out)).sqrt();
            let weights = (0..spec.filters * channels * spec.kernel)
                .map(|_| rng.gen_range(-limit..limit))
                .collect();
            conv.push(ConvLayer {
                filters: spec.filters,
                in_channels: channels,
                kernel: spec.kernel,
                weights,
                bias: vec![0.0; spec.filters],
            });
            rf += spec.kernel - 1;
            fields.push(ReceptiveField { length: rf, jump: 1, neurons });
            channels = spec.filters;
        }
        let limit = (6.0 / (channels + classes) as f64).sqrt();
        let head_weights = (0..classes * channels).map(|_| rng.gen_range(-limit..limit)).collect();
        Ok(Self {
            config: cfg.clone(),
            in_channels,
            input_len,
            classes,
            conv,
            head_weights,
            head_bias: vec![0.0; classes],
            receptive_fields: fields,
            history: TrainingHistory::default(),
        })
    }

    pub fn layers(&self) -> usize {
        self.conv.len()
    }

    fn check_shape(&self, sample: &MtsSample) -> Result<()> {
        if sample.channels != self.in_channels || sample.len != self.input_len {
            return Err(Error::shape(
                format!("{}x{}", self.in_channels, self.input_len),
                format!("{}x{}", sample.channels, sample.len),
            ));
        }
        Ok(())
    }

    /// Layer outputs (post-ReLU), GAP features, and class probabilities.
    fn run(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.conv.len());
        let mut len = self.input_len;
        for layer in &self.conv {
            let input = acts.last().map(Vec::as_slice).unwrap_or(x);
            let out = layer.forward(input, len);
            len = len - layer.kernel + 1;
            acts.push(out);
        }
        let last = self.conv.last().expect("at least two layers");
        let last_act = acts.last().expect("at least two layers");
        let pooled: Vec<f64> = last_act.chunks(len).map(|r| r.iter().sum::<f64>() / len as f64).collect();
        let logits: Vec<f64> = (0..self.classes)
            .map(|k| {
                let w = &self.head_weights[k * last.filters..(k + 1) * last.filters];
                self.head_bias[k] + w.iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let probs = softmax(&logits);
        (acts, pooled, probs)
    }

    pub fn forward_with_activations(&self, sample: &MtsSample) -> Result<Forward> {
        self.check_shape(sample)?;
        let (acts, _, probs) = self.run(&sample.values);
        let activations = acts
            .into_iter()
            .enumerate()
            .map(|(l, values)| ActivationTensor {
                layer: l,
                channels: self.conv[l].filters,
                neurons: self.receptive_fields[l].neurons,
                values,
            })
            .collect();
        Ok(Forward { probs, activations })
    }

    pub fn class_probs(&self, sample: &MtsSample) -> Result<Vec<f64>> {
        self.check_shape(sample)?;
        Ok(self.run(&sample.values).2)
    }

    /// Input interval `[a, b]` that can influence `neuron` of `layer`.
    pub fn receptive_field(&self, layer: usize, neuron: usize) -> Result<Window> {
        let rf = self.receptive_fields.get(layer).ok_or(Error::OutOfRange {
            what: "layer",
            index: layer,
            len: self.receptive_fields.len(),
        })?;
        if neuron >= rf.neurons {
            return Err(Error::OutOfRange {
                what: "neuron",
                index: neuron,
                len: rf.neurons,
            });
        }
        let start = neuron * rf.jump;
        Ok(Window {
            start,
            end: start + rf.length - 1,
        })
    }

    /// Predicted labels (argmax, ties to the lowest class) and accuracy.
    pub fn predict(&self, ds: &MtsDataset) -> Result<(Vec<usize>, f64)> {
        let mut labels = Vec::with_capacity(ds.len());
        let mut correct = 0usize;
        for s in &ds.samples {
            let label = argmax(&self.class_probs(s)?);
            correct += usize::from(label == s.label);
            labels.push(label);
        }
        let acc = if ds.is_empty() { 0.0 } else { correct as f64 / ds.len() as f64 };
        Ok((labels, acc))
    }

    pub fn parameter_count(&self) -> usize {
        self.conv.iter().map(|l| l.weights.len() + l.bias.len()).sum::<usize>()
            + self.head_weights.len()
            + self.head_bias.len()
    }

    /// All parameters in a fixed order: per layer weights then bias, then the head.
    pub fn parameters(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.parameter_count());
        for l in &self.conv {
            p.extend_from_slice(&l.weights);
            p.extend_from_slice(&l.bias);
        }
        p.extend_from_slice(&self.head_weights);
        p.extend_from_slice(&self.head_bias);
        p
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.conv {
            v.push(&mut l.weights);
            v.push(&mut l.bias);
        }
        v.push(&mut self.head_weights);
        v.push(&mut self.head_bias);
        v
    }

    pub fn set_parameters(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.parameter_count());
        let mut offset = 0;
        for s in self.param_slices_mut() {
            s.copy_from_slice(&params[offset..offset + s.len()]);
            offset += s.len();
        }
    }

    fn add_to_parameters(&mut self, delta: &[f64]) {
        let mut offset = 0;
        for s in self.param_slices_mut() {
            for (p, d) in s.iter_mut().zip(&delta[offset..]) {
                *p += d;
            }
            offset += s.len();
        }
    }

    /// Mean cross-entropy over `samples` and its gradient in `parameters()` order.
    pub fn loss_and_gradient(&self, samples: &[&MtsSample]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.parameter_count()];
        let mut loss = 0.0;
        for s in samples {
            loss += self.accumulate_gradient(&s.values, s.label, &mut grad);
        }
        let n = samples.len().max(1) as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        (loss / n, grad)
    }

    pub fn loss(&self, samples: &[&MtsSample]) -> f64 {
        let total: f64 = samples
            .iter()
            .map(|s| -self.run(&s.values).2[s.label].max(1e-300).ln())
            .sum();
        total / samples.len().max(1) as f64
    }

    fn accumulate_gradient(&self, x: &[f64], label: usize, grad: &mut [f64]) -> f64 {
        let (acts, pooled, probs) = self.run(x);
        let loss = -probs[label].max(1e-300).ln();

        // Offsets of each parameter block inside `grad`.
        let mut offsets = Vec::with_capacity(self.conv.len());
        let mut o = 0;
        for l in &self.conv {
            offsets.push(o);
            o += l.weights.len() + l.bias.len();
        }
        let head_w = o;
        let head_b = o + self.head_weights.len();

        let last = self.conv.last().expect("at least two layers");
        let filters = last.filters;
        let mut d_pooled = vec![0.0; filters];
        for k in 0..self.classes {
            let dz = probs[k] - f64::from(u8::from(k == label));
            grad[head_b + k] += dz;
            for f in 0..filters {
                grad[head_w + k * filters + f] += dz * pooled[f];
                d_pooled[f] += dz * self.head_weights[k * filters + f];
            }
        }

        let last_len = self.receptive_fields.last().expect("layers").neurons;
        let mut d_out: Vec<f64> = Vec::with_capacity(filters * last_len);
        for f in 0..filters {
            d_out.extend(std::iter::repeat_n(d_pooled[f] / last_len as f64, last_len));
        }

        for l in (0..self.conv.len()).rev() {
            let layer = &self.conv[l];
            let out = &acts[l];
            let out_len = self.receptive_fields[l].neurons;
            let in_len = out_len + layer.kernel - 1;
            let input: &[f64] = if l == 0 { x } else { &acts[l - 1] };
            // ReLU gate: the output is positive exactly where the pre-activation was.
            for (d, &a) in d_out.iter_mut().zip(out) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
            let wo = offsets[l];
            let bo = wo + layer.weights.len();
            let mut d_in = if l > 0 { vec![0.0; layer.in_channels * in_len] } else { Vec::new() };
            for f in 0..layer.filters {
                let dz = &d_out[f * out_len..(f + 1) * out_len];
                grad[bo + f] += dz.iter().sum::<f64>();
                for c in 0..layer.in_channels {
                    let xin = &input[c * in_len..(c + 1) * in_len];
                    let widx = (f * layer.in_channels + c) * layer.kernel;
                    for k in 0..layer.kernel {
                        let g: f64 = dz.iter().zip(&xin[k..k + out_len]).map(|(a, b)| a * b).sum();
                        grad[wo + widx + k] += g;
                        if l > 0 {
                            let w = layer.weights[widx + k];
                            let dx = &mut d_in[c * in_len + k..c * in_len + k + out_len];
                            for (dxv, &dzv) in dx.iter_mut().zip(dz) {
                                *dxv += w * dzv;
                            }
                        }
                    }
                }
            }
            d_out = d_in;
        }
        loss
    }

    fn round_to_f32(&mut self) {
        let p: Vec<f64> = self.parameters().iter().map(|&v| f64::from(v as f32)).collect();
        self.set_parameters(&p);
    }

    pub fn to_container(&self) -> Container {
        let mut tensors = Vec::new();
        for (l, layer) in self.conv.iter().enumerate() {
            tensors.push(Tensor::from_f64(
                &format!("conv{l}.weight"),
                vec![layer.filters, layer.in_channels, layer.kernel],
                &layer.weights,
            ));
            tensors.push(Tensor::from_f64(&format!("conv{l}.bias"), vec![layer.filters], &layer.bias));
        }
        let last = self.conv.last().expect("layers").filters;
        tensors.push(Tensor::from_f64("head.weight", vec![self.classes, last], &self.head_weights));
        tensors.push(Tensor::from_f64("head.bias", vec![self.classes], &self.head_bias));
        Container {
            kind: "cnn-checkpoint".into(),
            meta: serde_json::json!({
                "architecture": self.config,
                "in_channels": self.in_channels,
                "input_len": self.input_len,
                "classes": self.classes,
                "seed": self.config.seed,
                "metrics": self.history,
            }),
            tensors,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "cnn-checkpoint" {
            return Err(Error::Artifact(format!("expected a cnn-checkpoint, found `{}`", c.kind)));
        }
        let field = |k: &str| c.meta.get(k).cloned().ok_or_else(|| Error::Artifact(format!("checkpoint lacks `{k}`")));
        let config: CnnConfig = serde_json::from_value(field("architecture")?)?;
        let in_channels: usize = serde_json::from_value(field("in_channels")?)?;
        let input_len: usize = serde_json::from_value(field("input_len")?)?;
        let classes: usize = serde_json::from_value(field("classes")?)?;
        let history: TrainingHistory = serde_json::from_value(field("metrics")?)?;
        let mut model = Self::init(&config, in_channels, input_len, classes, 0)?;
        for (l, layer) in model.conv.iter_mut().enumerate() {
            layer.weights = c.tensor(&format!("conv{l}.weight"))?.to_f64();
            layer.bias = c.tensor(&format!("conv{l}.bias"))?.to_f64();
        }
        model.head_weights = c.tensor("head.weight")?.to_f64();
        model.head_bias = c.tensor("head.bias")?.to_f64();
        if model.parameters().len() != model.parameter_count()
            || model.conv.iter().any(|l| l.weights.len() != l.filters * l.in_channels * l.kernel)
            || model.head_weights.len() != classes * model.conv.last().expect("layers").filters
        {
            return Err(Error::Artifact("checkpoint tensor shapes disagree with architecture".into()));
        }
        model.history = history;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::from_bytes(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Mini-batch momentum SGD on cross-entropy. Keeps the weights of the epoch
/// with the best validation accuracy (earliest on ties); with an empty
/// validation set, training accuracy decides.
pub fn train_cnn(train: &MtsDataset, val: &MtsDataset, cfg: &CnnConfig) -> Result<TrainedCnn> {
    if !val.is_empty() && (val.channels != train.channels || val.len != train.len || val.classes != train.classes) {
        return Err(Error::shape(
            format!("{}x{} / {} classes", train.channels, train.len, train.classes),
            format!("{}x{} / {} classes", val.channels, val.len, val.classes),
        ));
    }
    let mut model = TrainedCnn::init(cfg, train.channels, train.len, train.classes, seed::derive(cfg.seed, "cnn-init", 0))?;
    let mut rng = seed::rng(seed::derive(cfg.seed, "cnn-shuffle", 0));
    let refs: Vec<&MtsSample> = train.samples.iter().collect();
    let mut velocity = vec![0.0; model.parameter_count()];
    let mut history = TrainingHistory {
        epoch_losses: vec![model.loss(&refs)],
        ..Default::default()
    };
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<&MtsSample> = batch.iter().map(|&i| &train.samples[i]).collect();
            let (loss, grad) = model.loss_and_gradient(&samples);
            epoch_loss += loss * batch.len() as f64;
            for (v, g) in velocity.iter_mut().zip(&grad) {
                *v = cfg.momentum * *v - cfg.learning_rate * g;
            }
            model.add_to_parameters(&velocity);
        }
        history.epoch_losses.push(epoch_loss / train.len().max(1) as f64);
        let acc = if val.is_empty() { model.predict(train)?.1 } else { model.predict(val)?.1 };
        history.val_accuracies.push(acc);
        if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
            best = Some((acc, epoch, model.parameters()));
        }
        log::debug!("cnn epoch {epoch}: loss {:.5} val acc {acc:.4}", history.epoch_losses[epoch]);
    }
    if let Some((acc, epoch, params)) = best {
        model.set_parameters(&params);
        history.best_epoch = epoch;
        history.best_val_accuracy = acc;
    }
    model.round_to_f32();
    model.history = history;
    if model.parameters().iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("training diverged to non-finite weights".into()));
    }
    Ok(model)
}
