//! SGD training: joint fine-tuning of the backbone and the newest
//! classifier block, and classifier-only retraining on frozen merged
//! features. Gradients are hand-derived backprop through the tanh MLP and
//! the cosine head.

use serde::{Deserialize, Serialize};

use crate::error::{DuctError, Result};
use crate::model::{Backbone, CosineClassifier, WeightMap};
use crate::numkit::{dot, l2_norm, Matrix, Rng, EPS};

/// Hyperparameters for one optimization run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale default: larger steps suit the tiny synthetic sets.
    pub fn desk(seed: u64) -> Self {
        Self {
            learning_rate: 0.06,
            batch_size: 32,
            epochs: 100,
            seed,
        }
    }

    /// Hyperparameters sized for large real-image backbones; kept for
    /// reference and for configs that model that regime.
    pub fn large_scale(seed: u64) -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 128,
            epochs: 15,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(DuctError::Config(
                "learning_rate must be finite and >= 0".into(),
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(DuctError::Config(
                "batch_size and epochs must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// A labeled set of inputs: n x D matrix plus one class id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(DuctError::Shape(format!(
                "{} rows vs {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Softmax cross-entropy over a logit vector. Returns loss and d(loss)/d(logits).
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(DuctError::Domain(format!(
            "label {label} out of range for {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = -(exps[label] / sum).ln();
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Gradients of the cosine-head cross-entropy for a single (embedding, label)
/// pair: loss, d/d(embedding), and d/d(classifier column) for every column.
pub fn cross_entropy_cosine(
    clf: &CosineClassifier,
    emb: &[f64],
    label: usize,
) -> Result<(f64, Vec<f64>, Matrix)> {
    if label >= clf.total_classes() {
        return Err(DuctError::Domain(format!(
            "label {label} >= total classes {}",
            clf.total_classes()
        )));
    }
    let logits = clf.logits(emb)?;
    let (loss, dlogits) = softmax_cross_entropy(&logits, label)?;

    let s = clf.logit_scale();
    let ne = l2_norm(emb).max(EPS);
    let mut grad_emb = vec![0.0; emb.len()];
    let mut grad_w = Matrix::zeros(clf.embed_dim(), clf.total_classes());

    for c in 0..clf.total_classes() {
        let g = dlogits[c];
        if g == 0.0 {
            continue;
        }
        let w = clf.weights().col(c);
        let nw = l2_norm(&w).max(EPS);
        let cos = dot(&w, emb) / (nw * ne);
        // d(s*cos)/dw = s*(e/(nw*ne) - cos*w/nw^2); symmetric for e.
        for i in 0..emb.len() {
            grad_w.set(i, c, g * s * (emb[i] / (nw * ne) - cos * w[i] / (nw * nw)));
            grad_emb[i] += g * s * (w[i] / (nw * ne) - cos * emb[i] / (ne * ne));
        }
    }
    Ok((loss, grad_emb, grad_w))
}

/// Accumulated backbone gradients, name-aligned with its WeightMap.
fn backbone_backward(
    backbone: &Backbone,
    x: &[f64],
    activations: &[Vec<f64>],
    grad_emb: &[f64],
    grad_w: &mut [Matrix],
    grad_b: &mut [Vec<f64>],
) {
    // delta = dL/d(pre-activation) at the output layer.
    let top = activations.last().unwrap();
    let mut delta: Vec<f64> = grad_emb
        .iter()
        .zip(top)
        .map(|(g, a)| g * (1.0 - a * a))
        .collect();

    for l in (0..backbone.num_layers()).rev() {
        let input: &[f64] = if l == 0 { x } else { &activations[l - 1] };
        let (w, _) = backbone.layer(l);
        for i in 0..w.rows() {
            grad_b[l][i] += delta[i];
            let d = delta[i];
            for j in 0..w.cols() {
                let cur = grad_w[l].get(i, j);
                grad_w[l].set(i, j, cur + d * input[j]);
            }
        }
        if l > 0 {
            let prev = &activations[l - 1];
            let mut next_delta = vec![0.0; w.cols()];
            for (j, nd) in next_delta.iter_mut().enumerate() {
                let mut acc = 0.0;
                for i in 0..w.rows() {
                    acc += w.get(i, j) * delta[i];
                }
                *nd = acc * (1.0 - prev[j] * prev[j]);
            }
            delta = next_delta;
        }
    }
}

fn zero_grads(backbone: &Backbone) -> (Vec<Matrix>, Vec<Vec<f64>>) {
    let mut gw = Vec::new();
    let mut gb = Vec::new();
    for l in 0..backbone.num_layers() {
        let (w, b) = backbone.layer(l);
        gw.push(Matrix::zeros(w.rows(), w.cols()));
        gb.push(vec![0.0; b.rows()]);
    }
    (gw, gb)
}

/// Which classifier columns receive updates.
#[derive(Debug, Clone, Copy)]
pub struct TrainableBlock {
    pub domain: usize,
}

fn minibatch_indices(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Joint fine-tuning of backbone and the trainable classifier block.
/// Old blocks are frozen: their columns never receive updates. Returns
/// updated copies plus the mean loss per epoch.
pub fn finetune(
    backbone: &Backbone,
    clf: &CosineClassifier,
    data: &LabeledBatch,
    cfg: &TrainConfig,
    block: TrainableBlock,
) -> Result<(Backbone, CosineClassifier, Vec<f64>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(DuctError::Precondition("empty training data".into()));
    }
    let mut bb = backbone.clone();
    let mut head = clf.clone();
    let (block_start, block_end) = head.block_range(block.domain);
    let mut rng = Rng::derive(cfg.seed, 0x66696e65);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for _epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for batch in minibatch_indices(data.len(), cfg.batch_size, &mut rng) {
            let (mut gw, mut gb) = zero_grads(&bb);
            let mut gclf = Matrix::zeros(head.embed_dim(), head.total_classes());
            for &idx in &batch {
                let x = data.inputs.row(idx);
                let trace = bb.forward_trace(x)?;
                let emb = trace.last().unwrap();
                // Labels address the trainable block's columns.
                let raw_label = block_start + data.labels[idx];
                let (loss, grad_emb, grad_w) = cross_entropy_cosine(&head, emb, raw_label)?;
                epoch_loss += loss;
                gclf = gclf.add_scaled(&grad_w, 1.0)?;
                backbone_backward(&bb, x, &trace, &grad_emb, &mut gw, &mut gb);
            }
            let step = cfg.learning_rate / batch.len() as f64;
            bb = apply_backbone_step(&bb, &gw, &gb, step)?;
            // Only the trainable block moves; other columns stay bit-equal.
            let w = head.weights_mut();
            for i in 0..gclf.rows() {
                for c in block_start..block_end {
                    w.set(i, c, w.get(i, c) - step * gclf.get(i, c));
                }
            }
        }
        let mean = epoch_loss / data.len() as f64;
        if !mean.is_finite() {
            return Err(DuctError::Training("loss became non-finite".into()));
        }
        epoch_losses.push(mean);
    }
    Ok((bb, head, epoch_losses))
}

fn apply_backbone_step(
    backbone: &Backbone,
    gw: &[Matrix],
    gb: &[Vec<f64>],
    step: f64,
) -> Result<Backbone> {
    let mut weights = WeightMap::new();
    for l in 0..backbone.num_layers() {
        let (w, b) = backbone.layer(l);
        weights.insert(&format!("layer{l}/weight"), w.add_scaled(&gw[l], -step)?)?;
        let gb_mat = Matrix::new(b.rows(), 1, gb[l].clone())?;
        weights.insert(&format!("layer{l}/bias"), b.add_scaled(&gb_mat, -step)?)?;
    }
    Backbone::from_weights(weights, backbone.dims().to_vec())
}

/// Classifier-only retraining on the frozen merged backbone: embeddings are
/// cached once, and only the newest block's columns are updated.
pub fn retrain_new_classifier(
    merged: &Backbone,
    clf: &CosineClassifier,
    data: &LabeledBatch,
    cfg: &TrainConfig,
) -> Result<CosineClassifier> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(DuctError::Precondition("empty training data".into()));
    }
    let newest = clf.num_domains() - 1;
    let (block_start, block_end) = clf.block_range(newest);
    let embeddings: Vec<Vec<f64>> = (0..data.len())
        .map(|i| merged.forward(data.inputs.row(i)))
        .collect::<Result<_>>()?;

    let mut head = clf.clone();
    let mut rng = Rng::derive(cfg.seed, 0x72657472);
    for _epoch in 0..cfg.epochs {
        for batch in minibatch_indices(data.len(), cfg.batch_size, &mut rng) {
            let mut gclf = Matrix::zeros(head.embed_dim(), head.total_classes());
            for &idx in &batch {
                let raw_label = block_start + data.labels[idx];
                let (_, _, grad_w) = cross_entropy_cosine(&head, &embeddings[idx], raw_label)?;
                gclf = gclf.add_scaled(&grad_w, 1.0)?;
            }
            let step = cfg.learning_rate / batch.len() as f64;
            let w = head.weights_mut();
            for i in 0..gclf.rows() {
                for c in block_start..block_end {
                    w.set(i, c, w.get(i, c) - step * gclf.get(i, c));
                }
            }
        }
    }
    Ok(head)
}

/// Mean loss plus per-layer backbone weight gradients, per-layer bias
/// gradients, and the full classifier weight gradient.
pub type LossGradients = (f64, Vec<Matrix>, Vec<Vec<f64>>, Matrix);

/// Analytic gradients of the mean joint loss over a batch: returns the loss,
/// per-layer backbone weight and bias gradients, and the classifier weight
/// gradient (all columns; callers restrict to a block as needed). Intended
/// for gradient checking and optimizer diagnostics.
pub fn loss_gradients(
    backbone: &Backbone,
    clf: &CosineClassifier,
    data: &LabeledBatch,
    block: TrainableBlock,
) -> Result<LossGradients> {
    if data.is_empty() {
        return Err(DuctError::Precondition("empty batch".into()));
    }
    let (block_start, _) = clf.block_range(block.domain);
    let (mut gw, mut gb) = zero_grads(backbone);
    let mut gclf = Matrix::zeros(clf.embed_dim(), clf.total_classes());
    let mut total = 0.0;
    for idx in 0..data.len() {
        let x = data.inputs.row(idx);
        let trace = backbone.forward_trace(x)?;
        let emb = trace.last().unwrap();
        let raw_label = block_start + data.labels[idx];
        let (loss, grad_emb, grad_w) = cross_entropy_cosine(clf, emb, raw_label)?;
        total += loss;
        gclf = gclf.add_scaled(&grad_w, 1.0)?;
        backbone_backward(backbone, x, &trace, &grad_emb, &mut gw, &mut gb);
    }
    let n = data.len() as f64;
    for g in gw.iter_mut() {
        *g = g.scale(1.0 / n);
    }
    for g in gb.iter_mut() {
        g.iter_mut().for_each(|v| *v /= n);
    }
    Ok((total / n, gw, gb, gclf.scale(1.0 / n)))
}

/// Mean loss of the cosine head over a batch under a fixed backbone, with
/// labels addressed into `block`.
pub fn mean_loss(
    backbone: &Backbone,
    clf: &CosineClassifier,
    data: &LabeledBatch,
    block: usize,
) -> Result<f64> {
    let (start, _) = clf.block_range(block);
    let mut total = 0.0;
    for i in 0..data.len() {
        let emb = backbone.forward(data.inputs.row(i))?;
        let logits = clf.logits(&emb)?;
        let (loss, _) = softmax_cross_entropy(&logits, start + data.labels[i])?;
        total += loss;
    }
    Ok(total / data.len() as f64)
}
