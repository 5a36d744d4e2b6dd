//! The learnable system: a small tanh MLP backbone standing in for a
//! pre-trained encoder, and an expanding per-domain cosine classifier with
//! the argmax-mod prediction rule.

use crate::error::{DuctError, Result};
use crate::numkit::{cosine_sim, Matrix, Rng, EPS};

/// Ordered collection of named tensors; the unit of checkpointing and
/// task-vector arithmetic. Two maps are arithmetic-compatible iff they have
/// identical (name, shape) sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    entries: Vec<(String, Matrix)>,
}

impl WeightMap {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Matrix) -> Result<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(DuctError::Precondition(format!(
                "duplicate tensor name {name}"
            )));
        }
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Matrix)] {
        &self.entries
    }

    pub fn compatible(&self, other: &WeightMap) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.same_shape(tb))
    }

    fn require_compatible(&self, other: &WeightMap) -> Result<()> {
        if !self.compatible(other) {
            return Err(DuctError::Shape("incompatible weight maps".into()));
        }
        Ok(())
    }

    /// Name-aligned element-wise `self + scale * other`.
    pub fn add_scaled(&self, other: &WeightMap, scale: f64) -> Result<WeightMap> {
        self.require_compatible(other)?;
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|((n, a), (_, b))| Ok((n.clone(), a.add_scaled(b, scale)?)))
            .collect::<Result<_>>()?;
        Ok(WeightMap { entries })
    }

    pub fn sub(&self, other: &WeightMap) -> Result<WeightMap> {
        self.add_scaled(other, -1.0)
    }

    pub fn max_abs_diff(&self, other: &WeightMap) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|((_, a), (_, b))| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

impl Default for WeightMap {
    fn default() -> Self {
        Self::new()
    }
}

/// Feed-forward embedding function: a chain of linear layers, tanh after
/// every layer. Weights live in a WeightMap under stable names
/// `layer{i}/weight` (out x in) and `layer{i}/bias` (out x 1), which keeps
/// clones arithmetic-compatible for task-vector math.
#[derive(Debug, Clone)]
pub struct Backbone {
    weights: WeightMap,
    dims: Vec<usize>,
}

impl Backbone {
    /// Build from explicit layer dimensions `[D, h1, ..., d]` with small
    /// random init.
    pub fn init(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(DuctError::Precondition("backbone needs >= 1 layer".into()));
        }
        let mut weights = WeightMap::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Matrix::new(
                fan_out,
                fan_in,
                (0..fan_out * fan_in)
                    .map(|_| rng.uniform(-bound, bound))
                    .collect(),
            )?;
            weights.insert(&format!("layer{l}/weight"), w)?;
            weights.insert(&format!("layer{l}/bias"), Matrix::zeros(fan_out, 1))?;
        }
        Ok(Self {
            weights,
            dims: dims.to_vec(),
        })
    }

    /// Default architecture: D -> 64 -> 32 -> d.
    pub fn mlp(input_dim: usize, embed_dim: usize, rng: &mut Rng) -> Result<Self> {
        Self::init(&[input_dim, 64, 32, embed_dim], rng)
    }

    pub fn from_weights(weights: WeightMap, dims: Vec<usize>) -> Result<Self> {
        let candidate = Self { weights, dims };
        candidate.check_dims()?;
        Ok(candidate)
    }

    fn check_dims(&self) -> Result<()> {
        for l in 0..self.num_layers() {
            let w = self
                .weights
                .get(&format!("layer{l}/weight"))
                .ok_or_else(|| DuctError::Shape(format!("missing layer{l}/weight")))?;
            if w.rows() != self.dims[l + 1] || w.cols() != self.dims[l] {
                return Err(DuctError::Shape(format!("layer{l} weight shape mismatch")));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn embed_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn weights(&self) -> &WeightMap {
        &self.weights
    }

    /// Replace weights with an arithmetic-compatible map (same architecture).
    pub fn with_weights(&self, weights: WeightMap) -> Result<Self> {
        self.weights.require_compatible(&weights)?;
        Ok(Self {
            weights,
            dims: self.dims.clone(),
        })
    }

    pub fn layer(&self, l: usize) -> (&Matrix, &Matrix) {
        let w = self.weights.get(&format!("layer{l}/weight")).unwrap();
        let b = self.weights.get(&format!("layer{l}/bias")).unwrap();
        (w, b)
    }

    /// Embed one input. Output length is `embed_dim`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x)?.pop().unwrap())
    }

    /// Forward pass retaining each layer's post-activation output
    /// (index 0 = first layer's activation). Used by backprop.
    pub fn forward_trace(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        if x.len() != self.input_dim() {
            return Err(DuctError::Shape(format!(
                "input length {} != {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut activations = Vec::with_capacity(self.num_layers());
        let mut cur = x.to_vec();
        for l in 0..self.num_layers() {
            let (w, b) = self.layer(l);
            let mut next = vec![0.0; w.rows()];
            for (i, out) in next.iter_mut().enumerate() {
                let mut z = b.get(i, 0);
                for (j, xi) in cur.iter().enumerate() {
                    z += w.get(i, j) * xi;
                }
                *out = z.tanh();
            }
            activations.push(next.clone());
            cur = next;
        }
        Ok(activations)
    }
}

/// Prediction under the expanded classifier: raw column index, its label
/// under the mod-|Y| rule, and the domain block it came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prediction {
    pub raw_index: usize,
    pub label: usize,
    pub domain_block: usize,
}

/// Cosine classifier over an expanding d x (b * |Y|) weight matrix.
/// Block j occupies columns [j*|Y|, (j+1)*|Y|).
#[derive(Debug, Clone, PartialEq)]
pub struct CosineClassifier {
    weights: Matrix,
    classes_per_domain: usize,
    logit_scale: f64,
}

impl CosineClassifier {
    pub const DEFAULT_SCALE: f64 = 10.0;

    pub fn new(weights: Matrix, classes_per_domain: usize, logit_scale: f64) -> Result<Self> {
        if classes_per_domain == 0 || !weights.cols().is_multiple_of(classes_per_domain) {
            return Err(DuctError::Shape(format!(
                "classifier cols {} not a multiple of |Y|={classes_per_domain}",
                weights.cols()
            )));
        }
        if logit_scale <= 0.0 {
            return Err(DuctError::Precondition(
                "logit_scale must be positive".into(),
            ));
        }
        Ok(Self {
            weights,
            classes_per_domain,
            logit_scale,
        })
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    pub fn embed_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn classes_per_domain(&self) -> usize {
        self.classes_per_domain
    }

    pub fn num_domains(&self) -> usize {
        self.weights.cols() / self.classes_per_domain
    }

    pub fn total_classes(&self) -> usize {
        self.weights.cols()
    }

    pub fn logit_scale(&self) -> f64 {
        self.logit_scale
    }

    /// Column range [start, end) of domain block `j`.
    pub fn block_range(&self, j: usize) -> (usize, usize) {
        (
            j * self.classes_per_domain,
            (j + 1) * self.classes_per_domain,
        )
    }

    /// Columns of block `j` as a d x |Y| matrix.
    pub fn block(&self, j: usize) -> Matrix {
        let (start, end) = self.block_range(j);
        let mut out = Matrix::zeros(self.embed_dim(), end - start);
        for i in 0..self.embed_dim() {
            for (c, col) in (start..end).enumerate() {
                out.set(i, c, self.weights.get(i, col));
            }
        }
        out
    }

    /// Overwrite block `j` with a d x |Y| matrix, leaving other blocks
    /// untouched.
    pub fn set_block(&mut self, j: usize, block: &Matrix) -> Result<()> {
        let (start, end) = self.block_range(j);
        if block.rows() != self.embed_dim() || block.cols() != end - start {
            return Err(DuctError::Shape("block shape mismatch".into()));
        }
        for i in 0..self.embed_dim() {
            for (c, col) in (start..end).enumerate() {
                self.weights.set(i, col, block.get(i, c));
            }
        }
        Ok(())
    }

    /// Scaled cosine logits, one per column.
    pub fn logits(&self, emb: &[f64]) -> Result<Vec<f64>> {
        if emb.len() != self.embed_dim() {
            return Err(DuctError::Shape(format!(
                "embedding length {} != {}",
                emb.len(),
                self.embed_dim()
            )));
        }
        (0..self.total_classes())
            .map(|c| {
                let col = self.weights.col(c);
                Ok(self.logit_scale * cosine_sim(&col, emb, EPS)?)
            })
            .collect()
    }

    /// Argmax over logits (ties -> lowest index), mapped through the
    /// mod-|Y| rule.
    pub fn predict(&self, emb: &[f64]) -> Result<Prediction> {
        let logits = self.logits(emb)?;
        Ok(self.predict_from_logits(&logits))
    }

    pub fn predict_from_logits(&self, logits: &[f64]) -> Prediction {
        let mut raw = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[raw] {
                raw = i;
            }
        }
        Prediction {
            raw_index: raw,
            label: raw % self.classes_per_domain,
            domain_block: raw / self.classes_per_domain,
        }
    }

    /// Append one domain block initialized from a d x |Y| matrix. Existing
    /// columns are copied bit-identically.
    pub fn expand(&self, init: &Matrix) -> Result<CosineClassifier> {
        if init.rows() != self.embed_dim() || init.cols() != self.classes_per_domain {
            return Err(DuctError::Shape(format!(
                "expand init {}x{}, expected {}x{}",
                init.rows(),
                init.cols(),
                self.embed_dim(),
                self.classes_per_domain
            )));
        }
        let new_cols = self.total_classes() + self.classes_per_domain;
        let mut w = Matrix::zeros(self.embed_dim(), new_cols);
        for i in 0..self.embed_dim() {
            for j in 0..self.total_classes() {
                w.set(i, j, self.weights.get(i, j));
            }
            for j in 0..self.classes_per_domain {
                w.set(i, self.total_classes() + j, init.get(i, j));
            }
        }
        CosineClassifier::new(w, self.classes_per_domain, self.logit_scale)
    }
}
