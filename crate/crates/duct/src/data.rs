//! Seeded synthetic domain-shift benchmark: shared class prototypes pushed
//! through per-domain rotation/scale/shift transforms, a pretraining domain
//! for the base backbone, and a small binary dataset file format.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::consolidate::{class_centers, ClassCenterTable};
use crate::error::{DuctError, Result};
use crate::model::{Backbone, CosineClassifier};
use crate::numkit::{cosine_sim, Matrix, Rng, EPS};
use crate::train::{finetune, LabeledBatch, TrainConfig, TrainableBlock};

/// One domain's input transform: x = R * (scale * (prototype + noise)) + shift.
/// `rotation_seed == 0` is reserved for the identity rotation (used by the
/// pretraining domain).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub rotation_seed: u64,
    pub scale: f64,
    pub shift: Vec<f64>,
    pub noise_sigma: f64,
}

impl DomainSpec {
    pub fn identity(input_dim: usize) -> Self {
        Self {
            rotation_seed: 0,
            scale: 1.0,
            shift: vec![0.0; input_dim],
            noise_sigma: 0.3,
        }
    }

    pub fn validate(&self, input_dim: usize) -> Result<()> {
        if self.scale <= 0.0 {
            return Err(DuctError::Config("domain scale must be positive".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(DuctError::Config("noise_sigma must be nonnegative".into()));
        }
        if self.shift.len() != input_dim {
            return Err(DuctError::Config("shift length != input_dim".into()));
        }
        Ok(())
    }

    /// Orthogonal rotation derived from the seed: a product of random plane
    /// (Givens) rotations with bounded angles, so consecutive domains are
    /// shifted hard enough to induce forgetting but stay learnably related.
    pub fn rotation(&self, input_dim: usize) -> Matrix {
        if self.rotation_seed == 0 {
            return Matrix::identity(input_dim);
        }
        let mut rng = Rng::derive(self.rotation_seed, 0x726f74);
        let mut r = Matrix::identity(input_dim);
        let num_planes = 2 * input_dim;
        // Mild per-plane angles: enough drift to matter, small enough that
        // classes keep their relative geometry across domains.
        let max_angle = 0.15_f64;
        for _ in 0..num_planes {
            let i = rng.next_below(input_dim);
            let mut j = rng.next_below(input_dim);
            while j == i {
                j = rng.next_below(input_dim);
            }
            let theta = if rng.next_f64() < 0.5 {
                -max_angle
            } else {
                max_angle
            };
            let (c, s) = (theta.cos(), theta.sin());
            // Apply the plane rotation to rows i and j of r.
            for k in 0..input_dim {
                let a = r.get(i, k);
                let b = r.get(j, k);
                r.set(i, k, c * a - s * b);
                r.set(j, k, s * a + c * b);
            }
        }
        r
    }
}

/// Full benchmark description. Prototypes may be given explicitly; when the
/// list is empty they are drawn from `seed` (uniform on the radius-6 sphere
/// with a rejection-enforced minimum pairwise distance).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub domains: Vec<DomainSpec>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    #[serde(default)]
    pub class_prototypes: Vec<Vec<f64>>,
    pub seed: u64,
}

impl BenchmarkSpec {
    /// Default desk benchmark: 10 classes, 16 input dims, 5 domains,
    /// 100 train / 50 test per class per domain.
    pub fn desk_default(seed: u64) -> Self {
        let input_dim = 16;
        // Strong scale swings push the tanh backbone into saturation (or
        // near-linearity), which is what makes the frozen base struggle.
        let scales = [1.1, 0.9, 1.2, 0.95, 1.0];
        let domains = (0..5)
            .map(|i| {
                let mut rng = Rng::derive(seed, 0x646f6d00 + i as u64);
                // Fixed-norm shifts: random direction, equal magnitude, so no
                // single domain dominates the drift budget.
                let mut shift: Vec<f64> = (0..input_dim).map(|_| rng.normal()).collect();
                let norm = shift.iter().map(|v| v * v).sum::<f64>().sqrt();
                let target = 1.0 * (input_dim as f64 / 3.0).sqrt();
                shift.iter_mut().for_each(|v| *v *= target / norm);
                DomainSpec {
                    rotation_seed: seed.wrapping_mul(31).wrapping_add(i as u64 + 1),
                    scale: scales[i],
                    shift,
                    noise_sigma: 2.3,
                }
            })
            .collect();
        Self {
            num_classes: 10,
            input_dim,
            domains,
            train_per_class: 100,
            test_per_class: 50,
            class_prototypes: Vec::new(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.input_dim == 0 || self.domains.is_empty() {
            return Err(DuctError::Config("empty benchmark spec".into()));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(DuctError::Config(
                "per-class sample counts must be >= 1".into(),
            ));
        }
        for d in &self.domains {
            d.validate(self.input_dim)?;
        }
        if !self.class_prototypes.is_empty()
            && (self.class_prototypes.len() != self.num_classes
                || self
                    .class_prototypes
                    .iter()
                    .any(|p| p.len() != self.input_dim))
        {
            return Err(DuctError::Config("class_prototypes shape mismatch".into()));
        }
        Ok(())
    }

    /// Prototypes: uniform on the D-sphere of radius 6, minimum pairwise
    /// distance 6 enforced by rejection.
    pub fn prototypes(&self) -> Result<Matrix> {
        if !self.class_prototypes.is_empty() {
            return Matrix::from_rows(&self.class_prototypes);
        }
        let radius = 6.0;
        let min_dist = 6.0;
        let mut rng = Rng::derive(self.seed, 0x70726f74);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut attempts = 0;
        while rows.len() < self.num_classes {
            attempts += 1;
            if attempts > 100_000 {
                return Err(DuctError::Numeric(
                    "prototype rejection sampling stalled".into(),
                ));
            }
            let mut p: Vec<f64> = (0..self.input_dim).map(|_| rng.normal()).collect();
            let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-9 {
                continue;
            }
            for v in &mut p {
                *v *= radius / norm;
            }
            let ok = rows.iter().all(|q| {
                let d2: f64 = p.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum();
                d2.sqrt() >= min_dist
            });
            if ok {
                rows.push(p);
            }
        }
        Matrix::from_rows(&rows)
    }
}

/// Train/test draws for one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub train: LabeledBatch,
    pub test: LabeledBatch,
    pub domain_index: usize,
}

fn sample_batch(
    spec: &BenchmarkSpec,
    domain: &DomainSpec,
    rotation: &Matrix,
    prototypes: &Matrix,
    per_class: usize,
    rng: &mut Rng,
) -> Result<LabeledBatch> {
    let d = spec.input_dim;
    let mut rows = Vec::with_capacity(spec.num_classes * per_class);
    let mut labels = Vec::with_capacity(spec.num_classes * per_class);
    for class in 0..spec.num_classes {
        for _ in 0..per_class {
            // x = R * (scale * (prototype + n)) + shift
            let mut v: Vec<f64> = (0..d)
                .map(|k| {
                    domain.scale * (prototypes.get(class, k) + domain.noise_sigma * rng.normal())
                })
                .collect();
            let mut x = vec![0.0; d];
            for (i, xi) in x.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (k, vk) in v.iter().enumerate() {
                    acc += rotation.get(i, k) * vk;
                }
                *xi = acc + domain.shift[i];
            }
            v.clear();
            rows.push(x);
            labels.push(class);
        }
    }
    LabeledBatch::new(Matrix::from_rows(&rows)?, labels)
}

/// Generate all domain datasets. Pure function of the spec: identical specs
/// produce bit-identical datasets.
pub fn generate(spec: &BenchmarkSpec) -> Result<Vec<DomainDataset>> {
    spec.validate()?;
    let prototypes = spec.prototypes()?;
    let mut out = Vec::with_capacity(spec.domains.len());
    for (i, domain) in spec.domains.iter().enumerate() {
        let rotation = domain.rotation(spec.input_dim);
        let mut train_rng = Rng::derive(spec.seed, 0x7472 * (i as u64 + 1));
        let mut test_rng = Rng::derive(spec.seed, 0x7465 * (i as u64 + 1) + 0xABCDEF);
        let train = sample_batch(
            spec,
            domain,
            &rotation,
            &prototypes,
            spec.train_per_class,
            &mut train_rng,
        )?;
        let test = sample_batch(
            spec,
            domain,
            &rotation,
            &prototypes,
            spec.test_per_class,
            &mut test_rng,
        )?;
        out.push(DomainDataset {
            train,
            test,
            domain_index: i,
        });
    }
    Ok(out)
}

/// Generate the dedicated pretraining domain (identity transform). This
/// domain is never reused as an incremental domain.
pub fn pretraining_dataset(spec: &BenchmarkSpec) -> Result<DomainDataset> {
    spec.validate()?;
    let domain = DomainSpec::identity(spec.input_dim);
    let prototypes = spec.prototypes()?;
    let rotation = Matrix::identity(spec.input_dim);
    let mut train_rng = Rng::derive(spec.seed, 0x70726574);
    let mut test_rng = Rng::derive(spec.seed, 0x70726575);
    let train = sample_batch(
        spec,
        &domain,
        &rotation,
        &prototypes,
        spec.train_per_class,
        &mut train_rng,
    )?;
    let test = sample_batch(
        spec,
        &domain,
        &rotation,
        &prototypes,
        spec.test_per_class,
        &mut test_rng,
    )?;
    Ok(DomainDataset {
        train,
        test,
        domain_index: usize::MAX,
    })
}

/// Pretrain the base backbone on the pretraining domain. Fails if test
/// accuracy lands below 0.9 or the loss diverges. Returns the frozen base
/// and its class-center table on the pretraining data.
pub fn pretrain_backbone(
    spec: &BenchmarkSpec,
    cfg: &TrainConfig,
) -> Result<(Backbone, ClassCenterTable)> {
    let ds = pretraining_dataset(spec)?;
    let embed_dim = 16.min(spec.input_dim.max(8));
    let mut init_rng = Rng::derive(cfg.seed, 0x62626f6e);
    let backbone = Backbone::mlp(spec.input_dim, embed_dim, &mut init_rng)?;
    let clf = CosineClassifier::new(
        Matrix::zeros(embed_dim, spec.num_classes),
        spec.num_classes,
        CosineClassifier::DEFAULT_SCALE,
    )?;
    // Warm-start the head from class centers under the raw init.
    let init_centers = class_centers(&backbone, &ds.train, spec.num_classes, 0)?;
    let mut head = clf;
    head.set_block(0, &init_centers.centers.transpose())?;

    let (trained, head, losses) = finetune(
        &backbone,
        &head,
        &ds.train,
        cfg,
        TrainableBlock { domain: 0 },
    )?;
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(DuctError::Training("pretraining loss diverged".into()));
    }

    let mut correct = 0usize;
    for i in 0..ds.test.len() {
        let emb = trained.forward(ds.test.inputs.row(i))?;
        if head.predict(&emb)?.label == ds.test.labels[i] {
            correct += 1;
        }
    }
    let acc = correct as f64 / ds.test.len() as f64;
    if acc < 0.9 {
        return Err(DuctError::Training(format!(
            "pretraining accuracy {acc:.3} below 0.9 threshold"
        )));
    }
    let centers = class_centers(&trained, &ds.train, spec.num_classes, 0)?;
    Ok((trained, centers))
}

/// Minimum pairwise angle (radians) between center rows; used to confirm
/// the pretrained embedding keeps classes non-collinear.
pub fn min_pairwise_center_angle(table: &ClassCenterTable) -> Result<f64> {
    let mut min_angle = std::f64::consts::PI;
    for i in 0..table.num_classes() {
        for j in i + 1..table.num_classes() {
            let c = cosine_sim(table.centers.row(i), table.centers.row(j), EPS)?;
            min_angle = min_angle.min(c.clamp(-1.0, 1.0).acos());
        }
    }
    Ok(min_angle)
}

// ---------------------------------------------------------------------------
// Dataset file format: magic "DUCTDS", version u16, |Y| u32, D u32, n u32,
// then n records of (label u32, D little-endian f64). One file holds one
// labeled batch; a DomainDataset is stored as a `.train.ds` / `.test.ds`
// pair next to each other.
// ---------------------------------------------------------------------------

const DS_MAGIC: &[u8; 6] = b"DUCTDS";
const DS_VERSION: u16 = 1;

pub fn save_batch(path: &Path, batch: &LabeledBatch, num_classes: usize) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(DS_MAGIC);
    buf.extend_from_slice(&DS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(num_classes as u32).to_le_bytes());
    buf.extend_from_slice(&(batch.inputs.cols() as u32).to_le_bytes());
    buf.extend_from_slice(&(batch.len() as u32).to_le_bytes());
    for i in 0..batch.len() {
        buf.extend_from_slice(&(batch.labels[i] as u32).to_le_bytes());
        for v in batch.inputs.row(i) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Reader {
    buf: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(DuctError::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn load_batch(path: &Path) -> Result<(LabeledBatch, usize)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(6, "magic")?;
    if magic != DS_MAGIC {
        return Err(DuctError::Format {
            offset: 0,
            message: "bad magic".into(),
        });
    }
    let version = r.u16("version")?;
    if version != DS_VERSION {
        return Err(DuctError::Format {
            offset: 6,
            message: format!("unsupported version {version}"),
        });
    }
    let num_classes = r.u32("num_classes")? as usize;
    let dim = r.u32("input_dim")? as usize;
    let n = r.u32("record count")? as usize;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for rec in 0..n {
        let offset = r.pos as u64;
        let label = r.u32("record label")? as usize;
        if label >= num_classes {
            return Err(DuctError::Format {
                offset,
                message: format!("record {rec}: label {label} >= |Y|={num_classes}"),
            });
        }
        let mut row = Vec::with_capacity(dim);
        for _ in 0..dim {
            row.push(r.f64("record value")?);
        }
        rows.push(row);
        labels.push(label);
    }
    if r.pos != r.buf.len() {
        return Err(DuctError::Format {
            offset: r.pos as u64,
            message: "trailing bytes after final record".into(),
        });
    }
    Ok((
        LabeledBatch::new(Matrix::from_rows(&rows)?, labels)?,
        num_classes,
    ))
}

/// Save a domain dataset as `<stem>.train.ds` and `<stem>.test.ds`.
pub fn save_dataset(stem: &Path, ds: &DomainDataset, num_classes: usize) -> Result<()> {
    save_batch(&stem.with_extension("train.ds"), &ds.train, num_classes)?;
    save_batch(&stem.with_extension("test.ds"), &ds.test, num_classes)?;
    Ok(())
}

pub fn load_dataset(stem: &Path, domain_index: usize) -> Result<DomainDataset> {
    let (train, ny_train) = load_batch(&stem.with_extension("train.ds"))?;
    let (test, ny_test) = load_batch(&stem.with_extension("test.ds"))?;
    if ny_train != ny_test {
        return Err(DuctError::Format {
            offset: 0,
            message: "train/test disagree on |Y|".into(),
        });
    }
    Ok(DomainDataset {
        train,
        test,
        domain_index,
    })
}
