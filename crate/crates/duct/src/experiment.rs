//! Experiment orchestration: the per-stage pipeline (extract centers,
//! fine-tune, merge representations, retrain the new classifier, solve
//! transport, consolidate old classifiers, evaluate), the ablation ladder,
//! multi-order aggregation, and checkpoint/resume.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Tensor, TensorFile};
use crate::consolidate::{
    class_centers, task_similarity, task_vector, ClassCenterTable, MergeState,
};
use crate::data::{generate, pretrain_backbone, BenchmarkSpec, DomainDataset};
use crate::error::{DuctError, Result};
use crate::eval::{evaluate_stage, summarize, AccuracyMatrix, MetricsReport};
use crate::model::{Backbone, CosineClassifier, WeightMap};
use crate::numkit::{Matrix, Rng};
use crate::train::{finetune, retrain_new_classifier, LabeledBatch, TrainConfig, TrainableBlock};
use crate::transport::{
    barycentric_project, build_cost, consolidate_old, sinkhorn, transport_classifier,
    uniform_marginal, SinkhornConfig,
};

/// The method ladder: sequential fine-tuning, the frozen-center baseline,
/// the three ablation variations, and the full dual-consolidation method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Finetune,
    BaselineCenters,
    Variation1,
    Variation2,
    Variation3,
    Duct,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Finetune,
        Method::BaselineCenters,
        Method::Variation1,
        Method::Variation2,
        Method::Variation3,
        Method::Duct,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::BaselineCenters => "baseline_centers",
            Method::Variation1 => "variation1",
            Method::Variation2 => "variation2",
            Method::Variation3 => "variation3",
            Method::Duct => "duct",
        }
    }

    fn code(&self) -> f64 {
        Method::ALL.iter().position(|m| m == self).unwrap() as f64
    }

    /// Ablation ladder rows, in increasing-capability order.
    pub fn ablation_ladder() -> [Method; 5] {
        [
            Method::BaselineCenters,
            Method::Variation1,
            Method::Variation2,
            Method::Variation3,
            Method::Duct,
        ]
    }

    fn merges(&self) -> bool {
        !matches!(self, Method::Finetune | Method::BaselineCenters)
    }

    fn similarity_weighted(&self) -> bool {
        matches!(self, Method::Variation2 | Method::Variation3 | Method::Duct)
    }

    fn retrains(&self) -> bool {
        matches!(self, Method::Variation3 | Method::Duct)
    }

    fn transports(&self) -> bool {
        matches!(self, Method::Duct)
    }

    fn trains(&self) -> bool {
        !matches!(self, Method::BaselineCenters)
    }
}

/// Initialization policy for stage-i fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneInit {
    #[default]
    Base,
    Merged,
}

fn default_alpha() -> f64 {
    0.5
}

fn default_train() -> TrainConfig {
    TrainConfig::desk(0)
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("duct-run")
}

/// Full experiment description; deserialized from a single JSON document
/// with unknown keys rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub benchmark: BenchmarkSpec,
    pub method: Method,
    #[serde(default = "default_alpha")]
    pub alpha_phi: f64,
    #[serde(default = "default_alpha")]
    pub alpha_w: f64,
    #[serde(default = "default_train")]
    pub train: TrainConfig,
    #[serde(default)]
    pub sinkhorn: SinkhornConfig,
    pub task_order: Vec<usize>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub finetune_init: FinetuneInit,
}

impl ExperimentConfig {
    pub fn desk_default(method: Method, seed: u64) -> Self {
        let benchmark = BenchmarkSpec::desk_default(seed);
        let task_order = (0..benchmark.domains.len()).collect();
        Self {
            benchmark,
            method,
            alpha_phi: 0.5,
            alpha_w: 0.5,
            train: TrainConfig::desk(seed),
            sinkhorn: SinkhornConfig::default(),
            task_order,
            output_dir: default_output_dir(),
            finetune_init: FinetuneInit::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.benchmark.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.alpha_phi) || !(0.0..=1.0).contains(&self.alpha_w) {
            return Err(DuctError::Config("alpha values must lie in [0, 1]".into()));
        }
        let b = self.benchmark.domains.len();
        let mut seen = vec![false; b];
        if self.task_order.len() != b {
            return Err(DuctError::Config(
                "task_order must list every domain once".into(),
            ));
        }
        for &d in &self.task_order {
            if d >= b || seen[d] {
                return Err(DuctError::Config("task_order is not a permutation".into()));
            }
            seen[d] = true;
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(json).map_err(|e| DuctError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Pipeline steps, in the canonical per-stage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    ExtractCenters,
    Finetune,
    MergeRepresentation,
    RetrainClassifier,
    SolveTransport,
    ConsolidateOldClassifier,
    Evaluate,
}

impl Step {
    const ALL: [Step; 7] = [
        Step::ExtractCenters,
        Step::Finetune,
        Step::MergeRepresentation,
        Step::RetrainClassifier,
        Step::SolveTransport,
        Step::ConsolidateOldClassifier,
        Step::Evaluate,
    ];

    fn code(&self) -> f64 {
        Step::ALL.iter().position(|s| s == self).unwrap() as f64
    }

    fn from_code(code: f64) -> Result<Step> {
        Step::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| DuctError::Format {
                offset: 0,
                message: format!("bad step code {code}"),
            })
    }
}

/// Sinkhorn run diagnostics, one per stage that solved transport.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkhornDiagnostics {
    pub epsilon: f64,
    pub iterations: usize,
    pub converged: bool,
    pub transport_cost: f64,
    pub row_residual: f64,
    pub col_residual: f64,
}

/// Record of one training-data read, for the exemplar-free audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainRead {
    pub stage: usize,
    pub position: usize,
}

/// Everything a run emits. `timing_seconds` is the only field that is not
/// reproducible bit-exactly across repeated runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub metrics: MetricsReport,
    pub accuracy: AccuracyMatrix,
    pub similarities: Vec<f64>,
    pub sinkhorn: Vec<Option<SinkhornDiagnostics>>,
    pub stage_steps: Vec<Vec<Step>>,
    pub train_reads: Vec<TrainRead>,
    pub notes: Vec<String>,
    pub timing_seconds: Vec<f64>,
}

impl RunReport {
    /// The deterministic portion of the report, serialized; two runs of the
    /// same config must agree on this string bit-for-bit.
    pub fn reproducible_json(&self) -> String {
        #[derive(Serialize)]
        struct View<'a> {
            metrics: &'a MetricsReport,
            accuracy: &'a AccuracyMatrix,
            similarities: &'a [f64],
            sinkhorn: &'a [Option<SinkhornDiagnostics>],
            stage_steps: &'a [Vec<Step>],
            train_reads: &'a [TrainRead],
            notes: &'a [String],
        }
        serde_json::to_string_pretty(&View {
            metrics: &self.metrics,
            accuracy: &self.accuracy,
            similarities: &self.similarities,
            sinkhorn: &self.sinkhorn,
            stage_steps: &self.stage_steps,
            train_reads: &self.train_reads,
            notes: &self.notes,
        })
        .expect("report serialization")
    }
}

/// Audited access to the generated benchmark. Training data reads are
/// logged so the exemplar-free contract can be asserted after the run.
struct AuditedData {
    datasets: Vec<DomainDataset>,
    reads: Vec<TrainRead>,
}

impl AuditedData {
    fn train(&mut self, stage: usize, position: usize, domain: usize) -> &LabeledBatch {
        self.reads.push(TrainRead { stage, position });
        &self.datasets[domain].train
    }

    fn test(&self, domain: usize) -> &LabeledBatch {
        &self.datasets[domain].test
    }
}

/// In-flight experiment state; one stage per `run_stage` call.
pub struct ExperimentState {
    cfg: ExperimentConfig,
    base: Backbone,
    /// Identity-domain class centers under the pretrained backbone; every
    /// stage's new classifier block starts here so fine-tuned features from
    /// all domains are pulled toward one canonical class geometry.
    pretrain_centers: ClassCenterTable,
    merge: MergeState,
    /// For the sequential fine-tune method this tracks the latest fine-tuned
    /// weights instead of a merge result.
    classifier: CosineClassifier,
    phi0_centers: Vec<ClassCenterTable>,
    accuracy: AccuracyMatrix,
    sinkhorn_diags: Vec<Option<SinkhornDiagnostics>>,
    stage_steps: Vec<Vec<Step>>,
    timing_seconds: Vec<f64>,
    data: AuditedData,
    next_stage: usize,
}

impl ExperimentState {
    /// Prepare a run: generate the benchmark and pretrain the base backbone.
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let datasets = generate(&cfg.benchmark)?;
        let pretrain_cfg = TrainConfig {
            seed: Rng::derive(cfg.train.seed, 0x70726530).next_u64(),
            ..cfg.train.clone()
        };
        let (base, pretrain_centers) = pretrain_backbone(&cfg.benchmark, &pretrain_cfg)?;
        let embed_dim = base.embed_dim();
        let classifier = CosineClassifier::new(
            Matrix::zeros(embed_dim, 0),
            cfg.benchmark.num_classes,
            CosineClassifier::DEFAULT_SCALE,
        )?;
        let merge = MergeState::new(base.weights().clone(), cfg.alpha_phi);
        Ok(Self {
            cfg,
            base,
            pretrain_centers,
            merge,
            classifier,
            phi0_centers: Vec::new(),
            accuracy: AccuracyMatrix::new(),
            sinkhorn_diags: Vec::new(),
            stage_steps: Vec::new(),
            timing_seconds: Vec::new(),
            data: AuditedData {
                datasets,
                reads: Vec::new(),
            },
            next_stage: 0,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.cfg.task_order.len()
    }

    pub fn stages_done(&self) -> usize {
        self.next_stage
    }

    pub fn is_done(&self) -> bool {
        self.next_stage >= self.num_stages()
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn base_backbone(&self) -> &Backbone {
        &self.base
    }

    pub fn merged_backbone(&self) -> Result<Backbone> {
        self.base.with_weights(self.merge.merged().clone())
    }

    pub fn classifier(&self) -> &CosineClassifier {
        &self.classifier
    }

    fn stage_train_config(&self, stage: usize) -> TrainConfig {
        TrainConfig {
            seed: Rng::derive(self.cfg.train.seed, 0x73746700 + stage as u64).next_u64(),
            ..self.cfg.train.clone()
        }
    }

    /// d x |Y| classifier block from a center table (centers are per-row).
    fn centers_as_block(table: &ClassCenterTable) -> Matrix {
        table.centers.transpose()
    }

    /// Execute one incremental stage, per the canonical step order.
    pub fn run_stage(&mut self) -> Result<()> {
        if self.is_done() {
            return Err(DuctError::Precondition("all stages already run".into()));
        }
        let started = Instant::now();
        let stage = self.next_stage;
        let domain = self.cfg.task_order[stage];
        let method = self.cfg.method;
        let num_classes = self.cfg.benchmark.num_classes;
        let mut steps = Vec::new();
        let stage_cfg = self.stage_train_config(stage);

        let with_stage =
            |e: DuctError| DuctError::Numeric(format!("stage {stage} (domain {domain}): {e}"));

        // 1. Class centers of the incoming data under the frozen base.
        let train = self.data.train(stage, stage, domain).clone();
        let centers0 =
            class_centers(&self.base, &train, num_classes, domain).map_err(with_stage)?;
        steps.push(Step::ExtractCenters);

        // 2. Fine-tune backbone + new classifier block (training methods only).
        let finetuned: Backbone;
        if method.trains() {
            let init_backbone = if method.merges() {
                match self.cfg.finetune_init {
                    FinetuneInit::Base => self.base.clone(),
                    FinetuneInit::Merged => self.merged_backbone()?,
                }
            } else {
                // Sequential fine-tuning continues from the latest weights.
                self.merged_backbone()?
            };
            self.classifier = self
                .classifier
                .expand(&Self::centers_as_block(&self.pretrain_centers))?;
            let (bb, clf, _) = finetune(
                &init_backbone,
                &self.classifier,
                &train,
                &stage_cfg,
                TrainableBlock { domain: stage },
            )
            .map_err(with_stage)?;
            finetuned = bb;
            self.classifier = clf;
            steps.push(Step::Finetune);
        } else {
            // Frozen-center baseline: no optimization at all.
            self.classifier = self.classifier.expand(&Self::centers_as_block(&centers0))?;
            finetuned = self.base.clone();
        }

        // 3. Representation consolidation.
        if method.merges() {
            let tv = task_vector(finetuned.weights(), self.base.weights(), domain)?;
            if method.similarity_weighted() {
                let centers_ft = class_centers(&finetuned, &train, num_classes, domain)?;
                let sim = task_similarity(&centers0, &centers_ft)?;
                self.merge = self.merge.merge_incremental(&tv, sim).map_err(with_stage)?;
            } else {
                self.merge = self.merge.merge_unweighted(&tv)?;
            }
            steps.push(Step::MergeRepresentation);
        } else if method.trains() {
            // Sequential fine-tune: the "merged" slot tracks the latest weights.
            self.merge = MergeState::restore(
                self.merge.base().clone(),
                finetuned.weights().clone(),
                self.cfg.alpha_phi,
                self.merge.applied_similarities.clone(),
            )?;
        }
        if method.merges() {
            // Re-anchor the new block on the merged embedding space before
            // any retraining (centers warm start).
            let merged_bb = self.merged_backbone()?;
            let merged_centers = class_centers(&merged_bb, &train, num_classes, domain)?;
            self.classifier
                .set_block(stage, &Self::centers_as_block(&merged_centers))?;
        }

        // 4. New classifier retraining on the frozen merged features.
        if method.retrains() {
            let merged_bb = self.merged_backbone()?;
            self.classifier =
                retrain_new_classifier(&merged_bb, &self.classifier, &train, &stage_cfg)
                    .map_err(with_stage)?;
            steps.push(Step::RetrainClassifier);
        }

        // 5 & 6. Old-classifier transport and interpolation (skipped at the
        // first stage: there are no old classes).
        let mut diag = None;
        if method.transports() && stage > 0 {
            let old_tables: Vec<&ClassCenterTable> = self.phi0_centers.iter().collect();
            let cost = build_cost(&centers0, &old_tables)?;
            let beta = num_classes;
            let gamma = stage * num_classes;
            let epsilon = self.cfg.sinkhorn.epsilon_scale * cost.mean().max(1e-12);
            let plan = sinkhorn(
                &cost,
                &uniform_marginal(beta),
                &uniform_marginal(gamma),
                epsilon,
                self.cfg.sinkhorn.max_iters,
                self.cfg.sinkhorn.tol,
            )
            .map_err(with_stage)?;
            steps.push(Step::SolveTransport);

            let t_bar = barycentric_project(&plan)?;
            let w_new = self.classifier.block(stage);
            let w_hat = transport_classifier(&w_new, &t_bar)?;
            let w_old = self.old_columns(stage)?;
            let consolidated = consolidate_old(&w_old, &w_hat, self.cfg.alpha_w)?;
            self.set_old_columns(stage, &consolidated.weights)?;
            steps.push(Step::ConsolidateOldClassifier);

            let (row_res, col_res) = plan.marginal_residuals();
            diag = Some(SinkhornDiagnostics {
                epsilon,
                iterations: plan.iterations_used,
                converged: plan.converged,
                transport_cost: plan.cost(&cost.q),
                row_residual: row_res,
                col_residual: col_res,
            });
        }

        // 7. Evaluate the consolidated model on all seen domains.
        let eval_backbone = self.merged_backbone()?;
        let seen: Vec<&LabeledBatch> = self.cfg.task_order[..=stage]
            .iter()
            .map(|&d| self.data.test(d))
            .collect();
        let row = evaluate_stage(&eval_backbone, &self.classifier, &seen).map_err(with_stage)?;
        self.accuracy.push_row(row)?;
        steps.push(Step::Evaluate);

        self.phi0_centers.push(centers0);
        self.sinkhorn_diags.push(diag);
        self.stage_steps.push(steps);
        self.timing_seconds.push(started.elapsed().as_secs_f64());
        self.next_stage += 1;
        Ok(())
    }

    /// Old-domain classifier columns (blocks 0..stage) as one d x gamma matrix.
    fn old_columns(&self, stage: usize) -> Result<Matrix> {
        let d = self.classifier.embed_dim();
        let gamma = stage * self.cfg.benchmark.num_classes;
        let mut out = Matrix::zeros(d, gamma);
        for i in 0..d {
            for j in 0..gamma {
                out.set(i, j, self.classifier.weights().get(i, j));
            }
        }
        Ok(out)
    }

    fn set_old_columns(&mut self, stage: usize, cols: &Matrix) -> Result<()> {
        let d = self.classifier.embed_dim();
        let gamma = stage * self.cfg.benchmark.num_classes;
        if cols.rows() != d || cols.cols() != gamma {
            return Err(DuctError::Shape("old-column block shape mismatch".into()));
        }
        let w = self.classifier.weights_mut();
        for i in 0..d {
            for j in 0..gamma {
                w.set(i, j, cols.get(i, j));
            }
        }
        Ok(())
    }

    pub fn run_to_completion(&mut self) -> Result<()> {
        while !self.is_done() {
            self.run_stage()?;
        }
        Ok(())
    }

    pub fn report(&self) -> Result<RunReport> {
        if !self.is_done() {
            return Err(DuctError::Precondition("run not finished".into()));
        }
        let metrics = summarize(&self.accuracy)?;
        let mut notes = Vec::new();
        if self.cfg.method.transports() {
            notes.push("stage 0: transport skipped (no old classes)".to_string());
        }
        if self.num_stages() == 1 && self.cfg.method.transports() {
            notes.push("single-domain run: no transport step executed".to_string());
        }
        let similarities = self.merge.applied_similarities.clone();
        Ok(RunReport {
            config: self.cfg.clone(),
            metrics,
            accuracy: self.accuracy.clone(),
            similarities,
            sinkhorn: self.sinkhorn_diags.clone(),
            stage_steps: self.stage_steps.clone(),
            train_reads: self.data.reads.clone(),
            notes,
            timing_seconds: self.timing_seconds.clone(),
        })
    }

    // -- checkpointing --------------------------------------------------

    fn weightmap_into(tf: &mut TensorFile, prefix: &str, map: &WeightMap) -> Result<()> {
        for (name, tensor) in map.entries() {
            tf.insert(&format!("{prefix}/{name}"), Tensor::from_matrix(tensor))?;
        }
        Ok(())
    }

    fn weightmap_from(tf: &TensorFile, prefix: &str, template: &WeightMap) -> Result<WeightMap> {
        let mut out = WeightMap::new();
        for (name, _) in template.entries() {
            let t = tf.get(&format!("{prefix}/{name}"))?;
            out.insert(name, t.to_matrix()?)?;
        }
        Ok(out)
    }

    /// Persist the resumable state: base and merged backbones, classifier,
    /// per-domain base-space center tables, applied similarities, progress
    /// counters and the seed that drives every derived RNG stream.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tf = TensorFile::new();
        tf.insert("meta/method", Tensor::scalar(self.cfg.method.code()))?;
        tf.insert("meta/next_stage", Tensor::scalar(self.next_stage as f64))?;
        tf.insert("meta/alpha_phi", Tensor::scalar(self.cfg.alpha_phi))?;
        tf.insert("meta/alpha_w", Tensor::scalar(self.cfg.alpha_w))?;
        tf.insert(
            "meta/train_seed",
            Tensor::scalar(f64::from_bits(self.cfg.train.seed)),
        )?;
        tf.insert(
            "base/dims",
            Tensor::vector(self.base.dims().iter().map(|d| *d as f64).collect()),
        )?;
        Self::weightmap_into(&mut tf, "base", self.base.weights())?;
        Self::weightmap_into(&mut tf, "merged", self.merge.merged())?;
        tf.insert(
            "classifier/weights",
            Tensor::from_matrix(self.classifier.weights()),
        )?;
        tf.insert(
            "classifier/logit_scale",
            Tensor::scalar(self.classifier.logit_scale()),
        )?;
        tf.insert(
            "merge/sims",
            Tensor::vector(self.merge.applied_similarities.clone()),
        )?;
        for (i, table) in self.phi0_centers.iter().enumerate() {
            tf.insert(
                &format!("centers/phi0/domain{i}"),
                Tensor::from_matrix(&table.centers),
            )?;
            tf.insert(
                &format!("centers/phi0/domain{i}/counts"),
                Tensor::vector(table.counts.iter().map(|c| *c as f64).collect()),
            )?;
            tf.insert(
                &format!("centers/phi0/domain{i}/source"),
                Tensor::scalar(table.domain_index as f64),
            )?;
        }
        for (k, row) in self.accuracy.rows().iter().enumerate() {
            tf.insert(&format!("eval/row{k}"), Tensor::vector(row.clone()))?;
        }
        for (k, diag) in self.sinkhorn_diags.iter().enumerate() {
            if let Some(d) = diag {
                tf.insert(
                    &format!("ot/stage{k}"),
                    Tensor::vector(vec![
                        d.epsilon,
                        d.iterations as f64,
                        if d.converged { 1.0 } else { 0.0 },
                        d.transport_cost,
                        d.row_residual,
                        d.col_residual,
                    ]),
                )?;
            }
        }
        for (k, steps) in self.stage_steps.iter().enumerate() {
            tf.insert(
                &format!("steps/stage{k}"),
                Tensor::vector(steps.iter().map(|s| s.code()).collect()),
            )?;
        }
        let mut reads = Vec::with_capacity(self.data.reads.len() * 2);
        for r in &self.data.reads {
            reads.push(r.stage as f64);
            reads.push(r.position as f64);
        }
        tf.insert("audit/train_reads", Tensor::vector(reads))?;
        tf.write(path)
    }

    /// Restore a run from a checkpoint written by `save`. The config must
    /// match the one the checkpoint was produced under.
    pub fn load(path: &Path, cfg: ExperimentConfig) -> Result<Self> {
        let tf = TensorFile::read(path)?;
        if tf.get("meta/method")?.as_scalar()? != cfg.method.code() {
            return Err(DuctError::Config(
                "checkpoint method differs from config".into(),
            ));
        }
        if tf.get("meta/train_seed")?.as_scalar()?.to_bits() != cfg.train.seed {
            return Err(DuctError::Config(
                "checkpoint seed differs from config".into(),
            ));
        }
        let mut state = ExperimentState::new(cfg)?;
        let next_stage = tf.get("meta/next_stage")?.as_scalar()? as usize;

        let base_weights = Self::weightmap_from(&tf, "base", state.base.weights())?;
        state.base = state.base.with_weights(base_weights)?;
        let merged = Self::weightmap_from(&tf, "merged", state.base.weights())?;
        state.merge = MergeState::restore(
            state.base.weights().clone(),
            merged,
            state.cfg.alpha_phi,
            tf.get("merge/sims")?.data.clone(),
        )?;
        state.classifier = CosineClassifier::new(
            tf.get("classifier/weights")?.to_matrix()?,
            state.cfg.benchmark.num_classes,
            tf.get("classifier/logit_scale")?.as_scalar()?,
        )?;
        for i in 0..next_stage {
            let centers = tf.get(&format!("centers/phi0/domain{i}"))?.to_matrix()?;
            let counts = tf
                .get(&format!("centers/phi0/domain{i}/counts"))?
                .data
                .iter()
                .map(|c| *c as usize)
                .collect();
            let domain_index = tf
                .get(&format!("centers/phi0/domain{i}/source"))?
                .as_scalar()? as usize;
            state.phi0_centers.push(ClassCenterTable {
                centers,
                counts,
                domain_index,
            });
        }
        for k in 0..next_stage {
            state
                .accuracy
                .push_row(tf.get(&format!("eval/row{k}"))?.data.clone())?;
            state
                .sinkhorn_diags
                .push(match tf.get(&format!("ot/stage{k}")) {
                    Ok(t) => Some(SinkhornDiagnostics {
                        epsilon: t.data[0],
                        iterations: t.data[1] as usize,
                        converged: t.data[2] != 0.0,
                        transport_cost: t.data[3],
                        row_residual: t.data[4],
                        col_residual: t.data[5],
                    }),
                    Err(_) => None,
                });
            let steps = tf
                .get(&format!("steps/stage{k}"))?
                .data
                .iter()
                .map(|c| Step::from_code(*c))
                .collect::<Result<Vec<_>>>()?;
            state.stage_steps.push(steps);
            state.timing_seconds.push(0.0);
        }
        let reads = &tf.get("audit/train_reads")?.data;
        state.data.reads = reads
            .chunks(2)
            .map(|c| TrainRead {
                stage: c[0] as usize,
                position: c[1] as usize,
            })
            .collect();
        state.next_stage = next_stage;
        Ok(state)
    }
}

/// Run one experiment end to end.
pub fn run_experiment(cfg: ExperimentConfig) -> Result<RunReport> {
    let mut state = ExperimentState::new(cfg)?;
    state.run_to_completion()?;
    state.report()
}

/// The five ablation-ladder methods, executed on identical data and seeds.
pub fn run_ablation(base: &ExperimentConfig) -> Result<Vec<(Method, RunReport)>> {
    base.validate()?;
    let handles: Vec<_> = Method::ablation_ladder()
        .into_iter()
        .map(|method| {
            let mut cfg = base.clone();
            cfg.method = method;
            std::thread::spawn(move || (method, run_experiment(cfg)))
        })
        .collect();
    let mut out = Vec::new();
    for h in handles {
        let (method, report) = h
            .join()
            .map_err(|_| DuctError::Numeric("worker panicked".into()))?;
        out.push((method, report?));
    }
    Ok(out)
}

/// Aggregate statistics over several task orders.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrdersReport {
    pub reports: Vec<RunReport>,
    pub mean_average_accuracy: f64,
    pub std_average_accuracy: f64,
    pub mean_last_accuracy: f64,
    pub std_last_accuracy: f64,
    pub mean_forgetting: Option<f64>,
    pub std_forgetting: Option<f64>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Run the same config under several task orders (in parallel) and report
/// mean/std of the summary metrics, joined in order index.
pub fn run_orders(base: &ExperimentConfig, orders: &[Vec<usize>]) -> Result<OrdersReport> {
    if orders.is_empty() {
        return Err(DuctError::Precondition("no task orders given".into()));
    }
    let handles: Vec<_> = orders
        .iter()
        .map(|order| {
            let mut cfg = base.clone();
            cfg.task_order = order.clone();
            std::thread::spawn(move || run_experiment(cfg))
        })
        .collect();
    let mut reports = Vec::new();
    for h in handles {
        reports.push(
            h.join()
                .map_err(|_| DuctError::Numeric("worker panicked".into()))??,
        );
    }

    let avg: Vec<f64> = reports.iter().map(|r| r.metrics.average_accuracy).collect();
    let last: Vec<f64> = reports.iter().map(|r| r.metrics.last_accuracy).collect();
    let forgetting: Vec<f64> = reports
        .iter()
        .filter_map(|r| r.metrics.forgetting)
        .collect();
    let (mean_avg, std_avg) = mean_std(&avg);
    let (mean_last, std_last) = mean_std(&last);
    let (mean_f, std_f) = if forgetting.len() == reports.len() {
        let (m, s) = mean_std(&forgetting);
        (Some(m), Some(s))
    } else {
        (None, None)
    };
    Ok(OrdersReport {
        reports,
        mean_average_accuracy: mean_avg,
        std_average_accuracy: std_avg,
        mean_last_accuracy: mean_last,
        std_last_accuracy: std_last,
        mean_forgetting: mean_f,
        std_forgetting: std_f,
    })
}

/// Write the standard per-run artifacts into `dir`.
pub fn write_run_outputs(dir: &Path, report: &RunReport, state: &ExperimentState) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let json =
        serde_json::to_string_pretty(report).map_err(|e| DuctError::Config(e.to_string()))?;
    std::fs::write(dir.join("report.json"), json)?;
    std::fs::write(dir.join("accuracy_matrix.csv"), report.accuracy.to_csv())?;
    state.save(&dir.join("checkpoint.duct"))?;
    Ok(())
}
