//! The optimization loop: regime-parameterized co-training steps, the
//! pre-training driver with epoch checkpoints and a held-out MLM
//! evaluation, and downstream fine-tuning.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{checkpoint_hash, load_checkpoint, save_checkpoint};
use crate::data::{
    apply_masking, generate_corpus, make_downstream_task, ClassBatch, Corpus, CorpusConfig,
    DownstreamExample, MarkovChain, MaskedBatch, MaskingConfig, TaskId,
};
use crate::error::{CoreError, Result};
use crate::graph::Graph;
use crate::metrics::{task_metrics, TaskMetrics};
use crate::model::{
    bind, forward_class_logits, forward_mlm_logits, init_model, parameter_shapes, ModelConfig,
    ModelParameters,
};
use crate::objectives::{ctcd_loss, hard_loss, kd_loss, community_loss, DistillConfig};
use crate::optim::{AdamWHyper, DecaySchedule, LrSchedule, OptimizerState};
use crate::rng::{mix, rng_from, SALT_EVAL, SALT_HEAD, SALT_INIT, SALT_MASK, SALT_ORDER, SALT_TASK};
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Standalone,
    CoOneway,
    Ctcd,
    Community,
    /// One-way KD from a frozen pre-trained teacher (the conventional
    /// baseline the community regime is compared against).
    ClassicKd,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Standalone => "standalone",
            Regime::CoOneway => "co-oneway",
            Regime::Ctcd => "ctcd",
            Regime::Community => "community",
            Regime::ClassicKd => "classic-kd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standalone" => Ok(Regime::Standalone),
            "co-oneway" => Ok(Regime::CoOneway),
            "ctcd" => Ok(Regime::Ctcd),
            "community" => Ok(Regime::Community),
            "classic-kd" => Ok(Regime::ClassicKd),
            other => Err(CoreError::InvalidConfig(format!("unknown regime `{}`", other))),
        }
    }

    /// Regimes are parameterizations of the joint objective: standalone
    /// cuts both soft losses, one-way co-training cuts the reversed one.
    pub fn effective_distill(self, cfg: &DistillConfig) -> DistillConfig {
        match self {
            Regime::Standalone => DistillConfig { alpha_soft: 0.0, beta_soft: 0.0, ..cfg.clone() },
            Regime::CoOneway => DistillConfig { beta_soft: 0.0, ..cfg.clone() },
            _ => cfg.clone(),
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Teacher,
    Student,
    Student1,
    Student2,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
            Role::Student1 => "student1",
            Role::Student2 => "student2",
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            Role::Teacher => "teacher/",
            Role::Student => "student/",
            Role::Student1 => "student1/",
            Role::Student2 => "student2/",
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    pub seed: u64,
    pub precision: Precision,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub decay: DecaySchedule,
    pub distill: DistillConfig,
    pub masking: MaskingConfig,
    pub log_every: u64,
    /// Which single model a standalone run trains.
    #[serde(default)]
    pub standalone_role: Option<Role>,
    /// Required by the community and classic-kd regimes.
    #[serde(default)]
    pub frozen_teacher_checkpoint: Option<PathBuf>,
    /// Accepted for config compatibility; clipping is not implemented and a
    /// set value is rejected at validation.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    pub fn desk_default(regime: Regime, seed: u64) -> Self {
        TrainConfig {
            regime,
            seed,
            precision: Precision::Single,
            peak_lr: 5e-4,
            warmup_fraction: 0.05,
            total_steps: 3000,
            batch_size: 16,
            decay: DecaySchedule::LinearToZero,
            distill: DistillConfig::default(),
            masking: MaskingConfig::default(),
            log_every: 50,
            standalone_role: None,
            frozen_teacher_checkpoint: None,
            grad_clip: None,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.peak_lr,
            warmup_fraction: self.warmup_fraction,
            total_steps: self.total_steps,
            decay: self.decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        self.distill.validate()?;
        if self.batch_size == 0 {
            return Err(CoreError::InvalidConfig("batch size must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(CoreError::InvalidConfig("log_every must be positive".into()));
        }
        if self.grad_clip.is_some() {
            return Err(CoreError::InvalidConfig(
                "gradient clipping is not implemented; leave grad_clip unset".into(),
            ));
        }
        Ok(())
    }
}

/// One trained model with its own optimizer state.
pub struct TrainedModel<S> {
    pub role: Role,
    pub params: ModelParameters<S>,
    pub opt: OptimizerState<S>,
}

impl<S: Scalar> TrainedModel<S> {
    pub fn new(role: Role, params: ModelParameters<S>) -> Self {
        let opt = OptimizerState::new(&params, AdamWHyper::default());
        TrainedModel { role, params, opt }
    }
}

pub type LossComponents = BTreeMap<String, f64>;

fn record<S: Scalar>(components: &mut LossComponents, key: &str, graph: &Graph<S>, id: Option<crate::graph::ValueId>) {
    if let Some(id) = id {
        components.insert(key.to_string(), graph.value(id).scalar_value().to_f64_lossy());
    }
}

/// One standalone step: weighted hard loss only.
pub fn standalone_step<S: Scalar>(
    model: &mut TrainedModel<S>,
    batch: &MaskedBatch,
    hard_weight: f64,
    lr: f64,
) -> Result<LossComponents> {
    let mut graph = Graph::new();
    let bound = bind(&mut graph, &model.params, model.role.prefix(), true)?;
    let logits = forward_mlm_logits(&mut graph, &bound, batch, None)?;
    let hard = hard_loss(&mut graph, logits, batch)?;
    let loss = graph.scale(hard, S::from_f64(hard_weight))?;
    let grads = graph.backward(loss)?;
    model.opt.step(&mut model.params, &grads, model.role.prefix(), lr)?;
    let mut components = LossComponents::new();
    record(&mut components, &format!("{}_hard", model.role), &graph, Some(hard));
    Ok(components)
}

/// One co-training step over the joint objective: a single forward per
/// model on the identical batch, one backward, one AdamW step per model
/// with its own state.
pub fn co_train_step<S: Scalar>(
    teacher: &mut TrainedModel<S>,
    student: &mut TrainedModel<S>,
    batch: &MaskedBatch,
    cfg: &DistillConfig,
    lr: f64,
) -> Result<LossComponents> {
    let mut graph = Graph::new();
    let bound_t = bind(&mut graph, &teacher.params, teacher.role.prefix(), true)?;
    let bound_s = bind(&mut graph, &student.params, student.role.prefix(), true)?;
    let teacher_logits = forward_mlm_logits(&mut graph, &bound_t, batch, None)?;
    let student_logits = forward_mlm_logits(&mut graph, &bound_s, batch, None)?;
    let (terms, grads) = ctcd_loss(&mut graph, student_logits, teacher_logits, batch, cfg)?;
    teacher.opt.step(&mut teacher.params, &grads, teacher.role.prefix(), lr)?;
    student.opt.step(&mut student.params, &grads, student.role.prefix(), lr)?;

    let mut components = LossComponents::new();
    record(&mut components, "student_hard", &graph, terms.kd.hard);
    record(&mut components, "student_soft", &graph, terms.kd.soft);
    record(&mut components, "teacher_hard", &graph, terms.rekd.hard);
    record(&mut components, "teacher_soft", &graph, terms.rekd.soft);
    Ok(components)
}

/// One community step: both students updated, the frozen teacher only read.
pub fn community_train_step<S: Scalar>(
    student1: &mut TrainedModel<S>,
    student2: &mut TrainedModel<S>,
    frozen_teacher: &ModelParameters<S>,
    batch: &MaskedBatch,
    cfg: &DistillConfig,
    lr: f64,
) -> Result<LossComponents> {
    let mut graph = Graph::new();
    let bound_1 = bind(&mut graph, &student1.params, student1.role.prefix(), true)?;
    let bound_2 = bind(&mut graph, &student2.params, student2.role.prefix(), true)?;
    let bound_f = bind(&mut graph, frozen_teacher, "frozen/", false)?;
    let logits_1 = forward_mlm_logits(&mut graph, &bound_1, batch, None)?;
    let logits_2 = forward_mlm_logits(&mut graph, &bound_2, batch, None)?;
    let logits_f = forward_mlm_logits(&mut graph, &bound_f, batch, None)?;
    let (terms, grads) = community_loss(&mut graph, logits_1, logits_2, logits_f, batch, cfg)?;
    student1.opt.step(&mut student1.params, &grads, student1.role.prefix(), lr)?;
    student2.opt.step(&mut student2.params, &grads, student2.role.prefix(), lr)?;

    let mut components = LossComponents::new();
    record(&mut components, "student1_hard", &graph, terms.ctcd.kd.hard);
    record(&mut components, "student1_cross_soft", &graph, terms.ctcd.kd.soft);
    record(&mut components, "student2_hard", &graph, terms.ctcd.rekd.hard);
    record(&mut components, "student2_cross_soft", &graph, terms.ctcd.rekd.soft);
    record(&mut components, "student1_teacher_soft", &graph, terms.frozen_to_s1);
    record(&mut components, "student2_teacher_soft", &graph, terms.frozen_to_s2);
    Ok(components)
}

/// One conventional-KD step against a frozen teacher.
pub fn classic_kd_step<S: Scalar>(
    student: &mut TrainedModel<S>,
    frozen_teacher: &ModelParameters<S>,
    batch: &MaskedBatch,
    cfg: &DistillConfig,
    lr: f64,
) -> Result<LossComponents> {
    let mut graph = Graph::new();
    let bound_s = bind(&mut graph, &student.params, student.role.prefix(), true)?;
    let bound_f = bind(&mut graph, frozen_teacher, "frozen/", false)?;
    let student_logits = forward_mlm_logits(&mut graph, &bound_s, batch, None)?;
    let frozen_logits = forward_mlm_logits(&mut graph, &bound_f, batch, None)?;
    let kd = kd_loss(&mut graph, student_logits, frozen_logits, batch, cfg)?;
    let grads = graph.backward(kd.total)?;
    student.opt.step(&mut student.params, &grads, student.role.prefix(), lr)?;

    let mut components = LossComponents::new();
    record(&mut components, "student_hard", &graph, kd.hard);
    record(&mut components, "student_soft", &graph, kd.soft);
    Ok(components)
}

/// Deterministic batch stream: per-epoch shuffled order and per-(example,
/// epoch) masking seeds. Replaying a (corpus, seed) pair reproduces the
/// stream bit-for-bit.
pub struct BatchStream<'c> {
    corpus: &'c Corpus,
    batch_size: usize,
    masking: MaskingConfig,
    seed: u64,
    epoch_order: Option<(u64, Vec<usize>)>,
}

impl<'c> BatchStream<'c> {
    pub fn new(corpus: &'c Corpus, batch_size: usize, masking: MaskingConfig, seed: u64) -> Result<Self> {
        if corpus.sequences.len() < batch_size {
            return Err(CoreError::InvalidConfig(format!(
                "corpus of {} sequences cannot fill a batch of {}",
                corpus.sequences.len(),
                batch_size
            )));
        }
        Ok(BatchStream { corpus, batch_size, masking, seed, epoch_order: None })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (self.corpus.sequences.len() / self.batch_size) as u64
    }

    pub fn batch_at(&mut self, step: u64) -> Result<MaskedBatch> {
        let spe = self.steps_per_epoch();
        let epoch = step / spe;
        let pos = (step % spe) as usize;
        let needs_refresh = !matches!(&self.epoch_order, Some((e, _)) if *e == epoch);
        if needs_refresh {
            let mut order: Vec<usize> = (0..self.corpus.sequences.len()).collect();
            order.shuffle(&mut rng_from(&[self.seed, SALT_ORDER, epoch]));
            self.epoch_order = Some((epoch, order));
        }
        let order = &self.epoch_order.as_ref().unwrap().1;
        let indices = &order[pos * self.batch_size..(pos + 1) * self.batch_size];
        let mut examples = Vec::with_capacity(self.batch_size);
        for &i in indices {
            let seed = mix(&[self.seed, SALT_MASK, i as u64, epoch]);
            examples.push(apply_masking(&self.corpus.sequences[i], &self.corpus.vocab, &self.masking, seed)?);
        }
        Ok(MaskedBatch::from_examples(examples))
    }
}

/// Fraction of held-out masked positions whose argmax logit is the original
/// token.
pub fn eval_masked_accuracy<S: Scalar>(
    params: &ModelParameters<S>,
    corpus: &Corpus,
    masking: &MaskingConfig,
    seed: u64,
    batch_size: usize,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (chunk_idx, chunk) in corpus.heldout.chunks(batch_size).enumerate() {
        let mut examples = Vec::with_capacity(chunk.len());
        for (j, seq) in chunk.iter().enumerate() {
            let ex_seed = mix(&[seed, SALT_EVAL, (chunk_idx * batch_size + j) as u64]);
            examples.push(apply_masking(seq, &corpus.vocab, masking, ex_seed)?);
        }
        let batch = MaskedBatch::from_examples(examples);
        let mut graph = Graph::new();
        let bound = bind(&mut graph, params, "eval/", false)?;
        let logits = forward_mlm_logits(&mut graph, &bound, &batch, None)?;
        let values = graph.value(logits);
        let vocab = values.last_dim();
        let (rows, targets) = batch.masked_flat();
        for (row, target) in rows.into_iter().zip(targets) {
            let slice = values.row(row);
            let mut best = 0usize;
            for k in 1..vocab {
                if slice[k] > slice[best] {
                    best = k;
                }
            }
            if best == target {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// One metrics-log line; appended to `metrics.jsonl` at every logging
/// interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f64,
    pub losses: LossComponents,
    pub wall_clock_secs: f64,
}

pub struct PretrainSetup {
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
}

impl PretrainSetup {
    fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.teacher.validate()?;
        self.student.validate()?;
        let needs_pair = matches!(self.train.regime, Regime::CoOneway | Regime::Ctcd);
        if needs_pair {
            if self.teacher.num_layers <= self.student.num_layers {
                return Err(CoreError::InvalidConfig(format!(
                    "teacher must be strictly deeper than the student ({} vs {})",
                    self.teacher.num_layers, self.student.num_layers
                )));
            }
            if self.teacher.vocab_size != self.student.vocab_size
                || self.teacher.max_seq_len != self.student.max_seq_len
            {
                return Err(CoreError::InvalidConfig(
                    "teacher and student must share vocab size and max sequence length".into(),
                ));
            }
            self.train.distill.validate_student_trained()?;
        }
        let longest = self.corpus.max_len + 2;
        let limit = self.teacher.max_seq_len.min(self.student.max_seq_len);
        if longest > limit {
            return Err(CoreError::InvalidConfig(format!(
                "corpus sequences of up to {} tokens exceed model max {}",
                longest, limit
            )));
        }
        if self.train.regime == Regime::Standalone && self.train.standalone_role.is_none() {
            return Err(CoreError::InvalidConfig("standalone regime requires standalone_role".into()));
        }
        Ok(())
    }
}

pub struct ModelOutcome<S> {
    pub role: Role,
    pub params: ModelParameters<S>,
    pub masked_accuracy: f64,
    pub checkpoint: Option<PathBuf>,
}

pub struct PretrainOutcome<S> {
    pub models: Vec<ModelOutcome<S>>,
    pub log: Vec<LogRecord>,
    pub final_losses: LossComponents,
    /// Hash of the frozen teacher checkpoint, identical before and after
    /// the run (community / classic-kd regimes).
    pub frozen_teacher_hash: Option<String>,
}

/// Run the configured regime over the corpus stream. Checkpoints are
/// written at epoch boundaries and at the end; on a mid-run failure the
/// checkpoints already on disk are retained as the last good state.
pub fn pretrain<S: Scalar>(setup: &PretrainSetup, out_dir: Option<&Path>) -> Result<PretrainOutcome<S>> {
    setup.validate()?;
    let train = &setup.train;
    let corpus = generate_corpus(&setup.corpus)?;
    let mut stream = BatchStream::new(&corpus, train.batch_size, train.masking, train.seed)?;
    let schedule = train.schedule();

    // Instantiate the models this regime trains.
    let mut models: Vec<TrainedModel<S>> = Vec::new();
    let mut frozen: Option<ModelParameters<S>> = None;
    let mut frozen_hash = None;
    match train.regime {
        Regime::Standalone => {
            let role = train.standalone_role.expect("validated");
            let config = match role {
                Role::Teacher => &setup.teacher,
                _ => &setup.student,
            };
            models.push(TrainedModel::new(role, init_model(config)?));
        }
        Regime::CoOneway | Regime::Ctcd => {
            models.push(TrainedModel::new(Role::Teacher, init_model(&setup.teacher)?));
            models.push(TrainedModel::new(Role::Student, init_model(&setup.student)?));
        }
        Regime::Community => {
            models.push(TrainedModel::new(Role::Student1, init_model(&setup.student)?));
            let mut second = setup.student.clone();
            second.seed = mix(&[setup.student.seed, SALT_INIT, 1]);
            models.push(TrainedModel::new(Role::Student2, init_model(&second)?));
            let loaded = load_frozen(setup)?;
            frozen_hash = Some(checkpoint_hash(&loaded)?);
            frozen = Some(loaded);
        }
        Regime::ClassicKd => {
            models.push(TrainedModel::new(Role::Student, init_model(&setup.student)?));
            let loaded = load_frozen(setup)?;
            frozen_hash = Some(checkpoint_hash(&loaded)?);
            frozen = Some(loaded);
        }
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut metrics_file = match out_dir {
        Some(dir) => Some(std::fs::File::create(dir.join("metrics.jsonl"))?),
        None => None,
    };

    let effective = train.regime.effective_distill(&train.distill);
    let steps_per_epoch = stream.steps_per_epoch();
    let started = Instant::now();
    let mut log = Vec::new();
    let mut final_losses = LossComponents::new();

    for step in 0..train.total_steps {
        let batch = stream.batch_at(step)?;
        let lr = schedule.lr_at(step + 1)?;
        let components = match train.regime {
            Regime::Standalone => {
                let model = &mut models[0];
                let weight = match model.role {
                    Role::Teacher => effective.beta_hard,
                    _ => effective.alpha_hard,
                };
                standalone_step(model, &batch, weight, lr)?
            }
            Regime::CoOneway | Regime::Ctcd => {
                let (first, rest) = models.split_at_mut(1);
                co_train_step(&mut first[0], &mut rest[0], &batch, &effective, lr)?
            }
            Regime::Community => {
                let (first, rest) = models.split_at_mut(1);
                community_train_step(&mut first[0], &mut rest[0], frozen.as_ref().unwrap(), &batch, &effective, lr)?
            }
            Regime::ClassicKd => {
                classic_kd_step(&mut models[0], frozen.as_ref().unwrap(), &batch, &effective, lr)?
            }
        };

        let step_1 = step + 1;
        if step_1 % train.log_every == 0 || step_1 == train.total_steps {
            let rec = LogRecord {
                step: step_1,
                lr,
                losses: components.clone(),
                wall_clock_secs: started.elapsed().as_secs_f64(),
            };
            if let Some(f) = metrics_file.as_mut() {
                use std::io::Write;
                serde_json::to_writer(&mut *f, &rec)?;
                writeln!(f)?;
            }
            log.push(rec);
        }
        if step_1 == train.total_steps {
            final_losses = components;
        }
        if let Some(dir) = out_dir {
            if step_1 % steps_per_epoch == 0 && step_1 < train.total_steps {
                let epoch = step_1 / steps_per_epoch;
                for model in &models {
                    save_checkpoint(&model.params, &dir.join(format!("epoch{:04}-{}.ckpt", epoch, model.role)))?;
                }
            }
        }
    }

    if let Some(f) = frozen.as_ref() {
        let after = checkpoint_hash(f)?;
        debug_assert_eq!(frozen_hash.as_deref(), Some(after.as_str()));
        frozen_hash = Some(after);
    }

    let mut outcomes = Vec::new();
    for model in models {
        let masked_accuracy =
            eval_masked_accuracy(&model.params, &corpus, &train.masking, train.seed, train.batch_size)?;
        let checkpoint = match out_dir {
            Some(dir) => {
                let path = dir.join(format!("{}.ckpt", model.role));
                save_checkpoint(&model.params, &path)?;
                Some(path)
            }
            None => None,
        };
        outcomes.push(ModelOutcome { role: model.role, params: model.params, masked_accuracy, checkpoint });
    }

    Ok(PretrainOutcome { models: outcomes, log, final_losses, frozen_teacher_hash: frozen_hash })
}

fn load_frozen<S: Scalar>(setup: &PretrainSetup) -> Result<ModelParameters<S>> {
    let path = setup.train.frozen_teacher_checkpoint.as_ref().ok_or_else(|| {
        CoreError::MissingCheckpoint(format!(
            "the {} regime needs a frozen teacher; run a standalone pre-training at teacher size first \
             and point frozen_teacher_checkpoint at its {}.ckpt",
            setup.train.regime,
            Role::Teacher
        ))
    })?;
    let frozen = load_checkpoint::<S>(path)?;
    if frozen.config.vocab_size != setup.student.vocab_size
        || frozen.config.max_seq_len != setup.student.max_seq_len
    {
        return Err(CoreError::InvalidConfig(
            "frozen teacher and student must share vocab size and max sequence length".into(),
        ));
    }
    Ok(frozen)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub decay: DecaySchedule,
    pub train_examples: usize,
    pub val_examples: usize,
    pub test_examples: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            lr: 1e-4,
            epochs: 3,
            batch_size: 16,
            warmup_fraction: 0.05,
            decay: DecaySchedule::LinearToZero,
            train_examples: 1000,
            val_examples: 500,
            test_examples: 2000,
            min_len: 8,
            max_len: 12,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub val: TaskMetrics,
    pub test: TaskMetrics,
    pub final_train_loss: Option<f64>,
}

fn class_batch(examples: &[DownstreamExample]) -> ClassBatch {
    let seqs: Vec<&[u16]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
    let labels = examples.iter().map(|e| e.label).collect();
    ClassBatch::from_sequences(&seqs, labels)
}

/// Evaluate a classifier as-is (argmax over class logits).
pub fn evaluate_classifier<S: Scalar>(
    params: &ModelParameters<S>,
    examples: &[DownstreamExample],
) -> Result<TaskMetrics> {
    let mut predictions = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(64) {
        let batch = class_batch(chunk);
        let mut graph = Graph::new();
        let bound = bind(&mut graph, params, "eval/", false)?;
        let logits = forward_class_logits(&mut graph, &bound, &batch, params.config.num_classes, None)?;
        let values = graph.value(logits);
        for (row, &label) in (0..batch.batch).zip(&batch.labels) {
            let slice = values.row(row);
            let mut best = 0usize;
            for k in 1..slice.len() {
                if slice[k] > slice[best] {
                    best = k;
                }
            }
            predictions.push(best as u8);
            labels.push(label);
        }
    }
    Ok(task_metrics(&predictions, &labels))
}

/// Fine-tune a pre-trained encoder on one synthetic task: fresh
/// classification head, AdamW over all parameters at a reduced rate, fixed
/// epoch budget, held-out validation and test metrics.
pub fn finetune<S: Scalar>(
    pretrained: &ModelParameters<S>,
    chain: &MarkovChain,
    task: TaskId,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    let train_data = make_downstream_task(task, chain, cfg.min_len, cfg.max_len, cfg.train_examples, mix(&[seed, 1]))?;
    let val_data = make_downstream_task(task, chain, cfg.min_len, cfg.max_len, cfg.val_examples, mix(&[seed, 2]))?;
    let test_data = make_downstream_task(task, chain, cfg.min_len, cfg.max_len, cfg.test_examples, mix(&[seed, 3]))?;

    let mut params = pretrained.clone();
    reinit_class_head(&mut params, mix(&[seed, SALT_HEAD, task as u64]))?;

    let steps_per_epoch = (cfg.train_examples / cfg.batch_size) as u64;
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut final_train_loss = None;

    if total_steps > 0 {
        let schedule = LrSchedule {
            peak: cfg.lr,
            warmup_fraction: cfg.warmup_fraction,
            total_steps,
            decay: cfg.decay,
        };
        schedule.validate()?;
        let mut opt = OptimizerState::new(&params, AdamWHyper::default());
        let mut step = 0u64;
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..train_data.len()).collect();
            order.shuffle(&mut rng_from(&[seed, SALT_ORDER, SALT_TASK, epoch]));
            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                if chunk.len() < cfg.batch_size || step >= total_steps {
                    break;
                }
                let examples: Vec<DownstreamExample> = chunk.iter().map(|&i| train_data[i].clone()).collect();
                let batch = class_batch(&examples);
                let lr = schedule.lr_at(step + 1)?;
                step += 1;

                let mut graph = Graph::new();
                let bound = bind(&mut graph, &params, "model/", true)?;
                let logits = forward_class_logits(&mut graph, &bound, &batch, params.config.num_classes, None)?;
                let log_probs = graph.log_softmax_t(logits, S::one())?;
                let targets: Vec<usize> = batch.labels.iter().map(|&l| l as usize).collect();
                let picked = graph.gather_per_row(log_probs, targets)?;
                let mean = graph.mean(picked)?;
                let loss = graph.scale(mean, -S::one())?;
                let grads = graph.backward(loss)?;
                opt.step(&mut params, &grads, "model/", lr)?;
                epoch_loss += graph.value(loss).scalar_value().to_f64_lossy();
                batches += 1;
            }
            if epoch + 1 == cfg.epochs && batches > 0 {
                final_train_loss = Some(epoch_loss / batches as f64);
            }
        }
    }

    Ok(FinetuneOutcome {
        val: evaluate_classifier(&params, &val_data)?,
        test: evaluate_classifier(&params, &test_data)?,
        final_train_loss,
    })
}

fn reinit_class_head<S: Scalar>(params: &mut ModelParameters<S>, seed: u64) -> Result<()> {
    let mut rng = rng_from(&[seed]);
    let shapes: Vec<(String, Vec<usize>)> = parameter_shapes(&params.config)
        .into_iter()
        .filter(|(name, _)| name.starts_with("cls_head."))
        .collect();
    for (name, shape) in shapes {
        let tensor = params.get_mut(&name).expect("class head present");
        if shape.len() == 1 {
            *tensor = Tensor::zeros(shape);
        } else {
            use rand_distr::{Distribution, Normal};
            let dist = Normal::new(0.0, 0.02).unwrap();
            let data: Vec<S> = (0..shape.iter().product::<usize>())
                .map(|_| loop {
                    let x: f64 = dist.sample(&mut rng);
                    if x.abs() <= 0.04 {
                        break S::from_f64(x);
                    }
                })
                .collect();
            *tensor = Tensor::new(shape, data)?;
        }
    }
    Ok(())
}
