//! Distillation objectives: the hard MLM loss, the tempered KL soft loss,
//! one-way KD, reversed KD, the joint co-training objective, and the
//! community variant with a frozen teacher.
//!
//! Every stop-gradient placement is explicit at the call site, and the soft
//! loss refuses a reference that still carries gradient. Zero-weighted terms
//! are skipped structurally, which is what makes the regime-degeneration
//! equivalences exact rather than approximate.

use serde::{Deserialize, Serialize};

use crate::data::MaskedBatch;
use crate::error::{CoreError, Result};
use crate::graph::{GradientMap, Graph, ValueId};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SoftLossPositions {
    MaskedOnly,
    AllPositions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Softening temperature tau.
    pub temperature: f64,
    /// Student hard/soft weights.
    pub alpha_hard: f64,
    pub alpha_soft: f64,
    /// Teacher hard/soft weights.
    pub beta_hard: f64,
    pub beta_soft: f64,
    pub soft_positions: SoftLossPositions,
    /// Multiply soft losses by tau^2 (conventional gradient compensation;
    /// the written objective carries no such factor, so default off).
    pub tau_squared_scaling: bool,
    /// Weights of the frozen-teacher KL terms in the community objective.
    pub frozen_soft_weight_s1: f64,
    pub frozen_soft_weight_s2: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: 2.0,
            alpha_hard: 1.0,
            alpha_soft: 1.0,
            beta_hard: 1.0,
            beta_soft: 1.0,
            soft_positions: SoftLossPositions::MaskedOnly,
            tau_squared_scaling: false,
            frozen_soft_weight_s1: 1.0,
            frozen_soft_weight_s2: 1.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(CoreError::TemperatureNotPositive(self.temperature));
        }
        for (name, w) in [
            ("alpha_hard", self.alpha_hard),
            ("alpha_soft", self.alpha_soft),
            ("beta_hard", self.beta_hard),
            ("beta_soft", self.beta_soft),
            ("frozen_soft_weight_s1", self.frozen_soft_weight_s1),
            ("frozen_soft_weight_s2", self.frozen_soft_weight_s2),
        ] {
            if !(w >= 0.0) {
                return Err(CoreError::InvalidConfig(format!("{} must be non-negative, got {}", name, w)));
            }
        }
        Ok(())
    }

    /// "At least one of alpha_hard, alpha_soft positive when a student is
    /// trained" - checked at run setup.
    pub fn validate_student_trained(&self) -> Result<()> {
        if self.alpha_hard <= 0.0 && self.alpha_soft <= 0.0 {
            return Err(CoreError::InvalidConfig(
                "student is trained but alpha_hard and alpha_soft are both zero".into(),
            ));
        }
        Ok(())
    }
}

/// Mean over masked positions of -log p(y|x) at temperature 1, via the
/// fused log-softmax.
pub fn hard_loss<S: Scalar>(graph: &mut Graph<S>, logits: ValueId, batch: &MaskedBatch) -> Result<ValueId> {
    let (rows, targets) = batch.masked_flat();
    if rows.is_empty() {
        return Err(CoreError::EmptyMask);
    }
    let selected = graph.gather_rows(logits, rows)?;
    let log_probs = graph.log_softmax_t(selected, S::one())?;
    let picked = graph.gather_per_row(log_probs, targets)?;
    let mean = graph.mean(picked)?;
    graph.scale(mean, -S::one())
}

/// KL(p_ref^tau || p_learner^tau) averaged over rows of pre-selected logits.
/// The reference must already be detached.
pub fn soft_loss_rows<S: Scalar>(
    graph: &mut Graph<S>,
    reference: ValueId,
    learner: ValueId,
    cfg: &DistillConfig,
) -> Result<ValueId> {
    if graph.requires_grad(reference) {
        return Err(CoreError::ReferenceNotDetached);
    }
    if graph.value(reference).shape() != graph.value(learner).shape() {
        return Err(CoreError::ShapeMismatch {
            op: "soft_loss",
            detail: format!(
                "{:?} vs {:?}",
                graph.value(reference).shape(),
                graph.value(learner).shape()
            ),
        });
    }
    let tau = S::from_f64(cfg.temperature);
    let rows = graph.value(reference).rows();
    let p_ref = graph.softmax_t(reference, tau)?;
    let log_ref = graph.log_softmax_t(reference, tau)?;
    let log_learner = graph.log_softmax_t(learner, tau)?;
    let diff = graph.sub(log_ref, log_learner)?;
    let weighted = graph.mul(p_ref, diff)?;
    let total = graph.sum(weighted)?;
    let mut loss = graph.scale(total, S::one() / S::from_usize(rows))?;
    if cfg.tau_squared_scaling {
        loss = graph.scale(loss, tau * tau)?;
    }
    Ok(loss)
}

/// Soft loss over the positions selected by `cfg.soft_positions`.
pub fn soft_loss<S: Scalar>(
    graph: &mut Graph<S>,
    reference_logits: ValueId,
    learner_logits: ValueId,
    batch: &MaskedBatch,
    cfg: &DistillConfig,
) -> Result<ValueId> {
    if graph.requires_grad(reference_logits) {
        return Err(CoreError::ReferenceNotDetached);
    }
    let rows = match cfg.soft_positions {
        SoftLossPositions::MaskedOnly => batch.masked_flat().0,
        SoftLossPositions::AllPositions => batch.real_flat(),
    };
    if rows.is_empty() {
        return Err(CoreError::EmptyMask);
    }
    let ref_selected = graph.gather_rows(reference_logits, rows.clone())?;
    let learner_selected = graph.gather_rows(learner_logits, rows)?;
    soft_loss_rows(graph, ref_selected, learner_selected, cfg)
}

/// One objective's terms: the raw (unweighted) components plus the weighted
/// total that is differentiated.
#[derive(Debug, Clone, Copy)]
pub struct KdTerms {
    pub hard: Option<ValueId>,
    pub soft: Option<ValueId>,
    pub total: ValueId,
}

fn weighted_sum<S: Scalar>(graph: &mut Graph<S>, terms: &[(ValueId, f64)]) -> Result<ValueId> {
    let mut acc: Option<ValueId> = None;
    for &(term, weight) in terms {
        let scaled = graph.scale(term, S::from_f64(weight))?;
        acc = Some(match acc {
            None => scaled,
            Some(prev) => graph.add(prev, scaled)?,
        });
    }
    match acc {
        Some(id) => Ok(id),
        None => graph.constant(crate::tensor::Tensor::scalar(S::zero())),
    }
}

fn check_same_shape<S: Scalar>(graph: &Graph<S>, a: ValueId, b: ValueId) -> Result<()> {
    if graph.value(a).shape() != graph.value(b).shape() {
        return Err(CoreError::ShapeMismatch {
            op: "kd_loss",
            detail: format!("{:?} vs {:?}", graph.value(a).shape(), graph.value(b).shape()),
        });
    }
    Ok(())
}

/// Teacher-to-student KD: alpha_h * H(q, p_student) + alpha_s * D(StopG(teacher), student).
/// Gradient reaches student parameters only.
pub fn kd_loss<S: Scalar>(
    graph: &mut Graph<S>,
    student_logits: ValueId,
    teacher_logits: ValueId,
    batch: &MaskedBatch,
    cfg: &DistillConfig,
) -> Result<KdTerms> {
    cfg.validate()?;
    check_same_shape(graph, student_logits, teacher_logits)?;
    let mut terms = Vec::new();
    let mut hard = None;
    let mut soft = None;
    if cfg.alpha_hard > 0.0 {
        let h = hard_loss(graph, student_logits, batch)?;
        hard = Some(h);
        terms.push((h, cfg.alpha_hard));
    }
    if cfg.alpha_soft > 0.0 {
        let detached = graph.stop_gradient(teacher_logits)?;
        let s = soft_loss(graph, detached, student_logits, batch, cfg)?;
        soft = Some(s);
        terms.push((s, cfg.alpha_soft));
    }
    let total = weighted_sum(graph, &terms)?;
    Ok(KdTerms { hard, soft, total })
}

/// Student-to-teacher (reversed) KD: beta_h * H(q, p_teacher) + beta_s *
/// D(StopG(student), teacher). Gradient reaches teacher parameters only.
pub fn reversed_kd_loss<S: Scalar>(
    graph: &mut Graph<S>,
    teacher_logits: ValueId,
    student_logits: ValueId,
    batch: &MaskedBatch,
    cfg: &DistillConfig,
) -> Result<KdTerms> {
    cfg.validate()?;
    check_same_shape(graph, student_logits, teacher_logits)?;
    let mut terms = Vec::new();
    let mut hard = None;
    let mut soft = None;
    if cfg.beta_hard > 0.0 {
        let h = hard_loss(graph, teacher_logits, batch)?;
        hard = Some(h);
        terms.push((h, cfg.beta_hard));
    }
    if cfg.beta_soft > 0.0 {
        let detached = graph.stop_gradient(student_logits)?;
        let s = soft_loss(graph, detached, teacher_logits, batch, cfg)?;
        soft = Some(s);
        terms.push((s, cfg.beta_soft));
    }
    let total = weighted_sum(graph, &terms)?;
    Ok(KdTerms { hard, soft, total })
}

#[derive(Debug, Clone, Copy)]
pub struct CtcdTerms {
    pub kd: KdTerms,
    pub rekd: KdTerms,
    pub total: ValueId,
}

/// The joint objective as a graph value, without running backward.
pub fn ctcd_scalar<S: Scalar>(
    graph: &mut Graph<S>,
    student_logits: ValueId,
    teacher_logits: ValueId,
    batch: &MaskedBatch,
    cfg: &DistillConfig,
) -> Result<CtcdTerms> {
    let kd = kd_loss(graph, student_logits, teacher_logits, batch, cfg)?;
    let rekd = reversed_kd_loss(graph, teacher_logits, student_logits, batch, cfg)?;
    let total = graph.add(kd.total, rekd.total)?;
    Ok(CtcdTerms { kd, rekd, total })
}

/// The joint objective plus its gradients. By construction the student
/// gradients equal those of the KD term alone and the teacher gradients
/// those of the reversed term alone.
pub fn ctcd_loss<S: Scalar>(
    graph: &mut Graph<S>,
    student_logits: ValueId,
    teacher_logits: ValueId,
    batch: &MaskedBatch,
    cfg: &DistillConfig,
) -> Result<(CtcdTerms, GradientMap<S>)> {
    let terms = ctcd_scalar(graph, student_logits, teacher_logits, batch, cfg)?;
    let grads = graph.backward(terms.total)?;
    Ok((terms, grads))
}

#[derive(Debug, Clone, Copy)]
pub struct CommunityTerms {
    pub ctcd: CtcdTerms,
    pub frozen_to_s1: Option<ValueId>,
    pub frozen_to_s2: Option<ValueId>,
    pub total: ValueId,
}

/// Community KD: the two students co-distill (the joint objective over
/// (theta_1, theta_2)) and each additionally learns from a frozen teacher's
/// tempered predictions. Gradients exist for the students only.
pub fn community_loss<S: Scalar>(
    graph: &mut Graph<S>,
    student1_logits: ValueId,
    student2_logits: ValueId,
    frozen_teacher_logits: ValueId,
    batch: &MaskedBatch,
    cfg: &DistillConfig,
) -> Result<(CommunityTerms, GradientMap<S>)> {
    if graph.requires_grad(frozen_teacher_logits) {
        return Err(CoreError::ReferenceNotDetached);
    }
    let ctcd = ctcd_scalar(graph, student1_logits, student2_logits, batch, cfg)?;
    let mut total = ctcd.total;
    let mut frozen_to_s1 = None;
    let mut frozen_to_s2 = None;
    if cfg.frozen_soft_weight_s1 > 0.0 {
        let detached = graph.stop_gradient(frozen_teacher_logits)?;
        let s = soft_loss(graph, detached, student1_logits, batch, cfg)?;
        frozen_to_s1 = Some(s);
        let scaled = graph.scale(s, S::from_f64(cfg.frozen_soft_weight_s1))?;
        total = graph.add(total, scaled)?;
    }
    if cfg.frozen_soft_weight_s2 > 0.0 {
        let detached = graph.stop_gradient(frozen_teacher_logits)?;
        let s = soft_loss(graph, detached, student2_logits, batch, cfg)?;
        frozen_to_s2 = Some(s);
        let scaled = graph.scale(s, S::from_f64(cfg.frozen_soft_weight_s2))?;
        total = graph.add(total, scaled)?;
    }
    let grads = graph.backward(total)?;
    Ok((CommunityTerms { ctcd, frozen_to_s1, frozen_to_s2, total }, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{apply_masking, MaskedBatch, MaskingConfig, Vocab};
    use crate::model::{bind, forward_mlm_logits, init_model, ModelConfig};
    use crate::tensor::Tensor;
    use rand::Rng;

    /// Hand-built batch: the loss math only needs rows and targets.
    fn toy_batch(vocab: usize) -> MaskedBatch {
        MaskedBatch {
            batch: 2,
            seq_len: 4,
            token_ids: vec![Vocab::CLS, Vocab::MASK, Vocab::MASK, Vocab::SEP, Vocab::CLS, Vocab::MASK, 5, Vocab::SEP],
            attention_mask: vec![true; 8],
            mask_positions: vec![vec![1, 2], vec![1]],
            original_tokens: vec![vec![5 % vocab as u16, 6 % vocab as u16], vec![7 % vocab as u16]],
            seed_trace: vec![0, 1],
        }
    }

    fn real_batch(config: &ModelConfig, batch: usize, seed: u64) -> MaskedBatch {
        let vocab = Vocab::new(config.vocab_size);
        let examples = (0..batch)
            .map(|e| {
                let content: Vec<u16> =
                    (0..9).map(|i| Vocab::FIRST_CONTENT + ((i * 3 + e + seed as usize) % 8) as u16).collect();
                let mut seq = vec![Vocab::CLS];
                seq.extend(content);
                seq.push(Vocab::SEP);
                apply_masking(&seq, &vocab, &MaskingConfig::default(), seed * 31 + e as u64).unwrap()
            })
            .collect();
        MaskedBatch::from_examples(examples)
    }

    fn cfg_tau1() -> DistillConfig {
        DistillConfig { temperature: 1.0, ..DistillConfig::default() }
    }

    #[test]
    fn hard_loss_uniform_is_ln_k() {
        let mut g = Graph::<f64>::new();
        let batch = toy_batch(4);
        let logits = g.constant(Tensor::zeros(vec![2, 4, 4])).unwrap();
        let loss = hard_loss(&mut g, logits, &batch).unwrap();
        assert!((g.value(loss).scalar_value() - 4.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn hard_loss_is_mean_over_masked_positions() {
        let mut g = Graph::<f64>::new();
        let batch = toy_batch(8);
        // Masked slots sit at flat rows 1, 2 and 5 (targets 5, 6, 7); the
        // rest is noise that must not contribute.
        let mut data = vec![9.9; 2 * 4 * 8];
        for flat in [1usize, 2, 5] {
            for v in 0..8 {
                data[flat * 8 + v] = (v as f64) * 0.3 - 1.0 + flat as f64 * 0.11;
            }
        }
        let per_row_ce = |row: &[f64], target: usize| {
            let max = row.iter().cloned().fold(f64::MIN, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            lse - row[target]
        };
        let e0 = per_row_ce(&data[8..16], 5);
        let e1 = per_row_ce(&data[16..24], 6);
        let e2 = per_row_ce(&data[40..48], 7);

        let logits = g.constant(Tensor::new(vec![2, 4, 8], data).unwrap()).unwrap();
        let loss = hard_loss(&mut g, logits, &batch).unwrap();
        assert!((g.value(loss).scalar_value() - (e0 + e1 + e2) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn hard_loss_confident_correct_vanishes() {
        let mut g = Graph::<f64>::new();
        let batch = toy_batch(4);
        let mut data = vec![0.0; 2 * 4 * 4];
        for (row, target) in [(1usize, 1usize), (2, 2), (5, 3)] {
            data[row * 4 + target] = 30.0;
        }
        // Targets: batch says originals are 5%4=1, 6%4=2, 7%4=3.
        let logits = g.constant(Tensor::new(vec![2, 4, 4], data).unwrap()).unwrap();
        let loss = hard_loss(&mut g, logits, &batch).unwrap();
        assert!(g.value(loss).scalar_value() < 1e-9);
    }

    #[test]
    fn hard_loss_requires_masked_positions() {
        let mut g = Graph::<f64>::new();
        let mut batch = toy_batch(4);
        batch.mask_positions = vec![vec![], vec![]];
        batch.original_tokens = vec![vec![], vec![]];
        let logits = g.constant(Tensor::zeros(vec![2, 4, 4])).unwrap();
        assert!(matches!(hard_loss(&mut g, logits, &batch), Err(CoreError::EmptyMask)));
    }

    #[test]
    fn soft_loss_worked_value() {
        // ref [0.5, 0.5], learner [0.25, 0.75], tau=1 -> 0.143841...
        let mut g = Graph::<f64>::new();
        let reference = g
            .constant(Tensor::from_f64_slice(vec![1, 2], &[0.5f64.ln(), 0.5f64.ln()]).unwrap())
            .unwrap();
        let learner = g
            .constant(Tensor::from_f64_slice(vec![1, 2], &[0.25f64.ln(), 0.75f64.ln()]).unwrap())
            .unwrap();
        let loss = soft_loss_rows(&mut g, reference, learner, &cfg_tau1()).unwrap();
        assert!((g.value(loss).scalar_value() - 0.14384103622589042).abs() < 1e-9);
    }

    #[test]
    fn soft_loss_of_identical_logits_is_zero() {
        let mut g = Graph::<f64>::new();
        let logits = Tensor::from_f64_slice(vec![3, 4], &[0.3, -1.0, 2.0, 0.5, 1.0, 1.0, 1.0, 1.0, -2.0, 0.0, 2.0, 4.0]).unwrap();
        let a = g.constant(logits.clone()).unwrap();
        let b = g.constant(logits).unwrap();
        let loss = soft_loss_rows(&mut g, a, b, &DistillConfig::default()).unwrap();
        assert!(g.value(loss).scalar_value().abs() < 1e-12);
    }

    #[test]
    fn soft_loss_non_negative_over_random_pairs() {
        let mut rng = crate::rng::rng_from(&[123]);
        for _ in 0..1000 {
            let mut g = Graph::<f64>::new();
            let data_a: Vec<f64> = (0..8).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let data_b: Vec<f64> = (0..8).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let a = g.constant(Tensor::new(vec![2, 4], data_a).unwrap()).unwrap();
            let b = g.constant(Tensor::new(vec![2, 4], data_b).unwrap()).unwrap();
            let tau = rng.gen_range(0.5..4.0);
            let cfg = DistillConfig { temperature: tau, ..DistillConfig::default() };
            let loss = soft_loss_rows(&mut g, a, b, &cfg).unwrap();
            assert!(g.value(loss).scalar_value() >= -1e-15);
        }
    }

    #[test]
    fn soft_loss_rejects_live_reference() {
        let mut g = Graph::<f64>::new();
        let reference = g.param("ref", Tensor::from_f64_slice(vec![1, 2], &[0.0, 1.0]).unwrap()).unwrap();
        let learner = g.constant(Tensor::from_f64_slice(vec![1, 2], &[0.0, 1.0]).unwrap()).unwrap();
        assert!(matches!(
            soft_loss_rows(&mut g, reference, learner, &DistillConfig::default()),
            Err(CoreError::ReferenceNotDetached)
        ));
    }

    #[test]
    fn soft_loss_tau_squared_flag() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64_slice(vec![1, 3], &[0.1, 0.7, -0.9]).unwrap()).unwrap();
        let b = g.constant(Tensor::from_f64_slice(vec![1, 3], &[1.0, 0.0, 0.0]).unwrap()).unwrap();
        let base = DistillConfig { temperature: 2.0, ..DistillConfig::default() };
        let scaled = DistillConfig { tau_squared_scaling: true, ..base.clone() };
        let l0 = soft_loss_rows(&mut g, a, b, &base).unwrap();
        let l1 = soft_loss_rows(&mut g, a, b, &scaled).unwrap();
        assert!((g.value(l1).scalar_value() - 4.0 * g.value(l0).scalar_value()).abs() < 1e-12);
    }

    #[test]
    fn kd_weight_zero_reduces_to_hard() {
        let mut g = Graph::<f64>::new();
        let batch = toy_batch(8);
        let mut rng = crate::rng::rng_from(&[5]);
        let s_data: Vec<f64> = (0..2 * 4 * 8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t_data: Vec<f64> = (0..2 * 4 * 8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let s = g.constant(Tensor::new(vec![2, 4, 8], s_data).unwrap()).unwrap();
        let t = g.constant(Tensor::new(vec![2, 4, 8], t_data).unwrap()).unwrap();

        let cfg = DistillConfig { alpha_hard: 0.7, alpha_soft: 0.0, ..DistillConfig::default() };
        let kd = kd_loss(&mut g, s, t, &batch, &cfg).unwrap();
        assert!(kd.soft.is_none());
        let hard = kd.hard.unwrap();
        assert_eq!(g.value(kd.total).scalar_value(), 0.7 * g.value(hard).scalar_value());
    }

    #[test]
    fn kd_on_identical_logits_equals_weighted_hard() {
        let mut g = Graph::<f64>::new();
        let batch = toy_batch(8);
        let data: Vec<f64> = (0..64).map(|i| (i as f64 * 0.13).sin()).collect();
        let s = g.constant(Tensor::new(vec![2, 4, 8], data.clone()).unwrap()).unwrap();
        let t = g.constant(Tensor::new(vec![2, 4, 8], data).unwrap()).unwrap();
        let cfg = DistillConfig { alpha_hard: 1.0, alpha_soft: 3.0, ..cfg_tau1() };
        let kd = kd_loss(&mut g, s, t, &batch, &cfg).unwrap();
        let hard = g.value(kd.hard.unwrap()).scalar_value();
        assert!((g.value(kd.total).scalar_value() - hard).abs() < 1e-12);
    }

    #[test]
    fn mirror_symmetry_of_reversed_kd() {
        let mut rng = crate::rng::rng_from(&[77]);
        let batch = toy_batch(8);
        let a_data: Vec<f64> = (0..64).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let b_data: Vec<f64> = (0..64).map(|_| rng.gen_range(-3.0..3.0)).collect();

        // reversedKd(teacher=A, student=B) with (beta_h, beta_s)
        let mut g1 = Graph::<f64>::new();
        let a1 = g1.constant(Tensor::new(vec![2, 4, 8], a_data.clone()).unwrap()).unwrap();
        let b1 = g1.constant(Tensor::new(vec![2, 4, 8], b_data.clone()).unwrap()).unwrap();
        let cfg1 = DistillConfig { beta_hard: 0.5, beta_soft: 2.0, ..DistillConfig::default() };
        let rekd = reversed_kd_loss(&mut g1, a1, b1, &batch, &cfg1).unwrap();

        // kd with roles and weights swapped, on swapped logits
        let mut g2 = Graph::<f64>::new();
        let a2 = g2.constant(Tensor::new(vec![2, 4, 8], a_data).unwrap()).unwrap();
        let b2 = g2.constant(Tensor::new(vec![2, 4, 8], b_data).unwrap()).unwrap();
        let cfg2 = DistillConfig { alpha_hard: 0.5, alpha_soft: 2.0, ..DistillConfig::default() };
        let kd = kd_loss(&mut g2, a2, b2, &batch, &cfg2).unwrap();

        let v1 = g1.value(rekd.total).scalar_value();
        let v2 = g2.value(kd.total).scalar_value();
        assert!((v1 - v2).abs() < 1e-12, "{} vs {}", v1, v2);
    }

    fn two_model_setup(seed: u64) -> (Graph<f64>, ValueId, ValueId, MaskedBatch) {
        let teacher_cfg = ModelConfig { num_layers: 2, ..ModelConfig::tiny(seed) };
        let student_cfg = ModelConfig::tiny(seed + 100);
        let teacher = init_model::<f64>(&teacher_cfg).unwrap();
        let student = init_model::<f64>(&student_cfg).unwrap();
        let batch = real_batch(&teacher_cfg, 2, seed);
        let mut g = Graph::new();
        let bt = bind(&mut g, &teacher, "teacher/", true).unwrap();
        let bs = bind(&mut g, &student, "student/", true).unwrap();
        let t_logits = forward_mlm_logits(&mut g, &bt, &batch, None).unwrap();
        let s_logits = forward_mlm_logits(&mut g, &bs, &batch, None).unwrap();
        (g, s_logits, t_logits, batch)
    }

    #[test]
    fn kd_gradient_reaches_student_only() {
        let (mut g, s_logits, t_logits, batch) = two_model_setup(1);
        let kd = kd_loss(&mut g, s_logits, t_logits, &batch, &DistillConfig::default()).unwrap();
        let grads = g.backward(kd.total).unwrap();
        assert!(!grads.is_empty());
        for name in grads.names() {
            assert!(name.starts_with("student/"), "unexpected gradient for {}", name);
        }
    }

    #[test]
    fn reversed_kd_gradient_reaches_teacher_only() {
        let (mut g, s_logits, t_logits, batch) = two_model_setup(2);
        let rekd = reversed_kd_loss(&mut g, t_logits, s_logits, &batch, &DistillConfig::default()).unwrap();
        let grads = g.backward(rekd.total).unwrap();
        assert!(!grads.is_empty());
        for name in grads.names() {
            assert!(name.starts_with("teacher/"), "unexpected gradient for {}", name);
        }
    }

    #[test]
    fn ctcd_gradients_decompose_per_side() {
        let (mut g, s_logits, t_logits, batch) = two_model_setup(3);
        let (_, joint_grads) = ctcd_loss(&mut g, s_logits, t_logits, &batch, &DistillConfig::default()).unwrap();

        let (mut g2, s2, t2, batch2) = two_model_setup(3);
        let kd = kd_loss(&mut g2, s2, t2, &batch2, &DistillConfig::default()).unwrap();
        let kd_grads = g2.backward(kd.total).unwrap();

        let (mut g3, s3, t3, batch3) = two_model_setup(3);
        let rekd = reversed_kd_loss(&mut g3, t3, s3, &batch3, &DistillConfig::default()).unwrap();
        let rekd_grads = g3.backward(rekd.total).unwrap();

        assert_eq!(
            joint_grads.names().filter(|n| n.starts_with("student/")).count(),
            kd_grads.len()
        );
        for (name, grad) in kd_grads.iter() {
            let joint = joint_grads.get(name).unwrap();
            for (a, b) in grad.data().iter().zip(joint.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        for (name, grad) in rekd_grads.iter() {
            let joint = joint_grads.get(name).unwrap();
            for (a, b) in grad.data().iter().zip(joint.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ctcd_with_zero_soft_weights_degenerates() {
        let cfg = DistillConfig { alpha_soft: 0.0, beta_soft: 0.0, ..DistillConfig::default() };
        let (mut g, s_logits, t_logits, batch) = two_model_setup(4);
        let (terms, grads) = ctcd_loss(&mut g, s_logits, t_logits, &batch, &cfg).unwrap();
        let hs = g.value(terms.kd.hard.unwrap()).scalar_value();
        let ht = g.value(terms.rekd.hard.unwrap()).scalar_value();
        assert_eq!(g.value(terms.total).scalar_value(), hs + ht);
        assert!(terms.kd.soft.is_none() && terms.rekd.soft.is_none());
        assert!(!grads.is_empty());
    }

    #[test]
    fn soft_term_scales_linearly_in_weight() {
        let base = DistillConfig::default();
        let scaled = DistillConfig { alpha_soft: 3.0, ..base.clone() };
        let hard_only = DistillConfig { alpha_soft: 0.0, ..base.clone() };

        let run = |cfg: &DistillConfig, seed: u64| {
            let (mut g, s, t, batch) = two_model_setup(seed);
            let kd = kd_loss(&mut g, s, t, &batch, cfg).unwrap();
            let grads = g.backward(kd.total).unwrap();
            let total = g.value(kd.total).scalar_value();
            (total, grads)
        };
        let (v1, g1) = run(&base, 6);
        let (v3, g3) = run(&scaled, 6);
        let (v0, g0) = run(&hard_only, 6);
        assert!((v3 - v0 - 3.0 * (v1 - v0)).abs() < 1e-12);
        for (name, grad0) in g0.iter() {
            let a = g1.get(name).unwrap();
            let b = g3.get(name).unwrap();
            for ((x0, x1), x3) in grad0.data().iter().zip(a.data()).zip(b.data()) {
                assert!((x3 - x0 - 3.0 * (x1 - x0)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn community_gradients_reach_students_only() {
        let student_cfg = ModelConfig::tiny(20);
        let teacher_cfg = ModelConfig { num_layers: 2, ..ModelConfig::tiny(21) };
        let s1 = init_model::<f64>(&student_cfg).unwrap();
        let s2 = init_model::<f64>(&ModelConfig::tiny(22)).unwrap();
        let frozen = init_model::<f64>(&teacher_cfg).unwrap();
        let batch = real_batch(&student_cfg, 2, 9);

        let mut g = Graph::new();
        let b1 = bind(&mut g, &s1, "student1/", true).unwrap();
        let b2 = bind(&mut g, &s2, "student2/", true).unwrap();
        let bf = bind(&mut g, &frozen, "frozen/", false).unwrap();
        let l1 = forward_mlm_logits(&mut g, &b1, &batch, None).unwrap();
        let l2 = forward_mlm_logits(&mut g, &b2, &batch, None).unwrap();
        let lf = forward_mlm_logits(&mut g, &bf, &batch, None).unwrap();
        let (terms, grads) = community_loss(&mut g, l1, l2, lf, &batch, &DistillConfig::default()).unwrap();
        assert!(terms.frozen_to_s1.is_some() && terms.frozen_to_s2.is_some());
        assert!(!grads.is_empty());
        for name in grads.names() {
            assert!(
                name.starts_with("student1/") || name.starts_with("student2/"),
                "unexpected gradient for {}",
                name
            );
        }
        assert!(grads.names().any(|n| n.starts_with("student1/")));
        assert!(grads.names().any(|n| n.starts_with("student2/")));
    }

    #[test]
    fn community_reduces_to_ctcd_when_teacher_terms_vanish() {
        let cfg = DistillConfig { frozen_soft_weight_s1: 0.0, frozen_soft_weight_s2: 0.0, ..DistillConfig::default() };
        let student_cfg = ModelConfig::tiny(30);
        let s1 = init_model::<f64>(&student_cfg).unwrap();
        let s2 = init_model::<f64>(&ModelConfig::tiny(31)).unwrap();
        let batch = real_batch(&student_cfg, 2, 4);

        let mut g = Graph::new();
        let b1 = bind(&mut g, &s1, "student1/", true).unwrap();
        let b2 = bind(&mut g, &s2, "student2/", true).unwrap();
        let l1 = forward_mlm_logits(&mut g, &b1, &batch, None).unwrap();
        let l2 = forward_mlm_logits(&mut g, &b2, &batch, None).unwrap();
        let frozen_value = g.value(l1).clone();
        let frozen = g.constant(frozen_value).unwrap();
        let (terms, _) = community_loss(&mut g, l1, l2, frozen, &batch, &cfg).unwrap();
        assert!(terms.frozen_to_s1.is_none() && terms.frozen_to_s2.is_none());
        assert_eq!(g.value(terms.total).scalar_value(), g.value(terms.ctcd.total).scalar_value());
    }

    #[test]
    fn community_frozen_terms_vanish_when_students_match_teacher() {
        let cfg = DistillConfig::default();
        let batch = toy_batch(8);
        let data: Vec<f64> = (0..64).map(|i| (i as f64 * 0.29).cos()).collect();
        let mut g = Graph::<f64>::new();
        let l1 = g.constant(Tensor::new(vec![2, 4, 8], data.clone()).unwrap()).unwrap();
        let l2 = g.constant(Tensor::new(vec![2, 4, 8], data.clone()).unwrap()).unwrap();
        let lf = g.constant(Tensor::new(vec![2, 4, 8], data).unwrap()).unwrap();
        let (terms, _) = community_loss(&mut g, l1, l2, lf, &batch, &cfg).unwrap();
        assert!(g.value(terms.frozen_to_s1.unwrap()).scalar_value().abs() < 1e-12);
        assert!(g.value(terms.frozen_to_s2.unwrap()).scalar_value().abs() < 1e-12);
        let diff = g.value(terms.total).scalar_value() - g.value(terms.ctcd.total).scalar_value();
        assert!(diff.abs() < 1e-12);
    }

    #[test]
    fn community_is_symmetric_under_student_swap() {
        let cfg = DistillConfig {
            alpha_hard: 1.0,
            alpha_soft: 2.0,
            beta_hard: 1.0,
            beta_soft: 2.0,
            ..DistillConfig::default()
        };
        let mut rng = crate::rng::rng_from(&[55]);
        let batch = toy_batch(8);
        let d1: Vec<f64> = (0..64).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let d2: Vec<f64> = (0..64).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let df: Vec<f64> = (0..64).map(|_| rng.gen_range(-2.0..2.0)).collect();

        let eval = |a: &[f64], b: &[f64]| {
            let mut g = Graph::<f64>::new();
            let l1 = g.constant(Tensor::new(vec![2, 4, 8], a.to_vec()).unwrap()).unwrap();
            let l2 = g.constant(Tensor::new(vec![2, 4, 8], b.to_vec()).unwrap()).unwrap();
            let lf = g.constant(Tensor::new(vec![2, 4, 8], df.clone()).unwrap()).unwrap();
            let (terms, _) = community_loss(&mut g, l1, l2, lf, &batch, &cfg).unwrap();
            g.value(terms.total).scalar_value()
        };
        assert!((eval(&d1, &d2) - eval(&d2, &d1)).abs() < 1e-12);
    }

    #[test]
    fn community_rejects_live_frozen_logits() {
        let mut g = Graph::<f64>::new();
        let batch = toy_batch(8);
        let live = g.param("frozen", Tensor::zeros(vec![2, 4, 8])).unwrap();
        let l1 = g.constant(Tensor::zeros(vec![2, 4, 8])).unwrap();
        let l2 = g.constant(Tensor::zeros(vec![2, 4, 8])).unwrap();
        assert!(matches!(
            community_loss(&mut g, l1, l2, live, &batch, &DistillConfig::default()),
            Err(CoreError::ReferenceNotDetached)
        ));
    }

    #[test]
    fn all_positions_mode_selects_real_rows() {
        let cfg = DistillConfig {
            temperature: 1.0,
            soft_positions: SoftLossPositions::AllPositions,
            ..DistillConfig::default()
        };
        let mut batch = toy_batch(8);
        batch.attention_mask[3] = false; // one pad position
        let mut g = Graph::<f64>::new();
        let mut rng = crate::rng::rng_from(&[8]);
        let a_data: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b_data: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = g.constant(Tensor::new(vec![2, 4, 8], a_data.clone()).unwrap()).unwrap();
        let b = g.constant(Tensor::new(vec![2, 4, 8], b_data.clone()).unwrap()).unwrap();
        let loss = soft_loss(&mut g, a, b, &batch, &cfg).unwrap();

        // Hand-computed mean KL over the 7 real rows.
        let kl_row = |zr: &[f64], zl: &[f64]| {
            let soft = |z: &[f64]| {
                let m = z.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect::<Vec<f64>>()
            };
            let (p, q) = (soft(zr), soft(zl));
            p.iter().zip(&q).map(|(pi, qi)| pi * (pi / qi).ln()).sum::<f64>()
        };
        let mut expect = 0.0;
        for r in 0..8 {
            if r == 3 {
                continue;
            }
            expect += kl_row(&a_data[r * 8..(r + 1) * 8], &b_data[r * 8..(r + 1) * 8]);
        }
        expect /= 7.0;
        assert!((g.value(loss).scalar_value() - expect).abs() < 1e-12);
    }
}
