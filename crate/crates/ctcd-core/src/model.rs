//! A small pre-norm transformer encoder with an MLM head and a
//! classification head. The same architecture serves as teacher and student
//! at different layer counts.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ClassBatch, MaskedBatch, Vocab};
use crate::error::{CoreError, Result};
use crate::graph::{Graph, ValueId};
use crate::rng::{rng_from, SALT_INIT};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    pub seed: u64,
    /// Residual/embedding dropout probability; 0 keeps forward passes pure.
    #[serde(default)]
    pub dropout: f64,
    /// Tie the MLM head to the token embedding (logits = x @ E^T + b).
    #[serde(default)]
    pub weight_tying: bool,
}

fn default_num_classes() -> usize {
    2
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_dim == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return Err(CoreError::InvalidConfig("model dimensions must be positive".into()));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(CoreError::InvalidConfig(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.vocab_size <= Vocab::FIRST_CONTENT as usize {
            return Err(CoreError::InvalidConfig("vocab too small".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Desk-scale teacher: 4 layers at hidden 128.
    pub fn desk_teacher(seed: u64) -> Self {
        ModelConfig {
            num_layers: 4,
            hidden_dim: 128,
            num_heads: 4,
            ffn_dim: 256,
            vocab_size: 64,
            max_seq_len: 32,
            num_classes: 2,
            seed,
            dropout: 0.0,
            weight_tying: false,
        }
    }

    /// Desk-scale student: 2 layers at hidden 128.
    pub fn desk_student(seed: u64) -> Self {
        ModelConfig { num_layers: 2, ..Self::desk_teacher(seed) }
    }

    /// Tiny model for gradient checks and unit tests.
    pub fn tiny(seed: u64) -> Self {
        ModelConfig {
            num_layers: 1,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            vocab_size: 16,
            max_seq_len: 16,
            num_classes: 2,
            seed,
            dropout: 0.0,
            weight_tying: false,
        }
    }
}

/// Every named parameter tensor and its shape, in the stable order used by
/// initialization, optimizer state, and checkpoints.
pub fn parameter_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let h = config.hidden_dim;
    let f = config.ffn_dim;
    let v = config.vocab_size;
    let mut shapes = vec![
        ("embed.token".to_string(), vec![v, h]),
        ("embed.position".to_string(), vec![config.max_seq_len, h]),
    ];
    for l in 0..config.num_layers {
        let p = |name: &str| format!("layer{}.{}", l, name);
        shapes.push((p("ln1.scale"), vec![h]));
        shapes.push((p("ln1.shift"), vec![h]));
        for w in ["wq", "wk", "wv", "wo"] {
            shapes.push((p(&format!("attn.{}", w)), vec![h, h]));
            shapes.push((p(&format!("attn.{}", w.replace('w', "b"))), vec![h]));
        }
        shapes.push((p("ln2.scale"), vec![h]));
        shapes.push((p("ln2.shift"), vec![h]));
        shapes.push((p("ffn.w1"), vec![h, f]));
        shapes.push((p("ffn.b1"), vec![f]));
        shapes.push((p("ffn.w2"), vec![f, h]));
        shapes.push((p("ffn.b2"), vec![h]));
    }
    shapes.push(("final_ln.scale".to_string(), vec![h]));
    shapes.push(("final_ln.shift".to_string(), vec![h]));
    if !config.weight_tying {
        shapes.push(("mlm_head.w".to_string(), vec![h, v]));
    }
    shapes.push(("mlm_head.b".to_string(), vec![v]));
    shapes.push(("cls_head.w".to_string(), vec![h, config.num_classes]));
    shapes.push(("cls_head.b".to_string(), vec![config.num_classes]));
    shapes
}

/// The full named parameter set of one encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<S> {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ModelParameters<S> {
    pub fn from_tensors(config: ModelConfig, named: Vec<(String, Tensor<S>)>) -> Result<Self> {
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        let mut index = HashMap::new();
        for (name, tensor) in named {
            if index.insert(name.clone(), names.len()).is_some() {
                return Err(CoreError::InvalidConfig(format!("duplicate parameter `{}`", name)));
            }
            if !tensor.all_finite() {
                return Err(CoreError::NonFinite { op: "ModelParameters::from_tensors" });
            }
            names.push(name);
            tensors.push(tensor);
        }
        Ok(ModelParameters { config, names, tensors, index })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.names.iter().zip(self.tensors.iter())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn name_at(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor<S> {
        &self.tensors[i]
    }

    pub fn tensor_at_mut(&mut self, i: usize) -> &mut Tensor<S> {
        &mut self.tensors[i]
    }

    /// Total number of scalar parameters.
    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Exact bit-level equality, used by the trajectory-equivalence checks.
    pub fn bit_eq(&self, other: &Self) -> bool {
        if self.names != other.names {
            return false;
        }
        self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
            a.shape() == b.shape() && {
                let mut ab = Vec::new();
                let mut bb = Vec::new();
                for &v in a.data() {
                    v.write_le(&mut ab);
                }
                for &v in b.data() {
                    v.write_le(&mut bb);
                }
                ab == bb
            }
        })
    }
}

fn truncated_normal<S: Scalar>(rng: &mut ChaCha8Rng, std: f64) -> S {
    let dist = Normal::new(0.0, std).unwrap();
    loop {
        let x = dist.sample(rng);
        if x.abs() <= 2.0 * std {
            return S::from_f64(x);
        }
    }
}

/// Deterministic initialization: weights from a truncated normal
/// (std 0.02, clipped at two sigma), biases and layer-norm shifts zero,
/// layer-norm scales one.
pub fn init_model<S: Scalar>(config: &ModelConfig) -> Result<ModelParameters<S>> {
    config.validate()?;
    let mut rng = rng_from(&[config.seed, SALT_INIT]);
    let mut named = Vec::new();
    for (name, shape) in parameter_shapes(config) {
        let numel: usize = shape.iter().product();
        let tensor = if name.ends_with(".scale") {
            Tensor::full(shape, S::one())
        } else if shape.len() == 1 {
            Tensor::zeros(shape)
        } else {
            let data: Vec<S> = (0..numel).map(|_| truncated_normal(&mut rng, 0.02)).collect();
            Tensor::new(shape, data)?
        };
        named.push((name, tensor));
    }
    ModelParameters::from_tensors(config.clone(), named)
}

/// Dropout state for one forward pass; absent means inference mode.
pub struct DropoutCtx {
    p: f64,
    rng: ChaCha8Rng,
}

impl DropoutCtx {
    pub fn new(p: f64, seed: u64) -> Self {
        DropoutCtx { p, rng: rng_from(&[seed]) }
    }
}

/// A model's parameters registered as graph leaves under a prefix, ready for
/// forward passes. Frozen models bind with `trainable = false`, which makes
/// their gradients structurally impossible rather than merely unused.
pub struct BoundModel {
    pub config: ModelConfig,
    pub prefix: String,
    ids: HashMap<String, ValueId>,
}

impl BoundModel {
    fn id(&self, name: &str) -> ValueId {
        self.ids[name]
    }
}

pub fn bind<S: Scalar>(
    graph: &mut Graph<S>,
    params: &ModelParameters<S>,
    prefix: &str,
    trainable: bool,
) -> Result<BoundModel> {
    let owned_prefix = prefix.to_string();
    bind_with(graph, params, prefix, |g, name, tensor| {
        if trainable {
            g.param(&format!("{}{}", owned_prefix, name), tensor.clone())
        } else {
            g.constant(tensor.clone())
        }
    })
}

/// Bind with a caller-chosen leaf per parameter; lets tests and gradient
/// oracles substitute a probe leaf for a single named tensor.
pub fn bind_with<S: Scalar>(
    graph: &mut Graph<S>,
    params: &ModelParameters<S>,
    prefix: &str,
    mut make_leaf: impl FnMut(&mut Graph<S>, &str, &Tensor<S>) -> Result<ValueId>,
) -> Result<BoundModel> {
    let mut ids = HashMap::with_capacity(params.len());
    for (name, tensor) in params.iter() {
        let id = make_leaf(graph, name, tensor)?;
        ids.insert(name.clone(), id);
    }
    Ok(BoundModel { config: params.config.clone(), prefix: prefix.to_string(), ids })
}

fn linear<S: Scalar>(graph: &mut Graph<S>, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
    let xw = graph.matmul(x, w)?;
    graph.add_bias(xw, b)
}

fn apply_dropout<S: Scalar>(
    graph: &mut Graph<S>,
    x: ValueId,
    dropout: &mut Option<&mut DropoutCtx>,
) -> Result<ValueId> {
    let Some(ctx) = dropout.as_deref_mut() else { return Ok(x) };
    if ctx.p <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - ctx.p;
    let scale = S::from_f64(1.0 / keep);
    let shape = graph.value(x).shape().to_vec();
    let numel = graph.value(x).numel();
    let data: Vec<S> = (0..numel)
        .map(|_| if ctx.rng.gen::<f64>() < keep { scale } else { S::zero() })
        .collect();
    let mask = graph.constant(Tensor::new(shape, data)?)?;
    graph.mul(x, mask)
}

fn check_tokens(token_ids: &[u16], vocab_size: usize) -> Result<()> {
    for &t in token_ids {
        if t as usize >= vocab_size {
            return Err(CoreError::TokenOutOfRange { id: t as usize, vocab: vocab_size });
        }
    }
    Ok(())
}

/// Encoder stack over a padded batch; returns the final hidden states as
/// [batch*seq_len, hidden]. Padding is excluded from attention via an
/// additive key mask, which is the only cross-position path in the model.
fn encode<S: Scalar>(
    graph: &mut Graph<S>,
    model: &BoundModel,
    token_ids: &[u16],
    attention_mask: &[bool],
    batch: usize,
    seq_len: usize,
    mut dropout: Option<&mut DropoutCtx>,
) -> Result<ValueId> {
    let cfg = &model.config;
    if seq_len > cfg.max_seq_len {
        return Err(CoreError::InvalidConfig(format!(
            "sequence length {} exceeds model max {}",
            seq_len, cfg.max_seq_len
        )));
    }
    if token_ids.len() != batch * seq_len || attention_mask.len() != batch * seq_len {
        return Err(CoreError::ShapeMismatch {
            op: "encode",
            detail: format!("{} ids for batch {} x len {}", token_ids.len(), batch, seq_len),
        });
    }
    check_tokens(token_ids, cfg.vocab_size)?;

    let tok_idx: Vec<usize> = token_ids.iter().map(|&t| t as usize).collect();
    let tok = graph.gather_rows(model.id("embed.token"), tok_idx)?;
    let pos_idx: Vec<usize> = (0..batch).flat_map(|_| 0..seq_len).collect();
    let pos = graph.gather_rows(model.id("embed.position"), pos_idx)?;
    let mut x = graph.add(tok, pos)?;
    x = apply_dropout(graph, x, &mut dropout)?;

    // Additive key masks, one per example, shared by all layers.
    let neg = S::from_f64(-1e9);
    let mut key_masks = Vec::with_capacity(batch);
    for e in 0..batch {
        let mut m = vec![S::zero(); seq_len * seq_len];
        for k in 0..seq_len {
            if !attention_mask[e * seq_len + k] {
                for q in 0..seq_len {
                    m[q * seq_len + k] = neg;
                }
            }
        }
        key_masks.push(graph.constant(Tensor::new(vec![seq_len, seq_len], m)?)?);
    }

    let head_dim = cfg.hidden_dim / cfg.num_heads;
    let inv_sqrt_hd = S::from_f64(1.0 / (head_dim as f64).sqrt());

    for l in 0..cfg.num_layers {
        let p = |name: &str| format!("layer{}.{}", l, name);

        let normed = graph.layer_norm(x, model.id(&p("ln1.scale")), model.id(&p("ln1.shift")))?;
        let q = linear(graph, normed, model.id(&p("attn.wq")), model.id(&p("attn.bq")))?;
        let k = linear(graph, normed, model.id(&p("attn.wk")), model.id(&p("attn.bk")))?;
        let v = linear(graph, normed, model.id(&p("attn.wv")), model.id(&p("attn.bv")))?;

        let mut example_outs = Vec::with_capacity(batch);
        for e in 0..batch {
            let qe = graph.slice_rows(q, e * seq_len, seq_len)?;
            let ke = graph.slice_rows(k, e * seq_len, seq_len)?;
            let ve = graph.slice_rows(v, e * seq_len, seq_len)?;
            let mut heads = Vec::with_capacity(cfg.num_heads);
            for h in 0..cfg.num_heads {
                let qh = graph.slice_cols(qe, h * head_dim, head_dim)?;
                let kh = graph.slice_cols(ke, h * head_dim, head_dim)?;
                let vh = graph.slice_cols(ve, h * head_dim, head_dim)?;
                let scores = graph.matmul_bt(qh, kh)?;
                let scaled = graph.scale(scores, inv_sqrt_hd)?;
                let masked = graph.add(scaled, key_masks[e])?;
                let weights = graph.softmax_t(masked, S::one())?;
                heads.push(graph.matmul(weights, vh)?);
            }
            example_outs.push(graph.concat_cols(&heads)?);
        }
        let merged = graph.concat_rows(&example_outs)?;
        let mut attn_out = linear(graph, merged, model.id(&p("attn.wo")), model.id(&p("attn.bo")))?;
        attn_out = apply_dropout(graph, attn_out, &mut dropout)?;
        x = graph.add(x, attn_out)?;

        let normed2 = graph.layer_norm(x, model.id(&p("ln2.scale")), model.id(&p("ln2.shift")))?;
        let hidden = linear(graph, normed2, model.id(&p("ffn.w1")), model.id(&p("ffn.b1")))?;
        let act = graph.gelu(hidden)?;
        let mut ffn_out = linear(graph, act, model.id(&p("ffn.w2")), model.id(&p("ffn.b2")))?;
        ffn_out = apply_dropout(graph, ffn_out, &mut dropout)?;
        x = graph.add(x, ffn_out)?;
    }

    graph.layer_norm(x, model.id("final_ln.scale"), model.id("final_ln.shift"))
}

/// MLM logits over the whole batch: [batch, seq_len, vocab].
pub fn forward_mlm_logits<S: Scalar>(
    graph: &mut Graph<S>,
    model: &BoundModel,
    batch: &MaskedBatch,
    dropout: Option<&mut DropoutCtx>,
) -> Result<ValueId> {
    let x = encode(graph, model, &batch.token_ids, &batch.attention_mask, batch.batch, batch.seq_len, dropout)?;
    let logits = if model.config.weight_tying {
        let tied = graph.matmul_bt(x, model.id("embed.token"))?;
        graph.add_bias(tied, model.id("mlm_head.b"))?
    } else {
        linear(graph, x, model.id("mlm_head.w"), model.id("mlm_head.b"))?
    };
    graph.reshape(logits, vec![batch.batch, batch.seq_len, model.config.vocab_size])
}

/// Classification logits from the [CLS] position: [batch, num_classes].
pub fn forward_class_logits<S: Scalar>(
    graph: &mut Graph<S>,
    model: &BoundModel,
    batch: &ClassBatch,
    num_classes: usize,
    dropout: Option<&mut DropoutCtx>,
) -> Result<ValueId> {
    if num_classes != model.config.num_classes {
        return Err(CoreError::InvalidConfig(format!(
            "classification head has {} classes, requested {}",
            model.config.num_classes, num_classes
        )));
    }
    for e in 0..batch.batch {
        if batch.token_ids[e * batch.seq_len] != Vocab::CLS {
            return Err(CoreError::InvalidConfig(format!("example {} does not start with [CLS]", e)));
        }
    }
    let x = encode(graph, model, &batch.token_ids, &batch.attention_mask, batch.batch, batch.seq_len, dropout)?;
    let rows: Vec<usize> = (0..batch.batch).map(|e| e * batch.seq_len).collect();
    let cls = graph.gather_rows(x, rows)?;
    linear(graph, cls, model.id("cls_head.w"), model.id("cls_head.b"))
}
