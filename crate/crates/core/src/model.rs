//! Pre-norm transformer encoder classifier.
//!
//! Layout per layer: `x += Wo·Attn(LN₁(x))`, then `x += FFN(LN₂(x))` with a
//! tanh-approximated GELU inside the feed-forward block. The classifier reads
//! the final hidden state of position 0 (the `[CLS]` token).
//!
//! Padded positions are dropped before the encoder runs: each sequence is
//! compacted to its real tokens (keeping their original positional
//! embeddings) and the sparsity pattern is built over that compacted length.
//! Padded keys are therefore never attended and the amount of trailing
//! padding cannot influence the logits.

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{self, build_mask, full_mask, AttentionMask, SparsityConfig};
use crate::autograd::{Gradients, Tape, Var};
use crate::data::EncodedBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionMode {
    Full,
    Sparse(SparsityConfig),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub num_classes: usize,
    pub attention: AttentionMode,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    /// 12 layers / 12 heads at BERT-base widths.
    pub fn base_teacher() -> Self {
        Self {
            num_layers: 12,
            num_heads: 12,
            d_model: 768,
            d_ff: 3072,
            vocab_size: 30_522,
            max_len: 512,
            num_classes: 2,
            attention: AttentionMode::Sparse(SparsityConfig::new(2, 3, 3, 0)),
        }
    }

    /// 3 layers / 4 heads at the same widths as [`ModelConfig::base_teacher`].
    pub fn base_student() -> Self {
        Self {
            num_layers: 3,
            num_heads: 4,
            ..Self::base_teacher()
        }
    }

    pub fn desk_teacher() -> Self {
        Self {
            num_layers: 2,
            num_heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab_size: 2000,
            max_len: 128,
            num_classes: 2,
            attention: AttentionMode::Sparse(SparsityConfig::new(1, 4, 2, 0)),
        }
    }

    pub fn desk_student() -> Self {
        Self {
            num_layers: 1,
            num_heads: 2,
            ..Self::desk_teacher()
        }
    }
}

/// Closed-form parameter count of the layout built by [`init_params`].
pub fn count_parameters(config: &ModelConfig) -> usize {
    let d = config.d_model;
    let f = config.d_ff;
    let per_layer = 4 * d * d + 4 * d + 4 * d + d * f + f + f * d + d;
    config.vocab_size * d
        + config.max_len * d
        + config.num_layers * per_layer
        + d * config.num_classes
        + config.num_classes
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub ln1_scale: T,
    pub ln1_shift: T,
    pub query: T,
    pub query_bias: T,
    pub key: T,
    pub key_bias: T,
    pub value: T,
    pub value_bias: T,
    pub output: T,
    pub output_bias: T,
    pub ln2_scale: T,
    pub ln2_shift: T,
    pub ff_in: T,
    pub ff_in_bias: T,
    pub ff_out: T,
    pub ff_out_bias: T,
}

impl<T> LayerWeights<T> {
    fn fields(&self) -> [(&'static str, &T); 16] {
        [
            ("ln1.scale", &self.ln1_scale),
            ("ln1.shift", &self.ln1_shift),
            ("attn.query.weight", &self.query),
            ("attn.query.bias", &self.query_bias),
            ("attn.key.weight", &self.key),
            ("attn.key.bias", &self.key_bias),
            ("attn.value.weight", &self.value),
            ("attn.value.bias", &self.value_bias),
            ("attn.output.weight", &self.output),
            ("attn.output.bias", &self.output_bias),
            ("ln2.scale", &self.ln2_scale),
            ("ln2.shift", &self.ln2_shift),
            ("ff.in.weight", &self.ff_in),
            ("ff.in.bias", &self.ff_in_bias),
            ("ff.out.weight", &self.ff_out),
            ("ff.out.bias", &self.ff_out_bias),
        ]
    }

    fn fields_mut(&mut self) -> [&mut T; 16] {
        [
            &mut self.ln1_scale,
            &mut self.ln1_shift,
            &mut self.query,
            &mut self.query_bias,
            &mut self.key,
            &mut self.key_bias,
            &mut self.value,
            &mut self.value_bias,
            &mut self.output,
            &mut self.output_bias,
            &mut self.ln2_scale,
            &mut self.ln2_shift,
            &mut self.ff_in,
            &mut self.ff_in_bias,
            &mut self.ff_out,
            &mut self.ff_out_bias,
        ]
    }

    fn try_map<U>(&self, f: &mut impl FnMut(&T) -> Result<U>) -> Result<LayerWeights<U>> {
        Ok(LayerWeights {
            ln1_scale: f(&self.ln1_scale)?,
            ln1_shift: f(&self.ln1_shift)?,
            query: f(&self.query)?,
            query_bias: f(&self.query_bias)?,
            key: f(&self.key)?,
            key_bias: f(&self.key_bias)?,
            value: f(&self.value)?,
            value_bias: f(&self.value_bias)?,
            output: f(&self.output)?,
            output_bias: f(&self.output_bias)?,
            ln2_scale: f(&self.ln2_scale)?,
            ln2_shift: f(&self.ln2_shift)?,
            ff_in: f(&self.ff_in)?,
            ff_in_bias: f(&self.ff_in_bias)?,
            ff_out: f(&self.ff_out)?,
            ff_out_bias: f(&self.ff_out_bias)?,
        })
    }
}

/// Every learnable tensor of the encoder, generic over storage so the same
/// structure holds owned tensors or their tape handles.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights<T> {
    pub token_embedding: T,
    pub position_embedding: T,
    pub layers: Vec<LayerWeights<T>>,
    pub classifier: T,
    pub classifier_bias: T,
}

pub type Parameters = EncoderWeights<Tensor>;

impl<T> EncoderWeights<T> {
    /// `(name, item)` pairs in a fixed order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("embeddings.token".to_string(), &self.token_embedding),
            ("embeddings.position".to_string(), &self.position_embedding),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, item) in layer.fields() {
                out.push((format!("layers.{i}.{name}"), item));
            }
        }
        out.push(("classifier.weight".to_string(), &self.classifier));
        out.push(("classifier.bias".to_string(), &self.classifier_bias));
        out
    }

    /// Mutable items in the same order as [`EncoderWeights::named`].
    pub fn items_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for layer in &mut self.layers {
            out.extend(layer.fields_mut());
        }
        out.push(&mut self.classifier);
        out.push(&mut self.classifier_bias);
        out
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&T) -> Result<U>) -> Result<EncoderWeights<U>> {
        Ok(EncoderWeights {
            token_embedding: f(&self.token_embedding)?,
            position_embedding: f(&self.position_embedding)?,
            layers: self
                .layers
                .iter()
                .map(|l| l.try_map(&mut f))
                .collect::<Result<_>>()?,
            classifier: f(&self.classifier)?,
            classifier_bias: f(&self.classifier_bias)?,
        })
    }
}

impl Parameters {
    pub fn num_elements(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every tensor on `tape`; `trainable` decides whether gradients flow.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> EncoderWeights<Var> {
        self.try_map(|t| {
            Ok(if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            })
        })
        .expect("binding cannot fail")
    }

    /// Copies the gradient of each bound variable into the matching grad slot.
    pub fn load_grads(&mut self, grads: &Gradients, vars: &EncoderWeights<Var>) -> Result<()> {
        let vars: Vec<Var> = vars.named().into_iter().map(|(_, v)| *v).collect();
        for (tensor, var) in self.items_mut().into_iter().zip(vars) {
            grads.write_into(var, tensor)?;
        }
        Ok(())
    }

    /// Order-sensitive hash of every parameter bit pattern.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, t) in self.named() {
            name.hash(&mut h);
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Weights ~ N(0, 1/d_model); biases and shifts 0; layer-norm scales 1.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<Parameters> {
    config.validate()?;
    let d = config.d_model;
    let f = config.d_ff;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
    let mut weight = |rows: usize, cols: usize| {
        let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
        Tensor::from_parts(vec![rows, cols], data).with_requires_grad(true)
    };
    let token_embedding = weight(config.vocab_size, d);
    let position_embedding = weight(config.max_len, d);
    let mut layers = Vec::with_capacity(config.num_layers);
    for _ in 0..config.num_layers {
        layers.push(LayerWeights {
            ln1_scale: ones(d),
            ln1_shift: zeros(d),
            query: weight(d, d),
            query_bias: zeros(d),
            key: weight(d, d),
            key_bias: zeros(d),
            value: weight(d, d),
            value_bias: zeros(d),
            output: weight(d, d),
            output_bias: zeros(d),
            ln2_scale: ones(d),
            ln2_shift: zeros(d),
            ff_in: weight(d, f),
            ff_in_bias: zeros(f),
            ff_out: weight(f, d),
            ff_out_bias: zeros(d),
        });
    }
    let classifier = weight(d, config.num_classes);
    Ok(Parameters {
        token_embedding,
        position_embedding,
        layers,
        classifier,
        classifier_bias: zeros(config.num_classes),
    })
}

fn ones(n: usize) -> Tensor {
    Tensor::filled(&[n], 1.0).with_requires_grad(true)
}

fn zeros(n: usize) -> Tensor {
    Tensor::zeros(&[n]).with_requires_grad(true)
}

/// Where each compacted sequence sits inside the stacked token matrix.
struct Segment {
    start: usize,
    len: usize,
}

/// Caches one mask per compacted sequence length.
struct MaskCache<'a> {
    mode: &'a AttentionMode,
    masks: HashMap<usize, Arc<AttentionMask>>,
}

impl MaskCache<'_> {
    fn get(&mut self, len: usize) -> Result<Arc<AttentionMask>> {
        if let Some(m) = self.masks.get(&len) {
            return Ok(Arc::clone(m));
        }
        let mask = Arc::new(match self.mode {
            AttentionMode::Full => full_mask(len)?,
            AttentionMode::Sparse(cfg) => {
                let cfg = SparsityConfig {
                    global_tokens: cfg.global_tokens.min(len),
                    ..*cfg
                };
                build_mask(&cfg, len)?
            }
        });
        self.masks.insert(len, Arc::clone(&mask));
        Ok(mask)
    }
}

/// Records the forward pass on `tape` and returns the `[B × C]` logits.
pub fn forward_on_tape(
    tape: &mut Tape,
    weights: &EncoderWeights<Var>,
    config: &ModelConfig,
    batch: &EncodedBatch,
) -> Result<Var> {
    config.validate()?;
    let n = batch.seq_len;
    if n > config.max_len {
        return Err(Error::Length {
            len: n,
            max_len: config.max_len,
        });
    }
    if batch.batch_size == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    if batch.token_ids.len() != batch.batch_size * n || batch.pad_mask.len() != batch.batch_size * n
    {
        return Err(Error::Dimension(
            "batch arrays do not match batch_size × seq_len".into(),
        ));
    }

    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut segments = Vec::with_capacity(batch.batch_size);
    for b in 0..batch.batch_size {
        let row_ids = batch.ids_row(b);
        let row_mask = batch.mask_row(b);
        if !row_mask[0] {
            return Err(Error::Contract(format!(
                "sequence {b} has a padded first position"
            )));
        }
        let start = ids.len();
        for (pos, (&id, &real)) in row_ids.iter().zip(row_mask).enumerate() {
            if !real {
                continue;
            }
            if id >= config.vocab_size {
                return Err(Error::Vocabulary {
                    id,
                    vocab_size: config.vocab_size,
                });
            }
            ids.push(id);
            positions.push(pos);
        }
        segments.push(Segment {
            start,
            len: ids.len() - start,
        });
    }

    let tok = tape.gather_rows(weights.token_embedding, &ids)?;
    let pos = tape.gather_rows(weights.position_embedding, &positions)?;
    let mut x = tape.add(tok, pos)?;

    let mut masks = MaskCache {
        mode: &config.attention,
        masks: HashMap::new(),
    };
    for layer in &weights.layers {
        let h = tape.layer_norm(x, layer.ln1_scale, layer.ln1_shift)?;
        let attn = self_attention(tape, layer, config, h, &segments, &mut masks)?;
        x = tape.add(x, attn)?;

        let h = tape.layer_norm(x, layer.ln2_scale, layer.ln2_shift)?;
        let inner = linear(tape, h, layer.ff_in, layer.ff_in_bias)?;
        let inner = tape.gelu(inner)?;
        let ff = linear(tape, inner, layer.ff_out, layer.ff_out_bias)?;
        x = tape.add(x, ff)?;
    }

    let firsts: Vec<usize> = segments.iter().map(|s| s.start).collect();
    let pooled = tape.gather_rows(x, &firsts)?;
    linear(tape, pooled, weights.classifier, weights.classifier_bias)
}

fn linear(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = tape.matmul(x, weight)?;
    tape.add_bias(y, bias)
}

fn self_attention(
    tape: &mut Tape,
    layer: &LayerWeights<Var>,
    config: &ModelConfig,
    h: Var,
    segments: &[Segment],
    masks: &mut MaskCache<'_>,
) -> Result<Var> {
    let q = linear(tape, h, layer.query, layer.query_bias)?;
    let k = linear(tape, h, layer.key, layer.key_bias)?;
    let v = linear(tape, h, layer.value, layer.value_bias)?;
    let dh = config.head_dim();
    let mut per_sequence = Vec::with_capacity(segments.len());
    for seg in segments {
        let mask = masks.get(seg.len)?;
        let mut heads = Vec::with_capacity(config.num_heads);
        for head in 0..config.num_heads {
            let col = head * dh;
            let qh = tape.block(q, seg.start, seg.len, col, dh)?;
            let kh = tape.block(k, seg.start, seg.len, col, dh)?;
            let vh = tape.block(v, seg.start, seg.len, col, dh)?;
            heads.push(match config.attention {
                AttentionMode::Full => attention::attend_dense(tape, qh, kh, vh, &mask)?,
                AttentionMode::Sparse(_) => attention::attend_sparse(tape, qh, kh, vh, &mask)?,
            });
        }
        per_sequence.push(tape.concat_cols(&heads)?);
    }
    let merged = tape.concat_rows(&per_sequence)?;
    linear(tape, merged, layer.output, layer.output_bias)
}

/// Inference-mode forward pass: `[B × C]` logits, no gradients recorded for
/// the parameters.
pub fn forward(params: &Parameters, config: &ModelConfig, batch: &EncodedBatch) -> Result<Tensor> {
    check_shapes(params, config)?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let logits = forward_on_tape(&mut tape, &vars, config, batch)?;
    Ok(tape.value(logits).clone())
}

/// Verifies that `params` has exactly the tensor shapes `config` implies.
pub fn check_shapes(params: &Parameters, config: &ModelConfig) -> Result<()> {
    config.validate()?;
    let d = config.d_model;
    let f = config.d_ff;
    let c = config.num_classes;
    let expect = |t: &Tensor, shape: &[usize], what: &str| {
        if t.shape() == shape {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{what} has shape {:?}, config implies {shape:?}",
                t.shape()
            )))
        }
    };
    if params.layers.len() != config.num_layers {
        return Err(Error::Config(format!(
            "{} layers in parameters, {} in config",
            params.layers.len(),
            config.num_layers
        )));
    }
    expect(
        &params.token_embedding,
        &[config.vocab_size, d],
        "token embedding",
    )?;
    expect(
        &params.position_embedding,
        &[config.max_len, d],
        "position embedding",
    )?;
    for l in &params.layers {
        for (name, t) in l.fields() {
            let shape: &[usize] = match name {
                "attn.query.weight" | "attn.key.weight" | "attn.value.weight"
                | "attn.output.weight" => &[d, d],
                "ff.in.weight" => &[d, f],
                "ff.in.bias" => &[f],
                "ff.out.weight" => &[f, d],
                _ => &[d],
            };
            expect(t, shape, name)?;
        }
    }
    expect(&params.classifier, &[d, c], "classifier")?;
    expect(&params.classifier_bias, &[c], "classifier bias")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EncodedBatch, Example, Vocabulary};

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            num_heads: 1,
            d_model: 4,
            d_ff: 8,
            vocab_size: 10,
            max_len: 8,
            num_classes: 2,
            attention: AttentionMode::Full,
        }
    }

    #[test]
    fn hand_summed_parameter_count() {
        assert_eq!(count_parameters(&tiny()), 254);
        assert_eq!(init_params(&tiny(), 0).unwrap().num_elements(), 254);
    }

    #[test]
    fn count_is_affine_in_layers() {
        let one = count_parameters(&tiny());
        let two = count_parameters(&ModelConfig {
            num_layers: 2,
            ..tiny()
        });
        let zero_layer_part = 40 + 32 + 10;
        assert_eq!(two - one, one - zero_layer_part);
    }

    #[test]
    fn layer_norm_scales_start_at_one() {
        let p = init_params(&ModelConfig::desk_teacher(), 3).unwrap();
        for l in &p.layers {
            assert!(l
                .ln1_scale
                .data()
                .iter()
                .chain(l.ln2_scale.data())
                .all(|&v| v == 1.0));
            assert!(l.ff_in_bias.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::desk_student();
        assert_eq!(
            init_params(&cfg, 11).unwrap(),
            init_params(&cfg, 11).unwrap()
        );
        assert_ne!(
            init_params(&cfg, 11).unwrap(),
            init_params(&cfg, 12).unwrap()
        );
    }

    #[test]
    fn invalid_configs() {
        let bad_heads = ModelConfig {
            num_heads: 3,
            ..tiny()
        };
        assert!(matches!(bad_heads.validate(), Err(Error::Config(_))));
        let one_class = ModelConfig {
            num_classes: 1,
            ..tiny()
        };
        assert!(one_class.validate().is_err());
    }

    fn batch(vocab: &Vocabulary, texts: &[&str], n: usize) -> EncodedBatch {
        let ex: Vec<Example> = texts.iter().map(|t| Example::new(*t, 0)).collect();
        let refs: Vec<&Example> = ex.iter().collect();
        EncodedBatch::encode(vocab, &refs, n).unwrap()
    }

    #[test]
    fn forward_shape_and_batch_independence() {
        let vocab = Vocabulary::with_tokens(["a", "b", "c"]).unwrap();
        let cfg = tiny();
        let p = init_params(&cfg, 1).unwrap();
        let out = forward(&p, &cfg, &batch(&vocab, &["a b", "c a b", "a b"], 6)).unwrap();
        assert_eq!(out.shape(), &[3, 2]);
        assert_eq!(&out.data()[0..2], &out.data()[4..6]);
    }

    #[test]
    fn forward_errors() {
        let vocab = Vocabulary::with_tokens(["a"]).unwrap();
        let cfg = tiny();
        let p = init_params(&cfg, 1).unwrap();
        let long = batch(&vocab, &["a"], 9);
        assert!(matches!(
            forward(&p, &cfg, &long),
            Err(Error::Length { .. })
        ));
        let mut bad = batch(&vocab, &["a"], 4);
        bad.token_ids[1] = 10;
        assert!(matches!(
            forward(&p, &cfg, &bad),
            Err(Error::Vocabulary { id: 10, .. })
        ));
    }
}
