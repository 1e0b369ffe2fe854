//! Transformer encoder and decoder over image feature sequences.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::text::{TextConfig, END_ID, PAD_ID, START_ID};

use super::layers::{
    dropout, dropout_backward, relu, relu_backward, softmax_rows, Attention, AttentionCache, Dense, LayerNorm,
    LayerNormCache, Mode,
};
use super::params::{small_uniform, Grads, ParamId, ParamStore};
use super::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub ff_dim: usize,
    pub enc_heads: usize,
    pub dec_heads: usize,
    pub attn_dropout_enc: f64,
    pub attn_dropout_dec: f64,
    pub dense_dropout_1: f64,
    pub dense_dropout_2: f64,
    pub num_enc_blocks: usize,
    pub num_dec_blocks: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_text(&TextConfig::default())
    }
}

impl ModelConfig {
    pub fn with_text(text: &TextConfig) -> Self {
        Self {
            embed_dim: 512,
            ff_dim: 512,
            enc_heads: 1,
            dec_heads: 2,
            attn_dropout_enc: 0.0,
            attn_dropout_dec: 0.1,
            dense_dropout_1: 0.3,
            dense_dropout_2: 0.5,
            num_enc_blocks: 1,
            num_dec_blocks: 1,
            vocab_size: text.vocab_size,
            seq_len: text.seq_len,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.embed_dim == 0 || self.ff_dim == 0 {
            return bad("embed_dim and ff_dim must be positive");
        }
        if self.enc_heads == 0 || self.dec_heads == 0 {
            return bad("head counts must be positive");
        }
        if self.embed_dim % self.enc_heads != 0 || self.embed_dim % self.dec_heads != 0 {
            return bad("embed_dim must be divisible by each head count");
        }
        if self.num_enc_blocks == 0 || self.num_dec_blocks == 0 {
            return bad("block counts must be positive");
        }
        if self.vocab_size < 4 {
            return bad("vocab_size must hold the four reserved tokens");
        }
        if self.seq_len < 2 {
            return bad("seq_len must be at least 2");
        }
        let rates = [
            self.attn_dropout_enc,
            self.attn_dropout_dec,
            self.dense_dropout_1,
            self.dense_dropout_2,
        ];
        if rates.iter().any(|r| !(0.0..1.0).contains(r)) {
            return bad("dropout rates must be in [0, 1)");
        }
        Ok(())
    }

    /// Number of trainable scalars for features of dimension `feature_dim`.
    pub fn num_params(&self, feature_dim: usize) -> usize {
        let e = self.embed_dim;
        let ln = |d: usize| 2 * d;
        let mut enc = 0;
        for b in 0..self.num_enc_blocks {
            let d_in = if b == 0 { feature_dim } else { e };
            enc += ln(d_in) + Dense::num_scalars(d_in, e) + Attention::num_scalars(e) + ln(e);
        }
        let block = 2 * Attention::num_scalars(e)
            + 3 * ln(e)
            + Dense::num_scalars(e, self.ff_dim)
            + Dense::num_scalars(self.ff_dim, e);
        let dec = self.vocab_size * e
            + self.seq_len * e
            + self.num_dec_blocks * block
            + Dense::num_scalars(e, self.vocab_size);
        enc + dec
    }
}

/// `P x embed_dim` visual context vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderContext {
    pub vectors: Array2<f64>,
}

/// Per-position next-token distributions, one row per decoder input position.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    pub probs: Array2<f64>,
}

/// Attention weights recorded during a forward pass, `heads x queries x keys`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub encoder: Vec<Array3<f64>>,
    pub decoder_self: Vec<Array3<f64>>,
    pub cross: Vec<Array3<f64>>,
}

struct EncoderBlock {
    norm_in: LayerNorm,
    proj: Dense,
    attn: Attention,
    norm_out: LayerNorm,
}

struct EncoderBlockCache {
    normed: Array2<f64>,
    projected: Array2<f64>,
    attn: AttentionCache,
    norm_in: LayerNormCache,
    norm_out: LayerNormCache,
}

struct DecoderBlock {
    self_attn: Attention,
    norm1: LayerNorm,
    cross_attn: Attention,
    norm2: LayerNorm,
    ffn1: Dense,
    ffn2: Dense,
    norm3: LayerNorm,
}

struct DecoderBlockCache {
    self_attn: AttentionCache,
    norm1: LayerNormCache,
    cross_attn: AttentionCache,
    norm2: LayerNormCache,
    out2: Array2<f64>,
    hidden1: Array2<f64>,
    hidden1_dropped: Array2<f64>,
    hidden1_mask: Option<Array2<f64>>,
    hidden2: Array2<f64>,
    norm3: LayerNormCache,
}

struct DecoderCache {
    ids: Vec<u32>,
    blocks: Vec<DecoderBlockCache>,
    last: Array2<f64>,
    last_mask: Option<Array2<f64>>,
}

/// Encoder + decoder with their parameters.
pub struct Transformer {
    config: ModelConfig,
    feature_dim: usize,
    params: ParamStore,
    encoder: Vec<EncoderBlock>,
    token_embedding: ParamId,
    position_embedding: ParamId,
    decoder: Vec<DecoderBlock>,
    output: Dense,
}

impl std::fmt::Debug for Transformer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Transformer")
            .field("config", &self.config)
            .field("feature_dim", &self.feature_dim)
            .field("num_params", &self.params.num_scalars())
            .finish()
    }
}

impl Clone for Transformer {
    fn clone(&self) -> Self {
        let mut t = Transformer::new(self.config.clone(), self.feature_dim, 0).expect("config already validated");
        t.params = self.params.clone();
        t
    }
}

impl Transformer {
    /// Builds a freshly initialized model. Same seed, same weights.
    pub fn new(config: ModelConfig, feature_dim: usize, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if feature_dim == 0 {
            return Err(ModelError::InvalidConfig("feature_dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let e = config.embed_dim;
        let mut encoder = Vec::with_capacity(config.num_enc_blocks);
        for b in 0..config.num_enc_blocks {
            let d_in = if b == 0 { feature_dim } else { e };
            let name = format!("enc.{b}");
            encoder.push(EncoderBlock {
                norm_in: LayerNorm::new(&mut p, &format!("{name}.norm_in"), d_in),
                proj: Dense::new(&mut p, &mut rng, &format!("{name}.proj"), d_in, e),
                attn: Attention::new(&mut p, &mut rng, &format!("{name}.attn"), e, config.enc_heads, config.attn_dropout_enc),
                norm_out: LayerNorm::new(&mut p, &format!("{name}.norm_out"), e),
            });
        }
        let token_embedding = p.add("dec.token_embedding", small_uniform(&mut rng, config.vocab_size, e));
        let position_embedding = p.add("dec.position_embedding", small_uniform(&mut rng, config.seq_len, e));
        let mut decoder = Vec::with_capacity(config.num_dec_blocks);
        for b in 0..config.num_dec_blocks {
            let name = format!("dec.{b}");
            let h = config.dec_heads;
            let r = config.attn_dropout_dec;
            decoder.push(DecoderBlock {
                self_attn: Attention::new(&mut p, &mut rng, &format!("{name}.self_attn"), e, h, r),
                norm1: LayerNorm::new(&mut p, &format!("{name}.norm1"), e),
                cross_attn: Attention::new(&mut p, &mut rng, &format!("{name}.cross_attn"), e, h, r),
                norm2: LayerNorm::new(&mut p, &format!("{name}.norm2"), e),
                ffn1: Dense::new(&mut p, &mut rng, &format!("{name}.ffn1"), e, config.ff_dim),
                ffn2: Dense::new(&mut p, &mut rng, &format!("{name}.ffn2"), config.ff_dim, e),
                norm3: LayerNorm::new(&mut p, &format!("{name}.norm3"), e),
            });
        }
        let output = Dense::new(&mut p, &mut rng, "dec.output", e, config.vocab_size);
        Ok(Self {
            config,
            feature_dim,
            params: p,
            encoder,
            token_embedding,
            position_embedding,
            decoder,
            output,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces every parameter by the same-named tensor from `source`.
    pub fn load_params(&mut self, source: &ParamStore) -> Result<(), ModelError> {
        if source.len() != self.params.len() {
            return Err(ModelError::Artifact(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                source.len()
            )));
        }
        for id in self.params.ids().collect::<Vec<_>>() {
            let name = self.params.name(id).to_string();
            let src = source
                .id_of(&name)
                .ok_or_else(|| ModelError::Artifact(format!("missing tensor {name}")))?;
            let value = source.get(src);
            if value.dim() != self.params.get(id).dim() {
                return Err(ModelError::Artifact(format!(
                    "tensor {name}: expected shape {:?}, found {:?}",
                    self.params.get(id).dim(),
                    value.dim()
                )));
            }
            self.params.get_mut(id).assign(value);
        }
        Ok(())
    }

    pub fn encode(&self, features: &Array2<f32>, mode: &mut Mode) -> Result<EncoderContext, ModelError> {
        Ok(EncoderContext {
            vectors: self.encode_cached(features, mode)?.0,
        })
    }

    fn encode_cached(
        &self,
        features: &Array2<f32>,
        mode: &mut Mode,
    ) -> Result<(Array2<f64>, Vec<EncoderBlockCache>), ModelError> {
        if features.ncols() != self.feature_dim || features.nrows() == 0 {
            return Err(ModelError::DimensionMismatch {
                what: "features",
                expected: format!("P x {}", self.feature_dim),
                found: format!("{} x {}", features.nrows(), features.ncols()),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("features"));
        }
        let p = &self.params;
        let mut x = features.mapv(f64::from);
        let mut caches = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            let (normed, norm_in) = block.norm_in.forward(p, &x);
            let projected = relu(&block.proj.forward(p, &normed.view()));
            let (a, attn) = block.attn.forward(p, &projected, &projected, None, mode);
            let (y, norm_out) = block.norm_out.forward(p, &(&projected + &a));
            caches.push(EncoderBlockCache {
                normed,
                projected,
                attn,
                norm_in,
                norm_out,
            });
            x = y;
        }
        Ok((x, caches))
    }

    fn encode_backward(&self, g: &mut Grads, caches: &[EncoderBlockCache], dctx: Array2<f64>) {
        let p = &self.params;
        let mut dy = dctx;
        for (block, c) in self.encoder.iter().zip(caches).rev() {
            let dsum = block.norm_out.backward(p, g, &c.norm_out, &dy);
            let (dq, dkv) = block.attn.backward(p, g, &c.attn, &dsum);
            let dproj = dsum + dq + dkv;
            let dpre = relu_backward(dproj, &c.projected);
            let dnormed = block.proj.backward(p, g, &c.normed.view(), &dpre);
            dy = block.norm_in.backward(p, g, &c.norm_in, &dnormed);
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), ModelError> {
        if ids.is_empty() || ids.len() > self.config.seq_len {
            return Err(ModelError::DimensionMismatch {
                what: "token sequence",
                expected: format!("1..={} tokens", self.config.seq_len),
                found: format!("{} tokens", ids.len()),
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn embed_scale(&self) -> f64 {
        (self.config.embed_dim as f64).sqrt()
    }

    /// Scaled token embedding plus learned position embedding, one row per id.
    pub fn embed_tokens(&self, ids: &[u32]) -> Result<Array2<f64>, ModelError> {
        self.check_ids(ids)?;
        let tok = self.params.get(self.token_embedding);
        let pos = self.params.get(self.position_embedding);
        let scale = self.embed_scale();
        let mut out = Array2::zeros((ids.len(), self.config.embed_dim));
        for (i, &id) in ids.iter().enumerate() {
            let mut row = out.row_mut(i);
            row.assign(&(&tok.row(id as usize) * scale + &pos.row(i)));
        }
        Ok(out)
    }

    /// Causal mask that also hides padding keys.
    fn self_attention_mask(ids: &[u32]) -> Array2<bool> {
        let n = ids.len();
        Array2::from_shape_fn((n, n), |(i, j)| j <= i && ids[j] != PAD_ID)
    }

    fn decode_cached(
        &self,
        ids: &[u32],
        context: &Array2<f64>,
        mode: &mut Mode,
    ) -> Result<(Array2<f64>, DecoderCache), ModelError> {
        if context.ncols() != self.config.embed_dim {
            return Err(ModelError::DimensionMismatch {
                what: "encoder context",
                expected: format!("P x {}", self.config.embed_dim),
                found: format!("{} x {}", context.nrows(), context.ncols()),
            });
        }
        let p = &self.params;
        let mut x = self.embed_tokens(ids)?;
        let mask = Self::self_attention_mask(ids);
        let mut blocks = Vec::with_capacity(self.decoder.len());
        for block in &self.decoder {
            let (a1, self_attn) = block.self_attn.forward(p, &x, &x, Some(&mask), mode);
            let (out1, norm1) = block.norm1.forward(p, &(&x + &a1));
            let (a2, cross_attn) = block.cross_attn.forward(p, &out1, context, None, mode);
            let (out2, norm2) = block.norm2.forward(p, &(&out1 + &a2));
            let hidden1 = relu(&block.ffn1.forward(p, &out2.view()));
            let (hidden1_dropped, hidden1_mask) = dropout(hidden1.clone(), self.config.dense_dropout_1, mode);
            let hidden2 = relu(&block.ffn2.forward(p, &hidden1_dropped.view()));
            let (out3, norm3) = block.norm3.forward(p, &(&hidden2 + &out2));
            blocks.push(DecoderBlockCache {
                self_attn,
                norm1,
                cross_attn,
                norm2,
                out2,
                hidden1,
                hidden1_dropped,
                hidden1_mask,
                hidden2,
                norm3,
            });
            x = out3;
        }
        let (last, last_mask) = dropout(x, self.config.dense_dropout_2, mode);
        let logits = self.output.forward(p, &last.view());
        let cache = DecoderCache {
            ids: ids.to_vec(),
            blocks,
            last,
            last_mask,
        };
        Ok((softmax_rows(&logits), cache))
    }

    /// Returns the gradient with respect to the encoder context.
    fn decode_backward(&self, g: &mut Grads, cache: &DecoderCache, dlogits: &Array2<f64>) -> Array2<f64> {
        let p = &self.params;
        let mut dx = dropout_backward(self.output.backward(p, g, &cache.last.view(), dlogits), &cache.last_mask);
        let mut dctx: Option<Array2<f64>> = None;
        for (block, c) in self.decoder.iter().zip(&cache.blocks).rev() {
            let dsum3 = block.norm3.backward(p, g, &c.norm3, &dx);
            let dpre2 = relu_backward(dsum3.clone(), &c.hidden2);
            let dh1 = dropout_backward(block.ffn2.backward(p, g, &c.hidden1_dropped.view(), &dpre2), &c.hidden1_mask);
            let dpre1 = relu_backward(dh1, &c.hidden1);
            let dout2 = dsum3 + block.ffn1.backward(p, g, &c.out2.view(), &dpre1);
            let dsum2 = block.norm2.backward(p, g, &c.norm2, &dout2);
            let (dq2, dkv2) = block.cross_attn.backward(p, g, &c.cross_attn, &dsum2);
            dctx = Some(match dctx {
                Some(acc) => acc + dkv2,
                None => dkv2,
            });
            let dout1 = dsum2 + dq2;
            let dsum1 = block.norm1.backward(p, g, &c.norm1, &dout1);
            let (dq1, dkv1) = block.self_attn.backward(p, g, &c.self_attn, &dsum1);
            dx = dsum1 + dq1 + dkv1;
        }
        let scale = self.embed_scale();
        for (i, &id) in cache.ids.iter().enumerate() {
            let row = dx.row(i);
            let t = g.get_mut(self.token_embedding);
            let mut trow = t.row_mut(id as usize);
            trow.scaled_add(scale, &row);
            let pos = g.get_mut(self.position_embedding);
            let mut prow = pos.row_mut(i);
            prow += &row;
        }
        dctx.expect("at least one decoder block")
    }

    /// Next-token distributions for each position of `input_ids`.
    pub fn decode(&self, input_ids: &[u32], context: &EncoderContext, mode: &mut Mode) -> Result<DecoderOutput, ModelError> {
        Ok(DecoderOutput {
            probs: self.decode_cached(input_ids, &context.vectors, mode)?.0,
        })
    }

    /// Inference-mode forward pass that also returns every attention map.
    pub fn trace(&self, features: &Array2<f32>, input_ids: &[u32]) -> Result<(DecoderOutput, AttentionTrace), ModelError> {
        let mut mode = Mode::Inference;
        let (ctx, enc) = self.encode_cached(features, &mut mode)?;
        let (probs, dec) = self.decode_cached(input_ids, &ctx, &mut mode)?;
        let trace = AttentionTrace {
            encoder: enc.iter().map(|c| c.attn.weights()).collect(),
            decoder_self: dec.blocks.iter().map(|c| c.self_attn.weights()).collect(),
            cross: dec.blocks.iter().map(|c| c.cross_attn.weights()).collect(),
        };
        Ok((DecoderOutput { probs }, trace))
    }

    /// Teacher-forced forward and backward pass for one caption.
    ///
    /// `ids` is the full token sequence; the decoder reads all but the last
    /// position and predicts all but the first. Gradients of
    /// `loss_sum * loss_scale` are added to `grads`.
    pub fn sample_loss_and_grads(
        &self,
        features: &Array2<f32>,
        ids: &[u32],
        loss_scale: f64,
        mode: &mut Mode,
        grads: &mut Grads,
    ) -> Result<SampleStats, ModelError> {
        self.teacher_forced(features, ids, loss_scale, mode, Some(grads))
    }

    /// Teacher-forced loss and accuracy counts without gradients.
    pub fn sample_stats(&self, features: &Array2<f32>, ids: &[u32], mode: &mut Mode) -> Result<SampleStats, ModelError> {
        self.teacher_forced(features, ids, 0.0, mode, None)
    }

    fn teacher_forced(
        &self,
        features: &Array2<f32>,
        ids: &[u32],
        loss_scale: f64,
        mode: &mut Mode,
        grads: Option<&mut Grads>,
    ) -> Result<SampleStats, ModelError> {
        if ids.len() < 2 {
            return Err(ModelError::DimensionMismatch {
                what: "token sequence",
                expected: "at least 2 tokens".into(),
                found: format!("{} tokens", ids.len()),
            });
        }
        let (input, target) = (&ids[..ids.len() - 1], &ids[1..]);
        let (ctx, enc) = self.encode_cached(features, mode)?;
        let (probs, dec) = self.decode_cached(input, &ctx, mode)?;
        let mut stats = SampleStats::default();
        let mut dlogits = Array2::zeros(probs.raw_dim());
        for (i, &t) in target.iter().enumerate() {
            if t == PAD_ID {
                continue;
            }
            let row = probs.row(i);
            stats.loss_sum -= row[t as usize].max(f64::MIN_POSITIVE).ln();
            stats.tokens += 1;
            if argmax(row.iter().copied()) == t as usize {
                stats.correct += 1;
            }
            let mut drow = dlogits.row_mut(i);
            drow.assign(&row);
            drow[t as usize] -= 1.0;
            drow *= loss_scale;
        }
        if let (Some(grads), true) = (grads, stats.tokens > 0) {
            let dctx = self.decode_backward(grads, &dec, &dlogits);
            self.encode_backward(grads, &enc, dctx);
        }
        Ok(stats)
    }

    /// Greedy decoding: starts from `<start>`, appends the most probable
    /// token (never padding or `<start>`) until `<end>` or `max_len - 1`
    /// tokens. Returned ids exclude `<start>` and `<end>`.
    pub fn generate_ids(&self, context: &EncoderContext, max_len: usize) -> Result<Vec<u32>, ModelError> {
        let limit = max_len.min(self.config.seq_len).saturating_sub(1);
        let mut seq = vec![START_ID];
        let mut out = Vec::new();
        while out.len() < limit {
            let probs = self.decode(&seq, context, &mut Mode::Inference)?.probs;
            let last = probs.row(probs.nrows() - 1);
            let next = last
                .iter()
                .enumerate()
                .filter(|(j, _)| *j as u32 != PAD_ID && *j as u32 != START_ID)
                .fold((0usize, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0 as u32;
            if next == END_ID {
                break;
            }
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }
}

/// Loss and accuracy counts for one teacher-forced caption.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SampleStats {
    pub loss_sum: f64,
    pub tokens: usize,
    pub correct: usize,
}

impl SampleStats {
    pub fn merge(self, other: SampleStats) -> SampleStats {
        SampleStats {
            loss_sum: self.loss_sum + other.loss_sum,
            tokens: self.tokens + other.tokens,
            correct: self.correct + other.correct,
        }
    }
}

/// Index of the first maximum.
pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    values
        .enumerate()
        .fold((0usize, f64::NEG_INFINITY), |best, (j, v)| if v > best.1 { (j, v) } else { best })
        .0
}
