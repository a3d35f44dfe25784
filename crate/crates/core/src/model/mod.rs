//! The full network: embedding layers with knowledge enrichment,
//! hierarchical self-attention over context utterances, response
//! self-attention with cross-attention to the encoded context, and the
//! max-pool classifier head.

pub mod checkpoint;
pub mod gradcheck;

use thiserror::Error;

use crate::attention::{self, ConceptScores, LambdaParam};
use crate::data::{EncodedUtterance, Example, Vocabulary, PAD_ID};
use crate::knowledge::KnowledgeIndex;
use crate::tensor::rng::SeededRng;
use crate::tensor::{
    concat, embedding_lookup, stack_rows, weighted_cross_entropy, Parameter, Tensor,
};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

/// Relatedness/affectiveness tradeoff configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaMode {
    Fixed(f64),
    /// Trained scalar, sigmoid-squashed; the value is the initial effective
    /// lambda.
    Learned(f64),
}

/// Architecture hyper-parameters; everything the parameter count depends on.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// M: number of context utterances.
    pub context_len: usize,
    /// m: tokens per utterance after clip/pad.
    pub utterance_len: usize,
    /// d: embedding size (even, divisible by the head count).
    pub embed_dim: usize,
    /// p: feed-forward hidden size.
    pub ff_hidden: usize,
    /// h: attention head count.
    pub heads: usize,
    /// q: number of emotion classes.
    pub classes: usize,
    pub word_vocab: usize,
    pub concept_vocab: usize,
    pub lambda: LambdaMode,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let mut problems = Vec::new();
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            problems.push(format!(
                "embed_dim {} must be even and positive",
                self.embed_dim
            ));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads.max(1)) {
            problems.push(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.utterance_len < 1 {
            problems.push("utterance_len must be >= 1".into());
        }
        if self.classes < 2 {
            problems.push(format!("classes {} must be >= 2", self.classes));
        }
        if self.ff_hidden == 0 {
            problems.push("ff_hidden must be >= 1".into());
        }
        if self.word_vocab < 2 {
            problems.push("word_vocab must include PAD and UNK".into());
        }
        let (LambdaMode::Fixed(v) | LambdaMode::Learned(v)) = self.lambda;
        if !(0.0..=1.0).contains(&v) {
            problems.push(format!("lambda value {v} outside [0, 1]"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ModelError::InvalidConfig(problems.join("; ")))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Closed-form trainable scalar count; checked against the actual
    /// parameter list in tests.
    pub fn parameter_count(&self) -> usize {
        let d = self.embed_dim;
        let p = self.ff_hidden;
        let q = self.classes;
        let full_block = 4 * d * d + 2 * d + (d * p + p + p * d + d) + 2 * d;
        let response_block = 4 * d * d + 2 * d;
        let lambda = usize::from(matches!(self.lambda, LambdaMode::Learned(_)));
        self.word_vocab * d
            + self.concept_vocab * d
            + d * 2 * d
            + 3 * full_block
            + response_block
            + d * q
            + q
            + lambda
    }
}

/// Sinusoidal positional encoding: PE[pos, 2i] = sin(pos / 10000^(2i/d)),
/// PE[pos, 2i+1] = cos(pos / 10000^(2i/d)).
pub fn positional_encoding(positions: usize, dim: usize) -> Tensor {
    assert!(
        dim.is_multiple_of(2),
        "positional encoding requires an even dimension, got {dim}"
    );
    let mut data = vec![0.0; positions * dim];
    for pos in 0..positions {
        for i in 0..dim / 2 {
            let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[pos * dim + 2 * i] = rate.sin();
            data[pos * dim + 2 * i + 1] = rate.cos();
        }
    }
    Tensor::from_vec(&[positions, dim], data)
}

struct ParamBuilder<'a> {
    params: Vec<Parameter>,
    rng: &'a mut SeededRng,
}

impl<'a> ParamBuilder<'a> {
    fn new(rng: &'a mut SeededRng) -> Self {
        ParamBuilder {
            params: Vec::new(),
            rng,
        }
    }

    fn register(&mut self, name: &str, tensor: Tensor, frozen_rows: Vec<usize>) -> Tensor {
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params
            .push(Parameter::new(name, tensor.clone()).with_frozen_rows(frozen_rows));
        tensor
    }

    /// Uniform in +-sqrt(6 / (rows + cols)).
    fn xavier(&mut self, name: &str, rows: usize, cols: usize) -> Tensor {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| self.rng.uniform(-limit, limit))
            .collect();
        self.register(name, Tensor::leaf(&[rows, cols], data), Vec::new())
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        self.register(name, Tensor::leaf(shape, vec![0.0; n]), Vec::new())
    }

    fn ones(&mut self, name: &str, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        self.register(name, Tensor::leaf(shape, vec![1.0; n]), Vec::new())
    }

    fn with_data(
        &mut self,
        name: &str,
        shape: &[usize],
        data: Vec<f64>,
        frozen_rows: Vec<usize>,
    ) -> Tensor {
        self.register(name, Tensor::leaf(shape, data), frozen_rows)
    }
}

struct MultiHead {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    heads: usize,
    head_dim: usize,
}

impl MultiHead {
    fn new(b: &mut ParamBuilder, prefix: &str, d: usize, heads: usize) -> MultiHead {
        MultiHead {
            wq: b.xavier(&format!("{prefix}.wq"), d, d),
            wk: b.xavier(&format!("{prefix}.wk"), d, d),
            wv: b.xavier(&format!("{prefix}.wv"), d, d),
            wo: b.xavier(&format!("{prefix}.wo"), d, d),
            heads,
            head_dim: d / heads,
        }
    }

    /// Scaled dot-product attention with key-side masking, heads
    /// concatenated and projected back to d.
    fn attend(&self, queries_in: &Tensor, keys_values_in: &Tensor, key_mask: &[bool]) -> Tensor {
        let q = queries_in.matmul(&self.wq);
        let k = keys_values_in.matmul(&self.wk);
        let v = keys_values_in.matmul(&self.wv);
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * self.head_dim;
            let qi = q.narrow_cols(start, self.head_dim);
            let ki = k.narrow_cols(start, self.head_dim);
            let vi = v.narrow_cols(start, self.head_dim);
            let scores = qi.matmul(&ki.transpose()).scale(scale);
            let attn = scores.masked_softmax(Some(key_mask));
            heads.push(attn.matmul(&vi));
        }
        concat(&heads, 1).matmul(&self.wo)
    }
}

struct FeedForward {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl FeedForward {
    fn new(b: &mut ParamBuilder, prefix: &str, d: usize, p: usize) -> FeedForward {
        FeedForward {
            w1: b.xavier(&format!("{prefix}.w1"), d, p),
            b1: b.zeros(&format!("{prefix}.b1"), &[p]),
            w2: b.xavier(&format!("{prefix}.w2"), p, d),
            b2: b.zeros(&format!("{prefix}.b2"), &[d]),
        }
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.w1)
            .add_bias(&self.b1)
            .relu()
            .matmul(&self.w2)
            .add_bias(&self.b2)
    }
}

struct LayerNormParams {
    gain: Tensor,
    bias: Tensor,
}

impl LayerNormParams {
    fn new(b: &mut ParamBuilder, prefix: &str, d: usize) -> LayerNormParams {
        LayerNormParams {
            gain: b.ones(&format!("{prefix}.gain"), &[d]),
            bias: b.zeros(&format!("{prefix}.bias"), &[d]),
        }
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        x.layer_norm(&self.gain, &self.bias, LN_EPS)
    }
}

/// Post-norm transformer block: MH -> residual -> LN -> FF -> residual -> LN.
struct EncoderBlock {
    mh: MultiHead,
    ln1: LayerNormParams,
    ff: FeedForward,
    ln2: LayerNormParams,
}

impl EncoderBlock {
    fn new(b: &mut ParamBuilder, prefix: &str, d: usize, p: usize, heads: usize) -> EncoderBlock {
        EncoderBlock {
            mh: MultiHead::new(b, &format!("{prefix}.mh"), d, heads),
            ln1: LayerNormParams::new(b, &format!("{prefix}.ln1"), d),
            ff: FeedForward::new(b, &format!("{prefix}.ff"), d, p),
            ln2: LayerNormParams::new(b, &format!("{prefix}.ln2"), d),
        }
    }

    fn forward(&self, x: &Tensor, mask: &[bool]) -> Tensor {
        let attended = self.mh.attend(x, x, mask);
        let x1 = self.ln1.apply(&x.add(&attended));
        self.ln2.apply(&x1.add(&self.ff.apply(&x1)))
    }

    fn forward_cross(&self, queries: &Tensor, context: &Tensor, context_mask: &[bool]) -> Tensor {
        let attended = self.mh.attend(queries, context, context_mask);
        let x1 = self.ln1.apply(&queries.add(&attended));
        self.ln2.apply(&x1.add(&self.ff.apply(&x1)))
    }

    /// Degenerate path when there are no real context keys: the
    /// feed-forward sublayer alone.
    fn forward_ff_only(&self, x: &Tensor) -> Tensor {
        self.ln2.apply(&x.add(&self.ff.apply(x)))
    }
}

/// Response self-attention sublayer (no feed-forward).
struct ResponseBlock {
    mh: MultiHead,
    ln: LayerNormParams,
}

impl ResponseBlock {
    fn new(b: &mut ParamBuilder, prefix: &str, d: usize, heads: usize) -> ResponseBlock {
        ResponseBlock {
            mh: MultiHead::new(b, &format!("{prefix}.mh"), d, heads),
            ln: LayerNormParams::new(b, &format!("{prefix}.ln"), d),
        }
    }

    fn forward(&self, x: &Tensor, mask: &[bool]) -> Tensor {
        let attended = self.mh.attend(x, x, mask);
        self.ln.apply(&x.add(&attended))
    }
}

/// Optional pretrained embedding matrices (row-major, aligned with the word
/// vocabulary / concept list). Missing tables fall back to N(0, 0.1).
#[derive(Default)]
pub struct EmbeddingInit {
    pub word: Option<Vec<f64>>,
    pub concept: Option<Vec<f64>>,
}

/// Per-batch forward context: knowledge retrieval, the vocabulary for
/// id -> token decoding, and the shared fallback concept vector.
pub struct BatchContext<'a> {
    pub kb: &'a KnowledgeIndex,
    pub vocab: &'a Vocabulary,
    fallback: Tensor,
}

/// One response token's knowledge audit entry.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TokenInspection {
    pub token: String,
    pub fallback: bool,
    pub scores: Option<ConceptScores>,
}

pub struct KetModel {
    cfg: ModelConfig,
    word_embed: Tensor,
    concept_embed: Tensor,
    enrich_w: Tensor,
    utterance_block: EncoderBlock,
    context_block: EncoderBlock,
    cross_block: EncoderBlock,
    response_block: ResponseBlock,
    head_w: Tensor,
    head_b: Tensor,
    lambda: LambdaParam,
    pos_enc: Tensor,
    params: Vec<Parameter>,
}

impl KetModel {
    pub fn new(
        cfg: ModelConfig,
        init: EmbeddingInit,
        rng: &mut SeededRng,
    ) -> Result<KetModel, ModelError> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let mut b = ParamBuilder::new(rng);

        let word_data = match init.word {
            Some(data) => {
                assert_eq!(data.len(), cfg.word_vocab * d, "word embedding init size");
                data
            }
            None => crate::data::random_embedding_matrix(cfg.word_vocab, d, true, b.rng),
        };
        let mut word_data = word_data;
        word_data[0..d].fill(0.0); // PAD row stays zero and frozen
        let word_embed = b.with_data("word_embed", &[cfg.word_vocab, d], word_data, vec![PAD_ID]);

        let concept_data = match init.concept {
            Some(data) => {
                assert_eq!(
                    data.len(),
                    cfg.concept_vocab * d,
                    "concept embedding init size"
                );
                data
            }
            None => crate::data::random_embedding_matrix(cfg.concept_vocab, d, false, b.rng),
        };
        let concept_embed = b.with_data(
            "concept_embed",
            &[cfg.concept_vocab, d],
            concept_data,
            Vec::new(),
        );

        let enrich_w = b.xavier("enrich.w", d, 2 * d);
        let utterance_block = EncoderBlock::new(&mut b, "utt", d, cfg.ff_hidden, cfg.heads);
        let context_block = EncoderBlock::new(&mut b, "ctx", d, cfg.ff_hidden, cfg.heads);
        let cross_block = EncoderBlock::new(&mut b, "cross", d, cfg.ff_hidden, cfg.heads);
        let response_block = ResponseBlock::new(&mut b, "resp", d, cfg.heads);
        let head_w = b.xavier("head.w", d, cfg.classes);
        let head_b = b.zeros("head.b", &[cfg.classes]);

        let lambda = match cfg.lambda {
            LambdaMode::Fixed(v) => LambdaParam::Fixed(v),
            LambdaMode::Learned(v) => {
                // logit of the initial effective value
                let v = v.clamp(1e-6, 1.0 - 1e-6);
                let raw = (v / (1.0 - v)).ln();
                LambdaParam::Learned(b.with_data("lambda.raw", &[1], vec![raw], Vec::new()))
            }
        };

        let pos_enc = positional_encoding(cfg.utterance_len, d);
        Ok(KetModel {
            params: b.params,
            word_embed,
            concept_embed,
            enrich_w,
            utterance_block,
            context_block,
            cross_block,
            response_block,
            head_w,
            head_b,
            lambda,
            pos_enc,
            cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn word_table(&self) -> &Tensor {
        &self.word_embed
    }

    pub fn concept_table(&self) -> &Tensor {
        &self.concept_embed
    }

    pub fn lambda(&self) -> &LambdaParam {
        &self.lambda
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.tensor.zero_grad();
        }
    }

    /// Snapshot of all parameter buffers, in registration order.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.tensor.to_vec()).collect()
    }

    pub fn restore(&self, snapshot: &[Vec<f64>]) {
        assert_eq!(snapshot.len(), self.params.len());
        for (p, data) in self.params.iter().zip(snapshot) {
            p.tensor.set_data(data);
        }
    }

    pub fn batch_context<'a>(
        &self,
        kb: &'a KnowledgeIndex,
        vocab: &'a Vocabulary,
    ) -> BatchContext<'a> {
        BatchContext {
            kb,
            vocab,
            fallback: attention::fallback_concept_repr(&self.concept_embed, self.cfg.embed_dim),
        }
    }

    /// Class probabilities for one example.
    pub fn forward(&self, example: &Example, ctx: &BatchContext) -> Tensor {
        assert_eq!(
            example.context.len(),
            self.cfg.context_len,
            "example has {} context utterances, model expects {}",
            example.context.len(),
            self.cfg.context_len
        );
        assert!(
            example.response.has_real_tokens(),
            "response must contain at least one real token"
        );
        let cr = self.conversation_repr(example);
        let enriched_response = self.embed_utterance(&example.response, &cr, ctx);
        let encoded_context = self.encode_context(&example.context, &cr, ctx);
        let decoded = self.decode_response(
            &enriched_response,
            &example.response.mask,
            encoded_context.as_ref(),
        );
        self.classify(&decoded, &example.response.mask)
    }

    /// Pooled conversation representation from plain word embeddings of the
    /// context window plus the response.
    pub fn conversation_repr(&self, example: &Example) -> Tensor {
        let srs: Vec<Option<Tensor>> = example
            .context
            .iter()
            .chain(std::iter::once(&example.response))
            .map(|utt| {
                utt.has_real_tokens().then(|| {
                    let rows = embedding_lookup(&self.word_embed, &utt.ids);
                    attention::sentence_repr(&rows, &utt.mask)
                })
            })
            .collect();
        attention::context_repr(&srs)
    }

    /// Position-encoded, knowledge-enriched utterance embedding `[m, d]`.
    /// Pad positions map to the zero vector and stay masked downstream.
    pub fn embed_utterance(
        &self,
        utt: &EncodedUtterance,
        cr: &Tensor,
        ctx: &BatchContext,
    ) -> Tensor {
        let d = self.cfg.embed_dim;
        let words = embedding_lookup(&self.word_embed, &utt.ids)
            .add(&self.pos_enc)
            .mask_rows(&utt.mask);
        let concept_vecs: Vec<Tensor> = utt
            .ids
            .iter()
            .zip(&utt.mask)
            .map(|(&id, &real)| {
                if !real {
                    return Tensor::zeros(&[d]);
                }
                let token = ctx.vocab.decode(id);
                let tuples = ctx.kb.retrieve(token);
                attention::attend_token(
                    tuples,
                    &self.concept_embed,
                    cr,
                    &self.lambda,
                    &ctx.fallback,
                )
                .0
            })
            .collect();
        let concepts = stack_rows(&concept_vecs);
        concat(&[words, concepts], 1).matmul(&self.enrich_w.transpose())
    }

    /// Two-level encoding of the context: the utterance block applied per
    /// utterance, results concatenated along the position axis, then the
    /// context block over all M*m positions. Returns None when the window
    /// holds no real token (including M = 0), in which case the decoder
    /// skips cross-attention.
    pub fn encode_context(
        &self,
        context: &[EncodedUtterance],
        cr: &Tensor,
        ctx: &BatchContext,
    ) -> Option<(Tensor, Vec<bool>)> {
        if context.is_empty() {
            return None;
        }
        let (m, d) = (self.cfg.utterance_len, self.cfg.embed_dim);
        let mut flat_mask = Vec::with_capacity(context.len() * m);
        let mut per_utterance = Vec::with_capacity(context.len());
        for utt in context {
            flat_mask.extend_from_slice(&utt.mask);
            if utt.has_real_tokens() {
                let enriched = self.embed_utterance(utt, cr, ctx);
                per_utterance.push(self.utterance_block.forward(&enriched, &utt.mask));
            } else {
                per_utterance.push(Tensor::zeros(&[m, d]));
            }
        }
        if !flat_mask.iter().any(|k| *k) {
            return None;
        }
        let stacked = concat(&per_utterance, 0);
        Some((self.context_block.forward(&stacked, &flat_mask), flat_mask))
    }

    /// Response self-attention, then cross-attention over the encoded
    /// context (or the feed-forward sublayer alone when no context exists).
    pub fn decode_response(
        &self,
        enriched_response: &Tensor,
        response_mask: &[bool],
        context: Option<&(Tensor, Vec<bool>)>,
    ) -> Tensor {
        let x = self
            .response_block
            .forward(enriched_response, response_mask);
        match context {
            Some((encoded, mask)) => self.cross_block.forward_cross(&x, encoded, mask),
            None => self.cross_block.forward_ff_only(&x),
        }
    }

    /// Max-pool over real response positions, linear head, softmax.
    pub fn classify(&self, decoded: &Tensor, response_mask: &[bool]) -> Tensor {
        let d = self.cfg.embed_dim;
        let pooled = decoded.masked_max_pool(response_mask).reshape(&[1, d]);
        pooled
            .matmul(&self.head_w)
            .add_bias(&self.head_b)
            .masked_softmax(None)
            .reshape(&[self.cfg.classes])
    }

    /// Mean class-weighted cross-entropy over a batch; also returns the
    /// per-example probability rows for metric collection.
    pub fn batch_loss(
        &self,
        examples: &[Example],
        ctx: &BatchContext,
        class_weights: &[f64],
    ) -> (Tensor, Vec<Vec<f64>>) {
        assert!(!examples.is_empty(), "batch_loss: empty batch");
        let probs: Vec<Tensor> = examples.iter().map(|e| self.forward(e, ctx)).collect();
        let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
        let matrix = stack_rows(&probs);
        let loss = weighted_cross_entropy(&matrix, &labels, class_weights);
        (loss, probs.iter().map(Tensor::to_vec).collect())
    }

    /// Argmax prediction (lowest class id wins ties) plus probabilities.
    pub fn predict(&self, example: &Example, ctx: &BatchContext) -> (usize, Vec<f64>) {
        let probs = self.forward(example, ctx).to_vec();
        let mut best = 0;
        for (c, p) in probs.iter().enumerate() {
            if *p > probs[best] {
                best = c;
            }
        }
        (best, probs)
    }

    /// Per-token concept attention audit for the response utterance of an
    /// example. Stopword tokens are skipped; tokens without concepts report
    /// the table-mean fallback.
    pub fn inspect_response(&self, example: &Example, ctx: &BatchContext) -> Vec<TokenInspection> {
        let cr = self.conversation_repr(example);
        let mut out = Vec::new();
        for (&id, &real) in example.response.ids.iter().zip(&example.response.mask) {
            if !real {
                continue;
            }
            let token = ctx.vocab.decode(id).to_string();
            if ctx.kb.is_stopword(&token) {
                continue;
            }
            let tuples = ctx.kb.retrieve(&token);
            let (_, scores) = attention::attend_token(
                tuples,
                &self.concept_embed,
                &cr,
                &self.lambda,
                &ctx.fallback,
            );
            out.push(TokenInspection {
                token,
                fallback: scores.is_none(),
                scores,
            });
        }
        out
    }
}
