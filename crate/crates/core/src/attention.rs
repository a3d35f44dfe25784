//! Dynamic context-aware affective graph attention.
//!
//! For each token, the concepts retrieved from the knowledge base are scored
//! by how related they are to the conversation (scaled assertion confidence
//! times |cosine| to the pooled context representation) and by how
//! emotionally intense they are (VAD-derived), mixed through a tradeoff
//! scalar, softmaxed into attention weights, and summed into a concept
//! vector that enriches the token embedding.

use crate::knowledge::{ConceptTuple, VadEntry};
use crate::tensor::{concat, embedding_lookup, stack_rows, Tensor};

/// Per-concept score breakdown for one token, in retrieval order. Exposed
/// for auditing through the `inspect-knowledge` command.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ConceptScores {
    pub concepts: Vec<String>,
    pub rel: Vec<f64>,
    pub aff: Vec<f64>,
    pub w: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// Relatedness/affectiveness tradeoff: either fixed from configuration or a
/// trained scalar squashed through a sigmoid so the effective value stays
/// in [0, 1].
#[derive(Debug, Clone)]
pub enum LambdaParam {
    Fixed(f64),
    Learned(Tensor),
}

impl LambdaParam {
    /// The effective lambda as a single-element tensor.
    pub fn effective(&self) -> Tensor {
        match self {
            LambdaParam::Fixed(v) => {
                assert!((0.0..=1.0).contains(v), "fixed lambda {v} outside [0, 1]");
                Tensor::scalar(*v)
            }
            LambdaParam::Learned(raw) => raw.sigmoid(),
        }
    }
}

/// Sentence representation via hierarchical pooling: elementwise max over
/// every n-gram window (n <= 3) lying fully inside the unmasked span, then
/// the mean of all window vectors. An all-pad utterance maps to the zero
/// vector (and is excluded from context averaging by the caller).
pub fn sentence_repr(token_embeddings: &Tensor, mask: &[bool]) -> Tensor {
    token_embeddings.hier_pool(mask, 3)
}

/// Context representation: the mean of the available sentence
/// representations (context utterances and the response itself); `None`
/// marks an all-pad placeholder, which contributes nothing.
pub fn context_repr(sentence_reprs: &[Option<Tensor>]) -> Tensor {
    let present: Vec<Tensor> = sentence_reprs.iter().flatten().cloned().collect();
    assert!(
        !present.is_empty(),
        "context_repr: no real utterances (the response always has one real token)"
    );
    if present.len() == 1 {
        return present[0].clone();
    }
    stack_rows(&present).mean_rows()
}

/// Min-max scaling over a token's concept list. When all values coincide
/// (including the single-concept case) every entry maps to 1.0, so a lone
/// concept keeps its full confidence weight.
pub fn minmax_scale(values: &[f64]) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max - min <= 0.0 {
        return vec![1.0; values.len()];
    }
    values.iter().map(|v| (v - min) / (max - min)).collect()
}

/// Relatedness per concept: min-max scaled confidence times the absolute
/// cosine similarity between the concept embedding row and the context
/// representation. Output is a `[K]` tensor inside the graph (gradients
/// reach both the concept embeddings and, through CR, the word embeddings).
pub fn relatedness(confidences: &[f64], concept_rows: &Tensor, cr: &Tensor) -> Tensor {
    let k = confidences.len();
    assert!(k >= 1, "relatedness: empty concept list");
    assert_eq!(
        concept_rows.shape()[0],
        k,
        "relatedness: {} confidences, {:?} rows",
        k,
        concept_rows.shape()
    );
    let scaled = minmax_scale(confidences);
    let d = concept_rows.shape()[1];
    let per_concept: Vec<Tensor> = (0..k)
        .map(|i| {
            let row = concept_rows.narrow_rows(i, 1).reshape(&[d]);
            cr.cosine_similarity(&row).abs().scale(scaled[i])
        })
        .collect();
    concat(&per_concept, 0)
}

/// Raw emotion intensity of a VAD entry: the Euclidean norm of
/// (valence - 1/2, arousal / 2).
pub fn raw_affect_intensity(vad: &VadEntry) -> f64 {
    let dv = vad.valence - 0.5;
    let da = vad.arousal / 2.0;
    (dv * dv + da * da).sqrt()
}

/// Affectiveness per concept: raw intensities min-max scaled over the
/// token's concept list. Concepts missing from the lexicon take the mid
/// value 0.5 directly and are excluded from the min-max statistics.
pub fn affectiveness(vads: &[Option<VadEntry>]) -> Vec<f64> {
    let raw: Vec<Option<f64>> = vads
        .iter()
        .map(|v| v.as_ref().map(raw_affect_intensity))
        .collect();
    let present: Vec<f64> = raw.iter().flatten().copied().collect();
    if present.is_empty() {
        return vec![0.5; vads.len()];
    }
    let scaled = minmax_scale(&present);
    let mut iter = scaled.into_iter();
    raw.iter()
        .map(|r| match r {
            Some(_) => iter.next().unwrap(),
            None => 0.5,
        })
        .collect()
}

/// Concept attention for one token: w_k = lambda * rel_k + (1 - lambda) *
/// aff_k, alpha = softmax(w) over the token's concepts.
pub struct ConceptAttention {
    pub w: Tensor,
    pub alpha: Tensor,
}

pub fn combine_and_attend(rel: &Tensor, aff: &[f64], lambda: &LambdaParam) -> ConceptAttention {
    let k = rel.len();
    assert_eq!(
        k,
        aff.len(),
        "combine_and_attend: {} rel vs {} aff",
        k,
        aff.len()
    );
    let lam = lambda.effective();
    let one_minus = lam.affine(-1.0, 1.0);
    let aff_t = Tensor::from_vec(&[k], aff.to_vec());
    let w = rel.mul_scalar(&lam).add(&aff_t.mul_scalar(&one_minus));
    let alpha = w.masked_softmax(None);
    ConceptAttention { w, alpha }
}

/// Attention-weighted sum of concept embedding rows: c(t) = sum_k alpha_k c_k.
pub fn concept_repr(alpha: &Tensor, concept_rows: &Tensor) -> Tensor {
    let k = alpha.len();
    assert_eq!(concept_rows.shape()[0], k);
    let d = concept_rows.shape()[1];
    alpha.reshape(&[1, k]).matmul(concept_rows).reshape(&[d])
}

/// Fallback concept representation for tokens with no retrieved concepts:
/// the mean of the entire concept embedding table, or zeros when the table
/// itself is empty (e.g. knowledge fraction 0).
pub fn fallback_concept_repr(concept_table: &Tensor, embed_dim: usize) -> Tensor {
    if concept_table.shape()[0] == 0 {
        Tensor::zeros(&[embed_dim])
    } else {
        concept_table.mean_rows()
    }
}

/// Concept-enriched token representation: a linear map of the concatenated
/// token and concept vectors, t_hat = W [t; c(t)] with W of shape [d, 2d].
pub fn enrich(token: &Tensor, concept: &Tensor, w: &Tensor) -> Tensor {
    let d = token.len();
    assert_eq!(
        concept.len(),
        d,
        "enrich: token {d} vs concept {}",
        concept.len()
    );
    assert_eq!(
        w.shape(),
        &[d, 2 * d],
        "enrich: W shape {:?}, expected [{}, {}]",
        w.shape(),
        d,
        2 * d
    );
    let cat = concat(&[token.clone(), concept.clone()], 0).reshape(&[2 * d, 1]);
    w.matmul(&cat).reshape(&[d])
}

/// Full knowledge path for one token: retrieval output -> (c(t), scores).
/// Tokens with no concepts use the table-mean fallback and report no scores.
pub fn attend_token(
    tuples: &[ConceptTuple],
    concept_table: &Tensor,
    cr: &Tensor,
    lambda: &LambdaParam,
    fallback: &Tensor,
) -> (Tensor, Option<ConceptScores>) {
    if tuples.is_empty() {
        return (fallback.clone(), None);
    }
    let ids: Vec<usize> = tuples.iter().map(|t| t.concept_id).collect();
    let confidences: Vec<f64> = tuples.iter().map(|t| t.confidence).collect();
    let vads: Vec<Option<VadEntry>> = tuples.iter().map(|t| t.vad.clone()).collect();
    let rows = embedding_lookup(concept_table, &ids);
    let rel = relatedness(&confidences, &rows, cr);
    let aff = affectiveness(&vads);
    let attn = combine_and_attend(&rel, &aff, lambda);
    let repr = concept_repr(&attn.alpha, &rows);
    let scores = ConceptScores {
        concepts: tuples.iter().map(|t| t.concept.clone()).collect(),
        rel: rel.to_vec(),
        aff,
        w: attn.w.to_vec(),
        alpha: attn.alpha.to_vec(),
    };
    (repr, Some(scores))
}
