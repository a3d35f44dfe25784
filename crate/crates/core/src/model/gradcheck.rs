//! Finite-difference verification of the full model and of every
//! differentiable tensor operation, as driven by the `gradcheck` command.

use std::collections::{HashMap, HashSet};

use serde::Serialize;

use super::{EmbeddingInit, KetModel, LambdaMode, ModelConfig};
use crate::data::{make_examples, Conversation, Example, Utterance, Vocabulary};
use crate::knowledge::{index_from_assertions, Assertion, KnowledgeIndex, VadEntry};
use crate::tensor::check::{relative_error, DEFAULT_STEP};
use crate::tensor::rng::SeededRng;
use crate::tensor::{concat, embedding_lookup, stack_rows, weighted_cross_entropy, Tensor};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub group: String,
    pub max_rel_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub op_tolerance: f64,
    pub model_tolerance: f64,
    pub ops: Vec<GroupReport>,
    pub model_groups: Vec<GroupReport>,
    pub pass: bool,
}

/// Run the whole suite. `corrupt_backward` is a test hook that perturbs one
/// analytic gradient before comparison, proving the detector actually fires.
pub fn run(seed: u64, corrupt_backward: bool) -> GradcheckReport {
    let ops = op_suite(seed);
    let model_groups = model_suite(seed, corrupt_backward);
    let pass = ops.iter().all(|g| g.pass) && model_groups.iter().all(|g| g.pass);
    GradcheckReport {
        op_tolerance: OP_TOLERANCE,
        model_tolerance: MODEL_TOLERANCE,
        ops,
        model_groups,
        pass,
    }
}

fn rand_leaf(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    // keep values away from relu/abs kinks at 0
    let data = (0..n)
        .map(|_| {
            let v = rng.uniform(0.1, 1.0);
            if rng.uniform(0.0, 1.0) < 0.5 {
                -v
            } else {
                v
            }
        })
        .collect();
    Tensor::leaf(shape, data)
}

/// Reduce an op output to a scalar through a fixed random weighting, so
/// asymmetric gradient errors cannot cancel.
fn reduce(t: &Tensor, weights: &Tensor) -> Tensor {
    let n = t.len();
    t.reshape(&[1, n]).matmul(weights).reshape(&[1])
}

/// Finite-difference check of `build` against its backward pass over the
/// given leaves, reporting the worst relative error.
fn fd_max_rel<F: Fn() -> Tensor>(build: F, leaves: &[Tensor], corrupt: bool) -> f64 {
    for leaf in leaves {
        leaf.zero_grad();
    }
    let loss = build();
    loss.backward();
    let mut analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.len()]))
        .collect();
    if corrupt {
        analytic[0][0] += 0.05;
    }
    let mut max_rel: f64 = 0.0;
    for (leaf, grads) in leaves.iter().zip(&analytic) {
        for (i, &analytic_grad) in grads.iter().enumerate() {
            let original = leaf.value_at(i);
            leaf.set_value(i, original + DEFAULT_STEP);
            let up = build().item();
            leaf.set_value(i, original - DEFAULT_STEP);
            let down = build().item();
            leaf.set_value(i, original);
            let numeric = (up - down) / (2.0 * DEFAULT_STEP);
            max_rel = max_rel.max(relative_error(analytic_grad, numeric));
        }
    }
    max_rel
}

/// One finite-difference scenario per differentiable operation.
pub fn op_suite(seed: u64) -> Vec<GroupReport> {
    let mut rng = SeededRng::new(seed);
    let mut out = Vec::new();
    let mut check = |name: &str, max_rel: f64| {
        out.push(GroupReport {
            group: format!("op.{name}"),
            max_rel_error: max_rel,
            pass: max_rel < OP_TOLERANCE,
        });
    };

    {
        let a = rand_leaf(&mut rng, &[3, 4]);
        let b = rand_leaf(&mut rng, &[4, 2]);
        let w = rand_leaf(&mut rng, &[6, 1]);
        check(
            "matmul",
            fd_max_rel(|| reduce(&a.matmul(&b), &w), &[a.clone(), b.clone()], false),
        );
    }
    {
        let a = rand_leaf(&mut rng, &[2, 3]);
        let b = rand_leaf(&mut rng, &[2, 3]);
        let w = rand_leaf(&mut rng, &[6, 1]);
        check(
            "add",
            fd_max_rel(|| reduce(&a.add(&b), &w), &[a.clone(), b.clone()], false),
        );
    }
    {
        let x = rand_leaf(&mut rng, &[3, 4]);
        let b = rand_leaf(&mut rng, &[4]);
        let w = rand_leaf(&mut rng, &[12, 1]);
        check(
            "add_bias",
            fd_max_rel(
                || reduce(&x.add_bias(&b), &w),
                &[x.clone(), b.clone()],
                false,
            ),
        );
    }
    {
        let x = rand_leaf(&mut rng, &[5]);
        let w = rand_leaf(&mut rng, &[5, 1]);
        check(
            "scale_affine",
            fd_max_rel(
                || reduce(&x.scale(1.7).affine(-0.4, 0.9), &w),
                std::slice::from_ref(&x),
                false,
            ),
        );
    }
    {
        let x = rand_leaf(&mut rng, &[4]);
        let s = rand_leaf(&mut rng, &[1]);
        let w = rand_leaf(&mut rng, &[4, 1]);
        check(
            "mul_scalar",
            fd_max_rel(
                || reduce(&x.mul_scalar(&s), &w),
                &[x.clone(), s.clone()],
                false,
            ),
        );
    }
    {
        let x = rand_leaf(&mut rng, &[3, 4]);
        let w = rand_leaf(&mut rng, &[12, 1]);
        check(
            "transpose",
            fd_max_rel(
                || reduce(&x.transpose(), &w),
                std::slice::from_ref(&x),
                false,
            ),
        );
    }
    {
        let x = rand_leaf(&mut rng, &[4, 5]);
        let w = rand_leaf(&mut rng, &[8, 1]);
        check(
            "narrow_cols",
            fd_max_rel(
                || reduce(&x.narrow_cols(2, 2), &w),
                std::slice::from_ref(&x),
                false,
            ),
        );
    }
    {
        let x = rand_leaf(&mut rng, &[5, 3]);
        let w = rand_leaf(&mut rng, &[6, 1]);
        check(
            "narrow_rows",
            fd_max_rel(
                || reduce(&x.narrow_rows(1, 2), &w),
                std::slice::from_ref(&x),
                false,
            ),
        );
    }
    {
        let a = rand_leaf(&mut rng, &[2, 3]);
        let b = rand_leaf(&mut rng, &[2, 2]);
        let w = rand_leaf(&mut rng, &[10, 1]);
        check(
            "concat_cols",
            fd_max_rel(
                || reduce(&concat(&[a.clone(), b.clone()], 1), &w),
                &[a.clone(), b.clone()],
                false,
            ),
        );
    }
    {
        let a = rand_leaf(&mut rng, &[2, 3]);
        let b = rand_leaf(&mut rng, &[1, 3]);
        let w = rand_leaf(&mut rng, &[9, 1]);
        check(
            "concat_rows",
            fd_max_rel(
                || reduce(&concat(&[a.clone(), b.clone()], 0), &w),
                &[a.clone(), b.clone()],
                false,
            ),
        );
    }
    {
        let a = rand_leaf(&mut rng, &[4]);
        let b = rand_leaf(&mut rng, &[4]);
        let w = rand_leaf(&mut rng, &[8, 1]);
        check(
            "stack_rows",
            fd_max_rel(
                || reduce(&stack_rows(&[a.clone(), b.clone()]), &w),
                &[a.clone(), b.clone()],
                false,
            ),
        );
    }
    {
        let x = rand_leaf(&mut rng, &[4, 3]);
        let w = rand_leaf(&mut rng, &[3, 1]);
        check(
            "mean_rows",
            fd_max_rel(
                || reduce(&x.mean_rows(), &w),
                std::slice::from_ref(&x),
                false,
            ),
        );
    }
    {
        let x = rand_leaf(&mut rng, &[7]);
        let w = rand_leaf(&mut rng, &[7, 1]);
        check(
            "relu",
            fd_max_rel(|| reduce(&x.relu(), &w), std::slice::from_ref(&x), false),
        );
    }
    {
        let x = rand_leaf(&mut rng, &[6]);
        let w = rand_leaf(&mut rng, &[6, 1]);
        check(
            "abs",
            fd_max_rel(|| reduce(&x.abs(), &w), std::slice::from_ref(&x), false),
        );
    }
    {
        let x = rand_leaf(&mut rng, &[3]);
        let w = rand_leaf(&mut rng, &[3, 1]);
        check(
            "sigmoid",
            fd_max_rel(|| reduce(&x.sigmoid(), &w), std::slice::from_ref(&x), false),
        );
    }
    {
        let x = rand_leaf(&mut rng, &[2, 5]);
        let mask = [true, true, false, true, true];
        let w = rand_leaf(&mut rng, &[10, 1]);
        check(
            "masked_softmax",
            fd_max_rel(
                || reduce(&x.masked_softmax(Some(&mask)), &w),
                std::slice::from_ref(&x),
                false,
            ),
        );
    }
    {
        let x = rand_leaf(&mut rng, &[3, 4]);
        let gain = rand_leaf(&mut rng, &[4]);
        let bias = rand_leaf(&mut rng, &[4]);
        let w = rand_leaf(&mut rng, &[12, 1]);
        check(
            "layer_norm",
            fd_max_rel(
                || reduce(&x.layer_norm(&gain, &bias, 1e-5), &w),
                &[x.clone(), gain.clone(), bias.clone()],
                false,
            ),
        );
    }
    {
        let x = rand_leaf(&mut rng, &[4, 3]);
        let mask = [true, false, true, true];
        let w = rand_leaf(&mut rng, &[3, 1]);
        check(
            "masked_max_pool",
            fd_max_rel(
                || reduce(&x.masked_max_pool(&mask), &w),
                std::slice::from_ref(&x),
                false,
            ),
        );
    }
    {
        let x = rand_leaf(&mut rng, &[5, 3]);
        let mask = [true, true, true, true, false];
        let w = rand_leaf(&mut rng, &[3, 1]);
        check(
            "hier_pool",
            fd_max_rel(
                || reduce(&x.hier_pool(&mask, 3), &w),
                std::slice::from_ref(&x),
                false,
            ),
        );
    }
    {
        let a = rand_leaf(&mut rng, &[5]);
        let b = rand_leaf(&mut rng, &[5]);
        check(
            "cosine_similarity",
            fd_max_rel(
                || a.cosine_similarity(&b).scale(1.3),
                &[a.clone(), b.clone()],
                false,
            ),
        );
    }
    {
        let table = rand_leaf(&mut rng, &[6, 3]);
        let w = rand_leaf(&mut rng, &[9, 1]);
        check(
            "embedding_lookup",
            fd_max_rel(
                || reduce(&embedding_lookup(&table, &[4, 0, 4]), &w),
                std::slice::from_ref(&table),
                false,
            ),
        );
    }
    {
        let x = rand_leaf(&mut rng, &[4, 3]);
        let mask = [true, false, true, true];
        let w = rand_leaf(&mut rng, &[12, 1]);
        check(
            "mask_rows",
            fd_max_rel(
                || reduce(&x.mask_rows(&mask), &w),
                std::slice::from_ref(&x),
                false,
            ),
        );
    }
    {
        // logits -> softmax -> weighted cross-entropy, the classifier tail
        let logits = rand_leaf(&mut rng, &[2, 3]);
        let cw = [1.4, 0.8, 1.0];
        check(
            "weighted_cross_entropy",
            fd_max_rel(
                || weighted_cross_entropy(&logits.masked_softmax(None), &[2, 0], &cw),
                std::slice::from_ref(&logits),
                false,
            ),
        );
    }
    {
        let x = rand_leaf(&mut rng, &[5]);
        check(
            "sum",
            fd_max_rel(|| x.sum().scale(0.7), std::slice::from_ref(&x), false),
        );
    }
    out
}

/// Tiny synthetic world exercising every model path: two context
/// utterances (one a placeholder for the first example), knowledge tuples
/// with and without VAD entries, a token with no concepts, and learned
/// lambda.
pub fn tiny_world() -> (ModelConfig, Vocabulary, KnowledgeIndex, Vec<Example>) {
    let convs = vec![
        Conversation {
            utterances: vec![
                Utterance {
                    text: "party tonight friend".into(),
                    label: 0,
                },
                Utterance {
                    text: "great joy for movie".into(),
                    label: 1,
                },
                Utterance {
                    text: "sad rain again".into(),
                    label: 2,
                },
            ],
        },
        Conversation {
            utterances: vec![Utterance {
                text: "movie and party".into(),
                label: 1,
            }],
        },
    ];
    let vocab = Vocabulary::build(&convs, 1);
    let stopwords: HashSet<String> = ["for", "and"].iter().map(|s| s.to_string()).collect();
    let mut vad = HashMap::new();
    for (word, v, a) in [("joy", 0.95, 0.8), ("party", 0.8, 0.9), ("sad", 0.1, 0.3)] {
        vad.insert(
            word.to_string(),
            VadEntry {
                word: word.to_string(),
                valence: v,
                arousal: a,
                dominance: 0.5,
            },
        );
    }
    let assertions: Vec<Assertion> = [
        ("friend", "RelatedTo", "party", 3.46),
        ("friend", "CausesDesire", "movie", 2.0),
        ("movie", "RelatedTo", "joy", 1.5),
        ("rain", "RelatedTo", "sad", 2.5),
        ("party", "RelatedTo", "joy", 1.0),
    ]
    .iter()
    .map(|(c1, r, c2, s)| Assertion {
        concept1: c1.to_string(),
        relation: r.to_string(),
        concept2: c2.to_string(),
        confidence: *s,
    })
    .collect();
    let kb = index_from_assertions(&assertions, &vocab, &stopwords, &vad);
    let cfg = ModelConfig {
        context_len: 2,
        utterance_len: 4,
        embed_dim: 8,
        ff_hidden: 8,
        heads: 2,
        classes: 3,
        word_vocab: vocab.len(),
        concept_vocab: kb.concept_vocab_len(),
        lambda: LambdaMode::Learned(0.5),
    };
    let examples = make_examples(&convs, &vocab, cfg.context_len, cfg.utterance_len);
    (cfg, vocab, kb, examples)
}

/// Per-parameter finite-difference check of the full tiny-config model,
/// including the knowledge path (lambda, concept embeddings, enrichment W).
pub fn model_suite(seed: u64, corrupt_backward: bool) -> Vec<GroupReport> {
    let (cfg, vocab, kb, examples) = tiny_world();
    let mut rng = SeededRng::new(seed);
    let model = KetModel::new(cfg, EmbeddingInit::default(), &mut rng).unwrap();
    // a batch covering: empty context, mixed placeholder context, knowledge
    // and fallback tokens
    let batch: Vec<Example> = examples.into_iter().take(3).collect();
    let class_weights = [1.0, 1.2, 0.8];
    let build = || {
        let ctx = model.batch_context(&kb, &vocab);
        model.batch_loss(&batch, &ctx, &class_weights).0
    };

    model.zero_grads();
    let loss = build();
    loss.backward();
    let mut analytic: Vec<Vec<f64>> = model
        .parameters()
        .iter()
        .map(|p| p.tensor.grad().unwrap_or_else(|| vec![0.0; p.tensor.len()]))
        .collect();
    if corrupt_backward {
        analytic[0][0] += 0.05;
    }

    let mut out = Vec::new();
    for (param, grads) in model.parameters().iter().zip(&analytic) {
        let leaf = &param.tensor;
        let mut max_rel: f64 = 0.0;
        for (i, &analytic_grad) in grads.iter().enumerate() {
            let original = leaf.value_at(i);
            leaf.set_value(i, original + DEFAULT_STEP);
            let up = build().item();
            leaf.set_value(i, original - DEFAULT_STEP);
            let down = build().item();
            leaf.set_value(i, original);
            let numeric = (up - down) / (2.0 * DEFAULT_STEP);
            max_rel = max_rel.max(relative_error(analytic_grad, numeric));
        }
        out.push(GroupReport {
            group: param.name.clone(),
            max_rel_error: max_rel,
            pass: max_rel < MODEL_TOLERANCE,
        });
    }
    out
}
