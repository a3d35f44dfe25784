//! Corpus ingestion: tokenization, vocabulary construction, context
//! windowing, padding/clipping, class weights, and pretrained embeddings.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::tensor::rng::SeededRng;
use crate::tensor::Tensor;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: invalid JSON: {message}")]
    Json {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: label {label:?} is not in the configured class list")]
    UnknownLabel {
        path: String,
        line: usize,
        label: String,
    },
    #[error("{path}:{line}: utterance is missing a label")]
    MissingLabel { path: String, line: usize },
    #[error("{path}:{line}: conversation has no utterances")]
    EmptyConversation { path: String, line: usize },
    #[error("embedding file {path} has dimension {file_dim}, config expects {expected}")]
    EmbeddingDimMismatch {
        path: String,
        file_dim: usize,
        expected: usize,
    },
}

/// One speaker turn with its emotion label (an index into the class list).
#[derive(Debug, Clone)]
pub struct Utterance {
    pub text: String,
    pub label: usize,
}

/// Ordered utterances of a single dialogue.
#[derive(Debug, Clone)]
pub struct Conversation {
    pub utterances: Vec<Utterance>,
}

#[derive(Deserialize)]
struct RawConversation {
    utterances: Vec<RawUtterance>,
}

#[derive(Deserialize)]
struct RawUtterance {
    text: String,
    #[serde(default)]
    label: Option<String>,
}

/// Load a JSONL corpus, mapping label strings through the ordered class
/// list. Every utterance must carry a label from the list.
pub fn load_conversations(path: &Path, classes: &[String]) -> Result<Vec<Conversation>, DataError> {
    let index: HashMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: display.clone(),
        source,
    })?;
    let mut conversations = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawConversation = serde_json::from_str(&line).map_err(|e| DataError::Json {
            path: display.clone(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        if raw.utterances.is_empty() {
            return Err(DataError::EmptyConversation {
                path: display.clone(),
                line: lineno + 1,
            });
        }
        let mut utterances = Vec::with_capacity(raw.utterances.len());
        for u in raw.utterances {
            let label_str = u.label.ok_or(DataError::MissingLabel {
                path: display.clone(),
                line: lineno + 1,
            })?;
            let label = *index
                .get(label_str.as_str())
                .ok_or_else(|| DataError::UnknownLabel {
                    path: display.clone(),
                    line: lineno + 1,
                    label: label_str.clone(),
                })?;
            utterances.push(Utterance {
                text: u.text,
                label,
            });
        }
        conversations.push(Conversation { utterances });
    }
    Ok(conversations)
}

/// Lenient loader for prediction inputs: labels are optional (mapped to
/// class 0 when absent or unknown) and malformed lines are skipped.
/// Returns the conversations and the number of skipped lines.
pub fn load_conversations_lenient(
    path: &Path,
    classes: &[String],
) -> Result<(Vec<Conversation>, usize), DataError> {
    let index: HashMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: display.clone(),
        source,
    })?;
    let mut conversations = Vec::new();
    let mut skipped = 0usize;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|source| DataError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RawConversation>(&line) {
            Ok(raw) if !raw.utterances.is_empty() => {
                let utterances = raw
                    .utterances
                    .into_iter()
                    .map(|u| Utterance {
                        label: u
                            .label
                            .as_deref()
                            .and_then(|l| index.get(l).copied())
                            .unwrap_or(0),
                        text: u.text,
                    })
                    .collect();
                conversations.push(Conversation { utterances });
            }
            _ => skipped += 1,
        }
    }
    Ok((conversations, skipped))
}

/// Rule tokenizer: lower-case, split on whitespace, peel leading/trailing
/// punctuation into their own tokens, and split clitic contractions at the
/// apostrophe ("don't" -> "do" + "n't", "it's" -> "it" + "'s"). Empty input
/// yields a single `<unk>` token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.to_lowercase().split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut i = 0;
        let mut j = chars.len();
        while i < j && is_punct(chars[i]) {
            tokens.push(chars[i].to_string());
            i += 1;
        }
        let mut trailing = Vec::new();
        while j > i && is_punct(chars[j - 1]) {
            trailing.push(chars[j - 1].to_string());
            j -= 1;
        }
        if i < j {
            let core: String = chars[i..j].iter().collect();
            split_contraction(&core, &mut tokens);
        }
        tokens.extend(trailing.into_iter().rev());
    }
    if tokens.is_empty() {
        tokens.push(UNK_TOKEN.to_string());
    }
    tokens
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric()
}

fn split_contraction(core: &str, out: &mut Vec<String>) {
    if let Some(stem) = core.strip_suffix("n't") {
        if !stem.is_empty() {
            out.push(stem.to_string());
            out.push("n't".to_string());
            return;
        }
    }
    if let Some(pos) = core.find('\'') {
        if pos > 0 && pos < core.len() - 1 {
            out.push(core[..pos].to_string());
            out.push(core[pos..].to_string());
            return;
        }
    }
    out.push(core.to_string());
}

/// Token/id mapping with reserved PAD (0) and UNK (1) entries, built from
/// the training split only.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Tokens with frequency >= `min_freq` get ids in descending-frequency
    /// order, ties broken alphabetically.
    pub fn build(train: &[Conversation], min_freq: usize) -> Vocabulary {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for conv in train {
            for utt in &conv.utterances {
                for tok in tokenize(&utt.text) {
                    *counts.entry(tok).or_insert(0) += 1;
                }
            }
        }
        let mut entries: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(tok, n)| *n >= min_freq && tok != PAD_TOKEN && tok != UNK_TOKEN)
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(entries.into_iter().map(|(t, _)| t));
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn encode(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn decode(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Fixed-length encoded utterance: ids padded with PAD to length m, and a
/// keep-mask marking the real tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedUtterance {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl EncodedUtterance {
    pub fn has_real_tokens(&self) -> bool {
        self.mask.iter().any(|k| *k)
    }
}

/// One classification instance: M context utterances (front-padded with
/// all-PAD placeholders), the response, and its label.
#[derive(Debug, Clone)]
pub struct Example {
    pub context: Vec<EncodedUtterance>,
    pub response: EncodedUtterance,
    pub label: usize,
}

fn encode_utterance(text: &str, vocab: &Vocabulary, m: usize) -> EncodedUtterance {
    let tokens = tokenize(text);
    let mut ids = Vec::with_capacity(m);
    let mut mask = Vec::with_capacity(m);
    for tok in tokens.iter().take(m) {
        ids.push(vocab.encode(tok));
        mask.push(true);
    }
    while ids.len() < m {
        ids.push(PAD_ID);
        mask.push(false);
    }
    EncodedUtterance { ids, mask }
}

fn placeholder_utterance(m: usize) -> EncodedUtterance {
    EncodedUtterance {
        ids: vec![PAD_ID; m],
        mask: vec![false; m],
    }
}

/// Turn every utterance of every conversation into an Example whose context
/// is the up-to-M immediately preceding utterances of the same conversation.
/// Utterances are clipped to their first m tokens and end-padded.
pub fn make_examples(
    conversations: &[Conversation],
    vocab: &Vocabulary,
    context_len: usize,
    utterance_len: usize,
) -> Vec<Example> {
    let mut examples = Vec::new();
    for conv in conversations {
        let encoded: Vec<EncodedUtterance> = conv
            .utterances
            .iter()
            .map(|u| encode_utterance(&u.text, vocab, utterance_len))
            .collect();
        for (j, utt) in conv.utterances.iter().enumerate() {
            let mut context = Vec::with_capacity(context_len);
            for back in (1..=context_len).rev() {
                if j >= back {
                    context.push(encoded[j - back].clone());
                } else {
                    context.push(placeholder_utterance(utterance_len));
                }
            }
            examples.push(Example {
                context,
                response: encoded[j].clone(),
                label: utt.label,
            });
        }
    }
    examples
}

/// Per-class label counts over all utterances.
pub fn label_counts(conversations: &[Conversation], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; num_classes];
    for conv in conversations {
        for utt in &conv.utterances {
            counts[utt.label] += 1;
        }
    }
    counts
}

/// Class weights as the ratio of the validation class distribution to the
/// training class distribution. Classes absent from training get weight 0
/// (with a warning); classes absent from validation get weight 1.
pub fn class_weights(train_counts: &[usize], val_counts: &[usize]) -> Vec<f64> {
    assert_eq!(train_counts.len(), val_counts.len());
    let train_total: usize = train_counts.iter().sum();
    let val_total: usize = val_counts.iter().sum();
    assert!(
        train_total > 0 && val_total > 0,
        "class_weights: empty split"
    );
    train_counts
        .iter()
        .zip(val_counts)
        .enumerate()
        .map(|(c, (&tn, &vn))| {
            if tn == 0 {
                log::warn!("class {c} absent from the training split; weight set to 0");
                0.0
            } else if vn == 0 {
                1.0
            } else {
                (vn as f64 / val_total as f64) / (tn as f64 / train_total as f64)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct EmbeddingLoadStats {
    pub matched: usize,
    pub skipped_lines: usize,
}

/// Parse a pretrained vector file ("word v1 ... vd" per line) into a map.
/// A file whose vector dimension disagrees with `dim` is a fatal config
/// error; individually malformed lines are skipped and counted.
pub fn load_embedding_map(
    path: &Path,
    dim: usize,
) -> Result<(HashMap<String, Vec<f64>>, EmbeddingLoadStats), DataError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: display.clone(),
        source,
    })?;
    let mut stats = EmbeddingLoadStats::default();
    let mut vectors: HashMap<String, Vec<f64>> = HashMap::new();
    let mut file_dim: Option<usize> = None;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|source| DataError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else {
            stats.skipped_lines += 1;
            continue;
        };
        let values: Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
        let Ok(values) = values else {
            stats.skipped_lines += 1;
            continue;
        };
        match file_dim {
            None => {
                if values.is_empty() {
                    stats.skipped_lines += 1;
                    continue;
                }
                if values.len() != dim {
                    return Err(DataError::EmbeddingDimMismatch {
                        path: display,
                        file_dim: values.len(),
                        expected: dim,
                    });
                }
                file_dim = Some(values.len());
            }
            Some(fd) if values.len() != fd => {
                stats.skipped_lines += 1;
                continue;
            }
            Some(_) => {}
        }
        vectors.insert(word.to_string(), values);
    }
    if stats.skipped_lines > 0 {
        log::warn!(
            "{display}: skipped {} malformed embedding lines",
            stats.skipped_lines
        );
    }
    Ok((vectors, stats))
}

/// Build a row-major embedding matrix for `tokens`, copying pretrained
/// vectors where present and drawing N(0, 0.1) otherwise. Row 0 is zeroed
/// when `zero_first_row` is set (the PAD row).
pub fn embedding_matrix(
    tokens: &[String],
    pretrained: Option<&HashMap<String, Vec<f64>>>,
    dim: usize,
    zero_first_row: bool,
    rng: &mut SeededRng,
) -> Vec<f64> {
    let mut data = vec![0.0; tokens.len() * dim];
    for (row, token) in tokens.iter().enumerate() {
        if zero_first_row && row == 0 {
            continue;
        }
        match pretrained.and_then(|map| map.get(token)) {
            Some(vec) => data[row * dim..(row + 1) * dim].copy_from_slice(vec),
            None => {
                for j in 0..dim {
                    data[row * dim + j] = rng.normal(0.0, 0.1);
                }
            }
        }
    }
    data
}

/// Load pretrained word vectors into a `[V, d]` matrix aligned with the
/// vocabulary. Vocabulary entries missing from the file are drawn from
/// N(0, 0.1); the PAD row is zero.
pub fn load_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut SeededRng,
) -> Result<(Tensor, EmbeddingLoadStats), DataError> {
    let (vectors, mut stats) = load_embedding_map(path, dim)?;
    stats.matched = vocab
        .tokens()
        .iter()
        .skip(2) // PAD and UNK never match
        .filter(|t| vectors.contains_key(*t))
        .count();
    let data = embedding_matrix(vocab.tokens(), Some(&vectors), dim, true, rng);
    Ok((Tensor::from_vec(&[vocab.len(), dim], data), stats))
}

/// Random initialization for an embedding table when no pretrained file is
/// given: N(0, 0.1) everywhere except the zeroed row 0 (PAD).
pub fn random_embedding_matrix(
    rows: usize,
    dim: usize,
    zero_row0: bool,
    rng: &mut SeededRng,
) -> Vec<f64> {
    let mut data = vec![0.0; rows * dim];
    for r in 0..rows {
        if zero_row0 && r == 0 {
            continue;
        }
        for j in 0..dim {
            data[r * dim + j] = rng.normal(0.0, 0.1);
        }
    }
    data
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn conv(texts_labels: &[(&str, usize)]) -> Conversation {
        Conversation {
            utterances: texts_labels
                .iter()
                .map(|(t, l)| Utterance {
                    text: t.to_string(),
                    label: *l,
                })
                .collect(),
        }
    }

    #[test]
    fn tokenize_separates_trailing_punctuation() {
        assert_eq!(tokenize("Happy Birthday!"), vec!["happy", "birthday", "!"]);
    }

    #[test]
    fn tokenize_splits_nt_contraction() {
        assert_eq!(tokenize("don't"), vec!["do", "n't"]);
    }

    #[test]
    fn tokenize_splits_possessive_contraction() {
        assert_eq!(tokenize("it's"), vec!["it", "'s"]);
    }

    #[test]
    fn tokenize_empty_is_unk() {
        assert_eq!(tokenize(""), vec![UNK_TOKEN]);
        assert_eq!(tokenize("   "), vec![UNK_TOKEN]);
    }

    #[test]
    fn tokenize_quoted_word() {
        assert_eq!(tokenize("\"hello\""), vec!["\"", "hello", "\""]);
    }

    #[test]
    fn vocab_orders_by_frequency_then_alpha() {
        let convs = vec![conv(&[("b b b a a c", 0)])];
        let vocab = Vocabulary::build(&convs, 1);
        assert_eq!(vocab.encode("b"), 2);
        assert_eq!(vocab.encode("a"), 3);
        assert_eq!(vocab.encode("c"), 4);
    }

    #[test]
    fn vocab_ties_break_alphabetically() {
        let convs = vec![conv(&[("zeta alpha", 0)])];
        let vocab = Vocabulary::build(&convs, 1);
        assert_eq!(vocab.encode("alpha"), 2);
        assert_eq!(vocab.encode("zeta"), 3);
    }

    #[test]
    fn vocab_min_freq_filters_and_unk_maps() {
        let convs = vec![conv(&[("hello hello world", 0)])];
        let vocab = Vocabulary::build(&convs, 2);
        assert!(vocab.contains("hello"));
        assert!(!vocab.contains("world"));
        assert_eq!(vocab.encode("world"), UNK_ID);
    }

    #[test]
    fn make_examples_one_per_utterance() {
        let convs = vec![conv(&[("a", 0), ("b", 1), ("c", 0)]), conv(&[("d", 1)])];
        let vocab = Vocabulary::build(&convs, 1);
        let examples = make_examples(&convs, &vocab, 2, 4);
        assert_eq!(examples.len(), 4);
    }

    #[test]
    fn make_examples_front_pads_context() {
        let convs = vec![conv(&[("a", 0), ("b", 1)])];
        let vocab = Vocabulary::build(&convs, 1);
        let examples = make_examples(&convs, &vocab, 2, 3);
        // first utterance: both context slots are placeholders
        assert!(!examples[0].context[0].has_real_tokens());
        assert!(!examples[0].context[1].has_real_tokens());
        // second utterance: placeholder then "a"
        assert!(!examples[1].context[0].has_real_tokens());
        assert!(examples[1].context[1].has_real_tokens());
        assert_eq!(examples[1].context[1].ids[0], vocab.encode("a"));
    }

    #[test]
    fn make_examples_clips_to_first_m_tokens() {
        let text = "t0 t1 t2 t3 t4 t5";
        let convs = vec![conv(&[(text, 0)])];
        let vocab = Vocabulary::build(&convs, 1);
        let examples = make_examples(&convs, &vocab, 0, 4);
        let resp = &examples[0].response;
        assert_eq!(resp.ids.len(), 4);
        assert_eq!(resp.ids[0], vocab.encode("t0"));
        assert_eq!(resp.ids[3], vocab.encode("t3"));
        assert!(resp.mask.iter().all(|k| *k));
    }

    #[test]
    fn encoded_examples_roundtrip_to_clipped_tokens() {
        let text = "Hello there, friend!";
        let convs = vec![conv(&[(text, 0)])];
        let vocab = Vocabulary::build(&convs, 1);
        let examples = make_examples(&convs, &vocab, 0, 10);
        let resp = &examples[0].response;
        let decoded: Vec<&str> = resp
            .ids
            .iter()
            .zip(&resp.mask)
            .filter(|(_, keep)| **keep)
            .map(|(id, _)| vocab.decode(*id))
            .collect();
        assert_eq!(decoded, tokenize(text));
    }

    #[test]
    fn class_weights_identical_distributions_are_one() {
        let w = class_weights(&[30, 70], &[3, 7]);
        assert!((w[0] - 1.0).abs() < 1e-12);
        assert!((w[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn class_weights_hand_ratio() {
        let w = class_weights(&[90, 10], &[50, 50]);
        assert!((w[0] - 0.5555555555555556).abs() < 1e-9);
        assert!((w[1] - 5.0).abs() < 1e-9);
    }

    #[test]
    fn class_weights_absent_rules() {
        let w = class_weights(&[10, 0, 5], &[0, 3, 2]);
        assert_eq!(w[0], 1.0); // absent from val
        assert_eq!(w[1], 0.0); // absent from train
    }

    #[test]
    fn embeddings_copied_and_missing_rows_randomized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.txt");
        let mut f = File::create(&path).unwrap();
        writeln!(f, "hello 0.25 -0.5").unwrap();
        writeln!(f, "bogus notanumber 0.0").unwrap();
        drop(f);

        let convs = vec![conv(&[("hello world", 0)])];
        let vocab = Vocabulary::build(&convs, 1);
        let mut rng = SeededRng::new(5);
        let (table, stats) = load_embeddings(&path, &vocab, 2, &mut rng).unwrap();
        assert_eq!(stats.matched, 1);
        assert_eq!(stats.skipped_lines, 1);
        let hello = vocab.encode("hello");
        let data = table.to_vec();
        assert_eq!(&data[hello * 2..hello * 2 + 2], &[0.25, -0.5]);
        // PAD row zero
        assert_eq!(&data[0..2], &[0.0, 0.0]);
        // missing word initialized away from zero
        let world = vocab.encode("world");
        assert!(data[world * 2] != 0.0 || data[world * 2 + 1] != 0.0);
    }

    #[test]
    fn embeddings_dim_mismatch_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.txt");
        let mut f = File::create(&path).unwrap();
        writeln!(f, "hello 1.0 2.0 3.0").unwrap();
        drop(f);
        let convs = vec![conv(&[("hello", 0)])];
        let vocab = Vocabulary::build(&convs, 1);
        let mut rng = SeededRng::new(5);
        let err = load_embeddings(&path, &vocab, 2, &mut rng).unwrap_err();
        assert!(matches!(err, DataError::EmbeddingDimMismatch { .. }));
    }
}
