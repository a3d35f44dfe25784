//! Synthetic corpora for exercising the KET pipeline at desk scale.
//!
//! Each generator produces a complete, self-consistent set of artifacts
//! (JSONL splits, a ConceptNet-style dump, a VAD lexicon, stopwords) with a
//! label structure designed to probe one capability: plain learnability,
//! dependence on conversational context, or dependence on knowledge-graph
//! neighbors.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ket_core::tensor::rng::SeededRng;
use serde_json::json;

/// In-memory corpus artifacts, ready to be written to disk.
#[derive(Debug, Clone)]
pub struct CorpusFiles {
    pub train: String,
    pub val: String,
    pub test: String,
    pub conceptnet: String,
    pub vad: String,
    pub stopwords: String,
    pub classes: Vec<String>,
    pub majority_class: String,
}

#[derive(Debug, Clone)]
pub struct CorpusPaths {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    pub conceptnet: PathBuf,
    pub vad: PathBuf,
    pub stopwords: PathBuf,
}

impl CorpusFiles {
    pub fn write_to(&self, dir: &Path) -> io::Result<CorpusPaths> {
        fs::create_dir_all(dir)?;
        let paths = CorpusPaths {
            train: dir.join("train.jsonl"),
            val: dir.join("val.jsonl"),
            test: dir.join("test.jsonl"),
            conceptnet: dir.join("conceptnet.tsv"),
            vad: dir.join("vad.tsv"),
            stopwords: dir.join("stopwords.txt"),
        };
        fs::write(&paths.train, &self.train)?;
        fs::write(&paths.val, &self.val)?;
        fs::write(&paths.test, &self.test)?;
        fs::write(&paths.conceptnet, &self.conceptnet)?;
        fs::write(&paths.vad, &self.vad)?;
        fs::write(&paths.stopwords, &self.stopwords)?;
        Ok(paths)
    }
}

const FILLERS: &[&str] = &[
    "well", "so", "i", "think", "that", "was", "quite", "really", "maybe", "you", "know", "seems",
    "right", "fine", "sure", "today", "again", "still",
];

fn utterance_json(text: &str, label: &str) -> serde_json::Value {
    json!({"text": text, "label": label})
}

fn conversations_to_jsonl(convs: &[Vec<(String, String)>]) -> String {
    let mut out = String::new();
    for conv in convs {
        let utterances: Vec<serde_json::Value> = conv
            .iter()
            .map(|(text, label)| utterance_json(text, label))
            .collect();
        out.push_str(&json!({ "utterances": utterances }).to_string());
        out.push('\n');
    }
    out
}

fn filler_words(rng: &mut SeededRng, count: usize) -> Vec<String> {
    (0..count)
        .map(|_| FILLERS[rng.gen_index(FILLERS.len())].to_string())
        .collect()
}

/// Insert `word` at a random position among `words`.
fn insert_randomly(words: &mut Vec<String>, word: &str, rng: &mut SeededRng) {
    let pos = rng.gen_index(words.len() + 1);
    words.insert(pos, word.to_string());
}

const STOPWORDS: &str = "the\na\nan\nis\nto\nof\nand\n";

/// Corpus whose label is a deterministic function of one response keyword
/// and one keyword from the previous utterance:
/// label = 2 * resp_kw + prev_ctx_kw (0 when there is no previous
/// utterance). Conversations have two turns so the informative context
/// utterance is always unambiguous; solvable to ~1.0 with context length
/// >= 1.
pub fn learnability_corpus(seed: u64) -> CorpusFiles {
    let classes = ["calm", "happy", "sad", "angry"];
    let resp_keywords = ["sunshine", "storm"];
    let ctx_keywords = ["garden", "cellar"];
    let mut rng = SeededRng::new(seed);
    let make_split = |count: usize, rng: &mut SeededRng| {
        let mut convs = Vec::with_capacity(count);
        for _ in 0..count {
            let mut conv = Vec::new();
            let mut prev_ctx = 0usize;
            for turn in 0..2 {
                let r = rng.gen_index(2);
                let c = rng.gen_index(2);
                let label = if turn == 0 { 2 * r } else { 2 * r + prev_ctx };
                let n = 2 + rng.gen_index(3);
                let mut words = filler_words(rng, n);
                insert_randomly(&mut words, resp_keywords[r], rng);
                insert_randomly(&mut words, ctx_keywords[c], rng);
                conv.push((words.join(" "), classes[label].to_string()));
                prev_ctx = c;
            }
            convs.push(conv);
        }
        conversations_to_jsonl(&convs)
    };
    // 400 conversations total: 300 / 50 / 50
    let train = make_split(300, &mut rng);
    let val = make_split(50, &mut rng);
    let test = make_split(50, &mut rng);

    // concepts must be vocabulary words, so the dump links keywords to each
    // other and to common fillers
    let conceptnet = "sunshine\tRelatedTo\tgarden\t2.5\n\
                      sunshine\tHasProperty\tfine\t1.8\n\
                      storm\tRelatedTo\tcellar\t2.2\n\
                      storm\tRelatedTo\tagain\t1.2\n\
                      garden\tRelatedTo\tstill\t1.5\n\
                      cellar\tRelatedTo\tquite\t1.4\n"
        .to_string();
    let vad = "sunshine\t0.9\t0.6\t0.6\nstorm\t0.2\t0.9\t0.4\n\
               garden\t0.8\t0.3\t0.5\ncellar\t0.3\t0.4\t0.4\nfine\t0.7\t0.2\t0.5\n"
        .to_string();
    CorpusFiles {
        train,
        val,
        test,
        conceptnet,
        vad,
        stopwords: STOPWORDS.to_string(),
        classes: classes.iter().map(|s| s.to_string()).collect(),
        majority_class: "calm".to_string(),
    }
}

/// Cue/echo corpus: each conversation is a cue utterance carrying one of
/// four cue keywords (label = keyword) followed by an echo utterance of
/// pure fillers whose label repeats the cue. Echo labels are unlearnable
/// without context, so context length 2 beats context length 0 by a wide
/// margin.
pub fn context_cue_corpus(seed: u64) -> CorpusFiles {
    let classes = ["other", "glad", "gloomy", "irate"];
    let cues = ["ruby", "moss", "azure", "amber"];
    let mut rng = SeededRng::new(seed);
    let make_split = |count: usize, rng: &mut SeededRng| {
        let mut convs = Vec::with_capacity(count);
        for _ in 0..count {
            let k = rng.gen_index(4);
            let n = 2 + rng.gen_index(2);
            let mut cue_words = filler_words(rng, n);
            insert_randomly(&mut cue_words, cues[k], rng);
            let n_echo = 3 + rng.gen_index(3);
            let echo_words = filler_words(rng, n_echo);
            convs.push(vec![
                (cue_words.join(" "), classes[k].to_string()),
                (echo_words.join(" "), classes[k].to_string()),
            ]);
        }
        conversations_to_jsonl(&convs)
    };
    let train = make_split(160, &mut rng);
    let val = make_split(40, &mut rng);
    let test = make_split(40, &mut rng);
    let conceptnet = "ruby\tRelatedTo\tfine\t1.5\nmoss\tRelatedTo\tstill\t1.5\n".to_string();
    let vad = "ruby\t0.7\t0.6\t0.5\namber\t0.6\t0.4\t0.5\n".to_string();
    CorpusFiles {
        train,
        val,
        test,
        conceptnet,
        vad,
        stopwords: STOPWORDS.to_string(),
        classes: classes.iter().map(|s| s.to_string()).collect(),
        majority_class: "other".to_string(),
    }
}

/// Knowledge-trigger corpus: many rare trigger tokens, each appearing once
/// in training, whose class is carried by shared concept neighbors in the
/// knowledge dump. With full knowledge the per-class concept embeddings pool
/// evidence across triggers; with no knowledge each trigger must be
/// memorized from a single occurrence.
pub fn knowledge_trigger_corpus(seed: u64) -> CorpusFiles {
    let classes = ["joyful", "mournful", "furious", "serene"];
    let classes_n = classes.len();
    let concepts_per_class = 12usize;
    let trigger_count = 240usize;
    let mut rng = SeededRng::new(seed);

    let concept_names: Vec<Vec<String>> = (0..classes_n)
        .map(|c| {
            (0..concepts_per_class)
                .map(|i| format!("kc{c}x{i}"))
                .collect()
        })
        .collect();
    let trigger_names: Vec<String> = (0..trigger_count).map(|i| format!("trig{i:03}")).collect();
    let trigger_class = |i: usize| i % classes_n;

    // each trigger links to two concepts of its class
    let mut conceptnet = String::new();
    let mut trigger_concepts: Vec<Vec<usize>> = Vec::with_capacity(trigger_count);
    for (i, name) in trigger_names.iter().enumerate() {
        let class = trigger_class(i);
        let a = rng.gen_index(concepts_per_class);
        let mut b = rng.gen_index(concepts_per_class);
        if b == a {
            b = (b + 1) % concepts_per_class;
        }
        for idx in [a, b] {
            let conf = 1.5 + 2.5 * rng.uniform(0.0, 1.0);
            conceptnet.push_str(&format!(
                "{name}\tRelatedTo\t{}\t{conf:.3}\n",
                concept_names[class][idx]
            ));
        }
        trigger_concepts.push(vec![a, b]);
    }

    let all_concepts: Vec<&String> = concept_names.iter().flatten().collect();
    let utterance_for = |trigger: usize, rng: &mut SeededRng| {
        let n = 2 + rng.gen_index(2);
        let mut words = filler_words(rng, n);
        insert_randomly(&mut words, &trigger_names[trigger], rng);
        // one label-independent concept word keeps every concept in the
        // vocabulary without leaking the class
        let noise = all_concepts[rng.gen_index(all_concepts.len())];
        insert_randomly(&mut words, noise, rng);
        (words.join(" "), classes[trigger_class(trigger)].to_string())
    };

    // training: every trigger exactly once, two per conversation
    let mut order: Vec<usize> = (0..trigger_count).collect();
    rng.shuffle(&mut order);
    let mut train_convs = Vec::new();
    for pair in order.chunks(2) {
        let conv: Vec<(String, String)> =
            pair.iter().map(|&t| utterance_for(t, &mut rng)).collect();
        train_convs.push(conv);
    }
    // held-out splits reuse the trained triggers in fresh sentences
    let make_heldout = |count: usize, rng: &mut SeededRng| {
        let mut convs = Vec::with_capacity(count);
        for _ in 0..count {
            let conv: Vec<(String, String)> = (0..2)
                .map(|_| utterance_for(rng.gen_index(trigger_count), rng))
                .collect();
            convs.push(conv);
        }
        convs
    };
    let val_convs = make_heldout(30, &mut rng);
    let test_convs = make_heldout(40, &mut rng);

    // half the concepts carry VAD entries
    let mut vad = String::new();
    for (c, group) in concept_names.iter().enumerate() {
        for (i, name) in group.iter().enumerate() {
            if i % 2 == 0 {
                let v = 0.2 + 0.15 * c as f64;
                let a = 0.3 + 0.1 * (i % 5) as f64;
                vad.push_str(&format!("{name}\t{v:.2}\t{a:.2}\t0.50\n"));
            }
        }
    }

    CorpusFiles {
        train: conversations_to_jsonl(&train_convs),
        val: conversations_to_jsonl(&val_convs),
        test: conversations_to_jsonl(&test_convs),
        conceptnet,
        vad,
        stopwords: STOPWORDS.to_string(),
        classes: classes.iter().map(|s| s.to_string()).collect(),
        majority_class: "joyful".to_string(),
    }
}

/// Minimal linearly separable corpus for fast training-loop tests: one
/// keyword per class, one utterance per conversation.
pub fn separable_corpus(seed: u64, train_convs: usize, val_convs: usize) -> CorpusFiles {
    let classes = ["up", "down"];
    let keywords = ["high", "low"];
    let mut rng = SeededRng::new(seed);
    let make_split = |count: usize, rng: &mut SeededRng| {
        let mut convs = Vec::with_capacity(count);
        for _ in 0..count {
            let k = rng.gen_index(2);
            let n = 1 + rng.gen_index(2);
            let mut words = filler_words(rng, n);
            insert_randomly(&mut words, keywords[k], rng);
            convs.push(vec![(words.join(" "), classes[k].to_string())]);
        }
        conversations_to_jsonl(&convs)
    };
    let train = make_split(train_convs, &mut rng);
    let val = make_split(val_convs, &mut rng);
    let test = make_split(val_convs, &mut rng);
    CorpusFiles {
        train,
        val,
        test,
        conceptnet: "high\tRelatedTo\tsure\t1.5\n".to_string(),
        vad: "high\t0.8\t0.7\t0.5\nlow\t0.2\t0.3\t0.5\n".to_string(),
        stopwords: STOPWORDS.to_string(),
        classes: classes.iter().map(|s| s.to_string()).collect(),
        majority_class: "up".to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(learnability_corpus(5).train, learnability_corpus(5).train);
        assert_eq!(
            knowledge_trigger_corpus(5).conceptnet,
            knowledge_trigger_corpus(5).conceptnet
        );
    }

    #[test]
    fn learnability_has_400_conversations() {
        let corpus = learnability_corpus(1);
        let count = |s: &str| s.lines().filter(|l| !l.trim().is_empty()).count();
        assert_eq!(
            count(&corpus.train) + count(&corpus.val) + count(&corpus.test),
            400
        );
    }

    #[test]
    fn corpora_parse_as_conversations() {
        for corpus in [
            learnability_corpus(2),
            context_cue_corpus(2),
            knowledge_trigger_corpus(2),
            separable_corpus(2, 10, 4),
        ] {
            let dir = std::env::temp_dir().join(format!("ket-testkit-{}", std::process::id()));
            let paths = corpus.write_to(&dir).unwrap();
            let convs = ket_core::data::load_conversations(&paths.train, &corpus.classes).unwrap();
            assert!(!convs.is_empty());
            std::fs::remove_dir_all(&dir).ok();
        }
    }

    #[test]
    fn learnability_knowledge_survives_vocabulary_filtering() {
        let dir = std::env::temp_dir().join(format!("ket-testkit-kb-{}", std::process::id()));
        let corpus = learnability_corpus(9);
        let paths = corpus.write_to(&dir).unwrap();
        let convs = ket_core::data::load_conversations(&paths.train, &corpus.classes).unwrap();
        let vocab = ket_core::data::Vocabulary::build(&convs, 1);
        let stopwords = ket_core::knowledge::load_stopwords(&paths.stopwords).unwrap();
        let (vad, _) = ket_core::knowledge::load_vad(&paths.vad).unwrap();
        let (kb, _) =
            ket_core::knowledge::load_conceptnet(&paths.conceptnet, &vocab, &stopwords, &vad)
                .unwrap();
        assert!(!kb.retrieve("sunshine").is_empty());
        assert!(!kb.retrieve("storm").is_empty());
        assert!(kb.concept_vocab_len() >= 4);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn every_trigger_appears_once_in_training() {
        let corpus = knowledge_trigger_corpus(3);
        for i in 0..240 {
            let needle = format!("trig{i:03}");
            let count = corpus.train.matches(&needle).count();
            assert_eq!(count, 1, "{needle} appears {count} times");
        }
    }
}
