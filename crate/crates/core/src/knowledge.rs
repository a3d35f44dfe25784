//! Commonsense knowledge ingestion: ConceptNet-style assertion dumps and
//! the VAD emotion lexicon, filtered and indexed for per-token retrieval.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use thiserror::Error;

use crate::data::Vocabulary;

/// Retrieval keeps at most this many tuples per token, strongest first.
pub const MAX_CONCEPTS_PER_TOKEN: usize = 100;

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("knowledge fraction {0} is outside [0, 1]")]
    InvalidFraction(f64),
}

/// A weighted edge of the knowledge graph.
#[derive(Debug, Clone)]
pub struct Assertion {
    pub concept1: String,
    pub relation: String,
    pub concept2: String,
    pub confidence: f64,
}

/// Valence-arousal-dominance coordinates, each in [0, 1]. Dominance is
/// stored for completeness but plays no role in affectiveness scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct VadEntry {
    pub word: String,
    pub valence: f64,
    pub arousal: f64,
    pub dominance: f64,
}

/// One retrieved neighbor of a token: the concept, its id in the concept
/// vocabulary, the (filtered, >= 1) assertion confidence, and its VAD entry
/// when the lexicon has one.
#[derive(Debug, Clone)]
pub struct ConceptTuple {
    pub concept: String,
    pub concept_id: usize,
    pub confidence: f64,
    pub vad: Option<VadEntry>,
}

#[derive(Debug, Clone, Default)]
pub struct LoadStats {
    pub rows: usize,
    pub skipped: usize,
}

/// Per-token knowledge retrieval structure. Immutable after build.
#[derive(Debug, Clone)]
pub struct KnowledgeIndex {
    neighbors: BTreeMap<String, Vec<ConceptTuple>>,
    concepts: Vec<String>,
    stopwords: HashSet<String>,
    vad: HashMap<String, VadEntry>,
}

/// Load the VAD lexicon: UTF-8 TSV `word \t valence \t arousal \t dominance`
/// with no header. Rows with values outside [0, 1] are rejected with a
/// warning; a duplicated word keeps its last row.
pub fn load_vad(path: &Path) -> Result<(HashMap<String, VadEntry>, LoadStats), KnowledgeError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| KnowledgeError::Io {
        path: display.clone(),
        source,
    })?;
    let mut map = HashMap::new();
    let mut stats = LoadStats::default();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|source| KnowledgeError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        stats.rows += 1;
        let cols: Vec<&str> = line.split('\t').collect();
        let parsed = (|| {
            if cols.len() != 4 {
                return None;
            }
            let v = cols[1].trim().parse::<f64>().ok()?;
            let a = cols[2].trim().parse::<f64>().ok()?;
            let d = cols[3].trim().parse::<f64>().ok()?;
            let in_unit = |x: f64| (0.0..=1.0).contains(&x);
            if in_unit(v) && in_unit(a) && in_unit(d) {
                Some(VadEntry {
                    word: cols[0].trim().to_lowercase(),
                    valence: v,
                    arousal: a,
                    dominance: d,
                })
            } else {
                None
            }
        })();
        match parsed {
            Some(entry) => {
                map.insert(entry.word.clone(), entry);
            }
            None => stats.skipped += 1,
        }
    }
    if stats.skipped > 0 {
        log::warn!("{display}: rejected {} VAD rows", stats.skipped);
    }
    Ok((map, stats))
}

/// Load a stopword list, one lower-case word per line.
pub fn load_stopwords(path: &Path) -> Result<HashSet<String>, KnowledgeError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| KnowledgeError::Io {
        path: display,
        source,
    })?;
    let mut set = HashSet::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|source| KnowledgeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let word = line.trim();
        if !word.is_empty() {
            set.insert(word.to_lowercase());
        }
    }
    Ok(set)
}

/// Normalize a concept string: lower-case, with internal whitespace and
/// underscore runs collapsed to a single underscore. Multi-word concepts
/// thus survive only if the vocabulary holds the joined form.
pub fn normalize_concept(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut in_gap = false;
    for c in raw.trim().to_lowercase().chars() {
        if c.is_whitespace() || c == '_' {
            in_gap = true;
        } else {
            if in_gap && !out.is_empty() {
                out.push('_');
            }
            in_gap = false;
            out.push(c);
        }
    }
    out
}

/// Parse a ConceptNet-style dump (UTF-8 TSV, 4 columns, no header:
/// `concept1 \t relation \t concept2 \t confidence`) and build the index.
///
/// For each vocabulary token t, g(t) holds the immediate neighbors of t in
/// either edge direction. Neighbors that are stopwords, out of vocabulary,
/// or reached only through assertions with confidence < 1 are removed;
/// relation labels are discarded. A neighbor reachable through several
/// assertions keeps the maximum confidence. Each list is sorted by
/// (-confidence, concept) and capped at [`MAX_CONCEPTS_PER_TOKEN`].
pub fn load_conceptnet(
    path: &Path,
    vocab: &Vocabulary,
    stopwords: &HashSet<String>,
    vad: &HashMap<String, VadEntry>,
) -> Result<(KnowledgeIndex, LoadStats), KnowledgeError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| KnowledgeError::Io {
        path: display.clone(),
        source,
    })?;
    let mut stats = LoadStats::default();
    let mut edges: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|source| KnowledgeError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        stats.rows += 1;
        let cols: Vec<&str> = line.split('\t').collect();
        let assertion = (|| {
            if cols.len() != 4 {
                return None;
            }
            let confidence = cols[3].trim().parse::<f64>().ok()?;
            if confidence <= 0.0 {
                return None;
            }
            Some(Assertion {
                concept1: normalize_concept(cols[0]),
                relation: cols[1].trim().to_string(),
                concept2: normalize_concept(cols[2]),
                confidence,
            })
        })();
        let Some(assertion) = assertion else {
            stats.skipped += 1;
            continue;
        };
        add_assertion(&mut edges, &assertion, vocab, stopwords);
    }
    if stats.skipped > 0 {
        log::warn!(
            "{display}: skipped {} malformed assertion rows",
            stats.skipped
        );
    }
    let index = KnowledgeIndex::from_edges(edges, stopwords.clone(), vad.clone());
    Ok((index, stats))
}

/// Build an index from already-parsed assertions; the same filtering rules
/// as [`load_conceptnet`] apply. Concept strings are normalized here.
pub fn index_from_assertions(
    assertions: &[Assertion],
    vocab: &Vocabulary,
    stopwords: &HashSet<String>,
    vad: &HashMap<String, VadEntry>,
) -> KnowledgeIndex {
    let mut edges: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for a in assertions {
        let normalized = Assertion {
            concept1: normalize_concept(&a.concept1),
            relation: a.relation.clone(),
            concept2: normalize_concept(&a.concept2),
            confidence: a.confidence,
        };
        add_assertion(&mut edges, &normalized, vocab, stopwords);
    }
    KnowledgeIndex::from_edges(edges, stopwords.clone(), vad.clone())
}

/// Apply the retrieval filters to one assertion and record both directions.
/// Assertions below confidence 1 are annotation noise and are dropped.
fn add_assertion(
    edges: &mut BTreeMap<String, BTreeMap<String, f64>>,
    assertion: &Assertion,
    vocab: &Vocabulary,
    stopwords: &HashSet<String>,
) {
    if assertion.confidence < 1.0 {
        return;
    }
    for (head, neighbor) in [
        (&assertion.concept1, &assertion.concept2),
        (&assertion.concept2, &assertion.concept1),
    ] {
        if head == neighbor
            || !vocab.contains(head)
            || stopwords.contains(head)
            || !vocab.contains(neighbor)
            || stopwords.contains(neighbor)
        {
            continue;
        }
        let slot = edges
            .entry(head.clone())
            .or_default()
            .entry(neighbor.clone())
            .or_insert(0.0);
        if assertion.confidence > *slot {
            *slot = assertion.confidence;
        }
    }
}

impl KnowledgeIndex {
    fn from_edges(
        edges: BTreeMap<String, BTreeMap<String, f64>>,
        stopwords: HashSet<String>,
        vad: HashMap<String, VadEntry>,
    ) -> KnowledgeIndex {
        // Sort, cap, then assign concept ids over the surviving concepts.
        let mut capped: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
        let mut concept_set: BTreeSet<String> = BTreeSet::new();
        for (token, nbrs) in edges {
            let mut list: Vec<(String, f64)> = nbrs.into_iter().collect();
            list.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| a.0.cmp(&b.0))
            });
            list.truncate(MAX_CONCEPTS_PER_TOKEN);
            for (concept, _) in &list {
                concept_set.insert(concept.clone());
            }
            capped.insert(token, list);
        }
        let concepts: Vec<String> = concept_set.into_iter().collect();
        let concept_ids: HashMap<&str, usize> = concepts
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        let neighbors = capped
            .into_iter()
            .map(|(token, list)| {
                let tuples = list
                    .into_iter()
                    .map(|(concept, confidence)| ConceptTuple {
                        concept_id: concept_ids[concept.as_str()],
                        vad: vad.get(&concept).cloned(),
                        concept,
                        confidence,
                    })
                    .collect();
                (token, tuples)
            })
            .collect();
        KnowledgeIndex {
            neighbors,
            concepts,
            stopwords,
            vad,
        }
    }

    /// Empty index: every token falls back to the no-knowledge path.
    pub fn empty() -> KnowledgeIndex {
        KnowledgeIndex {
            neighbors: BTreeMap::new(),
            concepts: Vec::new(),
            stopwords: HashSet::new(),
            vad: HashMap::new(),
        }
    }

    /// Sorted tuples for a token; stopwords and unknown tokens get the
    /// empty list.
    pub fn retrieve(&self, token: &str) -> &[ConceptTuple] {
        if self.stopwords.contains(token) {
            return &[];
        }
        self.neighbors.get(token).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Number of distinct concepts (the concept vocabulary size).
    pub fn concept_vocab_len(&self) -> usize {
        self.concepts.len()
    }

    /// Concept id -> concept string.
    pub fn concept(&self, id: usize) -> &str {
        &self.concepts[id]
    }

    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn is_stopword(&self, token: &str) -> bool {
        self.stopwords.contains(token)
    }

    pub fn vad(&self, word: &str) -> Option<&VadEntry> {
        self.vad.get(word)
    }

    pub fn tokens_with_knowledge(&self) -> usize {
        self.neighbors.len()
    }

    /// Keep each distinct concept independently with probability `fraction`
    /// (seeded, order-independent) and drop every tuple referencing a
    /// removed concept. The per-concept draws depend only on (seed, concept),
    /// so the kept sets are nested across fractions with the same seed.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<KnowledgeIndex, KnowledgeError> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(KnowledgeError::InvalidFraction(fraction));
        }
        let kept: HashSet<&str> = self
            .concepts
            .iter()
            .filter(|c| concept_unit_draw(seed, c) < fraction)
            .map(String::as_str)
            .collect();
        let edges: BTreeMap<String, BTreeMap<String, f64>> = self
            .neighbors
            .iter()
            .map(|(token, tuples)| {
                let survivors = tuples
                    .iter()
                    .filter(|t| kept.contains(t.concept.as_str()))
                    .map(|t| (t.concept.clone(), t.confidence))
                    .collect();
                (token.clone(), survivors)
            })
            .collect();
        Ok(KnowledgeIndex::from_edges(
            edges,
            self.stopwords.clone(),
            self.vad.clone(),
        ))
    }
}

/// Deterministic uniform draw in [0, 1) from (seed, concept): FNV-1a over
/// the concept bytes mixed with the seed through a splitmix64 finalizer.
/// Stable across runs and independent of iteration order.
fn concept_unit_draw(seed: u64, concept: &str) -> f64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in concept.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}
