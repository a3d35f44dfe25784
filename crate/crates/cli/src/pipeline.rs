//! Assembly of the full pipeline from a run configuration: corpus loading,
//! vocabulary, knowledge index (with subsampling), and a seeded model.

use ket_core::data::{
    class_weights, label_counts, load_conversations, load_embedding_map, make_examples,
    Conversation, Example, Vocabulary,
};
use ket_core::knowledge::{load_conceptnet, load_stopwords, load_vad, KnowledgeIndex};
use ket_core::model::{EmbeddingInit, KetModel, ModelConfig};
use ket_core::tensor::rng::SeededRng;

use crate::config::RunConfig;
use crate::CliError;

/// Everything derived deterministically from the configuration and the
/// input files, before any parameters exist.
pub struct World {
    pub vocab: Vocabulary,
    pub kb: KnowledgeIndex,
    pub model_config: ModelConfig,
    pub majority_index: usize,
    pub train_convs: Vec<Conversation>,
    pub val_convs: Vec<Conversation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

pub fn build_world(cfg: &RunConfig) -> Result<World, CliError> {
    let train_convs = load_conversations(&cfg.data.train, &cfg.classes)
        .map_err(|e| CliError::Config(vec![format!("data.train: {e}")]))?;
    let val_convs = load_conversations(&cfg.data.val, &cfg.classes)
        .map_err(|e| CliError::Config(vec![format!("data.val: {e}")]))?;
    if train_convs.is_empty() {
        return Err(CliError::Config(vec![
            "data.train: corpus has no conversations".into(),
        ]));
    }
    if val_convs.is_empty() {
        return Err(CliError::Config(vec![
            "data.val: corpus has no conversations".into(),
        ]));
    }
    let vocab = Vocabulary::build(&train_convs, cfg.training.min_freq);
    let stopwords = load_stopwords(&cfg.data.stopwords)
        .map_err(|e| CliError::Config(vec![format!("data.stopwords: {e}")]))?;
    let (vad, vad_stats) =
        load_vad(&cfg.data.vad).map_err(|e| CliError::Config(vec![format!("data.vad: {e}")]))?;
    let (kb, kb_stats) = load_conceptnet(&cfg.data.conceptnet, &vocab, &stopwords, &vad)
        .map_err(|e| CliError::Config(vec![format!("data.conceptnet: {e}")]))?;
    let kb = kb
        .subsample(cfg.knowledge_fraction, cfg.training.seed)
        .map_err(|e| CliError::Config(vec![format!("knowledge_fraction: {e}")]))?;
    log::info!(
        "vocabulary {} tokens; knowledge {} assertions read ({} skipped), {} VAD rows ({} rejected), {} concepts after fraction {}",
        vocab.len(),
        kb_stats.rows,
        kb_stats.skipped,
        vad_stats.rows,
        vad_stats.skipped,
        kb.concept_vocab_len(),
        cfg.knowledge_fraction
    );

    let lambda = cfg.lambda_mode().map_err(|e| CliError::Config(vec![e]))?;
    let model_config = ModelConfig {
        context_len: cfg.model.context_length,
        utterance_len: cfg.model.tokens_per_utterance,
        embed_dim: cfg.model.embed_dim,
        ff_hidden: cfg.model.ff_hidden,
        heads: cfg.model.heads,
        classes: cfg.classes.len(),
        word_vocab: vocab.len(),
        concept_vocab: kb.concept_vocab_len(),
        lambda,
    };
    let majority_index = cfg
        .majority_index()
        .ok_or_else(|| CliError::Config(vec!["majority_class: not in class list".into()]))?;
    Ok(World {
        vocab,
        kb,
        model_config,
        majority_index,
        train_convs,
        val_convs,
    })
}

/// Build the model with the configured seed. One RNG drives the embedding
/// initialization and then the weight initialization, so a (config, seed)
/// pair fully determines every parameter.
pub fn build_model(cfg: &RunConfig, world: &World) -> Result<KetModel, CliError> {
    let mut rng = SeededRng::new(cfg.training.seed);
    let d = cfg.model.embed_dim;
    let init = match &cfg.data.embeddings {
        Some(path) => {
            let (map, stats) = load_embedding_map(path, d)
                .map_err(|e| CliError::Config(vec![format!("data.embeddings: {e}")]))?;
            log::info!(
                "pretrained embeddings: {} vectors loaded ({} lines skipped)",
                map.len(),
                stats.skipped_lines
            );
            let word = ket_core::data::embedding_matrix(
                world.vocab.tokens(),
                Some(&map),
                d,
                true,
                &mut rng,
            );
            let concept = ket_core::data::embedding_matrix(
                world.kb.concepts(),
                Some(&map),
                d,
                false,
                &mut rng,
            );
            EmbeddingInit {
                word: Some(word),
                concept: Some(concept),
            }
        }
        None => EmbeddingInit::default(),
    };
    KetModel::new(world.model_config.clone(), init, &mut rng)
        .map_err(|e| CliError::Config(vec![format!("model: {e}")]))
}

pub fn split_examples(
    cfg: &RunConfig,
    world: &World,
    split: Split,
) -> Result<Vec<Example>, CliError> {
    let convs = match split {
        Split::Train => world.train_convs.clone(),
        Split::Val => world.val_convs.clone(),
        Split::Test => load_conversations(&cfg.data.test, &cfg.classes)
            .map_err(|e| CliError::Config(vec![format!("data.test: {e}")]))?,
    };
    Ok(make_examples(
        &convs,
        &world.vocab,
        cfg.model.context_length,
        cfg.model.tokens_per_utterance,
    ))
}

pub fn training_class_weights(cfg: &RunConfig, world: &World) -> Vec<f64> {
    class_weights(
        &label_counts(&world.train_convs, cfg.classes.len()),
        &label_counts(&world.val_convs, cfg.classes.len()),
    )
}
