//! Write a ready-to-train demo corpus (JSONL splits, knowledge files, and a
//! matching run configuration) into a directory.
//!
//!     cargo run -p ket-testkit --example make_demo_corpus -- demo/

use std::path::PathBuf;

fn main() {
    let dir: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("demo"));
    let corpus = ket_testkit::learnability_corpus(1234);
    let paths = corpus.write_to(&dir).expect("write corpus");
    let config = serde_json::json!({
        "data": {
            "train": paths.train,
            "val": paths.val,
            "test": paths.test,
            "conceptnet": paths.conceptnet,
            "vad": paths.vad,
            "stopwords": paths.stopwords,
            "embeddings": null,
            "output_dir": dir.join("out"),
        },
        "model": {
            "context_length": 2,
            "tokens_per_utterance": 12,
            "embed_dim": 32,
            "ff_hidden": 64,
            "heads": 4,
            "lambda_mode": "learned",
            "lambda_value": 0.5,
        },
        "training": {
            "epochs": 50,
            "patience": 10,
            "seed": 1,
            "batch_size": 32,
            "learning_rate": 0.001,
            "min_freq": 1,
        },
        "classes": corpus.classes,
        "majority_class": corpus.majority_class,
        "metric": "micro_f1_excluding_majority",
        "knowledge_fraction": 1.0,
    });
    let config_path = dir.join("config.json");
    std::fs::write(
        &config_path,
        serde_json::to_string_pretty(&config).expect("serialize config"),
    )
    .expect("write config");
    println!("demo corpus written; config at {}", config_path.display());
}
