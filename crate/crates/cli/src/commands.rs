//! Command implementations. Reports are UTF-8 JSON on stdout; logs and
//! progress go to stderr; artifacts land in the configured output directory.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::json;

use ket_core::data::load_conversations_lenient;
use ket_core::data::make_examples;
use ket_core::model::{checkpoint, gradcheck, KetModel};
use ket_core::train::{evaluate, train, TrainConfig, TrainError};

use crate::config::RunConfig;
use crate::pipeline::{
    build_model, build_world, split_examples, training_class_weights, Split, World,
};
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

fn load_model_from_checkpoint(
    cfg: &RunConfig,
    world: &World,
    checkpoint_path: &Path,
) -> Result<KetModel, CliError> {
    let model = build_model(cfg, world)?;
    let loaded = checkpoint::load(checkpoint_path).map_err(CliError::from_model_error)?;
    model
        .load_checkpoint(&loaded)
        .map_err(CliError::from_model_error)?;
    Ok(model)
}

/// Train once into the configured output directory; returns the summary.
fn train_single(cfg: &RunConfig) -> Result<serde_json::Value, CliError> {
    let world = build_world(cfg)?;
    let model = build_model(cfg, &world)?;
    let train_examples = split_examples(cfg, &world, Split::Train)?;
    let val_examples = split_examples(cfg, &world, Split::Val)?;
    let weights = training_class_weights(cfg, &world);

    fs::create_dir_all(&cfg.data.output_dir)
        .map_err(|e| CliError::Runtime(format!("output_dir: {e}")))?;
    let log_path = cfg.data.output_dir.join(TRAIN_LOG_FILE);
    let mut log_file = fs::File::create(&log_path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", log_path.display())))?;
    let echo = cfg.echo();
    writeln!(log_file, "{}", json!({ "config_echo": cfg }))
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    let train_cfg = TrainConfig {
        epochs: cfg.training.epochs,
        patience: cfg.training.patience,
        batch_size: cfg.training.batch_size,
        learning_rate: cfg.training.learning_rate,
        seed: cfg.training.seed,
        metric: cfg.metric,
        majority_class: world.majority_index,
        class_names: cfg.classes.clone(),
        class_weights: weights,
    };
    let outcome = train(
        &model,
        &train_examples,
        &val_examples,
        &world.kb,
        &world.vocab,
        &train_cfg,
        &mut log_file,
    )
    .map_err(|e| match e {
        TrainError::NanLoss { .. } => CliError::Runtime(e.to_string()),
        TrainError::Io(io) => CliError::Runtime(io.to_string()),
    })?;

    let ckpt_path = cfg.data.output_dir.join(CHECKPOINT_FILE);
    checkpoint::save(&ckpt_path, &echo, model.parameters()).map_err(CliError::from_model_error)?;

    Ok(json!({
        "seed": cfg.training.seed,
        "checkpoint": ckpt_path,
        "train_log": log_path,
        "best_val_metric": outcome.best_metric,
        "best_epoch": outcome.best_epoch,
        "epochs_run": outcome.epochs_run,
    }))
}

/// Train `repeats` independent runs (seeds seed, seed+1, ...) and report
/// each run plus the mean of the best validation metrics. A single run
/// writes directly into the output directory; repeated runs write into
/// repeat-<i> subdirectories.
pub fn cmd_train(cfg: &RunConfig, repeats: usize) -> Result<(), CliError> {
    assert!(repeats >= 1);
    if repeats == 1 {
        let mut summary = train_single(cfg)?;
        summary["config_echo"] = serde_json::to_value(cfg).expect("config serializes");
        println!("{summary}");
        return Ok(());
    }
    let mut runs = Vec::with_capacity(repeats);
    for i in 0..repeats {
        let mut run_cfg = cfg.clone();
        run_cfg.training.seed = cfg.training.seed + i as u64;
        run_cfg.data.output_dir = cfg.data.output_dir.join(format!("repeat-{i}"));
        runs.push(train_single(&run_cfg)?);
    }
    let mean: f64 = runs
        .iter()
        .map(|r| r["best_val_metric"].as_f64().unwrap_or(0.0))
        .sum::<f64>()
        / repeats as f64;
    let summary = json!({
        "config_echo": cfg,
        "repeats": runs,
        "mean_best_val_metric": mean,
    });
    println!("{summary}");
    Ok(())
}

pub fn cmd_evaluate(cfg: &RunConfig, checkpoint_path: &Path, split: Split) -> Result<(), CliError> {
    let world = build_world(cfg)?;
    let model = load_model_from_checkpoint(cfg, &world, checkpoint_path)?;
    let examples = split_examples(cfg, &world, split)?;
    let report = evaluate(
        &model,
        &examples,
        &world.kb,
        &world.vocab,
        &cfg.classes,
        world.majority_index,
    );
    let out = json!({
        "config_echo": cfg,
        "split": split.to_string(),
        "examples": examples.len(),
        "report": report,
    });
    println!("{out}");
    Ok(())
}

pub fn cmd_predict(cfg: &RunConfig, checkpoint_path: &Path, input: &Path) -> Result<(), CliError> {
    let world = build_world(cfg)?;
    let model = load_model_from_checkpoint(cfg, &world, checkpoint_path)?;
    let (conversations, skipped) = load_conversations_lenient(input, &cfg.classes)
        .map_err(|e| CliError::Config(vec![format!("predict input: {e}")]))?;
    println!(
        "{}",
        json!({ "config_echo": cfg, "skipped_lines": skipped })
    );
    let ctx = model.batch_context(&world.kb, &world.vocab);
    for (conv_idx, conv) in conversations.iter().enumerate() {
        let examples = make_examples(
            std::slice::from_ref(conv),
            &world.vocab,
            cfg.model.context_length,
            cfg.model.tokens_per_utterance,
        );
        for (utt_idx, example) in examples.iter().enumerate() {
            let (pred, probs) = model.predict(example, &ctx);
            let probabilities: serde_json::Map<String, serde_json::Value> = cfg
                .classes
                .iter()
                .zip(&probs)
                .map(|(c, p)| (c.clone(), json!(p)))
                .collect();
            let record = json!({
                "conversation": conv_idx,
                "utterance": utt_idx,
                "label": cfg.classes[pred],
                "probabilities": probabilities,
            });
            println!("{record}");
        }
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} malformed input lines");
    }
    Ok(())
}

pub fn cmd_inspect_knowledge(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    utterance: &str,
    context: &[String],
) -> Result<(), CliError> {
    let world = build_world(cfg)?;
    let model = load_model_from_checkpoint(cfg, &world, checkpoint_path)?;
    // build one conversation out of the provided turns; the utterance under
    // inspection is the response
    let mut utterances: Vec<ket_core::data::Utterance> = context
        .iter()
        .map(|text| ket_core::data::Utterance {
            text: text.clone(),
            label: 0,
        })
        .collect();
    utterances.push(ket_core::data::Utterance {
        text: utterance.to_string(),
        label: 0,
    });
    let conv = ket_core::data::Conversation { utterances };
    let examples = make_examples(
        std::slice::from_ref(&conv),
        &world.vocab,
        cfg.model.context_length,
        cfg.model.tokens_per_utterance,
    );
    let example = examples.last().expect("conversation has utterances");
    let ctx = model.batch_context(&world.kb, &world.vocab);
    let inspections = model.inspect_response(example, &ctx);

    let tokens: Vec<serde_json::Value> = inspections
        .iter()
        .map(|ins| match &ins.scores {
            Some(scores) => {
                // concepts sorted by attention weight, strongest first
                let mut order: Vec<usize> = (0..scores.concepts.len()).collect();
                order.sort_by(|&a, &b| {
                    scores.alpha[b]
                        .partial_cmp(&scores.alpha[a])
                        .unwrap_or(std::cmp::Ordering::Equal)
                });
                let concepts: Vec<serde_json::Value> = order
                    .iter()
                    .map(|&k| {
                        json!({
                            "concept": scores.concepts[k],
                            "rel": scores.rel[k],
                            "aff": scores.aff[k],
                            "w": scores.w[k],
                            "alpha": scores.alpha[k],
                        })
                    })
                    .collect();
                json!({ "token": ins.token, "concepts": concepts })
            }
            None => json!({ "token": ins.token, "fallback": "table mean" }),
        })
        .collect();
    let out = json!({ "config_echo": cfg, "utterance": utterance, "tokens": tokens });
    println!("{out}");
    Ok(())
}

pub fn cmd_gradcheck(seed: u64, corrupt_backward: bool) -> Result<(), CliError> {
    let report = gradcheck::run(seed, corrupt_backward);
    println!(
        "{}",
        serde_json::to_string(&report).expect("report serializes")
    );
    for group in report.ops.iter().chain(&report.model_groups) {
        log::info!(
            "{}: max rel error {:.3e} [{}]",
            group.group,
            group.max_rel_error,
            if group.pass { "pass" } else { "FAIL" }
        );
    }
    if report.pass {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed(
            "gradient check failed: analytic and finite-difference gradients disagree".into(),
        ))
    }
}
