//! `picl synth`: a synthetic world written as ordinary pipeline inputs.

use std::path::{Path, PathBuf};

use picl_core::synth::{SynthConfig, SynthWorld};

use crate::config::PipelineConfig;
use crate::CliError;

/// World and pipeline settings. `small` trades signal for speed.
pub fn presets(seed: u64, small: bool) -> (SynthConfig, PipelineConfig) {
    let mut world = SynthConfig {
        seed,
        ..Default::default()
    };
    let mut cfg = PipelineConfig::default();
    cfg.corpus.input = PathBuf::from("docs.jsonl");
    cfg.corpus.min_merge = 1;
    cfg.corpus.max_len = 500;
    cfg.encoder.lr = 1.0;
    cfg.encoder.epochs = 5;
    cfg.encoder.batch = 32;
    cfg.encoder.seed = seed;
    cfg.index.seed = seed;
    cfg.retrieval.seed = seed;
    cfg.pretrain.steps = 2000;
    cfg.pretrain.lr = 0.3;
    cfg.pretrain.momentum = 0.9;
    cfg.pretrain.seed = seed;
    cfg.eval.seeds = vec![1, 2, 3];
    cfg.eval.max_eval_examples = 100;
    if small {
        world.n_docs = 60;
        world.encoder_examples_per_task = 24;
        world.eval_examples = 12;
        world.eval_train_pool = 12;
        cfg.encoder.epochs = 1;
        cfg.encoder.n_features = 1 << 12;
        cfg.encoder.dim = 16;
        cfg.pretrain.steps = 20;
        cfg.eval.seeds = vec![1];
        cfg.eval.max_eval_examples = 12;
    }
    (world, cfg)
}

fn write(path: &Path, text: String) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn jsonl<T: serde::Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|i| serde_json::to_string(i).expect("serializable") + "\n")
        .collect()
}

/// Write docs, encoder data, task files and `config.toml` into `out`.
pub fn write_synth(out: &Path, seed: u64, small: bool) -> Result<(), CliError> {
    let (world_cfg, mut cfg) = presets(seed, small);
    let world = SynthWorld::new(world_cfg);
    let tasks_dir = out.join("tasks");
    std::fs::create_dir_all(&tasks_dir).map_err(|e| CliError::io(&tasks_dir, e))?;

    let corpus = world.corpus();
    write(&out.join("docs.jsonl"), jsonl(&corpus.docs))?;
    write(&out.join("paragraph_tasks.json"), json(&corpus.paragraph_tasks))?;
    write(&out.join("encoder_examples.jsonl"), jsonl(&world.encoder_examples()))?;
    write(&out.join("encoder_templates.json"), json(&world.encoder_templates()))?;
    write(&out.join("world.json"), json(&world))?;
    for task in world.eval_tasks() {
        let rel = PathBuf::from("tasks").join(format!("{}.json", task.name));
        write(&out.join(&rel), json(&task))?;
        cfg.eval.tasks.push(rel);
    }
    write(&out.join("config.toml"), cfg.canonical())?;
    log::info!(
        "wrote {} documents and {} tasks to {}",
        corpus.docs.len(),
        cfg.eval.tasks.len(),
        out.display()
    );
    Ok(())
}
