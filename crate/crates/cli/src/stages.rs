//! Pipeline stages. Each reads its inputs through the run manifest and
//! records its outputs there.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use picl_core::constructor::{
    construct_all, filter_instances, read_instances, score_instances, summarize, write_instances, BuildConfig,
    FilterCounts, PretrainInstance,
};
use picl_core::corpus::{self, build_tokenizer, corpus_stats, CorpusManifest, ParagraphStore, SplitParams, Tokenizer};
use picl_core::encoder::{train_encoder, EncoderModel, TaskDataset};
use picl_core::eval::{
    compare_datasets, few_shot_eval, generation_eval, mean_std, EvalReport, EvalTask, ShotConfig, TaskKind,
    REPORT_CSV_HEADER,
};
use picl_core::lm::mixed::encode_with_bos;
use picl_core::lm::{
    train_mixed, ExternalScorer, ExternalScorerConfig, LmScorer, NGramScorer, NeuralLm, NeuralScorer,
};
use picl_core::retrieval::{read_dump, retrieve_all, write_dump, Bm25Index, Bm25Params, RetrievalResources, Strategy};
use picl_core::util::{fnv1a, rng_for};
use picl_core::vecindex::{
    default_n_lists, default_n_probe, read_embeddings, sidecar_path, write_embeddings, EmbeddingMatrix, ExactIndex,
    IvfIndex,
};
use rayon::prelude::*;

use crate::config::{PipelineConfig, ScorerKind};
use crate::manifest::{RunManifest, StageOutput};
use crate::CliError;

pub const SCORER_ENV: &str = "PICL_SCORER_CMD";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    BuildCorpus,
    TrainEncoder,
    Embed,
    BuildIndex,
    Retrieve,
    Construct,
    Filter,
    Pretrain,
    Eval,
    Compare,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::BuildCorpus,
        Stage::TrainEncoder,
        Stage::Embed,
        Stage::BuildIndex,
        Stage::Retrieve,
        Stage::Construct,
        Stage::Filter,
        Stage::Pretrain,
        Stage::Eval,
        Stage::Compare,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::BuildCorpus => "build-corpus",
            Stage::TrainEncoder => "train-encoder",
            Stage::Embed => "embed",
            Stage::BuildIndex => "build-index",
            Stage::Retrieve => "retrieve",
            Stage::Construct => "construct",
            Stage::Filter => "filter",
            Stage::Pretrain => "pretrain",
            Stage::Eval => "eval",
            Stage::Compare => "compare",
        }
    }

    /// Direct upstream stages under a config.
    pub fn requires(self, cfg: &PipelineConfig) -> Vec<Stage> {
        let dense = cfg.retrieval.strategy.is_dense();
        match self {
            Stage::BuildCorpus | Stage::TrainEncoder => vec![],
            Stage::Embed => vec![Stage::BuildCorpus, Stage::TrainEncoder],
            Stage::BuildIndex if dense => vec![Stage::BuildCorpus, Stage::Embed],
            Stage::BuildIndex => vec![Stage::BuildCorpus],
            Stage::Retrieve => vec![Stage::BuildIndex],
            Stage::Construct => vec![Stage::Retrieve],
            Stage::Filter => vec![Stage::Construct],
            Stage::Pretrain => vec![Stage::Filter],
            Stage::Eval => vec![Stage::Pretrain],
            Stage::Compare => vec![Stage::Filter],
        }
    }

    /// Every transitive upstream stage, in pipeline order.
    pub fn closure(self, cfg: &PipelineConfig) -> Vec<Stage> {
        let mut out = Vec::new();
        let mut todo = self.requires(cfg);
        while let Some(s) = todo.pop() {
            if !out.contains(&s) {
                out.push(s);
                todo.extend(s.requires(cfg));
            }
        }
        out.sort();
        out
    }

    /// Stages `run` executes for a config, in order.
    pub fn plan(cfg: &PipelineConfig) -> Vec<Stage> {
        let mut last = vec![Stage::Pretrain];
        if !cfg.eval.tasks.is_empty() {
            last.push(Stage::Eval);
        }
        if cfg.constructor.scorer.kind != ScorerKind::None {
            last.push(Stage::Compare);
        }
        let mut out: Vec<Stage> = last.iter().flat_map(|s| s.closure(cfg)).chain(last.iter().copied()).collect();
        out.sort();
        out.dedup();
        out
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown stage {s:?}")))
    }
}

/// One run directory under one config.
pub struct Run {
    pub dir: PathBuf,
    pub cfg: PipelineConfig,
    pub hash: String,
    pub manifest: RunManifest,
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

/// Per-paragraph documents rebuilt from the store, in id order.
pub fn documents_from_store(store: &ParagraphStore) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut current: Option<&str> = None;
    for p in store.paragraphs() {
        if current == Some(p.doc_id.as_str()) {
            let last = out.last_mut().expect("open document");
            last.push('\n');
            last.push_str(&p.text);
        } else {
            out.push(p.text.clone());
            current = Some(&p.doc_id);
        }
    }
    out
}

impl Run {
    pub fn open(dir: &Path, cfg: PipelineConfig) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let hash = cfg.hash();
        let manifest = match RunManifest::load(dir)? {
            Some(mut m) => {
                if m.config_hash != hash {
                    log::warn!("config differs from the one recorded in {}", dir.display());
                    m.config_hash = hash.clone();
                }
                m
            }
            None => RunManifest::new(hash.clone()),
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            cfg,
            hash,
            manifest,
        })
    }

    pub fn has(&self, stage: Stage) -> bool {
        self.manifest.stages.contains_key(stage.name())
    }

    /// Fail with the earliest missing upstream stage.
    pub fn check_dependencies(&self, stage: Stage) -> Result<(), CliError> {
        match stage.closure(&self.cfg).into_iter().find(|s| !self.has(*s)) {
            Some(missing) => Err(CliError::MissingStage {
                stage: stage.name().into(),
                required: missing.name().into(),
            }),
            None => Ok(()),
        }
    }

    fn artifact(&self, stage: Stage, name: &str) -> Result<PathBuf, CliError> {
        let missing = || CliError::MissingStage {
            stage: format!("artifact {name}"),
            required: stage.name().into(),
        };
        let rec = self.manifest.stages.get(stage.name()).ok_or_else(missing)?;
        let art = rec.artifacts.get(name).ok_or_else(missing)?;
        let p = self.dir.join(&art.path);
        if !p.exists() {
            return Err(missing());
        }
        Ok(p)
    }

    fn count(&self, stage: Stage, name: &str) -> Option<&serde_json::Value> {
        self.manifest.stages.get(stage.name())?.counts.get(name)
    }

    pub fn execute(&mut self, stage: Stage) -> Result<(), CliError> {
        if stage != Stage::BuildCorpus && stage != Stage::TrainEncoder {
            self.check_dependencies(stage)?;
        }
        log::info!("running {stage}");
        let t0 = Instant::now();
        let mut out = StageOutput::new(&self.dir, &self.hash);
        match stage {
            Stage::BuildCorpus => self.build_corpus(&mut out)?,
            Stage::TrainEncoder => self.train_encoder(&mut out)?,
            Stage::Embed => self.embed(&mut out)?,
            Stage::BuildIndex => self.build_index(&mut out)?,
            Stage::Retrieve => self.retrieve(&mut out)?,
            Stage::Construct => self.construct(&mut out)?,
            Stage::Filter => self.filter(&mut out)?,
            Stage::Pretrain => self.pretrain(&mut out)?,
            Stage::Eval => self.eval(&mut out)?,
            Stage::Compare => self.compare(&mut out)?,
        }
        out.record.wall_clock_secs = t0.elapsed().as_secs_f64();
        out.record.finished_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        self.manifest.stages.insert(stage.name().to_string(), out.record);
        // Downstream results are stale once an upstream stage reruns.
        let stale: Vec<Stage> = Stage::ALL
            .into_iter()
            .filter(|s| s.closure(&self.cfg).contains(&stage))
            .collect();
        for s in stale {
            self.manifest.stages.remove(s.name());
        }
        self.manifest.config_hash = self.hash.clone();
        write_text(&self.dir.join(CONFIG_FILE), &self.cfg.canonical())?;
        self.manifest.save(&self.dir)
    }

    /// Run every stage of the plan that has not completed yet.
    pub fn run_missing(&mut self) -> Result<(), CliError> {
        for stage in Stage::plan(&self.cfg) {
            if !self.has(stage) {
                self.execute(stage)?;
            }
        }
        Ok(())
    }

    // ---- loaders ----

    pub fn load_tokenizer(&self) -> Result<Tokenizer, CliError> {
        let p = self.artifact(Stage::BuildCorpus, "tokenizer")?;
        Tokenizer::from_json(&read_text(&p)?).map_err(|e| CliError::runtime(format!("{}: {e}", p.display())))
    }

    pub fn load_store(&self) -> Result<ParagraphStore, CliError> {
        let mp = self.artifact(Stage::BuildCorpus, "corpus_manifest")?;
        let cm: CorpusManifest =
            serde_json::from_str(&read_text(&mp)?).map_err(|e| CliError::runtime(format!("{}: {e}", mp.display())))?;
        Ok(ParagraphStore::read_jsonl(&self.artifact(Stage::BuildCorpus, "paragraphs")?, &cm)?)
    }

    fn scorer(&self, store: &ParagraphStore) -> Result<Option<Box<dyn LmScorer>>, CliError> {
        let s = &self.cfg.constructor.scorer;
        Ok(match s.kind {
            ScorerKind::None => None,
            ScorerKind::Ngram | ScorerKind::Unigram => {
                let tok = self.load_tokenizer()?;
                let docs = documents_from_store(store);
                let texts: Vec<&str> = docs.iter().map(String::as_str).collect();
                let mut sc = if s.kind == ScorerKind::Ngram {
                    NGramScorer::train(&texts, tok, s.order, &s.lambdas)?
                } else {
                    NGramScorer::train(&texts, tok, 1, &[1.0])?
                };
                sc.skip_newlines = s.kind == ScorerKind::Unigram;
                Some(Box::new(sc))
            }
            ScorerKind::External => {
                let command = std::env::var(SCORER_ENV).unwrap_or_else(|_| s.command.clone());
                if command.trim().is_empty() {
                    return Err(CliError::Config(format!(
                        "external scorer needs constructor.scorer.command or {SCORER_ENV}"
                    )));
                }
                let ext = ExternalScorerConfig {
                    command,
                    env: Vec::new(),
                    timeout_secs: s.timeout_secs,
                    max_restarts: s.max_restarts,
                };
                Some(Box::new(ExternalScorer::spawn(ext)?))
            }
        })
    }

    fn load_instances(&self, stage: Stage, name: &str) -> Result<Vec<PretrainInstance>, CliError> {
        Ok(read_instances(&self.artifact(stage, name)?)?)
    }

    pub fn load_eval_reports(&self) -> Result<Vec<EvalReport>, CliError> {
        let p = self.artifact(Stage::Eval, "report")?;
        serde_json::from_str(&read_text(&p)?).map_err(|e| CliError::runtime(format!("{}: {e}", p.display())))
    }

    // ---- stages ----

    fn build_corpus(&self, out: &mut StageOutput) -> Result<(), CliError> {
        let c = &self.cfg.corpus;
        let (docs, skipped) = corpus::ingest(&c.input, c.format)?;
        let max_vocab = (c.max_vocab > 0).then_some(c.max_vocab);
        let tok = build_tokenizer(&docs, c.lowercase, max_vocab, c.min_count);
        let params = SplitParams {
            min_merge: c.min_merge,
            max_len: c.max_len,
        };
        let store = ParagraphStore::build(&docs, &tok, params)?;
        let stats = corpus_stats(&store)?;
        write_text(&out.path("tokenizer.json"), &tok.to_json().map_err(CliError::runtime)?)?;
        store.write_jsonl(&out.path("paragraphs.jsonl"))?;
        write_text(&out.path("corpus_manifest.json"), &to_json(&stats))?;
        out.artifact("tokenizer", "tokenizer.json")?;
        out.artifact("paragraphs", "paragraphs.jsonl")?;
        out.artifact("corpus_manifest", "corpus_manifest.json")?;
        out.count("n_docs", stats.n_docs);
        out.count("n_paragraphs", stats.n_paragraphs);
        out.count("dropped_overlong", stats.dropped_overlong);
        out.count("skipped_empty", skipped);
        out.count("vocab_size", tok.vocab_size());
        Ok(())
    }

    fn train_encoder(&self, out: &mut StageOutput) -> Result<(), CliError> {
        let e = &self.cfg.encoder;
        let ds = TaskDataset::load(&e.examples, &e.templates)?;
        let (model, report) = train_encoder(&ds, &e.train_config())?;
        model.save(&out.path("encoder.bin"))?;
        let mut csv = String::from("step,loss\n");
        for (i, l) in report.losses.iter().enumerate() {
            csv.push_str(&format!("{i},{l}\n"));
        }
        write_text(&out.path("encoder_losses.csv"), &csv)?;
        out.artifact("encoder", "encoder.bin")?;
        out.artifact("losses", "encoder_losses.csv")?;
        out.count("n_examples", ds.examples().len());
        out.count("n_tasks", ds.n_tasks());
        out.count("steps", report.losses.len());
        out.count("initial_loss", report.initial_loss());
        out.count("final_loss", report.final_loss());
        Ok(())
    }

    fn embed(&self, out: &mut StageOutput) -> Result<(), CliError> {
        let store = self.load_store()?;
        let enc = EncoderModel::load(&self.artifact(Stage::TrainEncoder, "encoder")?)?;
        let rows: Vec<Vec<f32>> = store.paragraphs().par_iter().map(|p| enc.embed(&p.text)).collect();
        let m = EmbeddingMatrix::from_rows(rows, store.ids())?;
        write_embeddings(&m, &out.path("embeddings.bin"))?;
        let sidecar = sidecar_path(Path::new("embeddings.bin"));
        out.artifact("embeddings", "embeddings.bin")?;
        out.artifact("ids", &sidecar.to_string_lossy())?;
        out.count("n", m.n());
        out.count("d", m.d());
        Ok(())
    }

    fn n_probe(&self, k_c: usize) -> usize {
        match self.cfg.index.n_probe {
            0 => default_n_probe(k_c),
            n => n.min(k_c),
        }
    }

    fn build_index(&self, out: &mut StageOutput) -> Result<(), CliError> {
        let ix = &self.cfg.index;
        let strategy = self.cfg.retrieval.strategy;
        out.count("strategy", strategy);
        match strategy {
            Strategy::DenseExact => {
                let m = read_embeddings(&self.artifact(Stage::Embed, "embeddings")?)?;
                out.count("n", m.n());
            }
            Strategy::DenseIvf => {
                let m = read_embeddings(&self.artifact(Stage::Embed, "embeddings")?)?;
                let k_c = match ix.n_lists {
                    0 => default_n_lists(m.n()),
                    n => n,
                };
                let ivf = IvfIndex::build(&m, k_c, ix.kmeans_iters, ix.seed)?;
                ivf.save(&out.path("ivf.bin"))?;
                out.artifact("ivf", "ivf.bin")?;
                out.count("k_c", k_c);
                out.count("n_probe", self.n_probe(k_c));
            }
            Strategy::Bm25 => {
                let store = self.load_store()?;
                let bm = Bm25Index::build(
                    &store,
                    Bm25Params {
                        k1: ix.bm25_k1,
                        b: ix.bm25_b,
                    },
                )?;
                write_text(&out.path("bm25.json"), &bm.to_json().map_err(CliError::runtime)?)?;
                out.artifact("bm25", "bm25.json")?;
                out.count("n", bm.n());
            }
            Strategy::Random => {}
        }
        Ok(())
    }

    fn retrieve(&self, out: &mut StageOutput) -> Result<(), CliError> {
        let store = self.load_store()?;
        let r = &self.cfg.retrieval;
        let mut res = RetrievalResources {
            store: Some(&store),
            seed: r.seed,
            ..Default::default()
        };
        let (emb, exact, ivf, bm25);
        match r.strategy {
            Strategy::DenseExact => {
                exact = ExactIndex::build(read_embeddings(&self.artifact(Stage::Embed, "embeddings")?)?)?;
                res.exact = Some(&exact);
            }
            Strategy::DenseIvf => {
                // Queries use their stored rows.
                emb = read_embeddings(&self.artifact(Stage::Embed, "embeddings")?)?;
                ivf = IvfIndex::load(&self.artifact(Stage::BuildIndex, "ivf")?)?;
                res.n_probe = self.n_probe(ivf.k_c());
                res.embeddings = Some(&emb);
                res.ivf = Some(&ivf);
            }
            Strategy::Bm25 => {
                let p = self.artifact(Stage::BuildIndex, "bm25")?;
                bm25 = Bm25Index::from_json(&read_text(&p)?)
                    .map_err(|e| CliError::runtime(format!("{}: {e}", p.display())))?;
                res.bm25 = Some(&bm25);
            }
            Strategy::Random => {}
        }
        let results = retrieve_all(r.strategy, &store, r.k, &res)?;
        write_dump(&results, &out.path("retrievals.jsonl"))?;
        out.artifact("retrievals", "retrievals.jsonl")?;
        out.count("n_queries", results.len());
        out.count("strategy", r.strategy);
        out.count("k", r.k);
        Ok(())
    }

    fn construct(&self, out: &mut StageOutput) -> Result<(), CliError> {
        let store = self.load_store()?;
        let retrievals = read_dump(&self.artifact(Stage::Retrieve, "retrievals")?)?;
        let (mut instances, dropped) = construct_all(&store, &retrievals, self.cfg.constructor.budget)?;
        if let Some(scorer) = self.scorer(&store)? {
            score_instances(&mut instances, &store, scorer.as_ref())?;
        }
        write_instances(&instances, &out.path("candidates.jsonl"))?;
        out.artifact("candidates", "candidates.jsonl")?;
        out.count("n_candidates", instances.len());
        out.count("n_dropped_over_budget", dropped);
        Ok(())
    }

    fn filter(&self, out: &mut StageOutput) -> Result<(), CliError> {
        let c = &self.cfg.constructor;
        let candidates = self.load_instances(Stage::Construct, "candidates")?;
        let n = candidates.len() as u64;
        let (kept, counts) = if c.delta == f64::NEG_INFINITY {
            (
                candidates,
                FilterCounts {
                    n_candidates: n,
                    n_retained: n,
                },
            )
        } else {
            filter_instances(candidates, c.delta)?
        };
        let dropped = self
            .count(Stage::Construct, "n_dropped_over_budget")
            .and_then(serde_json::Value::as_u64)
            .unwrap_or(0);
        let bc = BuildConfig {
            strategy: self.cfg.retrieval.strategy,
            k: self.cfg.retrieval.k,
            budget: c.budget,
            delta: c.delta,
        };
        let manifest = summarize(&kept, counts, dropped, &bc);
        write_instances(&kept, &out.path("instances.jsonl"))?;
        write_text(&out.path("build_manifest.json"), &to_json(&manifest))?;
        out.artifact("instances", "instances.jsonl")?;
        out.artifact("build_manifest", "build_manifest.json")?;
        out.count("n_candidates", counts.n_candidates);
        out.count("n_retained", counts.n_retained);
        out.count("retained_fraction", manifest.retained_fraction);
        Ok(())
    }

    fn pretrain(&self, out: &mut StageOutput) -> Result<(), CliError> {
        let p = &self.cfg.pretrain;
        let tok = self.load_tokenizer()?;
        let store = self.load_store()?;
        let instances = self.load_instances(Stage::Filter, "instances")?;
        let icl = encode_with_bos(&tok, &instances.iter().map(|i| i.text.as_str()).collect::<Vec<_>>());
        let docs_text = documents_from_store(&store);
        let docs = encode_with_bos(&tok, &docs_text.iter().map(String::as_str).collect::<Vec<_>>());
        let mut rng = rng_for(p.seed, fnv1a("lm-init"));
        let model = NeuralLm::random(p.model_config(tok.vocab_size()), &mut rng)?;
        let (model, report) = train_mixed(model, &icl, &docs, &p.mix_config())?;
        model.save(&out.path("lm.bin"))?;
        let mut csv = String::from("step,icl_loss,lm_loss\n");
        for i in 0..report.icl_loss.len().max(report.lm_loss.len()) {
            let cell = |v: &[f64]| v.get(i).map_or(String::new(), |x| x.to_string());
            csv.push_str(&format!("{i},{},{}\n", cell(&report.icl_loss), cell(&report.lm_loss)));
        }
        write_text(&out.path("lm_losses.csv"), &csv)?;
        out.artifact("lm", "lm.bin")?;
        out.artifact("losses", "lm_losses.csv")?;
        out.count("n_icl_sequences", icl.len());
        out.count("n_documents", docs.len());
        out.count("final_icl_loss", report.icl_loss.last());
        out.count("final_lm_loss", report.lm_loss.last());
        Ok(())
    }

    fn eval(&self, out: &mut StageOutput) -> Result<(), CliError> {
        let e = &self.cfg.eval;
        let tok = self.load_tokenizer()?;
        let model = NeuralLm::load(&self.artifact(Stage::Pretrain, "lm")?)?;
        let scorer = NeuralScorer::new(model, tok);
        let shots = ShotConfig {
            n_shots: e.n_shots,
            seeds: e.seeds.clone(),
            max_eval_examples: e.max_eval_examples,
        };
        let mut reports = Vec::new();
        for path in &e.tasks {
            let task = EvalTask::load(path).map_err(|err| CliError::runtime(format!("{}: {err}", path.display())))?;
            let r = match task.kind {
                TaskKind::Classification => few_shot_eval(&task, &scorer, &shots)?,
                TaskKind::Generation => generation_eval(&task, &scorer, &shots, e.max_new_tokens)?,
            };
            log::info!("{}: {} = {:.4} ± {:.4}", r.task, r.metric, r.mean, r.std);
            reports.push(r);
        }
        let mut csv = String::from(REPORT_CSV_HEADER);
        for r in &reports {
            csv.push_str(&r.csv_rows());
        }
        write_text(&out.path("eval_report.json"), &to_json(&reports))?;
        write_text(&out.path("eval.csv"), &csv)?;
        out.artifact("report", "eval_report.json")?;
        out.artifact("csv", "eval.csv")?;
        let (acc, acc_std) = seed_accuracy(&reports);
        out.count("n_tasks", reports.len());
        out.count("accuracy", finite_or_null(acc));
        out.count("accuracy_std", finite_or_null(acc_std));
        Ok(())
    }

    fn compare(&self, out: &mut StageOutput) -> Result<(), CliError> {
        let store = self.load_store()?;
        let scorer = self
            .scorer(&store)?
            .ok_or_else(|| CliError::Config("compare needs a reference scorer (constructor.scorer.kind)".into()))?;
        let r = &self.cfg.retrieval;
        let kept = self.load_instances(Stage::Filter, "instances")?;
        let res = RetrievalResources {
            store: Some(&store),
            seed: r.seed,
            ..Default::default()
        };
        let random = retrieve_all(Strategy::Random, &store, r.k, &res)?;
        let (random_instances, _) = construct_all(&store, &random, self.cfg.constructor.budget)?;
        let sets = vec![
            ("full_doc".to_string(), documents_from_store(&store)),
            ("random_concat".to_string(), random_instances.into_iter().map(|i| i.text).collect()),
            (r.strategy.as_str().to_string(), kept.into_iter().map(|i| i.text).collect()),
        ];
        let cmp = compare_datasets(&sets, scorer.as_ref())?;
        write_text(&out.path("compare.csv"), &cmp.to_csv())?;
        out.artifact("csv", "compare.csv")?;
        for s in &cmp.sets {
            out.count(&format!("ppl_{}", s.name), s.mean_perplexity);
        }
        Ok(())
    }
}

fn finite_or_null(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Mean and std over seeds of the accuracy averaged across classification
/// tasks. NaN when there are none.
pub fn seed_accuracy(reports: &[EvalReport]) -> (f64, f64) {
    let cls: Vec<&EvalReport> = reports.iter().filter(|r| r.metric == "accuracy").collect();
    if cls.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut per_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for r in &cls {
        for s in &r.per_seed {
            per_seed.entry(s.seed).or_default().push(s.value);
        }
    }
    let means: Vec<f64> = per_seed.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    mean_std(&means)
}

/// Write a CSV file from a header and rows.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| CliError::runtime(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

