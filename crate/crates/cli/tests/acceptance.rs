//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so every line prints even when an earlier one fails.

use std::collections::{BTreeSet, HashMap};
use std::process::Command;
use std::time::Instant;

use picl_core::constructor::{
    build_pretrain_corpus, construct_instance, filter_instances, informativeness_score, BuildConfig, PretrainInstance,
};
use picl_core::corpus::{build_tokenizer, ParagraphStore, SplitParams, Tokenizer};
use picl_core::encoder::contrastive::{build_contrastive_batch, grad_check_encoder, row_loss, EncoderTrainConfig};
use picl_core::encoder::{train_encoder, EncoderModel, HashSpec};
use picl_core::eval::{compare_datasets, few_shot_eval, lcs_len, rouge_l, ShotConfig};
use picl_core::lm::mixed::encode_with_bos;
use picl_core::lm::{grad_check_lm, train_mixed, MixConfig, NGramScorer, NeuralLm, NeuralLmConfig, NeuralScorer};
use picl_core::retrieval::{retrieve_all, RetrievalResources, RetrievalResult, Strategy};
use picl_core::synth::{gaussian_matrix, per_query_purity, purity, two_blobs, SynthConfig, SynthWorld};
use picl_core::vecindex::{default_n_lists, default_n_probe, recall_at_k, EmbeddingMatrix, ExactIndex, IvfIndex};
use picl_cli::RunManifest;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Pinned tolerances and thresholds.
const CLOSED_FORM_TOL: f64 = 1e-9;
const GRAD_EPS: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_INSTANCES: usize = 20;
const SCORE_TOL: f64 = 1e-9;
const DENSE_PURITY_MIN: f64 = 0.9;
const PURITY_QUERIES: usize = 500;
const PURITY_SIGMAS: f64 = 3.0;
const IVF_RECALL_MIN: f64 = 0.8;
const BLOB_N: usize = 2000;
const BLOB_DIM: usize = 8;
const ROUGE_TOL: f64 = 1e-9;
const K: usize = 20;
const BUDGET: usize = 1024;
const ICL_SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

/// Everything built once on the default synthetic world.
struct World {
    world: SynthWorld,
    task_of: Vec<usize>,
    doc_texts: Vec<String>,
    tok: Tokenizer,
    store: ParagraphStore,
    ngram: NGramScorer,
    dense: Vec<RetrievalResult>,
    random: Vec<RetrievalResult>,
}

impl World {
    fn build() -> Self {
        let world = SynthWorld::new(SynthConfig::default());
        let corpus = world.corpus();
        let tok = build_tokenizer(&corpus.docs, true, None, 1);
        let store = ParagraphStore::build(
            &corpus.docs,
            &tok,
            SplitParams {
                min_merge: 1,
                max_len: 500,
            },
        )
        .expect("synthetic corpus splits");
        let train = EncoderTrainConfig {
            lr: 1.0,
            epochs: 5,
            batch: 32,
            ..Default::default()
        };
        let (enc, _) = train_encoder(&world.encoder_dataset().unwrap(), &train).unwrap();
        let rows: Vec<Vec<f32>> = store.paragraphs().iter().map(|p| enc.embed(&p.text)).collect();
        let exact = ExactIndex::build(EmbeddingMatrix::from_rows(rows, store.ids()).unwrap()).unwrap();
        let res = RetrievalResources {
            exact: Some(&exact),
            store: Some(&store),
            seed: 3,
            ..Default::default()
        };
        let dense = retrieve_all(Strategy::DenseExact, &store, K, &res).unwrap();
        let random = retrieve_all(Strategy::Random, &store, K, &res).unwrap();
        let doc_texts: Vec<String> = corpus.docs.iter().map(|d| d.text.clone()).collect();
        let refs: Vec<&str> = doc_texts.iter().map(String::as_str).collect();
        let ngram = NGramScorer::train(&refs, tok.clone(), 3, &[0.1, 0.3, 0.6]).unwrap();
        Self {
            world,
            task_of: corpus.paragraph_tasks,
            doc_texts,
            tok,
            store,
            ngram,
            dense,
            random,
        }
    }

    fn unfiltered(&self, results: &[RetrievalResult], strategy: Strategy) -> Vec<PretrainInstance> {
        let cfg = BuildConfig {
            strategy,
            k: K,
            budget: BUDGET,
            delta: f64::NEG_INFINITY,
        };
        build_pretrain_corpus(&self.store, results, &cfg, None).unwrap().0
    }
}

fn contrastive_closed_forms() -> Outcome {
    let mut worst: f64 = 0.0;
    for n in [1usize, 4, 64] {
        for logit in [-3.0, 0.0, 0.7, 12.5] {
            let got = row_loss(logit, &vec![logit; n]);
            worst = worst.max((got - (1.0 + n as f64).ln()).abs());
        }
    }
    let empty_exact = row_loss(0.7, &[]) == 0.0 && row_loss(-40.0, &[]) == 0.0;
    outcome(
        worst <= CLOSED_FORM_TOL && empty_exact,
        format!("max |L - ln(1+n)| = {worst:.2e} for n in {{1, 4, 64}}; empty-negative loss exactly 0: {empty_exact}"),
    )
}

fn gradient_checks() -> Outcome {
    let world = SynthWorld::new(SynthConfig {
        n_topics: 2,
        nouns_per_topic: 8,
        modifiers_per_topic: 4,
        encoder_examples_per_task: 6,
        ..Default::default()
    });
    let ds = world.encoder_dataset().unwrap();
    let spec = HashSpec {
        n_features: 128,
        ..Default::default()
    };
    let mut enc_worst: f64 = 0.0;
    let mut lm_worst: f64 = 0.0;
    for i in 0..GRAD_INSTANCES as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
        let model = EncoderModel::random(3 + (i as usize % 3), spec, 0.5, &mut rng).unwrap();
        let batch = build_contrastive_batch(&ds, 3 + (i as usize % 3), (i as usize) % 3, &mut rng).unwrap();
        enc_worst = enc_worst.max(grad_check_encoder(&model, &batch, GRAD_EPS).unwrap());

        let cfg = NeuralLmConfig {
            vocab_size: 7 + (i as usize % 5),
            context: 1 + (i as usize % 3),
            embed: 3,
            hidden: 4,
        };
        let lm = NeuralLm::random(cfg, &mut rng).unwrap();
        let seqs: Vec<Vec<u32>> = (0..3)
            .map(|_| {
                let len = rng.random_range(2..9);
                (0..len).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect()
            })
            .collect();
        lm_worst = lm_worst.max(grad_check_lm(&lm, &seqs, GRAD_EPS).unwrap());
    }
    outcome(
        enc_worst < GRAD_TOL && lm_worst < GRAD_TOL,
        format!(
            "{GRAD_INSTANCES} instances each, eps {GRAD_EPS:e}: encoder max rel err {enc_worst:.2e}, LM max rel err {lm_worst:.2e}"
        ),
    )
}

/// Brute force: score every row in f64, sort by score then id.
fn brute_force(m: &EmbeddingMatrix, q: &[f32], k: usize) -> BTreeSet<u64> {
    let mut scored: Vec<(f64, u64)> = (0..m.n())
        .map(|i| {
            let s: f64 = m.row(i).iter().zip(q).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
            (s, m.ids()[i])
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.iter().take(k).map(|s| s.1).collect()
}

/// Mean recall@20 of IVF at the default list and probe counts on two blobs
/// of unit vectors, with fresh queries from the same distribution.
fn two_blob_recall(d: usize) -> f64 {
    let blobs = two_blobs(BLOB_N, d, 0.3, 21);
    let queries = two_blobs(200, d, 0.3, 22);
    let exact = ExactIndex::build(blobs.clone()).unwrap();
    let k_c = default_n_lists(blobs.n());
    let ivf = IvfIndex::build(&blobs, k_c, 20, 5).unwrap();
    (0..queries.n())
        .map(|q| {
            let a = ivf.search(queries.row(q), 20, default_n_probe(k_c), &[]).unwrap();
            let b = exact.search(queries.row(q), 20, &[]).unwrap();
            recall_at_k(&a, &b).unwrap()
        })
        .sum::<f64>()
        / queries.n() as f64
}

fn retrieval_exactness() -> Outcome {
    let m = gaussian_matrix(1000, 32, 11);
    let queries = gaussian_matrix(200, 32, 12);
    let exact = ExactIndex::build(m.clone()).unwrap();
    let mut mismatched = 0;
    for q in 0..queries.n() {
        for k in [1, 5, 20] {
            let got: BTreeSet<u64> = exact.search(queries.row(q), k, &[]).unwrap().ids.into_iter().collect();
            if got != brute_force(&m, queries.row(q), k) {
                mismatched += 1;
            }
        }
    }

    let k_c = default_n_lists(m.n());
    let ivf = IvfIndex::build(&m, k_c, 20, 5).unwrap();
    let mut ivf_differs = 0;
    for q in 0..queries.n() {
        let a = ivf.search(queries.row(q), 20, k_c, &[]).unwrap();
        let b = exact.search(queries.row(q), 20, &[]).unwrap();
        let same_bits = a.ids == b.ids && a.scores.iter().zip(&b.scores).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same_bits {
            ivf_differs += 1;
        }
    }

    let recall = two_blob_recall(BLOB_DIM);
    let recall_32 = two_blob_recall(32);
    outcome(
        mismatched == 0 && ivf_differs == 0 && recall >= IVF_RECALL_MIN,
        format!(
            "exact vs brute force: {mismatched}/600 mismatches; IVF n_probe=k_c={k_c}: {ivf_differs}/200 differ; \
             two-blob recall@20 at default n_probe, d={BLOB_DIM}: {recall:.3} (min {IVF_RECALL_MIN}); d=32 for reference: {recall_32:.3}"
        ),
    )
}

fn score_identities(w: &World) -> Outcome {
    let n = 1000;
    // Single-segment instances.
    let empty = |id: u64| RetrievalResult {
        query_id: id,
        strategy: Strategy::Random,
        neighbors: vec![],
        scores: vec![],
    };
    let singles: Vec<PretrainInstance> = w.store.paragraphs()[..n]
        .iter()
        .map(|p| construct_instance(p, &empty(p.id), BUDGET, &w.store).unwrap().unwrap())
        .collect();
    let single_worst = singles
        .iter()
        .map(|i| informativeness_score(i, &w.store, &w.ngram).unwrap().abs())
        .fold(0.0, f64::max);

    // Unigram scorer that ignores the join tokens.
    let mut dense = w.unfiltered(&w.dense[..n], Strategy::DenseExact);
    let refs: Vec<&str> = w.doc_texts.iter().map(String::as_str).collect();
    let mut unigram = NGramScorer::train(&refs, w.tok.clone(), 1, &[1.0]).unwrap();
    unigram.skip_newlines = true;
    let unigram_worst = dense
        .iter()
        .map(|i| informativeness_score(i, &w.store, &unigram).unwrap().abs())
        .fold(0.0, f64::max);

    // Strict boundary at delta = 0: mix scored instances with exact zeros.
    for inst in &mut dense {
        inst.score = Some(informativeness_score(inst, &w.store, &w.ngram).unwrap());
    }
    for inst in dense.iter_mut().step_by(7) {
        inst.score = Some(0.0);
    }
    let expected: Vec<u64> = dense.iter().filter(|i| i.score.unwrap() > 0.0).map(|i| i.query_id).collect();
    let n_zero = dense.iter().filter(|i| i.score == Some(0.0)).count();
    let (kept, _) = filter_instances(dense, 0.0).unwrap();
    let got: Vec<u64> = kept.iter().map(|i| i.query_id).collect();
    outcome(
        single_worst <= SCORE_TOL && unigram_worst <= SCORE_TOL && got == expected,
        format!(
            "{n} instances: single-segment max |s| = {single_worst:.1e}; unigram max |s| = {unigram_worst:.1e}; \
             delta=0 kept {} of {n} ({n_zero} exact zeros dropped), matches s > 0 set: {}",
            got.len(),
            got == expected
        ),
    )
}

fn neighbor_lists(results: &[RetrievalResult]) -> Vec<(u64, Vec<u64>)> {
    results.iter().map(|r| (r.query_id, r.neighbors.clone())).collect()
}

fn retrieval_purity(w: &World) -> Outcome {
    let dense = purity(&neighbor_lists(&w.dense), &w.task_of);
    let stride = w.random.len() / PURITY_QUERIES;
    let sample: Vec<(u64, Vec<u64>)> = neighbor_lists(&w.random).into_iter().step_by(stride).take(PURITY_QUERIES).collect();
    let per_query = per_query_purity(&sample, &w.task_of);
    let random = per_query.iter().sum::<f64>() / per_query.len() as f64;
    let t = w.world.n_tasks() as f64;
    let p = 1.0 / t;
    let draws = (per_query.len() * K) as f64;
    let sigma = (p * (1.0 - p) / draws).sqrt();
    let z = (random - p) / sigma;
    outcome(
        dense >= DENSE_PURITY_MIN && z.abs() <= PURITY_SIGMAS,
        format!(
            "{} paragraphs, T = {t}: dense purity@{K} = {dense:.4} (min {DENSE_PURITY_MIN}); random purity over {} queries = {random:.4}, \
             1/T = {p:.4}, sigma = {sigma:.4}, z = {z:+.2}",
            w.store.len(),
            per_query.len()
        ),
    )
}

fn perplexity_comparison(w: &World) -> Outcome {
    let texts = |v: Vec<PretrainInstance>| v.into_iter().map(|i| i.text).collect::<Vec<_>>();
    let sets = vec![
        ("dense".to_string(), texts(w.unfiltered(&w.dense, Strategy::DenseExact))),
        ("random".to_string(), texts(w.unfiltered(&w.random, Strategy::Random))),
    ];
    let cmp = compare_datasets(&sets, &w.ngram).unwrap();
    let (d, r) = (cmp.sets[0].mean_perplexity, cmp.sets[1].mean_perplexity);
    let gap = (r - d) / r;
    outcome(
        d < r,
        format!("mean perplexity dense {d:.4} vs random {r:.4}; relative gap {:.1}%", 100.0 * gap),
    )
}

fn icl_accuracy(w: &World) -> Outcome {
    let cfg = BuildConfig {
        strategy: Strategy::DenseExact,
        k: K,
        budget: BUDGET,
        delta: 0.0,
    };
    let (picl, manifest) = build_pretrain_corpus(&w.store, &w.dense, &cfg, Some(&w.ngram)).unwrap();
    let random = w.unfiltered(&w.random, Strategy::Random);
    let refs: Vec<&str> = w.doc_texts.iter().map(String::as_str).collect();
    let docs = encode_with_bos(&w.tok, &refs);
    let tasks = w.world.eval_tasks();
    let shots = ShotConfig {
        n_shots: 4,
        seeds: vec![1, 2, 3],
        max_eval_examples: 100,
    };
    let lm_cfg = NeuralLmConfig {
        vocab_size: w.tok.vocab_size(),
        context: 8,
        embed: 16,
        hidden: 64,
    };
    let mut means: HashMap<&str, Vec<f64>> = HashMap::new();
    let mut lines = Vec::new();
    for (name, insts) in [("picl", &picl), ("random", &random)] {
        let seqs = encode_with_bos(&w.tok, &insts.iter().map(|i| i.text.as_str()).collect::<Vec<_>>());
        for seed in ICL_SEEDS {
            let model = NeuralLm::random(lm_cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mix = MixConfig {
                alpha: 0.5,
                steps: 2000,
                batch: 8,
                window: 32,
                lr: 0.3,
                momentum: 0.9,
                clip: Some(5.0),
                seed,
            };
            let (model, _) = train_mixed(model, &seqs, &docs, &mix).unwrap();
            let scorer = NeuralScorer::new(model, w.tok.clone());
            let acc = tasks.iter().map(|t| few_shot_eval(t, &scorer, &shots).unwrap().mean).sum::<f64>() / tasks.len() as f64;
            lines.push(format!("{name} seed {seed}: {acc:.4}"));
            means.entry(name).or_default().push(acc);
        }
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (p, r) = (avg(&means["picl"]), avg(&means["random"]));
    outcome(
        p > r,
        format!(
            "4-shot accuracy over {} held-out tasks; {}; mean picl {p:.4} vs random {r:.4} (picl retained {:.1}% at delta 0)",
            tasks.len(),
            lines.join(", "),
            100.0 * manifest.retained_fraction
        ),
    )
}

/// Memoized recursion over suffixes; independent of the rolling table.
fn lcs_oracle(a: &[String], b: &[String]) -> usize {
    fn go(a: &[String], b: &[String], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + go(a, b, i + 1, j + 1, memo)
        } else {
            go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

fn rouge_oracle() -> Outcome {
    let worked = rouge_l("police killed the gunman", "the gunman was killed by police");
    let identity = rouge_l("the cat sat", "the cat sat");
    let disjoint = rouge_l("alpha beta", "gamma delta");
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let vocab = ["a", "b", "c", "d", "e", "f"];
    let mut mismatches = 0;
    for _ in 0..200 {
        let sentence = |rng: &mut ChaCha8Rng| -> Vec<String> {
            let n = rng.random_range(1..15);
            (0..n).map(|_| vocab[rng.random_range(0..vocab.len())].to_string()).collect()
        };
        let (c, r) = (sentence(&mut rng), sentence(&mut rng));
        let l = lcs_oracle(&c, &r);
        let f_oracle = if l == 0 {
            0.0
        } else {
            let (p, rec) = (l as f64 / c.len() as f64, l as f64 / r.len() as f64);
            2.0 * p * rec / (p + rec)
        };
        if lcs_len(&c, &r) != l || rouge_l(&c.join(" "), &r.join(" ")) != f_oracle {
            mismatches += 1;
        }
    }
    outcome(
        (worked - 0.4).abs() <= ROUGE_TOL && identity == 1.0 && disjoint == 0.0 && mismatches == 0,
        format!("worked example {worked:.12}; identity {identity}; disjoint {disjoint}; {mismatches}/200 random pairs differ from the oracle"),
    )
}

fn reproducibility() -> Outcome {
    let picl = env!("CARGO_BIN_EXE_picl");
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        let out = Command::new(picl).args(args).env("RUST_LOG", "warn").output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    let root = dir.path().to_str().unwrap();
    run(&["synth", "--small", "--out", root]);
    let cfg = dir.path().join("config.toml");
    let cfg = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run(&["run", "--config", cfg, "--run-dir", a.to_str().unwrap()]);
    run(&["--threads", "1", "run", "--config", cfg, "--run-dir", b.to_str().unwrap()]);
    let ha = RunManifest::load(&a).unwrap().unwrap().artifact_hashes();
    let hb = RunManifest::load(&b).unwrap().unwrap().artifact_hashes();
    let differing: Vec<&String> = ha.keys().filter(|k| ha.get(*k) != hb.get(*k)).collect();
    outcome(
        ha == hb && !ha.is_empty(),
        format!("{} artifacts across all stages, second run single-threaded; differing: {differing:?}", ha.len()),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |name: &str, f: &dyn Fn() -> Outcome| {
        let t0 = Instant::now();
        let o = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
            .unwrap_or_else(|_| outcome(false, "panicked"));
        let status = if o.passed { "PASS" } else { "FAIL" };
        println!("{status} {name}: {} [{:.1} s]", o.detail, t0.elapsed().as_secs_f64());
        if !o.passed {
            failed += 1;
        }
    };
    report("contrastive loss closed forms", &contrastive_closed_forms);
    report("gradient checks", &gradient_checks);
    report("retrieval exactness", &retrieval_exactness);
    report("rouge-l oracle", &rouge_oracle);
    report("reproducibility", &reproducibility);
    let t0 = Instant::now();
    let w = World::build();
    println!("(synthetic world built in {:.1} s)", t0.elapsed().as_secs_f64());
    report("informativeness identities", &|| score_identities(&w));
    report("retrieval purity", &|| retrieval_purity(&w));
    report("perplexity comparison", &|| perplexity_comparison(&w));
    report("in-context learning", &|| icl_accuracy(&w));
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
