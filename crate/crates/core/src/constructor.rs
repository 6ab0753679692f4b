//! Packing retrieved neighbours into pre-training instances, scoring them and
//! filtering by informativeness.
//!
//! Neighbours are admitted most-similar-first while the packed text fits the
//! token budget; the text then lists the admitted demos least-similar-first
//! and ends with the query paragraph, joined by `"\n"`. The score of an
//! instance is
//!
//! `s = (−Σᵢ log P(zᵢ) + log P(z_k ⊕ … ⊕ z₀)) / |z_k ⊕ … ⊕ z₀|`
//!
//! and an instance is kept iff `s > δ`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Paragraph, ParagraphStore};
use crate::lm::{LmError, LmScorer};
use crate::retrieval::{RetrievalResult, Strategy};
use crate::util::serde_f64_inf;

pub const JOIN: &str = "\n";
pub const DEFAULT_BUDGET: usize = 1024;

#[derive(Debug, Error)]
pub enum ConstructorError {
    #[error("unknown paragraph id {0}")]
    UnknownParagraph(u64),
    #[error("scoring instance {instance} failed: {source}")]
    Scoring { instance: u64, source: LmError },
    #[error("instance {0} has no score")]
    Unscored(u64),
    #[error("scorer returned no tokens for instance {0}")]
    EmptyScore(u64),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed instance line {line}: {message}")]
    Malformed { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainInstance {
    pub id: u64,
    pub query_id: u64,
    /// In text order: least similar first, most similar right before z₀.
    pub demo_ids: Vec<u64>,
    pub text: String,
    pub token_count: u32,
    pub score: Option<f64>,
}

impl PretrainInstance {
    /// Segment ids in text order, ending with the query.
    pub fn segment_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.demo_ids.iter().copied().chain(std::iter::once(self.query_id))
    }
}

/// Pack `z0` with its neighbours. Returns `None` when `z0` alone exceeds the
/// budget.
pub fn construct_instance(
    z0: &Paragraph,
    neighbors: &RetrievalResult,
    budget: usize,
    store: &ParagraphStore,
) -> Result<Option<PretrainInstance>, ConstructorError> {
    let mut used = z0.token_count as usize;
    if used > budget {
        return Ok(None);
    }
    let mut seen: HashSet<&str> = HashSet::from([z0.text.as_str()]);
    let mut admitted: Vec<&Paragraph> = Vec::new();
    for &id in &neighbors.neighbors {
        if id == z0.id {
            continue;
        }
        let p = store.get(id).ok_or(ConstructorError::UnknownParagraph(id))?;
        if seen.contains(p.text.as_str()) {
            continue;
        }
        let cost = p.token_count as usize + 1;
        if used + cost > budget {
            break;
        }
        used += cost;
        seen.insert(p.text.as_str());
        admitted.push(p);
    }
    admitted.reverse();
    let mut text = String::new();
    for p in &admitted {
        text.push_str(&p.text);
        text.push_str(JOIN);
    }
    text.push_str(&z0.text);
    Ok(Some(PretrainInstance {
        id: z0.id,
        query_id: z0.id,
        demo_ids: admitted.iter().map(|p| p.id).collect(),
        text,
        token_count: used as u32,
        score: None,
    }))
}

/// Score from segment and joined-text log-probabilities. `joined_tokens` is
/// the scorer's token count of the joined text.
pub fn informativeness(segment_logprobs: &[f64], joined_logprob: f64, joined_tokens: usize) -> f64 {
    let parts: f64 = segment_logprobs.iter().sum();
    (joined_logprob - parts) / joined_tokens as f64
}

fn segment_texts<'a>(inst: &'a PretrainInstance, store: &'a ParagraphStore) -> Result<Vec<&'a str>, ConstructorError> {
    inst.segment_ids()
        .map(|id| {
            store
                .get(id)
                .map(|p| p.text.as_str())
                .ok_or(ConstructorError::UnknownParagraph(id))
        })
        .collect()
}

pub fn informativeness_score(
    inst: &PretrainInstance,
    store: &ParagraphStore,
    scorer: &dyn LmScorer,
) -> Result<f64, ConstructorError> {
    let mut texts = segment_texts(inst, store)?;
    texts.push(&inst.text);
    let lps = scorer.logprob_batch(&texts).map_err(|source| ConstructorError::Scoring {
        instance: inst.id,
        source,
    })?;
    let (joined, segs) = lps.split_last().expect("at least the joined text");
    if joined.n_tokens == 0 {
        return Err(ConstructorError::EmptyScore(inst.id));
    }
    let seg: Vec<f64> = segs.iter().map(|l| l.sum).collect();
    Ok(informativeness(&seg, joined.sum, joined.n_tokens))
}

/// Instances scored per scorer batch call.
const SCORE_CHUNK: usize = 16;

pub fn score_instances(
    instances: &mut [PretrainInstance],
    store: &ParagraphStore,
    scorer: &dyn LmScorer,
) -> Result<(), ConstructorError> {
    instances.par_chunks_mut(SCORE_CHUNK).try_for_each(|chunk| {
        for inst in chunk {
            inst.score = Some(informativeness_score(inst, store, scorer)?);
        }
        Ok(())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FilterCounts {
    pub n_candidates: u64,
    pub n_retained: u64,
}

/// Keep instances with `score > delta` and renumber them densely.
pub fn filter_instances(
    instances: Vec<PretrainInstance>,
    delta: f64,
) -> Result<(Vec<PretrainInstance>, FilterCounts), ConstructorError> {
    let n_candidates = instances.len() as u64;
    let mut kept = Vec::new();
    for inst in instances {
        let s = inst.score.ok_or(ConstructorError::Unscored(inst.id))?;
        if delta == f64::NEG_INFINITY || s > delta {
            kept.push(inst);
        }
    }
    for (i, inst) in kept.iter_mut().enumerate() {
        inst.id = i as u64;
    }
    let counts = FilterCounts {
        n_candidates,
        n_retained: kept.len() as u64,
    };
    Ok((kept, counts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildManifest {
    pub n_candidates: u64,
    pub n_retained: u64,
    pub retained_fraction: f64,
    pub mean_demos_per_instance: f64,
    pub mean_instance_tokens: f64,
    pub n_dropped_over_budget: u64,
    pub strategy: Strategy,
    pub k: usize,
    pub budget: usize,
    #[serde(with = "serde_f64_inf")]
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildConfig {
    pub strategy: Strategy,
    pub k: usize,
    pub budget: usize,
    pub delta: f64,
}

/// One candidate per retrieval result, in ascending query id.
pub fn construct_all(
    store: &ParagraphStore,
    retrievals: &[RetrievalResult],
    budget: usize,
) -> Result<(Vec<PretrainInstance>, u64), ConstructorError> {
    let mut sorted: Vec<&RetrievalResult> = retrievals.iter().collect();
    sorted.sort_by_key(|r| r.query_id);
    let built: Vec<Option<PretrainInstance>> = sorted
        .par_iter()
        .map(|r| {
            let z0 = store.get(r.query_id).ok_or(ConstructorError::UnknownParagraph(r.query_id))?;
            construct_instance(z0, r, budget, store)
        })
        .collect::<Result<_, _>>()?;
    let dropped = built.iter().filter(|b| b.is_none()).count() as u64;
    let mut out: Vec<PretrainInstance> = built.into_iter().flatten().collect();
    for (i, inst) in out.iter_mut().enumerate() {
        inst.id = i as u64;
    }
    Ok((out, dropped))
}

pub fn summarize(
    retained: &[PretrainInstance],
    counts: FilterCounts,
    n_dropped_over_budget: u64,
    cfg: &BuildConfig,
) -> BuildManifest {
    let n = retained.len().max(1) as f64;
    BuildManifest {
        n_candidates: counts.n_candidates,
        n_retained: counts.n_retained,
        retained_fraction: if counts.n_candidates == 0 {
            0.0
        } else {
            counts.n_retained as f64 / counts.n_candidates as f64
        },
        mean_demos_per_instance: retained.iter().map(|i| i.demo_ids.len() as f64).sum::<f64>() / n,
        mean_instance_tokens: retained.iter().map(|i| f64::from(i.token_count)).sum::<f64>() / n,
        n_dropped_over_budget,
        strategy: cfg.strategy,
        k: cfg.k,
        budget: cfg.budget,
        delta: cfg.delta,
    }
}

/// Construct, score and filter in one pass. Without a scorer, `delta` must
/// be `-inf` and instances stay unscored.
pub fn build_pretrain_corpus(
    store: &ParagraphStore,
    retrievals: &[RetrievalResult],
    cfg: &BuildConfig,
    scorer: Option<&dyn LmScorer>,
) -> Result<(Vec<PretrainInstance>, BuildManifest), ConstructorError> {
    let (mut instances, dropped) = construct_all(store, retrievals, cfg.budget)?;
    let (kept, counts) = match scorer {
        Some(s) => {
            score_instances(&mut instances, store, s)?;
            filter_instances(instances, cfg.delta)?
        }
        None if cfg.delta == f64::NEG_INFINITY => {
            let n = instances.len() as u64;
            (
                instances,
                FilterCounts {
                    n_candidates: n,
                    n_retained: n,
                },
            )
        }
        None => {
            return Err(ConstructorError::Unscored(
                instances.first().map_or(0, |i| i.query_id),
            ))
        }
    };
    let manifest = summarize(&kept, counts, dropped, cfg);
    Ok((kept, manifest))
}

pub fn write_instances(instances: &[PretrainInstance], path: &Path) -> Result<(), ConstructorError> {
    let mut w = BufWriter::new(File::create(path)?);
    for inst in instances {
        let line = serde_json::to_string(inst).map_err(std::io::Error::other)?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_instances(path: &Path) -> Result<Vec<PretrainInstance>, ConstructorError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ConstructorError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{count_tokens, TokenizerBuilder};
    use crate::lm::{NGramScorer, UniformScorer};
    use crate::retrieval::Strategy;
    use proptest::prelude::*;

    fn words(n: usize, tag: &str) -> String {
        (0..n).map(|i| format!("{tag}{i}")).collect::<Vec<_>>().join(" ")
    }

    fn store(texts: Vec<String>) -> ParagraphStore {
        let ps = texts
            .into_iter()
            .enumerate()
            .map(|(i, t)| Paragraph {
                id: i as u64,
                doc_id: "d".into(),
                ordinal: i as u32,
                token_count: count_tokens(&t) as u32,
                text: t,
            })
            .collect();
        ParagraphStore::from_paragraphs(ps, 1, 0)
    }

    fn result(q: u64, ns: &[u64]) -> RetrievalResult {
        RetrievalResult {
            query_id: q,
            strategy: Strategy::DenseExact,
            neighbors: ns.to_vec(),
            scores: vec![0.0; ns.len()],
        }
    }

    #[test]
    fn budget_admits_one_of_three_long_neighbours() {
        let s = store(vec![words(400, "q"), words(400, "a"), words(400, "b"), words(400, "c")]);
        let inst = construct_instance(&s.paragraphs()[0], &result(0, &[1, 2, 3]), 1024, &s)
            .unwrap()
            .unwrap();
        assert_eq!(inst.demo_ids, vec![1]);
        assert_eq!(inst.text, format!("{}\n{}", words(400, "a"), words(400, "q")));
        assert_eq!(inst.token_count, 801);
    }

    #[test]
    fn no_neighbours_gives_query_alone() {
        let s = store(vec!["x y".into()]);
        let inst = construct_instance(&s.paragraphs()[0], &result(0, &[]), 1024, &s).unwrap().unwrap();
        assert_eq!(inst.text, "x y");
        assert!(inst.demo_ids.is_empty());
    }

    #[test]
    fn unbounded_budget_admits_all_in_reverse_similarity() {
        let texts: Vec<String> = (0..21).map(|i| format!("p{i}")).collect();
        let s = store(texts);
        let ns: Vec<u64> = (1..21).collect();
        let inst = construct_instance(&s.paragraphs()[0], &result(0, &ns), usize::MAX, &s)
            .unwrap()
            .unwrap();
        assert_eq!(inst.demo_ids, (1..21).rev().collect::<Vec<_>>());
        assert!(inst.text.starts_with("p20\n") && inst.text.ends_with("\np0"));
    }

    #[test]
    fn duplicate_texts_are_skipped() {
        let s = store(vec!["same".into(), "same".into(), "other".into(), "other".into()]);
        let inst = construct_instance(&s.paragraphs()[0], &result(0, &[1, 2, 3]), 100, &s).unwrap().unwrap();
        assert_eq!(inst.demo_ids, vec![2]);
    }

    #[test]
    fn oversized_query_is_dropped() {
        let s = store(vec![words(30, "q")]);
        assert!(construct_instance(&s.paragraphs()[0], &result(0, &[]), 10, &s).unwrap().is_none());
    }

    #[test]
    fn single_segment_scores_exactly_zero() {
        let s = store(vec!["a b c".into()]);
        let inst = construct_instance(&s.paragraphs()[0], &result(0, &[]), 100, &s).unwrap().unwrap();
        let sc = informativeness_score(&inst, &s, &UniformScorer { vocab_size: 50 }).unwrap();
        assert_eq!(sc, 0.0);
    }

    #[test]
    fn segment_independent_scorer_gives_zero() {
        let texts = vec!["a b c".to_string(), "c b".into(), "a a d".into()];
        let mut b = TokenizerBuilder::new(true);
        texts.iter().for_each(|t| b.feed(t));
        let tok = b.build(None, 1);
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let mut scorer = NGramScorer::train(&refs, tok, 1, &[1.0]).unwrap();
        scorer.skip_newlines = true;
        let s = store(texts);
        let inst = construct_instance(&s.paragraphs()[0], &result(0, &[1, 2]), 100, &s).unwrap().unwrap();
        assert!(informativeness_score(&inst, &s, &scorer).unwrap().abs() < 1e-12);
    }

    #[test]
    fn higher_joint_likelihood_is_positive() {
        assert!(informativeness(&[-5.0, -5.0], -8.0, 4) > 0.0);
        assert_eq!(informativeness(&[-5.0, -5.0], -8.0, 4), 0.5);
    }

    fn scored(scores: &[f64]) -> Vec<PretrainInstance> {
        scores
            .iter()
            .enumerate()
            .map(|(i, &s)| PretrainInstance {
                id: i as u64,
                query_id: i as u64,
                demo_ids: vec![],
                text: String::new(),
                token_count: 0,
                score: Some(s),
            })
            .collect()
    }

    #[test]
    fn strict_threshold_semantics() {
        let (kept, c) = filter_instances(scored(&[-0.1, 0.05, 0.2]), 0.0).unwrap();
        assert_eq!(c.n_retained, 2);
        assert_eq!(kept.iter().map(|k| k.id).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(kept[0].query_id, 1);
        let (kept, _) = filter_instances(scored(&[0.0]), 0.0).unwrap();
        assert!(kept.is_empty());
        let (kept, _) = filter_instances(scored(&[-5.0, 0.0, f64::NEG_INFINITY]), f64::NEG_INFINITY).unwrap();
        assert_eq!(kept.len(), 3);
    }

    #[test]
    fn unscored_instances_cannot_be_filtered() {
        let mut v = scored(&[1.0]);
        v[0].score = None;
        assert!(matches!(filter_instances(v, 0.0), Err(ConstructorError::Unscored(0))));
    }

    #[test]
    fn random_unfiltered_build_keeps_one_per_query() {
        let s = store((0..100).map(|i| format!("para {i}")).collect());
        let res = crate::retrieval::RetrievalResources {
            store: Some(&s),
            seed: 3,
            ..Default::default()
        };
        let rs = crate::retrieval::retrieve_all(Strategy::Random, &s, 20, &res).unwrap();
        let cfg = BuildConfig {
            strategy: Strategy::Random,
            k: 20,
            budget: 1024,
            delta: f64::NEG_INFINITY,
        };
        let (inst, m) = build_pretrain_corpus(&s, &rs, &cfg, None).unwrap();
        assert_eq!(inst.len(), 100);
        assert_eq!(m.retained_fraction, 1.0);
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"delta\":\"-inf\""));
    }

    #[test]
    fn instance_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.jsonl");
        let v = scored(&[0.25, -1.0]);
        write_instances(&v, &p).unwrap();
        assert_eq!(read_instances(&p).unwrap(), v);
    }

    proptest! {
        #[test]
        fn packing_respects_budget_and_ends_with_query(
            lens in prop::collection::vec(1usize..40, 2..15),
            budget in 1usize..200,
        ) {
            let texts: Vec<String> = lens.iter().enumerate().map(|(i, &n)| words(n, &format!("t{i}x"))).collect();
            let s = store(texts);
            let ns: Vec<u64> = (1..lens.len() as u64).collect();
            let z0 = &s.paragraphs()[0];
            match construct_instance(z0, &result(0, &ns), budget, &s).unwrap() {
                None => prop_assert!(lens[0] > budget),
                Some(inst) => {
                    prop_assert!(inst.token_count as usize <= budget);
                    prop_assert_eq!(inst.token_count as usize, count_tokens(&inst.text));
                    prop_assert!(inst.text.ends_with(&z0.text));
                    prop_assert!(!inst.demo_ids.contains(&0));
                }
            }
        }
    }
}
