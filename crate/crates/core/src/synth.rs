//! A synthetic world of intrinsic tasks.
//!
//! Each task pairs a topic with a relation. A topic owns a vocabulary of
//! pseudo-word nouns and modifiers; a relation maps each noun to one of the
//! task's label words. An example renders `"<modifier> <noun>"` and its label
//! with one of a few generic templates shared by every task, so the label
//! vocabulary is the only surface cue for the relation.
//!
//! Documents stay on one topic but mix relations, one example per line.
//! Some (modifier, noun) pairs are held out of every document and used only
//! for evaluation.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::encoder::{EncoderError, PromptTemplate, TaskDataset, TaskExample};
use crate::eval::{EvalExample, EvalTask, TaskKind};
use crate::util::{fnv1a, mix64, rng_for};
use crate::vecindex::EmbeddingMatrix;

/// Templates shared by every task. The first is the evaluation template.
pub const GENERIC_TEMPLATES: [&str; 5] = [
    "{input} -> {output}",
    "{input} : {output}",
    "{input} is {output} .",
    "{input} means {output}",
    "{input} , {output} !",
];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_topics: usize,
    pub relations_per_topic: usize,
    pub nouns_per_topic: usize,
    pub modifiers_per_topic: usize,
    pub labels_per_task: usize,
    pub n_docs: usize,
    pub paragraphs_per_doc: usize,
    /// A (modifier, noun) pair is held out when its hash is divisible by this.
    pub holdout_modulus: u64,
    pub encoder_examples_per_task: usize,
    pub eval_train_pool: usize,
    pub eval_examples: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_topics: 4,
            relations_per_topic: 2,
            nouns_per_topic: 40,
            modifiers_per_topic: 10,
            labels_per_task: 4,
            n_docs: 625,
            paragraphs_per_doc: 8,
            holdout_modulus: 4,
            encoder_examples_per_task: 150,
            eval_train_pool: 32,
            eval_examples: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topic {
    pub nouns: Vec<String>,
    pub modifiers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTask {
    pub name: String,
    pub topic: usize,
    pub relation: usize,
    pub labels: Vec<String>,
}

/// Documents plus the task of every line, in document order.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub docs: Vec<Document>,
    pub paragraph_tasks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthWorld {
    pub cfg: SynthConfig,
    pub topics: Vec<Topic>,
    pub tasks: Vec<SynthTask>,
}

fn pseudo_word(rng: &mut ChaCha8Rng, seen: &mut HashSet<String>) -> String {
    loop {
        let syllables = 2;
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(*CONSONANTS.choose(rng).unwrap() as char);
            w.push(*VOWELS.choose(rng).unwrap() as char);
        }
        if seen.insert(w.clone()) {
            return w;
        }
    }
}

/// Label words of one task share a stem and differ in a final suffix, so a
/// character n-gram encoder sees the task before the individual label.
fn label_words(stem: &str, n: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            let v = VOWELS[i % VOWELS.len()] as char;
            let c = CONSONANTS[i / VOWELS.len() % CONSONANTS.len()] as char;
            format!("{stem}{c}{v}")
        })
        .collect()
}

impl SynthWorld {
    pub fn new(cfg: SynthConfig) -> Self {
        let mut rng = rng_for(cfg.seed, fnv1a("vocabulary"));
        let mut seen = HashSet::new();
        let mut words = |n: usize, rng: &mut ChaCha8Rng| (0..n).map(|_| pseudo_word(rng, &mut seen)).collect::<Vec<_>>();
        let topics: Vec<Topic> = (0..cfg.n_topics)
            .map(|_| Topic {
                nouns: words(cfg.nouns_per_topic, &mut rng),
                modifiers: words(cfg.modifiers_per_topic, &mut rng),
            })
            .collect();
        let mut tasks = Vec::new();
        for topic in 0..cfg.n_topics {
            for relation in 0..cfg.relations_per_topic {
                tasks.push(SynthTask {
                    name: format!("t{topic}r{relation}"),
                    topic,
                    relation,
                    labels: label_words(&words(1, &mut rng)[0], cfg.labels_per_task),
                });
            }
        }
        Self { cfg, topics, tasks }
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// The label a task assigns to a noun. The label's position in the
    /// task's list depends on the noun alone, so relations of one topic
    /// partition nouns the same way and differ only in label words.
    pub fn label(&self, task: usize, noun: usize) -> &str {
        let t = &self.tasks[task];
        let h = mix64(fnv1a(&self.topics[t.topic].nouns[noun]) ^ self.cfg.seed);
        &t.labels[(h % t.labels.len() as u64) as usize]
    }

    pub fn is_held_out(&self, topic: usize, modifier: usize, noun: usize) -> bool {
        let tp = &self.topics[topic];
        let key = format!("{} {}", tp.modifiers[modifier], tp.nouns[noun]);
        mix64(fnv1a(&key) ^ self.cfg.seed).is_multiple_of(self.cfg.holdout_modulus)
    }

    /// All (modifier, noun) pairs of a topic on one side of the holdout split.
    pub fn pairs(&self, topic: usize, held_out: bool) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for m in 0..self.cfg.modifiers_per_topic {
            for n in 0..self.cfg.nouns_per_topic {
                if self.is_held_out(topic, m, n) == held_out {
                    out.push((m, n));
                }
            }
        }
        out
    }

    pub fn example(&self, task: usize, (modifier, noun): (usize, usize)) -> EvalExample {
        let tp = &self.topics[self.tasks[task].topic];
        EvalExample {
            input: format!("{} {}", tp.modifiers[modifier], tp.nouns[noun]),
            output: self.label(task, noun).to_string(),
        }
    }

    fn sample_example(&self, task: usize, pool: &[(usize, usize)], rng: &mut ChaCha8Rng) -> EvalExample {
        self.example(task, *pool.choose(rng).expect("non-empty pair pool"))
    }

    /// One topic per document; each document holds an equal share of every
    /// relation, shuffled.
    pub fn corpus(&self) -> SynthCorpus {
        let mut rng = rng_for(self.cfg.seed, fnv1a("documents"));
        let templates = self.templates();
        let pools: Vec<_> = (0..self.cfg.n_topics).map(|t| self.pairs(t, false)).collect();
        let r = self.cfg.relations_per_topic;
        let mut docs = Vec::with_capacity(self.cfg.n_docs);
        let mut paragraph_tasks = Vec::new();
        for d in 0..self.cfg.n_docs {
            let topic = d % self.cfg.n_topics;
            let mut rels: Vec<usize> = (0..self.cfg.paragraphs_per_doc).map(|i| i % r).collect();
            rels.shuffle(&mut rng);
            let mut lines = Vec::with_capacity(rels.len());
            for rel in rels {
                let task = topic * r + rel;
                let ex = self.sample_example(task, &pools[topic], &mut rng);
                let tpl = templates.choose(&mut rng).unwrap();
                lines.push(tpl.render(&ex.input, &ex.output));
                paragraph_tasks.push(task);
            }
            docs.push(Document {
                id: format!("doc{d:05}"),
                text: lines.join("\n"),
                source: "synth".into(),
            });
        }
        SynthCorpus { docs, paragraph_tasks }
    }

    fn templates(&self) -> Vec<PromptTemplate> {
        GENERIC_TEMPLATES
            .iter()
            .map(|p| PromptTemplate::new("generic", *p).expect("valid built-in template"))
            .collect()
    }

    pub fn encoder_examples(&self) -> Vec<TaskExample> {
        let mut rng = rng_for(self.cfg.seed, fnv1a("encoder"));
        let mut out = Vec::new();
        for (i, task) in self.tasks.iter().enumerate() {
            let pool = self.pairs(task.topic, false);
            for _ in 0..self.cfg.encoder_examples_per_task {
                let ex = self.sample_example(i, &pool, &mut rng);
                out.push(TaskExample {
                    task: task.name.clone(),
                    input: ex.input,
                    output: ex.output,
                });
            }
        }
        out
    }

    /// Every task gets all generic templates.
    pub fn encoder_templates(&self) -> Vec<PromptTemplate> {
        self.tasks
            .iter()
            .flat_map(|t| {
                GENERIC_TEMPLATES
                    .iter()
                    .map(|p| PromptTemplate::new(t.name.clone(), *p).expect("valid built-in template"))
            })
            .collect()
    }

    pub fn encoder_dataset(&self) -> Result<TaskDataset, EncoderError> {
        TaskDataset::new(self.encoder_examples(), self.encoder_templates())
    }

    /// One classification task per synthetic task. Labels are all label
    /// words of the topic, so the relation must come from the context.
    /// Demonstrations use seen pairs; queries use held-out pairs.
    pub fn eval_tasks(&self) -> Vec<EvalTask> {
        let mut rng = rng_for(self.cfg.seed, fnv1a("evaluation"));
        self.tasks
            .iter()
            .enumerate()
            .map(|(i, task)| {
                let labels: Vec<String> = self
                    .tasks
                    .iter()
                    .filter(|t| t.topic == task.topic)
                    .flat_map(|t| t.labels.iter().cloned())
                    .collect();
                let mut seen = self.pairs(task.topic, false);
                seen.shuffle(&mut rng);
                let mut held = self.pairs(task.topic, true);
                held.shuffle(&mut rng);
                EvalTask {
                    name: task.name.clone(),
                    kind: TaskKind::Classification,
                    template: GENERIC_TEMPLATES[0].to_string(),
                    labels,
                    train: seen.iter().take(self.cfg.eval_train_pool).map(|&p| self.example(i, p)).collect(),
                    eval: held.iter().take(self.cfg.eval_examples).map(|&p| self.example(i, p)).collect(),
                }
            })
            .collect()
    }
}

/// Mean fraction of neighbours whose task equals the query's.
pub fn purity(neighbors: &[(u64, Vec<u64>)], task_of: &[usize]) -> f64 {
    per_query_purity(neighbors, task_of).iter().sum::<f64>() / neighbors.len().max(1) as f64
}

pub fn per_query_purity(neighbors: &[(u64, Vec<u64>)], task_of: &[usize]) -> Vec<f64> {
    neighbors
        .iter()
        .map(|(q, ns)| {
            let t = task_of[*q as usize];
            let same = ns.iter().filter(|&&n| task_of[n as usize] == t).count();
            same as f64 / ns.len().max(1) as f64
        })
        .collect()
}

/// `n` standard-normal vectors of dimension `d` with ids `0..n`.
pub fn gaussian_matrix(n: usize, d: usize, seed: u64) -> EmbeddingMatrix {
    let mut rng = rng_for(seed, fnv1a("gaussian"));
    let data: Vec<f32> = (0..n * d).map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal)).collect();
    EmbeddingMatrix::new(d, data, (0..n as u64).collect()).expect("consistent shape")
}

/// Unit vectors around two antipodal centres: `±e_0` plus Gaussian noise of
/// standard deviation `noise` per coordinate, then normalized. Ids `0..n`;
/// even ids belong to the first blob.
pub fn two_blobs(n: usize, d: usize, noise: f32, seed: u64) -> EmbeddingMatrix {
    let mut rng = rng_for(seed, fnv1a("two-blobs"));
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        let mut v: Vec<f32> = (0..d)
            .map(|j| {
                let c = if j == 0 { sign } else { 0.0 };
                c + noise * rng.sample::<f32, _>(rand_distr::StandardNormal)
            })
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
        v.iter_mut().for_each(|x| *x /= norm);
        data.extend(v);
    }
    EmbeddingMatrix::new(d, data, (0..n as u64).collect()).expect("consistent shape")
}
