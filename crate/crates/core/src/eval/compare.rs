//! Mean perplexity of named text sets under one reference scorer.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::lm::LmScorer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetPerplexity {
    pub name: String,
    pub n_texts: usize,
    /// Mean over texts of each text's perplexity.
    pub mean_perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetComparison {
    pub sets: Vec<SetPerplexity>,
}

impl DatasetComparison {
    /// `mean(a) − mean(b)`.
    pub fn difference(&self, a: usize, b: usize) -> f64 {
        self.sets[a].mean_perplexity - self.sets[b].mean_perplexity
    }

    /// One row per set; `diff_<other>` columns hold `mean(row) − mean(other)`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("set,n_texts,mean_perplexity");
        for o in &self.sets {
            s.push_str(&format!(",diff_{}", o.name));
        }
        s.push('\n');
        for (i, row) in self.sets.iter().enumerate() {
            s.push_str(&format!("{},{},{}", row.name, row.n_texts, row.mean_perplexity));
            for j in 0..self.sets.len() {
                s.push_str(&format!(",{}", self.difference(i, j)));
            }
            s.push('\n');
        }
        s
    }
}

pub fn compare_datasets(sets: &[(String, Vec<String>)], scorer: &dyn LmScorer) -> Result<DatasetComparison, EvalError> {
    let mut out = Vec::with_capacity(sets.len());
    for (name, texts) in sets {
        if texts.is_empty() {
            return Err(EvalError::EmptySet(name.clone()));
        }
        let ppl: Vec<f64> = texts
            .par_iter()
            .map(|t| scorer.logprob(t)?.perplexity())
            .collect::<Result<_, _>>()?;
        out.push(SetPerplexity {
            name: name.clone(),
            n_texts: texts.len(),
            mean_perplexity: ppl.iter().sum::<f64>() / ppl.len() as f64,
        });
    }
    Ok(DatasetComparison { sets: out })
}
