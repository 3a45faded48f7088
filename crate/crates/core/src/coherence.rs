//! Topic models over annotator explanations and per-shade topic entropy.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{consensus, Consensus, IndexMap, LabelMatrix};
use crate::rng::seeded;

/// One line of the corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub doc_id: String,
    pub annotator_id: String,
    pub item_id: String,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub doc_id: String,
    pub annotator_id: String,
    pub item_id: String,
    /// (word index, count), sorted by word index.
    pub counts: Vec<(usize, u32)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocabulary: IndexMap,
    pub documents: Vec<Document>,
}

/// Lowercase, drop punctuation, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().filter_map(normalize_token).collect()
}

fn normalize_token(tok: &str) -> Option<String> {
    let t: String = tok
        .chars()
        .filter(|c| !c.is_ascii_punctuation() && !c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    (!t.is_empty()).then_some(t)
}

impl Corpus {
    pub fn from_records(records: Vec<DocumentRecord>) -> Result<Self> {
        let mut vocabulary = IndexMap::default();
        let mut documents = Vec::with_capacity(records.len());
        let mut seen = std::collections::HashSet::new();
        for r in records {
            if !seen.insert(r.doc_id.clone()) {
                return Err(Error::domain(format!("duplicate document id {:?}", r.doc_id)));
            }
            let mut counts: BTreeMap<usize, u32> = BTreeMap::new();
            for tok in r.tokens.iter().flat_map(|t| t.split_whitespace()).filter_map(normalize_token) {
                *counts.entry(vocabulary.intern(&tok)).or_default() += 1;
            }
            if counts.is_empty() {
                return Err(Error::domain(format!("document {:?} has no tokens", r.doc_id)));
            }
            documents.push(Document {
                doc_id: r.doc_id,
                annotator_id: r.annotator_id,
                item_id: r.item_id,
                counts: counts.into_iter().collect(),
            });
        }
        Ok(Self {
            vocabulary,
            documents,
        })
    }

    /// JSON lines, one [`DocumentRecord`] per line; blank lines are skipped.
    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (k, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DocumentRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: k as u64 + 1,
                message: e.to_string(),
            })?;
            records.push(rec);
        }
        Self::from_records(records)
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for d in &self.documents {
            let tokens = d
                .counts
                .iter()
                .flat_map(|&(w, c)| std::iter::repeat_n(self.vocabulary.id(w).to_string(), c as usize))
                .collect();
            let rec = DocumentRecord {
                doc_id: d.doc_id.clone(),
                annotator_id: d.annotator_id.clone(),
                item_id: d.item_id.clone(),
                tokens,
            };
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Documents whose (annotator, item) carries a positive label; with
    /// `consensus_only`, additionally require the item to pass the global
    /// agreement filter as positive.
    pub fn positives(&self, matrix: &LabelMatrix, consensus_only: Option<f64>) -> Result<Self> {
        let votes = consensus_only.map(|t| consensus(matrix, t)).transpose()?;
        let documents = self
            .documents
            .iter()
            .filter(|d| {
                let (Some(i), Some(j)) = (matrix.annotators().get(&d.annotator_id), matrix.items().get(&d.item_id)) else {
                    return false;
                };
                matrix.get(i, j) == Some(1)
                    && votes.as_ref().is_none_or(|v| v.outcomes[j] == Consensus::Positive)
            })
            .cloned()
            .collect();
        Ok(Self {
            vocabulary: self.vocabulary.clone(),
            documents,
        })
    }

    /// Document indices grouped by the shade of their annotator; documents of
    /// unassigned annotators are left out.
    pub fn group_by_annotator_shade(&self, shade_of: &BTreeMap<String, usize>) -> Vec<Vec<usize>> {
        let k = shade_of.values().max().map_or(0, |m| m + 1);
        let mut groups = vec![Vec::new(); k];
        for (d, doc) in self.documents.iter().enumerate() {
            if let Some(&s) = shade_of.get(&doc.annotator_id) {
                groups[s].push(d);
            }
        }
        groups.retain(|g| !g.is_empty());
        groups
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicModel {
    pub topics: usize,
    /// Per document, a distribution over topics.
    pub doc_topic: Vec<Vec<f64>>,
    /// Per topic, a distribution over the vocabulary.
    pub word_topic: Vec<Vec<f64>>,
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        for x in v.iter_mut() {
            *x /= s;
        }
    } else {
        let u = 1.0 / v.len() as f64;
        v.iter_mut().for_each(|x| *x = u);
    }
}

/// Per (document, word) mixture normalizers `Σ_z p(z|d) p(w|z)`.
fn normalizers(corpus: &Corpus, pzd: &[Vec<f64>], pwz: &[Vec<f64>]) -> Vec<Vec<f64>> {
    corpus
        .documents
        .par_iter()
        .zip(pzd)
        .map(|(doc, theta)| {
            doc.counts
                .iter()
                .map(|&(w, _)| theta.iter().zip(pwz).map(|(t, phi)| t * phi[w]).sum())
                .collect()
        })
        .collect()
}

fn log_likelihood(corpus: &Corpus, norms: &[Vec<f64>]) -> f64 {
    corpus
        .documents
        .iter()
        .zip(norms)
        .map(|(doc, nd)| {
            doc.counts
                .iter()
                .zip(nd)
                .map(|(&(_, c), p)| f64::from(c) * p.max(f64::MIN_POSITIVE).ln())
                .sum::<f64>()
        })
        .sum()
}

/// pLSA by EM. Stops when the relative log-likelihood gain drops below `tol`
/// or after `max_iters` iterations.
pub fn fit_plsa(corpus: &Corpus, topics: usize, max_iters: usize, tol: f64, seed: u64) -> Result<TopicModel> {
    if topics == 0 {
        return Err(Error::domain("number of topics must be at least 1"));
    }
    let vocab = corpus.vocabulary.len();
    if vocab == 0 || corpus.is_empty() {
        return Err(Error::domain("empty vocabulary"));
    }
    let mut rng = seeded(seed);
    let mut random_dist = |n: usize| {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
        normalize(&mut v);
        v
    };
    let mut pzd: Vec<Vec<f64>> = (0..corpus.len()).map(|_| random_dist(topics)).collect();
    let mut pwz: Vec<Vec<f64>> = (0..topics).map(|_| random_dist(vocab)).collect();
    let mut norms = normalizers(corpus, &pzd, &pwz);
    let mut trace = vec![log_likelihood(corpus, &norms)];
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let new_pzd: Vec<Vec<f64>> = corpus
            .documents
            .par_iter()
            .zip(&pzd)
            .zip(&norms)
            .map(|((doc, theta), nd)| {
                let mut out: Vec<f64> = (0..topics)
                    .map(|z| {
                        doc.counts
                            .iter()
                            .zip(nd)
                            .map(|(&(w, c), p)| f64::from(c) * theta[z] * pwz[z][w] / p.max(f64::MIN_POSITIVE))
                            .sum()
                    })
                    .collect();
                normalize(&mut out);
                out
            })
            .collect();
        let new_pwz: Vec<Vec<f64>> = (0..topics)
            .into_par_iter()
            .map(|z| {
                let mut out = vec![0.0; vocab];
                for ((doc, theta), nd) in corpus.documents.iter().zip(&pzd).zip(&norms) {
                    for (&(w, c), p) in doc.counts.iter().zip(nd) {
                        out[w] += f64::from(c) * theta[z] * pwz[z][w] / p.max(f64::MIN_POSITIVE);
                    }
                }
                normalize(&mut out);
                out
            })
            .collect();
        pzd = new_pzd;
        pwz = new_pwz;
        norms = normalizers(corpus, &pzd, &pwz);
        let ll = log_likelihood(corpus, &norms);
        let prev = *trace.last().expect("nonempty");
        trace.push(ll);
        if !ll.is_finite() {
            return Err(Error::Divergence { iteration: iterations });
        }
        if ll - prev < tol * prev.abs() {
            break;
        }
    }
    Ok(TopicModel {
        topics,
        doc_topic: pzd,
        word_topic: pwz,
        log_likelihood: trace,
        iterations,
    })
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(q: &[f64]) -> f64 {
    let h: f64 = q.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    h.clamp(0.0, (q.len() as f64).ln())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadeTopicProfile {
    pub q: Vec<f64>,
    pub entropy: f64,
    pub members: usize,
}

/// Mean topic distribution of the member documents and its entropy.
pub fn shade_entropy(model: &TopicModel, members: &[usize]) -> Result<ShadeTopicProfile> {
    if members.is_empty() {
        return Err(Error::domain("shade has no member documents"));
    }
    let mut sorted = members.to_vec();
    sorted.sort_unstable();
    let mut q = vec![0.0; model.topics];
    for &d in &sorted {
        let row = model
            .doc_topic
            .get(d)
            .ok_or_else(|| Error::domain(format!("document index {d} out of range")))?;
        for (acc, p) in q.iter_mut().zip(row) {
            *acc += p;
        }
    }
    let v = sorted.len() as f64;
    q.iter_mut().for_each(|x| *x /= v);
    Ok(ShadeTopicProfile {
        entropy: entropy(&q),
        q,
        members: sorted.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropySummary {
    pub mean: f64,
    pub standard_error: f64,
    pub per_shade: Vec<f64>,
}

fn summarize(model: &TopicModel, shading: &[Vec<usize>]) -> Result<EntropySummary> {
    let per_shade = shading
        .iter()
        .map(|g| shade_entropy(model, g).map(|p| p.entropy))
        .collect::<Result<Vec<_>>>()?;
    let k = per_shade.len() as f64;
    let mean = per_shade.iter().sum::<f64>() / k;
    let standard_error = if per_shade.len() > 1 {
        (per_shade.iter().map(|h| (h - mean) * (h - mean)).sum::<f64>() / (k - 1.0)).sqrt() / k.sqrt()
    } else {
        0.0
    };
    Ok(EntropySummary {
        mean,
        standard_error,
        per_shade,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadingComparison {
    pub first: EntropySummary,
    pub second: EntropySummary,
}

/// Mean and standard error of per-shade entropy for two shadings of the same
/// documents. Lower mean means more coherent shades.
pub fn compare_shadings(model: &TopicModel, first: &[Vec<usize>], second: &[Vec<usize>]) -> Result<ShadingComparison> {
    let cover = |s: &[Vec<usize>]| {
        let mut v: Vec<usize> = s.iter().flatten().copied().collect();
        v.sort_unstable();
        v
    };
    if first.is_empty() || second.is_empty() {
        return Err(Error::domain("a shading needs at least one shade"));
    }
    if cover(first) != cover(second) {
        return Err(Error::domain("shadings cover different documents"));
    }
    Ok(ShadingComparison {
        first: summarize(model, first)?,
        second: summarize(model, second)?,
    })
}
