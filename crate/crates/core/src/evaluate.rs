//! Desk-scale experiment battery on simulated crowds.
//!
//! Items are split into train and test parts. Every strategy sees only labels
//! on train items and is scored per user on all test items against the
//! noise-free label of the user's planted school.
//!
//! Strategies:
//! * `consensus`: one classifier on the consensus-filtered labels;
//! * `user_exclusive`: one classifier per user on a few of their own labels;
//! * `user_adaptive`: the consensus classifier adapted to those same labels;
//! * `shades`: per-shade classifiers adapted from the consensus classifier,
//!   with shades found by clustering latent annotator factors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{
    build_shade_classifiers, multi_attribute_query, predict_for_user, signed, train_with_selection,
    AttributePredictor, ConsensusPredictor, LinearModel, ModelSource, ShadeClassifierSet, TrainOptions,
    UniformRandomPredictor, UserRef, DEFAULT_C_GRID, DEFAULT_THRESHOLD,
};
use crate::crowdsim::{generate, score_recovery, CrowdScenario, GeneratedCrowd};
use crate::error::{Error, Result};
use crate::factorization::{fit_bayesian, FactorHyperParams, GibbsConfig};
use crate::labels::{LabelMatrix, Observation};
use crate::rng::{derive_indexed, derive_seed, seeded};
use crate::shades::{cluster_annotators, prune_small, SelectOptions, DEFAULT_MIN_SIZE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    pub scenario: CrowdScenario,
    /// Number of simulated crowds; crowd `r` uses seed `derive_indexed(seed, r)`.
    pub repeats: usize,
    pub train_fraction: f64,
    /// Own labels available to each user-specific strategy.
    pub user_labels: usize,
    pub dim: usize,
    pub sigma2: f64,
    pub samples: usize,
    pub burn_in: usize,
    pub select: SelectOptions,
    pub min_size: usize,
    pub threshold: f64,
    pub c_grid: Vec<f64>,
    /// Latent dimensions for the sensitivity sweep; empty skips it.
    pub dim_sweep: Vec<usize>,
    /// Attribute counts for multi-attribute queries; needs that many attributes.
    pub query_sizes: Vec<usize>,
    pub queries: usize,
    pub seed: u64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            scenario: CrowdScenario::default(),
            repeats: 10,
            train_fraction: 0.7,
            user_labels: 10,
            dim: 10,
            sigma2: FactorHyperParams::new(1).sigma2,
            samples: 100,
            burn_in: 20,
            select: SelectOptions::default(),
            min_size: DEFAULT_MIN_SIZE,
            threshold: DEFAULT_THRESHOLD,
            c_grid: DEFAULT_C_GRID.to_vec(),
            dim_sweep: vec![5, 10, 20, 40],
            query_sizes: vec![2, 3, 4, 5],
            queries: 10_000,
            seed: 0,
        }
    }
}

impl EvaluationConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        if self.user_labels == 0 {
            return Err(Error::Config("user_labels must be at least 1".into()));
        }
        if self.dim == 0 || self.dim_sweep.contains(&0) {
            return Err(Error::Config("latent dimensions must be at least 1".into()));
        }
        if self.samples == 0 {
            return Err(Error::Config("samples must be at least 1".into()));
        }
        if self.c_grid.is_empty() || self.c_grid.iter().any(|c| !(*c > 0.0)) {
            return Err(Error::Config("C grid must be nonempty and positive".into()));
        }
        if self.query_sizes.iter().any(|&q| q == 0) {
            return Err(Error::Config("query sizes must be at least 1".into()));
        }
        self.scenario.validate()
    }

    fn train_options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            threshold: self.threshold,
            c_grid: self.c_grid.clone(),
            folds: 3,
            seed,
        }
    }
}

/// Mean per-user accuracy of each strategy, in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyAccuracy {
    pub consensus: f64,
    pub user_exclusive: f64,
    pub user_adaptive: f64,
    pub shades: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub accuracy: StrategyAccuracy,
    /// Shades before pruning.
    pub k: usize,
    pub surviving_shades: usize,
    pub ari: f64,
    /// Fraction of users answered by the consensus model because their shade was pruned.
    pub unrouted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimPoint {
    pub dim: usize,
    pub shades: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRates {
    pub attributes: usize,
    pub chance: f64,
    pub random: f64,
    pub consensus: f64,
    pub shades: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config: EvaluationConfig,
    pub runs: Vec<RunResult>,
    pub mean: StrategyAccuracy,
    pub dim_sweep: Vec<DimPoint>,
    /// Largest minus smallest sweep accuracy.
    pub dim_spread: Option<f64>,
    pub queries: Vec<QueryRates>,
}

/// Items whose index falls in the train part, chosen by a seeded shuffle.
pub fn split_items(num_items: usize, train_fraction: f64, seed: u64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..num_items).collect();
    order.shuffle(&mut seeded(seed));
    let cut = ((num_items as f64) * train_fraction).round() as usize;
    let mut train = vec![false; num_items];
    for &j in &order[..cut.min(num_items)] {
        train[j] = true;
    }
    train
}

/// The matrix restricted to labels on train items; index spaces are kept.
pub fn hide_test_labels(matrix: &LabelMatrix, train: &[bool]) -> Result<LabelMatrix> {
    let kept: Vec<Observation> = matrix.entries().iter().filter(|e| train[e.item]).cloned().collect();
    matrix.with_entries(kept)
}

fn majority(labels: &[(usize, u8)]) -> u8 {
    u8::from(2 * labels.iter().filter(|l| l.1 == 1).count() >= labels.len())
}

struct Trained {
    set: ShadeClassifierSet,
    k: usize,
    surviving: usize,
    ari: f64,
}

fn train_shades(
    train: &LabelMatrix,
    crowd: &GeneratedCrowd,
    config: &EvaluationConfig,
    dim: usize,
    seed: u64,
) -> Result<Trained> {
    let hyper = FactorHyperParams::new(dim).with_sigma2(config.sigma2);
    let gibbs = GibbsConfig {
        samples: config.samples,
        burn_in: config.burn_in,
        keep_samples: false,
        init_iters: 300,
    };
    let model = fit_bayesian(train, &hyper, &gibbs, derive_seed(seed, "factorize"))?;
    let found = cluster_annotators(&model, &config.select, derive_seed(seed, "shades"))?;
    let pruned = prune_small(&found, config.min_size)?;
    let ari = score_recovery(&pruned, &crowd.truth.schools)?.ari;
    let set = build_shade_classifiers(train, &crowd.features, &pruned, &config.train_options(derive_seed(seed, "train")))?;
    Ok(Trained {
        surviving: set.shades.len() - set.fallback.len(),
        set,
        k: found.k,
        ari,
    })
}

/// Per-user accuracy against the user's school on test items, averaged over users.
fn user_accuracy(crowd: &GeneratedCrowd, attribute: usize, test: &[usize], predict: impl Fn(usize, usize) -> u8 + Sync) -> f64 {
    let m = crowd.truth.schools.len();
    let total: f64 = (0..m)
        .into_par_iter()
        .map(|i| {
            let s = crowd.truth.schools[i];
            test.iter().filter(|&&j| predict(i, j) == crowd.truth.label(s, j, attribute)).count() as f64
                / test.len() as f64
        })
        .sum();
    total / m as f64
}

/// Up to `count` of annotator `i`'s train labels, chosen by a seeded shuffle.
fn own_labels(train: &LabelMatrix, i: usize, count: usize, seed: u64) -> Vec<(usize, u8)> {
    let mut own: Vec<(usize, u8)> = train.annotator_entries(i).iter().map(|e| (e.item, e.label)).collect();
    own.shuffle(&mut seeded(seed));
    own.truncate(count);
    own
}

/// One crowd, one attribute, all four strategies.
pub fn evaluate_crowd(crowd: &GeneratedCrowd, attribute: usize, config: &EvaluationConfig, seed: u64) -> Result<RunResult> {
    let matrix = crowd.matrix(attribute)?;
    let train_mask = split_items(matrix.num_items(), config.train_fraction, derive_seed(seed, "split"));
    let train = hide_test_labels(&matrix, &train_mask)?;
    let test: Vec<usize> = (0..matrix.num_items()).filter(|&j| !train_mask[j]).collect();
    if test.is_empty() {
        return Err(Error::Config("no test items after the split".into()));
    }
    let trained = train_shades(&train, crowd, config, config.dim, seed)?;
    let set = &trained.set;
    let raw = |j: usize| crowd.features.require(matrix.items().id(j));
    let rows: Vec<Vec<f64>> = (0..matrix.num_items())
        .map(|j| raw(j).map(|r| set.transform(r)))
        .collect::<Result<_>>()?;

    let user_seed = derive_seed(seed, "user-labels");
    let per_user: Vec<(Option<LinearModel>, Option<LinearModel>, Vec<(usize, u8)>)> = (0..matrix.num_annotators())
        .into_par_iter()
        .map(|i| -> Result<_> {
            let own = own_labels(&train, i, config.user_labels, derive_indexed(user_seed, i as u64));
            let (x, y): (Vec<Vec<f64>>, Vec<f64>) = own.iter().map(|&(j, l)| (rows[j].clone(), signed(l))).unzip();
            if !(y.iter().any(|&v| v > 0.0) && y.iter().any(|&v| v < 0.0)) {
                return Ok((None, None, own));
            }
            let opts = config.train_options(derive_indexed(derive_seed(seed, "user-c"), i as u64));
            let id = matrix.annotators().id(i).to_string();
            let exclusive = train_with_selection(&x, &y, &opts, None, ModelSource::User(id.clone()))?;
            let adaptive = train_with_selection(&x, &y, &opts, Some(&set.consensus), ModelSource::User(id))?;
            Ok((Some(exclusive), Some(adaptive), own))
        })
        .collect::<Result<_>>()?;

    let consensus = user_accuracy(crowd, attribute, &test, |_, j| u8::from(set.consensus.decision(&rows[j]) >= 0.0));
    let user_exclusive = user_accuracy(crowd, attribute, &test, |i, j| {
        let (ex, _, own) = &per_user[i];
        ex.as_ref().map_or(majority(own), |m| u8::from(m.decision(&rows[j]) >= 0.0))
    });
    let user_adaptive = user_accuracy(crowd, attribute, &test, |i, j| {
        let model = per_user[i].1.as_ref().unwrap_or(&set.consensus);
        u8::from(model.decision(&rows[j]) >= 0.0)
    });
    let users: Vec<UserRef> = matrix.annotators().ids().iter().map(|id| UserRef::Known(id.clone())).collect();
    let shades = user_accuracy(crowd, attribute, &test, |i, j| {
        predict_for_user(set, &users[i], raw(j).expect("feature row present")).label
    });
    let unrouted = users.iter().filter(|u| set.shade_of(u).is_none()).count() as f64 / users.len() as f64;
    Ok(RunResult {
        seed,
        accuracy: StrategyAccuracy {
            consensus,
            user_exclusive,
            user_adaptive,
            shades,
        },
        k: trained.k,
        surviving_shades: trained.surviving,
        ari: trained.ari,
        unrouted,
    })
}

/// Shade-strategy accuracy at one latent dimension.
pub fn shade_accuracy_at(crowd: &GeneratedCrowd, config: &EvaluationConfig, dim: usize, seed: u64) -> Result<f64> {
    let matrix = crowd.matrix(0)?;
    let train_mask = split_items(matrix.num_items(), config.train_fraction, derive_seed(seed, "split"));
    let train = hide_test_labels(&matrix, &train_mask)?;
    let test: Vec<usize> = (0..matrix.num_items()).filter(|&j| !train_mask[j]).collect();
    let set = train_shades(&train, crowd, config, dim, seed)?.set;
    let raws: Vec<&[f64]> = (0..matrix.num_items())
        .map(|j| crowd.features.require(matrix.items().id(j)))
        .collect::<Result<_>>()?;
    let users: Vec<UserRef> = matrix.annotators().ids().iter().map(|id| UserRef::Known(id.clone())).collect();
    Ok(user_accuracy(crowd, 0, &test, |i, j| predict_for_user(&set, &users[i], raws[j]).label))
}

/// Fraction of `queries` random (user, test item) pairs where `predictor` gets
/// the first `q` attributes all right. Targets are the user's school labels.
pub fn query_match_rate(
    predictor: &mut impl AttributePredictor,
    crowd: &GeneratedCrowd,
    test: &[usize],
    q: usize,
    queries: usize,
    seed: u64,
) -> Result<f64> {
    let truth = &crowd.truth;
    if q > truth.attribute_ids.len() {
        return Err(Error::Config(format!(
            "query over {q} attributes but the crowd has {}",
            truth.attribute_ids.len()
        )));
    }
    let mut rng = seeded(seed);
    let mut hits = 0usize;
    for _ in 0..queries {
        let i = rng.random_range(0..truth.schools.len());
        let j = test[rng.random_range(0..test.len())];
        let targets: Vec<(String, u8)> = (0..q)
            .map(|z| (truth.attribute_ids[z].clone(), truth.label(truth.schools[i], j, z)))
            .collect();
        let user = UserRef::Known(truth.annotator_ids[i].clone());
        let raw = crowd.features.require(&truth.item_ids[j])?;
        hits += usize::from(multi_attribute_query(predictor, &user, raw, &targets)?);
    }
    Ok(hits as f64 / queries.max(1) as f64)
}

fn query_battery(config: &EvaluationConfig) -> Result<Vec<QueryRates>> {
    let Some(&zmax) = config.query_sizes.iter().max() else {
        return Ok(Vec::new());
    };
    let seed = derive_seed(config.seed, "queries");
    let scenario = CrowdScenario {
        num_attributes: zmax.max(config.scenario.num_attributes),
        seed: derive_seed(seed, "crowd"),
        ..config.scenario.clone()
    };
    let crowd = generate(&scenario)?;
    let first = crowd.matrix(0)?;
    let train_mask = split_items(first.num_items(), config.train_fraction, derive_seed(seed, "split"));
    let test: Vec<usize> = (0..first.num_items()).filter(|&j| !train_mask[j]).collect();
    let mut sets = BTreeMap::new();
    for z in 0..zmax {
        let train = hide_test_labels(&crowd.matrix(z)?, &train_mask)?;
        let trained = train_shades(&train, &crowd, config, config.dim, derive_indexed(seed, z as u64))?;
        sets.insert(crowd.truth.attribute_ids[z].clone(), trained.set);
    }
    let mut out = Vec::new();
    for &q in &config.query_sizes {
        let qs = derive_indexed(seed, 1000 + q as u64);
        let mut random = UniformRandomPredictor::new(derive_seed(qs, "random"));
        out.push(QueryRates {
            attributes: q,
            chance: 0.5f64.powi(q as i32),
            random: query_match_rate(&mut random, &crowd, &test, q, config.queries, qs)?,
            consensus: query_match_rate(&mut ConsensusPredictor(&sets), &crowd, &test, q, config.queries, qs)?,
            shades: query_match_rate(&mut sets, &crowd, &test, q, config.queries, qs)?,
        });
    }
    Ok(out)
}

fn crowd_for(config: &EvaluationConfig, r: usize) -> Result<(GeneratedCrowd, u64)> {
    let seed = derive_indexed(config.seed, r as u64);
    let scenario = CrowdScenario {
        seed: derive_seed(seed, "crowd"),
        ..config.scenario.clone()
    };
    Ok((generate(&scenario)?, seed))
}

pub fn run_evaluation(config: &EvaluationConfig) -> Result<EvaluationReport> {
    config.validate()?;
    let mut runs = Vec::with_capacity(config.repeats);
    for r in 0..config.repeats {
        let (crowd, seed) = crowd_for(config, r)?;
        let run = evaluate_crowd(&crowd, 0, config, seed)?;
        log::info!(
            "run {r}: consensus {:.3} exclusive {:.3} adaptive {:.3} shades {:.3} (K={})",
            run.accuracy.consensus,
            run.accuracy.user_exclusive,
            run.accuracy.user_adaptive,
            run.accuracy.shades,
            run.k
        );
        runs.push(run);
    }
    let n = runs.len() as f64;
    let avg = |f: fn(&StrategyAccuracy) -> f64| runs.iter().map(|r| f(&r.accuracy)).sum::<f64>() / n;
    let mean = StrategyAccuracy {
        consensus: avg(|a| a.consensus),
        user_exclusive: avg(|a| a.user_exclusive),
        user_adaptive: avg(|a| a.user_adaptive),
        shades: avg(|a| a.shades),
    };

    let mut dim_sweep = Vec::new();
    for &dim in &config.dim_sweep {
        let mut total = 0.0;
        for r in 0..config.repeats {
            let (crowd, seed) = crowd_for(config, r)?;
            total += shade_accuracy_at(&crowd, config, dim, seed)?;
        }
        dim_sweep.push(DimPoint { dim, shades: total / n });
    }
    let dim_spread = (!dim_sweep.is_empty()).then(|| {
        let (lo, hi) = dim_sweep
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.shades), hi.max(p.shades)));
        hi - lo
    });

    Ok(EvaluationReport {
        config: config.clone(),
        runs,
        mean,
        dim_sweep,
        dim_spread,
        queries: query_battery(config)?,
    })
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

fn table(out: &mut String, header: &[&str], rows: &[Vec<String>]) {
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let _ = writeln!(out, "{}", line(header.to_vec()));
    let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    for r in rows {
        let _ = writeln!(out, "{}", line(r.iter().map(String::as_str).collect()));
    }
}

impl EvaluationReport {
    /// Aligned plain-text rendering; accuracies in percent.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Per-user accuracy (%)");
        let mut rows: Vec<Vec<String>> = self
            .runs
            .iter()
            .map(|r| {
                vec![
                    r.seed.to_string(),
                    pct(r.accuracy.consensus),
                    pct(r.accuracy.user_exclusive),
                    pct(r.accuracy.user_adaptive),
                    pct(r.accuracy.shades),
                    r.k.to_string(),
                    format!("{:.3}", r.ari),
                ]
            })
            .collect();
        rows.push(vec![
            "mean".into(),
            pct(self.mean.consensus),
            pct(self.mean.user_exclusive),
            pct(self.mean.user_adaptive),
            pct(self.mean.shades),
            String::new(),
            String::new(),
        ]);
        table(
            &mut out,
            &["seed", "consensus", "user-exclusive", "user-adaptive", "shades", "K", "ARI"],
            &rows,
        );
        if !self.dim_sweep.is_empty() {
            let _ = writeln!(out, "\nShade accuracy by latent dimension (%)");
            let rows: Vec<Vec<String>> = self
                .dim_sweep
                .iter()
                .map(|p| vec![p.dim.to_string(), pct(p.shades)])
                .collect();
            table(&mut out, &["D", "shades"], &rows);
            if let Some(s) = self.dim_spread {
                let _ = writeln!(out, "spread: {} points", pct(s));
            }
        }
        if !self.queries.is_empty() {
            let _ = writeln!(out, "\nMulti-attribute query match rate (%)");
            let rows: Vec<Vec<String>> = self
                .queries
                .iter()
                .map(|q| {
                    vec![
                        q.attributes.to_string(),
                        pct(q.chance),
                        pct(q.random),
                        pct(q.consensus),
                        pct(q.shades),
                    ]
                })
                .collect();
            table(&mut out, &["q", "chance", "random", "consensus", "shades"], &rows);
        }
        out
    }
}
