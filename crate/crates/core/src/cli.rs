//! Command-line front end. Every stage reads declared inputs, writes declared
//! outputs and embeds its resolved configuration and seed in what it writes.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::classify::{
    build_shade_classifiers, fold_in_user, predict_for_user, FeatureTable, ShadeClassifierSet, TrainOptions, UserRef,
    DEFAULT_C_GRID, DEFAULT_THRESHOLD,
};
use crate::coherence::{compare_shadings, fit_plsa, Corpus};
use crate::crowdsim::{generate, write_outputs, CrowdScenario};
use crate::error::{Error, Result};
use crate::evaluate::{run_evaluation, EvaluationConfig};
use crate::factorization::{binarize, fit_bayesian, fit_map, impute, FactorHyperParams, FactorModel, GibbsConfig, Method};
use crate::labels::{LabelFile, LabelMatrix};
use crate::rng::{derive_seed, seeded};
use crate::shades::{
    cluster_annotators, cluster_items, prune_small, SelectOptions, ShadeFile, SilhouetteVariant, DEFAULT_K_MAX,
    DEFAULT_K_MIN, DEFAULT_MIN_SIZE, DEFAULT_RESTARTS,
};
use crate::tensor::{fit_bptf, impute_cross_attribute, TensorFactorModel};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub labels: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

/// Resolved settings for every stage. Loaded from JSON; flags take precedence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub attribute: Option<String>,
    pub method: Method,
    pub dim: usize,
    pub sigma2: f64,
    pub samples: usize,
    pub burn_in: usize,
    pub init_iters: usize,
    pub keep_samples: bool,
    pub map_step: f64,
    pub map_iters: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub restarts: usize,
    pub silhouette: SilhouetteVariant,
    pub min_size: usize,
    pub threshold: f64,
    pub c_grid: Vec<f64>,
    pub folds: usize,
    pub topics: usize,
    pub plsa_iters: usize,
    pub plsa_tol: f64,
    pub scenario: CrowdScenario,
    pub evaluation: EvaluationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            attribute: None,
            method: Method::Bayesian,
            dim: 50,
            sigma2: FactorHyperParams::new(1).sigma2,
            samples: 500,
            burn_in: 50,
            init_iters: 300,
            keep_samples: false,
            map_step: 1.0,
            map_iters: 1000,
            k_min: DEFAULT_K_MIN,
            k_max: DEFAULT_K_MAX,
            restarts: DEFAULT_RESTARTS,
            silhouette: SilhouetteVariant::default(),
            min_size: DEFAULT_MIN_SIZE,
            threshold: DEFAULT_THRESHOLD,
            c_grid: DEFAULT_C_GRID.to_vec(),
            folds: 3,
            topics: 200,
            plsa_iters: 200,
            plsa_tol: 1e-6,
            scenario: CrowdScenario::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn hyper(&self) -> Result<FactorHyperParams> {
        let h = FactorHyperParams::new(self.dim).with_sigma2(self.sigma2);
        h.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(h)
    }

    fn gibbs(&self) -> GibbsConfig {
        GibbsConfig {
            samples: self.samples,
            burn_in: self.burn_in,
            keep_samples: self.keep_samples,
            init_iters: self.init_iters,
        }
    }

    fn select(&self) -> Result<SelectOptions> {
        if self.k_min < 2 || self.k_max < self.k_min {
            return Err(Error::Config(format!("invalid K range {}..{}", self.k_min, self.k_max)));
        }
        Ok(SelectOptions {
            k_min: self.k_min,
            k_max: self.k_max,
            restarts: self.restarts.max(1),
            variant: self.silhouette,
        })
    }

    fn train_options(&self, seed: u64) -> Result<TrainOptions> {
        if !(self.threshold > 0.5 && self.threshold <= 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0.5, 1]", self.threshold)));
        }
        if self.c_grid.is_empty() || self.c_grid.iter().any(|c| !(*c > 0.0)) {
            return Err(Error::Config("C grid must be nonempty and positive".into()));
        }
        Ok(TrainOptions {
            threshold: self.threshold,
            c_grid: self.c_grid.clone(),
            folds: self.folds.max(2),
            seed,
        })
    }
}

#[derive(Debug, Parser)]
#[command(name = "shades", version, about = "Annotator shades: latent factors, clustering and per-shade classifiers")]
pub struct Cli {
    /// JSON pipeline configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; every stage derives its own seed from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic crowd (labels, features, ground truth, corpus).
    Simulate(SimulateArgs),
    /// Fit latent annotator and item factors to one attribute.
    Factorize(FactorizeArgs),
    /// Cluster factor columns into shades.
    Shades(ShadesArgs),
    /// Train the consensus classifier and one adapted classifier per shade.
    Train(TrainArgs),
    /// Predict labels for a user from trained shade classifiers.
    Predict(PredictArgs),
    /// Write imputed scores for every annotator-item cell.
    Impute(ImputeArgs),
    /// Fit the annotator x item x attribute tensor model and impute missing cells.
    TensorImpute(TensorImputeArgs),
    /// Topic entropy of shades over a free-text corpus.
    Coherence(CoherenceArgs),
    /// Run the simulated experiment battery and write a metrics report.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Crowd scenario JSON (overrides the config's scenario).
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub num_attributes: Option<usize>,
    /// Also write a free-text corpus.
    #[arg(long)]
    pub corpus: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Map,
    Bayesian,
}

#[derive(Debug, Args)]
pub struct FactorizeArgs {
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub attribute: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub sigma2: Option<f64>,
    /// Retain every posterior sample in the model file.
    #[arg(long)]
    pub keep_samples: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AxisArg {
    Annotators,
    Items,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SilhouetteArg {
    MeanOverClusters,
    Nearest,
}

#[derive(Debug, Args)]
pub struct ShadesArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "annotators")]
    pub axis: AxisArg,
    #[arg(long)]
    pub k_min: Option<usize>,
    #[arg(long)]
    pub k_max: Option<usize>,
    #[arg(long)]
    pub min_size: Option<usize>,
    #[arg(long, value_enum)]
    pub silhouette: Option<SilhouetteArg>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub shades: PathBuf,
    #[arg(long)]
    pub attribute: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub classifiers: PathBuf,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Known annotator id. Without `--user` or `--user-labels` the consensus model answers.
    #[arg(long, conflicts_with = "user_labels")]
    pub user: Option<String>,
    /// CSV `item_id,label` of a new user's labels, folded in through `--model`.
    #[arg(long, requires = "model")]
    pub user_labels: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Comma-separated item ids (default: every row of the feature table).
    #[arg(long, value_delimiter = ',')]
    pub items: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct ImputeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TensorImputeArgs {
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Fitted tensor model file.
    #[arg(long)]
    pub model_out: PathBuf,
    /// CSV of imputed scores for cells without an observed label.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CoherenceArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub attribute: Option<String>,
    #[arg(long)]
    pub shades: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub topics: Option<usize>,
    /// Keep only documents on items that pass the consensus filter as positive.
    #[arg(long)]
    pub consensus_only: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory for report.json and report.txt.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Comma-separated latent dimensions for the sensitivity sweep.
    #[arg(long, value_delimiter = ',')]
    pub dim_sweep: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    pub silhouette: Option<SilhouetteArg>,
}

fn silhouette_of(a: SilhouetteArg) -> SilhouetteVariant {
    match a {
        SilhouetteArg::MeanOverClusters => SilhouetteVariant::MeanOverClusters,
        SilhouetteArg::Nearest => SilhouetteVariant::Nearest,
    }
}

fn provenance(stage: &str, config: &PipelineConfig, stage_seed: u64, inputs: Value) -> Value {
    json!({
        "tool": "shades",
        "version": env!("CARGO_PKG_VERSION"),
        "stage": stage,
        "root_seed": config.seed,
        "stage_seed": stage_seed,
        "inputs": inputs,
        "config": config,
    })
}

fn require(path: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let p = path.ok_or_else(|| Error::Config(format!("no {what} path given (flag or config)")))?;
    if !p.exists() {
        return Err(Error::Config(format!("{what} path {} does not exist", p.display())));
    }
    Ok(p)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn with_provenance(mut value: Value, prov: Value) -> Value {
    if let Value::Object(map) = &mut value {
        map.insert("provenance".into(), prov);
    }
    value
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn simulate(mut cfg: PipelineConfig, args: SimulateArgs) -> Result<()> {
    if let Some(p) = &args.scenario {
        cfg.scenario = CrowdScenario::load(p)?;
    }
    if let Some(z) = args.num_attributes {
        cfg.scenario.num_attributes = z;
    }
    if args.corpus && cfg.scenario.corpus.is_none() {
        cfg.scenario.corpus = Some(Default::default());
    }
    let seed = derive_seed(cfg.seed, "simulate");
    cfg.scenario.seed = seed;
    let out = args
        .out
        .or_else(|| cfg.paths.output_dir.clone())
        .ok_or_else(|| Error::Config("simulate needs --out or paths.output_dir".into()))?;
    let crowd = generate(&cfg.scenario).map_err(|e| match e {
        Error::Domain(m) => Error::Config(m),
        other => other,
    })?;
    write_outputs(&crowd, &out)?;
    write_json(&out.join("provenance.json"), &provenance("simulate", &cfg, seed, json!({})))
}

fn load_matrix(path: &Path, attribute: Option<&str>) -> Result<LabelMatrix> {
    LabelFile::read(path)?.matrix(attribute)
}

fn factorize(mut cfg: PipelineConfig, args: FactorizeArgs) -> Result<()> {
    if let Some(m) = args.method {
        cfg.method = match m {
            MethodArg::Map => Method::Map,
            MethodArg::Bayesian => Method::Bayesian,
        };
    }
    cfg.dim = args.dim.unwrap_or(cfg.dim);
    cfg.samples = args.samples.unwrap_or(cfg.samples);
    cfg.burn_in = args.burn_in.unwrap_or(cfg.burn_in);
    cfg.sigma2 = args.sigma2.unwrap_or(cfg.sigma2);
    cfg.keep_samples |= args.keep_samples;
    if args.attribute.is_some() {
        cfg.attribute = args.attribute;
    }
    let labels = require(args.labels.or_else(|| cfg.paths.labels.clone()), "labels")?;
    if cfg.samples == 0 {
        return Err(Error::Config("samples must be at least 1".into()));
    }
    let hyper = cfg.hyper()?;
    let matrix = load_matrix(&labels, cfg.attribute.as_deref())?;
    let seed = derive_seed(cfg.seed, "factorize");
    let model = match cfg.method {
        Method::Map => fit_map(&matrix, &hyper, cfg.map_step, cfg.map_iters, seed)?,
        Method::Bayesian => fit_bayesian(&matrix, &hyper, &cfg.gibbs(), seed)?,
    };
    log::info!(
        "factorized {} annotators x {} items ({} labels)",
        matrix.num_annotators(),
        matrix.num_items(),
        matrix.len()
    );
    let prov = provenance("factorize", &cfg, seed, json!({ "labels": path_str(&labels) }));
    write_text(&args.out, &model.to_json(Some(prov))?)
}

fn shades(mut cfg: PipelineConfig, args: ShadesArgs) -> Result<()> {
    cfg.k_min = args.k_min.unwrap_or(cfg.k_min);
    cfg.k_max = args.k_max.unwrap_or(cfg.k_max);
    cfg.min_size = args.min_size.unwrap_or(cfg.min_size);
    if let Some(s) = args.silhouette {
        cfg.silhouette = silhouette_of(s);
    }
    let opts = cfg.select()?;
    let model_path = require(Some(args.model), "model")?;
    let model = FactorModel::load(&model_path)?;
    let seed = derive_seed(cfg.seed, "shades");
    let (found, axis, ids) = match args.axis {
        AxisArg::Annotators => (cluster_annotators(&model, &opts, seed)?, "annotators", model.annotators.ids()),
        AxisArg::Items => (cluster_items(&model, &opts, seed)?, "items", model.items.ids()),
    };
    let pruned = prune_small(&found, cfg.min_size)?;
    log::info!("selected K={} with {} pruned", pruned.k, pruned.pruned.len());
    let prov = provenance("shades", &cfg, seed, json!({ "model": path_str(&model_path) }));
    ShadeFile::from_assignment(&model.attribute_id, axis, ids, &pruned, Some(prov)).save(&args.out)
}

fn train(mut cfg: PipelineConfig, args: TrainArgs) -> Result<()> {
    cfg.threshold = args.threshold.unwrap_or(cfg.threshold);
    if args.attribute.is_some() {
        cfg.attribute = args.attribute;
    }
    let labels = require(args.labels.or_else(|| cfg.paths.labels.clone()), "labels")?;
    let features_path = require(args.features.or_else(|| cfg.paths.features.clone()), "features")?;
    let shades_path = require(Some(args.shades), "shades")?;
    let shade_file = ShadeFile::load(&shades_path)?;
    if shade_file.axis != "annotators" {
        return Err(Error::Config("train needs an annotator shade file".into()));
    }
    let attribute = cfg.attribute.clone().or_else(|| Some(shade_file.attribute_id.clone()));
    let matrix = load_matrix(&labels, attribute.as_deref())?;
    let features = FeatureTable::load_csv(&features_path)?;
    let assignment = shade_file.to_assignment(matrix.annotators().ids());
    let seed = derive_seed(cfg.seed, "train");
    let mut set = build_shade_classifiers(&matrix, &features, &assignment, &cfg.train_options(seed)?)?;
    set.provenance = Some(provenance(
        "train",
        &cfg,
        seed,
        json!({
            "labels": path_str(&labels),
            "features": path_str(&features_path),
            "shades": path_str(&shades_path),
        }),
    ));
    write_json(&args.out, &set)
}

fn read_user_labels(path: &Path) -> Result<Vec<(String, u8)>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (k, row) in reader.records().enumerate() {
        let line = k as u64 + 2;
        let parse = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let row = row.map_err(|e| parse(e.to_string()))?;
        if row.len() != 2 {
            return Err(parse(format!("expected item_id,label, found {} fields", row.len())));
        }
        let label = match row[1].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(parse(format!("label {other:?} not in {{0,1}}"))),
        };
        out.push((row[0].trim().to_string(), label));
    }
    Ok(out)
}

fn predict(cfg: PipelineConfig, args: PredictArgs) -> Result<()> {
    let set_path = require(Some(args.classifiers), "classifiers")?;
    let set = ShadeClassifierSet::load(&set_path)?;
    let features_path = require(args.features.or_else(|| cfg.paths.features.clone()), "features")?;
    let features = FeatureTable::load_csv(&features_path)?;
    let user = match (&args.user, &args.user_labels) {
        (Some(id), _) => Some(UserRef::Known(id.clone())),
        (None, Some(p)) => {
            let model_path = require(args.model.clone(), "model")?;
            let model = FactorModel::load(&model_path)?;
            Some(fold_in_user(&model, &read_user_labels(p)?)?)
        }
        (None, None) => None,
    };
    let items: Vec<String> = match args.items {
        Some(v) => v,
        None => features.items().ids().to_vec(),
    };
    if let Some(UserRef::Known(id)) = &user {
        if !set.routing.contains_key(id) {
            log::warn!("user {id:?} has no shade; answering with the consensus model");
        }
    }
    let mut out = String::from("item_id,label,margin,shade,fallback\n");
    for id in &items {
        let raw = features.require(id)?;
        let p = match &user {
            Some(u) => predict_for_user(&set, u, raw),
            None => set.predict_consensus(raw),
        };
        let shade = p.shade.map(|s| s.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{id},{},{},{shade},{}", p.label, p.margin, p.fallback);
    }
    write_text(&args.out, &out)?;
    let prov = provenance(
        "predict",
        &cfg,
        cfg.seed,
        json!({ "classifiers": path_str(&set_path), "features": path_str(&features_path) }),
    );
    write_json(&sidecar(&args.out), &prov)
}

/// `<out>.provenance.json` next to a CSV output.
fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(OsString::from).unwrap_or_default();
    name.push(".provenance.json");
    out.with_file_name(name)
}

fn impute_cells(cfg: PipelineConfig, args: ImputeArgs) -> Result<()> {
    let model_path = require(Some(args.model), "model")?;
    let model = FactorModel::load(&model_path)?;
    let mut out = String::from("annotator_id,item_id,score,label\n");
    for i in 0..model.num_annotators() {
        for j in 0..model.num_items() {
            let s = impute(&model, i, j)?;
            let _ = writeln!(out, "{},{},{s},{}", model.annotators.id(i), model.items.id(j), binarize(s));
        }
    }
    write_text(&args.out, &out)?;
    write_json(
        &sidecar(&args.out),
        &provenance("impute", &cfg, cfg.seed, json!({ "model": path_str(&model_path) })),
    )
}

fn tensor_impute(mut cfg: PipelineConfig, args: TensorImputeArgs) -> Result<()> {
    cfg.dim = args.dim.unwrap_or(cfg.dim);
    cfg.samples = args.samples.unwrap_or(cfg.samples);
    cfg.burn_in = args.burn_in.unwrap_or(cfg.burn_in);
    if cfg.samples == 0 {
        return Err(Error::Config("samples must be at least 1".into()));
    }
    let labels = require(args.labels.or_else(|| cfg.paths.labels.clone()), "labels")?;
    let tensor = LabelFile::read(&labels)?.tensor()?;
    let seed = derive_seed(cfg.seed, "tensor-impute");
    let model = fit_bptf(&tensor, &cfg.hyper()?, &cfg.gibbs(), seed)?;
    let prov = provenance("tensor-impute", &cfg, seed, json!({ "labels": path_str(&labels) }));
    write_text(&args.model_out, &model.to_json(Some(prov.clone()))?)?;
    write_cross_imputations(&model, &tensor, &args.out)?;
    write_json(&sidecar(&args.out), &prov)
}

fn write_cross_imputations(model: &TensorFactorModel, tensor: &crate::labels::LabelTensor, out: &Path) -> Result<()> {
    let (m, n, z) = (model.num_annotators(), model.num_items(), model.num_attributes());
    let mut observed = vec![false; m * n * z];
    for e in tensor.entries() {
        observed[(e.annotator * n + e.item) * z + e.attribute] = true;
    }
    let mut text = String::from("annotator_id,item_id,attribute_id,score,label,uninformed\n");
    for i in 0..m {
        for j in 0..n {
            for k in 0..z {
                if observed[(i * n + j) * z + k] {
                    continue;
                }
                let c = impute_cross_attribute(model, i, j, k)?;
                let _ = writeln!(
                    text,
                    "{},{},{},{},{},{}",
                    model.annotators.id(i),
                    model.items.id(j),
                    model.attributes.id(k),
                    c.score,
                    binarize(c.score),
                    c.uninformed
                );
            }
        }
    }
    write_text(out, &text)
}

fn coherence(mut cfg: PipelineConfig, args: CoherenceArgs) -> Result<()> {
    cfg.topics = args.topics.unwrap_or(cfg.topics);
    if args.attribute.is_some() {
        cfg.attribute = args.attribute;
    }
    let corpus_path = require(args.corpus.or_else(|| cfg.paths.corpus.clone()), "corpus")?;
    let labels = require(args.labels.or_else(|| cfg.paths.labels.clone()), "labels")?;
    let shades_path = require(Some(args.shades), "shades")?;
    let shade_file = ShadeFile::load(&shades_path)?;
    let attribute = cfg.attribute.clone().or_else(|| Some(shade_file.attribute_id.clone()));
    let matrix = load_matrix(&labels, attribute.as_deref())?;
    let corpus = Corpus::load_jsonl(&corpus_path)?.positives(&matrix, args.consensus_only.then_some(cfg.threshold))?;
    let grouped = corpus.group_by_annotator_shade(&shade_file.assignment);
    if grouped.is_empty() {
        return Err(Error::domain("no shaded documents with positive labels"));
    }
    let covered: Vec<usize> = grouped.iter().flatten().copied().collect();
    let kept = Corpus {
        vocabulary: corpus.vocabulary.clone(),
        documents: covered.iter().map(|&d| corpus.documents[d].clone()).collect(),
    };
    let mut start = 0;
    let shading: Vec<Vec<usize>> = grouped
        .iter()
        .map(|g| {
            let v: Vec<usize> = (start..start + g.len()).collect();
            start += g.len();
            v
        })
        .collect();
    let seed = derive_seed(cfg.seed, "coherence");
    let model = fit_plsa(&kept, cfg.topics, cfg.plsa_iters, cfg.plsa_tol, derive_seed(seed, "plsa"))?;
    // size-matched random shading of the same documents as a baseline
    let mut order: Vec<usize> = (0..kept.len()).collect();
    order.shuffle(&mut seeded(derive_seed(seed, "baseline")));
    let mut start = 0;
    let random: Vec<Vec<usize>> = shading
        .iter()
        .map(|g| {
            let v = order[start..start + g.len()].to_vec();
            start += g.len();
            v
        })
        .collect();
    let cmp = compare_shadings(&model, &shading, &random)?;
    let prov = provenance(
        "coherence",
        &cfg,
        seed,
        json!({
            "corpus": path_str(&corpus_path),
            "labels": path_str(&labels),
            "shades": path_str(&shades_path),
        }),
    );
    let report = json!({
        "topics": cfg.topics,
        "documents": kept.len(),
        "shades": cmp.first,
        "random_baseline": cmp.second,
        "log_likelihood": model.log_likelihood,
        "iterations": model.iterations,
    });
    write_json(&args.out, &with_provenance(report, prov))
}

fn evaluate(mut cfg: PipelineConfig, args: EvaluateArgs) -> Result<()> {
    if let Some(r) = args.repeats {
        cfg.evaluation.repeats = r;
    }
    if let Some(d) = args.dim_sweep {
        cfg.evaluation.dim_sweep = d;
    }
    if let Some(s) = args.silhouette {
        cfg.evaluation.select.variant = silhouette_of(s);
    }
    let seed = derive_seed(cfg.seed, "evaluate");
    cfg.evaluation.seed = seed;
    let out = args
        .out
        .or_else(|| cfg.paths.output_dir.clone())
        .ok_or_else(|| Error::Config("evaluate needs --out or paths.output_dir".into()))?;
    let report = run_evaluation(&cfg.evaluation)?;
    let prov = provenance("evaluate", &cfg, seed, json!({}));
    write_json(&out.join("report.json"), &with_provenance(serde_json::to_value(&report)?, prov))?;
    write_text(&out.join("report.txt"), &report.to_table())
}

/// Dispatch an already-parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        // a second initialization only happens in tests that call run twice
        if rayon::ThreadPoolBuilder::new().num_threads(t).build_global().is_err() {
            log::debug!("thread pool already initialized");
        }
    }
    match cli.command {
        Command::Simulate(a) => simulate(cfg, a),
        Command::Factorize(a) => factorize(cfg, a),
        Command::Shades(a) => shades(cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Predict(a) => predict(cfg, a),
        Command::Impute(a) => impute_cells(cfg, a),
        Command::TensorImpute(a) => tensor_impute(cfg, a),
        Command::Coherence(a) => coherence(cfg, a),
        Command::Evaluate(a) => evaluate(cfg, a),
    }
}

/// Parse, run and map the outcome to a process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stage = format!("{:?}", cli.command).split('(').next().unwrap_or_default().to_lowercase();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error [{stage}]: {e}");
            e.category().exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_overrides() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"dim": 7, "silhouette": "nearest"}"#).unwrap();
        assert_eq!(cfg.dim, 7);
        assert_eq!(cfg.samples, 500);
        assert_eq!(cfg.silhouette, SilhouetteVariant::Nearest);
        assert_eq!((cfg.k_min, cfg.k_max, cfg.min_size), (2, 15, 10));
        assert_eq!(cfg.threshold, 0.9);
        assert_eq!(cfg.topics, 200);
    }

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(main_with_args(["shades", "nope"]), 2);
    }

    #[test]
    fn missing_input_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("m.json");
        let code = main_with_args([
            "shades",
            "factorize",
            "--labels",
            dir.path().join("absent.csv").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn bad_label_file_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let labels = dir.path().join("l.csv");
        std::fs::write(&labels, "annotator_id,item_id,attribute_id,label\na,x,attr,7\n").unwrap();
        let out = dir.path().join("m.json");
        let code = main_with_args([
            "shades",
            "factorize",
            "--labels",
            labels.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 3);
    }

    #[test]
    fn sidecar_name() {
        assert_eq!(sidecar(Path::new("/tmp/p.csv")), PathBuf::from("/tmp/p.csv.provenance.json"));
    }

    #[test]
    fn user_label_csv_parses() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.csv");
        std::fs::write(&p, "item_id,label\nitem0001,1\nitem0002,0\n").unwrap();
        assert_eq!(
            read_user_labels(&p).unwrap(),
            vec![("item0001".to_string(), 1), ("item0002".to_string(), 0)]
        );
        std::fs::write(&p, "item_id,label\nitem0001,2\n").unwrap();
        assert!(matches!(read_user_labels(&p), Err(Error::Parse { line: 2, .. })));
    }
}
