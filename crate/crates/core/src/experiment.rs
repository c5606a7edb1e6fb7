//! Reproducible rank-sweep experiments driven by a flat `key=value` config.
//!
//! An experiment loads (or synthesises) ratings, extracts comparisons, runs
//! every method at every rank, and writes into the output directory:
//!
//! - `ratings.tsv`, `ids.tsv`, `comparisons.txt`
//! - `params/cpr_rank{r}_run{k}.txt` for every trained model
//! - `metrics.csv` and `metrics.json`
//! - `config.txt` (replayable config echo) and `manifest.json`

use std::collections::BTreeMap;
use std::fs;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use crate::baselines::KnnConfig;
use crate::comparisons::{extract_comparisons, store_comparisons};
use crate::error::{Error, Result, StageContext};
use crate::evaluation::{
    average_series, collect_series, metrics_json, normalize_for_report, sweep_cells, write_metrics_csv, Method,
    MetricReport, SweepOptions,
};
use crate::ingest::{
    parse_movielens, select_subset, synthesize, write_movielens, Dataset, IdMap, SubsetRule, SynthConfig,
};
use crate::model::{save_params, Hyperparams, ParamsFormat};
use crate::optimizer::{LearningRateSchedule, StoppingRule, TrainOptions};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    MovieLens(PathBuf),
    Synthetic(SynthConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubsetSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub rule: SubsetRule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub subset: Option<SubsetSpec>,
    pub methods: Vec<Method>,
    pub ranks: Vec<usize>,
    /// `hyper.seed` is the base seed; run `k` trains with `seed + k`.
    pub hyper: Hyperparams,
    pub train: TrainOptions,
    pub knn: KnnConfig,
    /// Transitively close the extracted comparisons.
    pub expand: bool,
    /// Independent training seeds whose metrics are averaged.
    pub runs: usize,
    /// Evaluate sweep cells serially.
    pub deterministic: bool,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic(SynthConfig::default()),
            subset: None,
            methods: Method::ALL.to_vec(),
            ranks: (2..=26).collect(),
            hyper: Hyperparams::default(),
            train: TrainOptions::default(),
            knn: KnnConfig::default(),
            expand: false,
            runs: 1,
            deterministic: true,
            output_dir: PathBuf::from("cpr-out"),
        }
    }
}

/// `2..26` (inclusive) or a comma-separated list.
pub fn parse_ranks(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("invalid rank list `{s}`"));
    let ranks: Vec<usize> = if let Some((lo, hi)) = s.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        (lo..=hi).collect()
    } else {
        s.split(',')
            .map(|r| r.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if ranks.is_empty() || ranks.contains(&0) {
        return Err(bad());
    }
    Ok(ranks)
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn synth(cfg: &mut ExperimentConfig) -> &mut SynthConfig {
    if !matches!(cfg.data, DataSource::Synthetic(_)) {
        cfg.data = DataSource::Synthetic(SynthConfig::default());
    }
    match &mut cfg.data {
        DataSource::Synthetic(s) => s,
        DataSource::MovieLens(_) => unreachable!(),
    }
}

fn subset(cfg: &mut ExperimentConfig) -> &mut SubsetSpec {
    cfg.subset.get_or_insert(SubsetSpec {
        num_users: 40,
        num_items: 60,
        rule: SubsetRule::MostActive,
    })
}

impl ExperimentConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key.trim() {
            "dataset" => self.data = DataSource::MovieLens(PathBuf::from(value.trim())),
            "format" => match value.trim() {
                "movielens" => {
                    if !matches!(self.data, DataSource::MovieLens(_)) {
                        self.data = DataSource::MovieLens(PathBuf::new());
                    }
                }
                "synth" => {
                    synth(self);
                }
                other => return Err(Error::Config(format!("unknown format `{other}`"))),
            },
            "subset_users" => subset(self).num_users = parse_value(key, value)?,
            "subset_items" => subset(self).num_items = parse_value(key, value)?,
            "subset_rule" => subset(self).rule = parse_value(key, value)?,
            "methods" => {
                self.methods = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| s.trim().parse())
                    .collect::<Result<_>>()?
            }
            "ranks" => self.ranks = parse_ranks(value)?,
            "rank" => self.hyper.rank = parse_value(key, value)?,
            "c_m" => self.hyper.c_m = parse_value(key, value)?,
            "c_u" => self.hyper.c_u = parse_value(key, value)?,
            "lambda" => self.hyper.lambda = parse_value(key, value)?,
            "mu" => self.hyper.mu = parse_value(key, value)?,
            "batch_size" => self.hyper.batch_size = parse_value(key, value)?,
            "seed" => self.hyper.seed = parse_value(key, value)?,
            "max_epochs" => self.train.stopping.max_epochs = parse_value(key, value)?,
            "min_gain" => {
                self.train.stopping.min_objective_gain = match value.trim() {
                    "auto" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "lr_schedule" => {
                self.train.schedule = match value.trim() {
                    "constant" => LearningRateSchedule::Constant,
                    "inv-sqrt" => LearningRateSchedule::InverseSqrtEpoch,
                    other => return Err(Error::Config(format!("unknown lr_schedule `{other}`"))),
                }
            }
            "knn_k" => self.knn.k = parse_value(key, value)?,
            "knn_mode" => self.knn.mode = parse_value(key, value)?,
            "knn_similarity" => self.knn.similarity = parse_value(key, value)?,
            "synth_users" => synth(self).num_users = parse_value(key, value)?,
            "synth_items" => synth(self).num_items = parse_value(key, value)?,
            "synth_rank" => synth(self).rank = parse_value(key, value)?,
            "synth_noise" => synth(self).noise = parse_value(key, value)?,
            "synth_density" => synth(self).density = parse_value(key, value)?,
            "synth_seed" => synth(self).seed = parse_value(key, value)?,
            "expand" => self.expand = parse_bool(key, value)?,
            "runs" => self.runs = parse_value(key, value)?,
            "deterministic" => self.deterministic = parse_bool(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value.trim()),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", idx + 1)))?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Every setting as ordered `key=value` pairs, readable by
    /// [`ExperimentConfig::apply_text`].
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| pairs.push((k.to_string(), v));
        match &self.data {
            DataSource::MovieLens(path) => {
                put("format", "movielens".into());
                put("dataset", path.display().to_string());
            }
            DataSource::Synthetic(s) => {
                put("format", "synth".into());
                put("synth_users", s.num_users.to_string());
                put("synth_items", s.num_items.to_string());
                put("synth_rank", s.rank.to_string());
                put("synth_noise", format!("{:?}", s.noise));
                put("synth_density", format!("{:?}", s.density));
                put("synth_seed", s.seed.to_string());
            }
        }
        if let Some(sub) = &self.subset {
            put("subset_users", sub.num_users.to_string());
            put("subset_items", sub.num_items.to_string());
            put("subset_rule", "most-active".into());
        }
        put(
            "methods",
            self.methods.iter().map(|m| m.name()).collect::<Vec<_>>().join(","),
        );
        put(
            "ranks",
            self.ranks.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(","),
        );
        put("c_m", format!("{:?}", self.hyper.c_m));
        put("c_u", format!("{:?}", self.hyper.c_u));
        put("lambda", format!("{:?}", self.hyper.lambda));
        put("mu", format!("{:?}", self.hyper.mu));
        put("batch_size", self.hyper.batch_size.to_string());
        put("seed", self.hyper.seed.to_string());
        put("max_epochs", self.train.stopping.max_epochs.to_string());
        put(
            "min_gain",
            self.train
                .stopping
                .min_objective_gain
                .map(|g| format!("{g:?}"))
                .unwrap_or_else(|| "auto".into()),
        );
        put(
            "lr_schedule",
            match self.train.schedule {
                LearningRateSchedule::Constant => "constant".into(),
                LearningRateSchedule::InverseSqrtEpoch => "inv-sqrt".into(),
            },
        );
        put("knn_k", self.knn.k.to_string());
        put(
            "knn_mode",
            match self.knn.mode {
                crate::baselines::KnnMode::ItemBased => "item".into(),
                crate::baselines::KnnMode::UserBased => "user".into(),
            },
        );
        put(
            "knn_similarity",
            match self.knn.similarity {
                crate::baselines::Similarity::Cosine => "cosine".into(),
                crate::baselines::Similarity::Pearson => "pearson".into(),
            },
        );
        put("expand", self.expand.to_string());
        put("runs", self.runs.to_string());
        put("deterministic", self.deterministic.to_string());
        put("output_dir", self.output_dir.display().to_string());
        pairs
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if self.ranks.is_empty() {
            return Err(Error::Config("no sweep ranks".into()));
        }
        if let Some(sub) = &self.subset {
            if sub.num_users == 0 || sub.num_items == 0 {
                return Err(Error::Config("subset sizes must be positive".into()));
            }
        }
        if let DataSource::MovieLens(path) = &self.data {
            if path.as_os_str().is_empty() {
                return Err(Error::Config("movielens format needs `dataset`".into()));
            }
        }
        if self.train.stopping.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn sweep_options(&self) -> SweepOptions {
        SweepOptions {
            knn: self.knn,
            train: self.train,
            parallel: !self.deterministic,
        }
    }
}

/// Loads the configured ratings, applying the subset rule if any.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let data = match &cfg.data {
        DataSource::MovieLens(path) => parse_movielens(path)?,
        DataSource::Synthetic(s) => {
            let synth = synthesize(s)?;
            Dataset {
                ids: IdMap::sequential(synth.ratings.num_users(), synth.ratings.num_items()),
                ratings: synth.ratings,
            }
        }
    };
    match &cfg.subset {
        Some(sub) => select_subset(&data, sub.num_users, sub.num_items, sub.rule),
        None => Ok(data),
    }
}

#[derive(Debug, Serialize)]
struct Manifest {
    tool: &'static str,
    version: &'static str,
    config: BTreeMap<String, String>,
    run_seeds: Vec<u64>,
    num_users: usize,
    num_items: usize,
    num_ratings: usize,
    item_comparisons: usize,
    user_comparisons: usize,
    failed_cells: Vec<String>,
}

/// What an experiment produced.
#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub output_dir: PathBuf,
    pub report: MetricReport,
    pub failed_cells: Vec<String>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out.join("params"))
        .map_err(|e| Error::io(out, e))
        .stage("output")?;

    let data = load_dataset(cfg).stage("ingest")?;
    let ratings = &data.ratings;
    info!(
        "{} ratings over {} users and {} items",
        ratings.len(),
        ratings.num_users(),
        ratings.num_items()
    );
    (|| -> Result<()> {
        let path = out.join("ratings.tsv");
        write_movielens(ratings, &data.ids, create(&path)?).map_err(|e| Error::io(&path, e))?;
        data.ids.save(out.join("ids.tsv"))
    })()
    .stage("ingest")?;

    let set = extract_comparisons(ratings, cfg.expand).stage("extract")?;
    store_comparisons(&set, out.join("comparisons.txt")).stage("extract")?;
    info!(
        "{} item and {} user comparisons",
        set.item_comparisons().len(),
        set.user_comparisons().len()
    );

    let options = cfg.sweep_options();
    let mut runs = Vec::with_capacity(cfg.runs);
    let mut failed_cells = Vec::new();
    let mut run_seeds = Vec::with_capacity(cfg.runs);
    for run in 0..cfg.runs {
        let hyper = Hyperparams {
            seed: cfg.hyper.seed.wrapping_add(run as u64),
            ..cfg.hyper
        };
        run_seeds.push(hyper.seed);
        let cells = sweep_cells(ratings, &set, &cfg.methods, &cfg.ranks, &hyper, &options).stage("sweep")?;
        for cell in &cells {
            match &cell.result {
                Ok(metrics) => {
                    if let Some(params) = &metrics.params {
                        let path = out.join("params").join(format!("cpr_rank{}_run{run}.txt", cell.rank));
                        save_params(params, ParamsFormat::Text, path).stage("write")?;
                    }
                }
                Err(e) => failed_cells.push(format!("run {run}: {} at rank {}: {e}", cell.method, cell.rank)),
            }
        }
        runs.push(collect_series(&cells, &cfg.methods, &cfg.ranks));
    }

    let report = normalize_for_report(&average_series(&runs).stage("evaluate")?);
    (|| -> Result<()> {
        let path = out.join("metrics.csv");
        write_metrics_csv(&report, create(&path)?).map_err(|e| Error::io(&path, e))?;
        let path = out.join("metrics.json");
        fs::write(&path, metrics_json(&report)).map_err(|e| Error::io(&path, e))?;

        let pairs = cfg.to_pairs();
        let text: String = pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        let path = out.join("config.txt");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;

        let manifest = Manifest {
            tool: "cpr",
            version: env!("CARGO_PKG_VERSION"),
            config: pairs.into_iter().collect(),
            run_seeds,
            num_users: ratings.num_users(),
            num_items: ratings.num_items(),
            num_ratings: ratings.len(),
            item_comparisons: set.item_comparisons().len(),
            user_comparisons: set.user_comparisons().len(),
            failed_cells: failed_cells.clone(),
        };
        let path = out.join("manifest.json");
        fs::write(
            &path,
            serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        )
        .map_err(|e| Error::io(&path, e))
    })()
    .stage("write")?;

    Ok(ExperimentSummary {
        output_dir: out.clone(),
        report,
        failed_cells,
    })
}

/// Stopping rule and schedule with defaults, for callers that only tune epochs.
pub fn train_options(max_epochs: usize) -> TrainOptions {
    TrainOptions {
        stopping: StoppingRule {
            max_epochs,
            min_objective_gain: None,
        },
        schedule: LearningRateSchedule::Constant,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_lists() {
        assert_eq!(parse_ranks("2..5").unwrap(), vec![2, 3, 4, 5]);
        assert_eq!(parse_ranks("2..=4").unwrap(), vec![2, 3, 4]);
        assert_eq!(parse_ranks("3, 7,9").unwrap(), vec![3, 7, 9]);
        assert!(parse_ranks("0..3").is_err());
        assert!(parse_ranks("5..2").is_err());
        assert!(parse_ranks("a").is_err());
    }

    #[test]
    fn config_echo_replays() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(
            "# paper-shaped\nformat=movielens\ndataset=/tmp/u.data\nsubset_users=40\nsubset_items=60\n\
             methods=cpr,svd\nranks=2..4\nmu=0.01\nlambda=0.2\nlr_schedule=inv-sqrt\nknn_mode=user\nruns=3\n",
        )
        .unwrap();
        assert_eq!(cfg.data, DataSource::MovieLens("/tmp/u.data".into()));
        assert_eq!(cfg.methods, vec![Method::Cpr, Method::Svd]);
        assert_eq!(cfg.subset.unwrap().num_items, 60);
        let text: String = cfg.to_pairs().iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        let mut again = ExperimentConfig::default();
        again.apply_text(&text).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn config_errors() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.set("nonsense", "1").is_err());
        assert!(cfg.set("mu", "fast").is_err());
        assert!(cfg.set("methods", "cpr,bpr").is_err());
        assert!(cfg.apply_text("mu 0.1").is_err());
        cfg.set("format", "movielens").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
