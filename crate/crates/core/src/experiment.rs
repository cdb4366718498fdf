//! Experiment configuration, data preparation and end-to-end runs.
//!
//! A configuration is a flat `key = value` text file. Blank lines and lines
//! starting with `#` are ignored. Unknown keys are errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{
    load_csv, vertical_partition, CsvOptions, Dataset, SplitSpec, Standardizer, VflSplit,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::metrics::comm_summary;
use crate::protocol::{derive_seed, CommLedger, EvalSet, Federation, ProtocolConfig};
use crate::report::{RunReport, REPORT_SCHEMA};
use crate::ssl::MaskSemantics;
use crate::synthetic::{gen_synthetic, SyntheticSpec, SyntheticTask};

const SPLIT_STREAM: u64 = 3;
const TEST_STREAM: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Oneshot,
    Fewshot,
    Vanilla,
    Fedbcd,
    FewshotFinetune,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Oneshot,
        Method::Fewshot,
        Method::Vanilla,
        Method::Fedbcd,
        Method::FewshotFinetune,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Oneshot => "oneshot",
            Method::Fewshot => "fewshot",
            Method::Vanilla => "vanilla",
            Method::Fedbcd => "fedbcd",
            Method::FewshotFinetune => "fewshot_finetune",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub method: Method,
    pub run_id: Option<String>,
    pub source: SourceKind,
    pub synthetic: SyntheticSpec,
    pub csv_path: Option<PathBuf>,
    pub csv_label_column: String,
    pub csv_has_header: bool,
    pub csv_drop_columns: Vec<String>,
    /// Explicit column lists per client; overrides `split_first`.
    pub split_columns: Option<Vec<Vec<usize>>>,
    /// Two-way split: this many leading columns go to client 0.
    pub split_first: Option<usize>,
    pub overlap: usize,
    pub split_seed: Option<u64>,
    pub test_fraction: f64,
    pub protocol: ProtocolConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::Oneshot,
            run_id: None,
            source: SourceKind::Synthetic,
            synthetic: SyntheticSpec {
                n: 2000,
                d_per_client: 4,
                classes: 2,
                task: SyntheticTask::XorCross,
                noise: 0.3,
                seed: 0,
            },
            csv_path: None,
            csv_label_column: "label".into(),
            csv_has_header: true,
            csv_drop_columns: Vec::new(),
            split_columns: None,
            split_first: None,
            overlap: 64,
            split_seed: None,
            test_fraction: 0.2,
            protocol: ProtocolConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(
            key,
            format!("expected true or false, got `{value}`"),
        )),
    }
}

fn parse_columns(key: &str, value: &str) -> Result<Vec<Vec<usize>>> {
    value
        .split(';')
        .map(|client| {
            client
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|c| parse::<usize>(key, c))
                .collect()
        })
        .collect()
}

fn join_columns(cols: &[Vec<usize>]) -> String {
    cols.iter()
        .map(|c| c.iter().map(usize::to_string).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join(";")
}

impl ExperimentConfig {
    /// Sets one key. `seed` also becomes the default for the data seeds.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let p = &mut self.protocol;
        match key {
            "method" => {
                self.method = value
                    .parse()
                    .map_err(|e: Error| Error::config(key, e.to_string()))?
            }
            "run_id" => self.run_id = Some(value.to_owned()).filter(|v| !v.is_empty()),
            "seed" => p.seed = parse(key, value)?,
            "data.source" => {
                self.source = match value {
                    "synthetic" => SourceKind::Synthetic,
                    "csv" => SourceKind::Csv,
                    _ => return Err(Error::config(key, "expected `synthetic` or `csv`")),
                }
            }
            "data.path" => self.csv_path = Some(PathBuf::from(value)),
            "data.label_column" => self.csv_label_column = value.to_owned(),
            "data.has_header" => self.csv_has_header = parse_bool(key, value)?,
            "data.drop_columns" => {
                self.csv_drop_columns = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_owned)
                    .collect()
            }
            "synthetic.n" => self.synthetic.n = parse(key, value)?,
            "synthetic.d_per_client" => self.synthetic.d_per_client = parse(key, value)?,
            "synthetic.classes" => self.synthetic.classes = parse(key, value)?,
            "synthetic.task" => self.synthetic.task = parse(key, value)?,
            "synthetic.noise" => self.synthetic.noise = parse(key, value)?,
            "synthetic.seed" => self.synthetic.seed = parse(key, value)?,
            "split.columns" => self.split_columns = Some(parse_columns(key, value)?),
            "split.first" => self.split_first = Some(parse(key, value)?),
            "split.overlap" => self.overlap = parse(key, value)?,
            "split.seed" => self.split_seed = Some(parse(key, value)?),
            "split.test_fraction" => self.test_fraction = parse(key, value)?,
            "client_hidden" => p.client_hidden = parse(key, value)?,
            "rep_dim" => p.rep_dim = parse(key, value)?,
            "server_hidden" => p.server_hidden = parse(key, value)?,
            "batch_size" => p.batch_size = parse(key, value)?,
            "client_lr" => p.client_lr = parse(key, value)?,
            "server_lr" => p.server_lr = parse(key, value)?,
            "client_epochs" => p.client_epochs = parse(key, value)?,
            "server_epochs" => p.server_epochs = parse(key, value)?,
            "lambda_u" => p.lambda_u = parse(key, value)?,
            "tau" => p.tau = parse(key, value)?,
            "share_mask" => p.share_mask = parse_bool(key, value)?,
            "r_m" => p.r_m = parse(key, value)?,
            "sigma" => p.sigma = parse(key, value)?,
            "mask_semantics" => p.mask_semantics = parse::<MaskSemantics>(key, value)?,
            "threshold" => p.threshold = parse(key, value)?,
            "local_steps" => p.local_steps = parse(key, value)?,
            "rounds" => p.rounds = parse(key, value)?,
            "patience" => {
                p.patience = match value {
                    "none" | "" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "eval_every" => p.eval_every = parse(key, value)?,
            "bytes_per_scalar" => p.bytes_per_scalar = parse(key, value)?,
            "normalize_gradients" => p.normalize_gradients = parse_bool(key, value)?,
            "kmeans_restarts" => p.kmeans_restarts = parse(key, value)?,
            "server_grad_warmup_epochs" => p.server_grad_warmup_epochs = parse(key, value)?,
            "reuse_joint_classifier" => p.reuse_joint_classifier = parse_bool(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Parses a configuration file body on top of the defaults. When `seed`
    /// is given without `synthetic.seed`, the generator uses the same seed.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut synthetic_seed_set = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    format!("line {}", lineno + 1),
                    format!("expected `key = value`, got `{line}`"),
                )
            })?;
            let key = key.trim();
            synthetic_seed_set |= key == "synthetic.seed";
            cfg.set(key, value)?;
        }
        if !synthetic_seed_set {
            cfg.synthetic.seed = cfg.protocol.seed;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn seed(&self) -> u64 {
        self.protocol.seed
    }

    pub fn effective_split_seed(&self) -> u64 {
        self.split_seed
            .unwrap_or_else(|| derive_seed(self.seed(), SPLIT_STREAM))
    }

    pub fn run_id(&self) -> String {
        self.run_id
            .clone()
            .unwrap_or_else(|| format!("{}-seed{}", self.method.as_str(), self.seed()))
    }

    /// Column lists per client for a dataset with `num_features` columns.
    pub fn client_columns(&self, num_features: usize) -> Vec<Vec<usize>> {
        if let Some(cols) = &self.split_columns {
            return cols.clone();
        }
        let first = self.split_first.unwrap_or(match self.source {
            SourceKind::Synthetic => self.synthetic.d_per_client,
            SourceKind::Csv => 10,
        });
        SplitSpec::two_way(num_features, first.min(num_features), self.overlap, 0).client_columns
    }

    /// Checks everything that can be checked without reading data.
    pub fn validate(&self) -> Result<()> {
        self.protocol.validate()?;
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("split.test_fraction", "must be in (0, 1)"));
        }
        if self.overlap == 0 {
            return Err(Error::config("split.overlap", "must be at least 1"));
        }
        if self.source == SourceKind::Synthetic {
            self.synthetic
                .validate()
                .map_err(|e| Error::config("synthetic", e.to_string()))?;
        }
        if self.source == SourceKind::Csv && self.csv_path.is_none() {
            return Err(Error::config(
                "data.path",
                "required when data.source = csv",
            ));
        }
        if let Some(cols) = &self.split_columns {
            if cols.len() < 2 || cols.iter().any(Vec::is_empty) {
                return Err(Error::config(
                    "split.columns",
                    "need at least two non-empty clients",
                ));
            }
        }
        let clients = self.split_columns.as_ref().map_or(2, Vec::len);
        if matches!(self.method, Method::Fewshot | Method::FewshotFinetune) && clients != 2 {
            return Err(Error::config(
                "method",
                "few-shot runs need exactly two clients",
            ));
        }
        if self.split_first == Some(0) {
            return Err(Error::config("split.first", "must be at least 1"));
        }
        Ok(())
    }

    /// Every effective setting as flat key/value pairs; parsing them back
    /// yields an identical configuration.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let p = &self.protocol;
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_owned(), v);
        };
        put("method", self.method.as_str().into());
        put("run_id", self.run_id());
        put("seed", p.seed.to_string());
        put(
            "data.source",
            match self.source {
                SourceKind::Synthetic => "synthetic".into(),
                SourceKind::Csv => "csv".into(),
            },
        );
        if let Some(path) = &self.csv_path {
            put("data.path", path.display().to_string());
        }
        put("data.label_column", self.csv_label_column.clone());
        put("data.has_header", self.csv_has_header.to_string());
        put("data.drop_columns", self.csv_drop_columns.join(","));
        put("synthetic.n", self.synthetic.n.to_string());
        put(
            "synthetic.d_per_client",
            self.synthetic.d_per_client.to_string(),
        );
        put("synthetic.classes", self.synthetic.classes.to_string());
        put("synthetic.task", self.synthetic.task.to_string());
        put("synthetic.noise", self.synthetic.noise.to_string());
        put("synthetic.seed", self.synthetic.seed.to_string());
        if let Some(cols) = &self.split_columns {
            put("split.columns", join_columns(cols));
        }
        if let Some(first) = self.split_first {
            put("split.first", first.to_string());
        }
        put("split.overlap", self.overlap.to_string());
        put("split.seed", self.effective_split_seed().to_string());
        put("split.test_fraction", self.test_fraction.to_string());
        put("client_hidden", p.client_hidden.to_string());
        put("rep_dim", p.rep_dim.to_string());
        put("server_hidden", p.server_hidden.to_string());
        put("batch_size", p.batch_size.to_string());
        put("client_lr", p.client_lr.to_string());
        put("server_lr", p.server_lr.to_string());
        put("client_epochs", p.client_epochs.to_string());
        put("server_epochs", p.server_epochs.to_string());
        put("lambda_u", p.lambda_u.to_string());
        put("tau", p.tau.to_string());
        put("share_mask", p.share_mask.to_string());
        put("r_m", p.r_m.to_string());
        put("sigma", p.sigma.to_string());
        put("mask_semantics", p.mask_semantics.to_string());
        put("threshold", p.threshold.to_string());
        put("local_steps", p.local_steps.to_string());
        put("rounds", p.rounds.to_string());
        put(
            "patience",
            p.patience.map_or_else(|| "none".into(), |v| v.to_string()),
        );
        put("eval_every", p.eval_every.to_string());
        put("bytes_per_scalar", p.bytes_per_scalar.to_string());
        put("normalize_gradients", p.normalize_gradients.to_string());
        put("kmeans_restarts", p.kmeans_restarts.to_string());
        put(
            "server_grad_warmup_epochs",
            p.server_grad_warmup_epochs.to_string(),
        );
        put(
            "reuse_joint_classifier",
            p.reuse_joint_classifier.to_string(),
        );
        m
    }

    /// Config file text for [`Self::to_pairs`].
    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match self.source {
            SourceKind::Synthetic => gen_synthetic(&self.synthetic),
            SourceKind::Csv => {
                let path = self
                    .csv_path
                    .as_ref()
                    .ok_or_else(|| Error::config("data.path", "required when data.source = csv"))?;
                let opts = CsvOptions {
                    label_column: self.csv_label_column.clone(),
                    has_header: self.csv_has_header,
                    drop_columns: self.csv_drop_columns.clone(),
                };
                load_csv(path, &opts)
            }
        }
    }
}

/// A split ready for training and the matching held-out rows.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub split: VflSplit,
    pub test: EvalSet,
}

/// Holds out a test fraction, partitions the rest vertically and standardizes
/// each client's columns with statistics of that client's own training rows.
pub fn prepare_data(
    data: &Dataset,
    client_columns: Vec<Vec<usize>>,
    overlap: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<PreparedData> {
    let (train, test) = data.train_test_split(test_fraction, derive_seed(seed, TEST_STREAM))?;
    let spec = SplitSpec {
        client_columns,
        overlap,
        seed,
    };
    let mut split = vertical_partition(&train, &spec)?;
    let mut test_blocks = Vec::with_capacity(split.clients.len());
    for shard in &mut split.clients {
        let local = if shard.unaligned.rows() > 0 {
            Matrix::vconcat(&[&shard.overlap, &shard.unaligned])?
        } else {
            shard.overlap.clone()
        };
        let stats = Standardizer::fit(&local)?;
        shard.overlap = stats.apply(&shard.overlap)?;
        if shard.unaligned.rows() > 0 {
            shard.unaligned = stats.apply(&shard.unaligned)?;
        }
        test_blocks.push(stats.apply(&test.features.select_cols(&shard.columns))?);
    }
    Ok(PreparedData {
        split,
        test: EvalSet {
            client_features: test_blocks,
            labels: test.labels,
        },
    })
}

/// Runs one method on prepared data and returns the trained federation and
/// any test curve recorded during end-to-end rounds.
pub fn run_method(
    method: Method,
    data: &PreparedData,
    cfg: &ProtocolConfig,
) -> Result<(Federation, Vec<crate::protocol::CurvePoint>)> {
    let mut fed = Federation::new(&data.split, cfg.clone())?;
    let curve = match method {
        Method::Oneshot => {
            fed.run_oneshot()?;
            Vec::new()
        }
        Method::Fewshot => {
            fed.run_fewshot()?;
            Vec::new()
        }
        Method::Vanilla => fed.run_vanilla(cfg.rounds, 1, Some(&data.test))?,
        Method::Fedbcd => fed.run_vanilla(cfg.rounds, cfg.local_steps, Some(&data.test))?,
        Method::FewshotFinetune => {
            fed.run_fewshot()?;
            fed.run_vanilla(cfg.rounds, 1, Some(&data.test))?
        }
    };
    Ok((fed, curve))
}

/// Loads data, runs the configured method and assembles the report.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(RunReport, CommLedger)> {
    cfg.validate()?;
    let dataset = cfg.load_dataset()?;
    let columns = cfg.client_columns(dataset.num_features());
    SplitSpec {
        client_columns: columns.clone(),
        overlap: cfg.overlap,
        seed: 0,
    }
    .validate(dataset.num_features(), dataset.len())
    .map_err(|e| Error::config("split", e.to_string()))?;
    let data = prepare_data(
        &dataset,
        columns,
        cfg.overlap,
        cfg.test_fraction,
        cfg.effective_split_seed(),
    )?;
    let (fed, curve) = run_method(cfg.method, &data, &cfg.protocol)?;
    let metrics = fed.evaluate(&data.test)?;
    let report = RunReport {
        schema: REPORT_SCHEMA,
        run_id: cfg.run_id(),
        method: cfg.method.as_str().to_owned(),
        seed: cfg.seed(),
        config: cfg.to_pairs(),
        metrics,
        comm: comm_summary(fed.ledger()),
        timings: fed.timings().to_vec(),
        curve,
        diagnostics: fed.diagnostics().to_vec(),
    };
    Ok((report, fed.ledger().clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_comments() {
        let cfg = ExperimentConfig::parse_str(
            "# demo\nmethod = fedbcd\nseed = 7\n\nsplit.overlap = 100\nlocal_steps=5\npatience = 20\n",
        )
        .unwrap();
        assert_eq!(cfg.method, Method::Fedbcd);
        assert_eq!(cfg.seed(), 7);
        assert_eq!(cfg.synthetic.seed, 7);
        assert_eq!(cfg.overlap, 100);
        assert_eq!(cfg.protocol.local_steps, 5);
        assert_eq!(cfg.protocol.patience, Some(20));
    }

    #[test]
    fn unknown_key_names_the_key() {
        let err = ExperimentConfig::parse_str("rounds = 3\nlearning_rate = 0.1\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "learning_rate"));
        let err = ExperimentConfig::parse_str("rounds = many\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "rounds"));
        assert!(ExperimentConfig::parse_str("just words\n").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = ExperimentConfig::parse_str(
            "method = fewshot\nseed = 3\nsigma = 0.25\nsplit.columns = 0,1;2,3,4\n",
        )
        .unwrap();
        cfg.run_id = Some("abc".into());
        let again = ExperimentConfig::parse_str(&cfg.to_text()).unwrap();
        assert_eq!(again.to_pairs(), cfg.to_pairs());
        assert_eq!(again.protocol, cfg.protocol);
        assert_eq!(again.split_columns, cfg.split_columns);
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = ExperimentConfig::default();
        cfg.protocol.threshold = 1.0;
        assert!(matches!(cfg.validate(), Err(Error::Config { ref key, .. }) if key == "threshold"));
        let cfg = ExperimentConfig {
            source: SourceKind::Csv,
            ..ExperimentConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { ref key, .. }) if key == "data.path"));
        let cfg = ExperimentConfig {
            method: Method::Fewshot,
            split_columns: Some(vec![vec![0], vec![1], vec![2]]),
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn prepared_clients_are_standardized_locally() {
        let data = gen_synthetic(&SyntheticSpec {
            n: 200,
            d_per_client: 2,
            classes: 2,
            task: SyntheticTask::Linear,
            noise: 0.5,
            seed: 1,
        })
        .unwrap();
        let p = prepare_data(&data, vec![vec![0, 1], vec![2, 3]], 40, 0.25, 9).unwrap();
        assert_eq!(p.test.len(), 50);
        assert_eq!(p.split.overlap_size(), 40);
        for shard in &p.split.clients {
            let all = Matrix::vconcat(&[&shard.overlap, &shard.unaligned]).unwrap();
            for m in all.col_means() {
                assert!(m.abs() < 1e-9);
            }
        }
    }
}
