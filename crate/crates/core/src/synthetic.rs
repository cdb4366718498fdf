//! Seeded synthetic datasets for desk-scale experiments.
//!
//! Every generator lays out two clients' worth of columns, client 0 first.
//! `XorCross` is the interesting one: each client holds a noisy encoding of
//! one latent factor and the label is their sum modulo `C`, so either half on
//! its own carries no label information while the two together determine it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matrix::{squared_distance, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTask {
    Linear,
    XorCross,
}

impl std::str::FromStr for SyntheticTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "xor_cross" => Ok(Self::XorCross),
            other => Err(Error::invalid(format!("unknown synthetic task `{other}`"))),
        }
    }
}

impl std::fmt::Display for SyntheticTask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::XorCross => "xor_cross",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d_per_client: usize,
    pub classes: usize,
    pub task: SyntheticTask,
    pub noise: f64,
    pub seed: u64,
}

/// Holdout accuracies of a k-nearest-neighbour probe fitted at generation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityCheck {
    pub neighbours: usize,
    pub holdout_size: usize,
    pub single_client_accuracy: Vec<f64>,
    pub joint_accuracy: f64,
    /// `1/C + 0.1`, the ceiling a single client should stay under on `xor_cross`.
    pub single_client_ceiling: f64,
    pub passed: bool,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if self.d_per_client == 0 {
            return Err(Error::invalid("need at least one feature per client"));
        }
        if self.n < 4 * self.classes {
            return Err(Error::invalid(format!(
                "n = {} is below 4 x classes = {}",
                self.n,
                4 * self.classes
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("noise must be finite and non-negative"));
        }
        Ok(())
    }
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.d_per_client;
    let c = spec.classes;
    let width = 2 * d;
    let mut data = Vec::with_capacity(spec.n * width);
    let mut labels = Vec::with_capacity(spec.n);
    match spec.task {
        SyntheticTask::Linear => {
            let means = prototypes(&mut rng, c, width);
            for _ in 0..spec.n {
                let y = rng.random_range(0..c);
                push_noisy(&mut data, means.row(y), spec.noise, &mut rng);
                labels.push(y);
            }
        }
        SyntheticTask::XorCross => {
            let protos = [prototypes(&mut rng, c, d), prototypes(&mut rng, c, d)];
            for _ in 0..spec.n {
                let a = rng.random_range(0..c);
                let b = rng.random_range(0..c);
                push_noisy(&mut data, protos[0].row(a), spec.noise, &mut rng);
                push_noisy(&mut data, protos[1].row(b), spec.noise, &mut rng);
                labels.push((a + b) % c);
            }
        }
    }
    let names = (0..2)
        .flat_map(|k| (0..d).map(move |j| format!("c{k}_f{j}")))
        .collect();
    Dataset::new(
        Matrix::from_vec(spec.n, width, data)?,
        labels,
        names,
        (0..c).map(|y| y.to_string()).collect(),
    )
}

/// Class prototypes: rows of i.i.d. standard normals scaled so the expected
/// distance between two prototypes is about 4.
fn prototypes<R: Rng>(rng: &mut R, count: usize, dim: usize) -> Matrix {
    let scale = (8.0 / dim as f64).sqrt();
    let data = (0..count * dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(count, dim, data).expect("length matches")
}

fn push_noisy<R: Rng>(out: &mut Vec<f64>, center: &[f64], noise: f64, rng: &mut R) {
    out.extend(
        center
            .iter()
            .map(|&m| m + noise * Distribution::<f64>::sample(&StandardNormal, rng)),
    );
}

/// Fits a k-NN probe on 70% of the rows and scores the remaining 30% using
/// client 0's columns, client 1's columns, and both.
pub fn separability_check(
    data: &Dataset,
    d_per_client: usize,
    seed: u64,
) -> Result<SeparabilityCheck> {
    let (train, test) = data.train_test_split(0.3, seed)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("dataset too small for a separability check"));
    }
    let neighbours = ((train.len() as f64).sqrt() as usize).clamp(1, 25) | 1;
    let c = data.num_classes();
    let halves = [
        (0..d_per_client).collect::<Vec<_>>(),
        (d_per_client..2 * d_per_client).collect(),
    ];
    let single: Vec<f64> = halves
        .iter()
        .map(|cols| {
            knn_accuracy(
                &train.features.select_cols(cols),
                &train.labels,
                &test.features.select_cols(cols),
                &test.labels,
                neighbours,
                c,
            )
        })
        .collect();
    let joint = knn_accuracy(
        &train.features,
        &train.labels,
        &test.features,
        &test.labels,
        neighbours,
        c,
    );
    let ceiling = 1.0 / c as f64 + 0.1;
    let passed = joint >= 0.95 && single.iter().all(|&a| a <= ceiling);
    Ok(SeparabilityCheck {
        neighbours,
        holdout_size: test.len(),
        single_client_accuracy: single,
        joint_accuracy: joint,
        single_client_ceiling: ceiling,
        passed,
    })
}

fn knn_accuracy(
    train_x: &Matrix,
    train_y: &[usize],
    test_x: &Matrix,
    test_y: &[usize],
    k: usize,
    classes: usize,
) -> f64 {
    let mut correct = 0usize;
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(train_x.rows());
    for (row, &y) in test_x.iter_rows().zip(test_y) {
        dists.clear();
        dists.extend(
            train_x
                .iter_rows()
                .zip(train_y)
                .map(|(t, &ty)| (squared_distance(row, t), ty)),
        );
        let k = k.min(dists.len());
        dists.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0));
        let mut votes = vec![0usize; classes];
        for &(_, ty) in &dists[..k] {
            votes[ty] += 1;
        }
        let pred = votes
            .iter()
            .enumerate()
            .max_by_key(|&(i, &v)| (v, std::cmp::Reverse(i)))
            .map_or(0, |(i, _)| i);
        if pred == y {
            correct += 1;
        }
    }
    correct as f64 / test_y.len() as f64
}

/// Column layout of the UCI "default of credit card clients" file.
pub const CREDIT_COLUMNS: [&str; 23] = [
    "LIMIT_BAL",
    "SEX",
    "EDUCATION",
    "MARRIAGE",
    "AGE",
    "PAY_0",
    "PAY_2",
    "PAY_3",
    "PAY_4",
    "PAY_5",
    "PAY_6",
    "BILL_AMT1",
    "BILL_AMT2",
    "BILL_AMT3",
    "BILL_AMT4",
    "BILL_AMT5",
    "BILL_AMT6",
    "PAY_AMT1",
    "PAY_AMT2",
    "PAY_AMT3",
    "PAY_AMT4",
    "PAY_AMT5",
    "PAY_AMT6",
];

pub const CREDIT_LABEL: &str = "default.payment.next.month";

/// A stand-in with the same columns and value ranges as the UCI credit
/// default data. A latent risk score drives repayment status, billing and
/// payment amounts, and the default label, so both vertical halves carry
/// partial signal.
pub fn gen_credit_like(n: usize, seed: u64) -> Result<Dataset> {
    if n < 8 {
        return Err(Error::invalid("need at least 8 rows"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * CREDIT_COLUMNS.len());
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let z = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
        let risk = z(&mut rng);
        let wealth = z(&mut rng);
        let age = (35.0 + 9.0 * z(&mut rng)).clamp(21.0, 79.0).round();
        let limit = ((11.6 + 0.55 * wealth - 0.25 * risk).exp() / 10_000.0)
            .round()
            .max(1.0)
            * 10_000.0;
        let sex = if rng.random_bool(0.6) { 2.0 } else { 1.0 };
        let education = (2.0 - 0.5 * wealth + 0.8 * z(&mut rng))
            .round()
            .clamp(1.0, 4.0);
        let marriage = if age > 32.0 && rng.random_bool(0.6) {
            1.0
        } else {
            2.0
        };
        let mut row = vec![limit, sex, education, marriage, age];
        let mut status = 0.8 * risk + 0.6 * z(&mut rng) - 0.4;
        for _ in 0..6 {
            row.push(status.round().clamp(-2.0, 8.0));
            status = 0.75 * status + 0.25 * (0.8 * risk - 0.4) + 0.5 * z(&mut rng);
        }
        let utilisation = 1.0 / (1.0 + (-(0.9 * risk - 0.2 + 0.5 * z(&mut rng))).exp());
        let mut bill = limit * utilisation;
        for _ in 0..6 {
            row.push(bill.round());
            bill = (bill * (0.9 + 0.1 * z(&mut rng))).max(0.0);
        }
        let pay_ratio = 1.0 / (1.0 + (1.1 * risk + 1.5 + 0.7 * z(&mut rng)).exp());
        for j in 0..6 {
            let amount = row[11 + j] * pay_ratio * (1.0 + 0.3 * z(&mut rng)).max(0.0);
            row.push(amount.round());
        }
        let logit =
            -1.55 + 1.0 * risk + 0.35 * (row[5] + row[6]) / 2.0 - 0.15 * wealth + 0.4 * z(&mut rng);
        let p = 1.0 / (1.0 + (-logit).exp());
        labels.push(usize::from(rng.random_bool(p)));
        data.extend(row);
    }
    Dataset::new(
        Matrix::from_vec(n, CREDIT_COLUMNS.len(), data)?,
        labels,
        CREDIT_COLUMNS.iter().map(|s| s.to_string()).collect(),
        vec!["0".into(), "1".into()],
    )
}

/// Written next to a generated CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub generator: String,
    pub file: String,
    pub rows: usize,
    pub features: usize,
    pub seed: u64,
    pub spec: Option<SyntheticSpec>,
    pub separability: Option<SeparabilityCheck>,
}
