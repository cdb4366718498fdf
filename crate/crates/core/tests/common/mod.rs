//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vfl_core::data::{vertical_partition, SplitSpec, VflSplit};
use vfl_core::experiment::{prepare_data, PreparedData};
use vfl_core::matrix::Matrix;
use vfl_core::nn::{self, Activation, DenseLayer, LayerSpec, ModelParams};
use vfl_core::synthetic::{gen_synthetic, SyntheticSpec, SyntheticTask};

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Random network with random depth, widths and hidden activations, plus
/// non-zero biases so every parameter matters.
pub fn random_network<R: Rng>(rng: &mut R) -> ModelParams {
    let depth = rng.random_range(1..=3);
    let mut dims = vec![rng.random_range(1..=5)];
    for _ in 0..depth {
        dims.push(rng.random_range(1..=5));
    }
    let classes = rng.random_range(2..=4);
    *dims.last_mut().unwrap() = classes;
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let activation = if i + 1 == depth || rng.random_bool(0.3) {
                Activation::Identity
            } else {
                Activation::Relu
            };
            DenseLayer {
                weight: random_matrix(rng, w[0], w[1], 1.0),
                bias: (0..w[1]).map(|_| rng.random_range(-0.5..0.5)).collect(),
                activation,
            }
        })
        .collect();
    ModelParams { layers }
}

fn ce_loss(params: &ModelParams, x: &Matrix, labels: &[usize]) -> f64 {
    nn::softmax_cross_entropy(&nn::predict(params, x).unwrap(), labels)
        .unwrap()
        .0
}

/// Worst relative disagreement between a gradient and its central finite
/// difference. Entries where both are below `floor` in magnitude count as agreeing.
fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < floor {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

pub struct FdReport {
    pub param_err: f64,
    pub input_err: f64,
    pub kinks: usize,
}

/// Compares backprop against central differences of the cross-entropy loss
/// for every parameter and every input entry.
pub fn finite_difference_check(params: &ModelParams, x: &Matrix, labels: &[usize]) -> FdReport {
    let h = 1e-6;
    let trace = nn::forward(params, x).unwrap();
    let kinks = trace
        .pre_activations
        .iter()
        .zip(&params.layers)
        .filter(|(_, l)| l.activation == Activation::Relu)
        .map(|(z, _)| z.as_slice().iter().filter(|v| v.abs() < 1e-4).count())
        .sum();
    let (_, dlogits) = nn::softmax_cross_entropy(trace.output(), labels).unwrap();
    let (grads, dx) = nn::backward(params, &trace, &dlogits).unwrap();

    let flat = params.flatten();
    let analytic = grads.flatten();
    let mut param_err: f64 = 0.0;
    for i in 0..flat.len() {
        let mut plus = params.clone();
        let mut v = flat.clone();
        v[i] += h;
        plus.set_flat(&v).unwrap();
        let mut minus = params.clone();
        v[i] -= 2.0 * h;
        minus.set_flat(&v).unwrap();
        let numeric = (ce_loss(&plus, x, labels) - ce_loss(&minus, x, labels)) / (2.0 * h);
        param_err = param_err.max(rel_err(analytic[i], numeric, 1e-7));
    }
    let mut input_err: f64 = 0.0;
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let mut xp = x.clone();
            xp[(i, j)] += h;
            let mut xm = x.clone();
            xm[(i, j)] -= h;
            let numeric = (ce_loss(params, &xp, labels) - ce_loss(params, &xm, labels)) / (2.0 * h);
            input_err = input_err.max(rel_err(dx[(i, j)], numeric, 1e-7));
        }
    }
    FdReport {
        param_err,
        input_err,
        kinks,
    }
}

/// Minimum within-cluster sum of squares over every split into two non-empty groups.
pub fn exhaustive_two_means(points: &Matrix) -> f64 {
    let n = points.rows();
    let sse = |members: &[usize]| -> f64 {
        let sub = points.select_rows(members);
        let mean = sub.col_means();
        sub.iter_rows()
            .map(|r| {
                r.iter()
                    .zip(&mean)
                    .map(|(a, m)| (a - m) * (a - m))
                    .sum::<f64>()
            })
            .sum()
    };
    let mut best = f64::INFINITY;
    // fix point 0 in group A to skip mirrored splits
    for mask in 0u32..(1 << (n - 1)) {
        let mut a = vec![0];
        let mut b = Vec::new();
        for i in 1..n {
            if mask & (1 << (i - 1)) != 0 {
                a.push(i);
            } else {
                b.push(i);
            }
        }
        if b.is_empty() {
            continue;
        }
        best = best.min(sse(&a) + sse(&b));
    }
    best
}

/// AUC by comparing every positive with every negative.
pub fn auc_by_pairs(scores: &[f64], labels: &[usize]) -> f64 {
    let mut doubled: u128 = 0;
    let mut pairs: u128 = 0;
    for (i, &yi) in labels.iter().enumerate() {
        if yi != 1 {
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj != 0 {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                doubled += 2;
            } else if scores[i] == scores[j] {
                doubled += 1;
            }
        }
    }
    doubled as f64 / (2 * pairs) as f64
}

/// One network equivalent to running each client's extractor on its own
/// columns and feeding the concatenation to the classifier: extractor layers
/// are placed block-diagonally, in client order.
pub fn monolithic(extractors: &[&ModelParams], classifier: &ModelParams) -> ModelParams {
    let depth = extractors[0].depth();
    assert!(extractors.iter().all(|e| e.depth() == depth));
    let mut layers = Vec::new();
    for l in 0..depth {
        let parts: Vec<&DenseLayer> = extractors.iter().map(|e| &e.layers[l]).collect();
        let rows: usize = parts.iter().map(|p| p.weight.rows()).sum();
        let cols: usize = parts.iter().map(|p| p.weight.cols()).sum();
        let mut weight = Matrix::zeros(rows, cols);
        let (mut r0, mut c0) = (0, 0);
        let mut bias = Vec::with_capacity(cols);
        for p in &parts {
            assert_eq!(p.activation, parts[0].activation);
            for i in 0..p.weight.rows() {
                for j in 0..p.weight.cols() {
                    weight[(r0 + i, c0 + j)] = p.weight[(i, j)];
                }
            }
            bias.extend(&p.bias);
            r0 += p.weight.rows();
            c0 += p.weight.cols();
        }
        layers.push(DenseLayer {
            weight,
            bias,
            activation: parts[0].activation,
        });
    }
    layers.extend(classifier.layers.iter().cloned());
    ModelParams { layers }
}

/// Diagonal block `k` of a monolithic layer, as a standalone layer.
pub fn diagonal_block(
    layer: &DenseLayer,
    row_range: (usize, usize),
    col_range: (usize, usize),
) -> DenseLayer {
    let rows: Vec<usize> = (row_range.0..row_range.1).collect();
    let cols: Vec<usize> = (col_range.0..col_range.1).collect();
    DenseLayer {
        weight: layer.weight.select_rows(&rows).select_cols(&cols),
        bias: layer.bias[col_range.0..col_range.1].to_vec(),
        activation: layer.activation,
    }
}

pub fn xor_data(n: usize, d: usize, noise: f64, seed: u64) -> vfl_core::data::Dataset {
    gen_synthetic(&SyntheticSpec {
        n,
        d_per_client: d,
        classes: 2,
        task: SyntheticTask::XorCross,
        noise,
        seed,
    })
    .unwrap()
}

/// Small two-client split for protocol mechanics.
pub fn small_prepared(n: usize, overlap: usize, seed: u64) -> PreparedData {
    let data = xor_data(n, 3, 0.3, seed);
    prepare_data(
        &data,
        vec![vec![0, 1, 2], vec![3, 4, 5]],
        overlap,
        0.2,
        seed,
    )
    .unwrap()
}

pub fn raw_split(n: usize, overlap: usize, seed: u64) -> VflSplit {
    let data = xor_data(n, 3, 0.3, seed);
    vertical_partition(&data, &SplitSpec::two_way(6, 3, overlap, seed)).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn layer_specs(params: &ModelParams) -> Vec<LayerSpec> {
    params.specs()
}
