//! FixMatch adapted to tabular features.
//!
//! The weak view replaces a random subset of features with the local feature
//! mean; the strong view adds Gaussian noise on top of a weak view. Labelled
//! rows train on their weak view. Unlabelled rows take a pseudo label from the
//! weak view and are trained on the strong view when the weak-view confidence
//! reaches `tau`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{self, ModelParams};

/// How the mask parameter `r_m` is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSemantics {
    /// `r_m` is the expected fraction of features replaced by the mean.
    MaskedFraction,
    /// `r_m` is the probability that a feature is kept.
    KeepFraction,
}

impl std::str::FromStr for MaskSemantics {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked_fraction" => Ok(Self::MaskedFraction),
            "keep_fraction" => Ok(Self::KeepFraction),
            other => Err(Error::invalid(format!("unknown mask semantics `{other}`"))),
        }
    }
}

impl std::fmt::Display for MaskSemantics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::MaskedFraction => "masked_fraction",
            Self::KeepFraction => "keep_fraction",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub r_m: f64,
    pub sigma: f64,
    pub feature_means: Vec<f64>,
    pub semantics: MaskSemantics,
}

impl AugmentConfig {
    pub fn new(
        r_m: f64,
        sigma: f64,
        feature_means: Vec<f64>,
        semantics: MaskSemantics,
    ) -> Result<Self> {
        let cfg = Self {
            r_m,
            sigma,
            feature_means,
            semantics,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r_m > 0.0 && self.r_m <= 1.0) {
            return Err(Error::invalid(format!("r_m = {} outside (0, 1]", self.r_m)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "sigma = {} must be >= 0",
                self.sigma
            )));
        }
        Ok(())
    }

    pub fn keep_probability(&self) -> f64 {
        match self.semantics {
            MaskSemantics::MaskedFraction => 1.0 - self.r_m,
            MaskSemantics::KeepFraction => self.r_m,
        }
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.feature_means.len() {
            return Err(Error::shape(format!(
                "sample has {} features, augmentation expects {}",
                x.len(),
                self.feature_means.len()
            )));
        }
        Ok(())
    }
}

/// `true` keeps the feature.
pub fn sample_mask<R: Rng + ?Sized>(len: usize, keep_probability: f64, rng: &mut R) -> Vec<bool> {
    (0..len)
        .map(|_| rng.random::<f64>() < keep_probability)
        .collect()
}

fn apply_mask(x: &[f64], mask: &[bool], means: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(mask)
        .zip(means)
        .map(|((&v, &keep), &m)| if keep { v } else { m })
        .collect()
}

fn add_noise<R: Rng + ?Sized>(x: &mut [f64], sigma: f64, rng: &mut R) {
    if sigma > 0.0 {
        for v in x.iter_mut() {
            *v += sigma * Distribution::<f64>::sample(&StandardNormal, rng);
        }
    }
}

/// `m ⊙ x + (1 - m) ⊙ mean` with a fresh mask.
pub fn weak_augment<R: Rng + ?Sized>(
    x: &[f64],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    cfg.check_len(x)?;
    let mask = sample_mask(x.len(), cfg.keep_probability(), rng);
    Ok(apply_mask(x, &mask, &cfg.feature_means))
}

/// Weak view plus `N(0, sigma²)` noise, with its own mask.
pub fn strong_augment<R: Rng + ?Sized>(
    x: &[f64],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut out = weak_augment(x, cfg, rng)?;
    add_noise(&mut out, cfg.sigma, rng);
    Ok(out)
}

/// A weak and a strong view of the same sample. With `share_mask` both views
/// use one mask, so they differ only by the noise.
pub fn paired_views<R: Rng + ?Sized>(
    x: &[f64],
    cfg: &AugmentConfig,
    share_mask: bool,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    cfg.check_len(x)?;
    let keep = cfg.keep_probability();
    let mask = sample_mask(x.len(), keep, rng);
    let weak = apply_mask(x, &mask, &cfg.feature_means);
    let mut strong = if share_mask {
        weak.clone()
    } else {
        apply_mask(x, &sample_mask(x.len(), keep, rng), &cfg.feature_means)
    };
    add_noise(&mut strong, cfg.sigma, rng);
    Ok((weak, strong))
}

fn weak_batch<R: Rng + ?Sized>(x: &Matrix, cfg: &AugmentConfig, rng: &mut R) -> Result<Matrix> {
    let rows = x
        .iter_rows()
        .map(|r| weak_augment(r, cfg, rng))
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_vec(x.rows(), x.cols(), rows.concat())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SslConfig {
    pub lambda_u: f64,
    /// Confidence a weak-view prediction needs before it becomes a pseudo label.
    pub tau: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub share_mask: bool,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            lambda_u: 1.0,
            tau: 0.95,
            epochs: 20,
            batch_size: 32,
            lr: 0.01,
            share_mask: true,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_u >= 0.0 && self.lambda_u.is_finite()) {
            return Err(Error::invalid("lambda_u must be >= 0"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::invalid("tau must be in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Augmented inputs for one SSL step.
#[derive(Debug, Clone)]
pub struct SslViews {
    pub labeled_weak: Matrix,
    pub labels: Vec<usize>,
    pub unlabeled_weak: Matrix,
    pub unlabeled_strong: Matrix,
}

/// Draws views in a fixed order: labelled weak views first, then one
/// (weak, strong) pair per unlabelled row.
pub fn draw_views<R: Rng + ?Sized>(
    labeled: &Matrix,
    labels: &[usize],
    unlabeled: &Matrix,
    ssl: &SslConfig,
    aug: &AugmentConfig,
    rng: &mut R,
) -> Result<SslViews> {
    let labeled_weak = weak_batch(labeled, aug, rng)?;
    let mut weak = Vec::with_capacity(unlabeled.len());
    let mut strong = Vec::with_capacity(unlabeled.len());
    for row in unlabeled.iter_rows() {
        let (w, s) = paired_views(row, aug, ssl.share_mask, rng)?;
        weak.extend(w);
        strong.extend(s);
    }
    Ok(SslViews {
        labeled_weak,
        labels: labels.to_vec(),
        unlabeled_weak: Matrix::from_vec(unlabeled.rows(), unlabeled.cols(), weak)?,
        unlabeled_strong: Matrix::from_vec(unlabeled.rows(), unlabeled.cols(), strong)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SslLoss {
    pub total: f64,
    pub supervised: f64,
    pub unsupervised: f64,
    /// Unlabelled rows whose weak-view confidence reached `tau`.
    pub gated: usize,
    pub unlabeled: usize,
}

/// Loss and gradient of `l_s + lambda_u * l_u` on pre-drawn views.
pub fn ssl_loss_and_grad(
    params: &ModelParams,
    views: &SslViews,
    ssl: &SslConfig,
) -> Result<(SslLoss, ModelParams)> {
    if views.labeled_weak.rows() == 0 {
        return Err(Error::invalid("labelled batch is empty"));
    }
    let trace = nn::forward(params, &views.labeled_weak)?;
    let (supervised, dlogits) = nn::softmax_cross_entropy(trace.output(), &views.labels)?;
    let (mut grads, _) = nn::backward(params, &trace, &dlogits)?;

    let mut unsupervised = 0.0;
    let mut gated_rows = Vec::new();
    let mut pseudo = Vec::new();
    if views.unlabeled_weak.rows() > 0 {
        // pseudo labels are targets only; no gradient flows through the weak view
        let probs = nn::predict_proba(params, &views.unlabeled_weak)?;
        for (i, row) in probs.iter_rows().enumerate() {
            let label = crate::matrix::argmax(row);
            if row[label] >= ssl.tau {
                gated_rows.push(i);
                pseudo.push(label);
            }
        }
    }
    if !gated_rows.is_empty() {
        let strong = views.unlabeled_strong.select_rows(&gated_rows);
        let trace = nn::forward(params, &strong)?;
        let (loss, dlogits) = nn::softmax_cross_entropy(trace.output(), &pseudo)?;
        let (g, _) = nn::backward(params, &trace, &dlogits)?;
        grads.add_scaled(&g, ssl.lambda_u)?;
        unsupervised = loss;
    }
    let loss = SslLoss {
        total: supervised + ssl.lambda_u * unsupervised,
        supervised,
        unsupervised,
        gated: gated_rows.len(),
        unlabeled: views.unlabeled_weak.rows(),
    };
    Ok((loss, grads))
}

/// One SGD step on a labelled batch (with temporary labels) and an
/// unlabelled batch.
pub fn ssl_step<R: Rng + ?Sized>(
    params: &ModelParams,
    labeled: &Matrix,
    labels: &[usize],
    unlabeled: &Matrix,
    ssl: &SslConfig,
    aug: &AugmentConfig,
    rng: &mut R,
) -> Result<(ModelParams, SslLoss)> {
    if labeled.rows() == 0 {
        return Err(Error::invalid("labelled batch is empty"));
    }
    if labeled.rows() != labels.len() {
        return Err(Error::shape("labelled rows and labels differ in length"));
    }
    if unlabeled.rows() > 0 && unlabeled.cols() != labeled.cols() {
        return Err(Error::shape(
            "labelled and unlabelled batches differ in width",
        ));
    }
    let views = draw_views(labeled, labels, unlabeled, ssl, aug, rng)?;
    let (loss, grads) = ssl_loss_and_grad(params, &views, ssl)?;
    Ok((nn::sgd_step(params, &grads, ssl.lr)?, loss))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SslSummary {
    pub steps: usize,
    pub mean_total_loss: f64,
    pub mean_supervised_loss: f64,
    pub mean_unsupervised_loss: f64,
    /// Fraction of unlabelled rows that passed the confidence gate.
    pub gate_rate: f64,
}

/// `epochs` passes of SSL. An epoch walks the longer of the two sets once in
/// shuffled batches and cycles through the shorter one.
pub fn local_ssl_train<R: Rng + ?Sized>(
    mut params: ModelParams,
    labeled: &Matrix,
    labels: &[usize],
    unlabeled: &Matrix,
    ssl: &SslConfig,
    aug: &AugmentConfig,
    rng: &mut R,
) -> Result<(ModelParams, SslSummary)> {
    ssl.validate()?;
    aug.validate()?;
    if labeled.rows() == 0 {
        return Err(Error::invalid("no labelled rows"));
    }
    if labeled.rows() != labels.len() {
        return Err(Error::shape("labelled rows and labels differ in length"));
    }
    let b = ssl.batch_size;
    let nl = labeled.rows();
    let nu = unlabeled.rows();
    let steps_per_epoch = nl.div_ceil(b).max(nu.div_ceil(b));
    let mut l_order: Vec<usize> = (0..nl).collect();
    let mut u_order: Vec<usize> = (0..nu).collect();
    let (mut l_pos, mut u_pos) = (nl, nu);
    let mut summary = SslSummary::default();
    let (mut gated, mut seen) = (0usize, 0usize);
    for _ in 0..ssl.epochs {
        for _ in 0..steps_per_epoch {
            let l_idx = next_batch(&mut l_order, &mut l_pos, b, rng);
            let u_idx = next_batch(&mut u_order, &mut u_pos, b, rng);
            let xb = labeled.select_rows(&l_idx);
            let yb: Vec<usize> = l_idx.iter().map(|&i| labels[i]).collect();
            let ub = unlabeled.select_rows(&u_idx);
            let (next, loss) = ssl_step(&params, &xb, &yb, &ub, ssl, aug, rng)?;
            params = next;
            summary.steps += 1;
            summary.mean_total_loss += loss.total;
            summary.mean_supervised_loss += loss.supervised;
            summary.mean_unsupervised_loss += loss.unsupervised;
            gated += loss.gated;
            seen += loss.unlabeled;
        }
    }
    if summary.steps > 0 {
        let s = summary.steps as f64;
        summary.mean_total_loss /= s;
        summary.mean_supervised_loss /= s;
        summary.mean_unsupervised_loss /= s;
    }
    summary.gate_rate = if seen > 0 {
        gated as f64 / seen as f64
    } else {
        0.0
    };
    Ok((params, summary))
}

/// Next batch of at most `b` indices, reshuffling when the order is used up.
fn next_batch<R: Rng + ?Sized>(
    order: &mut [usize],
    pos: &mut usize,
    b: usize,
    rng: &mut R,
) -> Vec<usize> {
    if order.is_empty() {
        return Vec::new();
    }
    if *pos >= order.len() {
        order.shuffle(rng);
        *pos = 0;
    }
    let end = (*pos + b).min(order.len());
    let batch = order[*pos..end].to_vec();
    *pos = end;
    batch
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::{mlp_init, Activation, LayerSpec};

    fn aug(r_m: f64, sigma: f64, semantics: MaskSemantics) -> AugmentConfig {
        AugmentConfig::new(r_m, sigma, vec![10.0, 20.0, 30.0, 40.0], semantics).unwrap()
    }

    const X: [f64; 4] = [1.0, 2.0, 3.0, 4.0];

    #[test]
    fn keep_all_mask_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = aug(1.0, 0.0, MaskSemantics::KeepFraction);
        assert_eq!(weak_augment(&X, &cfg, &mut rng).unwrap(), X.to_vec());
        assert_eq!(strong_augment(&X, &cfg, &mut rng).unwrap(), X.to_vec());
    }

    #[test]
    fn mask_all_gives_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = aug(1.0, 0.0, MaskSemantics::MaskedFraction);
        assert_eq!(weak_augment(&X, &cfg, &mut rng).unwrap(), cfg.feature_means);
    }

    #[test]
    fn zero_noise_shared_mask_views_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = aug(0.5, 0.0, MaskSemantics::MaskedFraction);
        for _ in 0..20 {
            let (w, s) = paired_views(&X, &cfg, true, &mut rng).unwrap();
            assert_eq!(w, s);
        }
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = aug(0.2, 0.1, MaskSemantics::MaskedFraction);
        assert!(weak_augment(&[1.0], &cfg, &mut rng).is_err());
        assert!(strong_augment(&[1.0], &cfg, &mut rng).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::new(0.0, 0.1, vec![], MaskSemantics::MaskedFraction).is_err());
        assert!(AugmentConfig::new(0.2, -1.0, vec![], MaskSemantics::MaskedFraction).is_err());
        assert_eq!(
            aug(0.2, 0.1, MaskSemantics::MaskedFraction).keep_probability(),
            0.8
        );
        assert_eq!(
            aug(0.2, 0.1, MaskSemantics::KeepFraction).keep_probability(),
            0.2
        );
    }

    fn model() -> ModelParams {
        mlp_init(
            &[
                LayerSpec::new(4, 6, Activation::Relu),
                LayerSpec::new(6, 3, Activation::Identity),
            ],
            11,
        )
        .unwrap()
    }

    fn batch(seed: u64, rows: usize) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(
            rows,
            4,
            (0..rows * 4).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_lambda_is_a_supervised_step() {
        let p = model();
        let (xl, xu) = (batch(1, 5), batch(2, 7));
        let labels = vec![0, 1, 2, 1, 0];
        let ssl = SslConfig {
            lambda_u: 0.0,
            tau: 0.1,
            ..SslConfig::default()
        };
        let a = aug(0.2, 0.1, MaskSemantics::MaskedFraction);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (got, _) = ssl_step(&p, &xl, &labels, &xu, &ssl, &a, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let weak = weak_batch(&xl, &a, &mut rng).unwrap();
        let (want, _) = nn::supervised_step(&p, &weak, &labels, ssl.lr).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn closed_gate_drops_unlabeled_term() {
        let p = model();
        let ssl = SslConfig {
            tau: 1.0,
            ..SslConfig::default()
        };
        let a = aug(0.2, 0.1, MaskSemantics::MaskedFraction);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (_, loss) = ssl_step(
            &p,
            &batch(1, 4),
            &[0, 1, 2, 0],
            &batch(2, 8),
            &ssl,
            &a,
            &mut rng,
        )
        .unwrap();
        assert_eq!((loss.gated, loss.unsupervised), (0, 0.0));
        assert_eq!(loss.total, loss.supervised);
    }

    #[test]
    fn empty_labeled_batch_is_an_error() {
        let p = model();
        let a = aug(0.2, 0.1, MaskSemantics::MaskedFraction);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = ssl_step(
            &p,
            &Matrix::zeros(0, 4),
            &[],
            &batch(1, 3),
            &SslConfig::default(),
            &a,
            &mut rng,
        );
        assert!(r.is_err());
    }

    #[test]
    fn zero_epochs_leave_params_unchanged() {
        let p = model();
        let ssl = SslConfig {
            epochs: 0,
            ..SslConfig::default()
        };
        let a = aug(0.2, 0.1, MaskSemantics::MaskedFraction);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, summary) = local_ssl_train(
            p.clone(),
            &batch(1, 4),
            &[0, 1, 2, 0],
            &batch(2, 9),
            &ssl,
            &a,
            &mut rng,
        )
        .unwrap();
        assert_eq!(out, p);
        assert_eq!(summary.steps, 0);
    }

    #[test]
    fn epoch_covers_the_longer_set() {
        let p = model();
        let ssl = SslConfig {
            epochs: 2,
            batch_size: 4,
            ..SslConfig::default()
        };
        let a = aug(0.2, 0.1, MaskSemantics::MaskedFraction);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, summary) = local_ssl_train(
            p,
            &batch(1, 4),
            &[0, 1, 2, 0],
            &batch(2, 10),
            &ssl,
            &a,
            &mut rng,
        )
        .unwrap();
        assert_eq!(summary.steps, 2 * 3);
    }
}
