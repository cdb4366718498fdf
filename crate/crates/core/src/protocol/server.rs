//! Server party: holds the overlap labels and the classifiers that sit on top
//! of the clients' representations. It only ever sees representations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{derive_seed, streams, ProtocolConfig};
use crate::error::{Error, Result};
use crate::matrix::{argmax, Matrix};
use crate::nn::{self, mlp_init_with_rng, Activation, LayerSpec, ModelParams};

/// Scaled dot-product attention estimate of another client's representations
/// for unaligned rows: `softmax(h_u_a h_o_a^T / sqrt(d)) h_o_b`.
pub fn sdpa_estimate(h_u_a: &Matrix, h_o_a: &Matrix, h_o_b: &Matrix) -> Result<Matrix> {
    Ok(sdpa_weights(h_u_a, h_o_a)?.matmul(h_o_b))
}

/// Row-stochastic attention weights of queries over overlap keys.
pub fn sdpa_weights(queries: &Matrix, keys: &Matrix) -> Result<Matrix> {
    if queries.cols() != keys.cols() {
        return Err(Error::shape(format!(
            "query width {} differs from key width {}",
            queries.cols(),
            keys.cols()
        )));
    }
    if keys.rows() == 0 {
        return Err(Error::invalid("attention over an empty overlap"));
    }
    let mut scores = queries.matmul_t(keys);
    scores.scale(1.0 / (queries.cols() as f64).sqrt());
    Ok(nn::softmax_rows(&scores))
}

/// Probability of promoting an unaligned row: the joint probability if both
/// classifiers agree and both are confident above `t`, zero otherwise.
pub fn inclusion_probability(local: &[f64], joint: &[f64], t: f64) -> f64 {
    let (a, ab) = (argmax(local), argmax(joint));
    let (p_a, p_ab) = (local[a], joint[ab]);
    if a == ab && p_a > t && p_ab > t {
        p_ab
    } else {
        0.0
    }
}

#[derive(Debug, Clone)]
pub struct Server {
    labels: Vec<usize>,
    num_classes: usize,
    rep_dims: Vec<usize>,
    classifier: Option<ModelParams>,
    aux: Vec<ModelParams>,
    joint: Option<ModelParams>,
    overlap_reps: Vec<Option<Matrix>>,
    rng: ChaCha8Rng,
}

impl Server {
    /// `labels` are the overlap labels; the class count is the number of
    /// distinct values, which must be exactly `0..C`.
    pub fn new(labels: Vec<usize>, rep_dims: Vec<usize>, cfg: &ProtocolConfig) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("server has no overlap labels"));
        }
        if rep_dims.len() < 2 {
            return Err(Error::invalid("a federation needs at least two clients"));
        }
        let top = labels.iter().copied().max().unwrap_or(0) + 1;
        let mut present = vec![false; top];
        labels.iter().for_each(|&y| present[y] = true);
        let num_classes = present.iter().filter(|&&p| p).count();
        if num_classes != top {
            return Err(Error::Protocol(format!(
                "overlap labels use {num_classes} of the ids 0..{top}; re-index or enlarge the overlap"
            )));
        }
        if num_classes < 2 {
            return Err(Error::Protocol(
                "overlap labels contain a single class".into(),
            ));
        }
        let n = rep_dims.len();
        Ok(Self {
            labels,
            num_classes,
            rep_dims,
            classifier: None,
            aux: Vec::new(),
            joint: None,
            overlap_reps: vec![None; n],
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::SERVER)),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn overlap_size(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn rep_dims(&self) -> &[usize] {
        &self.rep_dims
    }

    pub fn classifier(&self) -> Option<&ModelParams> {
        self.classifier.as_ref()
    }

    pub fn set_classifier(&mut self, params: ModelParams) -> Result<()> {
        if params.in_dim() != self.rep_dims.iter().sum::<usize>()
            || params.out_dim() != self.num_classes
        {
            return Err(Error::shape(
                "classifier does not match representation widths and classes",
            ));
        }
        self.classifier = Some(params);
        Ok(())
    }

    pub fn aux_classifiers(&self) -> &[ModelParams] {
        &self.aux
    }

    pub fn joint_classifier(&self) -> Option<&ModelParams> {
        self.joint.as_ref()
    }

    pub fn overlap_reps(&self, client: usize) -> Option<&Matrix> {
        self.overlap_reps.get(client).and_then(Option::as_ref)
    }

    fn fresh_model(&mut self, in_dim: usize, hidden: usize) -> Result<ModelParams> {
        mlp_init_with_rng(
            &[
                LayerSpec::new(in_dim, hidden, Activation::Relu),
                LayerSpec::new(hidden, self.num_classes, Activation::Identity),
            ],
            &mut self.rng,
        )
    }

    fn check_reps(&self, client: usize, reps: &Matrix, rows: usize) -> Result<()> {
        let width = *self
            .rep_dims
            .get(client)
            .ok_or_else(|| Error::Protocol(format!("unknown client {client}")))?;
        if reps.shape() != (rows, width) {
            return Err(Error::Protocol(format!(
                "client {client} sent {:?} representations, expected ({rows}, {width})",
                reps.shape()
            )));
        }
        if !reps.is_finite() {
            return Err(Error::NonFinite("client representations"));
        }
        Ok(())
    }

    /// Stores the latest overlap representations of one client.
    pub fn receive_overlap(&mut self, client: usize, reps: Matrix) -> Result<()> {
        self.check_reps(client, &reps, self.labels.len())?;
        self.overlap_reps[client] = Some(reps);
        Ok(())
    }

    /// Concatenation of the cached overlap representations in client order.
    pub fn overlap_concat(&self) -> Result<Matrix> {
        let parts = self
            .overlap_reps
            .iter()
            .enumerate()
            .map(|(k, r)| {
                r.as_ref().ok_or_else(|| {
                    Error::Protocol(format!("no overlap representations from client {k}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Matrix::hconcat(&parts)
    }

    fn split_cols(&self, m: &Matrix) -> Vec<Matrix> {
        let mut start = 0;
        self.rep_dims
            .iter()
            .map(|&w| {
                let part = m.col_range(start, start + w);
                start += w;
                part
            })
            .collect()
    }

    /// Partial gradients of the mean cross-entropy of a freshly initialised
    /// classifier (optionally warmed up) with respect to each client's
    /// overlap representations, together with that classifier.
    pub fn partial_grads(&mut self, cfg: &ProtocolConfig) -> Result<(Vec<Matrix>, ModelParams)> {
        let h = self.overlap_concat()?;
        let mut model = self.fresh_model(h.cols(), cfg.server_hidden)?;
        if cfg.server_grad_warmup_epochs > 0 {
            model = nn::train_classifier(
                model,
                &h,
                &self.labels,
                cfg.server_grad_warmup_epochs,
                cfg.batch_size,
                cfg.server_lr,
                &mut self.rng,
            )?;
        }
        let trace = nn::forward(&model, &h)?;
        let (_, dlogits) = nn::softmax_cross_entropy(trace.output(), &self.labels)?;
        let (_, dh) = nn::backward(&model, &trace, &dlogits)?;
        Ok((self.split_cols(&dh), model))
    }

    /// Trains the final classifier on the cached overlap representations.
    pub fn train_classifier(&mut self, cfg: &ProtocolConfig) -> Result<&ModelParams> {
        let h = self.overlap_concat()?;
        let init = match (&self.joint, cfg.reuse_joint_classifier) {
            (Some(joint), true) => joint.clone(),
            _ => self.fresh_model(h.cols(), cfg.server_hidden)?,
        };
        let trained = nn::train_classifier(
            init,
            &h,
            &self.labels,
            cfg.server_epochs,
            cfg.batch_size,
            cfg.server_lr,
            &mut self.rng,
        )?;
        Ok(self.classifier.insert(trained))
    }

    /// One auxiliary classifier per client on its own overlap representations
    /// and one joint classifier on the concatenation.
    pub fn train_aux_classifiers(&mut self, cfg: &ProtocolConfig) -> Result<()> {
        let mut aux = Vec::with_capacity(self.rep_dims.len());
        for k in 0..self.rep_dims.len() {
            let h = self.overlap_reps(k).cloned().ok_or_else(|| {
                Error::Protocol(format!("no overlap representations from client {k}"))
            })?;
            let init = self.fresh_model(h.cols(), cfg.server_hidden)?;
            aux.push(nn::train_classifier(
                init,
                &h,
                &self.labels,
                cfg.server_epochs,
                cfg.batch_size,
                cfg.server_lr,
                &mut self.rng,
            )?);
        }
        let h = self.overlap_concat()?;
        let init = self.fresh_model(h.cols(), cfg.server_hidden)?;
        let joint = nn::train_classifier(
            init,
            &h,
            &self.labels,
            cfg.server_epochs,
            cfg.batch_size,
            cfg.server_lr,
            &mut self.rng,
        )?;
        self.aux = aux;
        self.joint = Some(joint);
        Ok(())
    }

    /// Inclusion probabilities for client `client`'s unaligned rows. The other
    /// client's representations are estimated by attention over the overlap.
    /// Defined for two clients.
    pub fn infer_prob(&self, client: usize, h_u: &Matrix, threshold: f64) -> Result<Vec<f64>> {
        if self.rep_dims.len() != 2 {
            return Err(Error::Protocol(format!(
                "inclusion probabilities are defined for two clients, not {}",
                self.rep_dims.len()
            )));
        }
        let joint = self
            .joint
            .as_ref()
            .ok_or_else(|| Error::Protocol("auxiliary classifiers are not trained".into()))?;
        let local = self.aux.get(client).ok_or_else(|| {
            Error::Protocol(format!("no auxiliary classifier for client {client}"))
        })?;
        self.check_reps(client, h_u, h_u.rows())?;
        if h_u.rows() == 0 {
            return Ok(Vec::new());
        }
        let other = 1 - client;
        let own_o = self.overlap_reps(client).ok_or_else(|| {
            Error::Protocol(format!("no overlap representations from client {client}"))
        })?;
        let other_o = self.overlap_reps(other).ok_or_else(|| {
            Error::Protocol(format!("no overlap representations from client {other}"))
        })?;
        let estimate = sdpa_estimate(h_u, own_o, other_o)?;
        let joint_in = if client == 0 {
            Matrix::hconcat(&[h_u, &estimate])?
        } else {
            Matrix::hconcat(&[&estimate, h_u])?
        };
        let p_local = nn::predict_proba(local, h_u)?;
        let p_joint = nn::predict_proba(joint, &joint_in)?;
        Ok(p_local
            .iter_rows()
            .zip(p_joint.iter_rows())
            .map(|(a, ab)| inclusion_probability(a, ab, threshold))
            .collect())
    }

    /// Class probabilities of the final classifier for per-client representations.
    pub fn predict_proba(&self, reps: &[Matrix]) -> Result<Matrix> {
        let model = self
            .classifier
            .as_ref()
            .ok_or_else(|| Error::Protocol("server classifier is not trained".into()))?;
        let rows = reps.first().map_or(0, Matrix::rows);
        for (k, r) in reps.iter().enumerate() {
            self.check_reps(k, r, rows)?;
        }
        if reps.len() != self.rep_dims.len() {
            return Err(Error::Protocol(format!(
                "{} representation blocks for {} clients",
                reps.len(),
                self.rep_dims.len()
            )));
        }
        let parts: Vec<&Matrix> = reps.iter().collect();
        nn::predict_proba(model, &Matrix::hconcat(&parts)?)
    }

    /// Starts vanilla training from a fresh classifier.
    pub fn init_classifier(&mut self, cfg: &ProtocolConfig) -> Result<()> {
        let width = self.rep_dims.iter().sum();
        self.classifier = Some(self.fresh_model(width, cfg.server_hidden)?);
        Ok(())
    }

    /// One vanilla round on overlap rows `rows`: computes the loss at the
    /// current classifier, returns the per-client partial gradients and then
    /// updates the classifier.
    pub fn vanilla_step(
        &mut self,
        rows: &[usize],
        reps: &[Matrix],
        lr: f64,
    ) -> Result<(f64, Vec<Matrix>)> {
        if reps.len() != self.rep_dims.len() {
            return Err(Error::Protocol(format!(
                "{} representation blocks for {} clients",
                reps.len(),
                self.rep_dims.len()
            )));
        }
        for (k, r) in reps.iter().enumerate() {
            self.check_reps(k, r, rows.len())?;
        }
        let model = self
            .classifier
            .as_ref()
            .ok_or_else(|| Error::Protocol("server classifier is not initialised".into()))?;
        let labels: Vec<usize> = rows
            .iter()
            .map(|&i| {
                self.labels
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::Protocol(format!("overlap row {i} out of range")))
            })
            .collect::<Result<_>>()?;
        let parts: Vec<&Matrix> = reps.iter().collect();
        let h = Matrix::hconcat(&parts)?;
        let trace = nn::forward(model, &h)?;
        let (loss, dlogits) = nn::softmax_cross_entropy(trace.output(), &labels)?;
        let (g, dh) = nn::backward(model, &trace, &dlogits)?;
        let updated = nn::sgd_step(model, &g, lr)?;
        self.classifier = Some(updated);
        Ok((loss, self.split_cols(&dh)))
    }
}
