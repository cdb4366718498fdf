//! Client party: owns a vertical slice of the features and a representation
//! extractor. It never sees server labels, other clients' features or other
//! clients' parameters; everything it learns arrives as partial gradients or
//! inclusion probabilities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{derive_seed, streams, ProtocolConfig};
use crate::cluster::{gradients_to_templabels, TempLabels};
use crate::data::ClientShard;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{self, mlp_init_with_rng, Activation, ForwardTrace, LayerSpec, ModelParams};
use crate::ssl::{local_ssl_train, AugmentConfig, SslSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RepSet {
    Overlap,
    Unaligned,
}

/// Unaligned rows promoted to the labelled set, with local pseudo labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandedSet {
    pub rows: Vec<usize>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionSummary {
    pub expected_size: f64,
    pub included: usize,
    pub ssl: SslSummary,
}

#[derive(Debug, Clone)]
pub struct Client {
    id: usize,
    extractor: ModelParams,
    head: Option<ModelParams>,
    overlap: Matrix,
    unaligned: Matrix,
    aug: AugmentConfig,
    temp_labels: Option<TempLabels>,
    expanded: Option<ExpandedSet>,
    rng: ChaCha8Rng,
}

impl Client {
    /// `shard` should already be standardized on this client's own rows.
    pub fn new(id: usize, shard: &ClientShard, cfg: &ProtocolConfig) -> Result<Self> {
        let d = shard.overlap.cols();
        if d == 0 || shard.overlap.rows() == 0 {
            return Err(Error::invalid(format!("client {id} has no overlap data")));
        }
        if shard.unaligned.rows() > 0 && shard.unaligned.cols() != d {
            return Err(Error::shape(format!(
                "client {id} overlap and unaligned widths differ"
            )));
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::CLIENT_BASE + id as u64));
        let extractor = mlp_init_with_rng(
            &[
                LayerSpec::new(d, cfg.client_hidden, Activation::Relu),
                LayerSpec::new(cfg.client_hidden, cfg.rep_dim, Activation::Identity),
            ],
            &mut rng,
        )?;
        let local = if shard.unaligned.rows() > 0 {
            Matrix::vconcat(&[&shard.overlap, &shard.unaligned])?
        } else {
            shard.overlap.clone()
        };
        let aug = AugmentConfig::new(cfg.r_m, cfg.sigma, local.col_means(), cfg.mask_semantics)?;
        Ok(Self {
            id,
            extractor,
            head: None,
            overlap: shard.overlap.clone(),
            unaligned: shard.unaligned.clone(),
            aug,
            temp_labels: None,
            expanded: None,
            rng,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn extractor(&self) -> &ModelParams {
        &self.extractor
    }

    pub fn set_extractor(&mut self, params: ModelParams) -> Result<()> {
        if params.in_dim() != self.extractor.in_dim()
            || params.out_dim() != self.extractor.out_dim()
        {
            return Err(Error::shape(
                "replacement extractor has different input/output widths",
            ));
        }
        self.extractor = params;
        Ok(())
    }

    pub fn head(&self) -> Option<&ModelParams> {
        self.head.as_ref()
    }

    pub fn rep_dim(&self) -> usize {
        self.extractor.out_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.overlap.cols()
    }

    pub fn overlap_features(&self) -> &Matrix {
        &self.overlap
    }

    pub fn unaligned_features(&self) -> &Matrix {
        &self.unaligned
    }

    pub fn temp_labels(&self) -> Option<&TempLabels> {
        self.temp_labels.as_ref()
    }

    pub fn expanded(&self) -> Option<&ExpandedSet> {
        self.expanded.as_ref()
    }

    pub fn augment_config(&self) -> &AugmentConfig {
        &self.aug
    }

    pub fn features(&self, which: RepSet) -> &Matrix {
        match which {
            RepSet::Overlap => &self.overlap,
            RepSet::Unaligned => &self.unaligned,
        }
    }

    /// Representations of one local set. Pure in the extractor parameters.
    pub fn extract(&self, which: RepSet) -> Result<Matrix> {
        self.represent(self.features(which))
    }

    /// Representations of arbitrary rows in this client's feature space.
    pub fn represent(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() == 0 {
            return Ok(Matrix::zeros(0, self.rep_dim()));
        }
        nn::predict(&self.extractor, x)
    }

    /// Clusters the received partial gradients into `classes` groups, stores
    /// the temporary labels and sets up a fresh local head of width `classes`.
    pub fn receive_gradients(
        &mut self,
        grads: &Matrix,
        classes: usize,
        cfg: &ProtocolConfig,
    ) -> Result<&TempLabels> {
        if grads.rows() != self.overlap.rows() {
            return Err(Error::Protocol(format!(
                "client {} got {} gradient rows for {} overlap samples",
                self.id,
                grads.rows(),
                self.overlap.rows()
            )));
        }
        if grads.cols() != self.rep_dim() {
            return Err(Error::Protocol(format!(
                "client {} got gradients of width {}, representation width is {}",
                self.id,
                grads.cols(),
                self.rep_dim()
            )));
        }
        let seed = self.rng.random();
        let labels = gradients_to_templabels(
            grads,
            classes,
            cfg.normalize_gradients,
            cfg.kmeans_restarts,
            seed,
        )?;
        self.head = Some(mlp_init_with_rng(
            &[LayerSpec::new(
                self.rep_dim(),
                classes,
                Activation::Identity,
            )],
            &mut self.rng,
        )?);
        self.expanded = None;
        Ok(self.temp_labels.insert(labels))
    }

    fn local_model(&self) -> Result<ModelParams> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::Protocol(format!("client {} has no local head yet", self.id)))?;
        self.extractor.stack(head)
    }

    /// Labelled rows, their labels, and the remaining unlabelled rows.
    fn ssl_sets(&self) -> Result<(Matrix, Vec<usize>, Matrix)> {
        let temp = self.temp_labels.as_ref().ok_or_else(|| {
            Error::Protocol(format!("client {} has no temporary labels", self.id))
        })?;
        match &self.expanded {
            None => Ok((
                self.overlap.clone(),
                temp.labels.clone(),
                self.unaligned.clone(),
            )),
            Some(exp) => {
                let mut included = vec![false; self.unaligned.rows()];
                for &r in &exp.rows {
                    included[r] = true;
                }
                let rest: Vec<usize> = (0..self.unaligned.rows())
                    .filter(|&i| !included[i])
                    .collect();
                let labeled =
                    Matrix::vconcat(&[&self.overlap, &self.unaligned.select_rows(&exp.rows)])?;
                let mut labels = temp.labels.clone();
                labels.extend(&exp.labels);
                Ok((labeled, labels, self.unaligned.select_rows(&rest)))
            }
        }
    }

    /// Local semi-supervised training of extractor and head.
    pub fn local_ssl(&mut self, cfg: &ProtocolConfig) -> Result<SslSummary> {
        let model = self.local_model()?;
        let (labeled, labels, unlabeled) = self.ssl_sets()?;
        let (trained, summary) = local_ssl_train(
            model,
            &labeled,
            &labels,
            &unlabeled,
            &cfg.ssl(),
            &self.aug,
            &mut self.rng,
        )?;
        let (extractor, head) = trained.split_at(self.extractor.depth());
        self.extractor = extractor;
        self.head = Some(head);
        Ok(summary)
    }

    /// Includes each unaligned row with its inclusion probability, labels the
    /// included rows with the local model's prediction and reruns local SSL.
    pub fn expand_and_ssl(
        &mut self,
        probs: &[f64],
        cfg: &ProtocolConfig,
    ) -> Result<ExpansionSummary> {
        if probs.len() != self.unaligned.rows() {
            return Err(Error::Protocol(format!(
                "client {} got {} inclusion probabilities for {} unaligned rows",
                self.id,
                probs.len(),
                self.unaligned.rows()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Protocol(format!(
                "inclusion probability {p} outside [0, 1]"
            )));
        }
        let rows: Vec<usize> = probs
            .iter()
            .enumerate()
            .filter(|&(_, &p)| self.rng.random::<f64>() < p)
            .map(|(i, _)| i)
            .collect();
        let labels = if rows.is_empty() {
            Vec::new()
        } else {
            nn::predict(&self.local_model()?, &self.unaligned.select_rows(&rows))?.argmax_rows()
        };
        let included = rows.len();
        self.expanded = Some(ExpandedSet { rows, labels });
        let ssl = self.local_ssl(cfg)?;
        Ok(ExpansionSummary {
            expected_size: probs.iter().sum(),
            included,
            ssl,
        })
    }

    /// Forward pass over selected overlap rows, keeping the trace for a later update.
    pub fn forward_overlap(&self, rows: &[usize]) -> Result<ForwardTrace> {
        nn::forward(&self.extractor, &self.overlap.select_rows(rows))
    }

    /// Applies `steps` SGD updates driven by one received gradient. The first
    /// update uses `trace`; later ones recompute the forward pass with the
    /// current parameters and reuse the stale gradient.
    pub fn apply_partial_grads(
        &mut self,
        rows: &[usize],
        trace: &ForwardTrace,
        grads: &Matrix,
        lr: f64,
        steps: usize,
    ) -> Result<()> {
        for step in 0..steps {
            let fresh;
            let t = if step == 0 {
                trace
            } else {
                fresh = self.forward_overlap(rows)?;
                &fresh
            };
            let (g, _) = nn::backward(&self.extractor, t, grads)?;
            self.extractor = nn::sgd_step(&self.extractor, &g, lr)?;
        }
        Ok(())
    }
}
