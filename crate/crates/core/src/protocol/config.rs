use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssl::{MaskSemantics, SslConfig};

/// Knobs shared by every protocol variant. Defaults: B = 32, learning rates
/// 0.01, Q = 5 for FedBCD, sigma = 0.1, r_m = 0.2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub seed: u64,
    /// Hidden width of each client's extractor.
    pub client_hidden: usize,
    /// Width of the representation a client uploads.
    pub rep_dim: usize,
    /// Hidden width of the server classifiers.
    pub server_hidden: usize,
    pub batch_size: usize,
    pub client_lr: f64,
    pub server_lr: f64,
    pub client_epochs: usize,
    pub server_epochs: usize,
    pub lambda_u: f64,
    pub tau: f64,
    pub share_mask: bool,
    pub r_m: f64,
    pub sigma: f64,
    pub mask_semantics: MaskSemantics,
    /// Confidence threshold `t` for inclusion probabilities.
    pub threshold: f64,
    /// Local client updates per FedBCD round; vanilla rounds always use one.
    pub local_steps: usize,
    pub rounds: usize,
    /// Stop vanilla training after this many rounds without a better test metric.
    pub patience: Option<usize>,
    pub eval_every: usize,
    pub bytes_per_scalar: usize,
    pub normalize_gradients: bool,
    pub kmeans_restarts: usize,
    pub server_grad_warmup_epochs: usize,
    /// Warm-start the final classifier from the joint classifier trained for
    /// inclusion probabilities instead of a fresh initialisation.
    pub reuse_joint_classifier: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            client_hidden: 16,
            rep_dim: 8,
            server_hidden: 16,
            batch_size: 32,
            client_lr: 0.01,
            server_lr: 0.01,
            client_epochs: 20,
            server_epochs: 300,
            lambda_u: 1.0,
            tau: 0.95,
            share_mask: true,
            r_m: 0.2,
            sigma: 0.1,
            mask_semantics: MaskSemantics::MaskedFraction,
            threshold: 0.95,
            local_steps: 5,
            rounds: 1000,
            patience: None,
            eval_every: 10,
            bytes_per_scalar: 4,
            normalize_gradients: true,
            kmeans_restarts: 100,
            server_grad_warmup_epochs: 0,
            reuse_joint_classifier: false,
        }
    }
}

impl ProtocolConfig {
    pub fn ssl(&self) -> SslConfig {
        SslConfig {
            lambda_u: self.lambda_u,
            tau: self.tau,
            epochs: self.client_epochs,
            batch_size: self.batch_size,
            lr: self.client_lr,
            share_mask: self.share_mask,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("client_hidden", self.client_hidden),
            ("rep_dim", self.rep_dim),
            ("server_hidden", self.server_hidden),
            ("batch_size", self.batch_size),
            ("local_steps", self.local_steps),
            ("eval_every", self.eval_every),
            ("bytes_per_scalar", self.bytes_per_scalar),
            ("kmeans_restarts", self.kmeans_restarts),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        for (key, v) in [("client_lr", self.client_lr), ("server_lr", self.server_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be a positive number"));
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("threshold", "must be in (0, 1)"));
        }
        if !(self.r_m > 0.0 && self.r_m <= 1.0) {
            return Err(Error::config("r_m", "must be in (0, 1]"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("sigma", "must be >= 0"));
        }
        if self.patience == Some(0) {
            return Err(Error::config("patience", "must be at least 1 when set"));
        }
        self.ssl()
            .validate()
            .map_err(|e| Error::config("ssl", e.to_string()))
    }
}

/// Independent per-purpose seed from a root seed (splitmix64 finalizer).
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    let mut z = root ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) mod streams {
    pub const SERVER: u64 = 1;
    pub const BATCHES: u64 = 2;
    pub const CLIENT_BASE: u64 = 100;
}
