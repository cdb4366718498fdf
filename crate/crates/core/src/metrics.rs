//! Utility and communication metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{CommLedger, Direction, PayloadRole};

/// Fraction of exact matches.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Area under the ROC curve via the Mann-Whitney rank statistic. Label 1 is
/// the positive class; tied scores count one half.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::LabelOutOfRange {
            label: l,
            classes: 2,
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("auc scores"));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::invalid("auc needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks (1-based) over tie groups; ranks of x.5 are kept exact by doubling
    let mut rank_sum_x2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let doubled_rank = (i + 1 + j + 1) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        rank_sum_x2 += doubled_rank * pos_in_group;
        i = j + 1;
    }
    let (p, n) = (positives as u128, negatives as u128);
    // U = R_pos - p(p+1)/2, computed in doubled integer units
    let u_x2 = rank_sum_x2 - p * (p + 1);
    Ok(u_x2 as f64 / (2 * p * n) as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientComm {
    pub client: usize,
    pub times: usize,
    pub uploads: usize,
    pub downloads: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommSummary {
    pub per_client: Vec<ClientComm>,
    pub total_messages: usize,
    pub total_scalars: usize,
    pub total_bytes: usize,
    /// Bytes / 2^20.
    pub total_mb: f64,
    pub bytes_by_role: BTreeMap<String, usize>,
}

impl CommSummary {
    /// Largest per-client message count; all clients match in every protocol.
    pub fn times(&self) -> usize {
        self.per_client.iter().map(|c| c.times).max().unwrap_or(0)
    }
}

pub fn bytes_to_mb(bytes: usize) -> f64 {
    bytes as f64 / (1u64 << 20) as f64
}

pub fn comm_summary(ledger: &CommLedger) -> CommSummary {
    let bps = ledger.bytes_per_scalar();
    let clients = ledger
        .messages()
        .iter()
        .map(|m| m.client() + 1)
        .max()
        .unwrap_or(0);
    let mut per_client: Vec<ClientComm> = (0..clients)
        .map(|client| ClientComm {
            client,
            ..ClientComm::default()
        })
        .collect();
    let mut bytes_by_role: BTreeMap<String, usize> = PayloadRole::ALL
        .iter()
        .map(|r| (r.as_str().to_owned(), 0))
        .collect();
    for m in ledger.messages() {
        let c = &mut per_client[m.client()];
        c.times += 1;
        match m.direction {
            Direction::Upload => c.uploads += 1,
            Direction::Download => c.downloads += 1,
        }
        c.bytes += m.scalar_count() * bps;
        for p in &m.payloads {
            *bytes_by_role.entry(p.role.as_str().to_owned()).or_default() += p.scalar_count * bps;
        }
    }
    let total_bytes = ledger.total_bytes();
    CommSummary {
        per_client,
        total_messages: ledger.len(),
        total_scalars: ledger.total_scalars(),
        total_bytes,
        total_mb: bytes_to_mb(total_bytes),
        bytes_by_role,
    }
}
