//! Orchestration of the protocols. Every transfer between parties goes through
//! the functions in this file, which record it in the ledger.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::client::{Client, ExpansionSummary, RepSet};
use super::config::{derive_seed, streams, ProtocolConfig};
use super::ledger::{CommLedger, Payload, PayloadRole};
use super::server::Server;
use crate::cluster::purity;
use crate::data::VflSplit;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::metrics::{accuracy, auc};
use crate::ssl::SslSummary;

/// Held-out rows, one feature block per client, with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub client_features: Vec<Matrix>,
    pub labels: Vec<usize>,
}

impl EvalSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    /// Only for two-class tasks; scores are the class-1 probability.
    pub auc: Option<f64>,
}

impl EvalMetrics {
    /// AUC when defined, accuracy otherwise.
    pub fn primary(&self) -> f64 {
        self.auc.unwrap_or(self.accuracy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Test metrics after a vanilla round, with the traffic spent so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub round: usize,
    pub messages_per_client: usize,
    pub total_bytes: usize,
    pub metrics: EvalMetrics,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientDiagnostics {
    pub client: usize,
    /// Agreement of temporary labels with the true overlap classes, up to relabelling.
    pub temp_label_purity: Option<f64>,
    pub ssl: Vec<SslSummary>,
    pub expansion: Option<ExpansionInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionInfo {
    pub expected_size: f64,
    pub included: usize,
    pub unaligned: usize,
}

/// One upload from `client` bundling the representations of `sets`.
pub fn client_extract_many(
    client: &Client,
    sets: &[RepSet],
    ledger: &mut CommLedger,
) -> Result<Vec<Matrix>> {
    let mut reps = Vec::with_capacity(sets.len());
    let mut payloads = Vec::with_capacity(sets.len());
    for &set in sets {
        let h = client.extract(set)?;
        let role = match set {
            RepSet::Overlap => PayloadRole::RepsOverlap,
            RepSet::Unaligned => PayloadRole::RepsUnaligned,
        };
        payloads.push(Payload::new(role, h.len()));
        reps.push(h);
    }
    ledger.upload(client.id(), payloads);
    Ok(reps)
}

/// Uploads one set of representations.
pub fn client_extract(client: &Client, which: RepSet, ledger: &mut CommLedger) -> Result<Matrix> {
    Ok(client_extract_many(client, &[which], ledger)?.remove(0))
}

/// Caches the overlap representations (in client order) and sends every
/// client its gradient slice together with the class count.
pub fn server_partial_grads(
    server: &mut Server,
    reps: Vec<Matrix>,
    cfg: &ProtocolConfig,
    ledger: &mut CommLedger,
) -> Result<Vec<(Matrix, usize)>> {
    if reps.len() != server.rep_dims().len() {
        return Err(Error::Protocol(format!(
            "{} representation blocks for {} clients",
            reps.len(),
            server.rep_dims().len()
        )));
    }
    for (k, h) in reps.into_iter().enumerate() {
        server.receive_overlap(k, h)?;
    }
    let (grads, _) = server.partial_grads(cfg)?;
    let c = server.num_classes();
    Ok(grads
        .into_iter()
        .enumerate()
        .map(|(k, g)| {
            ledger.download(
                k,
                vec![
                    Payload::new(PayloadRole::PartialGrads, g.len()),
                    Payload::new(PayloadRole::ClassCount, 1),
                ],
            );
            (g, c)
        })
        .collect())
}

/// Server and clients of one simulated deployment plus the shared ledger.
#[derive(Debug, Clone)]
pub struct Federation {
    clients: Vec<Client>,
    server: Server,
    ledger: CommLedger,
    cfg: ProtocolConfig,
    batch_rng: ChaCha8Rng,
    batch_order: Vec<usize>,
    batch_pos: usize,
    timings: Vec<StageTiming>,
    diagnostics: Vec<ClientDiagnostics>,
}

impl Federation {
    pub fn new(split: &VflSplit, cfg: ProtocolConfig) -> Result<Self> {
        cfg.validate()?;
        let clients = split
            .clients
            .iter()
            .enumerate()
            .map(|(k, shard)| Client::new(k, shard, &cfg))
            .collect::<Result<Vec<_>>>()?;
        let rep_dims = clients.iter().map(Client::rep_dim).collect();
        let server = Server::new(split.overlap_labels.clone(), rep_dims, &cfg)?;
        let diagnostics = (0..clients.len())
            .map(|client| ClientDiagnostics {
                client,
                ..ClientDiagnostics::default()
            })
            .collect();
        Ok(Self {
            clients,
            server,
            ledger: CommLedger::new(cfg.bytes_per_scalar),
            batch_rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::BATCHES)),
            batch_order: (0..split.overlap_size()).collect(),
            batch_pos: usize::MAX,
            cfg,
            timings: Vec::new(),
            diagnostics,
        })
    }

    pub fn clients(&self) -> &[Client] {
        &self.clients
    }

    pub fn client_mut(&mut self, k: usize) -> &mut Client {
        &mut self.clients[k]
    }

    pub fn server(&self) -> &Server {
        &self.server
    }

    pub fn server_mut(&mut self) -> &mut Server {
        &mut self.server
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.cfg
    }

    pub fn timings(&self) -> &[StageTiming] {
        &self.timings
    }

    pub fn diagnostics(&self) -> &[ClientDiagnostics] {
        &self.diagnostics
    }

    fn timed<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self)?;
        self.timings.push(StageTiming {
            stage: stage.to_owned(),
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(out)
    }

    /// Test metrics of the current models. Evaluation traffic is not part of
    /// the training protocol and is not recorded.
    pub fn evaluate(&self, test: &EvalSet) -> Result<EvalMetrics> {
        if test.client_features.len() != self.clients.len() {
            return Err(Error::shape(format!(
                "{} test feature blocks for {} clients",
                test.client_features.len(),
                self.clients.len()
            )));
        }
        let reps = self
            .clients
            .iter()
            .zip(&test.client_features)
            .map(|(c, x)| c.represent(x))
            .collect::<Result<Vec<_>>>()?;
        let probs = self.server.predict_proba(&reps)?;
        let acc = accuracy(&probs.argmax_rows(), &test.labels)?;
        let auc = if probs.cols() == 2 && test.labels.iter().all(|&y| y < 2) {
            let scores: Vec<f64> = probs.iter_rows().map(|r| r[1]).collect();
            auc(&scores, &test.labels).ok()
        } else {
            None
        };
        Ok(EvalMetrics { accuracy: acc, auc })
    }

    /// Steps one to five: upload, gradients, clustering, local SSL and the
    /// post-SSL upload. With `with_unaligned` the final upload also carries
    /// the unaligned representations; they are returned per client.
    fn oneshot_phase(&mut self, with_unaligned: bool) -> Result<Vec<Option<Matrix>>> {
        let reps = self.timed("upload_overlap", |f| {
            f.clients
                .iter()
                .map(|c| client_extract(c, RepSet::Overlap, &mut f.ledger))
                .collect::<Result<Vec<_>>>()
        })?;
        let grads = self.timed("partial_grads", |f| {
            server_partial_grads(&mut f.server, reps, &f.cfg, &mut f.ledger)
        })?;
        self.timed("cluster_gradients", |f| {
            for (k, (g, c)) in grads.iter().enumerate() {
                let temp = f.clients[k].receive_gradients(g, *c, &f.cfg)?;
                f.diagnostics[k].temp_label_purity = Some(purity(&temp.labels, f.server.labels()));
            }
            Ok(())
        })?;
        self.timed("local_ssl", |f| {
            for k in 0..f.clients.len() {
                let s = f.clients[k].local_ssl(&f.cfg)?;
                f.diagnostics[k].ssl.push(s);
            }
            Ok(())
        })?;
        self.timed("upload_after_ssl", |f| {
            let sets: &[RepSet] = if with_unaligned {
                &[RepSet::Overlap, RepSet::Unaligned]
            } else {
                &[RepSet::Overlap]
            };
            let mut unaligned = Vec::with_capacity(f.clients.len());
            for k in 0..f.clients.len() {
                let mut reps = client_extract_many(&f.clients[k], sets, &mut f.ledger)?;
                unaligned.push(if with_unaligned { reps.pop() } else { None });
                f.server.receive_overlap(k, reps.swap_remove(0))?;
            }
            Ok(unaligned)
        })
    }

    /// One-shot protocol: three messages per client.
    pub fn run_oneshot(&mut self) -> Result<()> {
        self.oneshot_phase(false)?;
        self.timed("train_classifier", |f| {
            f.server.train_classifier(&f.cfg).map(|_| ())
        })
    }

    /// Few-shot protocol: the one-shot phase, inclusion probabilities for the
    /// unaligned rows, expanded local SSL and a final upload. Five messages
    /// per client.
    pub fn run_fewshot(&mut self) -> Result<()> {
        let unaligned = self.oneshot_phase(true)?;
        self.timed("train_aux_classifiers", |f| {
            f.server.train_aux_classifiers(&f.cfg)
        })?;
        for (k, h_u) in unaligned.into_iter().enumerate() {
            let h_u = h_u.expect("unaligned representations were requested");
            let probs = self.timed("infer_prob", |f| {
                let p = f.server.infer_prob(k, &h_u, f.cfg.threshold)?;
                f.ledger
                    .download(k, vec![Payload::new(PayloadRole::InclusionProbs, p.len())]);
                Ok(p)
            })?;
            let summary: ExpansionSummary = self.timed("expand_and_ssl", |f| {
                f.clients[k].expand_and_ssl(&probs, &f.cfg)
            })?;
            self.diagnostics[k].expansion = Some(ExpansionInfo {
                expected_size: summary.expected_size,
                included: summary.included,
                unaligned: probs.len(),
            });
            self.diagnostics[k].ssl.push(summary.ssl);
            self.timed("upload_after_expansion", |f| {
                let h = client_extract(&f.clients[k], RepSet::Overlap, &mut f.ledger)?;
                f.server.receive_overlap(k, h)
            })?;
        }
        self.timed("train_classifier", |f| {
            f.server.train_classifier(&f.cfg).map(|_| ())
        })
    }

    /// Next minibatch of overlap rows. Batches walk a shuffled order and
    /// reshuffle once it is used up; both sides know the order in advance, so
    /// batch indices are not traffic.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let n = self.batch_order.len();
        if self.batch_pos >= n {
            self.batch_order.shuffle(&mut self.batch_rng);
            self.batch_pos = 0;
        }
        let end = (self.batch_pos + self.cfg.batch_size).min(n);
        let rows = self.batch_order[self.batch_pos..end].to_vec();
        self.batch_pos = end;
        rows
    }

    /// One end-to-end round on overlap rows `rows` with `steps` local client
    /// updates. Returns the server loss before the update.
    pub fn vanilla_round(&mut self, rows: &[usize], steps: usize) -> Result<f64> {
        if steps == 0 {
            return Err(Error::invalid("local steps must be at least 1"));
        }
        if rows.is_empty() {
            return Err(Error::invalid("empty round batch"));
        }
        if self.server.classifier().is_none() {
            self.server.init_classifier(&self.cfg)?;
        }
        let mut traces = Vec::with_capacity(self.clients.len());
        let mut reps = Vec::with_capacity(self.clients.len());
        for c in &self.clients {
            let trace = c.forward_overlap(rows)?;
            let h = trace.output().clone();
            self.ledger.upload(
                c.id(),
                vec![Payload::new(PayloadRole::RepsOverlap, h.len())],
            );
            reps.push(h);
            traces.push(trace);
        }
        let (loss, grads) = self.server.vanilla_step(rows, &reps, self.cfg.server_lr)?;
        for (k, (g, trace)) in grads.iter().zip(&traces).enumerate() {
            self.ledger
                .download(k, vec![Payload::new(PayloadRole::PartialGrads, g.len())]);
            self.clients[k].apply_partial_grads(rows, trace, g, self.cfg.client_lr, steps)?;
        }
        Ok(loss)
    }

    /// Vanilla VFL (`steps` = 1) or FedBCD (`steps` > 1) for `rounds` rounds,
    /// continuing from the current models. With a test set the metrics are
    /// recorded every `eval_every` rounds and `patience` stops training once
    /// that many rounds pass without a better primary metric.
    pub fn run_vanilla(
        &mut self,
        rounds: usize,
        steps: usize,
        test: Option<&EvalSet>,
    ) -> Result<Vec<CurvePoint>> {
        if rounds == 0 {
            return Err(Error::invalid("rounds must be at least 1"));
        }
        let start = Instant::now();
        let mut curve = Vec::new();
        let mut best = f64::NEG_INFINITY;
        let mut best_round = 0;
        for round in 1..=rounds {
            let rows = self.next_batch();
            self.vanilla_round(&rows, steps)?;
            let Some(test) = test else { continue };
            if round % self.cfg.eval_every != 0 && round != rounds {
                continue;
            }
            let metrics = self.evaluate(test)?;
            curve.push(CurvePoint {
                round,
                messages_per_client: self.ledger.times_for(0),
                total_bytes: self.ledger.total_bytes(),
                metrics,
            });
            if metrics.primary() > best {
                best = metrics.primary();
                best_round = round;
            }
            if self.cfg.patience.is_some_and(|p| round - best_round >= p) {
                break;
            }
        }
        self.timings.push(StageTiming {
            stage: "vanilla_rounds".into(),
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(curve)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{vertical_partition, Dataset, SplitSpec};

    fn toy_split(n: usize, overlap: usize) -> VflSplit {
        let data = (0..n * 4)
            .map(|v| ((v * 37 % 23) as f64 - 11.0) / 7.0)
            .collect();
        let d = Dataset::new(
            Matrix::from_vec(n, 4, data).unwrap(),
            (0..n).map(|i| i % 2).collect(),
            (0..4).map(|j| format!("f{j}")).collect(),
            vec!["0".into(), "1".into()],
        )
        .unwrap();
        vertical_partition(&d, &SplitSpec::two_way(4, 2, overlap, 1)).unwrap()
    }

    fn quick() -> ProtocolConfig {
        ProtocolConfig {
            client_epochs: 1,
            server_epochs: 2,
            ..ProtocolConfig::default()
        }
    }

    #[test]
    fn extract_records_rows_times_width() {
        let split = toy_split(10, 4);
        let fed = Federation::new(&split, quick()).unwrap();
        let mut ledger = CommLedger::default();
        let a = client_extract(&fed.clients()[0], RepSet::Overlap, &mut ledger).unwrap();
        let b = client_extract(&fed.clients()[0], RepSet::Overlap, &mut ledger).unwrap();
        assert_eq!(a, b);
        assert_eq!(ledger.messages()[0].scalar_count(), 4 * 8);
    }

    #[test]
    fn ten_rounds_twenty_messages() {
        let split = toy_split(40, 20);
        let mut fed = Federation::new(&split, quick()).unwrap();
        fed.run_vanilla(10, 1, None).unwrap();
        assert_eq!(fed.ledger().times_for(0), 20);
        assert_eq!(fed.ledger().times_for(1), 20);
    }

    #[test]
    fn batches_cover_overlap_each_pass() {
        let split = toy_split(120, 70);
        let mut fed = Federation::new(&split, quick()).unwrap();
        let mut seen = Vec::new();
        seen.extend(fed.next_batch());
        seen.extend(fed.next_batch());
        seen.extend(fed.next_batch());
        assert_eq!(seen.len(), 70);
        seen.sort_unstable();
        assert_eq!(seen, (0..70).collect::<Vec<_>>());
    }

    #[test]
    fn zero_rounds_or_steps_rejected() {
        let split = toy_split(40, 20);
        let mut fed = Federation::new(&split, quick()).unwrap();
        assert!(fed.run_vanilla(0, 1, None).is_err());
        assert!(fed.vanilla_round(&[0, 1], 0).is_err());
    }
}
