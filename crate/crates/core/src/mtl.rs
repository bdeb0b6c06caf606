//! Multi-task training: a convex combination of the connectionist loss and
//! the attention loss over one shared encoder, optimized per utterance by
//! AdaDelta under global-norm gradient clipping.
//!
//! One training step builds a single tape holding the encoder pass and
//! whichever heads the mixing weight enables, so both losses backpropagate
//! into the same encoder parameters. The endpoints are exact: `lambda` of 0
//! trains the attention head alone and 1 trains the connectionist head
//! alone, with the other head never touched.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_loss, attention_loss_nodes, teacher_forced_argmax, AttnTrace};
use crate::beam::edit_distance;
use crate::ctc::{ctc_loss_on_tape, min_frames, LabelSeq};
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numgrad::{ParamStore, Tape, Tensor2};

/// Training hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MtlConfig {
    /// Weight of the connectionist loss; the attention loss gets `1 - lambda`.
    pub lambda: f64,
    /// Full passes over the training set.
    pub epochs: usize,
    /// Global gradient-norm ceiling applied before every update.
    pub clip_threshold: f64,
    /// AdaDelta decay rate for both running averages.
    pub adadelta_rho: f64,
    /// AdaDelta numerical-stability constant.
    pub adadelta_eps: f64,
    /// Seed for the per-epoch shuffle of the training order.
    pub seed: u64,
}

impl Default for MtlConfig {
    fn default() -> Self {
        MtlConfig {
            lambda: 0.2,
            epochs: 20,
            clip_threshold: 5.0,
            adadelta_rho: 0.95,
            adadelta_eps: 1e-8,
            seed: 0,
        }
    }
}

impl MtlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !self.clip_threshold.is_finite() || self.clip_threshold <= 0.0 {
            return Err(Error::Config(format!(
                "clip_threshold must be positive, got {}",
                self.clip_threshold
            )));
        }
        if !self.adadelta_rho.is_finite() || self.adadelta_rho <= 0.0 || self.adadelta_rho >= 1.0 {
            return Err(Error::Config(format!(
                "adadelta_rho must lie strictly inside (0, 1), got {}",
                self.adadelta_rho
            )));
        }
        if !self.adadelta_eps.is_finite() || self.adadelta_eps <= 0.0 {
            return Err(Error::Config(format!(
                "adadelta_eps must be positive, got {}",
                self.adadelta_eps
            )));
        }
        Ok(())
    }
}

/// Convex combination of the two objectives.
///
/// The endpoints return the surviving loss unchanged, bit for bit, rather
/// than multiplying by a unit weight.
pub fn mtl_loss(lambda: f64, l_ctc: f64, l_att: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) || !lambda.is_finite() {
        return Err(Error::Config(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    if lambda == 0.0 {
        Ok(l_att)
    } else if lambda == 1.0 {
        Ok(l_ctc)
    } else {
        Ok(lambda * l_ctc + (1.0 - lambda) * l_att)
    }
}

/// AdaDelta optimizer state: per-entry running averages of squared gradients
/// and squared updates, kept in parallel with a parameter store.
#[derive(Clone, Debug)]
pub struct AdaDelta {
    rho: f64,
    eps: f64,
    g2: Vec<Tensor2>,
    u2: Vec<Tensor2>,
}

impl AdaDelta {
    /// Fresh optimizer for every parameter currently in `store`, with both
    /// accumulators at zero.
    pub fn new(store: &ParamStore, rho: f64, eps: f64) -> Result<Self> {
        if !rho.is_finite() || rho <= 0.0 || rho >= 1.0 {
            return Err(Error::Config(format!(
                "adadelta_rho must lie strictly inside (0, 1), got {rho}"
            )));
        }
        if !eps.is_finite() || eps <= 0.0 {
            return Err(Error::Config(format!(
                "adadelta_eps must be positive, got {eps}"
            )));
        }
        let zeros: Vec<Tensor2> = store
            .iter()
            .map(|p| Tensor2::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Ok(AdaDelta {
            rho,
            eps,
            g2: zeros.clone(),
            u2: zeros,
        })
    }

    /// Applies one update from the gradients accumulated in `store`,
    /// advancing both running averages.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.g2.len() != store.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} parameters but the store holds {}",
                self.g2.len(),
                store.len()
            )));
        }
        for (i, p) in store.iter_mut().enumerate() {
            if self.g2[i].shape() != p.value.shape() {
                return Err(Error::State(format!(
                    "parameter '{}' changed shape after the optimizer was built",
                    p.name
                )));
            }
            let g2 = self.g2[i].data_mut();
            let u2 = self.u2[i].data_mut();
            let grads = p.grad.data();
            let values = p.value.data_mut();
            for j in 0..values.len() {
                let g = grads[j];
                g2[j] = self.rho * g2[j] + (1.0 - self.rho) * g * g;
                let delta = -((u2[j] + self.eps) / (g2[j] + self.eps)).sqrt() * g;
                u2[j] = self.rho * u2[j] + (1.0 - self.rho) * delta * delta;
                values[j] += delta;
            }
        }
        Ok(())
    }
}

/// One AdaDelta update of `store` in place; see [`AdaDelta::step`].
pub fn adadelta_update(store: &mut ParamStore, optimizer: &mut AdaDelta) -> Result<()> {
    optimizer.step(store)
}

/// Rescales all gradients so their global L2 norm is at most `threshold`.
///
/// Returns the factor applied: 1 when the norm was already within bounds,
/// `threshold / norm` otherwise.
pub fn clip_gradients(store: &mut ParamStore, threshold: f64) -> Result<f64> {
    if !threshold.is_finite() || threshold <= 0.0 {
        return Err(Error::Config(format!(
            "clip threshold must be positive, got {threshold}"
        )));
    }
    let norm = store.grad_norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("global gradient norm is {norm}")));
    }
    if norm <= threshold {
        return Ok(1.0);
    }
    let factor = threshold / norm;
    for p in store.iter_mut() {
        for g in p.grad.data_mut() {
            *g *= factor;
        }
    }
    Ok(factor)
}

/// Per-epoch training statistics. Component losses are means over the
/// utterances whose head actually ran; a head disabled by the mixing weight
/// logs NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean combined loss per trained utterance.
    pub total_loss: f64,
    /// Mean connectionist loss, or NaN when `lambda` is 0.
    pub ctc_loss: f64,
    /// Mean attention loss, or NaN when `lambda` is 1.
    pub att_loss: f64,
    /// Teacher-forced label accuracy on the validation set, or NaN when the
    /// validation set is empty.
    pub val_acc: f64,
    /// Wall-clock duration of the epoch.
    pub seconds: f64,
}

/// Learning curve of one training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// Renders the log as CSV with columns
    /// `epoch,total_loss,ctc_loss,att_loss,val_acc,seconds`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,total_loss,ctc_loss,att_loss,val_acc,seconds\n");
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.total_loss, r.ctc_loss, r.att_loss, r.val_acc, r.seconds
            )
            .expect("writing to a String cannot fail");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Everything a training run produces besides the updated model.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: TrainLog,
    /// Teacher-forced alignment of the first validation utterance after each
    /// epoch, for inspecting how attention sharpens over training.
    pub probe: Vec<AttnTrace>,
    /// Skip events across all epochs: utterances left out of a pass because
    /// their encoding is too short for the connectionist loss.
    pub skipped_ctc: usize,
}

/// Teacher-forced label accuracy: `1 - edits / reference-length` summed over
/// the set, where each reference is the transcript plus end-of-sequence.
pub fn validation_accuracy(model: &Model, utterances: &[Utterance]) -> Result<f64> {
    if utterances.is_empty() {
        return Err(Error::Argument(
            "cannot compute accuracy over an empty set".into(),
        ));
    }
    let mut edits = 0usize;
    let mut total = 0usize;
    for utt in utterances {
        let y_star = with_eos(&utt.transcript, model.vocab.sos_eos);
        let h = model.encode(&utt.features)?;
        let hyp = teacher_forced_argmax(
            &model.config.attention,
            &model.store,
            &model.attention,
            &h,
            &y_star,
        )?;
        edits += edit_distance(&hyp, y_star.labels());
        total += y_star.len();
    }
    Ok(1.0 - edits as f64 / total as f64)
}

/// Transcript with the end-of-sequence label appended, as the attention
/// decoder's target.
fn with_eos(transcript: &LabelSeq, eos: usize) -> LabelSeq {
    let mut labels = transcript.labels().to_vec();
    labels.push(eos);
    LabelSeq::raw(labels)
}

/// Trains `model` in place and returns the learning curve.
///
/// Each epoch shuffles the training order, then takes one clipped AdaDelta
/// step per utterance on `lambda * ctc + (1 - lambda) * att` built over a
/// shared encoder pass. Utterances whose encoding cannot align their
/// transcript are skipped whenever the connectionist head is active, with a
/// warning on the first pass. A non-finite loss aborts immediately.
pub fn train(
    model: &mut Model,
    train_set: &[Utterance],
    valid_set: &[Utterance],
    cfg: &MtlConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let lambda = cfg.lambda;
    let eos = model.vocab.sos_eos;
    let mut optimizer = AdaDelta::new(&model.store, cfg.adadelta_rho, cfg.adadelta_eps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = TrainLog::default();
    let mut probe = Vec::with_capacity(cfg.epochs);
    let mut skipped_ctc = 0usize;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);

        let mut sums = LossSums::default();
        for &i in &order {
            let utt = &train_set[i];
            if lambda > 0.0 {
                let encoded = model.config.encoder.output_len(utt.frames());
                let needed = min_frames(utt.transcript.labels());
                if encoded < needed {
                    skipped_ctc += 1;
                    if epoch == 1 {
                        eprintln!(
                            "warning: skipping '{}': {encoded} encoded frames cannot \
                             align a transcript needing {needed}",
                            utt.id
                        );
                    }
                    continue;
                }
            }
            train_step(
                model,
                utt,
                lambda,
                eos,
                cfg,
                &mut optimizer,
                epoch,
                &mut sums,
            )?;
        }
        if sums.count == 0 {
            return Err(Error::State(format!(
                "epoch {epoch} trained on nothing: every utterance was skipped \
                 as infeasible for the connectionist loss"
            )));
        }

        let val_acc = if valid_set.is_empty() {
            f64::NAN
        } else {
            validation_accuracy(model, valid_set)?
        };
        if let Some(first) = valid_set.first() {
            let h = model.encode(&first.features)?;
            let (_, trace) = attention_loss(
                &model.config.attention,
                &model.store,
                &model.attention,
                &h,
                &with_eos(&first.transcript, eos),
            )?;
            probe.push(trace);
        }
        log.records.push(EpochRecord {
            epoch,
            total_loss: sums.total / sums.count as f64,
            ctc_loss: sums.mean_ctc(),
            att_loss: sums.mean_att(),
            val_acc,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutcome {
        log,
        probe,
        skipped_ctc,
    })
}

/// Running loss totals within one epoch.
#[derive(Default)]
struct LossSums {
    total: f64,
    count: usize,
    ctc: f64,
    ctc_count: usize,
    att: f64,
    att_count: usize,
}

impl LossSums {
    fn mean_ctc(&self) -> f64 {
        if self.ctc_count == 0 {
            f64::NAN
        } else {
            self.ctc / self.ctc_count as f64
        }
    }

    fn mean_att(&self) -> f64 {
        if self.att_count == 0 {
            f64::NAN
        } else {
            self.att / self.att_count as f64
        }
    }
}

/// One optimizer step on one utterance; both heads share the encoder nodes
/// on a single tape.
#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut Model,
    utt: &Utterance,
    lambda: f64,
    eos: usize,
    cfg: &MtlConfig,
    optimizer: &mut AdaDelta,
    epoch: usize,
    sums: &mut LossSums,
) -> Result<()> {
    let mut tape = Tape::new();
    let h_frames = model.encode_nodes(&mut tape, &utt.features)?;

    let ctc_node = if lambda > 0.0 {
        let head = model.register_ctc_head(&mut tape);
        let logits = model.ctc_logits_nodes(&mut tape, &head, &h_frames)?;
        Some(ctc_loss_on_tape(&mut tape, logits, &utt.transcript)?)
    } else {
        None
    };
    let att_node = if lambda < 1.0 {
        let nodes = model.register_attention(&mut tape);
        let y_star = with_eos(&utt.transcript, eos);
        let (node, _) = attention_loss_nodes(
            &mut tape,
            &model.config.attention,
            &nodes,
            &h_frames,
            &y_star,
        )?;
        Some(node)
    } else {
        None
    };
    let loss_node = match (ctc_node, att_node) {
        (Some(ctc), None) => ctc,
        (None, Some(att)) => att,
        (Some(ctc), Some(att)) => {
            let weighted_ctc = tape.scale(ctc, lambda);
            let weighted_att = tape.scale(att, 1.0 - lambda);
            tape.add(weighted_ctc, weighted_att)?
        }
        (None, None) => unreachable!("lambda in [0, 1] always enables a head"),
    };

    let ctc_val = ctc_node.map_or(f64::NAN, |n| tape.value(n).get(0, 0));
    let att_val = att_node.map_or(f64::NAN, |n| tape.value(n).get(0, 0));
    let loss_val = tape.value(loss_node).get(0, 0);
    if !loss_val.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss diverged at epoch {epoch} on '{}' ({} frames, {} labels): \
             total {loss_val}, ctc {ctc_val}, att {att_val}",
            utt.id,
            utt.frames(),
            utt.transcript.len()
        )));
    }

    let grads = tape.backward(loss_node)?;
    model.store.zero_grads();
    grads.accumulate_into(&mut model.store)?;
    clip_gradients(&mut model.store, cfg.clip_threshold)?;
    optimizer.step(&mut model.store)?;

    sums.total += loss_val;
    sums.count += 1;
    if ctc_node.is_some() {
        sums.ctc += ctc_val;
        sums.ctc_count += 1;
    }
    if att_node.is_some() {
        sums.att += att_val;
        sums.att_count += 1;
    }
    Ok(())
}
