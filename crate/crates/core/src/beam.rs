//! Beam-search decoding of the attention decoder, plus the edit-distance
//! metric used to score hypotheses against references.
//!
//! The beam keeps `beam_size` partial hypotheses. Each round expands every
//! active hypothesis by one label: the decoder advances once per parent, and
//! all of a parent's children share that step's recurrent state, context
//! vector, and alignment. Hypotheses that emit the end-of-sequence label
//! retire into a finished pool; final ranking adds a length bonus of
//! `length_penalty` per emitted label to the accumulated log-probability,
//! which counteracts the attention decoder's bias toward short outputs.

use crate::attention::{decoder_step, AttnConfig, AttnParams};
use crate::ctc::LabelSeq;
use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};
use crate::nn::{log_softmax, LstmState};
use crate::numgrad::{ParamStore, Tensor2};

/// Hard cap on decoder steps taken by [`exhaustive_decode`].
const EXHAUSTIVE_LIMIT: f64 = 2e5;

/// Decoding hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamConfig {
    /// Number of active hypotheses kept per step.
    pub beam_size: usize,
    /// Score bonus per emitted label (including end-of-sequence); positive
    /// values reward longer outputs, negative values penalize them.
    pub length_penalty: f64,
    /// Longest allowed output in labels; `None` uses the number of encoded
    /// frames.
    pub max_output_len: Option<usize>,
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size < 1 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if !self.length_penalty.is_finite() {
            return Err(Error::Config(format!(
                "length_penalty must be finite, got {}",
                self.length_penalty
            )));
        }
        if self.max_output_len == Some(0) {
            return Err(Error::Config(
                "max_output_len must be at least 1 when given".into(),
            ));
        }
        Ok(())
    }
}

/// One partial or finished decode: the labels emitted after start-of-sequence
/// together with the decoder state needed to extend it by one more label.
#[derive(Clone, Debug)]
pub struct Hypothesis {
    /// Emitted labels; ends with the end-of-sequence label iff `finished`.
    pub labels: Vec<usize>,
    /// Sum of the log-probabilities of every emitted label.
    pub log_score: f64,
    /// Decoder recurrent state after consuming the last emitted label.
    pub state: LstmState,
    /// Context vector fed to the next recurrence.
    pub context: Tensor2,
    /// Alignment over encoder frames from the last step.
    pub alignment: Tensor2,
    /// True iff the last emitted label is end-of-sequence.
    pub finished: bool,
    /// True iff decoding hit the length cap with no finished hypothesis.
    pub truncated: bool,
}

impl Hypothesis {
    /// Ranking score: accumulated log-probability plus the length bonus.
    pub fn adjusted_score(&self, length_penalty: f64) -> f64 {
        self.log_score + length_penalty * self.labels.len() as f64
    }

    /// Emitted labels with any trailing end-of-sequence removed, as a
    /// decoder-output sequence.
    pub fn without_eos(&self) -> LabelSeq {
        let mut labels = self.labels.clone();
        if self.finished {
            labels.pop();
        }
        LabelSeq::collapsed(labels)
    }
}

/// One candidate extension during expansion, before selection.
struct Candidate {
    score: f64,
    label: usize,
    parent: usize,
}

/// Upper bound on the adjusted score of any finished completion of `hyp`.
///
/// Future labels contribute non-positive log-probabilities, so only the
/// length bonus can raise the score: at best `max_len` total labels when the
/// bonus is positive, and at least one more label (the end-of-sequence) when
/// it is a penalty.
fn optimistic_bound(hyp: &Hypothesis, length_penalty: f64, max_len: usize) -> f64 {
    let best_len = if length_penalty >= 0.0 {
        max_len
    } else {
        hyp.labels.len() + 1
    };
    hyp.log_score + length_penalty * best_len as f64
}

/// Decodes `h` by beam search over the attention decoder.
///
/// Returns finished hypotheses sorted best-first by adjusted score. When no
/// hypothesis emits end-of-sequence within the length cap, the single best
/// unfinished hypothesis is returned with its `truncated` flag set.
pub fn beam_decode(
    config: &AttnConfig,
    store: &ParamStore,
    params: &AttnParams,
    h: &EncoderOutput,
    cfg: &BeamConfig,
) -> Result<Vec<Hypothesis>> {
    config.validate()?;
    cfg.validate()?;
    if h.is_empty() {
        return Err(Error::Argument(
            "cannot decode an empty encoder output".into(),
        ));
    }
    let max_len = cfg.max_output_len.unwrap_or(h.len());
    let k_att = params.k_att(store);
    let eos = params.sos_eos(store);

    let (s0, c0, a0) = params.start(store, h.len());
    let mut active = vec![Hypothesis {
        labels: Vec::new(),
        log_score: 0.0,
        state: s0,
        context: c0,
        alignment: a0,
        finished: false,
        truncated: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        if active.is_empty() {
            break;
        }
        if finished.len() >= cfg.beam_size {
            let best_bound = active
                .iter()
                .map(|hyp| optimistic_bound(hyp, cfg.length_penalty, max_len))
                .fold(f64::NEG_INFINITY, f64::max);
            let beaten = finished
                .iter()
                .filter(|f| f.adjusted_score(cfg.length_penalty) > best_bound)
                .count();
            if beaten >= cfg.beam_size {
                break;
            }
        }

        let mut steps = Vec::with_capacity(active.len());
        let mut candidates = Vec::with_capacity(active.len() * k_att);
        for (parent, hyp) in active.iter().enumerate() {
            let y_prev = hyp.labels.last().copied().unwrap_or(eos);
            let step = decoder_step(
                config,
                store,
                params,
                &hyp.state,
                &hyp.context,
                &hyp.alignment,
                h,
                y_prev,
            )?;
            let logp = log_softmax(&step.logits)?;
            for label in 0..k_att {
                candidates.push(Candidate {
                    score: hyp.log_score + logp.get(0, label),
                    label,
                    parent,
                });
            }
            steps.push(step);
        }

        candidates.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.label.cmp(&b.label))
                .then_with(|| a.parent.cmp(&b.parent))
        });

        let mut next_active = Vec::with_capacity(cfg.beam_size);
        for cand in candidates.into_iter().take(cfg.beam_size) {
            let step = &steps[cand.parent];
            let mut labels = active[cand.parent].labels.clone();
            labels.push(cand.label);
            let child = Hypothesis {
                finished: cand.label == eos,
                labels,
                log_score: cand.score,
                state: step.s_u.clone(),
                context: step.c_u.clone(),
                alignment: step.a_u.clone(),
                truncated: false,
            };
            if child.finished {
                finished.push(child);
            } else {
                next_active.push(child);
            }
        }
        active = next_active;
    }

    if finished.is_empty() {
        let mut best = active
            .into_iter()
            .max_by(|a, b| {
                a.adjusted_score(cfg.length_penalty)
                    .total_cmp(&b.adjusted_score(cfg.length_penalty))
            })
            .ok_or_else(|| Error::State("beam search produced no hypotheses".into()))?;
        best.truncated = true;
        return Ok(vec![best]);
    }
    finished.sort_by(|a, b| {
        b.adjusted_score(cfg.length_penalty)
            .total_cmp(&a.adjusted_score(cfg.length_penalty))
    });
    Ok(finished)
}

/// Greedy decoding: emits the argmax label at every step until
/// end-of-sequence or the length cap.
///
/// Implemented directly rather than as a width-1 beam so the two can check
/// each other.
pub fn greedy_attention_decode(
    config: &AttnConfig,
    store: &ParamStore,
    params: &AttnParams,
    h: &EncoderOutput,
    max_output_len: Option<usize>,
) -> Result<Hypothesis> {
    config.validate()?;
    if h.is_empty() {
        return Err(Error::Argument(
            "cannot decode an empty encoder output".into(),
        ));
    }
    let max_len = max_output_len.unwrap_or(h.len());
    let eos = params.sos_eos(store);
    let (mut s, mut c, mut a) = params.start(store, h.len());
    let mut labels = Vec::new();
    let mut log_score = 0.0;
    let mut finished = false;
    while labels.len() < max_len && !finished {
        let y_prev = labels.last().copied().unwrap_or(eos);
        let step = decoder_step(config, store, params, &s, &c, &a, h, y_prev)?;
        let logp = log_softmax(&step.logits)?;
        let label = logp.argmax_row(0);
        labels.push(label);
        log_score += logp.get(0, label);
        finished = label == eos;
        s = step.s_u;
        c = step.c_u;
        a = step.a_u;
    }
    Ok(Hypothesis {
        labels,
        log_score,
        state: s,
        context: c,
        alignment: a,
        truncated: !finished,
        finished,
    })
}

/// Finds the exact best finished sequence by scoring every label sequence of
/// length at most the cap, as a reference for beam search.
///
/// Returns the labels (ending in end-of-sequence) and their adjusted score.
/// Guarded: the search visits `(k-1)^0 + ... + (k-1)^(max_len-1)` decoder
/// states and refuses runs that would exceed the cap.
pub fn exhaustive_decode(
    config: &AttnConfig,
    store: &ParamStore,
    params: &AttnParams,
    h: &EncoderOutput,
    cfg: &BeamConfig,
) -> Result<(Vec<usize>, f64)> {
    config.validate()?;
    cfg.validate()?;
    if h.is_empty() {
        return Err(Error::Argument(
            "cannot decode an empty encoder output".into(),
        ));
    }
    let max_len = cfg.max_output_len.unwrap_or(h.len());
    let k_att = params.k_att(store);
    let eos = params.sos_eos(store);

    let mut nodes = 1.0;
    let branch = (k_att - 1) as f64;
    for _ in 1..max_len {
        nodes = nodes * branch + 1.0;
    }
    if nodes > EXHAUSTIVE_LIMIT {
        return Err(Error::Guard(format!(
            "exhaustive decode would visit about {nodes:.3e} decoder states \
             (limit {EXHAUSTIVE_LIMIT:.0e})"
        )));
    }

    struct Search<'a> {
        config: &'a AttnConfig,
        store: &'a ParamStore,
        params: &'a AttnParams,
        h: &'a EncoderOutput,
        penalty: f64,
        max_len: usize,
        k_att: usize,
        eos: usize,
        best: Option<(Vec<usize>, f64)>,
    }

    impl Search<'_> {
        fn visit(
            &mut self,
            prefix: &mut Vec<usize>,
            score: f64,
            s: &LstmState,
            c: &Tensor2,
            a: &Tensor2,
        ) -> Result<()> {
            let y_prev = prefix.last().copied().unwrap_or(self.eos);
            let step = decoder_step(
                self.config,
                self.store,
                self.params,
                s,
                c,
                a,
                self.h,
                y_prev,
            )?;
            let logp = log_softmax(&step.logits)?;

            let end_score = score + logp.get(0, self.eos);
            let adjusted = end_score + self.penalty * (prefix.len() + 1) as f64;
            if self.best.as_ref().is_none_or(|(_, b)| adjusted > *b) {
                let mut labels = prefix.clone();
                labels.push(self.eos);
                self.best = Some((labels, adjusted));
            }

            if prefix.len() + 1 < self.max_len {
                let (k_att, eos) = (self.k_att, self.eos);
                for label in (0..k_att).filter(|&l| l != eos) {
                    prefix.push(label);
                    self.visit(
                        prefix,
                        score + logp.get(0, label),
                        &step.s_u,
                        &step.c_u,
                        &step.a_u,
                    )?;
                    prefix.pop();
                }
            }
            Ok(())
        }
    }

    let (s0, c0, a0) = params.start(store, h.len());
    let mut search = Search {
        config,
        store,
        params,
        h,
        penalty: cfg.length_penalty,
        max_len,
        k_att,
        eos,
        best: None,
    };
    search.visit(&mut Vec::new(), 0.0, &s0, &c0, &a0)?;
    search
        .best
        .ok_or_else(|| Error::State("exhaustive decode scored no sequences".into()))
}

/// Levenshtein distance between two label sequences under unit-cost insert,
/// delete, and substitute.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ai) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &bj) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ai != bj);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}
