//! Attention decoder: content- or location-aware energies over the encoded
//! frames, sharpened softmax alignment, context integration, and an LSTM
//! decoder with an affine Generate head, trained by teacher forcing.
//!
//! One decoding step absorbs the previously emitted label and context into
//! the recurrent state, attends over the encoded frames with that state,
//! and produces logits for the next label. The caller threads the returned
//! alignment, context, and state into the following step, which keeps the
//! prediction for each label conditioned on the entire emitted prefix.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::{LabelRole, LabelSeq};
use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};
use crate::nn::{lstm_step_nodes, LstmGateNodes, LstmNodes, LstmParams, LstmState};
use crate::numgrad::{ParamId, ParamStore, Tape, Tensor2, ValueId};

/// Tolerance on alignment row normalization.
const ALIGN_SUM_TOL: f64 = 1e-10;

/// How step energies incorporate the encoded frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnMechanism {
    /// Energies from the decoder state and each frame.
    Content,
    /// Content plus convolutional features of the previous alignment.
    Location,
}

impl std::fmt::Display for AttnMechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttnMechanism::Content => write!(f, "content"),
            AttnMechanism::Location => write!(f, "location"),
        }
    }
}

/// Shape of the attention decoder. The convolution fields only matter for
/// the location mechanism. `gamma` sharpens the alignment softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnConfig {
    pub mechanism: AttnMechanism,
    pub gamma: f64,
    pub num_conv_filters: usize,
    pub conv_width: usize,
    pub attn_dim: usize,
    pub decoder_cells: usize,
    pub embed_dim: usize,
}

impl AttnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "sharpening factor must be positive, got {}",
                self.gamma
            )));
        }
        for &(d, name) in &[
            (self.attn_dim, "attn_dim"),
            (self.decoder_cells, "decoder_cells"),
            (self.embed_dim, "embed_dim"),
        ] {
            if d == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.mechanism == AttnMechanism::Location {
            if self.num_conv_filters == 0 {
                return Err(Error::Config(
                    "location attention needs at least one convolution filter".into(),
                ));
            }
            if self.conv_width.is_multiple_of(2) || self.conv_width == 0 {
                return Err(Error::Config(format!(
                    "conv_width must be odd, got {}",
                    self.conv_width
                )));
            }
        }
        Ok(())
    }
}

/// All decoder parameters. Field names follow the energy computation:
/// `w_s` maps the state, `v_h` maps each frame, `u_proj` maps the
/// convolved previous alignment, `w_e` collapses to a scalar per frame.
#[derive(Clone, Debug)]
pub struct AttnParams {
    pub w_s: ParamId,
    pub v_h: ParamId,
    pub b: ParamId,
    pub w_e: ParamId,
    pub conv: Option<ParamId>,
    pub u_proj: Option<ParamId>,
    pub embed: ParamId,
    pub dec: LstmParams,
    pub gen_w: ParamId,
    pub gen_b: ParamId,
}

impl AttnParams {
    /// Allocate and initialize every tensor under `prefix`. `proj_dim` is
    /// the encoder output width; `k_att` the label count including sos/eos.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        config: &AttnConfig,
        proj_dim: usize,
        k_att: usize,
        range: f64,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        config.validate()?;
        if proj_dim == 0 || k_att < 2 {
            return Err(Error::Config(format!(
                "attention needs proj_dim >= 1 and k_att >= 2, got {proj_dim} and {k_att}"
            )));
        }
        let a = config.attn_dim;
        let mut mk = |name: String, rows: usize, cols: usize, rng: &mut dyn rand::RngCore| {
            store.add(crate::nn::init_uniform(
                &name,
                rows,
                cols,
                -range,
                range,
                rng.gen(),
            )?)
        };
        let w_s = mk(format!("{prefix}.w_s"), config.decoder_cells, a, rng)?;
        let v_h = mk(format!("{prefix}.v_h"), proj_dim, a, rng)?;
        let b = mk(format!("{prefix}.b"), 1, a, rng)?;
        let w_e = mk(format!("{prefix}.w_e"), a, 1, rng)?;
        let (conv, u_proj) = if config.mechanism == AttnMechanism::Location {
            (
                Some(mk(
                    format!("{prefix}.conv"),
                    config.num_conv_filters,
                    config.conv_width,
                    rng,
                )?),
                Some(mk(
                    format!("{prefix}.u_proj"),
                    config.num_conv_filters,
                    a,
                    rng,
                )?),
            )
        } else {
            (None, None)
        };
        let embed = mk(format!("{prefix}.embed"), k_att, config.embed_dim, rng)?;
        let dec = LstmParams::init(
            store,
            &format!("{prefix}.dec"),
            proj_dim + config.embed_dim,
            config.decoder_cells,
            range,
            rng,
        )?;
        let gen_w = store.add(crate::nn::init_uniform(
            &format!("{prefix}.gen.w"),
            proj_dim + config.decoder_cells,
            k_att,
            -range,
            range,
            rng.gen(),
        )?)?;
        let gen_b = store.add(crate::nn::init_uniform(
            &format!("{prefix}.gen.b"),
            1,
            k_att,
            -range,
            range,
            rng.gen(),
        )?)?;
        Ok(AttnParams {
            w_s,
            v_h,
            b,
            w_e,
            conv,
            u_proj,
            embed,
            dec,
            gen_w,
            gen_b,
        })
    }

    pub fn register(&self, tape: &mut Tape, store: &ParamStore) -> AttnNodes {
        AttnNodes {
            w_s: tape.param(store, self.w_s),
            v_h: tape.param(store, self.v_h),
            b: tape.param(store, self.b),
            w_e: tape.param(store, self.w_e),
            conv: self.conv.map(|id| tape.param(store, id)),
            u_proj: self.u_proj.map(|id| tape.param(store, id)),
            embed: tape.param(store, self.embed),
            dec: self.dec.register(tape, store),
            gen_w: tape.param(store, self.gen_w),
            gen_b: tape.param(store, self.gen_b),
        }
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w_s, self.v_h, self.b, self.w_e];
        ids.extend(self.conv);
        ids.extend(self.u_proj);
        ids.push(self.embed);
        ids.extend(self.dec.all_ids());
        ids.push(self.gen_w);
        ids.push(self.gen_b);
        ids
    }

    /// Label count of the Generate head, including sos/eos.
    pub fn k_att(&self, store: &ParamStore) -> usize {
        store.get(self.gen_b).value.cols()
    }

    /// Shared start/end-of-sequence label (the last attention label).
    pub fn sos_eos(&self, store: &ParamStore) -> usize {
        self.k_att(store) - 1
    }

    /// Encoder output width this decoder consumes.
    pub fn proj_dim(&self, store: &ParamStore) -> usize {
        store.get(self.v_h).value.rows()
    }

    pub fn decoder_cells(&self, store: &ParamStore) -> usize {
        store.get(self.dec.b[0]).value.cols()
    }

    /// Zero decoder state, zero context, uniform alignment over `l` frames:
    /// the inputs of the first decoding step.
    pub fn start(&self, store: &ParamStore, l: usize) -> (LstmState, Tensor2, Tensor2) {
        (
            LstmState::zeros(self.decoder_cells(store)),
            Tensor2::zeros(1, self.proj_dim(store)),
            initial_alignment(l),
        )
    }
}

/// On-tape handles for the decoder parameters.
#[derive(Clone, Copy, Debug)]
pub struct AttnNodes {
    pub w_s: ValueId,
    pub v_h: ValueId,
    pub b: ValueId,
    pub w_e: ValueId,
    pub conv: Option<ValueId>,
    pub u_proj: Option<ValueId>,
    pub embed: ValueId,
    pub dec: LstmGateNodes,
    pub gen_w: ValueId,
    pub gen_b: ValueId,
}

/// Per-utterance nodes shared by every decoding step: the stacked encoder
/// frames (L×proj_dim) and their projection into the energy space (L×attn_dim).
#[derive(Clone, Copy, Debug)]
pub struct EncNodes {
    pub stack: ValueId,
    pub hv: ValueId,
    pub len: usize,
}

/// Stack the encoded frames and project them once for reuse by all steps.
pub fn prepare_encoder_nodes(
    tape: &mut Tape,
    nodes: &AttnNodes,
    h_frames: &[ValueId],
) -> Result<EncNodes> {
    let stack = tape.stack_rows(h_frames)?;
    let hv = tape.matmul(stack, nodes.v_h)?;
    Ok(EncNodes {
        stack,
        hv,
        len: h_frames.len(),
    })
}

/// Uniform attention over `l` frames.
pub fn initial_alignment(l: usize) -> Tensor2 {
    Tensor2::filled(1, l, 1.0 / l as f64)
}

fn energy_nodes(
    tape: &mut Tape,
    config: &AttnConfig,
    nodes: &AttnNodes,
    enc: &EncNodes,
    s_hidden: ValueId,
    a_prev: Option<ValueId>,
) -> Result<ValueId> {
    let sw = tape.matmul(s_hidden, nodes.w_s)?;
    let shifted = tape.add_row(enc.hv, sw)?;
    let mut pre = tape.add_row(shifted, nodes.b)?;
    if config.mechanism == AttnMechanism::Location {
        let a = a_prev.ok_or_else(|| {
            Error::State("location attention needs the previous alignment".into())
        })?;
        let conv = nodes.conv.ok_or_else(|| {
            Error::State("location attention without convolution parameters".into())
        })?;
        let u_proj = nodes.u_proj.ok_or_else(|| {
            Error::State("location attention without projection parameters".into())
        })?;
        let f = tape.conv1d_time(a, conv)?;
        let fu = tape.matmul(f, u_proj)?;
        pre = tape.add(pre, fu)?;
    }
    let act = tape.tanh(pre);
    let col = tape.matmul(act, nodes.w_e)?;
    Ok(tape.transpose(col))
}

/// Unnormalized attention scores of the decoder state against every frame.
pub fn energy(
    config: &AttnConfig,
    store: &ParamStore,
    params: &AttnParams,
    s_prev: &LstmState,
    h: &EncoderOutput,
    a_prev: Option<&Tensor2>,
) -> Result<Tensor2> {
    config.validate()?;
    let mut tape = Tape::new();
    let nodes = params.register(&mut tape, store);
    let frames: Vec<ValueId> = h.h.iter().map(|f| tape.constant(f.clone())).collect();
    let enc = prepare_encoder_nodes(&mut tape, &nodes, &frames)?;
    let s = tape.constant(s_prev.hidden.clone());
    let a = a_prev.map(|a| tape.constant(a.clone()));
    let e = energy_nodes(&mut tape, config, &nodes, &enc, s, a)?;
    Ok(tape.value(e).clone())
}

/// Sharpened softmax of the energies.
pub fn align(e: &Tensor2, gamma: f64) -> Result<Tensor2> {
    crate::nn::softmax(e, gamma)
}

/// Alignment-weighted average of the encoded frames.
pub fn context(a_u: &Tensor2, h: &EncoderOutput) -> Result<Tensor2> {
    if a_u.rows() != 1 || a_u.cols() != h.len() {
        return Err(Error::dim(
            "context",
            format!(
                "alignment {}x{} over {} frames",
                a_u.rows(),
                a_u.cols(),
                h.len()
            ),
        ));
    }
    crate::numgrad::matmul(a_u, &h.stacked())
}

/// On-tape results of one decoding step.
#[derive(Clone, Copy, Debug)]
pub struct StepNodes {
    pub a: ValueId,
    pub c: ValueId,
    pub s: LstmNodes,
    pub logits: ValueId,
}

/// One differentiable decoding step; see the module docs for the carried
/// state convention.
#[allow(clippy::too_many_arguments)]
pub fn decoder_step_nodes(
    tape: &mut Tape,
    config: &AttnConfig,
    nodes: &AttnNodes,
    enc: &EncNodes,
    s_prev: &LstmNodes,
    c_prev: ValueId,
    a_prev: ValueId,
    y_prev: usize,
) -> Result<StepNodes> {
    let k_att = tape.value(nodes.gen_b).cols();
    if y_prev >= k_att {
        return Err(Error::Argument(format!(
            "label {y_prev} is outside the decoder vocabulary of {k_att} \
             (the blank symbol is not a decoder input)"
        )));
    }
    let one_hot = tape.constant(Tensor2::one_hot_row(k_att, y_prev));
    let emb = tape.matmul(one_hot, nodes.embed)?;
    let x = tape.concat_cols(c_prev, emb)?;
    let s = lstm_step_nodes(tape, &nodes.dec, x, s_prev)?;

    let e = energy_nodes(tape, config, nodes, enc, s.hidden, Some(a_prev))?;
    let sharpened = tape.scale(e, config.gamma);
    let a = tape.softmax_rows(sharpened);
    let c = tape.matmul(a, enc.stack)?;

    let cs = tape.concat_cols(c, s.hidden)?;
    let scores = tape.matmul(cs, nodes.gen_w)?;
    let logits = tape.add(scores, nodes.gen_b)?;
    Ok(StepNodes { a, c, s, logits })
}

/// Snapshot of one decoding step: alignment, context, carried state, and
/// next-label logits.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnStep {
    pub a_u: Tensor2,
    pub c_u: Tensor2,
    pub s_u: LstmState,
    pub logits: Tensor2,
}

/// One plain decoding step. The caller threads `s_u`, `c_u`, and `a_u` of
/// the returned step into the next call, together with the label it chose.
#[allow(clippy::too_many_arguments)]
pub fn decoder_step(
    config: &AttnConfig,
    store: &ParamStore,
    params: &AttnParams,
    s_prev: &LstmState,
    c_prev: &Tensor2,
    a_prev: &Tensor2,
    h: &EncoderOutput,
    y_prev: usize,
) -> Result<AttnStep> {
    config.validate()?;
    let mut tape = Tape::new();
    let nodes = params.register(&mut tape, store);
    let frames: Vec<ValueId> = h.h.iter().map(|f| tape.constant(f.clone())).collect();
    let enc = prepare_encoder_nodes(&mut tape, &nodes, &frames)?;
    let s = LstmNodes {
        hidden: tape.constant(s_prev.hidden.clone()),
        cell: tape.constant(s_prev.cell.clone()),
    };
    let c = tape.constant(c_prev.clone());
    let a = tape.constant(a_prev.clone());
    let step = decoder_step_nodes(&mut tape, config, &nodes, &enc, &s, c, a, y_prev)?;
    Ok(AttnStep {
        a_u: tape.value(step.a).clone(),
        c_u: tape.value(step.c).clone(),
        s_u: LstmState {
            hidden: tape.value(step.s.hidden).clone(),
            cell: tape.value(step.s.cell).clone(),
        },
        logits: tape.value(step.logits).clone(),
    })
}

/// Alignment history of one decoded utterance: row u is the attention the
/// decoder paid across all L frames while emitting label u.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnTrace {
    pub alignment: Tensor2,
}

impl AttnTrace {
    /// Stack per-step alignment rows, checking each is a distribution.
    pub fn new(rows: &[Tensor2]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Argument("empty alignment trace".into()));
        }
        for (u, row) in rows.iter().enumerate() {
            if row.rows() != 1 || row.cols() != rows[0].cols() {
                return Err(Error::dim(
                    "AttnTrace",
                    format!("step {u} alignment is {}x{}", row.rows(), row.cols()),
                ));
            }
            let sum: f64 = row.row(0).iter().sum();
            if (sum - 1.0).abs() > ALIGN_SUM_TOL || row.row(0).iter().any(|&v| v < 0.0) {
                return Err(Error::Argument(format!(
                    "step {u} alignment is not a distribution (sum {sum})"
                )));
            }
        }
        let alignment = Tensor2::from_fn(rows.len(), rows[0].cols(), |r, c| rows[r].get(0, c));
        Ok(AttnTrace { alignment })
    }

    pub fn num_steps(&self) -> usize {
        self.alignment.rows()
    }

    pub fn num_frames(&self) -> usize {
        self.alignment.cols()
    }

    /// Kendall tau-a between step order and attended-frame order: 1 when
    /// the peak frame strictly advances with every step, -1 when it
    /// strictly retreats, with tied peaks contributing zero. Traces with
    /// fewer than two steps count as fully monotone.
    pub fn monotonicity(&self) -> f64 {
        let n = self.num_steps();
        if n < 2 {
            return 1.0;
        }
        let peaks: Vec<usize> = (0..n).map(|r| self.alignment.argmax_row(r)).collect();
        let mut net = 0i64;
        for i in 0..n {
            for j in i + 1..n {
                net += match peaks[j].cmp(&peaks[i]) {
                    std::cmp::Ordering::Greater => 1,
                    std::cmp::Ordering::Less => -1,
                    std::cmp::Ordering::Equal => 0,
                };
            }
        }
        net as f64 / (n * (n - 1) / 2) as f64
    }

    /// One CSV line per step, frames as columns.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.alignment.rows() {
            let cells: Vec<String> = self
                .alignment
                .row(r)
                .iter()
                .map(|v| format!("{v:.8}"))
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

fn validate_target(y_star: &LabelSeq, k_att: usize) -> Result<()> {
    if y_star.role() != LabelRole::RawTarget {
        return Err(Error::Argument(format!(
            "attention targets must be raw labels, got {:?}",
            y_star.role()
        )));
    }
    let labels = y_star.labels();
    if labels.is_empty() {
        return Err(Error::Argument("attention target is empty".into()));
    }
    let eos = k_att - 1;
    if *labels.last().unwrap() != eos {
        return Err(Error::Argument(format!(
            "attention target must end with the eos label {eos}"
        )));
    }
    for (i, &l) in labels.iter().enumerate() {
        if l >= k_att {
            return Err(Error::Argument(format!(
                "label {l} at position {i} is outside the decoder vocabulary"
            )));
        }
        if l == eos && i + 1 != labels.len() {
            return Err(Error::Argument(format!(
                "eos label inside the target at position {i}"
            )));
        }
    }
    Ok(())
}

/// Teacher-forced cross-entropy of `y_star` (which ends with eos) on the
/// tape; also returns the alignment trace observed along the way.
pub fn attention_loss_nodes(
    tape: &mut Tape,
    config: &AttnConfig,
    nodes: &AttnNodes,
    h_frames: &[ValueId],
    y_star: &LabelSeq,
) -> Result<(ValueId, AttnTrace)> {
    config.validate()?;
    let k_att = tape.value(nodes.gen_b).cols();
    validate_target(y_star, k_att)?;
    let labels = y_star.labels();
    let sos = k_att - 1;
    let enc = prepare_encoder_nodes(tape, nodes, h_frames)?;
    let proj_dim = tape.value(enc.stack).cols();
    let cells = tape.value(nodes.dec.b[0]).cols();

    let mut s = LstmNodes {
        hidden: tape.constant(Tensor2::zeros(1, cells)),
        cell: tape.constant(Tensor2::zeros(1, cells)),
    };
    let mut c = tape.constant(Tensor2::zeros(1, proj_dim));
    let mut a = tape.constant(initial_alignment(enc.len));

    let mut picked = Vec::with_capacity(labels.len());
    let mut rows = Vec::with_capacity(labels.len());
    for (u, &y_u) in labels.iter().enumerate() {
        let y_prev = if u == 0 { sos } else { labels[u - 1] };
        let step = decoder_step_nodes(tape, config, nodes, &enc, &s, c, a, y_prev)?;
        let logp = tape.log_softmax_rows(step.logits);
        picked.push(tape.pick(logp, 0, y_u)?);
        rows.push(tape.value(step.a).clone());
        s = step.s;
        c = step.c;
        a = step.a;
    }
    let stacked = tape.stack_rows(&picked)?;
    let total = tape.sum(stacked);
    let loss = tape.scale(total, -1.0);
    Ok((loss, AttnTrace::new(&rows)?))
}

/// Teacher-forced loss of one utterance, plus its alignment trace.
pub fn attention_loss(
    config: &AttnConfig,
    store: &ParamStore,
    params: &AttnParams,
    h: &EncoderOutput,
    y_star: &LabelSeq,
) -> Result<(f64, AttnTrace)> {
    let mut tape = Tape::new();
    let nodes = params.register(&mut tape, store);
    let frames: Vec<ValueId> = h.h.iter().map(|f| tape.constant(f.clone())).collect();
    let (loss, trace) = attention_loss_nodes(&mut tape, config, &nodes, &frames, y_star)?;
    Ok((tape.value(loss).get(0, 0), trace))
}

/// Greedy labels under teacher forcing: the argmax prediction at every
/// position of `y_star`, for accuracy-style validation metrics.
pub fn teacher_forced_argmax(
    config: &AttnConfig,
    store: &ParamStore,
    params: &AttnParams,
    h: &EncoderOutput,
    y_star: &LabelSeq,
) -> Result<Vec<usize>> {
    config.validate()?;
    let k_att = params.k_att(store);
    validate_target(y_star, k_att)?;
    let labels = y_star.labels();
    let sos = k_att - 1;
    let (mut s, mut c, mut a) = params.start(store, h.len());
    let mut out = Vec::with_capacity(labels.len());
    for (u, &_y_u) in labels.iter().enumerate() {
        let y_prev = if u == 0 { sos } else { labels[u - 1] };
        let step = decoder_step(config, store, params, &s, &c, &a, h, y_prev)?;
        out.push(step.logits.argmax_row(0));
        s = step.s_u;
        c = step.c_u;
        a = step.a_u;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn content_config() -> AttnConfig {
        AttnConfig {
            mechanism: AttnMechanism::Content,
            gamma: 2.0,
            num_conv_filters: 0,
            conv_width: 0,
            attn_dim: 3,
            decoder_cells: 3,
            embed_dim: 2,
        }
    }

    fn location_config() -> AttnConfig {
        AttnConfig {
            mechanism: AttnMechanism::Location,
            num_conv_filters: 2,
            conv_width: 3,
            ..content_config()
        }
    }

    fn random_h(l: usize, p: usize, seed: u64) -> EncoderOutput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EncoderOutput {
            h: (0..l)
                .map(|_| Tensor2::from_fn(1, p, |_, _| rng.gen_range(-1.0..1.0)))
                .collect(),
        }
    }

    fn init(config: &AttnConfig, proj: usize, k: usize, seed: u64) -> (ParamStore, AttnParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = AttnParams::init(&mut store, "att", config, proj, k, 0.1, &mut rng).unwrap();
        (store, params)
    }

    fn zero_all(store: &mut ParamStore, params: &AttnParams) {
        for id in params.all_ids() {
            let (r, c) = store.get(id).value.shape();
            store.get_mut(id).value = Tensor2::zeros(r, c);
        }
    }

    #[test]
    fn config_validation_covers_both_mechanisms() {
        assert!(content_config().validate().is_ok());
        assert!(location_config().validate().is_ok());
        let mut bad = content_config();
        bad.gamma = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = location_config();
        bad.conv_width = 4;
        assert!(bad.validate().is_err());
        bad.num_conv_filters = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn align_is_a_sharpened_shift_invariant_softmax() {
        let flat = align(&Tensor2::filled(1, 4, 0.7), 2.0).unwrap();
        for &v in flat.row(0) {
            assert!((v - 0.25).abs() <= 1e-12);
        }
        let e = Tensor2::from_vec(1, 4, vec![0.1, 0.9, 0.3, 0.2]).unwrap();
        let sharp = align(&e, 100.0).unwrap();
        assert!(sharp.get(0, 1) >= 1.0 - 1e-6);
        let shifted = align(&e.map(|v| v + 5.0), 2.0).unwrap();
        assert!(align(&e, 2.0).unwrap().max_abs_diff(&shifted) <= 1e-12);
        assert!(align(&e, 0.0).is_err());
    }

    #[test]
    fn context_selects_averages_and_matches_the_loop_oracle() {
        let h = random_h(4, 3, 0);
        let pick = context(&Tensor2::one_hot_row(4, 2), &h).unwrap();
        assert_eq!(pick, h.h[2]);

        let uniform = context(&initial_alignment(4), &h).unwrap();
        for c in 0..3 {
            let mean: f64 = (0..4).map(|l| h.h[l].get(0, c)).sum::<f64>() / 4.0;
            assert!((uniform.get(0, c) - mean).abs() <= 1e-12);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let weights: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let a = Tensor2::row_vector(&weights.iter().map(|w| w / total).collect::<Vec<_>>());
        let got = context(&a, &h).unwrap();
        for c in 0..3 {
            let expect: f64 = (0..4).map(|l| a.get(0, l) * h.h[l].get(0, c)).sum();
            assert!((got.get(0, c) - expect).abs() <= 1e-12);
        }

        assert!(context(&Tensor2::one_hot_row(3, 0), &h).is_err());
    }

    #[test]
    fn zero_parameters_give_zero_energies() {
        let config = location_config();
        let (mut store, params) = init(&config, 3, 4, 2);
        zero_all(&mut store, &params);
        let h = random_h(5, 3, 3);
        let e = energy(
            &config,
            &store,
            &params,
            &LstmState::zeros(3),
            &h,
            Some(&initial_alignment(5)),
        )
        .unwrap();
        assert_eq!(e, Tensor2::zeros(1, 5));
    }

    #[test]
    fn content_energies_without_frame_projection_are_constant() {
        let config = content_config();
        let (mut store, params) = init(&config, 3, 4, 4);
        store.get_mut(params.v_h).value = Tensor2::zeros(3, 3);
        let h = random_h(5, 3, 5);
        let mut state = LstmState::zeros(3);
        state.hidden = Tensor2::from_vec(1, 3, vec![0.4, -0.2, 0.9]).unwrap();
        let e = energy(&config, &store, &params, &state, &h, None).unwrap();
        for l in 1..5 {
            assert!((e.get(0, l) - e.get(0, 0)).abs() <= 1e-15);
        }
    }

    #[test]
    fn location_with_zero_alignment_projection_equals_content() {
        let (mut store, params) = init(&location_config(), 3, 4, 6);
        store.get_mut(params.u_proj.unwrap()).value = Tensor2::zeros(2, 3);
        let h = random_h(5, 3, 7);
        let mut state = LstmState::zeros(3);
        state.hidden = Tensor2::from_vec(1, 3, vec![0.4, -0.2, 0.9]).unwrap();
        let a_prev = align(
            &Tensor2::from_vec(1, 5, vec![0.3, 0.1, 0.9, 0.2, 0.5]).unwrap(),
            2.0,
        )
        .unwrap();
        let with_loc = energy(
            &location_config(),
            &store,
            &params,
            &state,
            &h,
            Some(&a_prev),
        )
        .unwrap();
        let content_only = energy(&content_config(), &store, &params, &state, &h, None).unwrap();
        assert_eq!(with_loc, content_only);
    }

    #[test]
    fn location_mode_requires_the_previous_alignment() {
        let config = location_config();
        let (store, params) = init(&config, 3, 4, 8);
        let h = random_h(4, 3, 9);
        let err = energy(&config, &store, &params, &LstmState::zeros(3), &h, None).unwrap_err();
        assert!(matches!(err, Error::State(_)), "{err:?}");
    }

    #[test]
    fn first_decoder_step_has_normalized_alignment_and_full_shapes() {
        let config = location_config();
        let (store, params) = init(&config, 3, 5, 10);
        let h = random_h(6, 3, 11);
        let (s0, c0, a0) = params.start(&store, h.len());
        let sos = params.sos_eos(&store);
        let step = decoder_step(&config, &store, &params, &s0, &c0, &a0, &h, sos).unwrap();
        assert_eq!(step.a_u.shape(), (1, 6));
        assert_eq!(step.c_u.shape(), (1, 3));
        assert_eq!(step.logits.shape(), (1, 5));
        assert_eq!(step.s_u.width(), 3);
        let sum: f64 = step.a_u.row(0).iter().sum();
        assert!((sum - 1.0).abs() <= 1e-10);
        assert!(step.a_u.row(0).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn labels_outside_the_decoder_vocabulary_are_rejected() {
        let config = content_config();
        let (store, params) = init(&config, 3, 5, 12);
        let h = random_h(4, 3, 13);
        let (s0, c0, a0) = params.start(&store, h.len());
        // Index 5 is the blank slot in the full vocabulary layout.
        let err = decoder_step(&config, &store, &params, &s0, &c0, &a0, &h, 5).unwrap_err();
        assert!(matches!(err, Error::Argument(_)), "{err:?}");
    }

    #[test]
    fn chained_decoder_steps_pass_fd_gradient_checks() {
        for config in [content_config(), location_config()] {
            let (mut store, params) = init(&config, 2, 4, 14);
            let h = random_h(3, 2, 15);
            let ids = params.all_ids();
            let report = crate::numgrad::check_gradients(
                |tape, store| {
                    let nodes = params.register(tape, store);
                    let frames: Vec<ValueId> =
                        h.h.iter().map(|f| tape.constant(f.clone())).collect();
                    let (loss, _) = attention_loss_nodes(
                        tape,
                        &config,
                        &nodes,
                        &frames,
                        &LabelSeq::raw(vec![0, 2, 3]),
                    )?;
                    Ok(loss)
                },
                &mut store,
                &ids,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(
                report.passed(),
                "{}: {}",
                config.mechanism,
                report.summary()
            );
        }
    }

    #[test]
    fn zero_parameters_score_every_label_uniformly() {
        let config = content_config();
        let (mut store, params) = init(&config, 3, 4, 16);
        zero_all(&mut store, &params);
        let h = random_h(5, 3, 17);
        let y = LabelSeq::raw(vec![0, 1, 2, 3]);
        let (loss, trace) = attention_loss(&config, &store, &params, &h, &y).unwrap();
        assert!((loss - 4.0 * 4.0f64.ln()).abs() <= 1e-12);
        assert_eq!(trace.num_steps(), 4);
        assert_eq!(trace.num_frames(), 5);
    }

    #[test]
    fn a_dominant_eos_bias_makes_a_one_step_target_free() {
        let config = content_config();
        let (mut store, params) = init(&config, 3, 4, 18);
        zero_all(&mut store, &params);
        let mut bias = Tensor2::zeros(1, 4);
        bias.set(0, 3, 50.0);
        store.get_mut(params.gen_b).value = bias;
        let h = random_h(4, 3, 19);
        let (loss, _) =
            attention_loss(&config, &store, &params, &h, &LabelSeq::raw(vec![3])).unwrap();
        assert!(loss.abs() <= 1e-12, "loss {loss}");
    }

    #[test]
    fn malformed_targets_are_rejected() {
        let config = content_config();
        let (store, params) = init(&config, 3, 4, 20);
        let h = random_h(4, 3, 21);
        for bad in [
            LabelSeq::raw(vec![]),
            LabelSeq::raw(vec![0, 1]),
            LabelSeq::raw(vec![3, 0, 3]),
            LabelSeq::raw(vec![0, 7, 3]),
        ] {
            let err = attention_loss(&config, &store, &params, &h, &bad).unwrap_err();
            assert!(matches!(err, Error::Argument(_)), "{bad:?} gave {err:?}");
        }
    }

    #[test]
    fn gradient_descent_overfits_one_utterance_monotonically() {
        let config = location_config();
        let (mut store, params) = init(&config, 2, 4, 22);
        let h = random_h(3, 2, 23);
        let y = LabelSeq::raw(vec![0, 1, 3]);
        let mut last = f64::INFINITY;
        for step in 0..10 {
            store.zero_grads();
            let mut tape = Tape::new();
            let nodes = params.register(&mut tape, &store);
            let frames: Vec<ValueId> = h.h.iter().map(|f| tape.constant(f.clone())).collect();
            let (loss, _) = attention_loss_nodes(&mut tape, &config, &nodes, &frames, &y).unwrap();
            let value = tape.value(loss).get(0, 0);
            assert!(
                value < last,
                "step {step}: {value} did not improve on {last}"
            );
            last = value;
            let grads = tape.backward(loss).unwrap();
            grads.accumulate_into(&mut store).unwrap();
            for id in params.all_ids() {
                let update = store.get(id).grad.scale(-0.2);
                store.get_mut(id).value.add_assign(&update).unwrap();
            }
        }
    }

    #[test]
    fn teacher_forced_argmax_matches_the_loss_path_predictions() {
        let config = content_config();
        let (store, params) = init(&config, 3, 4, 24);
        let h = random_h(5, 3, 25);
        let y = LabelSeq::raw(vec![1, 0, 2, 3]);
        let preds = teacher_forced_argmax(&config, &store, &params, &h, &y).unwrap();
        assert_eq!(preds.len(), 4);
        assert!(preds.iter().all(|&p| p < 4));
    }

    #[test]
    fn trace_monotonicity_scores_ordered_and_reversed_peaks() {
        let rows: Vec<Tensor2> = (0..4).map(|l| Tensor2::one_hot_row(5, l)).collect();
        let forward = AttnTrace::new(&rows).unwrap();
        assert_eq!(forward.monotonicity(), 1.0);

        let rev: Vec<Tensor2> = rows.iter().rev().cloned().collect();
        assert_eq!(AttnTrace::new(&rev).unwrap().monotonicity(), -1.0);

        let single = AttnTrace::new(&rows[..1]).unwrap();
        assert_eq!(single.monotonicity(), 1.0);

        let tied = AttnTrace::new(&[rows[2].clone(), rows[2].clone()]).unwrap();
        assert_eq!(tied.monotonicity(), 0.0);
    }

    #[test]
    fn trace_rejects_non_distribution_rows_and_prints_csv() {
        assert!(AttnTrace::new(&[]).is_err());
        assert!(AttnTrace::new(&[Tensor2::filled(1, 3, 0.5)]).is_err());
        let trace = AttnTrace::new(&[Tensor2::one_hot_row(2, 1)]).unwrap();
        assert_eq!(trace.to_csv(), "0.00000000,1.00000000\n");
    }
}
