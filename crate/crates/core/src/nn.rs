//! Neural primitives: uniform initialization, LSTM cell, bidirectional
//! layer, centered 1-d convolution, and softmax. Each primitive exists in
//! two forms: an on-tape builder used inside larger differentiable graphs,
//! and a plain snapshot function for inference and tests.

use std::fmt;

use rand::distributions::uniform::SampleUniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numgrad::{Param, ParamId, ParamStore, Tape, Tensor2, ValueId};

/// Hidden/cell pair of one LSTM direction, each 1×H.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub hidden: Tensor2,
    pub cell: Tensor2,
}

impl LstmState {
    /// Zero state of width `h`.
    pub fn zeros(h: usize) -> Self {
        LstmState {
            hidden: Tensor2::zeros(1, h),
            cell: Tensor2::zeros(1, h),
        }
    }

    pub fn width(&self) -> usize {
        self.hidden.cols()
    }
}

/// On-tape LSTM state.
#[derive(Clone, Copy, Debug)]
pub struct LstmNodes {
    pub hidden: ValueId,
    pub cell: ValueId,
}

/// Kind of a network layer, for configuration summaries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Linear,
    Lstm,
    Blstm,
    Conv1d,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            LayerKind::Linear => "linear",
            LayerKind::Lstm => "lstm",
            LayerKind::Blstm => "blstm",
            LayerKind::Conv1d => "conv1d",
        };
        write!(f, "{name}")
    }
}

/// Shape summary of one layer in a stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(input_dim: usize, output_dim: usize, kind: LayerKind) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::Config(format!(
                "layer dimensions must be at least 1, got {input_dim} -> {output_dim}"
            )));
        }
        Ok(LayerSpec {
            input_dim,
            output_dim,
            kind,
        })
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} -> {}", self.kind, self.input_dim, self.output_dim)
    }
}

/// Tensor with i.i.d. uniform entries from `[lo, hi]`.
pub fn uniform_tensor(
    rng: &mut impl Rng,
    rows: usize,
    cols: usize,
    lo: f64,
    hi: f64,
) -> Result<Tensor2>
where
    f64: SampleUniform,
{
    if lo >= hi {
        return Err(Error::Argument(format!(
            "uniform range must have lo < hi, got [{lo}, {hi}]"
        )));
    }
    let mut t = Tensor2::zeros(rows, cols);
    for v in t.data_mut() {
        *v = rng.gen_range(lo..=hi);
    }
    Ok(t)
}

/// Named parameter with i.i.d. uniform entries, deterministic in the seed.
pub fn init_uniform(
    name: &str,
    rows: usize,
    cols: usize,
    lo: f64,
    hi: f64,
    seed: u64,
) -> Result<Param> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Param::new(
        name,
        uniform_tensor(&mut rng, rows, cols, lo, hi)?,
    ))
}

/// Gate order used throughout: input, forget, candidate, output.
const GATE_NAMES: [&str; 4] = ["i", "f", "g", "o"];

/// LSTM cell parameters: per-gate input weights (D×H), recurrent weights
/// (H×H), and biases (1×H). No peepholes.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub w_x: [ParamId; 4],
    pub w_h: [ParamId; 4],
    pub b: [ParamId; 4],
}

impl LstmParams {
    /// Allocate and initialize all twelve tensors under `prefix`.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        range: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut w_x = Vec::new();
        let mut w_h = Vec::new();
        let mut b = Vec::new();
        for gate in GATE_NAMES {
            w_x.push(store.add(Param::new(
                format!("{prefix}.wx{gate}"),
                uniform_tensor(rng, input_dim, hidden, -range, range)?,
            ))?);
            w_h.push(store.add(Param::new(
                format!("{prefix}.wh{gate}"),
                uniform_tensor(rng, hidden, hidden, -range, range)?,
            ))?);
            b.push(store.add(Param::new(
                format!("{prefix}.b{gate}"),
                uniform_tensor(rng, 1, hidden, -range, range)?,
            ))?);
        }
        Ok(LstmParams {
            w_x: w_x.try_into().unwrap(),
            w_h: w_h.try_into().unwrap(),
            b: b.try_into().unwrap(),
        })
    }

    /// Register all tensors on a tape.
    pub fn register(&self, tape: &mut Tape, store: &ParamStore) -> LstmGateNodes {
        LstmGateNodes {
            w_x: self.w_x.map(|id| tape.param(store, id)),
            w_h: self.w_h.map(|id| tape.param(store, id)),
            b: self.b.map(|id| tape.param(store, id)),
        }
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::with_capacity(12);
        ids.extend_from_slice(&self.w_x);
        ids.extend_from_slice(&self.w_h);
        ids.extend_from_slice(&self.b);
        ids
    }

    pub fn hidden_dim(&self, store: &ParamStore) -> usize {
        store.get(self.b[0]).value.cols()
    }
}

/// On-tape handles for one LSTM cell's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LstmGateNodes {
    pub w_x: [ValueId; 4],
    pub w_h: [ValueId; 4],
    pub b: [ValueId; 4],
}

/// One gated update on the tape: standard LSTM without peepholes.
pub fn lstm_step_nodes(
    tape: &mut Tape,
    gates: &LstmGateNodes,
    x: ValueId,
    state: &LstmNodes,
) -> Result<LstmNodes> {
    let mut pre = [x; 4];
    for (k, slot) in pre.iter_mut().enumerate() {
        let xw = tape.matmul(x, gates.w_x[k])?;
        let hw = tape.matmul(state.hidden, gates.w_h[k])?;
        let sum = tape.add(xw, hw)?;
        *slot = tape.add(sum, gates.b[k])?;
    }
    let i = tape.sigmoid(pre[0]);
    let f = tape.sigmoid(pre[1]);
    let g = tape.tanh(pre[2]);
    let o = tape.sigmoid(pre[3]);
    let keep = tape.mul(f, state.cell)?;
    let write = tape.mul(i, g)?;
    let cell = tape.add(keep, write)?;
    let cell_act = tape.tanh(cell);
    let hidden = tape.mul(o, cell_act)?;
    Ok(LstmNodes { hidden, cell })
}

/// One gated update on plain tensors; the returned state is fresh and the
/// old state is untouched.
pub fn lstm_step(
    store: &ParamStore,
    params: &LstmParams,
    input: &Tensor2,
    state: &LstmState,
) -> Result<LstmState> {
    let mut tape = Tape::new();
    let gates = params.register(&mut tape, store);
    let x = tape.constant(input.clone());
    let nodes = LstmNodes {
        hidden: tape.constant(state.hidden.clone()),
        cell: tape.constant(state.cell.clone()),
    };
    let next = lstm_step_nodes(&mut tape, &gates, x, &nodes)?;
    Ok(LstmState {
        hidden: tape.value(next.hidden).clone(),
        cell: tape.value(next.cell).clone(),
    })
}

/// Forward and backward LSTM over the same input sequence.
#[derive(Clone, Debug)]
pub struct BlstmParams {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

impl BlstmParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        range: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(BlstmParams {
            fwd: LstmParams::init(
                store,
                &format!("{prefix}.fwd"),
                input_dim,
                hidden,
                range,
                rng,
            )?,
            bwd: LstmParams::init(
                store,
                &format!("{prefix}.bwd"),
                input_dim,
                hidden,
                range,
                rng,
            )?,
        })
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids = self.fwd.all_ids();
        ids.extend(self.bwd.all_ids());
        ids
    }
}

/// Bidirectional scan on the tape: at each step the forward state is
/// concatenated with the backward state for the same position, so every
/// output is 1×2H.
pub fn blstm_layer_nodes(
    tape: &mut Tape,
    store: &ParamStore,
    params: &BlstmParams,
    inputs: &[ValueId],
) -> Result<Vec<ValueId>> {
    if inputs.is_empty() {
        return Err(Error::Argument("blstm_layer on an empty sequence".into()));
    }
    let fwd_gates = params.fwd.register(tape, store);
    let bwd_gates = params.bwd.register(tape, store);
    let h = params.fwd.hidden_dim(store);

    let mut fwd = Vec::with_capacity(inputs.len());
    let mut state = LstmNodes {
        hidden: tape.constant(Tensor2::zeros(1, h)),
        cell: tape.constant(Tensor2::zeros(1, h)),
    };
    for &x in inputs {
        state = lstm_step_nodes(tape, &fwd_gates, x, &state)?;
        fwd.push(state.hidden);
    }

    let mut bwd = vec![None; inputs.len()];
    let mut state = LstmNodes {
        hidden: tape.constant(Tensor2::zeros(1, h)),
        cell: tape.constant(Tensor2::zeros(1, h)),
    };
    for (t, &x) in inputs.iter().enumerate().rev() {
        state = lstm_step_nodes(tape, &bwd_gates, x, &state)?;
        bwd[t] = Some(state.hidden);
    }

    let mut out = Vec::with_capacity(inputs.len());
    for (f, b) in fwd.into_iter().zip(bwd) {
        out.push(tape.concat_cols(f, b.unwrap())?);
    }
    Ok(out)
}

/// Bidirectional scan on plain tensors.
pub fn blstm_layer(
    store: &ParamStore,
    params: &BlstmParams,
    inputs: &[Tensor2],
) -> Result<Vec<Tensor2>> {
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = blstm_layer_nodes(&mut tape, store, params, &ids)?;
    Ok(out.into_iter().map(|id| tape.value(id).clone()).collect())
}

/// Centered same-length convolution of each filter row over a 1×L signal;
/// output is L×num_filters. Filter width must be odd so the window centers.
pub fn conv1d_time(filters: &Tensor2, signal: &Tensor2) -> Result<Tensor2> {
    crate::numgrad::conv1d_kernel(signal, filters)
}

/// Max-shifted softmax of each row of `logits`, sharpened by `scale`.
pub fn softmax(logits: &Tensor2, scale: f64) -> Result<Tensor2> {
    if scale <= 0.0 {
        return Err(Error::Argument(format!(
            "softmax scale must be positive, got {scale}"
        )));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(logits.scale(scale));
    let y = tape.softmax_rows(x);
    Ok(tape.value(y).clone())
}

/// Max-shifted log-softmax of each row.
pub fn log_softmax(logits: &Tensor2) -> Result<Tensor2> {
    if !logits.all_finite() {
        return Err(Error::NonFinite("log_softmax input".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone());
    let y = tape.log_softmax_rows(x);
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn init_uniform_rejects_degenerate_range() {
        assert!(init_uniform("w", 2, 2, 0.1, 0.1, 0).is_err());
        assert!(init_uniform("w", 2, 2, 0.2, 0.1, 0).is_err());
    }

    #[test]
    fn init_uniform_default_range_and_determinism() {
        // The default initialization range used across the models.
        let a = init_uniform("w", 4, 4, -0.1, 0.1, 7).unwrap();
        let b = init_uniform("w", 4, 4, -0.1, 0.1, 7).unwrap();
        assert_eq!(a.value, b.value);
        assert!(a.value.data().iter().all(|&v| (-0.1..=0.1).contains(&v)));
    }

    #[test]
    fn init_uniform_sample_mean_is_centered() {
        // Mean of n uniform draws is (lo+hi)/2 with standard error
        // (hi-lo)/sqrt(12 n); a seeded draw must land within 3 sigma.
        let (lo, hi) = (-0.3, 0.5);
        let n = 1_000_000usize;
        let p = init_uniform("w", 1000, 1000, lo, hi, 11).unwrap();
        let mean = p.value.data().iter().sum::<f64>() / n as f64;
        let sigma = (hi - lo) / (12.0f64 * n as f64).sqrt();
        assert!((mean - (lo + hi) / 2.0).abs() <= 3.0 * sigma);
    }

    fn zero_lstm(store: &mut ParamStore, d: usize, h: usize) -> LstmParams {
        let mut rng = rng(0);
        let p = LstmParams::init(store, "cell", d, h, 0.1, &mut rng).unwrap();
        for id in p.all_ids() {
            let shape = store.get(id).value.shape();
            store.get_mut(id).value = Tensor2::zeros(shape.0, shape.1);
        }
        p
    }

    #[test]
    fn zero_network_zero_state_stays_zero() {
        let mut store = ParamStore::new();
        let p = zero_lstm(&mut store, 3, 4);
        let out = lstm_step(
            &store,
            &p,
            &Tensor2::filled(1, 3, 0.9),
            &LstmState::zeros(4),
        )
        .unwrap();
        assert_eq!(out.hidden, Tensor2::zeros(1, 4));
    }

    #[test]
    fn saturated_gates_accumulate_the_candidate() {
        // Open input/forget/output gates with huge biases. The cell update
        // then reduces to c' = c + tanh(x·Wg + h·Wh + bg).
        let mut store = ParamStore::new();
        let mut rng = rng(1);
        let p = LstmParams::init(&mut store, "cell", 2, 3, 0.1, &mut rng).unwrap();
        for k in [0, 1, 3] {
            store.get_mut(p.b[k]).value = Tensor2::filled(1, 3, 50.0);
            store.get_mut(p.w_x[k]).value = Tensor2::zeros(2, 3);
            store.get_mut(p.w_h[k]).value = Tensor2::zeros(3, 3);
        }
        let x = Tensor2::from_vec(1, 2, vec![0.3, -0.7]).unwrap();
        let prev = LstmState {
            hidden: Tensor2::from_vec(1, 3, vec![0.1, -0.2, 0.05]).unwrap(),
            cell: Tensor2::from_vec(1, 3, vec![0.4, 0.2, -0.3]).unwrap(),
        };
        let out = lstm_step(&store, &p, &x, &prev).unwrap();

        let pre = crate::numgrad::matmul(&x, &store.get(p.w_x[2]).value)
            .unwrap()
            .add(&crate::numgrad::matmul(&prev.hidden, &store.get(p.w_h[2]).value).unwrap())
            .unwrap()
            .add(&store.get(p.b[2]).value)
            .unwrap();
        for c in 0..3 {
            let expect = prev.cell.get(0, c) + pre.get(0, c).tanh();
            assert!((out.cell.get(0, c) - expect).abs() <= 1e-9);
        }
    }

    #[test]
    fn lstm_gradients_pass_fd_check() {
        let mut store = ParamStore::new();
        let mut r = rng(2);
        let p = LstmParams::init(&mut store, "cell", 3, 4, 0.1, &mut r).unwrap();
        let x = Tensor2::from_fn(1, 3, |_, c| 0.3 * (c as f64 + 1.0));
        let ids = p.all_ids();
        let report = crate::numgrad::check_gradients(
            |tape, store| {
                let gates = p.register(tape, store);
                let xv = tape.constant(x.clone());
                let state = LstmNodes {
                    hidden: tape.constant(Tensor2::filled(1, 4, 0.1)),
                    cell: tape.constant(Tensor2::filled(1, 4, -0.2)),
                };
                let out = lstm_step_nodes(tape, &gates, xv, &state)?;
                let sq = tape.mul(out.hidden, out.hidden)?;
                Ok(tape.sum(sq))
            },
            &mut store,
            &ids,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{}", report.summary());
    }

    #[test]
    fn blstm_singleton_sees_the_frame_from_both_sides() {
        let mut store = ParamStore::new();
        let mut r = rng(3);
        let p = BlstmParams::init(&mut store, "layer", 2, 3, 0.1, &mut r).unwrap();
        let out = blstm_layer(&store, &p, &[Tensor2::filled(1, 2, 0.5)]).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].cols(), 6);
    }

    #[test]
    fn blstm_rejects_empty_sequences() {
        let mut store = ParamStore::new();
        let mut r = rng(4);
        let p = BlstmParams::init(&mut store, "layer", 2, 3, 0.1, &mut r).unwrap();
        assert!(blstm_layer(&store, &p, &[]).is_err());
    }

    #[test]
    fn tied_directions_on_a_palindrome_mirror_with_swapped_halves() {
        // With forward and backward sharing parameters, the backward pass
        // over a palindrome replays the forward pass, so reversing the
        // output sequence and swapping its halves reproduces it exactly.
        let mut store = ParamStore::new();
        let mut r = rng(5);
        let cell = LstmParams::init(&mut store, "tied", 2, 3, 0.1, &mut r).unwrap();
        let p = BlstmParams {
            fwd: cell.clone(),
            bwd: cell,
        };
        let frames = vec![
            Tensor2::from_vec(1, 2, vec![0.3, -0.1]).unwrap(),
            Tensor2::from_vec(1, 2, vec![-0.8, 0.5]).unwrap(),
            Tensor2::from_vec(1, 2, vec![0.3, -0.1]).unwrap(),
        ];
        let out = blstm_layer(&store, &p, &frames).unwrap();
        let t = frames.len();
        for i in 0..t {
            let (a, b) = out[i].row(0).split_at(3);
            let (ra, rb) = out[t - 1 - i].row(0).split_at(3);
            assert_eq!(a, rb);
            assert_eq!(b, ra);
        }
    }

    #[test]
    fn every_output_frame_depends_on_every_input_frame() {
        let mut store = ParamStore::new();
        let mut r = rng(6);
        let p = BlstmParams::init(&mut store, "layer", 2, 3, 0.1, &mut r).unwrap();
        let frames = vec![
            Tensor2::filled(1, 2, 0.2),
            Tensor2::filled(1, 2, -0.4),
            Tensor2::filled(1, 2, 0.6),
            Tensor2::filled(1, 2, 0.1),
        ];
        let base = blstm_layer(&store, &p, &frames).unwrap();
        for t in 0..frames.len() {
            let mut bumped = frames.clone();
            let v = bumped[t].get(0, 0);
            bumped[t].set(0, 0, v + 0.37);
            let out = blstm_layer(&store, &p, &bumped).unwrap();
            for (o, b) in out.iter().zip(&base) {
                assert!(o.max_abs_diff(b) > 0.0, "frame {t} did not reach output");
            }
        }
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let sig = Tensor2::from_vec(1, 5, vec![0.5, -1.0, 2.0, 0.0, 3.0]).unwrap();
        let delta = Tensor2::from_vec(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        let out = conv1d_time(&delta, &sig).unwrap();
        for (t, &v) in sig.row(0).iter().enumerate() {
            assert_eq!(out.get(t, 0), v);
        }
    }

    #[test]
    fn conv_matches_sliding_window_oracle() {
        let sig = Tensor2::from_vec(1, 4, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let ones = Tensor2::from_vec(1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        let out = conv1d_time(&ones, &sig).unwrap();
        // Zero-padded sliding sums of [1,0,0,1] with a width-3 window of ones.
        for t in 0..4 {
            let mut expect = 0.0;
            for w in 0..3usize {
                let idx = t as isize + w as isize - 1;
                if (0..4).contains(&idx) {
                    expect += sig.get(0, idx as usize);
                }
            }
            assert_eq!(out.get(t, 0), expect);
        }
        assert_eq!(out.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn conv_rejects_even_width_and_supports_wide_filter_banks() {
        let sig = Tensor2::filled(1, 8, 1.0);
        assert!(conv1d_time(&Tensor2::zeros(1, 4), &sig).is_err());
        // A 10-filter width-99 bank (the full-scale shape, trimmed to odd).
        let bank = Tensor2::filled(10, 99, 0.01);
        let out = conv1d_time(&bank, &sig).unwrap();
        assert_eq!(out.shape(), (8, 10));
    }

    #[test]
    fn softmax_equal_logits_is_uniform_for_any_sharpening() {
        for gamma in [0.5, 1.0, 2.0, 10.0] {
            let out = softmax(&Tensor2::filled(1, 5, 0.3), gamma).unwrap();
            for &v in out.row(0) {
                assert!((v - 0.2).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn doubling_the_sharpening_squares_then_renormalizes() {
        let logits = Tensor2::from_vec(1, 4, vec![0.1, -0.4, 0.9, 0.3]).unwrap();
        let gamma = 2.0;
        let base = softmax(&logits, gamma).unwrap();
        let sharp = softmax(&logits, 2.0 * gamma).unwrap();
        let sq_total: f64 = base.row(0).iter().map(|p| p * p).sum();
        for c in 0..4 {
            let expect = base.get(0, c) * base.get(0, c) / sq_total;
            assert!((sharp.get(0, c) - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_positive_scale() {
        assert!(softmax(&Tensor2::filled(1, 2, 0.0), 0.0).is_err());
        assert!(softmax(&Tensor2::filled(1, 2, 0.0), -1.0).is_err());
    }

    #[test]
    fn layer_spec_validates_and_prints() {
        assert!(LayerSpec::new(0, 3, LayerKind::Linear).is_err());
        let spec = LayerSpec::new(4, 8, LayerKind::Blstm).unwrap();
        assert_eq!(spec.to_string(), "blstm 4 -> 8");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            vals in proptest::collection::vec(-5.0f64..5.0, 2..6),
            shift in -3.0f64..3.0,
            gamma in 0.5f64..4.0,
        ) {
            let row = Tensor2::row_vector(&vals);
            let out = softmax(&row, gamma).unwrap();
            let total: f64 = out.row(0).iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            let shifted = softmax(&row.map(|v| v + shift), gamma).unwrap();
            prop_assert!(out.max_abs_diff(&shifted) <= 1e-12);
        }
    }
}
