//! Connectionist temporal classification: blank augmentation, log-space
//! forward-backward over the label trellis, loss and logit gradient, greedy
//! collapse decoding, and an exhaustive path-enumeration oracle for tests.

use crate::error::{Error, Result};
use crate::numgrad::{log_sum_exp_f64, Tape, Tensor2, ValueId};

const NEG_INF: f64 = f64::NEG_INFINITY;

/// Tolerance on posterior row normalization.
pub const ROW_SUM_TOL: f64 = 1e-10;

/// Largest path count the brute-force oracle will enumerate.
const BRUTE_FORCE_LIMIT: f64 = 1e6;

/// What a label sequence denotes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelRole {
    /// Ground-truth labels, no blanks.
    RawTarget,
    /// Target interleaved with blanks at every even position.
    BlankAugmented,
    /// Decoder output after collapsing repeats and removing blanks.
    CollapsedHypothesis,
}

/// Sequence of vocabulary indices tagged with its role.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSeq {
    labels: Vec<usize>,
    role: LabelRole,
}

impl LabelSeq {
    pub fn raw(labels: Vec<usize>) -> Self {
        LabelSeq {
            labels,
            role: LabelRole::RawTarget,
        }
    }

    pub fn collapsed(labels: Vec<usize>) -> Self {
        LabelSeq {
            labels,
            role: LabelRole::CollapsedHypothesis,
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn role(&self) -> LabelRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn expect(&self, role: LabelRole, op: &str) -> Result<()> {
        if self.role != role {
            return Err(Error::Argument(format!(
                "{op} needs a {role:?} sequence, got {:?}",
                self.role
            )));
        }
        Ok(())
    }
}

/// Per-frame symbol distribution, one row per frame; the last column is the
/// blank symbol.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePosteriors {
    q: Tensor2,
}

impl FramePosteriors {
    /// Wrap a T×(K+1) matrix, checking every row is a distribution.
    pub fn new(q: Tensor2) -> Result<Self> {
        if q.rows() == 0 || q.cols() == 0 {
            return Err(Error::Argument(
                "posteriors need at least one frame and one symbol".into(),
            ));
        }
        for r in 0..q.rows() {
            let mut sum = 0.0;
            for &v in q.row(r) {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Argument(format!(
                        "posterior entry {v} in row {r} is not a probability"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Argument(format!(
                    "posterior row {r} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(FramePosteriors { q })
    }

    /// Softmax each row of raw scores.
    pub fn from_logits(logits: &Tensor2) -> Result<Self> {
        FramePosteriors::new(crate::nn::softmax(logits, 1.0)?)
    }

    pub fn frames(&self) -> usize {
        self.q.rows()
    }

    /// Number of symbols including the blank.
    pub fn symbols(&self) -> usize {
        self.q.cols()
    }

    /// Index of the blank symbol (the last column).
    pub fn blank(&self) -> usize {
        self.q.cols() - 1
    }

    pub fn q(&self) -> &Tensor2 {
        &self.q
    }
}

/// Forward and backward trellis variables in the natural-log domain, both
/// T×|y′| and both including the emission at their own frame, so the path
/// probability marginalizes at any t as
/// logsumexp_u(alpha[t,u] + beta[t,u] − ln q_t(y′_u)).
#[derive(Clone, Debug)]
pub struct CtcLattice {
    pub alpha: Tensor2,
    pub beta: Tensor2,
}

impl CtcLattice {
    /// ln P(y|x) read off the end of the forward pass.
    pub fn log_prob(&self) -> f64 {
        let t = self.alpha.rows() - 1;
        let s = self.alpha.cols();
        let last = self.alpha.get(t, s - 1);
        if s == 1 {
            last
        } else {
            log_sum_exp_f64(&[last, self.alpha.get(t, s - 2)])
        }
    }

    /// ln P(y|x) read off the start of the backward pass.
    pub fn log_prob_from_beta(&self) -> f64 {
        let s = self.beta.cols();
        let first = self.beta.get(0, 0);
        if s == 1 {
            first
        } else {
            log_sum_exp_f64(&[first, self.beta.get(0, 1)])
        }
    }

    /// ln P(y|x) marginalized over trellis positions at frame `t`.
    pub fn marginal_log_prob(
        &self,
        q: &FramePosteriors,
        y_aug: &LabelSeq,
        t: usize,
    ) -> Result<f64> {
        if t >= self.alpha.rows() {
            return Err(Error::Argument(format!(
                "frame {t} outside lattice of {} frames",
                self.alpha.rows()
            )));
        }
        let mut terms = Vec::with_capacity(y_aug.len());
        for (u, &sym) in y_aug.labels().iter().enumerate() {
            let a = self.alpha.get(t, u);
            let b = self.beta.get(t, u);
            if a == NEG_INF || b == NEG_INF {
                continue;
            }
            terms.push(a + b - q.q().get(t, sym).ln());
        }
        Ok(log_sum_exp_f64(&terms))
    }
}

/// Interleave blanks around every label: (c,a,t) becomes (−,c,−,a,−,t,−).
pub fn augment_with_blanks(y: &LabelSeq, blank: usize) -> Result<LabelSeq> {
    y.expect(LabelRole::RawTarget, "augment_with_blanks")?;
    let mut labels = Vec::with_capacity(2 * y.len() + 1);
    labels.push(blank);
    for &l in y.labels() {
        if l == blank {
            return Err(Error::Argument(format!(
                "raw target contains the blank symbol {blank}"
            )));
        }
        labels.push(l);
        labels.push(blank);
    }
    Ok(LabelSeq {
        labels,
        role: LabelRole::BlankAugmented,
    })
}

/// Fewest frames any path collapsing to `labels` can occupy: one per label
/// plus one separating blank per adjacent equal pair.
pub fn min_frames(labels: &[usize]) -> usize {
    let pairs = labels.windows(2).filter(|w| w[0] == w[1]).count();
    labels.len() + pairs
}

fn validate_raw(q: &FramePosteriors, y: &LabelSeq) -> Result<()> {
    y.expect(LabelRole::RawTarget, "ctc")?;
    for &l in y.labels() {
        if l >= q.blank() {
            return Err(Error::Argument(format!(
                "label {l} collides with blank {} or exceeds it",
                q.blank()
            )));
        }
    }
    let need = min_frames(y.labels());
    if q.frames() < need {
        return Err(Error::ImpossibleAlignment {
            labels: y.len(),
            min_frames: need,
            frames: q.frames(),
        });
    }
    Ok(())
}

/// Positions reachable in one step ending at trellis node `u`: stay, advance
/// one, and advance two when that skips a blank between distinct labels.
fn can_skip(aug: &[usize], u: usize, blank: usize) -> bool {
    u >= 2 && aug[u] != blank && aug[u] != aug[u - 2]
}

/// Log-space forward-backward over the blank-augmented trellis.
pub fn ctc_forward_backward(q: &FramePosteriors, y_aug: &LabelSeq) -> Result<CtcLattice> {
    y_aug.expect(LabelRole::BlankAugmented, "ctc_forward_backward")?;
    let aug = y_aug.labels();
    let blank = q.blank();
    if aug.len().is_multiple_of(2) {
        return Err(Error::Argument(
            "blank-augmented sequence must have odd length".into(),
        ));
    }
    for (u, &sym) in aug.iter().enumerate() {
        if sym >= q.symbols() {
            return Err(Error::Argument(format!(
                "symbol {sym} outside the {}-symbol posterior",
                q.symbols()
            )));
        }
        if (u % 2 == 0) != (sym == blank) {
            return Err(Error::Argument(format!(
                "position {u} of the augmented sequence breaks the blank interleaving"
            )));
        }
    }
    let raw: Vec<usize> = aug.iter().copied().filter(|&s| s != blank).collect();
    let need = min_frames(&raw);
    let t_total = q.frames();
    if t_total < need {
        return Err(Error::ImpossibleAlignment {
            labels: raw.len(),
            min_frames: need,
            frames: t_total,
        });
    }

    let s_total = aug.len();
    let lq = |t: usize, u: usize| q.q().get(t, aug[u]).ln();

    let mut alpha = Tensor2::filled(t_total, s_total, NEG_INF);
    alpha.set(0, 0, lq(0, 0));
    if s_total > 1 {
        alpha.set(0, 1, lq(0, 1));
    }
    for t in 1..t_total {
        for u in 0..s_total {
            let mut terms = [NEG_INF; 3];
            terms[0] = alpha.get(t - 1, u);
            if u >= 1 {
                terms[1] = alpha.get(t - 1, u - 1);
            }
            if can_skip(aug, u, blank) {
                terms[2] = alpha.get(t - 1, u - 2);
            }
            let inbound = log_sum_exp_f64(&terms);
            if inbound != NEG_INF {
                alpha.set(t, u, inbound + lq(t, u));
            }
        }
    }

    let mut beta = Tensor2::filled(t_total, s_total, NEG_INF);
    beta.set(t_total - 1, s_total - 1, lq(t_total - 1, s_total - 1));
    if s_total > 1 {
        beta.set(t_total - 1, s_total - 2, lq(t_total - 1, s_total - 2));
    }
    for t in (0..t_total.saturating_sub(1)).rev() {
        for u in 0..s_total {
            let mut terms = [NEG_INF; 3];
            terms[0] = beta.get(t + 1, u);
            if u + 1 < s_total {
                terms[1] = beta.get(t + 1, u + 1);
            }
            if u + 2 < s_total && can_skip(aug, u + 2, blank) {
                terms[2] = beta.get(t + 1, u + 2);
            }
            let outbound = log_sum_exp_f64(&terms);
            if outbound != NEG_INF {
                beta.set(t, u, outbound + lq(t, u));
            }
        }
    }

    Ok(CtcLattice { alpha, beta })
}

/// −ln P(y|x) under the collapse-to-target path sum. Infinite when every
/// path has probability zero.
pub fn ctc_loss(q: &FramePosteriors, y: &LabelSeq) -> Result<f64> {
    validate_raw(q, y)?;
    let aug = augment_with_blanks(y, q.blank())?;
    let lattice = ctc_forward_backward(q, &aug)?;
    Ok(-lattice.log_prob())
}

/// Gradient of the loss with respect to the pre-softmax scores that produced
/// `q`: grad[t,k] = q_t(k) − γ_t(k) with γ the symbol posterior from the
/// lattice.
pub fn ctc_grad(q: &FramePosteriors, y: &LabelSeq) -> Result<Tensor2> {
    validate_raw(q, y)?;
    let aug = augment_with_blanks(y, q.blank())?;
    let lattice = ctc_forward_backward(q, &aug)?;
    let lp = lattice.log_prob();
    if lp == NEG_INF {
        return Err(Error::NonFinite(
            "target probability is zero; ctc gradient undefined".into(),
        ));
    }
    let mut grad = q.q().clone();
    for t in 0..q.frames() {
        for (u, &sym) in aug.labels().iter().enumerate() {
            let a = lattice.alpha.get(t, u);
            let b = lattice.beta.get(t, u);
            if a == NEG_INF || b == NEG_INF {
                continue;
            }
            let occupancy = (a + b - q.q().get(t, sym).ln() - lp).exp();
            grad.set(t, sym, grad.get(t, sym) - occupancy);
        }
    }
    Ok(grad)
}

/// Collapse a frame path: merge consecutive repeats, then drop blanks.
pub fn collapse_path(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in path {
        if Some(s) != prev && s != blank {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

/// Exact P(y|x) by enumerating every length-T path. Testing oracle only;
/// guarded to a million paths.
pub fn ctc_brute_force(q: &FramePosteriors, y: &LabelSeq) -> Result<f64> {
    y.expect(LabelRole::RawTarget, "ctc_brute_force")?;
    for &l in y.labels() {
        if l >= q.blank() {
            return Err(Error::Argument(format!(
                "label {l} collides with blank {} or exceeds it",
                q.blank()
            )));
        }
    }
    let t_total = q.frames();
    let s_total = q.symbols();
    let count = (s_total as f64).powi(t_total as i32);
    if count > BRUTE_FORCE_LIMIT {
        return Err(Error::Guard(format!(
            "{s_total}^{t_total} paths exceed the enumeration limit"
        )));
    }
    let mut path = vec![0usize; t_total];
    let mut total = 0.0;
    loop {
        let mut p = 1.0;
        for (t, &sym) in path.iter().enumerate() {
            p *= q.q().get(t, sym);
        }
        if p > 0.0 && collapse_path(&path, q.blank()) == y.labels() {
            total += p;
        }
        let mut digit = 0;
        loop {
            if digit == t_total {
                return Ok(total);
            }
            path[digit] += 1;
            if path[digit] < s_total {
                break;
            }
            path[digit] = 0;
            digit += 1;
        }
    }
}

/// Most likely symbol per frame, collapsed. Ties go to the lowest index.
pub fn greedy_collapse_decode(q: &FramePosteriors) -> LabelSeq {
    let path: Vec<usize> = (0..q.frames()).map(|t| q.q().argmax_row(t)).collect();
    LabelSeq::collapsed(collapse_path(&path, q.blank()))
}

/// Differentiable loss over pre-softmax scores (T×(K+1)): records the loss
/// and its analytic logit gradient on the tape.
pub fn ctc_loss_on_tape(tape: &mut Tape, logits: ValueId, y: &LabelSeq) -> Result<ValueId> {
    let q = FramePosteriors::from_logits(tape.value(logits))?;
    let loss = ctc_loss(&q, y)?;
    let grad = ctc_grad(&q, y)?;
    tape.custom_scalar(logits, loss, grad)
}

/// Random normalized posteriors, bounded away from zero.
pub fn random_posteriors(
    rng: &mut impl rand::Rng,
    frames: usize,
    symbols: usize,
) -> FramePosteriors {
    let mut q = Tensor2::zeros(frames, symbols);
    for r in 0..frames {
        let mut sum = 0.0;
        for c in 0..symbols {
            let v = rng.gen_range(0.01..1.0);
            q.set(r, c, v);
            sum += v;
        }
        for c in 0..symbols {
            q.set(r, c, q.get(r, c) / sum);
        }
    }
    FramePosteriors::new(q).expect("normalized rows")
}

/// Random raw target over `base` symbols that fits in `frames` frames.
pub fn random_feasible_target(
    rng: &mut impl rand::Rng,
    frames: usize,
    base: usize,
    max_len: usize,
) -> LabelSeq {
    loop {
        let u = rng.gen_range(0..=max_len);
        let labels: Vec<usize> = (0..u).map(|_| rng.gen_range(0..base)).collect();
        if min_frames(&labels) <= frames {
            return LabelSeq::raw(labels);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_q(frames: usize, symbols: usize) -> FramePosteriors {
        FramePosteriors::new(Tensor2::filled(frames, symbols, 1.0 / symbols as f64)).unwrap()
    }

    /// Rows put probability 1 on the listed symbols.
    fn one_hot_q(symbols: usize, path: &[usize]) -> FramePosteriors {
        let q = Tensor2::from_fn(
            path.len(),
            symbols,
            |r, c| {
                if path[r] == c {
                    1.0
                } else {
                    0.0
                }
            },
        );
        FramePosteriors::new(q).unwrap()
    }

    #[test]
    fn augmentation_interleaves_blanks() {
        let blank = 26;
        let cat = LabelSeq::raw(vec![2, 0, 19]);
        let aug = augment_with_blanks(&cat, blank).unwrap();
        assert_eq!(aug.labels(), &[26, 2, 26, 0, 26, 19, 26]);
        assert_eq!(aug.role(), LabelRole::BlankAugmented);

        let empty = augment_with_blanks(&LabelSeq::raw(vec![]), blank).unwrap();
        assert_eq!(empty.labels(), &[26]);

        let rep = augment_with_blanks(&LabelSeq::raw(vec![0, 0]), blank).unwrap();
        assert_eq!(rep.labels(), &[26, 0, 26, 0, 26]);

        assert!(augment_with_blanks(&LabelSeq::raw(vec![26]), blank).is_err());
        assert!(augment_with_blanks(&aug, blank).is_err());
    }

    #[test]
    fn min_frames_counts_separating_blanks() {
        assert_eq!(min_frames(&[]), 0);
        assert_eq!(min_frames(&[0, 1, 2]), 3);
        assert_eq!(min_frames(&[0, 0]), 3);
        assert_eq!(min_frames(&[0, 0, 0]), 5);
        assert_eq!(min_frames(&[0, 1, 1, 0]), 5);
    }

    #[test]
    fn uniform_two_frame_single_label_case() {
        // T=2, one real symbol plus blank, uniform rows: of the four paths
        // aa, a-, -a, -- the first three collapse to (a), so P = 3/4.
        let q = uniform_q(2, 2);
        let y = LabelSeq::raw(vec![0]);
        let loss = ctc_loss(&q, &y).unwrap();
        assert!((loss - (-0.75f64.ln())).abs() <= 1e-12);
        let p = ctc_brute_force(&q, &y).unwrap();
        assert!((p - 0.75).abs() <= 1e-12);
    }

    #[test]
    fn impossible_alignments_are_typed_errors() {
        let q = uniform_q(1, 3);
        let err = ctc_loss(&q, &LabelSeq::raw(vec![0, 1])).unwrap_err();
        assert!(matches!(err, Error::ImpossibleAlignment { .. }), "{err:?}");

        // Repeated labels need a separating blank frame.
        let q2 = uniform_q(2, 2);
        let err2 = ctc_loss(&q2, &LabelSeq::raw(vec![0, 0])).unwrap_err();
        match err2 {
            Error::ImpossibleAlignment {
                labels,
                min_frames,
                frames,
            } => assert_eq!((labels, min_frames, frames), (2, 3, 2)),
            other => panic!("unexpected error {other:?}"),
        }
        assert!(ctc_loss(&uniform_q(3, 2), &LabelSeq::raw(vec![0, 0])).is_ok());
    }

    #[test]
    fn deterministic_path_gives_zero_loss_and_zero_gradient() {
        // Frames emit a, b, blank with certainty; only path collapsing to
        // (a,b) carries probability 1.
        let q = one_hot_q(3, &[0, 1, 2]);
        let y = LabelSeq::raw(vec![0, 1]);
        assert!(ctc_loss(&q, &y).unwrap().abs() <= 1e-12);
        let grad = ctc_grad(&q, &y).unwrap();
        assert!(grad.data().iter().all(|v| v.abs() <= 1e-10));
    }

    #[test]
    fn empty_target_single_frame_reads_the_blank_cell() {
        let q = FramePosteriors::new(Tensor2::from_vec(1, 2, vec![0.3, 0.7]).unwrap()).unwrap();
        let aug = augment_with_blanks(&LabelSeq::raw(vec![]), q.blank()).unwrap();
        let lattice = ctc_forward_backward(&q, &aug).unwrap();
        assert!((lattice.alpha.get(0, 0) - 0.7f64.ln()).abs() <= 1e-15);
        assert!((ctc_loss(&q, &LabelSeq::raw(vec![])).unwrap() - (-0.7f64.ln())).abs() <= 1e-15);
    }

    #[test]
    fn lattice_boundaries_have_the_required_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = random_posteriors(&mut rng, 6, 4);
        let y = LabelSeq::raw(vec![0, 2, 1]);
        let aug = augment_with_blanks(&y, q.blank()).unwrap();
        let lattice = ctc_forward_backward(&q, &aug).unwrap();
        let s = aug.len();
        for u in 2..s {
            assert_eq!(lattice.alpha.get(0, u), NEG_INF);
        }
        for u in 0..s - 2 {
            assert_eq!(lattice.beta.get(5, u), NEG_INF);
        }
        let diff = lattice.log_prob() - lattice.log_prob_from_beta();
        assert!(
            diff.abs() <= 1e-12,
            "forward/backward totals differ: {diff}"
        );
    }

    #[test]
    fn per_frame_marginalization_is_frame_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let t = rng.gen_range(2..9);
            let k = rng.gen_range(2..5);
            let q = random_posteriors(&mut rng, t, k);
            let y = random_feasible_target(&mut rng, t, q.blank(), 4);
            let aug = augment_with_blanks(&y, q.blank()).unwrap();
            let lattice = ctc_forward_backward(&q, &aug).unwrap();
            let total = lattice.log_prob();
            for frame in 0..t {
                let m = lattice.marginal_log_prob(&q, &aug, frame).unwrap();
                assert!((m - total).abs() <= 1e-9, "frame {frame}: {m} vs {total}");
            }
        }
    }

    #[test]
    fn forward_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let t = rng.gen_range(1..7);
            let k = rng.gen_range(2..5);
            let q = random_posteriors(&mut rng, t, k);
            let y = random_feasible_target(&mut rng, t, q.blank(), 4);
            let exact = ctc_brute_force(&q, &y).unwrap();
            let loss = ctc_loss(&q, &y).unwrap();
            let rel = (loss - (-exact.ln())).abs() / loss.abs().max(1e-12);
            assert!(rel <= 1e-9, "loss {loss} vs oracle {}", -exact.ln());
        }
    }

    #[test]
    fn brute_force_guard_trips_on_large_instances() {
        let q = uniform_q(30, 4);
        let err = ctc_brute_force(&q, &LabelSeq::raw(vec![0])).unwrap_err();
        assert!(matches!(err, Error::Guard(_)), "{err:?}");
    }

    #[test]
    fn target_longer_than_frames_has_zero_path_mass() {
        // Brute force returns a plain 0 here; the trellis path reports the
        // same situation as a typed error instead.
        let q = uniform_q(2, 3);
        let y = LabelSeq::raw(vec![0, 1, 0]);
        assert_eq!(ctc_brute_force(&q, &y).unwrap(), 0.0);
        assert!(matches!(
            ctc_loss(&q, &y),
            Err(Error::ImpossibleAlignment { .. })
        ));
    }

    #[test]
    fn appending_a_sure_blank_frame_preserves_the_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let t = rng.gen_range(2..5);
            let k = rng.gen_range(2..4);
            let q = random_posteriors(&mut rng, t, k);
            let y = random_feasible_target(&mut rng, t, q.blank(), 3);
            let mut extended = Tensor2::zeros(t + 1, k);
            for r in 0..t {
                for c in 0..k {
                    extended.set(r, c, q.q().get(r, c));
                }
            }
            extended.set(t, k - 1, 1.0);
            let q_ext = FramePosteriors::new(extended).unwrap();
            let before = ctc_loss(&q, &y).unwrap();
            let after = ctc_loss(&q_ext, &y).unwrap();
            assert!((before - after).abs() <= 1e-12);
            let bf_before = ctc_brute_force(&q, &y).unwrap();
            let bf_after = ctc_brute_force(&q_ext, &y).unwrap();
            assert!((bf_before - bf_after).abs() <= 1e-12);
        }
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random_posteriors(&mut rng, 5, 4);
        let y = random_feasible_target(&mut rng, 5, q.blank(), 3);
        let grad = ctc_grad(&q, &y).unwrap();
        for r in 0..grad.rows() {
            let sum: f64 = grad.row(r).iter().sum();
            assert!(sum.abs() <= 1e-10, "row {r} sums to {sum}");
        }
    }

    #[test]
    fn logit_gradient_passes_fd_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = crate::numgrad::ParamStore::new();
        let logits = crate::nn::init_uniform("logits", 4, 4, -1.0, 1.0, 6).unwrap();
        let id = store.add(logits).unwrap();
        let y = random_feasible_target(&mut rng, 4, 3, 3);
        let report = crate::numgrad::check_gradients(
            |tape, store| {
                let l = tape.param(store, id);
                ctc_loss_on_tape(tape, l, &y)
            },
            &mut store,
            &[id],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{}", report.summary());
    }

    #[test]
    fn greedy_decode_collapses_repeats_then_blanks() {
        // Framewise argmaxes a,a,-,b collapse to (a,b).
        let q = one_hot_q(3, &[0, 0, 2, 1]);
        assert_eq!(greedy_collapse_decode(&q).labels(), &[0, 1]);
        // A blank separates repeats: a,-,a stays (a,a).
        let q = one_hot_q(3, &[0, 2, 0]);
        assert_eq!(greedy_collapse_decode(&q).labels(), &[0, 0]);
        // All blank collapses to the empty hypothesis.
        let q = one_hot_q(3, &[2, 2, 2]);
        assert!(greedy_collapse_decode(&q).is_empty());
    }

    #[test]
    fn posterior_validation_rejects_bad_rows() {
        assert!(FramePosteriors::new(Tensor2::zeros(0, 2)).is_err());
        assert!(FramePosteriors::new(Tensor2::filled(2, 2, 0.6)).is_err());
        let negative = Tensor2::from_vec(1, 2, vec![-0.2, 1.2]).unwrap();
        assert!(FramePosteriors::new(negative).is_err());
        let nan = Tensor2::from_vec(1, 2, vec![f64::NAN, 1.0]).unwrap();
        assert!(FramePosteriors::new(nan).is_err());
    }

    #[test]
    fn labels_at_or_above_blank_are_rejected() {
        let q = uniform_q(3, 3);
        assert!(ctc_loss(&q, &LabelSeq::raw(vec![2])).is_err());
        assert!(ctc_loss(&q, &LabelSeq::raw(vec![5])).is_err());
        assert!(ctc_brute_force(&q, &LabelSeq::raw(vec![2])).is_err());
    }
}
