//! Built-in verification suites behind `hark check`.
//!
//! Each suite compares a production code path against an independent
//! reference: brute-force path enumeration for the CTC loss, the
//! forward-backward identity, central finite differences for gradients,
//! and exhaustive/greedy search for the beam decoder. All randomness
//! derives from the run seed, so a seed reproduces identical numbers.

use anyhow::{bail, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hark::attention::{attention_loss_nodes, AttnConfig, AttnMechanism, AttnParams};
use hark::beam::{beam_decode, exhaustive_decode, greedy_attention_decode, BeamConfig};
use hark::ctc::{
    augment_with_blanks, ctc_brute_force, ctc_forward_backward, ctc_loss, ctc_loss_on_tape,
    random_feasible_target, random_posteriors, LabelSeq,
};
use hark::encoder::{encode_on_tape, EncoderConfig, EncoderOutput, EncoderParams};
use hark::nn::uniform_tensor;
use hark::numgrad::{check_gradients, Param, ParamStore, Tensor2};

const ORACLE_CASES: usize = 200;
const ORACLE_REL_TOL: f64 = 1e-9;
const IDENTITY_CASES: usize = 50;
const IDENTITY_TOL: f64 = 1e-9;
const FD_EPS: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;

pub const CHECK_NAMES: [&str; 4] = ["ctc-oracle", "ctc-identity", "gradients", "beam"];

/// Result of one named suite.
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Run the selected suites (all of them when `only` is empty), printing
/// one line per suite. Returns true iff every selected suite passed.
pub fn run_checks(seed: u64, only: &[String]) -> Result<bool> {
    for name in only {
        if !CHECK_NAMES.contains(&name.as_str()) {
            bail!(
                "unknown check {name:?}, expected one of: {}",
                CHECK_NAMES.join(", ")
            );
        }
    }
    let wanted = |name: &str| only.is_empty() || only.iter().any(|o| o == name);

    let mut all_passed = true;
    for (name, run) in [
        ("ctc-oracle", check_ctc_oracle as fn(u64) -> CheckOutcome),
        ("ctc-identity", check_ctc_identity),
        ("gradients", check_gradient_suite),
        ("beam", check_beam),
    ] {
        if !wanted(name) {
            continue;
        }
        let outcome = run(seed);
        let state = if outcome.passed { "pass" } else { "fail" };
        println!("check {}: {state} ({})", outcome.name, outcome.detail);
        all_passed &= outcome.passed;
    }
    Ok(all_passed)
}

/// CTC loss against -ln of the exhaustive path-probability sum.
fn check_ctc_oracle(seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut max_rel = 0.0f64;
    for _ in 0..ORACLE_CASES {
        let frames = rng.gen_range(1..=8);
        let base = rng.gen_range(1..=3);
        let q = random_posteriors(&mut rng, frames, base + 1);
        let y = random_feasible_target(&mut rng, frames, base, frames);
        let loss = ctc_loss(&q, &y).expect("feasible instance");
        let reference = -ctc_brute_force(&q, &y).expect("small instance").ln();
        let rel = (loss - reference).abs() / reference.abs().max(1e-12);
        max_rel = max_rel.max(rel);
    }
    CheckOutcome {
        name: "ctc-oracle",
        passed: max_rel <= ORACLE_REL_TOL,
        detail: format!(
            "{ORACLE_CASES} random instances, max relative error {max_rel:.3e} \
             (tolerance {ORACLE_REL_TOL:.0e})"
        ),
    }
}

/// Forward-backward marginalization must give the same total at every frame.
fn check_ctc_identity(seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let mut max_dev = 0.0f64;
    for _ in 0..IDENTITY_CASES {
        let frames = rng.gen_range(1..=10);
        let base = rng.gen_range(1..=4);
        let q = random_posteriors(&mut rng, frames, base + 1);
        let y = random_feasible_target(&mut rng, frames, base, frames);
        let aug = augment_with_blanks(&y, base).expect("raw target");
        let lattice = ctc_forward_backward(&q, &aug).expect("feasible instance");
        let lp = lattice.log_prob();
        max_dev = max_dev.max((lp - lattice.log_prob_from_beta()).abs());
        for t in 0..frames {
            let marginal = lattice.marginal_log_prob(&q, &aug, t).expect("in range");
            max_dev = max_dev.max((marginal - lp).abs());
        }
    }
    CheckOutcome {
        name: "ctc-identity",
        passed: max_dev <= IDENTITY_TOL,
        detail: format!(
            "{IDENTITY_CASES} random instances, max log-domain deviation {max_dev:.3e} \
             (tolerance {IDENTITY_TOL:.0e})"
        ),
    }
}

/// Reverse-mode gradients against central finite differences: the CTC loss
/// with respect to its logits, and the mixed loss of a tiny two-head model
/// with respect to every parameter.
fn check_gradient_suite(seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    let mut worst = 0.0f64;
    let mut passed = true;

    let mut logit_store = ParamStore::new();
    let logits = logit_store
        .add(Param::new(
            "logits",
            uniform_tensor(&mut rng, 5, 4, -2.0, 2.0).expect("valid range"),
        ))
        .expect("fresh store");
    let y = LabelSeq::raw(vec![0, 1, 0]);
    let report = check_gradients(
        |tape, store| {
            let node = tape.param(store, logits);
            ctc_loss_on_tape(tape, node, &y)
        },
        &mut logit_store,
        &[logits],
        FD_EPS,
        FD_REL_TOL,
    )
    .expect("well-formed check");
    passed &= report.passed();
    worst = worst.max(report.max_rel_err());

    let enc_config = EncoderConfig {
        num_layers: 1,
        cells_per_dir: 5,
        proj_dim: 5,
        subsample_layers: vec![],
        input_dim: 3,
    };
    let att_config = AttnConfig {
        mechanism: AttnMechanism::Location,
        gamma: 1.5,
        num_conv_filters: 2,
        conv_width: 3,
        attn_dim: 4,
        decoder_cells: 4,
        embed_dim: 3,
    };
    let base = 3usize;
    let k = base + 1;
    let mut store = ParamStore::new();
    let enc = EncoderParams::init(&mut store, "enc", &enc_config, 0.4, &mut rng)
        .expect("valid encoder config");
    let att = AttnParams::init(
        &mut store,
        "att",
        &att_config,
        enc_config.proj_dim,
        k,
        0.4,
        &mut rng,
    )
    .expect("valid attention config");
    let ctc_w = store
        .add(Param::new(
            "ctc.w",
            uniform_tensor(&mut rng, enc_config.proj_dim, k, -0.4, 0.4).expect("valid range"),
        ))
        .expect("unique name");
    let ctc_b = store
        .add(Param::new(
            "ctc.b",
            uniform_tensor(&mut rng, 1, k, -0.4, 0.4).expect("valid range"),
        ))
        .expect("unique name");
    let features = Tensor2::from_fn(5, enc_config.input_dim, |_, _| rng.gen_range(-1.0..1.0));
    let y_raw = LabelSeq::raw(vec![0, 1]);
    let y_att = LabelSeq::raw(vec![0, 1, base]);

    let mut ids = enc.all_ids();
    ids.extend(att.all_ids());
    ids.push(ctc_w);
    ids.push(ctc_b);
    let lambda = 0.5;
    let report = check_gradients(
        |tape, store| {
            let frames: Vec<_> = features
                .to_rows()
                .into_iter()
                .map(|f| tape.constant(f))
                .collect();
            let h = encode_on_tape(tape, store, &enc, &enc_config, &frames)?;
            let w = tape.param(store, ctc_w);
            let b = tape.param(store, ctc_b);
            let stack = tape.stack_rows(&h)?;
            let scores = tape.matmul(stack, w)?;
            let logits = tape.add_row(scores, b)?;
            let l_ctc = ctc_loss_on_tape(tape, logits, &y_raw)?;
            let nodes = att.register(tape, store);
            let (l_att, _) = attention_loss_nodes(tape, &att_config, &nodes, &h, &y_att)?;
            let wc = tape.scale(l_ctc, lambda);
            let wa = tape.scale(l_att, 1.0 - lambda);
            tape.add(wc, wa)
        },
        &mut store,
        &ids,
        FD_EPS,
        FD_REL_TOL,
    )
    .expect("well-formed check");
    passed &= report.passed();
    worst = worst.max(report.max_rel_err());

    CheckOutcome {
        name: "gradients",
        passed,
        detail: format!(
            "finite differences (eps {FD_EPS:.0e}), max relative error {worst:.3e} \
             (tolerance {FD_REL_TOL:.0e})"
        ),
    }
}

/// Full-width beam search must equal exhaustive search, and width 1 must
/// equal greedy decoding.
fn check_beam(seed: u64) -> CheckOutcome {
    let k_att = 5usize;
    let proj = 3usize;
    let config = AttnConfig {
        mechanism: AttnMechanism::Location,
        gamma: 1.0,
        num_conv_filters: 2,
        conv_width: 3,
        attn_dim: 4,
        decoder_cells: 4,
        embed_dim: 3,
    };
    let mk = |instance: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(4).wrapping_add(instance));
        let mut store = ParamStore::new();
        let params = AttnParams::init(&mut store, "d", &config, proj, k_att, 0.8, &mut rng)
            .expect("valid attention config");
        let h = EncoderOutput {
            h: (0..4)
                .map(|_| Tensor2::from_fn(1, proj, |_, _| rng.gen_range(-1.0..1.0)))
                .collect(),
        };
        (store, params, h)
    };

    let mut passed = true;
    let mut max_gap = 0.0f64;
    for (instance, penalty) in [(0, 0.0), (1, 0.2), (2, -0.1)] {
        let (store, params, h) = mk(instance);
        let cfg = BeamConfig {
            beam_size: k_att.pow(3),
            length_penalty: penalty,
            max_output_len: Some(3),
        };
        let beam = beam_decode(&config, &store, &params, &h, &cfg).expect("valid beam config");
        let (labels, score) =
            exhaustive_decode(&config, &store, &params, &h, &cfg).expect("small instance");
        let gap = (beam[0].adjusted_score(penalty) - score).abs();
        max_gap = max_gap.max(gap);
        passed &= beam[0].labels == labels && gap <= 1e-9;
    }
    for instance in 3..6 {
        let (store, params, h) = mk(instance);
        let cfg = BeamConfig {
            beam_size: 1,
            length_penalty: 0.0,
            max_output_len: Some(6),
        };
        let beam = beam_decode(&config, &store, &params, &h, &cfg).expect("valid beam config");
        let greedy =
            greedy_attention_decode(&config, &store, &params, &h, Some(6)).expect("valid cap");
        passed &= beam[0].labels == greedy.labels;
    }

    CheckOutcome {
        name: "beam",
        passed,
        detail: format!(
            "3 exhaustive comparisons (max adjusted-score gap {max_gap:.3e}) and \
             3 greedy comparisons"
        ),
    }
}
