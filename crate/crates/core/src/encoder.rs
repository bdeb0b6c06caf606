//! Shared acoustic encoder: a stack of bidirectional LSTM layers, each
//! followed by an affine projection, with optional frame subsampling on the
//! inputs of selected layers. Both transcription heads consume its output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{blstm_layer_nodes, BlstmParams, LayerKind, LayerSpec};
use crate::numgrad::{ParamId, ParamStore, Tape, Tensor2, ValueId};

/// Shape of the encoder stack. `subsample_layers` holds 1-based layer
/// indices whose inputs keep only even-positioned frames, so each such
/// layer halves the sequence (rounding up).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub cells_per_dir: usize,
    pub proj_dim: usize,
    pub subsample_layers: Vec<usize>,
    pub input_dim: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        for &d in &[self.cells_per_dir, self.proj_dim, self.input_dim] {
            if d == 0 {
                return Err(Error::Config(
                    "encoder dimensions must be at least 1".into(),
                ));
            }
        }
        let mut seen = vec![false; self.num_layers + 1];
        for &l in &self.subsample_layers {
            if l == 0 || l > self.num_layers {
                return Err(Error::Config(format!(
                    "subsample layer {l} outside 1..={}",
                    self.num_layers
                )));
            }
            if seen[l] {
                return Err(Error::Config(format!("subsample layer {l} repeated")));
            }
            seen[l] = true;
        }
        Ok(())
    }

    /// Shortest admissible input: each subsampling must leave a frame.
    pub fn min_frames(&self) -> usize {
        1 << self.subsample_layers.len()
    }

    /// Output length for a `frames`-long input.
    pub fn output_len(&self, frames: usize) -> usize {
        let mut len = frames;
        for _ in &self.subsample_layers {
            len = len.div_ceil(2);
        }
        len
    }

    /// Per-layer shape summary, two entries per layer (recurrent, affine).
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::with_capacity(2 * self.num_layers);
        let mut dim = self.input_dim;
        for _ in 0..self.num_layers {
            let wide = 2 * self.cells_per_dir;
            specs.push(LayerSpec::new(dim, wide, LayerKind::Blstm).unwrap());
            specs.push(LayerSpec::new(wide, self.proj_dim, LayerKind::Linear).unwrap());
            dim = self.proj_dim;
        }
        specs
    }

    fn is_subsampled(&self, layer_1based: usize) -> bool {
        self.subsample_layers.contains(&layer_1based)
    }
}

/// One layer: bidirectional recurrence plus affine projection.
#[derive(Clone, Debug)]
struct EncoderLayer {
    blstm: BlstmParams,
    proj_w: ParamId,
    proj_b: ParamId,
}

/// All encoder parameters, one entry per layer.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    layers: Vec<EncoderLayer>,
}

impl EncoderParams {
    /// Allocate and initialize every layer under `prefix`.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        config: &EncoderConfig,
        range: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.num_layers);
        let mut dim = config.input_dim;
        for l in 0..config.num_layers {
            let name = format!("{prefix}.l{l}");
            let blstm = BlstmParams::init(store, &name, dim, config.cells_per_dir, range, rng)?;
            let wide = 2 * config.cells_per_dir;
            let proj_w = store.add(crate::nn::init_uniform(
                &format!("{name}.proj.w"),
                wide,
                config.proj_dim,
                -range,
                range,
                rng.gen(),
            )?)?;
            let proj_b = store.add(crate::nn::init_uniform(
                &format!("{name}.proj.b"),
                1,
                config.proj_dim,
                -range,
                range,
                rng.gen(),
            )?)?;
            layers.push(EncoderLayer {
                blstm,
                proj_w,
                proj_b,
            });
            dim = config.proj_dim;
        }
        Ok(EncoderParams { layers })
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for layer in &self.layers {
            ids.extend(layer.blstm.all_ids());
            ids.push(layer.proj_w);
            ids.push(layer.proj_b);
        }
        ids
    }
}

/// Encoded sequence: L frames, each 1×proj_dim.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub h: Vec<Tensor2>,
}

impl EncoderOutput {
    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    /// Frames stacked into an L×proj_dim matrix.
    pub fn stacked(&self) -> Tensor2 {
        let cols = self.h[0].cols();
        Tensor2::from_fn(self.h.len(), cols, |r, c| self.h[r].get(0, c))
    }
}

/// Differentiable encoding: runs the full stack on the tape and returns one
/// node per surviving frame.
pub fn encode_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    params: &EncoderParams,
    config: &EncoderConfig,
    frames: &[ValueId],
) -> Result<Vec<ValueId>> {
    config.validate()?;
    if params.layers.len() != config.num_layers {
        return Err(Error::State(format!(
            "encoder has {} layers but config says {}",
            params.layers.len(),
            config.num_layers
        )));
    }
    if frames.len() < config.min_frames() {
        return Err(Error::InputTooShort {
            frames: frames.len(),
            min_frames: config.min_frames(),
        });
    }
    for &f in frames {
        let shape = tape.value(f).shape();
        if shape != (1, config.input_dim) {
            return Err(Error::dim(
                "encode",
                format!(
                    "expected 1x{} frames, got {}x{}",
                    config.input_dim, shape.0, shape.1
                ),
            ));
        }
    }

    let mut seq: Vec<ValueId> = frames.to_vec();
    for (l, layer) in params.layers.iter().enumerate() {
        if config.is_subsampled(l + 1) {
            seq = seq.iter().copied().step_by(2).collect();
        }
        let hidden = blstm_layer_nodes(tape, store, &layer.blstm, &seq)?;
        let w = tape.param(store, layer.proj_w);
        let b = tape.param(store, layer.proj_b);
        seq = hidden
            .into_iter()
            .map(|h| {
                let hw = tape.matmul(h, w)?;
                tape.add(hw, b)
            })
            .collect::<Result<Vec<_>>>()?;
    }
    Ok(seq)
}

/// Plain encoding of a T-frame input into L projected frames.
pub fn encode(
    store: &ParamStore,
    params: &EncoderParams,
    config: &EncoderConfig,
    frames: &[Tensor2],
) -> Result<EncoderOutput> {
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = frames.iter().map(|f| tape.constant(f.clone())).collect();
    let out = encode_on_tape(&mut tape, store, params, config, &ids)?;
    Ok(EncoderOutput {
        h: out.into_iter().map(|id| tape.value(id).clone()).collect(),
    })
}
