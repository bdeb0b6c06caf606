//! The full transcription model: shared encoder, attention decoder, and the
//! affine connectionist head, bundled with its vocabulary and parameter
//! store, plus JSON persistence.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttnConfig, AttnNodes, AttnParams};
use crate::ctc::{greedy_collapse_decode, FramePosteriors, LabelSeq};
use crate::data::Vocab;
use crate::encoder::{encode, encode_on_tape, EncoderConfig, EncoderOutput, EncoderParams};
use crate::error::{Error, Result};
use crate::numgrad::{ParamId, ParamStore, Tape, Tensor2, ValueId};

const MODEL_FORMAT: &str = "hark-model";
const MODEL_VERSION: u32 = 1;

/// Everything needed to rebuild a model's shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub attention: AttnConfig,
    pub init_range: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.attention.validate()?;
        if !(self.init_range > 0.0 && self.init_range.is_finite()) {
            return Err(Error::Config(format!(
                "init_range must be positive, got {}",
                self.init_range
            )));
        }
        Ok(())
    }
}

/// A model instance: configuration, vocabulary, and all parameters.
#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub attention: AttnParams,
    pub ctc_w: ParamId,
    pub ctc_b: ParamId,
}

/// On-tape handles for the connectionist head.
#[derive(Clone, Copy, Debug)]
pub struct CtcHeadNodes {
    pub w: ValueId,
    pub b: ValueId,
}

impl Model {
    /// Initialize all parameters uniformly in ±init_range, deterministically
    /// in the seed.
    pub fn init(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.base() == 0 {
            return Err(Error::Config("vocabulary has no plain labels".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let range = config.init_range;
        let encoder = EncoderParams::init(&mut store, "enc", &config.encoder, range, &mut rng)?;
        let attention = AttnParams::init(
            &mut store,
            "att",
            &config.attention,
            config.encoder.proj_dim,
            vocab.k_att(),
            range,
            &mut rng,
        )?;
        let ctc_w = store.add(crate::nn::init_uniform(
            "ctc.w",
            config.encoder.proj_dim,
            vocab.k_ctc(),
            -range,
            range,
            rand::Rng::gen(&mut rng),
        )?)?;
        let ctc_b = store.add(crate::nn::init_uniform(
            "ctc.b",
            1,
            vocab.k_ctc(),
            -range,
            range,
            rand::Rng::gen(&mut rng),
        )?)?;
        Ok(Model {
            config,
            vocab,
            store,
            encoder,
            attention,
            ctc_w,
            ctc_b,
        })
    }

    /// Run the encoder over a T×D feature matrix.
    pub fn encode(&self, features: &Tensor2) -> Result<EncoderOutput> {
        encode(
            &self.store,
            &self.encoder,
            &self.config.encoder,
            &features.to_rows(),
        )
    }

    /// Differentiable encoder pass returning one node per output frame.
    pub fn encode_nodes(&self, tape: &mut Tape, features: &Tensor2) -> Result<Vec<ValueId>> {
        let frames: Vec<ValueId> = features
            .to_rows()
            .into_iter()
            .map(|f| tape.constant(f))
            .collect();
        encode_on_tape(
            tape,
            &self.store,
            &self.encoder,
            &self.config.encoder,
            &frames,
        )
    }

    pub fn register_attention(&self, tape: &mut Tape) -> AttnNodes {
        self.attention.register(tape, &self.store)
    }

    pub fn register_ctc_head(&self, tape: &mut Tape) -> CtcHeadNodes {
        CtcHeadNodes {
            w: tape.param(&self.store, self.ctc_w),
            b: tape.param(&self.store, self.ctc_b),
        }
    }

    /// Per-frame symbol scores of the connectionist head, on the tape.
    pub fn ctc_logits_nodes(
        &self,
        tape: &mut Tape,
        head: &CtcHeadNodes,
        h_frames: &[ValueId],
    ) -> Result<ValueId> {
        let stack = tape.stack_rows(h_frames)?;
        let scores = tape.matmul(stack, head.w)?;
        tape.add_row(scores, head.b)
    }

    /// Frame posteriors of the connectionist head over encoded frames.
    pub fn ctc_posteriors(&self, h: &EncoderOutput) -> Result<FramePosteriors> {
        let scores = crate::numgrad::matmul(&h.stacked(), &self.store.get(self.ctc_w).value)?.add(
            &Tensor2::from_fn(h.len(), self.vocab.k_ctc(), |_, c| {
                self.store.get(self.ctc_b).value.get(0, c)
            }),
        )?;
        FramePosteriors::from_logits(&scores)
    }

    /// Greedy connectionist transcription of a feature matrix.
    pub fn ctc_decode(&self, features: &Tensor2) -> Result<LabelSeq> {
        let h = self.encode(features)?;
        Ok(greedy_collapse_decode(&self.ctc_posteriors(&h)?))
    }

    pub fn all_param_ids(&self) -> Vec<ParamId> {
        self.store.ids()
    }

    /// Serialize to pretty JSON.
    pub fn save(&self, path: &Path) -> Result<()> {
        let params: Vec<SavedParam> = self
            .store
            .iter()
            .map(|p| SavedParam {
                name: p.name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
                data: p.value.data().to_vec(),
            })
            .collect();
        let saved = SavedModel {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            config: self.config.clone(),
            symbols: self.vocab.symbols().to_vec(),
            params,
        };
        fs::write(path, serde_json::to_string_pretty(&saved)?)?;
        Ok(())
    }

    /// Rebuild a model from its JSON serialization.
    pub fn load(path: &Path) -> Result<Self> {
        let saved: SavedModel = serde_json::from_str(&fs::read_to_string(path)?)?;
        if saved.format != MODEL_FORMAT {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                details: format!("format {:?} is not {MODEL_FORMAT:?}", saved.format),
            });
        }
        if saved.version != MODEL_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                details: format!(
                    "version {} is not supported (expected {MODEL_VERSION})",
                    saved.version
                ),
            });
        }
        let vocab = Vocab::from_symbols(saved.symbols)?;
        let mut model = Model::init(saved.config, vocab, 0)?;
        if saved.params.len() != model.store.len() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                details: format!(
                    "file holds {} parameters, model shape needs {}",
                    saved.params.len(),
                    model.store.len()
                ),
            });
        }
        for sp in saved.params {
            let id = model
                .store
                .index_of(&sp.name)
                .ok_or_else(|| Error::Format {
                    path: path.to_path_buf(),
                    offset: 0,
                    details: format!("unknown parameter {:?}", sp.name),
                })?;
            let value =
                Tensor2::from_vec(sp.rows, sp.cols, sp.data).map_err(|e| Error::Format {
                    path: path.to_path_buf(),
                    offset: 0,
                    details: format!("parameter {:?}: {e}", sp.name),
                })?;
            if !value.all_finite() {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: 0,
                    details: format!("parameter {:?} has non-finite entries", sp.name),
                });
            }
            let slot = model.store.get_mut(id);
            if slot.value.shape() != value.shape() {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: 0,
                    details: format!(
                        "parameter {:?} is {}x{}, model shape needs {}x{}",
                        sp.name,
                        value.rows(),
                        value.cols(),
                        slot.value.rows(),
                        slot.value.cols()
                    ),
                });
            }
            slot.value = value;
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct SavedParam {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SavedModel {
    format: String,
    version: u32,
    config: ModelConfig,
    symbols: Vec<String>,
    params: Vec<SavedParam>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttnMechanism;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                num_layers: 1,
                cells_per_dir: 3,
                proj_dim: 4,
                subsample_layers: vec![1],
                input_dim: 5,
            },
            attention: AttnConfig {
                mechanism: AttnMechanism::Location,
                gamma: 2.0,
                num_conv_filters: 2,
                conv_width: 3,
                attn_dim: 3,
                decoder_cells: 3,
                embed_dim: 2,
            },
            init_range: 0.1,
        }
    }

    fn toy_model(seed: u64) -> Model {
        Model::init(toy_config(), Vocab::synthetic(5).unwrap(), seed).unwrap()
    }

    fn ramp_features(t: usize, d: usize) -> Tensor2 {
        Tensor2::from_fn(t, d, |r, c| 0.05 * r as f64 - 0.02 * c as f64)
    }

    #[test]
    fn initialization_is_seed_deterministic() {
        let a = toy_model(7);
        let b = toy_model(7);
        assert_eq!(a.store.len(), b.store.len());
        for (pa, pb) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.value, pb.value);
        }
        let c = toy_model(8);
        let differs = a
            .store
            .iter()
            .zip(c.store.iter())
            .any(|(pa, pc)| pa.value != pc.value);
        assert!(differs);
    }

    #[test]
    fn head_shapes_follow_the_vocabulary_layout() {
        let m = toy_model(0);
        assert_eq!(m.vocab.k_att(), 6);
        assert_eq!(m.vocab.k_ctc(), 6);
        assert_eq!(m.store.get(m.ctc_w).value.shape(), (4, 6));
        assert_eq!(m.attention.k_att(&m.store), 6);

        let h = m.encode(&ramp_features(6, 5)).unwrap();
        assert_eq!(h.len(), 3);
        let q = m.ctc_posteriors(&h).unwrap();
        assert_eq!(q.q().shape(), (3, 6));
        assert_eq!(q.blank(), 5);
    }

    #[test]
    fn greedy_transcription_stays_in_the_plain_label_range() {
        let m = toy_model(1);
        let hyp = m.ctc_decode(&ramp_features(8, 5)).unwrap();
        assert!(hyp.labels().iter().all(|&l| l < m.vocab.base()));
    }

    #[test]
    fn save_load_round_trip_preserves_behavior() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = toy_model(2);
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();

        assert_eq!(back.config, m.config);
        assert_eq!(back.vocab, m.vocab);
        for (pa, pb) in m.store.iter().zip(back.store.iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.value, pb.value);
        }
        let x = ramp_features(6, 5);
        let qa = m.ctc_posteriors(&m.encode(&x).unwrap()).unwrap();
        let qb = back.ctc_posteriors(&back.encode(&x).unwrap()).unwrap();
        assert_eq!(qa.q(), qb.q());
    }

    #[test]
    fn malformed_model_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = toy_model(3);
        m.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();

        fs::write(&path, text.replace("hark-model", "other-model")).unwrap();
        assert!(matches!(
            Model::load(&path).unwrap_err(),
            Error::Format { .. }
        ));

        fs::write(
            &path,
            text.replace("\"enc.l0.proj.b\"", "\"enc.l0.proj.c\""),
        )
        .unwrap();
        assert!(matches!(
            Model::load(&path).unwrap_err(),
            Error::Format { .. }
        ));

        fs::write(&path, text.replace("{}", "")).unwrap();
        let _ = Model::load(&path);
    }
}
