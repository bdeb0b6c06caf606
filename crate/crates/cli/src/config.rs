//! Flat key-value run configuration shared by every subcommand.
//!
//! A [`RunConfig`] starts from built-in defaults, absorbs a `key = value`
//! file, then command-line overrides. Unknown keys are rejected, and
//! [`RunConfig::resolved`] renders the final state back into the same file
//! format so a run can be replayed from its dump alone.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use hark::attention::{AttnConfig, AttnMechanism};
use hark::beam::BeamConfig;
use hark::data::SynthConfig;
use hark::encoder::EncoderConfig;
use hark::model::ModelConfig;
use hark::mtl::MtlConfig;

/// Which head produces hypotheses during `decode`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    /// Beam search over the attention decoder.
    Attention,
    /// Best-path collapse of the CTC posteriors.
    GreedyCtc,
}

impl FromStr for DecoderKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(DecoderKind::Attention),
            "greedy-ctc" => Ok(DecoderKind::GreedyCtc),
            other => bail!("unknown decoder {other:?}, expected attention or greedy-ctc"),
        }
    }
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecoderKind::Attention => write!(f, "attention"),
            DecoderKind::GreedyCtc => write!(f, "greedy-ctc"),
        }
    }
}

/// Every tunable of every subcommand, flattened into one namespace.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // Paths and artifact plumbing.
    pub out_dir: String,
    pub train_manifest: String,
    pub valid_manifest: String,
    pub decode_manifest: String,
    pub vocab: String,
    pub params: String,
    pub normalize: bool,
    pub seed: u64,

    // Encoder shape.
    pub enc_layers: usize,
    pub enc_cells: usize,
    pub enc_proj: usize,
    pub enc_subsample: Vec<usize>,

    // Attention decoder shape.
    pub attn_mechanism: AttnMechanism,
    pub attn_gamma: f64,
    pub attn_filters: usize,
    pub attn_width: usize,
    pub attn_dim: usize,
    pub dec_cells: usize,
    pub embed_dim: usize,
    pub init_range: f64,

    // Training.
    pub lambda: f64,
    pub epochs: usize,
    pub clip_threshold: f64,
    pub adadelta_rho: f64,
    pub adadelta_eps: f64,

    // Decoding.
    pub decoder: DecoderKind,
    pub beam_size: usize,
    pub length_penalty: f64,
    /// Hard cap on decoded labels; 0 derives a cap from the input length.
    pub max_output_len: usize,

    // Synthetic data generation.
    pub synth_vocab: usize,
    pub synth_train: usize,
    pub synth_valid: usize,
    pub synth_min_labels: usize,
    pub synth_max_labels: usize,
    pub synth_min_run: usize,
    pub synth_max_run: usize,
    pub synth_noise: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: "out".into(),
            train_manifest: String::new(),
            valid_manifest: String::new(),
            decode_manifest: String::new(),
            vocab: String::new(),
            params: String::new(),
            normalize: false,
            seed: 0,
            enc_layers: 2,
            enc_cells: 32,
            enc_proj: 32,
            enc_subsample: vec![2],
            attn_mechanism: AttnMechanism::Location,
            attn_gamma: 2.0,
            attn_filters: 8,
            attn_width: 15,
            attn_dim: 32,
            dec_cells: 32,
            embed_dim: 16,
            init_range: 0.1,
            lambda: 0.2,
            epochs: 20,
            clip_threshold: 5.0,
            adadelta_rho: 0.95,
            adadelta_eps: 1e-6,
            decoder: DecoderKind::Attention,
            beam_size: 20,
            length_penalty: 0.0,
            max_output_len: 0,
            synth_vocab: 8,
            synth_train: 500,
            synth_valid: 50,
            synth_min_labels: 5,
            synth_max_labels: 15,
            synth_min_run: 3,
            synth_max_run: 8,
            synth_noise: 0.3,
        }
    }
}

fn parse_num<T>(key: &str, value: &str) -> Result<T>
where
    T: FromStr,
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("key {key}: cannot parse {value:?}: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => bail!("key {key}: expected true or false, got {other:?}"),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(vec![]);
    }
    value.split(',').map(|p| parse_num(key, p.trim())).collect()
}

fn parse_mechanism(key: &str, value: &str) -> Result<AttnMechanism> {
    match value {
        "content" => Ok(AttnMechanism::Content),
        "location" => Ok(AttnMechanism::Location),
        other => bail!("key {key}: expected content or location, got {other:?}"),
    }
}

impl RunConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "out_dir" => self.out_dir = value.into(),
            "train_manifest" => self.train_manifest = value.into(),
            "valid_manifest" => self.valid_manifest = value.into(),
            "decode_manifest" => self.decode_manifest = value.into(),
            "vocab" => self.vocab = value.into(),
            "params" => self.params = value.into(),
            "normalize" => self.normalize = parse_bool(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "enc_layers" => self.enc_layers = parse_num(key, value)?,
            "enc_cells" => self.enc_cells = parse_num(key, value)?,
            "enc_proj" => self.enc_proj = parse_num(key, value)?,
            "enc_subsample" => self.enc_subsample = parse_list(key, value)?,
            "attn_mechanism" => self.attn_mechanism = parse_mechanism(key, value)?,
            "attn_gamma" => self.attn_gamma = parse_num(key, value)?,
            "attn_filters" => self.attn_filters = parse_num(key, value)?,
            "attn_width" => self.attn_width = parse_num(key, value)?,
            "attn_dim" => self.attn_dim = parse_num(key, value)?,
            "dec_cells" => self.dec_cells = parse_num(key, value)?,
            "embed_dim" => self.embed_dim = parse_num(key, value)?,
            "init_range" => self.init_range = parse_num(key, value)?,
            "lambda" => self.lambda = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "clip_threshold" => self.clip_threshold = parse_num(key, value)?,
            "adadelta_rho" => self.adadelta_rho = parse_num(key, value)?,
            "adadelta_eps" => self.adadelta_eps = parse_num(key, value)?,
            "decoder" => self.decoder = value.parse()?,
            "beam_size" => self.beam_size = parse_num(key, value)?,
            "length_penalty" => self.length_penalty = parse_num(key, value)?,
            "max_output_len" => self.max_output_len = parse_num(key, value)?,
            "synth_vocab" => self.synth_vocab = parse_num(key, value)?,
            "synth_train" => self.synth_train = parse_num(key, value)?,
            "synth_valid" => self.synth_valid = parse_num(key, value)?,
            "synth_min_labels" => self.synth_min_labels = parse_num(key, value)?,
            "synth_max_labels" => self.synth_max_labels = parse_num(key, value)?,
            "synth_min_run" => self.synth_min_run = parse_num(key, value)?,
            "synth_max_run" => self.synth_max_run = parse_num(key, value)?,
            "synth_noise" => self.synth_noise = parse_num(key, value)?,
            other => bail!("unknown config key {other:?}"),
        }
        Ok(())
    }

    /// Apply a whole file of `key = value` lines. Blank lines and lines
    /// starting with `#` are skipped; later assignments win.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                anyhow!("{}: line {}: expected key = value", path.display(), i + 1)
            })?;
            self.set(key.trim(), value.trim())
                .with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        }
        Ok(())
    }

    /// Every key with its current value, in dump order.
    fn entries(&self) -> Vec<(&'static str, String)> {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("out_dir", self.out_dir.clone()),
            ("train_manifest", self.train_manifest.clone()),
            ("valid_manifest", self.valid_manifest.clone()),
            ("decode_manifest", self.decode_manifest.clone()),
            ("vocab", self.vocab.clone()),
            ("params", self.params.clone()),
            ("normalize", self.normalize.to_string()),
            ("seed", self.seed.to_string()),
            ("enc_layers", self.enc_layers.to_string()),
            ("enc_cells", self.enc_cells.to_string()),
            ("enc_proj", self.enc_proj.to_string()),
            ("enc_subsample", list(&self.enc_subsample)),
            ("attn_mechanism", self.attn_mechanism.to_string()),
            ("attn_gamma", self.attn_gamma.to_string()),
            ("attn_filters", self.attn_filters.to_string()),
            ("attn_width", self.attn_width.to_string()),
            ("attn_dim", self.attn_dim.to_string()),
            ("dec_cells", self.dec_cells.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("init_range", self.init_range.to_string()),
            ("lambda", self.lambda.to_string()),
            ("epochs", self.epochs.to_string()),
            ("clip_threshold", self.clip_threshold.to_string()),
            ("adadelta_rho", self.adadelta_rho.to_string()),
            ("adadelta_eps", self.adadelta_eps.to_string()),
            ("decoder", self.decoder.to_string()),
            ("beam_size", self.beam_size.to_string()),
            ("length_penalty", self.length_penalty.to_string()),
            ("max_output_len", self.max_output_len.to_string()),
            ("synth_vocab", self.synth_vocab.to_string()),
            ("synth_train", self.synth_train.to_string()),
            ("synth_valid", self.synth_valid.to_string()),
            ("synth_min_labels", self.synth_min_labels.to_string()),
            ("synth_max_labels", self.synth_max_labels.to_string()),
            ("synth_min_run", self.synth_min_run.to_string()),
            ("synth_max_run", self.synth_max_run.to_string()),
            ("synth_noise", self.synth_noise.to_string()),
        ]
    }

    /// The full configuration rendered as a reloadable `key = value` file.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for (key, value) in self.entries() {
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    pub fn encoder_config(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.enc_layers,
            cells_per_dir: self.enc_cells,
            proj_dim: self.enc_proj,
            subsample_layers: self.enc_subsample.clone(),
            input_dim,
        }
    }

    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder_config(input_dim),
            attention: AttnConfig {
                mechanism: self.attn_mechanism,
                gamma: self.attn_gamma,
                num_conv_filters: self.attn_filters,
                conv_width: self.attn_width,
                attn_dim: self.attn_dim,
                decoder_cells: self.dec_cells,
                embed_dim: self.embed_dim,
            },
            init_range: self.init_range,
        }
    }

    pub fn mtl_config(&self) -> MtlConfig {
        MtlConfig {
            lambda: self.lambda,
            epochs: self.epochs,
            clip_threshold: self.clip_threshold,
            adadelta_rho: self.adadelta_rho,
            adadelta_eps: self.adadelta_eps,
            seed: self.seed,
        }
    }

    /// Beam settings for one utterance whose encoding is `frames` long.
    pub fn beam_config(&self, frames: usize) -> BeamConfig {
        let cap = match self.max_output_len {
            0 => 2 * frames + 10,
            n => n,
        };
        BeamConfig {
            beam_size: self.beam_size,
            length_penalty: self.length_penalty,
            max_output_len: Some(cap),
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            vocab_size: self.synth_vocab,
            num_train: self.synth_train,
            num_valid: self.synth_valid,
            min_labels: self.synth_min_labels,
            max_labels: self.synth_max_labels,
            min_frames_per_label: self.synth_min_run,
            max_frames_per_label: self.synth_max_run,
            noise_sigma: self.synth_noise,
            seed: self.seed,
        }
    }
}
