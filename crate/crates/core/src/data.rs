//! Data plumbing: vocabulary handling, the binary feature-file format,
//! tab-separated dataset manifests, and a synthetic monotone-alignment task
//! generator for desk-scale experiments.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ctc::LabelSeq;
use crate::error::{Error, Result};
use crate::numgrad::Tensor2;

const FEAT_MAGIC: &[u8; 4] = b"FEAT";
const FEAT_VERSION: u32 = 1;

const SOS_EOS_TOKEN: &str = "<sos/eos>";
const BLANK_TOKEN: &str = "<blank>";
const NOISE_TOKEN: &str = "<noise>";
const SPACE_TOKEN: &str = "<space>";

/// Ordered symbol inventory. The last symbol is always the blank and the
/// one before it the shared sos/eos marker, so the plain labels occupy
/// indices 0..base().
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    pub sos_eos: usize,
    pub blank: usize,
    pub noise: Option<usize>,
    pub space: Option<usize>,
}

impl Vocab {
    /// Build from an ordered symbol list, locating the special tokens.
    pub fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        if symbols.len() < 3 {
            return Err(Error::Config(format!(
                "vocabulary needs a label, {SOS_EOS_TOKEN}, and {BLANK_TOKEN}; got {} symbols",
                symbols.len()
            )));
        }
        let mut seen = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Config(format!("empty symbol at index {i}")));
            }
            if let Some(first) = seen.insert(s.clone(), i) {
                return Err(Error::Config(format!(
                    "symbol {s:?} appears at both index {first} and {i}"
                )));
            }
        }
        let blank = symbols.len() - 1;
        if symbols[blank] != BLANK_TOKEN {
            return Err(Error::Config(format!(
                "last symbol must be {BLANK_TOKEN}, got {:?}",
                symbols[blank]
            )));
        }
        let sos_eos = symbols.len() - 2;
        if symbols[sos_eos] != SOS_EOS_TOKEN {
            return Err(Error::Config(format!(
                "second-to-last symbol must be {SOS_EOS_TOKEN}, got {:?}",
                symbols[sos_eos]
            )));
        }
        let noise = seen.get(NOISE_TOKEN).copied();
        let space = seen.get(SPACE_TOKEN).copied();
        Ok(Vocab {
            symbols,
            sos_eos,
            blank,
            noise,
            space,
        })
    }

    /// Character inventory for transcript data: the 26 letters, apostrophe,
    /// period, dash, space, and noise, plus the sos/eos and blank markers.
    pub fn char_default() -> Self {
        let mut symbols: Vec<String> = ('A'..='Z').map(String::from).collect();
        symbols.push("'".into());
        symbols.push(".".into());
        symbols.push("-".into());
        symbols.push(SPACE_TOKEN.into());
        symbols.push(NOISE_TOKEN.into());
        symbols.push(SOS_EOS_TOKEN.into());
        symbols.push(BLANK_TOKEN.into());
        Vocab::from_symbols(symbols).expect("built-in inventory is well-formed")
    }

    /// Letter inventory of `n` plain labels for the synthetic task.
    pub fn synthetic(n: usize) -> Result<Self> {
        if !(2..=26).contains(&n) {
            return Err(Error::Config(format!(
                "synthetic vocabulary supports 2..=26 labels, got {n}"
            )));
        }
        let mut symbols: Vec<String> = ('A'..='Z').take(n).map(String::from).collect();
        symbols.push(SOS_EOS_TOKEN.into());
        symbols.push(BLANK_TOKEN.into());
        Vocab::from_symbols(symbols)
    }

    /// Total symbol count including sos/eos and blank.
    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    /// Count of plain labels (everything below sos/eos).
    pub fn base(&self) -> usize {
        self.sos_eos
    }

    /// Width of the attention label space: plain labels plus sos/eos.
    pub fn k_att(&self) -> usize {
        self.sos_eos + 1
    }

    /// Width of the connectionist head: plain labels plus blank. The blank
    /// occupies the last column, which matches its vocabulary index only
    /// after skipping sos/eos, so the head maps column base() to blank.
    pub fn k_ctc(&self) -> usize {
        self.base() + 1
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, index: usize) -> Option<&str> {
        self.symbols.get(index).map(String::as_str)
    }

    /// One label per character, uppercased; the space character maps to the
    /// space token.
    pub fn encode_transcript(&self, text: &str) -> Result<LabelSeq> {
        let mut by_char: HashMap<char, usize> = HashMap::new();
        for (i, s) in self.symbols.iter().enumerate().take(self.base()) {
            let mut chars = s.chars();
            if let (Some(c), None) = (chars.next(), chars.next()) {
                by_char.insert(c, i);
            }
        }
        let mut labels = Vec::new();
        for (position, ch) in text.chars().enumerate() {
            let ch = ch.to_ascii_uppercase();
            let index = if ch == ' ' {
                self.space
            } else {
                by_char.get(&ch).copied()
            };
            match index {
                Some(i) => labels.push(i),
                None => return Err(Error::Oov { ch, position }),
            }
        }
        Ok(LabelSeq::raw(labels))
    }

    /// Inverse of encoding for plain labels; special indices render as
    /// their angle-bracket tokens.
    pub fn decode_labels(&self, labels: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &l in labels {
            match self.symbols.get(l) {
                Some(_) if Some(l) == self.space => out.push(' '),
                Some(s) => out.push_str(s),
                None => {
                    return Err(Error::Argument(format!(
                        "label {l} outside the {}-symbol vocabulary",
                        self.size()
                    )))
                }
            }
        }
        Ok(out)
    }

    /// One symbol per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.symbols.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let symbols: Vec<String> = text.lines().map(String::from).collect();
        Vocab::from_symbols(symbols)
    }
}

/// One transcribed input: a T×D feature matrix and its raw label sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: Tensor2,
    pub transcript: LabelSeq,
}

impl Utterance {
    pub fn new(id: String, features: Tensor2, transcript: LabelSeq, vocab: &Vocab) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Argument(format!("utterance {id} has no frames")));
        }
        if !features.all_finite() {
            return Err(Error::NonFinite(format!("features of utterance {id}")));
        }
        if let Some(&l) = transcript.labels().iter().find(|&&l| l >= vocab.base()) {
            return Err(Error::Argument(format!(
                "utterance {id} transcript label {l} is not a plain label"
            )));
        }
        Ok(Utterance {
            id,
            features,
            transcript,
        })
    }

    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

/// Write a T×D matrix in the binary feature format.
pub fn save_features(path: &Path, features: &Tensor2) -> Result<()> {
    if features.rows() == 0 || features.cols() == 0 {
        return Err(Error::Argument(
            "feature files need at least one frame and one dimension".into(),
        ));
    }
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    file.write_all(FEAT_MAGIC)?;
    file.write_all(&FEAT_VERSION.to_le_bytes())?;
    file.write_all(&(features.rows() as u32).to_le_bytes())?;
    file.write_all(&(features.cols() as u32).to_le_bytes())?;
    for v in features.data() {
        file.write_all(&v.to_le_bytes())?;
    }
    file.flush()?;
    Ok(())
}

fn format_err(path: &Path, offset: u64, details: String) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        details,
    }
}

/// Read a feature file back into a T×D matrix.
pub fn load_features(path: &Path) -> Result<Tensor2> {
    let bytes = fs::read(path)?;
    let header = |at: usize| -> Result<u32> {
        let end = at + 4;
        if bytes.len() < end {
            return Err(format_err(
                path,
                bytes.len() as u64,
                format!("file ends inside the header, need {end} bytes"),
            ));
        }
        Ok(u32::from_le_bytes(bytes[at..end].try_into().unwrap()))
    };
    if bytes.len() < 4 || &bytes[..4] != FEAT_MAGIC {
        return Err(format_err(path, 0, "missing FEAT magic".into()));
    }
    let version = header(4)?;
    if version != FEAT_VERSION {
        return Err(format_err(
            path,
            4,
            format!("unsupported version {version}, expected {FEAT_VERSION}"),
        ));
    }
    let t = header(8)? as usize;
    let d = header(12)? as usize;
    if t == 0 || d == 0 {
        return Err(format_err(path, 8, format!("degenerate shape {t}x{d}")));
    }
    let expected = 16 + 8 * t * d;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            bytes.len() as u64,
            format!(
                "expected {expected} bytes for a {t}x{d} matrix, found {}",
                bytes.len()
            ),
        ));
    }
    let mut data = Vec::with_capacity(t * d);
    for (i, chunk) in bytes[16..].chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(format_err(
                path,
                (16 + 8 * i) as u64,
                format!("non-finite feature value {v}"),
            ));
        }
        data.push(v);
    }
    Tensor2::from_vec(t, d, data)
}

/// Which portion of a corpus a manifest describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Valid => write!(f, "valid"),
            Split::Eval => write!(f, "eval"),
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "eval" => Ok(Split::Eval),
            other => Err(Error::Argument(format!(
                "unknown split {other:?}, expected train, valid, or eval"
            ))),
        }
    }
}

/// One manifest record. Relative feature paths resolve against the
/// directory containing the manifest file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub transcript: String,
}

/// Tab-separated listing of one split's utterances.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(split: Split, entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            if let Some(first) = seen.insert(e.id.clone(), i) {
                return Err(Error::Argument(format!(
                    "utterance id {:?} appears at both record {first} and {i}",
                    e.id
                )));
            }
        }
        Ok(Manifest { split, entries })
    }

    pub fn load(path: &Path, split: Split) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    details: format!("expected 3 tab-separated fields, got {}", fields.len()),
                });
            }
            if fields[0].is_empty() || fields[1].is_empty() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    details: "empty id or feature path".into(),
                });
            }
            entries.push(ManifestEntry {
                id: fields[0].to_string(),
                path: PathBuf::from(fields[1]),
                transcript: fields[2].to_string(),
            });
        }
        Manifest::new(split, entries).map_err(|e| match e {
            Error::Argument(details) => Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                details,
            },
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for e in &self.entries {
            text.push_str(&format!(
                "{}\t{}\t{}\n",
                e.id,
                e.path.display(),
                e.transcript
            ));
        }
        fs::write(path, text)?;
        Ok(())
    }
}

/// Load every utterance a manifest lists, encoding transcripts with `vocab`.
pub fn load_dataset(manifest_path: &Path, split: Split, vocab: &Vocab) -> Result<Vec<Utterance>> {
    let manifest = Manifest::load(manifest_path, split)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut utterances = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let resolved = if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            base.join(&entry.path)
        };
        let features = load_features(&resolved)?;
        let transcript = vocab.encode_transcript(&entry.transcript)?;
        utterances.push(Utterance::new(
            entry.id.clone(),
            features,
            transcript,
            vocab,
        )?);
    }
    Ok(utterances)
}

/// Normalize features to zero mean and unit variance per dimension across
/// a whole dataset. Constant dimensions are left centered only.
pub fn normalize_features(utterances: &mut [Utterance]) {
    if utterances.is_empty() {
        return;
    }
    let d = utterances[0].features.cols();
    let mut mean = vec![0.0; d];
    let mut count = 0usize;
    for u in utterances.iter() {
        for r in 0..u.features.rows() {
            for (m, v) in mean.iter_mut().zip(u.features.row(r)) {
                *m += v;
            }
        }
        count += u.features.rows();
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = vec![0.0; d];
    for u in utterances.iter() {
        for r in 0..u.features.rows() {
            for (s, (v, m)) in var.iter_mut().zip(u.features.row(r).iter().zip(&mean)) {
                *s += (v - m) * (v - m);
            }
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|s| {
            let sd = (s / count as f64).sqrt();
            if sd > 0.0 {
                1.0 / sd
            } else {
                1.0
            }
        })
        .collect();
    for u in utterances.iter_mut() {
        for r in 0..u.features.rows() {
            for (c, v) in u.features.row_mut(r).iter_mut().enumerate() {
                *v = (*v - mean[c]) * scale[c];
            }
        }
    }
}

/// Synthetic task shape: random label strings whose every label emits a
/// run of noisy one-hot frames, giving a monotone ground-truth alignment.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub num_train: usize,
    pub num_valid: usize,
    pub min_labels: usize,
    pub max_labels: usize,
    pub min_frames_per_label: usize,
    pub max_frames_per_label: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_size: 8,
            num_train: 500,
            num_valid: 50,
            min_labels: 5,
            max_labels: 15,
            min_frames_per_label: 3,
            max_frames_per_label: 8,
            noise_sigma: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=26).contains(&self.vocab_size) {
            return Err(Error::Config(format!(
                "vocab_size must be in 2..=26, got {}",
                self.vocab_size
            )));
        }
        if self.num_train == 0 || self.num_valid == 0 {
            return Err(Error::Config(
                "both splits need at least one utterance".into(),
            ));
        }
        if self.min_labels == 0 || self.min_labels > self.max_labels {
            return Err(Error::Config(format!(
                "label count range [{}, {}] is invalid",
                self.min_labels, self.max_labels
            )));
        }
        if self.min_frames_per_label == 0 || self.min_frames_per_label > self.max_frames_per_label {
            return Err(Error::Config(format!(
                "frames-per-label range [{}, {}] is invalid",
                self.min_frames_per_label, self.max_frames_per_label
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Generated utterance plus its frame-to-label-position alignment.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthUtterance {
    pub utterance: Utterance,
    /// alignment[t] = which transcript position frame t belongs to.
    pub alignment: Vec<usize>,
}

/// Output of the generator: both splits and the vocabulary they use.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub vocab: Vocab,
    pub train: Vec<SynthUtterance>,
    pub valid: Vec<SynthUtterance>,
}

fn synth_utterance(
    rng: &mut ChaCha8Rng,
    config: &SynthConfig,
    vocab: &Vocab,
    id: String,
) -> Result<SynthUtterance> {
    let noise = Normal::new(0.0, config.noise_sigma)
        .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
    let u = rng.gen_range(config.min_labels..=config.max_labels);
    let labels: Vec<usize> = (0..u)
        .map(|_| rng.gen_range(0..config.vocab_size))
        .collect();
    let mut rows = Vec::new();
    let mut alignment = Vec::new();
    for (pos, &label) in labels.iter().enumerate() {
        let run = rng.gen_range(config.min_frames_per_label..=config.max_frames_per_label);
        for _ in 0..run {
            let mut frame = vec![0.0; config.vocab_size];
            frame[label] = 1.0;
            for v in &mut frame {
                *v += noise.sample(rng);
            }
            rows.push(frame);
            alignment.push(pos);
        }
    }
    let mut features = Tensor2::zeros(rows.len(), config.vocab_size);
    for (r, row) in rows.iter().enumerate() {
        features.row_mut(r).copy_from_slice(row);
    }
    let utterance = Utterance::new(id, features, LabelSeq::raw(labels), vocab)?;
    Ok(SynthUtterance {
        utterance,
        alignment,
    })
}

/// Generate both splits deterministically from the seed.
pub fn synth_task(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let vocab = Vocab::synthetic(config.vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut train = Vec::with_capacity(config.num_train);
    for i in 0..config.num_train {
        train.push(synth_utterance(
            &mut rng,
            config,
            &vocab,
            format!("train-{i:04}"),
        )?);
    }
    let mut valid = Vec::with_capacity(config.num_valid);
    for i in 0..config.num_valid {
        valid.push(synth_utterance(
            &mut rng,
            config,
            &vocab,
            format!("valid-{i:04}"),
        )?);
    }
    Ok(SynthDataset {
        vocab,
        train,
        valid,
    })
}

/// Write a generated dataset as feature files, manifests, vocabulary, and
/// the alignment sidecar, all under `dir`.
pub fn write_dataset(dataset: &SynthDataset, dir: &Path) -> Result<()> {
    let features_dir = dir.join("features");
    fs::create_dir_all(&features_dir)?;
    let mut alignments = String::new();
    for (name, split) in [("train", &dataset.train), ("valid", &dataset.valid)] {
        let mut entries = Vec::with_capacity(split.len());
        for su in split {
            let u = &su.utterance;
            let rel = PathBuf::from("features").join(format!("{}.feat", u.id));
            save_features(&dir.join(&rel), &u.features)?;
            entries.push(ManifestEntry {
                id: u.id.clone(),
                path: rel,
                transcript: dataset.vocab.decode_labels(u.transcript.labels())?,
            });
            let marks: Vec<String> = su.alignment.iter().map(usize::to_string).collect();
            alignments.push_str(&format!("{}\t{}\n", u.id, marks.join(" ")));
        }
        let manifest = Manifest::new(Split::from_str(name)?, entries)?;
        manifest.save(&dir.join(format!("{name}.tsv")))?;
    }
    fs::write(dir.join("alignments.tsv"), alignments)?;
    dataset.vocab.save(&dir.join("vocab.txt"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn char_vocabulary_layout_matches_the_label_inventory() {
        let v = Vocab::char_default();
        assert_eq!(v.size(), 33);
        assert_eq!(v.base(), 31);
        assert_eq!(v.k_att(), 32);
        assert_eq!(v.k_ctc(), 32);
        assert_eq!(v.blank, 32);
        assert_eq!(v.sos_eos, 31);
        assert_eq!(v.noise, Some(30));
        assert_eq!(v.space, Some(29));
        assert_eq!(v.symbol(0), Some("A"));
        assert_eq!(v.symbol(25), Some("Z"));
    }

    #[test]
    fn transcripts_encode_per_character_and_uppercase() {
        let v = Vocab::char_default();
        assert_eq!(v.encode_transcript("CAT").unwrap().labels(), &[2, 0, 19]);
        assert_eq!(v.encode_transcript("cat").unwrap().labels(), &[2, 0, 19]);
        assert_eq!(v.encode_transcript("A B").unwrap().labels(), &[0, 29, 1]);
        assert_eq!(
            v.encode_transcript("IT'S OK.").unwrap().labels(),
            &[8, 19, 26, 18, 29, 14, 10, 27]
        );
        match v.encode_transcript("caté").unwrap_err() {
            Error::Oov { ch, position } => assert_eq!((ch, position), ('é', 3)),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn decoding_inverts_encoding() {
        let v = Vocab::char_default();
        for text in ["HELLO WORLD.", "IT'S A-OK", "Z"] {
            let labels = v.encode_transcript(text).unwrap();
            assert_eq!(v.decode_labels(labels.labels()).unwrap(), text);
        }
        assert!(v.decode_labels(&[99]).is_err());
    }

    #[test]
    fn vocabulary_file_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::synthetic(5).unwrap();
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);

        assert!(Vocab::from_symbols(vec!["A".into(), "<blank>".into()]).is_err());
        assert!(
            Vocab::from_symbols(vec!["A".into(), "<blank>".into(), "<sos/eos>".into()]).is_err()
        );
        assert!(Vocab::from_symbols(vec![
            "A".into(),
            "A".into(),
            "<sos/eos>".into(),
            "<blank>".into()
        ])
        .is_err());
    }

    #[test]
    fn feature_files_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.feat");
        let t = Tensor2::from_fn(7, 120, |r, c| {
            (r as f64 - 3.0) * 1e-13 + (c as f64).sin() * 1e6
        });
        save_features(&path, &t).unwrap();
        let back = load_features(&path).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.shape(), (7, 120));
    }

    #[test]
    fn corrupt_feature_files_report_the_byte_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.feat");
        let t = Tensor2::filled(2, 3, 0.5);
        save_features(&path, &t).unwrap();

        let full = fs::read(&path).unwrap();
        fs::write(&path, &full[..full.len() - 5]).unwrap();
        match load_features(&path).unwrap_err() {
            Error::Format {
                offset, details, ..
            } => {
                assert_eq!(offset, (full.len() - 5) as u64);
                assert!(details.contains("expected 64 bytes"), "{details}");
            }
            other => panic!("unexpected error {other:?}"),
        }

        let mut bad_magic = full.clone();
        bad_magic[0] = b'X';
        fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(
            load_features(&path).unwrap_err(),
            Error::Format { offset: 0, .. }
        ));

        let mut nan = full.clone();
        nan[16..24].copy_from_slice(&f64::NAN.to_le_bytes());
        fs::write(&path, &nan).unwrap();
        assert!(matches!(
            load_features(&path).unwrap_err(),
            Error::Format { offset: 16, .. }
        ));
    }

    #[test]
    fn manifests_round_trip_and_reject_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.tsv");
        let m = Manifest::new(
            Split::Train,
            vec![
                ManifestEntry {
                    id: "a".into(),
                    path: "features/a.feat".into(),
                    transcript: "AB BA".into(),
                },
                ManifestEntry {
                    id: "b".into(),
                    path: "/abs/b.feat".into(),
                    transcript: "".into(),
                },
            ],
        )
        .unwrap();
        m.save(&path).unwrap();
        assert_eq!(Manifest::load(&path, Split::Train).unwrap(), m);

        fs::write(&path, "a\tp\tT\na\tq\tT\n").unwrap();
        assert!(matches!(
            Manifest::load(&path, Split::Train).unwrap_err(),
            Error::Parse { .. }
        ));

        fs::write(&path, "only-two\tfields\n").unwrap();
        match Manifest::load(&path, Split::Train).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn datasets_resolve_feature_paths_against_the_manifest_directory() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("feats");
        fs::create_dir_all(&sub).unwrap();
        let features = Tensor2::filled(3, 2, 0.25);
        save_features(&sub.join("x.feat"), &features).unwrap();
        fs::write(dir.path().join("eval.tsv"), "x\tfeats/x.feat\tAB\n").unwrap();

        let vocab = Vocab::synthetic(4).unwrap();
        let utts = load_dataset(&dir.path().join("eval.tsv"), Split::Eval, &vocab).unwrap();
        assert_eq!(utts.len(), 1);
        assert_eq!(utts[0].features, features);
        assert_eq!(utts[0].transcript.labels(), &[0, 1]);
    }

    #[test]
    fn synthetic_generation_is_seed_deterministic() {
        let config = SynthConfig {
            num_train: 4,
            num_valid: 2,
            ..SynthConfig::default()
        };
        let a = synth_task(&config).unwrap();
        let b = synth_task(&config).unwrap();
        assert_eq!(a, b);
        let c = synth_task(&SynthConfig { seed: 1, ..config }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_alignments_are_monotone_and_consistent() {
        let config = SynthConfig {
            num_train: 6,
            num_valid: 2,
            ..SynthConfig::default()
        };
        let data = synth_task(&config).unwrap();
        assert_eq!(data.train.len(), 6);
        assert_eq!(data.valid.len(), 2);
        for su in data.train.iter().chain(&data.valid) {
            let u = &su.utterance;
            assert_eq!(su.alignment.len(), u.frames());
            assert_eq!(u.features.cols(), config.vocab_size);
            let labels = u.transcript.labels();
            assert!((config.min_labels..=config.max_labels).contains(&labels.len()));
            assert!(su.alignment.windows(2).all(|w| w[0] <= w[1]));
            assert_eq!(*su.alignment.last().unwrap(), labels.len() - 1);
            for (t, &pos) in su.alignment.iter().enumerate() {
                let run = su.alignment.iter().filter(|&&p| p == pos).count();
                assert!((config.min_frames_per_label..=config.max_frames_per_label).contains(&run));
                assert!(labels[pos] < config.vocab_size, "frame {t}");
            }
        }
    }

    #[test]
    fn noiseless_frames_are_classifiable_by_argmax() {
        let config = SynthConfig {
            num_train: 3,
            num_valid: 1,
            noise_sigma: 0.0,
            min_frames_per_label: 1,
            max_frames_per_label: 1,
            ..SynthConfig::default()
        };
        let data = synth_task(&config).unwrap();
        for su in &data.train {
            let labels = su.utterance.transcript.labels();
            for t in 0..su.utterance.frames() {
                let predicted = su.utterance.features.argmax_row(t);
                assert_eq!(predicted, labels[su.alignment[t]]);
                assert_eq!(su.utterance.features.get(t, predicted), 1.0);
            }
        }
    }

    #[test]
    fn written_datasets_load_back_identically() {
        let dir = tempfile::tempdir().unwrap();
        let config = SynthConfig {
            num_train: 3,
            num_valid: 2,
            ..SynthConfig::default()
        };
        let data = synth_task(&config).unwrap();
        write_dataset(&data, dir.path()).unwrap();

        let vocab = Vocab::load(&dir.path().join("vocab.txt")).unwrap();
        assert_eq!(vocab, data.vocab);
        let train = load_dataset(&dir.path().join("train.tsv"), Split::Train, &vocab).unwrap();
        assert_eq!(train.len(), 3);
        for (loaded, generated) in train.iter().zip(&data.train) {
            assert_eq!(loaded, &generated.utterance);
        }
        let alignments = fs::read_to_string(dir.path().join("alignments.tsv")).unwrap();
        assert_eq!(alignments.lines().count(), 5);
    }

    #[test]
    fn normalization_centers_and_scales_each_dimension() {
        let config = SynthConfig {
            num_train: 5,
            num_valid: 1,
            ..SynthConfig::default()
        };
        let data = synth_task(&config).unwrap();
        let mut utts: Vec<Utterance> = data.train.iter().map(|su| su.utterance.clone()).collect();
        normalize_features(&mut utts);
        let d = utts[0].features.cols();
        let total: usize = utts.iter().map(Utterance::frames).sum();
        for c in 0..d {
            let mut mean = 0.0;
            let mut var = 0.0;
            for u in &utts {
                for r in 0..u.features.rows() {
                    mean += u.features.get(r, c);
                }
            }
            mean /= total as f64;
            for u in &utts {
                for r in 0..u.features.rows() {
                    var += (u.features.get(r, c) - mean).powi(2);
                }
            }
            var /= total as f64;
            assert!(mean.abs() <= 1e-9, "dim {c} mean {mean}");
            assert!((var - 1.0).abs() <= 1e-9, "dim {c} var {var}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn encode_decode_is_a_bijection_on_plain_strings(
            indices in proptest::collection::vec(0usize..30, 1..20)
        ) {
            let v = Vocab::char_default();
            let text = v.decode_labels(&indices).unwrap();
            let labels = v.encode_transcript(&text).unwrap();
            prop_assert_eq!(labels.labels(), &indices[..]);
        }
    }
}
