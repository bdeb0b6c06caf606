//! Implementations of the subcommands that touch datasets and models.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use hark::attention::attention_loss;
use hark::beam::{beam_decode, edit_distance};
use hark::ctc::LabelSeq;
use hark::data::{
    load_dataset, normalize_features, synth_task, write_dataset, Split, Utterance, Vocab,
};
use hark::model::Model;
use hark::mtl::train;

use crate::config::{DecoderKind, RunConfig};

fn require<'a>(value: &'a str, key: &str) -> Result<&'a Path> {
    if value.is_empty() {
        bail!("config key {key} is required (set it in the config file, via --set {key}=..., or with the matching flag)");
    }
    Ok(Path::new(value))
}

/// Create the output directory and drop the resolved configuration into it,
/// so every run can be replayed from its artifacts.
fn prepare_out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    let path = dir.join("config.resolved");
    fs::write(&path, cfg.resolved()).with_context(|| format!("writing {}", path.display()))?;
    Ok(dir)
}

fn load_split(path: &Path, split: Split, vocab: &Vocab) -> Result<Vec<Utterance>> {
    let utterances = load_dataset(path, split, vocab)
        .with_context(|| format!("loading {split} manifest {}", path.display()))?;
    if utterances.is_empty() {
        bail!("manifest {} lists no utterances", path.display());
    }
    Ok(utterances)
}

/// Train a model and write its parameters, the per-epoch log, and the
/// alignment of the probe utterance after every epoch.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let vocab_path = require(&cfg.vocab, "vocab")?;
    let vocab = Vocab::load(vocab_path)
        .with_context(|| format!("loading vocabulary {}", vocab_path.display()))?;
    let mut train_set = load_split(
        require(&cfg.train_manifest, "train_manifest")?,
        Split::Train,
        &vocab,
    )?;
    let mut valid_set = load_split(
        require(&cfg.valid_manifest, "valid_manifest")?,
        Split::Valid,
        &vocab,
    )?;
    if cfg.normalize {
        normalize_features(&mut train_set);
        normalize_features(&mut valid_set);
    }
    let input_dim = train_set[0].features.cols();

    let dir = prepare_out_dir(cfg)?;
    let mut model = Model::init(cfg.model_config(input_dim), vocab, cfg.seed)?;
    let outcome = train(&mut model, &train_set, &valid_set, &cfg.mtl_config())?;

    let model_path = dir.join("model.json");
    model.save(&model_path)?;
    outcome.log.save(&dir.join("train_log.csv"))?;
    let align_dir = dir.join("alignments");
    fs::create_dir_all(&align_dir)?;
    for (i, trace) in outcome.probe.iter().enumerate() {
        fs::write(
            align_dir.join(format!("probe_epoch_{:02}.csv", i + 1)),
            trace.to_csv(),
        )?;
    }

    let final_acc = outcome.log.records.last().map_or(f64::NAN, |r| r.val_acc);
    let best_acc = outcome
        .log
        .records
        .iter()
        .map(|r| r.val_acc)
        .fold(f64::NAN, f64::max);
    println!(
        "trained {} epochs on {} utterances (lambda {})",
        cfg.epochs,
        train_set.len(),
        cfg.lambda
    );
    if outcome.skipped_ctc > 0 {
        println!(
            "skipped {} utterance passes whose encoding was too short for the CTC loss",
            outcome.skipped_ctc
        );
    }
    println!("validation accuracy: final {final_acc:.4}, best {best_acc:.4}");
    println!("wrote {}", model_path.display());
    Ok(())
}

/// Decode a manifest with a trained model, writing `id TAB text` hypotheses
/// and a corpus character-error-rate summary.
pub fn cmd_decode(cfg: &RunConfig) -> Result<()> {
    let params_path = require(&cfg.params, "params")?;
    let model = Model::load(params_path)
        .with_context(|| format!("loading model {}", params_path.display()))?;
    if !cfg.vocab.is_empty() {
        let vocab = Vocab::load(Path::new(&cfg.vocab))
            .with_context(|| format!("loading vocabulary {}", cfg.vocab))?;
        if vocab != model.vocab {
            bail!(
                "vocabulary {} does not match the one stored in {}",
                cfg.vocab,
                params_path.display()
            );
        }
    }
    let mut utterances = load_split(
        require(&cfg.decode_manifest, "decode_manifest")?,
        Split::Eval,
        &model.vocab,
    )?;
    if cfg.normalize {
        normalize_features(&mut utterances);
    }

    let dir = prepare_out_dir(cfg)?;
    let mut hyps = String::new();
    let mut edits = 0usize;
    let mut ref_len = 0usize;
    for utt in &utterances {
        let labels: LabelSeq = match cfg.decoder {
            DecoderKind::Attention => {
                let h = model.encode(&utt.features)?;
                let beam_cfg = cfg.beam_config(h.len());
                let best = beam_decode(
                    &model.config.attention,
                    &model.store,
                    &model.attention,
                    &h,
                    &beam_cfg,
                )?
                .into_iter()
                .next()
                .expect("beam search returns at least one hypothesis");
                best.without_eos()
            }
            DecoderKind::GreedyCtc => model.ctc_decode(&utt.features)?,
        };
        edits += edit_distance(labels.labels(), utt.transcript.labels());
        ref_len += utt.transcript.len();
        let text = model.vocab.decode_labels(labels.labels())?;
        hyps.push_str(&format!("{}\t{}\n", utt.id, text));
    }
    fs::write(dir.join("hyps.tsv"), &hyps)?;

    let cer = if ref_len == 0 {
        0.0
    } else {
        edits as f64 / ref_len as f64
    };
    let summary = format!(
        "utterances: {}\ndecoder: {}\nedits: {edits}\nreference_labels: {ref_len}\ncer: {cer:.6}\n",
        utterances.len(),
        cfg.decoder,
    );
    fs::write(dir.join("summary.txt"), &summary)?;
    println!(
        "corpus CER {cer:.4} ({edits} edits / {ref_len} reference labels, {} utterances)",
        utterances.len()
    );
    println!("wrote {}", dir.join("hyps.tsv").display());
    Ok(())
}

/// Generate the synthetic dataset: features, manifests, vocabulary, and the
/// frame-alignment sidecar.
pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let dataset = synth_task(&cfg.synth_config())?;
    let dir = prepare_out_dir(cfg)?;
    write_dataset(&dataset, &dir)
        .with_context(|| format!("writing dataset to {}", dir.display()))?;
    println!(
        "wrote {} train and {} valid utterances to {}",
        dataset.train.len(),
        dataset.valid.len(),
        dir.display()
    );
    println!(
        "vocabulary: {} base symbols plus sos/eos and blank ({} total)",
        dataset.vocab.base(),
        dataset.vocab.size()
    );
    Ok(())
}

/// Export the teacher-forced alignment matrix of every listed utterance as
/// one CSV per utterance (rows = output steps, columns = encoded frames).
pub fn cmd_align_dump(cfg: &RunConfig) -> Result<()> {
    let params_path = require(&cfg.params, "params")?;
    let model = Model::load(params_path)
        .with_context(|| format!("loading model {}", params_path.display()))?;
    let mut utterances = load_split(
        require(&cfg.decode_manifest, "decode_manifest")?,
        Split::Eval,
        &model.vocab,
    )?;
    if cfg.normalize {
        normalize_features(&mut utterances);
    }

    let dir = prepare_out_dir(cfg)?;
    let align_dir = dir.join("alignments");
    fs::create_dir_all(&align_dir)?;
    for utt in &utterances {
        let h = model.encode(&utt.features)?;
        let mut labels = utt.transcript.labels().to_vec();
        labels.push(model.vocab.sos_eos);
        let (_, trace) = attention_loss(
            &model.config.attention,
            &model.store,
            &model.attention,
            &h,
            &LabelSeq::raw(labels),
        )?;
        fs::write(align_dir.join(format!("{}.csv", utt.id)), trace.to_csv())?;
    }
    println!(
        "wrote {} alignment matrices to {}",
        utterances.len(),
        align_dir.display()
    );
    Ok(())
}
