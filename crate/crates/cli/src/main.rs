//! Command-line driver for the speechsem pipeline:
//! featurize → train → encode → eval, plus synthetic-corpus generation
//! and the artifact probe.
//!
//! Exit codes: 0 success, 1 usage/config, 2 data, 3 numerics.

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use speechsem::audio2vec;
use speechsem::audio_frontend::{self, FrontendConfig};
use speechsem::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use speechsem::config::{Model, RunConfig};
use speechsem::corpus::{
    self, generate_synthetic, load_manifest, save_manifest, Dataset, Source, Split, SynthSpec,
};
use speechsem::encoder::encode;
use speechsem::evaluation::{
    artifact_probe, mean_mfcc_baseline, paraphrase_retrieval, rsa, EmbeddingSet, MetricReport,
    ProbeReport,
};
use speechsem::nn::AdamState;
use speechsem::segmatch::{self, speaker_index};
use speechsem::ssem;
use speechsem::util::sub_seed;
use speechsem::{Error, Result};

#[derive(Parser)]
#[command(name = "speechsem", version, about = "Unsupervised semantic speech embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ProbeTarget {
    /// Dense index of the utterance's speaker id.
    Speaker,
    /// Dense index of the utterance's image id.
    Image,
}

#[derive(Subcommand)]
enum Command {
    /// Extract MFCC features for every audio entry in a manifest.
    Featurize {
        /// Input manifest with audio= entries.
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for the feature files.
        #[arg(long)]
        out_dir: PathBuf,
        /// Where to write the updated manifest.
        #[arg(long)]
        out_manifest: PathBuf,
        /// Apply corpus-level mean/variance normalization to c1..c12.
        #[arg(long)]
        normalize: bool,
    },
    /// Generate a seeded synthetic paraphrase corpus.
    GenSynthetic {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        classes: usize,
        #[arg(long, default_value_t = 5)]
        paraphrases: usize,
        #[arg(long, default_value_t = 4)]
        speakers: usize,
        #[arg(long, default_value_t = 0.3)]
        noise_std: f64,
        #[arg(long, default_value_t = 1.0)]
        speaker_shift_std: f64,
        #[arg(long)]
        words_min: Option<usize>,
        #[arg(long)]
        words_max: Option<usize>,
    },
    /// Train a model and write best/last checkpoints plus a log.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// key=value config file; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from a previous last.ckpt; epoch numbering continues.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Config overrides (key=value); these win over the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Embed a manifest split with a trained checkpoint.
    Encode {
        #[arg(long, conflicts_with = "mean_mfcc", required_unless_present = "mean_mfcc")]
        checkpoint: Option<PathBuf>,
        /// Use the mean-MFCC baseline instead of a model (N×13 output).
        #[arg(long)]
        mean_mfcc: bool,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an embedding file: paraphrase retrieval, RSA, optional probe.
    Eval {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
        /// Also run the artifact probe against this target.
        #[arg(long, value_enum)]
        probe: Option<ProbeTarget>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Artifact probe only: PCA-2 + 5-NN regression of a target id.
    Probe {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
        #[arg(long, value_enum)]
        target: ProbeTarget,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are not errors
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Featurize { manifest, out_dir, out_manifest, normalize } => {
            cmd_featurize(&manifest, &out_dir, &out_manifest, normalize)
        }
        Command::GenSynthetic {
            out_dir,
            seed,
            classes,
            paraphrases,
            speakers,
            noise_std,
            speaker_shift_std,
            words_min,
            words_max,
        } => {
            let mut spec = SynthSpec {
                num_classes: classes,
                paraphrases_per_class: paraphrases,
                num_speakers: speakers,
                noise_std,
                speaker_shift_std,
                seed,
                ..SynthSpec::default()
            };
            if let Some(lo) = words_min {
                spec.words_per_utterance.0 = lo;
            }
            if let Some(hi) = words_max {
                spec.words_per_utterance.1 = hi;
            }
            let corpus = generate_synthetic(&spec)?;
            let manifest = corpus::write_synth_corpus(&corpus, &out_dir)?;
            println!(
                "wrote {} utterances to {}",
                corpus.dataset.entries.len(),
                manifest.display()
            );
            Ok(())
        }
        Command::Train { manifest, config, out_dir, resume, set } => {
            cmd_train(&manifest, config.as_deref(), &out_dir, resume.as_deref(), &set)
        }
        Command::Encode { checkpoint, mean_mfcc, manifest, split, out } => {
            cmd_encode(checkpoint.as_deref(), mean_mfcc, &manifest, split, &out)
        }
        Command::Eval { embeddings, manifest, split, probe, seed, json } => {
            cmd_eval(&embeddings, &manifest, split, probe, seed, json)
        }
        Command::Probe { embeddings, manifest, split, target, seed } => {
            let (vectors, entries) = load_embeddings(&embeddings, &manifest, split)?;
            let report = run_probe(&vectors, &entries, target, seed)?;
            print!("{}", probe_text(&report));
            Ok(())
        }
    }
}

fn cmd_featurize(
    manifest: &Path,
    out_dir: &Path,
    out_manifest: &Path,
    normalize: bool,
) -> Result<()> {
    let mut entries = load_manifest(manifest)?;
    std::fs::create_dir_all(out_dir)?;
    let frontend = FrontendConfig::default();
    let mut failures: Vec<(String, Error)> = Vec::new();
    let mut computed = 0usize;
    let mut skipped = 0usize;
    for entry in entries.iter_mut() {
        let audio_path = match &entry.source {
            Source::Audio(p) => p.clone(),
            Source::Features(_) => {
                skipped += 1;
                continue;
            }
        };
        let target = out_dir.join(format!("{}.ssem", entry.utterance_id));
        if ssem::read_matrix(&target).is_ok() {
            // idempotence: an existing valid feature file is reused
            entry.source = Source::Features(target);
            skipped += 1;
            continue;
        }
        let result = audio_frontend::read_wav(&audio_path, frontend.sample_rate)
            .and_then(|clip| audio_frontend::extract_mfcc(&clip, &frontend))
            .and_then(|features| ssem::write_matrix(&features, &target));
        match result {
            Ok(()) => {
                entry.source = Source::Features(target);
                computed += 1;
            }
            Err(e) => failures.push((entry.utterance_id.clone(), e)),
        }
    }
    if normalize && failures.is_empty() {
        let mut features = Vec::with_capacity(entries.len());
        let mut paths = Vec::with_capacity(entries.len());
        for entry in &entries {
            if let Source::Features(p) = &entry.source {
                features.push(ssem::read_matrix(p)?);
                paths.push(p.clone());
            }
        }
        audio_frontend::mean_var_normalize(&mut features);
        for (f, p) in features.iter().zip(&paths) {
            ssem::write_matrix(f, p)?;
        }
    }
    save_manifest(&entries, out_manifest)?;
    println!("featurized {computed}, reused {skipped}, failed {}", failures.len());
    if !failures.is_empty() {
        for (id, e) in &failures {
            eprintln!("failed {id}: {e}");
        }
        return Err(Error::Data(format!("{} file(s) failed featurization", failures.len())));
    }
    Ok(())
}

fn cmd_train(
    manifest: &Path,
    config: Option<&Path>,
    out_dir: &Path,
    resume: Option<&Path>,
    overrides: &[String],
) -> Result<()> {
    let mut cfg = match config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for pair in overrides {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{pair}' is not key=value")))?;
        cfg.apply(k.trim(), v.trim())?;
    }
    print!("# run config\n{}", cfg.to_text());

    let dataset = Dataset::load(manifest)?;
    std::fs::create_dir_all(out_dir)?;
    let meta = cfg.to_text();
    let enc_cfg = cfg.encoder_config();
    let mut init_rng = seeded_rng(cfg.seed, "init");

    let (params, adam, start_epoch) = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.meta != meta {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different config",
                    path.display()
                )));
            }
            let adam = ckpt.adam.ok_or_else(|| {
                Error::Config(format!(
                    "checkpoint {} has no optimizer state; cannot resume",
                    path.display()
                ))
            })?;
            (ckpt.params, adam, ckpt.epochs_done as usize)
        }
        None => {
            let params = match cfg.model {
                Model::Segmatch => {
                    let train_idx = dataset.split_indices(Split::Train);
                    let speakers = speaker_index(&dataset, &train_idx);
                    let sm = cfg.segmatch_config(speakers.len());
                    segmatch::init_segmatch_params::<f32>(
                        &enc_cfg,
                        sm.adversary.as_ref(),
                        &mut init_rng,
                    )
                }
                Model::Audio2vecC => audio2vec::init_audio2vec_params::<f32>(
                    &enc_cfg,
                    audio2vec::Variant::C,
                    &mut init_rng,
                ),
                Model::Audio2vecU => audio2vec::init_audio2vec_params::<f32>(
                    &enc_cfg,
                    audio2vec::Variant::U,
                    &mut init_rng,
                ),
            };
            let adam = AdamState::new(&params);
            (params, adam, 0usize)
        }
    };

    let on_epoch = |rec: &speechsem::training::EpochRecord| println!("{}", rec.to_line());
    let outcome = match cfg.model {
        Model::Segmatch => {
            let train_idx = dataset.split_indices(Split::Train);
            let speakers = speaker_index(&dataset, &train_idx);
            let sm = cfg.segmatch_config(speakers.len());
            segmatch::train_segmatch(&dataset, &sm, params, adam, start_epoch, on_epoch)?
        }
        Model::Audio2vecC | Model::Audio2vecU => {
            let a2v = audio2vec::Audio2vecTrainConfig {
                encoder: enc_cfg.clone(),
                variant: if cfg.model == Model::Audio2vecC {
                    audio2vec::Variant::C
                } else {
                    audio2vec::Variant::U
                },
                lr: cfg.lr,
                max_epochs: cfg.max_epochs,
                clip: cfg.clip,
                batch_size: cfg.batch_size,
                speaker_blocked: cfg.speaker_blocked,
                seed: cfg.seed,
            };
            audio2vec::train_audio2vec(&dataset, &a2v, params, adam, start_epoch, on_epoch)?
        }
    };

    let mut log_text = String::new();
    for rec in &outcome.log {
        log_text.push_str(&rec.to_line());
        log_text.push('\n');
    }
    let log_path = out_dir.join("train.log");
    if start_epoch > 0 && log_path.exists() {
        let mut prior = std::fs::read_to_string(&log_path)?;
        prior.push_str(&log_text);
        std::fs::write(&log_path, prior)?;
    } else {
        std::fs::write(&log_path, log_text)?;
    }

    save_checkpoint(
        &out_dir.join("best.ckpt"),
        &Checkpoint {
            meta: meta.clone(),
            epochs_done: outcome.best_epoch as u32 + 1,
            params: outcome.best_params,
            adam: None,
        },
    )?;
    save_checkpoint(
        &out_dir.join("last.ckpt"),
        &Checkpoint {
            meta,
            epochs_done: (start_epoch + cfg.max_epochs) as u32,
            params: outcome.last_params,
            adam: Some(outcome.adam),
        },
    )?;
    println!("best_epoch={}", outcome.best_epoch);
    Ok(())
}

fn split_entries(dataset: &Dataset, split: SplitArg) -> Vec<usize> {
    match split {
        SplitArg::All => (0..dataset.entries.len()).collect(),
        SplitArg::Train => dataset.split_indices(Split::Train),
        SplitArg::Val => dataset.split_indices(Split::Val),
        SplitArg::Test => dataset.split_indices(Split::Test),
    }
}

fn cmd_encode(
    checkpoint: Option<&Path>,
    mean_mfcc: bool,
    manifest: &Path,
    split: SplitArg,
    out: &Path,
) -> Result<()> {
    let dataset = Dataset::load(manifest)?;
    let indices = split_entries(&dataset, split);
    if indices.is_empty() {
        return Err(Error::Data(format!("split {split:?} has no utterances")));
    }
    let embeddings = if mean_mfcc {
        let feats: Vec<_> = indices.iter().map(|&i| dataset.features[i].clone()).collect();
        mean_mfcc_baseline(&feats)
    } else {
        let path = checkpoint.expect("clap enforces checkpoint XOR mean_mfcc");
        let ckpt = load_checkpoint(path)?;
        let cfg = RunConfig::from_text(&ckpt.meta)
            .map_err(|e| Error::Config(format!("{}: bad checkpoint meta: {e}", path.display())))?;
        let enc_cfg = cfg.encoder_config();
        let dim = dataset.features[indices[0]].ncols();
        if dim != enc_cfg.input_dim {
            return Err(Error::Config(format!(
                "checkpoint expects {}-dim features, manifest has {dim}",
                enc_cfg.input_dim
            )));
        }
        let mut m = Array2::zeros((indices.len(), enc_cfg.hidden));
        for (row, &i) in indices.iter().enumerate() {
            let emb = encode(&ckpt.params, "enc", &enc_cfg, &dataset.features[i], None)
                .map_err(|e| match e {
                    Error::Data(msg) | Error::Length(msg) => Error::Data(format!(
                        "utterance {}: {msg}",
                        dataset.entries[i].utterance_id
                    )),
                    other => other,
                })?;
            m.row_mut(row).assign(&emb);
        }
        m
    };
    ssem::write_matrix(&embeddings, out)?;
    println!(
        "wrote {}x{} embeddings to {}",
        embeddings.nrows(),
        embeddings.ncols(),
        out.display()
    );
    Ok(())
}

fn load_embeddings(
    embeddings: &Path,
    manifest: &Path,
    split: SplitArg,
) -> Result<(Array2<f32>, Vec<corpus::ManifestEntry>)> {
    let entries = load_manifest(manifest)?;
    let indices: Vec<usize> = match split {
        SplitArg::All => (0..entries.len()).collect(),
        SplitArg::Train => select(&entries, Split::Train),
        SplitArg::Val => select(&entries, Split::Val),
        SplitArg::Test => select(&entries, Split::Test),
    };
    let vectors = ssem::read_matrix(embeddings)?;
    if vectors.nrows() != indices.len() {
        return Err(Error::Data(format!(
            "embedding file has {} rows but split {split:?} has {} utterances",
            vectors.nrows(),
            indices.len()
        )));
    }
    let entries = indices.into_iter().map(|i| entries[i].clone()).collect();
    Ok((vectors, entries))
}

fn select(entries: &[corpus::ManifestEntry], split: Split) -> Vec<usize> {
    entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.split == split)
        .map(|(i, _)| i)
        .collect()
}

/// Dense 0-based index per sorted unique id, as f64 regression targets.
fn id_targets(ids: &[String]) -> Vec<f64> {
    let mut unique: Vec<&String> = ids.iter().collect();
    unique.sort();
    unique.dedup();
    let index: BTreeMap<&String, usize> =
        unique.into_iter().enumerate().map(|(i, s)| (s, i)).collect();
    ids.iter().map(|s| index[s] as f64).collect()
}

fn run_probe(
    vectors: &Array2<f32>,
    entries: &[corpus::ManifestEntry],
    target: ProbeTarget,
    seed: u64,
) -> Result<ProbeReport> {
    let ids: Vec<String> = entries
        .iter()
        .map(|e| match target {
            ProbeTarget::Speaker => e.speaker_id.clone(),
            ProbeTarget::Image => e.image_id.clone(),
        })
        .collect();
    artifact_probe(vectors, &id_targets(&ids), seed)
}

fn probe_text(report: &ProbeReport) -> String {
    format!(
        "probe_r2={:.6}\nprobe_r2_relabeled={:.6}\n",
        report.r2, report.r2_relabeled
    )
}

fn cmd_eval(
    embeddings: &Path,
    manifest: &Path,
    split: SplitArg,
    probe: Option<ProbeTarget>,
    seed: u64,
    json: bool,
) -> Result<()> {
    let (vectors, entries) = load_embeddings(embeddings, manifest, split)?;
    let with_image = entries.iter().filter(|e| e.image_feature_path.is_some()).count();
    if with_image != 0 && with_image != entries.len() {
        return Err(Error::Data(format!(
            "{} of {} utterances have image features; need none or all",
            with_image,
            entries.len()
        )));
    }
    let has_images = with_image == entries.len() && !entries.is_empty();

    let es = EmbeddingSet {
        vectors: vectors.clone(),
        utterance_ids: entries.iter().map(|e| e.utterance_id.clone()).collect(),
        image_ids: entries.iter().map(|e| e.image_id.clone()).collect(),
        speaker_ids: Some(entries.iter().map(|e| e.speaker_id.clone()).collect()),
    };
    let retrieval = match paraphrase_retrieval(&es) {
        Ok(m) => Some(m),
        Err(Error::Data(_)) if has_images => {
            // single caption per image: only RSA is defined
            None
        }
        Err(Error::Data(msg)) => {
            return Err(Error::Data(format!(
                "paraphrase retrieval unavailable ({msg}) and no image features for rsa"
            )))
        }
        Err(e) => return Err(e),
    };

    let rsa_score = if has_images {
        let image_rows = load_image_rows(&entries)?;
        Some(rsa(&vectors, &image_rows)?)
    } else {
        None
    };
    let probe_report = match probe {
        Some(target) => Some(run_probe(&vectors, &entries, target, seed)?),
        None => None,
    };
    let report = MetricReport {
        num_utterances: entries.len(),
        retrieval,
        rsa: rsa_score,
        probe: probe_report,
    };
    if json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn load_image_rows(entries: &[corpus::ManifestEntry]) -> Result<Array2<f32>> {
    let mut rows: Vec<Array2<f32>> = Vec::with_capacity(entries.len());
    for e in entries {
        let path = e.image_feature_path.as_ref().expect("checked by caller");
        let m = ssem::read_matrix(path)?;
        if m.nrows() != 1 {
            return Err(Error::Data(format!(
                "{}: image feature file must have exactly 1 row",
                path.display()
            )));
        }
        rows.push(m);
    }
    let dim = rows[0].ncols();
    let mut out = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        if r.ncols() != dim {
            return Err(Error::Data("inconsistent image feature widths".into()));
        }
        out.row_mut(i).assign(&r.row(0));
    }
    Ok(out)
}

fn seeded_rng(seed: u64, name: &str) -> impl rand::Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(sub_seed(seed, name))
}
