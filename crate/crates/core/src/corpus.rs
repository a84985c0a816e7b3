//! Corpus handling: manifests binding utterances to speakers, images and
//! splits; feature loading; epoch batching; and a deterministic synthetic
//! corpus generator with ground-truth semantics for desk-scale
//! experiments.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::audio_frontend::FeatureMatrix;
use crate::error::{Error, Result};
use crate::ssem;
use crate::util::{randn, sub_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Manifest(format!("unknown split '{other}'"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Where an utterance's signal lives: raw audio (needs featurization) or
/// a precomputed SSEM feature file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    Audio(PathBuf),
    Features(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub speaker_id: String,
    pub image_id: String,
    pub split: Split,
    pub source: Source,
    pub image_feature_path: Option<PathBuf>,
}

impl ManifestEntry {
    /// One manifest line: whitespace-separated key=value fields. Paths
    /// therefore must not contain whitespace.
    pub fn to_line(&self) -> String {
        let mut fields = vec![
            format!("utt={}", self.utterance_id),
            format!("speaker={}", self.speaker_id),
            format!("image={}", self.image_id),
            format!("split={}", self.split),
        ];
        match &self.source {
            Source::Audio(p) => fields.push(format!("audio={}", p.display())),
            Source::Features(p) => fields.push(format!("features={}", p.display())),
        }
        if let Some(p) = &self.image_feature_path {
            fields.push(format!("image_features={}", p.display()));
        }
        fields.join("\t")
    }
}

fn parse_line(line: &str, lineno: usize) -> Result<ManifestEntry> {
    let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
    for tok in line.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| Error::Manifest(format!("line {lineno}: bad field '{tok}'")))?;
        fields.insert(k, v);
    }
    let need = |k: &str| -> Result<&str> {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| Error::Manifest(format!("line {lineno}: missing field '{k}'")))
    };
    let split = Split::from_str(need("split")?)
        .map_err(|e| Error::Manifest(format!("line {lineno}: {e}")))?;
    let source = match (fields.get("audio"), fields.get("features")) {
        (Some(a), None) => Source::Audio(PathBuf::from(a)),
        (None, Some(f)) => Source::Features(PathBuf::from(f)),
        _ => {
            return Err(Error::Manifest(format!(
                "line {lineno}: exactly one of audio=/features= required"
            )))
        }
    };
    Ok(ManifestEntry {
        utterance_id: need("utt")?.to_string(),
        speaker_id: need("speaker")?.to_string(),
        image_id: need("image")?.to_string(),
        split,
        source,
        image_feature_path: fields.get("image_features").map(PathBuf::from),
    })
}

/// Loads and validates a manifest. Relative paths resolve against the
/// manifest's directory; referenced source files must exist.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |p: &PathBuf| -> PathBuf {
        if p.is_absolute() {
            p.clone()
        } else {
            base.join(p)
        }
    };
    let mut seen = BTreeSet::new();
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut entry = parse_line(line, lineno)?;
        if !seen.insert(entry.utterance_id.clone()) {
            return Err(Error::Manifest(format!(
                "line {lineno}: duplicate utterance id '{}'",
                entry.utterance_id
            )));
        }
        entry.source = match entry.source {
            Source::Audio(p) => Source::Audio(resolve(&p)),
            Source::Features(p) => Source::Features(resolve(&p)),
        };
        entry.image_feature_path = entry.image_feature_path.map(|p| resolve(&p));
        let source_path = match &entry.source {
            Source::Audio(p) | Source::Features(p) => p,
        };
        if !source_path.exists() {
            return Err(Error::Manifest(format!(
                "line {lineno}: source file {} does not exist",
                source_path.display()
            )));
        }
        entries.push(entry);
    }
    Ok(entries)
}

pub fn save_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&e.to_line());
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// A manifest with its feature matrices loaded, row-aligned.
pub struct Dataset {
    pub entries: Vec<ManifestEntry>,
    pub features: Vec<FeatureMatrix>,
}

impl Dataset {
    /// Loads features for every entry; entries still pointing at raw
    /// audio are an error (run featurization first).
    pub fn load(manifest_path: &Path) -> Result<Dataset> {
        let entries = load_manifest(manifest_path)?;
        Self::from_entries(entries)
    }

    pub fn from_entries(entries: Vec<ManifestEntry>) -> Result<Dataset> {
        let mut features = Vec::with_capacity(entries.len());
        for e in &entries {
            match &e.source {
                Source::Features(p) => features.push(ssem::read_matrix(p)?),
                Source::Audio(p) => {
                    return Err(Error::Data(format!(
                        "utterance {} still references raw audio {}; featurize first",
                        e.utterance_id,
                        p.display()
                    )))
                }
            }
        }
        Ok(Dataset { entries, features })
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Image feature rows aligned with the given entry indices.
    pub fn load_image_features(&self, indices: &[usize]) -> Result<Array2<f32>> {
        let mut rows: Vec<Array2<f32>> = Vec::with_capacity(indices.len());
        for &i in indices {
            let e = &self.entries[i];
            let path = e.image_feature_path.as_ref().ok_or_else(|| {
                Error::Data(format!("utterance {} has no image features", e.utterance_id))
            })?;
            let m = ssem::read_matrix(path)?;
            if m.nrows() != 1 {
                return Err(Error::Data(format!(
                    "image feature file {} should hold a single row, has {}",
                    path.display(),
                    m.nrows()
                )));
            }
            if let Some(first) = rows.first() {
                if first.ncols() != m.ncols() {
                    return Err(Error::Data(format!(
                        "inconsistent image feature width in {}",
                        path.display()
                    )));
                }
            }
            rows.push(m);
        }
        let dim = rows.first().map(|r| r.ncols()).unwrap_or(0);
        let mut out = Array2::zeros((rows.len(), dim));
        for (r, m) in rows.iter().enumerate() {
            out.row_mut(r).assign(&m.row(0));
        }
        Ok(out)
    }
}

/// One epoch of batches over `indices`: a seeded permutation chunked to
/// `batch_size`. With `speaker_blocked` every batch holds a single
/// speaker's utterances. Every index appears exactly once per epoch.
pub fn batcher(
    dataset: &Dataset,
    indices: &[usize],
    batch_size: usize,
    speaker_blocked: bool,
    seed: u64,
) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "batcher"));
    let shuffle = |v: &mut Vec<usize>, rng: &mut ChaCha8Rng| {
        for i in (1..v.len()).rev() {
            let j = rng.gen_range(0..=i);
            v.swap(i, j);
        }
    };
    if !speaker_blocked {
        let mut order = indices.to_vec();
        shuffle(&mut order, &mut rng);
        return order.chunks(batch_size).map(|c| c.to_vec()).collect();
    }
    // group by speaker (sorted for determinism), shuffle within groups,
    // then shuffle the order of the resulting single-speaker batches
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        groups.entry(dataset.entries[i].speaker_id.as_str()).or_default().push(i);
    }
    let mut batches = Vec::new();
    for (_, mut group) in groups {
        shuffle(&mut group, &mut rng);
        batches.extend(group.chunks(batch_size).map(|c| c.to_vec()));
    }
    for i in (1..batches.len()).rev() {
        let j = rng.gen_range(0..=i);
        batches.swap(i, j);
    }
    batches
}

/// Parameters of the synthetic corpus. Each semantic class (pseudo-image)
/// has a fixed word sequence; paraphrases realize it with order jitter,
/// frame noise and a per-speaker additive offset.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub paraphrases_per_class: usize,
    pub vocab_size: usize,
    pub words_per_utterance: (usize, usize),
    pub frames_per_word: (usize, usize),
    pub noise_std: f64,
    pub num_speakers: usize,
    pub speaker_shift_std: f64,
    pub image_dim: usize,
    pub image_noise_std: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 40,
            paraphrases_per_class: 5,
            vocab_size: 30,
            words_per_utterance: (4, 7),
            frames_per_word: (12, 20),
            noise_std: 0.3,
            num_speakers: 4,
            speaker_shift_std: 1.0,
            image_dim: 64,
            image_noise_std: 0.05,
            seed: 0,
        }
    }
}

/// Minimum frame count every generated utterance must reach so both the
/// audio2vec (T ≥ 18) and segmatch (T ≥ 42) preconditions hold.
pub const MIN_SYNTH_FRAMES: usize = 42;

/// An in-memory synthetic corpus: dataset rows plus the per-utterance
/// pseudo-image feature rows (replicated per class).
pub struct SynthCorpus {
    pub dataset: Dataset,
    pub image_features: Array2<f32>,
}

/// Deterministic synthetic corpus. Same seed, same corpus, bit for bit.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthCorpus> {
    if spec.num_classes == 0
        || spec.paraphrases_per_class < 2
        || spec.vocab_size == 0
        || spec.num_speakers == 0
        || spec.words_per_utterance.0 > spec.words_per_utterance.1
        || spec.frames_per_word.0 > spec.frames_per_word.1
        || spec.frames_per_word.0 == 0
    {
        return Err(Error::Spec("invalid synthetic corpus spec".into()));
    }
    if spec.words_per_utterance.0 * spec.frames_per_word.0 < MIN_SYNTH_FRAMES {
        return Err(Error::Spec(format!(
            "spec can produce utterances shorter than {MIN_SYNTH_FRAMES} frames \
             ({} words × {} frames)",
            spec.words_per_utterance.0, spec.frames_per_word.0
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, "synth"));
    let max_wf = spec.frames_per_word.1;

    // per-word acoustic templates (13-dim pattern per frame) and
    // 64-dim semantic word vectors
    let word_templates: Vec<Array2<f64>> = (0..spec.vocab_size)
        .map(|_| Array2::from_shape_fn((max_wf, 13), |_| randn(&mut rng)))
        .collect();
    let word_semantics: Vec<Vec<f64>> = (0..spec.vocab_size)
        .map(|_| (0..spec.image_dim).map(|_| randn(&mut rng)).collect())
        .collect();

    // class word sequences and meaning vectors
    let mut class_words: Vec<Vec<usize>> = Vec::with_capacity(spec.num_classes);
    let mut class_meaning: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes);
    for _ in 0..spec.num_classes {
        let len = rng.gen_range(spec.words_per_utterance.0..=spec.words_per_utterance.1);
        let words: Vec<usize> = (0..len).map(|_| rng.gen_range(0..spec.vocab_size)).collect();
        let mut meaning = vec![0.0; spec.image_dim];
        for &w in &words {
            for (m, s) in meaning.iter_mut().zip(&word_semantics[w]) {
                *m += s;
            }
        }
        let norm = meaning.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for m in meaning.iter_mut() {
            *m /= norm;
        }
        class_words.push(words);
        class_meaning.push(meaning);
    }

    let speaker_offsets: Vec<Vec<f64>> = (0..spec.num_speakers)
        .map(|_| (0..13).map(|_| randn(&mut rng) * spec.speaker_shift_std).collect())
        .collect();

    let mut entries = Vec::new();
    let mut features = Vec::new();
    let mut image_rows = Vec::new();
    for class in 0..spec.num_classes {
        // one pseudo-image per class: meaning vector plus small noise
        let image: Vec<f32> = class_meaning[class]
            .iter()
            .map(|v| (*v + randn(&mut rng) * spec.image_noise_std) as f32)
            .collect();
        for p in 0..spec.paraphrases_per_class {
            // order jitter: a few random adjacent swaps
            let mut words = class_words[class].clone();
            for i in 0..words.len().saturating_sub(1) {
                if rng.gen_bool(0.3) {
                    words.swap(i, i + 1);
                }
            }
            let speaker = rng.gen_range(0..spec.num_speakers);
            let mut frames: Vec<[f64; 13]> = Vec::new();
            for &w in &words {
                let len = rng.gen_range(spec.frames_per_word.0..=spec.frames_per_word.1);
                for f in 0..len {
                    let mut row = [0.0; 13];
                    for c in 0..13 {
                        row[c] = word_templates[w][(f, c)]
                            + randn(&mut rng) * spec.noise_std
                            + speaker_offsets[speaker][c];
                    }
                    frames.push(row);
                }
            }
            debug_assert!(frames.len() >= MIN_SYNTH_FRAMES);
            let fm = Array2::from_shape_fn((frames.len(), 13), |(r, c)| frames[r][c] as f32);
            let utt_id = format!("u{class:03}_{p}");
            entries.push(ManifestEntry {
                utterance_id: utt_id.clone(),
                speaker_id: format!("spk{speaker}"),
                image_id: format!("img{class:03}"),
                split: Split::Train,
                source: Source::Features(PathBuf::from(format!("features/{utt_id}.ssem"))),
                image_feature_path: Some(PathBuf::from(format!("images/img{class:03}.ssem"))),
            });
            features.push(fm);
            image_rows.push(image.clone());
        }
    }
    let mut image_features = Array2::zeros((image_rows.len(), spec.image_dim));
    for (r, row) in image_rows.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            image_features[(r, c)] = *v;
        }
    }
    Ok(SynthCorpus { dataset: Dataset { entries, features }, image_features })
}

/// Writes a synthetic corpus to disk: `features/`, `images/` and the
/// manifest file. Returns the manifest path.
pub fn write_synth_corpus(corpus: &SynthCorpus, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("features"))?;
    std::fs::create_dir_all(dir.join("images"))?;
    let mut written_images = BTreeSet::new();
    for (entry, fm) in corpus.dataset.entries.iter().zip(&corpus.dataset.features) {
        let rel = match &entry.source {
            Source::Features(p) => p,
            Source::Audio(_) => unreachable!("synthetic corpora carry features"),
        };
        ssem::write_matrix(fm, &dir.join(rel))?;
    }
    for (i, entry) in corpus.dataset.entries.iter().enumerate() {
        let rel = entry.image_feature_path.as_ref().expect("synthetic entries have images");
        if written_images.insert(rel.clone()) {
            let row = corpus
                .image_features
                .row(i)
                .to_owned()
                .insert_axis(ndarray::Axis(0));
            ssem::write_matrix(&row, &dir.join(rel))?;
        }
    }
    let manifest = dir.join("manifest");
    save_manifest(&corpus.dataset.entries, &manifest)?;
    Ok(manifest)
}
