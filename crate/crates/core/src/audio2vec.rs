//! Audio2vec context-prediction models: encode the middle third of an
//! utterance, decode the first and third thirds with per-chunk GRU
//! decoders, train with mean squared error.
//!
//! Variant C feeds the true previous target frame to the decoder
//! (teacher forcing); variant U feeds the context embedding at every
//! step and uses a learned initial state instead.

use ndarray::{s, Array2};
use rand::Rng;

use crate::corpus::{batcher, Dataset, Split};
use crate::encoder::{encode_graph, init_encoder_params, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{
    adam_step, clip_gradients, gru_step, init_gru_cell, init_linear, AdamConfig, AdamState,
    ParamSet, ParamVars,
};
use crate::segmatch::TrainOutcome;
use crate::tape::{Scalar, Tape, Var};
use crate::training::{validation_metrics, EpochRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Decoder sees the true previous frame as input (teacher forcing).
    C,
    /// Decoder sees only the context embedding; h_0 is a learned parameter.
    U,
}

/// First, middle and third contiguous chunks of one utterance.
pub struct ChunkTriple<T> {
    pub first: Array2<T>,
    pub middle: Array2<T>,
    pub third: Array2<T>,
}

/// Splits into (⌊T/3⌋, ⌊T/3⌋, T−2⌊T/3⌋); the remainder of T mod 3 goes
/// to the third chunk.
pub fn split_thirds<T: Scalar>(x: &Array2<T>) -> Result<ChunkTriple<T>> {
    let t = x.nrows();
    if t < 18 {
        return Err(Error::Length(format!(
            "utterance has {t} frames, audio2vec needs at least 18"
        )));
    }
    let third = t / 3;
    Ok(ChunkTriple {
        first: x.slice(s![..third, ..]).to_owned(),
        middle: x.slice(s![third..2 * third, ..]).to_owned(),
        third: x.slice(s![2 * third.., ..]).to_owned(),
    })
}

/// Per-chunk decoder prefixes; the two decoders share no parameters.
pub const DECODER_PREFIXES: [&str; 2] = ["dec.first", "dec.third"];
pub const ENCODER_PREFIX: &str = "enc";

/// Initializes encoder plus two unshared chunk decoders.
pub fn init_audio2vec_params<T: Scalar>(
    cfg: &EncoderConfig,
    variant: Variant,
    rng: &mut impl Rng,
) -> ParamSet<T> {
    let mut params = ParamSet::new();
    init_encoder_params(&mut params, ENCODER_PREFIX, cfg, rng);
    for prefix in DECODER_PREFIXES {
        let in_dim = match variant {
            Variant::C => cfg.input_dim,
            Variant::U => cfg.hidden,
        };
        init_gru_cell(&mut params, &format!("{prefix}.gru"), in_dim, cfg.hidden, rng);
        init_linear(&mut params, &format!("{prefix}.proj"), cfg.hidden, cfg.input_dim, false, rng);
        if variant == Variant::U {
            params.insert(format!("{prefix}.h0"), Array2::zeros((1, cfg.hidden)));
        }
    }
    params
}

/// Teacher-forced decoding: h starts at the context embedding, the input
/// at the first step is a zero frame, thereafter the true previous target
/// frame; each prediction is the projection of the updated state.
pub fn decode_chunk_c<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    prefix: &str,
    context: Var,
    target: &Array2<T>,
) -> Var {
    let len = target.nrows();
    debug_assert!(len >= 1);
    let input_dim = target.ncols();
    let gru = format!("{prefix}.gru");
    let proj = vars.var(&format!("{prefix}.proj.w"));
    let mut h = context;
    let mut preds = Vec::with_capacity(len);
    let mut input = tape.constant(Array2::zeros((1, input_dim)));
    for t in 0..len {
        h = gru_step(tape, vars, &gru, input, h);
        preds.push(tape.matmul(h, proj));
        if t + 1 < len {
            input = tape.constant(target.row(t).to_owned().insert_axis(ndarray::Axis(0)));
        }
    }
    tape.stack_rows(&preds)
}

/// Unconditioned decoding: the context embedding is the input at every
/// step, h_0 is the decoder's learned initial state.
pub fn decode_chunk_u<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    prefix: &str,
    context: Var,
    len: usize,
) -> Var {
    debug_assert!(len >= 1);
    let gru = format!("{prefix}.gru");
    let proj = vars.var(&format!("{prefix}.proj.w"));
    let mut h = vars.var(&format!("{prefix}.h0"));
    let mut preds = Vec::with_capacity(len);
    for _ in 0..len {
        h = gru_step(tape, vars, &gru, context, h);
        preds.push(tape.matmul(h, proj));
    }
    tape.stack_rows(&preds)
}

/// MSE over both target chunks: mean over all predicted frames and dims
/// of the squared error. Returns the loss node.
pub fn audio2vec_loss_graph<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    cfg: &EncoderConfig,
    variant: Variant,
    x: &Array2<T>,
) -> Result<Var> {
    let chunks = split_thirds(x)?;
    let (context, _) = encode_graph(tape, vars, ENCODER_PREFIX, cfg, &chunks.middle)?;
    let mut sq_sums = Vec::new();
    let mut total_elems = 0usize;
    for (prefix, target) in DECODER_PREFIXES.iter().zip([&chunks.first, &chunks.third]) {
        let pred = match variant {
            Variant::C => decode_chunk_c(tape, vars, prefix, context, target),
            Variant::U => decode_chunk_u(tape, vars, prefix, context, target.nrows()),
        };
        let tgt = tape.constant(target.clone());
        let diff = tape.sub(pred, tgt);
        sq_sums.push(tape.dot(diff, diff));
        total_elems += target.len();
    }
    let total = tape.add(sq_sums[0], sq_sums[1]);
    Ok(tape.scale(total, T::from_f64(1.0 / total_elems as f64).unwrap()))
}

/// Loss for one utterance at inference (no gradient use).
pub fn audio2vec_loss<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &EncoderConfig,
    variant: Variant,
    x: &Array2<T>,
) -> Result<T> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let loss = audio2vec_loss_graph(&mut tape, &vars, cfg, variant, x)?;
    Ok(tape.scalar(loss))
}

/// Hyperparameters of an audio2vec training run.
#[derive(Debug, Clone)]
pub struct Audio2vecTrainConfig {
    pub encoder: EncoderConfig,
    pub variant: Variant,
    pub lr: f64,
    pub max_epochs: usize,
    pub clip: f64,
    pub batch_size: usize,
    pub speaker_blocked: bool,
    pub seed: u64,
}

impl Default for Audio2vecTrainConfig {
    fn default() -> Self {
        Audio2vecTrainConfig {
            encoder: EncoderConfig::default(),
            variant: Variant::C,
            lr: 0.0002,
            max_epochs: 15,
            clip: 2.0,
            batch_size: 16,
            speaker_blocked: false,
            seed: 0,
        }
    }
}

/// Trains audio2vec for at most `max_epochs` epochs, logging validation
/// paraphrase retrieval on whole-utterance embeddings after each epoch;
/// the best checkpoint is the epoch argmax of recall@10 (ties earliest).
pub fn train_audio2vec(
    dataset: &Dataset,
    cfg: &Audio2vecTrainConfig,
    mut params: ParamSet<f32>,
    mut adam: AdamState<f32>,
    start_epoch: usize,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let train_idx = dataset.split_indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    let mut val_idx = dataset.split_indices(Split::Val);
    if val_idx.is_empty() {
        // desk-scale corpora may be unsplit; validate on the training data
        val_idx = train_idx.clone();
    }
    let adam_cfg = AdamConfig::with_lr(cfg.lr as f32);
    let mut log = Vec::new();
    let mut best: Option<(usize, ParamSet<f32>)> = None;

    for epoch in start_epoch..start_epoch + cfg.max_epochs {
        let batches = batcher(
            dataset,
            &train_idx,
            cfg.batch_size,
            cfg.speaker_blocked,
            cfg.seed ^ epoch as u64,
        );
        let mut epoch_loss = 0.0f64;
        let mut num_batches = 0usize;
        for batch in &batches {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                losses.push(audio2vec_loss_graph(
                    &mut tape,
                    &vars,
                    &cfg.encoder,
                    cfg.variant,
                    &dataset.features[i],
                )?);
            }
            let mut loss = losses[0];
            for &l in &losses[1..] {
                loss = tape.add(loss, l);
            }
            let loss = tape.scale(loss, 1.0 / batch.len() as f32);
            let loss_val = tape.scalar(loss);
            if !loss_val.is_finite() {
                return Err(Error::Numerics("non-finite training loss".into()));
            }
            epoch_loss += loss_val as f64;
            num_batches += 1;
            let store = tape.backward(loss);
            let mut grads = vars.gradients(&store);
            clip_gradients(&mut grads, cfg.clip as f32);
            adam_step(&mut params, &grads, &mut adam, &adam_cfg)?;
        }
        let (r1, r5, r10, median) =
            validation_metrics(&params, ENCODER_PREFIX, &cfg.encoder, dataset, &val_idx)?;
        let record = EpochRecord {
            epoch,
            train_loss: if num_batches > 0 { epoch_loss / num_batches as f64 } else { 0.0 },
            val_recall1: r1,
            val_recall5: r5,
            val_recall10: r10,
            val_median_rank: median,
        };
        on_epoch(&record);
        log.push(record);
        let is_better = match &best {
            None => true,
            Some((b, _)) => r10 > log[*b - start_epoch].val_recall10,
        };
        if is_better {
            best = Some((epoch, params.clone()));
        }
    }
    let (best_epoch, best_params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { best_params, last_params: params, adam, log, best_epoch })
}
