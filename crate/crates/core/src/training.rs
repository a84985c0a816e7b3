//! Shared training-loop machinery: per-epoch log records, validation
//! metrics and best-epoch selection.

use ndarray::Array2;

use crate::corpus::Dataset;
use crate::encoder::{encode, EncoderConfig};
use crate::error::Result;
use crate::evaluation::{paraphrase_retrieval, EmbeddingSet};
use crate::nn::ParamSet;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_recall1: f64,
    pub val_recall5: f64,
    pub val_recall10: f64,
    pub val_median_rank: f64,
}

impl EpochRecord {
    /// Line-delimited structured text form.
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} train_loss={:.6} val_recall1={:.4} val_recall5={:.4} val_recall10={:.4} val_median_rank={:.1}",
            self.epoch,
            self.train_loss,
            self.val_recall1,
            self.val_recall5,
            self.val_recall10,
            self.val_median_rank
        )
    }
}

/// Index of the epoch with the highest recall@10; ties go to the
/// earliest epoch.
pub fn best_epoch_index(log: &[EpochRecord]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, rec) in log.iter().enumerate() {
        match best {
            None => best = Some(i),
            Some(b) if rec.val_recall10 > log[b].val_recall10 => best = Some(i),
            _ => {}
        }
    }
    best
}

/// Encodes whole unsplit utterances for the given entries and runs
/// paraphrase retrieval on them.
pub fn validation_metrics(
    params: &ParamSet<f32>,
    enc_prefix: &str,
    cfg: &EncoderConfig,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<(f64, f64, f64, f64)> {
    let mut vectors = Array2::zeros((indices.len(), cfg.hidden));
    let mut utterance_ids = Vec::with_capacity(indices.len());
    let mut image_ids = Vec::with_capacity(indices.len());
    for (row, &i) in indices.iter().enumerate() {
        let emb = encode(params, enc_prefix, cfg, &dataset.features[i], None)?;
        vectors.row_mut(row).assign(&emb);
        utterance_ids.push(dataset.entries[i].utterance_id.clone());
        image_ids.push(dataset.entries[i].image_id.clone());
    }
    let es = EmbeddingSet {
        vectors,
        utterance_ids,
        image_ids,
        speaker_ids: None,
    };
    let m = paraphrase_retrieval(&es)?;
    Ok((m.recall_at[&1], m.recall_at[&5], m.recall_at[&10], m.median_rank))
}
