//! Semantic evaluation of embedding sets: paraphrase retrieval (median
//! rank, recall@K), representational similarity analysis against an
//! image-feature space, the mean-MFCC and chance baselines, and the
//! 2-component PCA artifact probe.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

use crate::audio_frontend::FeatureMatrix;
use crate::error::{Error, Result};
use crate::util::{randn, sub_seed};

/// Row-aligned embeddings with their utterance/image (group) labels.
pub struct EmbeddingSet {
    pub vectors: Array2<f32>,
    pub utterance_ids: Vec<String>,
    pub image_ids: Vec<String>,
    pub speaker_ids: Option<Vec<String>>,
}

/// Paraphrase retrieval results. `recall_at` normalizes per-query hits by
/// min(K, #paraphrases); `recall_at_raw` divides by K instead, so both
/// readings of "proportion of paraphrases among K top-ranked" are
/// reproducible.
#[derive(Debug, Clone)]
pub struct RetrievalMetrics {
    pub median_rank: f64,
    pub recall_at: BTreeMap<usize, f64>,
    pub recall_at_raw: BTreeMap<usize, f64>,
}

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

fn unit_rows(vectors: &Array2<f32>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(vectors.dim());
    for (r, row) in vectors.rows().into_iter().enumerate() {
        let norm = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Numerics(format!("zero embedding vector at row {r}")));
        }
        for (c, v) in row.iter().enumerate() {
            out[(r, c)] = *v as f64 / norm;
        }
    }
    Ok(out)
}

/// For each query, ranks all other utterances by descending cosine
/// similarity (ties broken by ascending index) and scores the positions
/// of its paraphrases (same image id, different utterance). Queries with
/// no paraphrase are skipped.
pub fn paraphrase_retrieval(es: &EmbeddingSet) -> Result<RetrievalMetrics> {
    let n = es.vectors.nrows();
    if n < 2 {
        return Err(Error::Data("paraphrase retrieval needs at least 2 utterances".into()));
    }
    if es.image_ids.len() != n || es.utterance_ids.len() != n {
        return Err(Error::Data("embedding set ids not row-aligned".into()));
    }
    let unit = unit_rows(&es.vectors)?;
    let mut top_ranks = Vec::new();
    let mut hits_min: BTreeMap<usize, f64> = RECALL_KS.iter().map(|&k| (k, 0.0)).collect();
    let mut hits_raw: BTreeMap<usize, f64> = RECALL_KS.iter().map(|&k| (k, 0.0)).collect();
    let mut num_queries = 0usize;

    for q in 0..n {
        let num_paraphrases = (0..n)
            .filter(|&j| j != q && es.image_ids[j] == es.image_ids[q])
            .count();
        if num_paraphrases == 0 {
            continue;
        }
        num_queries += 1;
        let mut candidates: Vec<usize> = (0..n).filter(|&j| j != q).collect();
        let sims: Vec<f64> = (0..n)
            .map(|j| unit.row(q).iter().zip(unit.row(j)).map(|(a, b)| a * b).sum())
            .collect();
        candidates.sort_by(|&a, &b| {
            sims[b].partial_cmp(&sims[a]).unwrap().then(a.cmp(&b))
        });
        let mut best_rank = None;
        for (pos, &j) in candidates.iter().enumerate() {
            if es.image_ids[j] == es.image_ids[q] {
                best_rank.get_or_insert(pos + 1);
            }
        }
        top_ranks.push(best_rank.expect("paraphrase exists") as f64);
        for &k in &RECALL_KS {
            let hits = candidates
                .iter()
                .take(k)
                .filter(|&&j| es.image_ids[j] == es.image_ids[q])
                .count() as f64;
            *hits_min.get_mut(&k).unwrap() += hits / num_paraphrases.min(k) as f64;
            *hits_raw.get_mut(&k).unwrap() += hits / k as f64;
        }
    }
    if num_queries == 0 {
        return Err(Error::Data("no utterance has any paraphrase".into()));
    }
    top_ranks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_rank = if top_ranks.len() % 2 == 1 {
        top_ranks[top_ranks.len() / 2]
    } else {
        (top_ranks[top_ranks.len() / 2 - 1] + top_ranks[top_ranks.len() / 2]) / 2.0
    };
    let normalize = |m: BTreeMap<usize, f64>| {
        m.into_iter().map(|(k, v)| (k, v / num_queries as f64)).collect()
    };
    Ok(RetrievalMetrics {
        median_rank,
        recall_at: normalize(hits_min),
        recall_at_raw: normalize(hits_raw),
    })
}

/// Pearson correlation between the upper triangulars (diagonal excluded)
/// of the two cosine-similarity matrices. Rows must be aligned.
pub fn rsa(a: &Array2<f32>, b: &Array2<f32>) -> Result<f64> {
    let n = a.nrows();
    if n != b.nrows() {
        return Err(Error::Data(format!(
            "rsa inputs not row-aligned: {} vs {} rows",
            n,
            b.nrows()
        )));
    }
    if n < 3 {
        return Err(Error::Data("rsa needs at least 3 rows".into()));
    }
    let ua = unit_rows(a)?;
    let ub = unit_rows(b)?;
    let mut xs = Vec::with_capacity(n * (n - 1) / 2);
    let mut ys = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            xs.push(ua.row(i).iter().zip(ua.row(j)).map(|(x, y)| x * y).sum::<f64>());
            ys.push(ub.row(i).iter().zip(ub.row(j)).map(|(x, y)| x * y).sum::<f64>());
        }
    }
    pearson(&xs, &ys)
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Numerics("zero-variance similarity vector".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// 13-dim time-mean of each utterance's frames.
pub fn mean_mfcc_baseline(features: &[FeatureMatrix]) -> Array2<f32> {
    let dim = features.first().map(|f| f.ncols()).unwrap_or(0);
    let mut out = Array2::zeros((features.len(), dim));
    for (r, f) in features.iter().enumerate() {
        for c in 0..dim {
            out[(r, c)] = f.column(c).sum() / f.nrows() as f32;
        }
    }
    out
}

/// n i.i.d. standard-normal vectors, deterministic per seed.
pub fn chance_baseline(n: usize, dim: usize, seed: u64) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "chance"));
    Array2::from_shape_fn((n, dim), |_| randn(&mut rng) as f32)
}

#[derive(Debug, Clone)]
pub struct ProbeReport {
    /// Holdout R² of 5-NN regression on the first two principal components.
    pub r2: f64,
    /// The same probe after arbitrary relabeling of the targets.
    pub r2_relabeled: f64,
}

/// PCA-to-2 + k-nearest-neighbor regression probe for dataset artifacts:
/// can a numeric target id be predicted from the dominant embedding
/// structure? Fit on 80% of the rows, scored on the held-out 20%.
pub fn artifact_probe(vectors: &Array2<f32>, targets: &[f64], seed: u64) -> Result<ProbeReport> {
    let n = vectors.nrows();
    if n < 50 {
        return Err(Error::Data(format!("artifact probe needs at least 50 rows, got {n}")));
    }
    if targets.len() != n {
        return Err(Error::Data("targets not aligned with embeddings".into()));
    }
    let holdout: Vec<usize> = (0..n).filter(|i| i % 5 == 0).collect();
    let train: Vec<usize> = (0..n).filter(|i| i % 5 != 0).collect();
    let r2 = probe_r2(vectors, targets, &train, &holdout)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "probe-relabel"));
    let mut permuted = targets.to_vec();
    for i in (1..permuted.len()).rev() {
        let j = rng.gen_range(0..=i);
        permuted.swap(i, j);
    }
    let r2_relabeled = probe_r2(vectors, &permuted, &train, &holdout)?;
    Ok(ProbeReport { r2, r2_relabeled })
}

fn probe_r2(
    vectors: &Array2<f32>,
    targets: &[f64],
    train: &[usize],
    holdout: &[usize],
) -> Result<f64> {
    let d = vectors.ncols();
    // center on the training mean
    let mut mean = vec![0.0f64; d];
    for &i in train {
        for c in 0..d {
            mean[c] += vectors[(i, c)] as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= train.len() as f64;
    }
    let centered = |i: usize| -> Vec<f64> {
        (0..d).map(|c| vectors[(i, c)] as f64 - mean[c]).collect()
    };
    // top-2 principal directions by power iteration with deflation
    let rows: Vec<Vec<f64>> = train.iter().map(|&i| centered(i)).collect();
    let total_var: f64 = rows.iter().flat_map(|r| r.iter()).map(|v| v * v).sum();
    if total_var < 1e-12 {
        return Err(Error::Numerics("zero-variance embeddings in artifact probe".into()));
    }
    let mut components: Vec<Vec<f64>> = Vec::new();
    for comp in 0..2 {
        // deterministic start vector
        let mut v: Vec<f64> = (0..d)
            .map(|c| ((c + 1) as f64 * 0.7391 + comp as f64).sin())
            .collect();
        for _ in 0..300 {
            // w = Cv computed as Σ_r r (r·v), with prior components deflated
            let mut w = vec![0.0; d];
            for r in rows.iter() {
                let proj: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (wc, rc) in w.iter_mut().zip(r) {
                    *wc += rc * proj;
                }
            }
            for prev in &components {
                let proj: f64 = w.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (wc, pc) in w.iter_mut().zip(prev) {
                    *wc -= pc * proj;
                }
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-15 {
                break;
            }
            for (vc, wc) in v.iter_mut().zip(&w) {
                *vc = wc / norm;
            }
        }
        components.push(v);
    }
    let project = |i: usize| -> [f64; 2] {
        let x = centered(i);
        [
            x.iter().zip(&components[0]).map(|(a, b)| a * b).sum(),
            x.iter().zip(&components[1]).map(|(a, b)| a * b).sum(),
        ]
    };
    let train_proj: Vec<[f64; 2]> = train.iter().map(|&i| project(i)).collect();
    let k = 5.min(train.len());
    let mut ss_res = 0.0;
    let mut preds = Vec::with_capacity(holdout.len());
    for &i in holdout {
        let p = project(i);
        let mut dists: Vec<(f64, usize)> = train_proj
            .iter()
            .zip(train)
            .map(|(tp, &ti)| {
                let dx = tp[0] - p[0];
                let dy = tp[1] - p[1];
                (dx * dx + dy * dy, ti)
            })
            .collect();
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let pred: f64 = dists[..k].iter().map(|&(_, ti)| targets[ti]).sum::<f64>() / k as f64;
        preds.push(pred);
        let y = targets[i];
        ss_res += (y - pred) * (y - pred);
    }
    let mean_y: f64 = holdout.iter().map(|&i| targets[i]).sum::<f64>() / holdout.len() as f64;
    let ss_tot: f64 = holdout.iter().map(|&i| (targets[i] - mean_y).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Numerics("constant probe targets".into()));
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// Final evaluation report emitted by the CLI.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub num_utterances: usize,
    /// Absent for single-caption corpora, where only RSA is defined.
    pub retrieval: Option<RetrievalMetrics>,
    pub rsa: Option<f64>,
    pub probe: Option<ProbeReport>,
}

impl MetricReport {
    /// key=value lines, one metric per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("num_utterances={}\n", self.num_utterances));
        if let Some(retrieval) = &self.retrieval {
            out.push_str(&format!("median_rank={:.2}\n", retrieval.median_rank));
            for &k in &RECALL_KS {
                out.push_str(&format!("recall_at_{k}={:.6}\n", retrieval.recall_at[&k]));
            }
            for &k in &RECALL_KS {
                out.push_str(&format!(
                    "recall_at_{k}_raw={:.6}\n",
                    retrieval.recall_at_raw[&k]
                ));
            }
        }
        if let Some(r) = self.rsa {
            out.push_str(&format!("rsa={r:.6}\n"));
        }
        if let Some(p) = &self.probe {
            out.push_str(&format!("probe_r2={:.6}\n", p.r2));
            out.push_str(&format!("probe_r2_relabeled={:.6}\n", p.r2_relabeled));
        }
        out
    }

    /// Flat JSON object with the same keys as [`to_text`].
    pub fn to_json(&self) -> String {
        let mut fields = vec![format!("\"num_utterances\": {}", self.num_utterances)];
        if let Some(retrieval) = &self.retrieval {
            fields.push(format!("\"median_rank\": {:.2}", retrieval.median_rank));
            for &k in &RECALL_KS {
                fields.push(format!("\"recall_at_{k}\": {:.6}", retrieval.recall_at[&k]));
                fields.push(format!(
                    "\"recall_at_{k}_raw\": {:.6}",
                    retrieval.recall_at_raw[&k]
                ));
            }
        }
        if let Some(r) = self.rsa {
            fields.push(format!("\"rsa\": {r:.6}"));
        }
        if let Some(p) = &self.probe {
            fields.push(format!("\"probe_r2\": {:.6}", p.r2));
            fields.push(format!("\"probe_r2_relabeled\": {:.6}", p.r2_relabeled));
        }
        format!("{{{}}}", fields.join(", "))
    }
}
