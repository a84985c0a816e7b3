//! The shared utterance/segment encoder:
//! Enc(x) = unit(Attn(GRU_ℓ(Conv_{s,d,z}(x)))).

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    attention_pool, conv1d_forward, gru_stack_forward, init_attention, init_conv1d,
    init_gru_stack, ParamSet, ParamVars,
};
use crate::tape::{Scalar, Tape, Var};

/// Architecture hyperparameters. Defaults: 64-channel size-6 stride-3
/// convolution, 5 GRU layers of 512 units, 512-unit attention MLP.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub conv_len: usize,
    pub conv_channels: usize,
    pub conv_stride: usize,
    pub gru_layers: usize,
    pub hidden: usize,
    pub attn_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: 13,
            conv_len: 6,
            conv_channels: 64,
            conv_stride: 3,
            gru_layers: 5,
            hidden: 512,
            attn_hidden: 512,
        }
    }
}

impl EncoderConfig {
    /// Small configuration for fast desk-scale experiments and tests.
    pub fn small() -> Self {
        EncoderConfig {
            input_dim: 13,
            conv_len: 6,
            conv_channels: 32,
            conv_stride: 3,
            gru_layers: 2,
            hidden: 64,
            attn_hidden: 64,
        }
    }

    /// Minimum number of input frames the encoder accepts.
    pub fn min_frames(&self) -> usize {
        self.conv_len
    }
}

/// Registers encoder parameters under `prefix`: `{prefix}.conv`,
/// `{prefix}.gru.{layer}`, `{prefix}.attn`.
pub fn init_encoder_params<T: Scalar>(
    params: &mut ParamSet<T>,
    prefix: &str,
    cfg: &EncoderConfig,
    rng: &mut impl Rng,
) {
    init_conv1d(
        params,
        &format!("{prefix}.conv"),
        cfg.conv_len,
        cfg.input_dim,
        cfg.conv_channels,
        rng,
    );
    init_gru_stack(
        params,
        &format!("{prefix}.gru"),
        cfg.gru_layers,
        cfg.conv_channels,
        cfg.hidden,
        rng,
    );
    init_attention(params, &format!("{prefix}.attn"), cfg.hidden, cfg.attn_hidden, rng);
}

/// Builds the encoder graph on an existing tape. Returns the unit-norm
/// embedding (1×H) and the attention weights (T'×1) for diagnostics.
pub fn encode_graph<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    prefix: &str,
    cfg: &EncoderConfig,
    x: &Array2<T>,
) -> Result<(Var, Var)> {
    if x.nrows() < cfg.min_frames() {
        return Err(Error::Length(format!(
            "encoder input has {} frames, needs at least {}",
            x.nrows(),
            cfg.min_frames()
        )));
    }
    if x.ncols() != cfg.input_dim {
        return Err(Error::Data(format!(
            "encoder input width {} does not match configured {}",
            x.ncols(),
            cfg.input_dim
        )));
    }
    let xv = tape.constant(x.clone());
    let conv = conv1d_forward(tape, xv, vars, &format!("{prefix}.conv"), cfg.conv_len, cfg.conv_stride)?;
    let states = gru_stack_forward(tape, vars, &format!("{prefix}.gru"), cfg.gru_layers, conv);
    let (pooled, alpha) = attention_pool(tape, vars, &format!("{prefix}.attn"), states)?;
    let unit = tape.unit_row(pooled);
    Ok((unit, alpha))
}

/// Inference-time encoding of one utterance (or segment). `valid_len`
/// restricts the input to its first rows; padding beyond it can never
/// influence the result.
pub fn encode<T: Scalar>(
    params: &ParamSet<T>,
    prefix: &str,
    cfg: &EncoderConfig,
    x: &Array2<T>,
    valid_len: Option<usize>,
) -> Result<Array1<T>> {
    let (embedding, _) = encode_with_attention(params, prefix, cfg, x, valid_len)?;
    Ok(embedding)
}

/// As [`encode`], additionally returning the attention weights.
pub fn encode_with_attention<T: Scalar>(
    params: &ParamSet<T>,
    prefix: &str,
    cfg: &EncoderConfig,
    x: &Array2<T>,
    valid_len: Option<usize>,
) -> Result<(Array1<T>, Array1<T>)> {
    let valid = valid_len.unwrap_or(x.nrows());
    if valid > x.nrows() {
        return Err(Error::Data(format!(
            "valid_len {valid} exceeds input length {}",
            x.nrows()
        )));
    }
    let sliced = x.slice(ndarray::s![..valid, ..]).to_owned();
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let (unit, alpha) = encode_graph(&mut tape, &vars, prefix, cfg, &sliced)?;
    let emb = tape.value(unit).row(0).to_owned();
    let weights = tape.value(alpha).column(0).to_owned();
    Ok((emb, weights))
}

/// Encodes a list of utterances; errors carry the offending index.
pub fn encode_batch<T: Scalar>(
    params: &ParamSet<T>,
    prefix: &str,
    cfg: &EncoderConfig,
    xs: &[Array2<T>],
) -> Result<Vec<Array1<T>>> {
    xs.iter()
        .enumerate()
        .map(|(i, x)| {
            encode(params, prefix, cfg, x, None)
                .map_err(|e| Error::Length(format!("utterance {i}: {e}")))
        })
        .collect()
}
