//! Neural-network building blocks on top of the autodiff tape: parameter
//! storage, initialization, the conv/GRU/attention layers shared by all
//! models, Adam with global-norm clipping, and finite-difference utilities.

use ndarray::Array2;
use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tape::{Scalar, GradStore, Tape, Var};

/// Named parameter tensors. BTreeMap keeps iteration order deterministic
/// for clipping, optimizer updates and checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    map: BTreeMap<String, Array2<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<T>) {
        let name = name.into();
        assert!(
            self.map.insert(name.clone(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Array2<T> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<T> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<T>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Register every tensor as a trainable tape leaf.
    pub fn register(&self, tape: &mut Tape<T>) -> ParamVars {
        let mut vars = BTreeMap::new();
        for (name, value) in &self.map {
            let v = tape.param(value.clone());
            vars.insert(name.clone(), (v, value.dim()));
        }
        ParamVars { vars }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let map = self
            .map
            .iter()
            .map(|(k, v)| (k.clone(), v.mapv(|x| U::from_f64(x.to_f64().unwrap()).unwrap())))
            .collect();
        ParamSet { map }
    }
}

/// Tape handles for a registered `ParamSet`.
pub struct ParamVars {
    vars: BTreeMap<String, (Var, (usize, usize))>,
}

impl ParamVars {
    pub fn var(&self, name: &str) -> Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .0
    }

    /// Collect gradients for every parameter (zeros where the loss is
    /// independent of it).
    pub fn gradients<T: Scalar>(&self, store: &GradStore<T>) -> Gradients<T> {
        let map = self
            .vars
            .iter()
            .map(|(name, (v, shape))| (name.clone(), store.grad_or_zeros(*v, *shape)))
            .collect();
        Gradients { map }
    }
}

/// One gradient tensor per parameter tensor.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    map: BTreeMap<String, Array2<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        let map = params
            .iter()
            .map(|(k, v)| (k.clone(), Array2::zeros(v.dim())))
            .collect();
        Gradients { map }
    }

    pub fn get(&self, name: &str) -> &Array2<T> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown gradient {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<T>)> {
        self.map.iter()
    }

    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (name, g) in &other.map {
            match self.map.get_mut(name) {
                Some(slot) => *slot = &*slot + g,
                None => {
                    self.map.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for g in self.map.values_mut() {
            g.mapv_inplace(|x| x * c);
        }
    }

    pub fn global_norm(&self) -> T {
        self.map
            .values()
            .flat_map(|g| g.iter())
            .map(|v| *v * *v)
            .fold(T::zero(), |a, b| a + b)
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Rescales so the global L2 norm over all tensors is at most `max_norm`.
/// No-op when already within bounds.
pub fn clip_gradients<T: Scalar>(grads: &mut Gradients<T>, max_norm: T) {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
}

#[derive(Debug, Clone)]
pub struct AdamConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamConfig<T> {
    pub fn with_lr(lr: T) -> Self {
        AdamConfig {
            lr,
            beta1: T::from_f64(0.9).unwrap(),
            beta2: T::from_f64(0.999).unwrap(),
            eps: T::from_f64(1e-8).unwrap(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: BTreeMap<String, Array2<T>>,
    pub v: BTreeMap<String, Array2<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = |p: &ParamSet<T>| -> BTreeMap<String, Array2<T>> {
            p.iter().map(|(k, v)| (k.clone(), Array2::zeros(v.dim()))).collect()
        };
        AdamState { step: 0, m: zeros(params), v: zeros(params) }
    }
}

/// One Adam update with bias-corrected moments. Aborts the step on a
/// non-finite gradient.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig<T>,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::Numerics("non-finite gradient; step aborted".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let one = T::one();
    let bc1 = one - cfg.beta1.powi(t);
    let bc2 = one - cfg.beta2.powi(t);
    for (name, value) in params.iter_mut() {
        let g = grads.get(name);
        let m = state.m.get_mut(name).expect("adam state matches params");
        let v = state.v.get_mut(name).expect("adam state matches params");
        ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
            *m = cfg.beta1 * *m + (one - cfg.beta1) * g;
        });
        ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
            *v = cfg.beta2 * *v + (one - cfg.beta2) * g * g;
        });
        ndarray::Zip::from(value).and(&*m).and(&*v).for_each(|p, &m, &v| {
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            *p = *p - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        });
    }
    Ok(())
}

/// uniform(−1/√fan_in, 1/√fan_in)
pub fn init_weight<T: Scalar>(
    rows: usize,
    cols: usize,
    fan_in: usize,
    rng: &mut impl Rng,
) -> Array2<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new(-bound, bound);
    Array2::from_shape_fn((rows, cols), |_| T::from_f64(dist.sample(rng)).unwrap())
}

// ---------------------------------------------------------------------------
// Layer parameter construction
// ---------------------------------------------------------------------------

/// Kernel stored as (s·in_dim)×d: row (i·in_dim + c) holds the tap for
/// window offset i, input channel c.
pub fn init_conv1d<T: Scalar>(
    params: &mut ParamSet<T>,
    prefix: &str,
    kernel_len: usize,
    in_dim: usize,
    channels: usize,
    rng: &mut impl Rng,
) {
    let fan_in = kernel_len * in_dim;
    params.insert(format!("{prefix}.kernel"), init_weight(fan_in, channels, fan_in, rng));
    params.insert(format!("{prefix}.bias"), Array2::zeros((1, channels)));
}

const GATES: [&str; 3] = ["r", "z", "n"];

/// Per layer: wi_* (in×H), wh_* (H×H), bi_*, bh_* (1×H) for reset, update
/// and candidate gates.
pub fn init_gru_stack<T: Scalar>(
    params: &mut ParamSet<T>,
    prefix: &str,
    layers: usize,
    in_dim: usize,
    hidden: usize,
    rng: &mut impl Rng,
) {
    for l in 0..layers {
        let input = if l == 0 { in_dim } else { hidden };
        init_gru_cell(params, &format!("{prefix}.{l}"), input, hidden, rng);
    }
}

pub fn init_gru_cell<T: Scalar>(
    params: &mut ParamSet<T>,
    prefix: &str,
    in_dim: usize,
    hidden: usize,
    rng: &mut impl Rng,
) {
    for gate in GATES {
        params.insert(format!("{prefix}.wi_{gate}"), init_weight(in_dim, hidden, in_dim, rng));
        params.insert(format!("{prefix}.wh_{gate}"), init_weight(hidden, hidden, hidden, rng));
        params.insert(format!("{prefix}.bi_{gate}"), Array2::zeros((1, hidden)));
        params.insert(format!("{prefix}.bh_{gate}"), Array2::zeros((1, hidden)));
    }
}

/// Attention MLP: `w` stored H×H_a (input side), `u` stored H_a×1.
pub fn init_attention<T: Scalar>(
    params: &mut ParamSet<T>,
    prefix: &str,
    hidden: usize,
    attn_hidden: usize,
    rng: &mut impl Rng,
) {
    params.insert(format!("{prefix}.w"), init_weight(hidden, attn_hidden, hidden, rng));
    params.insert(format!("{prefix}.u"), init_weight(attn_hidden, 1, attn_hidden, rng));
}

pub fn init_linear<T: Scalar>(
    params: &mut ParamSet<T>,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
    bias: bool,
    rng: &mut impl Rng,
) {
    params.insert(format!("{prefix}.w"), init_weight(in_dim, out_dim, in_dim, rng));
    if bias {
        params.insert(format!("{prefix}.b"), Array2::zeros((1, out_dim)));
    }
}

// ---------------------------------------------------------------------------
// Forward builders
// ---------------------------------------------------------------------------

/// Valid (no-padding) strided correlation plus bias: T' = 1 + ⌊(T−s)/z⌋.
pub fn conv1d_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    vars: &ParamVars,
    prefix: &str,
    kernel_len: usize,
    stride: usize,
) -> Result<Var> {
    let t = tape.value(x).nrows();
    if t < kernel_len {
        return Err(Error::Length(format!(
            "conv1d input has {t} frames, kernel needs {kernel_len}"
        )));
    }
    let windows = tape.gather_windows(x, kernel_len, stride);
    let projected = tape.matmul(windows, vars.var(&format!("{prefix}.kernel")));
    Ok(tape.add_row(projected, vars.var(&format!("{prefix}.bias"))))
}

/// One GRU step. Candidate gate applies the reset gate to the recurrent
/// contribution after the matrix product:
/// n = tanh(x·Wi_n + bi_n + r ⊙ (h·Wh_n + bh_n)), h' = (1−z)⊙n + z⊙h.
pub fn gru_step<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    prefix: &str,
    x: Var,
    h: Var,
) -> Var {
    let gate_pre = |tape: &mut Tape<T>, gate: &str| {
        let xi = tape.matmul(x, vars.var(&format!("{prefix}.wi_{gate}")));
        let xi = tape.add_row(xi, vars.var(&format!("{prefix}.bi_{gate}")));
        let hh = tape.matmul(h, vars.var(&format!("{prefix}.wh_{gate}")));
        let hh = tape.add_row(hh, vars.var(&format!("{prefix}.bh_{gate}")));
        (xi, hh)
    };
    let (xr, hr) = gate_pre(tape, "r");
    let pre_r = tape.add(xr, hr);
    let r = tape.sigmoid(pre_r);
    let (xz, hz) = gate_pre(tape, "z");
    let pre_z = tape.add(xz, hz);
    let z = tape.sigmoid(pre_z);
    let (xn, hn) = gate_pre(tape, "n");
    let gated = tape.mul(r, hn);
    let pre_n = tape.add(xn, gated);
    let n = tape.tanh(pre_n);
    // h' = n + z ⊙ (h − n)
    let diff = tape.sub(h, n);
    let zdiff = tape.mul(z, diff);
    tape.add(n, zdiff)
}

/// Runs one GRU layer over all rows of `x`, h_0 = 0; returns T×H states.
pub fn gru_layer_forward<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    prefix: &str,
    x: Var,
) -> Var {
    let steps = tape.value(x).nrows();
    let hidden = tape.value(vars.var(&format!("{prefix}.wh_r"))).nrows();
    // input-side projections for all steps at once
    let mut pre: Vec<(Var, &str)> = Vec::new();
    for gate in GATES {
        let xi = tape.matmul(x, vars.var(&format!("{prefix}.wi_{gate}")));
        let xi = tape.add_row(xi, vars.var(&format!("{prefix}.bi_{gate}")));
        pre.push((xi, gate));
    }
    let mut h = tape.constant(Array2::zeros((1, hidden)));
    let mut states = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut gate_val = BTreeMap::new();
        for (xi_all, gate) in &pre {
            let xi = tape.row(*xi_all, t);
            let hh = tape.matmul(h, vars.var(&format!("{prefix}.wh_{gate}")));
            let hh = tape.add_row(hh, vars.var(&format!("{prefix}.bh_{gate}")));
            gate_val.insert(*gate, (xi, hh));
        }
        let (xr, hr) = gate_val["r"];
        let pre_r = tape.add(xr, hr);
        let r = tape.sigmoid(pre_r);
        let (xz, hz) = gate_val["z"];
        let pre_z = tape.add(xz, hz);
        let z = tape.sigmoid(pre_z);
        let (xn, hn) = gate_val["n"];
        let gated = tape.mul(r, hn);
        let pre_n = tape.add(xn, gated);
        let n = tape.tanh(pre_n);
        let diff = tape.sub(h, n);
        let zdiff = tape.mul(z, diff);
        h = tape.add(n, zdiff);
        states.push(h);
    }
    tape.stack_rows(&states)
}

/// Stack of GRU layers; returns the top layer's states, T×H.
pub fn gru_stack_forward<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    prefix: &str,
    layers: usize,
    x: Var,
) -> Var {
    let mut h = x;
    for l in 0..layers {
        h = gru_layer_forward(tape, vars, &format!("{prefix}.{l}"), h);
    }
    h
}

/// Timewise-softmax attention pooling: α = softmax_t(U·tanh(W·x_t)),
/// output Σ_t α_t x_t. Returns (pooled 1×H, weights T×1).
pub fn attention_pool<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    prefix: &str,
    x: Var,
) -> Result<(Var, Var)> {
    if tape.value(x).nrows() == 0 {
        return Err(Error::Mask("attention over zero valid steps".into()));
    }
    let hidden = tape.matmul(x, vars.var(&format!("{prefix}.w")));
    let act = tape.tanh(hidden);
    let scores = tape.matmul(act, vars.var(&format!("{prefix}.u")));
    let alpha = tape.softmax_col(scores);
    let alpha_t = tape.transpose(alpha);
    let pooled = tape.matmul(alpha_t, x);
    Ok((pooled, alpha))
}

// ---------------------------------------------------------------------------
// Finite-difference checking
// ---------------------------------------------------------------------------

/// Central finite-difference gradients of `loss` over every parameter entry.
pub fn numeric_gradients(
    params: &ParamSet<f64>,
    eps: f64,
    mut loss: impl FnMut(&ParamSet<f64>) -> f64,
) -> Gradients<f64> {
    let mut out = Gradients::zeros_like(params);
    let mut work = params.clone();
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let dim = params.get(&name).dim();
        for r in 0..dim.0 {
            for c in 0..dim.1 {
                let orig = params.get(&name)[(r, c)];
                work.get_mut(&name)[(r, c)] = orig + eps;
                let plus = loss(&work);
                work.get_mut(&name)[(r, c)] = orig - eps;
                let minus = loss(&work);
                work.get_mut(&name)[(r, c)] = orig;
                out.map.get_mut(&name).unwrap()[(r, c)] = (plus - minus) / (2.0 * eps);
            }
        }
    }
    out
}

/// Max elementwise relative error between two gradient sets, with the
/// denominator floored at 1e-3 to absorb finite-difference noise on
/// near-zero entries.
pub fn max_rel_error(a: &Gradients<f64>, b: &Gradients<f64>) -> f64 {
    let mut worst = 0.0f64;
    for (name, ga) in a.iter() {
        let gb = b.get(name);
        for (x, y) in ga.iter().zip(gb.iter()) {
            let denom = x.abs().max(y.abs()).max(1e-3);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn conv1d_output_lengths() {
        let mut rng = rng(1);
        for (t, s, z, expect) in [(6usize, 6usize, 3usize, 1usize), (98, 6, 3, 31)] {
            let mut params = ParamSet::<f64>::new();
            init_conv1d(&mut params, "conv", s, 2, 3, &mut rng);
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let x = tape.constant(Array2::zeros((t, 2)));
            let y = conv1d_forward(&mut tape, x, &vars, "conv", s, z).unwrap();
            assert_eq!(tape.value(y).dim(), (expect, 3));
        }
    }

    #[test]
    fn conv1d_too_short_is_length_error() {
        let mut rng = rng(1);
        let mut params = ParamSet::<f64>::new();
        init_conv1d(&mut params, "conv", 6, 2, 3, &mut rng);
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let x = tape.constant(Array2::zeros((5, 2)));
        assert!(matches!(
            conv1d_forward(&mut tape, x, &vars, "conv", 6, 3),
            Err(Error::Length(_))
        ));
    }

    #[test]
    fn conv1d_delta_kernel_is_identity() {
        let mut params = ParamSet::<f64>::new();
        let mut kernel = Array2::zeros((6, 1));
        kernel[(0, 0)] = 1.0; // tap at window offset 0
        params.insert("conv.kernel", kernel);
        params.insert("conv.bias", Array2::zeros((1, 1)));
        let input = array![[0.3], [-1.0], [2.5], [0.0], [1.1], [7.0], [-2.0], [0.5]];
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let x = tape.constant(input.clone());
        let y = conv1d_forward(&mut tape, x, &vars, "conv", 6, 1).unwrap();
        let out = tape.value(y);
        assert_eq!(out.nrows(), 3);
        for t in 0..3 {
            assert!((out[(t, 0)] - input[(t, 0)]).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_all_zero_weights_fixed_point_at_zero() {
        let mut params = ParamSet::<f64>::new();
        for gate in GATES {
            params.insert(format!("g.0.wi_{gate}"), Array2::zeros((3, 4)));
            params.insert(format!("g.0.wh_{gate}"), Array2::zeros((4, 4)));
            params.insert(format!("g.0.bi_{gate}"), Array2::zeros((1, 4)));
            params.insert(format!("g.0.bh_{gate}"), Array2::zeros((1, 4)));
        }
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let x = tape.constant(Array2::from_elem((5, 3), 0.7));
        let y = gru_stack_forward(&mut tape, &vars, "g", 1, x);
        assert!(tape.value(y).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn gru_first_state_depends_only_on_first_input() {
        let mut rng = rng(9);
        let mut params = ParamSet::<f64>::new();
        init_gru_stack(&mut params, "g", 1, 3, 4, &mut rng);
        let run = |x: Array2<f64>| -> Array2<f64> {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let xv = tape.constant(x);
            let y = gru_stack_forward(&mut tape, &vars, "g", 1, xv);
            tape.value(y).to_owned()
        };
        let mut a = Array2::from_elem((2, 3), 0.3);
        a[(1, 0)] = 5.0;
        let mut b = Array2::from_elem((2, 3), 0.3);
        b[(1, 0)] = -5.0;
        let ya = run(a);
        let yb = run(b);
        for c in 0..4 {
            assert!((ya[(0, c)] - yb[(0, c)]).abs() < 1e-15, "h_1 must ignore x_2");
        }
    }

    /// Naive per-gate scalar-loop GRU, written independently of the tape
    /// implementation.
    fn gru_oracle(params: &ParamSet<f64>, prefix: &str, x: &Array2<f64>, h0: &[f64]) -> Array2<f64> {
        let hidden = h0.len();
        let mut h = h0.to_vec();
        let mut out = Array2::zeros((x.nrows(), hidden));
        let w = |n: &str| params.get(&format!("{prefix}.{n}"));
        for t in 0..x.nrows() {
            let mut next = vec![0.0; hidden];
            for j in 0..hidden {
                let lin = |wi: &str, wh: &str, bi: &str, bh: &str| -> (f64, f64) {
                    let mut a = w(bi)[(0, j)];
                    for c in 0..x.ncols() {
                        a += x[(t, c)] * w(wi)[(c, j)];
                    }
                    let mut b = w(bh)[(0, j)];
                    for (k, hk) in h.iter().enumerate() {
                        b += hk * w(wh)[(k, j)];
                    }
                    (a, b)
                };
                let (ar, br) = lin("wi_r", "wh_r", "bi_r", "bh_r");
                let r = 1.0 / (1.0 + (-(ar + br)).exp());
                let (az, bz) = lin("wi_z", "wh_z", "bi_z", "bh_z");
                let z = 1.0 / (1.0 + (-(az + bz)).exp());
                let (an, bn) = lin("wi_n", "wh_n", "bi_n", "bh_n");
                let n = (an + r * bn).tanh();
                next[j] = (1.0 - z) * n + z * h[j];
            }
            h = next;
            for j in 0..hidden {
                out[(t, j)] = h[j];
            }
        }
        out
    }

    #[test]
    fn gru_matches_scalar_loop_oracle() {
        let mut rng = rng(42);
        let mut params = ParamSet::<f64>::new();
        init_gru_stack(&mut params, "g", 1, 3, 4, &mut rng);
        let x = Array2::from_shape_fn((5, 3), |_| {
            rand::Rng::gen::<f64>(&mut rng) * 2.0 - 1.0
        });
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let xv = tape.constant(x.clone());
        let y = gru_stack_forward(&mut tape, &vars, "g", 1, xv);
        let want = gru_oracle(&params, "g.0", &x, &[0.0; 4]);
        for (a, b) in tape.value(y).iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn gru_step_matches_layer_forward() {
        let mut rng = rng(4);
        let mut params = ParamSet::<f64>::new();
        init_gru_stack(&mut params, "g", 1, 3, 4, &mut rng);
        let x = Array2::from_shape_fn((4, 3), |_| rand::Rng::gen::<f64>(&mut rng) - 0.5);
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let xv = tape.constant(x.clone());
        let full = gru_stack_forward(&mut tape, &vars, "g", 1, xv);
        let full_val = tape.value(full).to_owned();
        let mut h = tape.constant(Array2::zeros((1, 4)));
        for t in 0..4 {
            let xt = tape.row(xv, t);
            h = gru_step(&mut tape, &vars, "g.0", xt, h);
        }
        for (a, b) in tape.value(h).iter().zip(full_val.row(3).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_singleton_returns_input_row() {
        let mut rng = rng(2);
        let mut params = ParamSet::<f64>::new();
        init_attention(&mut params, "a", 3, 5, &mut rng);
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let x = tape.constant(array![[0.5, -1.0, 2.0]]);
        let (pooled, alpha) = attention_pool(&mut tape, &vars, "a", x).unwrap();
        assert_eq!(tape.value(alpha)[(0, 0)], 1.0);
        assert_eq!(tape.value(pooled), &array![[0.5, -1.0, 2.0]]);
    }

    #[test]
    fn attention_identical_rows_is_that_row() {
        let mut rng = rng(3);
        let mut params = ParamSet::<f64>::new();
        init_attention(&mut params, "a", 3, 5, &mut rng);
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let x = tape.constant(Array2::from_shape_fn((6, 3), |(_, c)| c as f64 - 1.0));
        let (pooled, alpha) = attention_pool(&mut tape, &vars, "a", x).unwrap();
        let asum: f64 = tape.value(alpha).sum();
        assert!((asum - 1.0).abs() < 1e-12);
        for (c, v) in tape.value(pooled).iter().enumerate() {
            assert!((v - (c as f64 - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_direct_formula() {
        let mut rng = rng(5);
        let mut params = ParamSet::<f64>::new();
        init_attention(&mut params, "a", 3, 4, &mut rng);
        let x = Array2::from_shape_fn((7, 3), |_| rand::Rng::gen::<f64>(&mut rng) - 0.5);
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let xv = tape.constant(x.clone());
        let (pooled, _) = attention_pool(&mut tape, &vars, "a", xv).unwrap();
        // direct evaluation of the softmax-weighted sum
        let w = params.get("a.w");
        let u = params.get("a.u");
        let mut scores = Vec::new();
        for t in 0..7 {
            let mut s = 0.0;
            for a in 0..4 {
                let mut pre = 0.0;
                for c in 0..3 {
                    pre += x[(t, c)] * w[(c, a)];
                }
                s += pre.tanh() * u[(a, 0)];
            }
            scores.push(s);
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let mut want = [0.0; 3];
        for t in 0..7 {
            for (c, wv) in want.iter_mut().enumerate() {
                *wv += exps[t] / total * x[(t, c)];
            }
        }
        for (a, b) in tape.value(pooled).iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn clip_rescales_and_is_noop_within_bounds() {
        let mut params = ParamSet::<f64>::new();
        params.insert("p", array![[0.0]]);
        let mut grads = Gradients::zeros_like(&params);
        *grads.map.get_mut("p").unwrap() = array![[4.0]];
        clip_gradients(&mut grads, 2.0);
        assert_eq!(grads.get("p")[(0, 0)], 2.0);
        clip_gradients(&mut grads, 2.0);
        assert_eq!(grads.get("p")[(0, 0)], 2.0);
    }

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut rng = rng(6);
        let mut params = ParamSet::<f64>::new();
        init_linear(&mut params, "l", 3, 2, true, &mut rng);
        let before = params.clone();
        let grads = Gradients::zeros_like(&params);
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, &AdamConfig::with_lr(0.1)).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut params = ParamSet::<f64>::new();
        params.insert("p", array![[1.0]]);
        let mut grads = Gradients::zeros_like(&params);
        *grads.map.get_mut("p").unwrap() = array![[f64::NAN]];
        let mut state = AdamState::new(&params);
        assert!(matches!(
            adam_step(&mut params, &grads, &mut state, &AdamConfig::with_lr(0.1)),
            Err(Error::Numerics(_))
        ));
    }

    #[test]
    fn gru_layer_gradients_match_finite_differences() {
        let mut rng = rng(12);
        let mut params = ParamSet::<f64>::new();
        init_gru_stack(&mut params, "g", 2, 2, 3, &mut rng);
        let x = Array2::from_shape_fn((4, 2), |_| rand::Rng::gen::<f64>(&mut rng) - 0.5);
        let loss_of = |p: &ParamSet<f64>| -> f64 {
            let mut tape = Tape::new();
            let vars = p.register(&mut tape);
            let xv = tape.constant(x.clone());
            let y = gru_stack_forward(&mut tape, &vars, "g", 2, xv);
            let d = tape.dot(y, y);
            let half = tape.scale(d, 0.5);
            tape.scalar(half)
        };
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let xv = tape.constant(x.clone());
        let y = gru_stack_forward(&mut tape, &vars, "g", 2, xv);
        let d = tape.dot(y, y);
        let loss = tape.scale(d, 0.5);
        let store = tape.backward(loss);
        let analytic = vars.gradients(&store);
        let numeric = numeric_gradients(&params, 1e-5, loss_of);
        assert!(max_rel_error(&analytic, &numeric) < 1e-6);
    }
}
