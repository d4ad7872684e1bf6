//! Cross-attention mechanisms behind one interface.
//!
//! All computations are batched over `B` sequences padded to a common length
//! `S`. Padding is excluded from every softmax through an additive mask, so
//! each row behaves as if it were attended on its own.
//!
//! Per decode, [`prepare`] derives keys, values and position tables from the
//! encodings once; [`attend`] then runs one timestep and returns the next
//! [`AttentionState`].

mod dump;
mod kind;
mod position;

use crate::autodiff::{Graph, Linear, ParamId, ParamStore, RngStream, Scalar, Tensor, Var};
use crate::error::{Error, Result};

pub use dump::{write_attention_csv, AttentionRecord};
pub use kind::{AttentionBase, AttentionKind};
pub use position::{
    clamp_mu, location_weights, norm_position, rope_rotate, rope_theta, sigmoid, sinusoid, softstair, stepsize,
    BETA, CLAMP_SLOPE, LEAKY_SLOPE, MIN_SIGMA, TAU,
};

/// Additive score for padded key positions.
const MASKED: f64 = -1e9;

/// Every learned symbol of the attention layer.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub d: usize,
    pub f_q: Linear,
    pub f_k: Linear,
    pub f_v: Linear,
    pub f_o: Linear,
    pub value_pre: Linear,
    pub b_1: ParamId,
    pub b_2: ParamId,
    pub f_l: Linear,
    pub f_sigma: Linear,
    pub f_b: Linear,
    pub f_g: Linear,
    pub f_step: Linear,
    pub f_mix: Linear,
    pub f_dir: Linear,
    pub p: ParamId,
}

impl AttentionParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut RngStream) -> Result<Self> {
        let mut lin = |name: &str, out: usize| Linear::new(store, &format!("{prefix}.{name}"), d, out, rng);
        let f_q = lin("f_q", d)?;
        let f_k = lin("f_k", d)?;
        let f_v = lin("f_v", d)?;
        let f_o = lin("f_o", d)?;
        let value_pre = lin("value_pre", d)?;
        let f_l = lin("f_l", d)?;
        let f_sigma = lin("f_sigma", 1)?;
        let f_b = lin("f_b", 1)?;
        let f_g = lin("f_g", 1)?;
        let f_step = lin("f_step", 1)?;
        let f_mix = lin("f_mix", 1)?;
        let f_dir = lin("f_dir", 1)?;
        Ok(AttentionParams {
            d,
            f_q,
            f_k,
            f_v,
            f_o,
            value_pre,
            b_1: store.add_zeros(format!("{prefix}.b_1"), &[d])?,
            b_2: store.add_zeros(format!("{prefix}.b_2"), &[d])?,
            f_l,
            f_sigma,
            f_b,
            f_g,
            f_step,
            f_mix,
            f_dir,
            p: store.add_zeros(format!("{prefix}.p"), &[1])?,
        })
    }
}

/// Per-decode constants and encodings-derived tensors.
#[derive(Debug, Clone)]
pub struct AttentionMemory {
    pub lengths: Vec<usize>,
    pub max_len: usize,
    /// `[B, S, d]`, rotated by position for rotary kinds.
    pub keys: Var,
    /// `[B, d, S]`.
    pub keys_t: Var,
    /// `[B, S, d]`.
    pub values: Var,
    /// `[B, S]`, 0 on valid positions.
    pub mask: Var,
    /// `[B, S]` normalized positions.
    pub norm: Var,
    /// `[B, 1]` holding `1/s`.
    pub inv_len: Var,
    /// `[B, 1]` holding `1/max(1, s-1)`.
    pub stepsize: Var,
    /// `[B, 1]` direction gate, when the kind interpolates directions.
    pub alpha_dir: Option<Var>,
}

impl AttentionMemory {
    pub fn batch(&self) -> usize {
        self.lengths.len()
    }
}

/// Recurrent focus state of a batch of sequences.
#[derive(Debug, Clone, Copy)]
pub struct AttentionState {
    /// `[B, 1]` previous attended normalized position.
    pub pa: Var,
    /// `[B, S]` previous location-only weights.
    pub lambda: Var,
    /// 1-based timestep of the next call.
    pub t: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Focus {
    pub reference: Var,
    pub steps: Var,
    /// Before clamping.
    pub mu: Var,
    pub mu_clamped: Var,
    pub sigma: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// `[B, d]`, after `f_o`.
    pub context: Var,
    /// `[B, S]`.
    pub weights: Var,
    pub lambda: Option<Var>,
    pub focus: Option<Focus>,
    pub mix: Option<Var>,
}

fn check_lengths(lengths: &[usize], max_len: usize) -> Result<()> {
    if lengths.is_empty() || lengths.iter().any(|&s| s == 0 || s > max_len) {
        return Err(Error::contract(format!(
            "invalid encoding lengths {lengths:?} for padded length {max_len}"
        )));
    }
    Ok(())
}

/// Blends the encodings with their per-sequence reversal.
///
/// Returns `(e_dir, alpha_dir)` with `e_dir_i = α·e_i + (1-α)·e_{s+1-i}` on
/// valid positions. Padded positions keep their own encodings.
pub fn interpolate_direction<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &AttentionParams,
    e: Var,
    e_cls: Var,
    lengths: &[usize],
) -> Result<(Var, Var)> {
    let shape = g.shape(e).to_vec();
    let (b, s, d) = (shape[0], shape[1], shape[2]);
    check_lengths(lengths, s)?;
    let gate = params.f_dir.forward(g, store, e_cls)?;
    let gate = g.scale(gate, BETA)?;
    let alpha = g.sigmoid(gate)?;
    let index: Vec<usize> = lengths
        .iter()
        .enumerate()
        .flat_map(|(row, &len)| (0..s).map(move |i| row * s + if i < len { len - 1 - i } else { i }))
        .collect();
    let flat = g.reshape(e, &[b * s, d])?;
    let rev = g.gather(flat, index)?;
    let rev = g.reshape(rev, &[b, s, d])?;
    let a3 = g.reshape(alpha, &[b, 1, 1])?;
    let fwd = g.mul(a3, e)?;
    let one_minus = g.one_minus(a3)?;
    let bwd = g.mul(one_minus, rev)?;
    Ok((g.add(fwd, bwd)?, alpha))
}

/// Constant `[d, d]` matrix `P` with `(xP)_{2j} = -x_{2j+1}`, `(xP)_{2j+1} = x_{2j}`.
fn rope_swap<T: Scalar>(d: usize) -> Tensor<T> {
    let mut m = vec![0.0; d * d];
    for j in 0..d / 2 {
        m[(2 * j + 1) * d + 2 * j] = -1.0;
        m[(2 * j) * d + 2 * j + 1] = 1.0;
    }
    Tensor::from_f64(&[d, d], &m).expect("square")
}

/// Cos/sin tables `[n, d]` for positions `start..start+n`.
fn rope_tables<T: Scalar>(start: usize, n: usize, d: usize) -> (Tensor<T>, Tensor<T>) {
    let mut c = Vec::with_capacity(n * d);
    let mut s = Vec::with_capacity(n * d);
    for pos in start..start + n {
        for k in 0..d {
            let (sn, cs) = (rope_theta(k / 2, d) * pos as f64).sin_cos();
            c.push(cs);
            s.push(sn);
        }
    }
    (
        Tensor::from_f64(&[n, d], &c).expect("table"),
        Tensor::from_f64(&[n, d], &s).expect("table"),
    )
}

/// Rotates `x: [.., n, d]` row-wise by the positions `start..start+n`.
fn rope_apply<T: Scalar>(g: &mut Graph<T>, x: Var, start: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let r = shape.len();
    let (n, d) = (shape[r - 2], shape[r - 1]);
    if d % 2 != 0 {
        return Err(Error::contract(format!("rotary embedding needs an even width, got {d}")));
    }
    let rows: usize = shape[..r - 1].iter().product();
    let (c, s) = rope_tables::<T>(start, n, d);
    let c = g.constant(c);
    let s = g.constant(s);
    let p = g.constant(rope_swap(d));
    let flat = g.reshape(x, &[rows, d])?;
    let swapped = g.matmul(flat, p)?;
    let swapped = g.reshape(swapped, &shape)?;
    let a = g.mul(x, c)?;
    let b = g.mul(swapped, s)?;
    g.add(a, b)
}

/// Builds keys, values, masks and position tables for one batch.
pub fn prepare<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &AttentionParams,
    kind: AttentionKind,
    e: Var,
    e_cls: Var,
    lengths: &[usize],
) -> Result<AttentionMemory> {
    let shape = g.shape(e).to_vec();
    if shape.len() != 3 || shape[2] != params.d || shape[0] != lengths.len() {
        return Err(Error::Shape {
            op: "attention-prepare",
            lhs: shape,
            rhs: vec![lengths.len(), params.d],
        });
    }
    let (b, s) = (shape[0], shape[1]);
    check_lengths(lengths, s)?;

    let (source, alpha_dir) = if kind.base.uses_direction() {
        let (e_dir, alpha) = interpolate_direction(g, store, params, e, e_cls, lengths)?;
        (e_dir, Some(alpha))
    } else {
        (e, None)
    };

    let mut keys = params.f_k.forward(g, store, source)?;
    if kind.base == AttentionBase::BiRope {
        keys = rope_apply(g, keys, 1)?;
    }
    let keys_t = g.transpose(keys)?;
    let pre = params.value_pre.forward(g, store, source)?;
    let pre = g.leaky_relu(pre, LEAKY_SLOPE)?;
    let values = params.f_v.forward(g, store, pre)?;

    let mut mask = Vec::with_capacity(b * s);
    let mut norm = Vec::with_capacity(b * s);
    for &len in lengths {
        for i in 1..=s {
            let valid = i <= len;
            mask.push(if valid { 0.0 } else { MASKED });
            norm.push(if valid { norm_position(i, len)? } else { 0.0 });
        }
    }
    let inv_len: Vec<f64> = lengths.iter().map(|&l| 1.0 / l as f64).collect();
    let steps: Vec<f64> = lengths.iter().map(|&l| stepsize(l)).collect();
    Ok(AttentionMemory {
        lengths: lengths.to_vec(),
        max_len: s,
        keys,
        keys_t,
        values,
        mask: g.constant_f64(&[b, s], &mask)?,
        norm: g.constant_f64(&[b, s], &norm)?,
        inv_len: g.constant_f64(&[b, 1], &inv_len)?,
        stepsize: g.constant_f64(&[b, 1], &steps)?,
        alpha_dir,
    })
}

/// `pa_0 = 0` and a point mass on position 1.
pub fn initial_state<T: Scalar>(g: &mut Graph<T>, memory: &AttentionMemory) -> AttentionState {
    let (b, s) = (memory.batch(), memory.max_len);
    let mut lambda = vec![0.0; b * s];
    for row in 0..b {
        lambda[row * s] = 1.0;
    }
    AttentionState {
        pa: g.constant(Tensor::zeros(&[b, 1])),
        lambda: g.constant_f64(&[b, s], &lambda).expect("shape"),
        t: 1,
    }
}

/// `⌊x⌋ + sigmoid(τ(x - ⌊x⌋ - 0.5))` with gradient only through the sigmoid.
pub fn softstair_graph<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let fl = g.floor(x)?;
    let frac = g.sub(x, fl)?;
    let centered = g.add_scalar(frac, -0.5)?;
    let z = g.scale(centered, TAU)?;
    let sig = g.sigmoid(z)?;
    g.add(fl, sig)
}

pub fn clamp_mu_graph<T: Scalar>(g: &mut Graph<T>, mu: Var) -> Result<Var> {
    let lo = g.scale(mu, CLAMP_SLOPE)?;
    let hi = g.add_scalar(lo, 1.0)?;
    let inner = g.minimum(hi, mu)?;
    g.maximum(lo, inner)
}

/// Masked normalized Gaussian over `norm: [B, S]` with `mu, sigma: [B, 1]`.
pub fn location_weights_graph<T: Scalar>(g: &mut Graph<T>, norm: Var, mask: Var, mu: Var, sigma: Var) -> Result<Var> {
    let diff = g.sub(norm, mu)?;
    let sq = g.square(diff)?;
    let var = g.square(sigma)?;
    let inv = g.reciprocal(var)?;
    let coef = g.scale(inv, -0.5)?;
    let logits = g.mul(sq, coef)?;
    let logits = g.add(logits, mask)?;
    g.softmax(logits, 1)
}

/// Reference, steps, center and spread of the location focus.
#[allow(clippy::too_many_arguments)]
pub fn compute_focus<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &AttentionParams,
    kind: AttentionKind,
    l: Var,
    pa: Var,
    t: usize,
    inv_len: Var,
    step: Var,
) -> Result<Focus> {
    if !kind.base.is_location() {
        return Err(Error::contract(format!("{} has no location focus", kind.base.name())));
    }
    if t == 0 {
        return Err(Error::State("timesteps are 1-based".into()));
    }
    let spread = params.f_sigma.forward(g, store, l)?;
    let spread = g.relu(spread)?;
    let spread = g.add_scalar(spread, MIN_SIGMA)?;
    let sigma = g.mul(spread, inv_len)?;

    let x = params.f_step.forward(g, store, l)?;
    let steps = match kind.base {
        AttentionBase::Location | AttentionBase::LocationS => softstair_graph(g, x)?,
        AttentionBase::Onestep => g.sigmoid(x)?,
        AttentionBase::Monotonic => {
            let p = g.param(store, params.p);
            let gate = g.sigmoid(p)?;
            let bounded = g.sigmoid(x)?;
            let open = g.relu(x)?;
            let a = g.mul(gate, bounded)?;
            let rest = g.one_minus(gate)?;
            let b = g.mul(rest, open)?;
            g.add(a, b)?
        }
        AttentionBase::RelaxedMonotonic => g.relu(x)?,
        _ => unreachable!("checked above"),
    };

    let reference = match kind.base {
        AttentionBase::Location => {
            let gate = params.f_g.forward(g, store, l)?;
            let gate = g.sigmoid(gate)?;
            let bias = params.f_b.forward(g, store, l)?;
            let bias = g.sigmoid(bias)?;
            let kept = g.mul(gate, pa)?;
            g.add(kept, bias)?
        }
        AttentionBase::LocationS if t == 1 => {
            let bias = params.f_b.forward(g, store, l)?;
            g.sigmoid(bias)?
        }
        _ => pa,
    };

    let moved = g.mul(step, steps)?;
    let mu = g.add(reference, moved)?;
    let mu_clamped = clamp_mu_graph(g, mu)?;
    Ok(Focus {
        reference,
        steps,
        mu,
        mu_clamped,
        sigma,
    })
}

/// Scaled dot products of `q: [B, d]` with the keys, as `[B, S]`.
fn content_scores<T: Scalar>(g: &mut Graph<T>, memory: &AttentionMemory, q: Var, d: usize) -> Result<Var> {
    let b = memory.batch();
    let q3 = g.reshape(q, &[b, 1, d])?;
    let s = g.matmul(q3, memory.keys_t)?;
    let s = g.reshape(s, &[b, memory.max_len])?;
    g.scale(s, 1.0 / (d as f64).sqrt())
}

/// `[d, S]` sinusoids of the distances `i - t` for `i = 1..=S`.
fn relative_table<T: Scalar>(t: usize, s: usize, d: usize) -> Tensor<T> {
    let mut data = vec![0.0; d * s];
    for i in 1..=s {
        let pe = sinusoid(i as f64 - t as f64, d);
        for (k, v) in pe.into_iter().enumerate() {
            data[k * s + (i - 1)] = v;
        }
    }
    Tensor::from_f64(&[d, s], &data).expect("table")
}

/// Relative position scores `⟨q + b_2, pe_{i-t}⟩/√d` as `[B, S]`.
pub fn relative_scores<T: Scalar>(g: &mut Graph<T>, q_b2: Var, t: usize, s: usize) -> Result<Var> {
    let d = *g.shape(q_b2).last().expect("rank >= 1");
    let table = g.constant(relative_table(t, s, d));
    let r = g.matmul(q_b2, table)?;
    g.scale(r, 1.0 / (d as f64).sqrt())
}

/// One decoding timestep of attention from the decoder state `h: [B, d]`.
pub fn attend<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &AttentionParams,
    kind: AttentionKind,
    memory: &AttentionMemory,
    h: Var,
    state: &AttentionState,
) -> Result<(AttentionOutput, AttentionState)> {
    let (b, s, d) = (memory.batch(), memory.max_len, params.d);
    if g.shape(h) != [b, d] {
        return Err(Error::Shape {
            op: "attend",
            lhs: g.shape(h).to_vec(),
            rhs: vec![b, d],
        });
    }
    if state.t == 0 {
        return Err(Error::State("attention state not initialized".into()));
    }
    let q = params.f_q.forward(g, store, h)?;

    let mut next = AttentionState {
        t: state.t + 1,
        ..*state
    };
    let (weights, lambda, focus, mix) = if kind.base.is_location() {
        let l = params.f_l.forward(g, store, h)?;
        let focus = compute_focus(g, store, params, kind, l, state.pa, state.t, memory.inv_len, memory.stepsize)?;
        let lambda = location_weights_graph(g, memory.norm, memory.mask, focus.mu_clamped, focus.sigma)?;
        let (weights, mix) = if kind.mix_content {
            let c = content_scores(g, memory, q, d)?;
            let c = g.add(c, memory.mask)?;
            let soft = g.softmax(c, 1)?;
            let m = params.f_mix.forward(g, store, h)?;
            let m = g.scale(m, BETA)?;
            let mix = g.sigmoid(m)?;
            let a = g.mul(mix, soft)?;
            let rest = g.one_minus(mix)?;
            let bl = g.mul(rest, lambda)?;
            (g.add(a, bl)?, Some(mix))
        } else {
            (lambda, None)
        };
        let tracked = if kind.pr_reference { lambda } else { weights };
        let weighted = g.mul(tracked, memory.norm)?;
        next.pa = g.sum(weighted, 1)?;
        next.lambda = lambda;
        (weights, Some(lambda), Some(focus), mix)
    } else {
        let scores = match kind.base {
            AttentionBase::Content => content_scores(g, memory, q, d)?,
            AttentionBase::Relative | AttentionBase::BiRelative => {
                let b1 = g.param(store, params.b_1);
                let qb1 = g.add(q, b1)?;
                let c = content_scores(g, memory, qb1, d)?;
                let b2 = g.param(store, params.b_2);
                let qb2 = g.add(q, b2)?;
                let r = relative_scores(g, qb2, state.t, s)?;
                g.add(c, r)?
            }
            AttentionBase::BiRope => {
                let q3 = g.reshape(q, &[b, 1, d])?;
                let qr = rope_apply(g, q3, state.t)?;
                let qr = g.reshape(qr, &[b, d])?;
                content_scores(g, memory, qr, d)?
            }
            _ => unreachable!("location bases handled above"),
        };
        let scores = g.add(scores, memory.mask)?;
        (g.softmax(scores, 1)?, None, None, None)
    };

    let a3 = g.reshape(weights, &[b, 1, s])?;
    let ctx = g.matmul(a3, memory.values)?;
    let ctx = g.reshape(ctx, &[b, d])?;
    let context = params.f_o.forward(g, store, ctx)?;
    Ok((
        AttentionOutput {
            context,
            weights,
            lambda,
            focus,
            mix,
        },
        next,
    ))
}
