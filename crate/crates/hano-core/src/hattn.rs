//! Hierarchically nested attention over a quadtree of token grids.
//!
//! One V-cycle runs in four steps on a tree with levels `1..=r` (coarsest to
//! finest):
//!
//! 1. project the finest tokens to queries/keys/values (`q = W^Q f` etc.);
//! 2. *reduce* q/k/v level by level: a parent aggregates its four children
//!    through per-slot matrices, `x_i = Σ_s R_s · x_{(i,s)}`;
//! 3. run windowed *local attention* independently at every level,
//!    `h_i = Σ_{j∈N(i)} G(q_i, k_j) · v_j` with `G = exp(q·k·α)`;
//! 4. *decompose & mix* coarse context back down: walking coarse → fine,
//!    each child accumulates `h_{(i,s)} += D_sᵀ h_i`, so level-`m` context
//!    rides through every decompose stage below it.
//!
//! Attention weights can be softmax-normalized per window and the score can
//! carry the `1/√C` temperature; both are switchable so the unnormalized,
//! unscaled form stays an exact linear map in `v` (which the hierarchical
//! matrix oracle in [`crate::hmatrix`] certifies against this module).
//!
//! Every kernel threads a multiply-accumulate counter; the `*_counted`
//! entry points expose it so linear cost growth is measurable, not assumed.

use crate::diffcore::{softmax_slice, softmax_slice_backward, Tensor};
use crate::error::{Error, Result};
use crate::hierarchy::{IndexTree, TokenIndex};
use rand::Rng;

/// Channel vectors attached to the tokens of one level's `side × side` grid,
/// stored row-major by token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenField {
    side: usize,
    channels: usize,
    data: Vec<f64>,
}

impl TokenField {
    pub fn zeros(side: usize, channels: usize) -> Result<Self> {
        if side == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "token field needs positive side and channels, got {side}x{side} c={channels}"
            )));
        }
        Ok(TokenField {
            side,
            channels,
            data: vec![0.0; side * side * channels],
        })
    }

    pub fn from_vec(side: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != side * side * channels {
            return Err(Error::shape(format!(
                "token field {side}x{side} with {channels} channels needs {} values, got {}",
                side * side * channels,
                data.len()
            )));
        }
        if side == 0 || channels == 0 {
            return Err(Error::invalid("token field dims must be positive"));
        }
        Ok(TokenField {
            side,
            channels,
            data,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of tokens (`side²`).
    pub fn count(&self) -> usize {
        self.side * self.side
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn token(&self, t: usize) -> &[f64] {
        &self.data[t * self.channels..(t + 1) * self.channels]
    }

    #[inline]
    pub fn token_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.channels..(t + 1) * self.channels]
    }

    /// Field with entries drawn uniformly from `[-0.5, 0.5)` — a generic
    /// probe input for equivalence checks and benchmarks.
    pub fn random<R: Rng>(rng: &mut R, side: usize, channels: usize) -> Result<Self> {
        TokenField::from_vec(
            side,
            channels,
            (0..side * side * channels)
                .map(|_| rng.random_range(-0.5..0.5))
                .collect(),
        )
    }
}

/// Attention behaviour switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnMode {
    /// Softmax-normalize the window weights (row sums 1).
    pub normalize: bool,
    /// Put the `1/√C` temperature inside the score.
    pub scale: bool,
}

impl AttnMode {
    /// Mode used by the trained model.
    pub const TRAINED: AttnMode = AttnMode {
        normalize: true,
        scale: true,
    };
    /// Raw exponential-kernel mode: the output is linear in `v`, matching
    /// the materialized hierarchical matrix exactly.
    pub const ORACLE: AttnMode = AttnMode {
        normalize: false,
        scale: false,
    };
}

/// Borrowed per-transition weights connecting coarse level `m` (rows) to its
/// fine level `m+1` (columns): all matrices are `[C_m, C_{m+1}]`, one per
/// child slot in row-major slot order.
#[derive(Debug, Clone, Copy)]
pub struct TransitionWeights<'a> {
    pub reduce_q: [&'a Tensor; 4],
    pub reduce_k: [&'a Tensor; 4],
    pub reduce_v: [&'a Tensor; 4],
    pub decompose: [&'a Tensor; 4],
}

/// Borrowed weights of one V-cycle: finest-level q/k/v projections plus one
/// [`TransitionWeights`] per level pair; `transitions[m−1]` connects levels
/// `m` and `m+1`.
#[derive(Debug, Clone)]
pub struct VCycleWeights<'a> {
    pub wq: &'a Tensor,
    pub wk: &'a Tensor,
    pub wv: &'a Tensor,
    pub transitions: Vec<TransitionWeights<'a>>,
}

impl<'a> VCycleWeights<'a> {
    /// Per-level channel widths (index `m−1`), after validating every shape
    /// against `tree` and the input token width.
    pub fn widths(&self, tree: &IndexTree, token_channels: usize) -> Result<Vec<usize>> {
        let r = tree.levels();
        if self.transitions.len() + 1 != r {
            return Err(Error::invalid(format!(
                "tree has {r} levels but weights carry {} transitions (need {})",
                self.transitions.len(),
                r - 1
            )));
        }
        for w in [self.wq, self.wk, self.wv] {
            if w.shape() != [token_channels, token_channels] {
                return Err(Error::shape(format!(
                    "q/k/v projection must be [{token_channels}, {token_channels}], got {:?}",
                    w.shape()
                )));
            }
        }
        let mut widths = vec![0usize; r];
        widths[r - 1] = token_channels;
        for m in (1..r).rev() {
            let tr = &self.transitions[m - 1];
            let fine = widths[m];
            let coarse = match tr.reduce_q[0].shape() {
                [c, f] if *f == fine => *c,
                other => {
                    return Err(Error::shape(format!(
                        "reduce matrix between levels {m} and {} must be [C_{m}, {fine}], got {other:?}",
                        m + 1
                    )))
                }
            };
            for t in tr
                .reduce_q
                .iter()
                .chain(tr.reduce_k.iter())
                .chain(tr.reduce_v.iter())
                .chain(tr.decompose.iter())
            {
                if t.shape() != [coarse, fine] {
                    return Err(Error::shape(format!(
                        "all matrices between levels {m} and {} must be [{coarse}, {fine}], got {:?}",
                        m + 1,
                        t.shape()
                    )));
                }
            }
            widths[m - 1] = coarse;
        }
        Ok(widths)
    }
}

/// Owned weight set for one V-cycle, independent of any model parameter
/// store. Equivalence checks and benchmarks build one from a seed, then
/// [`borrow`](OwnedVCycleWeights::borrow) it into the view the kernels take.
///
/// `transitions[m−1]` holds the four weight groups between levels `m` and
/// `m+1` in the order reduce-q, reduce-k, reduce-v, decompose; each group has
/// one `[C_m, C_{m+1}]` matrix per child slot.
#[derive(Debug, Clone)]
pub struct OwnedVCycleWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub transitions: Vec<[Vec<Tensor>; 4]>,
}

impl OwnedVCycleWeights {
    /// Weight set for per-level channel widths `widths` (coarsest first),
    /// every entry drawn uniformly from `[-0.5, 0.5)`.
    pub fn random<R: Rng>(rng: &mut R, widths: &[usize]) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::invalid(format!(
                "channel widths must be non-empty and positive, got {widths:?}"
            )));
        }
        let draw = |rng: &mut R, shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-0.5..0.5)).collect())
        };
        let r = widths.len();
        let mut transitions = Vec::with_capacity(r - 1);
        for m in 1..r {
            let shape = [widths[m - 1], widths[m]];
            let mut groups = Vec::with_capacity(4);
            for _ in 0..4 {
                let slots = (0..4)
                    .map(|_| draw(rng, &shape))
                    .collect::<Result<Vec<_>>>()?;
                groups.push(slots);
            }
            let [rq, rk, rv, d] = <[Vec<Tensor>; 4]>::try_from(groups)
                .expect("exactly four groups were collected");
            transitions.push([rq, rk, rv, d]);
        }
        let cr = widths[r - 1];
        Ok(OwnedVCycleWeights {
            wq: draw(rng, &[cr, cr])?,
            wk: draw(rng, &[cr, cr])?,
            wv: draw(rng, &[cr, cr])?,
            transitions,
        })
    }

    /// Borrow as the view [`v_cycle`] and the materialization oracle take.
    pub fn borrow(&self) -> VCycleWeights<'_> {
        VCycleWeights {
            wq: &self.wq,
            wk: &self.wk,
            wv: &self.wv,
            transitions: self
                .transitions
                .iter()
                .map(|t| TransitionWeights {
                    reduce_q: [&t[0][0], &t[0][1], &t[0][2], &t[0][3]],
                    reduce_k: [&t[1][0], &t[1][1], &t[1][2], &t[1][3]],
                    reduce_v: [&t[2][0], &t[2][1], &t[2][2], &t[2][3]],
                    decompose: [&t[3][0], &t[3][1], &t[3][2], &t[3][3]],
                })
                .collect(),
        }
    }
}

/// Owned gradients for one transition, same layout as [`TransitionWeights`].
#[derive(Debug, Clone)]
pub struct TransitionGrads {
    pub reduce_q: [Tensor; 4],
    pub reduce_k: [Tensor; 4],
    pub reduce_v: [Tensor; 4],
    pub decompose: [Tensor; 4],
}

/// Owned gradients of a full V-cycle, including the input-token gradient.
#[derive(Debug, Clone)]
pub struct VCycleGrads {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub transitions: Vec<TransitionGrads>,
    pub tokens: TokenField,
}

/// Saved forward state for [`v_cycle_backward`].
#[derive(Debug, Clone)]
pub struct VCycleTrace {
    tokens: TokenField,
    /// Per-level q/k/v fields, index `m−1`.
    q: Vec<TokenField>,
    k: Vec<TokenField>,
    v: Vec<TokenField>,
    /// Per-level attention weights.
    caches: Vec<AttnCache>,
    /// Per-level h fields *after* the mix sweep (`h[r−1]` is the output).
    h: Vec<TokenField>,
}

/// Attention weights per token window, flattened with offsets.
#[derive(Debug, Clone)]
pub struct AttnCache {
    weights: Vec<f64>,
    offsets: Vec<usize>,
}

/// Project finest-level tokens to queries, keys and values.
pub fn qkv(
    tokens: &TokenField,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    flops: &mut u64,
) -> Result<(TokenField, TokenField, TokenField)> {
    let c = tokens.channels;
    let n = tokens.count();
    let mut out = Vec::with_capacity(3);
    for w in [wq, wk, wv] {
        if w.shape() != [c, c] {
            return Err(Error::shape(format!(
                "projection weight must be [{c}, {c}], got {:?}",
                w.shape()
            )));
        }
        let y = crate::diffcore::affine(&tokens.data, n, w, None)?;
        out.push(TokenField {
            side: tokens.side,
            channels: c,
            data: y,
        });
        *flops += (n * c * c) as u64;
    }
    let v = out.pop().expect("three projections");
    let k = out.pop().expect("three projections");
    let q = out.pop().expect("three projections");
    Ok((q, k, v))
}

#[inline]
fn child_token(fine_side: usize, row: usize, col: usize, slot: usize) -> usize {
    let dr = slot / 2;
    let dc = slot % 2;
    (2 * row + dr) * fine_side + (2 * col + dc)
}

/// Aggregate a fine field one level up: `coarse_i = Σ_s R_s · fine_{(i,s)}`.
pub fn reduce_level(
    fine: &TokenField,
    reduce: &[&Tensor; 4],
    flops: &mut u64,
) -> Result<TokenField> {
    if !fine.side.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "cannot reduce a field with odd side {}",
            fine.side
        )));
    }
    let cf = fine.channels;
    let cc = match reduce[0].shape() {
        [c, f] if *f == cf => *c,
        other => {
            return Err(Error::shape(format!(
                "reduce matrices must be [C_coarse, {cf}], got {other:?}"
            )))
        }
    };
    for r in reduce {
        if r.shape() != [cc, cf] {
            return Err(Error::shape(format!(
                "all four reduce matrices must be [{cc}, {cf}], got {:?}",
                r.shape()
            )));
        }
    }
    let coarse_side = fine.side / 2;
    let mut coarse = TokenField::zeros(coarse_side, cc)?;
    for row in 0..coarse_side {
        for col in 0..coarse_side {
            let out = row * coarse_side + col;
            for (slot, r) in reduce.iter().enumerate() {
                let child = fine.token(child_token(fine.side, row, col, slot));
                let rd = r.data();
                let acc = coarse.token_mut(out);
                for (o, acc_o) in acc.iter_mut().enumerate() {
                    let rrow = &rd[o * cf..(o + 1) * cf];
                    let mut sum = 0.0;
                    for i in 0..cf {
                        sum += rrow[i] * child[i];
                    }
                    *acc_o += sum;
                }
            }
        }
    }
    *flops += (coarse_side * coarse_side * 4 * cc * cf) as u64;
    Ok(coarse)
}

/// Backward of [`reduce_level`]: accumulates `d_reduce` and `d_fine` from the
/// coarse-side gradient.
fn reduce_level_backward(
    fine: &TokenField,
    reduce: &[&Tensor; 4],
    d_coarse: &TokenField,
    d_reduce: &mut [Tensor; 4],
    d_fine: &mut TokenField,
) {
    let cf = fine.channels;
    let cc = d_coarse.channels;
    let coarse_side = d_coarse.side;
    for row in 0..coarse_side {
        for col in 0..coarse_side {
            let g = d_coarse.token(row * coarse_side + col);
            for slot in 0..4 {
                let child_idx = child_token(fine.side, row, col, slot);
                let child = fine.token(child_idx);
                let rd = reduce[slot].data();
                let drd = d_reduce[slot].data_mut();
                let dchild = d_fine.token_mut(child_idx);
                for o in 0..cc {
                    let go = g[o];
                    let rrow = &rd[o * cf..(o + 1) * cf];
                    let drrow = &mut drd[o * cf..(o + 1) * cf];
                    for i in 0..cf {
                        drrow[i] += go * child[i];
                        dchild[i] += go * rrow[i];
                    }
                }
            }
        }
    }
}

/// Windowed attention at one level. Returns the context field and the
/// per-window weights needed by the backward pass.
pub fn local_attention(
    q: &TokenField,
    k: &TokenField,
    v: &TokenField,
    tree: &IndexTree,
    level: usize,
    mode: AttnMode,
    flops: &mut u64,
) -> Result<(TokenField, AttnCache)> {
    let side = q.side;
    let c = q.channels;
    if k.side != side || v.side != side || k.channels != c || v.channels != c {
        return Err(Error::shape(
            "q/k/v fields must share side and channels".to_string(),
        ));
    }
    if level < 1 || level > tree.levels() || tree.side(level) != side {
        return Err(Error::invalid(format!(
            "field side {side} does not match tree level {level}"
        )));
    }
    let alpha = if mode.scale {
        1.0 / (c as f64).sqrt()
    } else {
        1.0
    };
    let mut h = TokenField::zeros(side, c)?;
    let mut weights = Vec::with_capacity(side * side * tree.window(level).pow(2));
    let mut offsets = Vec::with_capacity(side * side + 1);
    offsets.push(0);
    let mut scores: Vec<f64> = Vec::new();
    let mut pair_count = 0u64;
    for row in 0..side {
        for col in 0..side {
            let t = row * side + col;
            let qi = q.token(t);
            let window = tree.neighbors(TokenIndex::new(level, row, col))?;
            scores.clear();
            for j in &window {
                let kj = k.token(j.row * side + j.col);
                let mut dot = 0.0;
                for i in 0..c {
                    dot += qi[i] * kj[i];
                }
                scores.push(alpha * dot);
            }
            let start = weights.len();
            weights.resize(start + window.len(), 0.0);
            let w_slice = &mut weights[start..];
            if mode.normalize {
                softmax_slice(&scores, w_slice);
            } else {
                for (w, s) in w_slice.iter_mut().zip(&scores) {
                    *w = s.exp();
                }
            }
            let ht = h.token_mut(t);
            for (j, &w) in window.iter().zip(w_slice.iter()) {
                let vj = v.token(j.row * side + j.col);
                for i in 0..c {
                    ht[i] += w * vj[i];
                }
            }
            pair_count += window.len() as u64;
            offsets.push(weights.len());
        }
    }
    // One dot product and one weighted accumulation per window pair.
    *flops += pair_count * (2 * c as u64 + 1);
    Ok((h, AttnCache { weights, offsets }))
}

/// Backward of [`local_attention`]; returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
fn local_attention_backward(
    q: &TokenField,
    k: &TokenField,
    v: &TokenField,
    cache: &AttnCache,
    tree: &IndexTree,
    level: usize,
    mode: AttnMode,
    dh: &TokenField,
) -> Result<(TokenField, TokenField, TokenField)> {
    let side = q.side;
    let c = q.channels;
    let alpha = if mode.scale {
        1.0 / (c as f64).sqrt()
    } else {
        1.0
    };
    let mut dq = TokenField::zeros(side, c)?;
    let mut dk = TokenField::zeros(side, c)?;
    let mut dv = TokenField::zeros(side, c)?;
    let mut dw: Vec<f64> = Vec::new();
    let mut ds: Vec<f64> = Vec::new();
    for row in 0..side {
        for col in 0..side {
            let t = row * side + col;
            let window = tree.neighbors(TokenIndex::new(level, row, col))?;
            let w = &cache.weights[cache.offsets[t]..cache.offsets[t + 1]];
            debug_assert_eq!(w.len(), window.len());
            let dht = dh.token(t);
            let qi = q.token(t);
            dw.clear();
            for (j, &wj) in window.iter().zip(w) {
                let jt = j.row * side + j.col;
                let vj = v.token(jt);
                let mut dot = 0.0;
                for i in 0..c {
                    dot += dht[i] * vj[i];
                }
                dw.push(dot);
                let dvj = dv.token_mut(jt);
                for i in 0..c {
                    dvj[i] += wj * dht[i];
                }
            }
            ds.clear();
            ds.resize(window.len(), 0.0);
            if mode.normalize {
                softmax_slice_backward(w, &dw, &mut ds);
            } else {
                // w = exp(s) ⇒ ds = w·dw.
                for ((d, &wj), &g) in ds.iter_mut().zip(w).zip(&dw) {
                    *d = wj * g;
                }
            }
            let dqi = dq.token_mut(t);
            for (j, &dsj) in window.iter().zip(&ds) {
                let jt = j.row * side + j.col;
                let kj = k.token(jt);
                let dkj = dk.token_mut(jt);
                let a_ds = alpha * dsj;
                for i in 0..c {
                    dqi[i] += a_ds * kj[i];
                    dkj[i] += a_ds * qi[i];
                }
            }
        }
    }
    Ok((dq, dk, dv))
}

/// Scatter coarse context down one level: `fine_{(i,s)} += D_sᵀ · coarse_i`.
pub fn decompose_mix(
    coarse: &TokenField,
    fine: &mut TokenField,
    decompose: &[&Tensor; 4],
    flops: &mut u64,
) -> Result<()> {
    let cc = coarse.channels;
    let cf = fine.channels;
    if fine.side != 2 * coarse.side {
        return Err(Error::shape(format!(
            "fine side {} must be twice the coarse side {}",
            fine.side, coarse.side
        )));
    }
    for d in decompose {
        if d.shape() != [cc, cf] {
            return Err(Error::shape(format!(
                "decompose matrices must be [{cc}, {cf}], got {:?}",
                d.shape()
            )));
        }
    }
    let coarse_side = coarse.side;
    for row in 0..coarse_side {
        for col in 0..coarse_side {
            let hi = coarse.token(row * coarse_side + col);
            for (slot, d) in decompose.iter().enumerate() {
                let dd = d.data();
                let child = fine.token_mut(child_token(fine.side, row, col, slot));
                for (o, &h) in hi.iter().enumerate() {
                    let drow = &dd[o * cf..(o + 1) * cf];
                    for i in 0..cf {
                        child[i] += h * drow[i];
                    }
                }
            }
        }
    }
    *flops += (coarse_side * coarse_side * 4 * cc * cf) as u64;
    Ok(())
}

/// Backward of [`decompose_mix`]: accumulates `d_decompose` and `d_coarse`
/// from the fine-side gradient. The fine-side gradient itself passes through
/// unchanged (the op is `+=`), so it is not returned.
fn decompose_mix_backward(
    coarse: &TokenField,
    d_fine: &TokenField,
    decompose: &[&Tensor; 4],
    d_decompose: &mut [Tensor; 4],
    d_coarse: &mut TokenField,
) {
    let cc = coarse.channels;
    let cf = d_fine.channels;
    let coarse_side = coarse.side;
    for row in 0..coarse_side {
        for col in 0..coarse_side {
            let ci = row * coarse_side + col;
            let hi = coarse.token(ci);
            for slot in 0..4 {
                let child = d_fine.token(child_token(d_fine.side, row, col, slot));
                let dd = decompose[slot].data();
                let ddd = d_decompose[slot].data_mut();
                let dhi = d_coarse.token_mut(ci);
                for o in 0..cc {
                    let drow = &dd[o * cf..(o + 1) * cf];
                    let ddrow = &mut ddd[o * cf..(o + 1) * cf];
                    let mut acc = 0.0;
                    for i in 0..cf {
                        ddrow[i] += hi[o] * child[i];
                        acc += drow[i] * child[i];
                    }
                    dhi[o] += acc;
                }
            }
        }
    }
}

/// One V-cycle of hierarchically nested attention.
pub fn v_cycle(
    tokens: &TokenField,
    weights: &VCycleWeights,
    tree: &IndexTree,
    mode: AttnMode,
) -> Result<TokenField> {
    let mut flops = 0u64;
    v_cycle_counted(tokens, weights, tree, mode, &mut flops)
}

/// [`v_cycle`] with an explicit multiply-accumulate counter.
pub fn v_cycle_counted(
    tokens: &TokenField,
    weights: &VCycleWeights,
    tree: &IndexTree,
    mode: AttnMode,
    flops: &mut u64,
) -> Result<TokenField> {
    let (out, _) = v_cycle_traced(tokens, weights, tree, mode, flops)?;
    Ok(out)
}

/// [`v_cycle`] that also returns the forward trace needed by
/// [`v_cycle_backward`].
pub fn v_cycle_traced(
    tokens: &TokenField,
    weights: &VCycleWeights,
    tree: &IndexTree,
    mode: AttnMode,
    flops: &mut u64,
) -> Result<(TokenField, VCycleTrace)> {
    let r = tree.levels();
    let widths = weights.widths(tree, tokens.channels)?;
    if tokens.side != tree.side(r) {
        return Err(Error::invalid(format!(
            "token grid side {} does not match finest tree side {}",
            tokens.side,
            tree.side(r)
        )));
    }
    // STEP 0: project at the finest level.
    let (qf, kf, vf) = qkv(tokens, weights.wq, weights.wk, weights.wv, flops)?;
    let mut q = vec![TokenField::zeros(1, 1)?; r];
    let mut k = q.clone();
    let mut v = q.clone();
    q[r - 1] = qf;
    k[r - 1] = kf;
    v[r - 1] = vf;
    // STEP 1: reduce towards the coarsest level.
    for m in (1..r).rev() {
        let tr = &weights.transitions[m - 1];
        q[m - 1] = reduce_level(&q[m], &tr.reduce_q, flops)?;
        k[m - 1] = reduce_level(&k[m], &tr.reduce_k, flops)?;
        v[m - 1] = reduce_level(&v[m], &tr.reduce_v, flops)?;
    }
    // STEP 2: local attention at every level.
    let mut h = Vec::with_capacity(r);
    let mut caches = Vec::with_capacity(r);
    for m in 1..=r {
        let (hm, cache) = local_attention(&q[m - 1], &k[m - 1], &v[m - 1], tree, m, mode, flops)?;
        h.push(hm);
        caches.push(cache);
    }
    // STEP 3: mix coarse context downwards; h[m] is final once the sweep
    // passes it, so deeper levels receive already-mixed context.
    for m in 1..r {
        let (coarse, fine) = {
            let (a, b) = h.split_at_mut(m);
            (&a[m - 1], &mut b[0])
        };
        decompose_mix(coarse, fine, &weights.transitions[m - 1].decompose, flops)?;
    }
    debug_assert_eq!(widths[r - 1], tokens.channels);
    let out = h[r - 1].clone();
    Ok((
        out,
        VCycleTrace {
            tokens: tokens.clone(),
            q,
            k,
            v,
            caches,
            h,
        },
    ))
}

/// Reverse-mode pass through one V-cycle. `d_out` is the gradient at the
/// cycle output; returns gradients for every weight and for the input tokens.
pub fn v_cycle_backward(
    trace: &VCycleTrace,
    weights: &VCycleWeights,
    tree: &IndexTree,
    mode: AttnMode,
    d_out: &TokenField,
) -> Result<VCycleGrads> {
    let r = tree.levels();
    let widths = weights.widths(tree, trace.tokens.channels)?;
    if d_out.side != trace.h[r - 1].side || d_out.channels != trace.h[r - 1].channels {
        return Err(Error::shape(
            "output gradient shape does not match the traced output".to_string(),
        ));
    }
    let mut transitions: Vec<TransitionGrads> = (1..r)
        .map(|m| {
            let shape = [widths[m - 1], widths[m]];
            let z = || Tensor::zeros(&shape).expect("positive dims");
            TransitionGrads {
                reduce_q: [z(), z(), z(), z()],
                reduce_k: [z(), z(), z(), z()],
                reduce_v: [z(), z(), z(), z()],
                decompose: [z(), z(), z(), z()],
            }
        })
        .collect();

    // STEP 3 backward: walk fine → coarse. dh[m] (m < r) only feeds the mix
    // into level m+1, so it starts at zero and fills here.
    let mut dh: Vec<TokenField> = (1..=r)
        .map(|m| TokenField::zeros(tree.side(m), widths[m - 1]))
        .collect::<Result<_>>()?;
    dh[r - 1] = d_out.clone();
    for m in (1..r).rev() {
        let (dh_coarse, dh_fine) = {
            let (a, b) = dh.split_at_mut(m);
            (&mut a[m - 1], &b[0])
        };
        decompose_mix_backward(
            &trace.h[m - 1],
            dh_fine,
            &weights.transitions[m - 1].decompose,
            &mut transitions[m - 1].decompose,
            dh_coarse,
        );
    }
    // STEP 2 backward: attention at every level.
    let mut dq = Vec::with_capacity(r);
    let mut dk = Vec::with_capacity(r);
    let mut dv = Vec::with_capacity(r);
    for m in 1..=r {
        let (a, b, c) = local_attention_backward(
            &trace.q[m - 1],
            &trace.k[m - 1],
            &trace.v[m - 1],
            &trace.caches[m - 1],
            tree,
            m,
            mode,
            &dh[m - 1],
        )?;
        dq.push(a);
        dk.push(b);
        dv.push(c);
    }
    // STEP 1 backward: coarse → fine, so each level's total q/k/v gradient
    // (attention term plus reduce pass-down) is complete before it feeds the
    // next finer level.
    for m in 1..r {
        let tr = &weights.transitions[m - 1];
        let grads = &mut transitions[m - 1];
        let (dq_coarse, dq_fine) = {
            let (a, b) = dq.split_at_mut(m);
            (&a[m - 1], &mut b[0])
        };
        reduce_level_backward(&trace.q[m], &tr.reduce_q, dq_coarse, &mut grads.reduce_q, dq_fine);
        let (dk_coarse, dk_fine) = {
            let (a, b) = dk.split_at_mut(m);
            (&a[m - 1], &mut b[0])
        };
        reduce_level_backward(&trace.k[m], &tr.reduce_k, dk_coarse, &mut grads.reduce_k, dk_fine);
        let (dv_coarse, dv_fine) = {
            let (a, b) = dv.split_at_mut(m);
            (&a[m - 1], &mut b[0])
        };
        reduce_level_backward(&trace.v[m], &tr.reduce_v, dv_coarse, &mut grads.reduce_v, dv_fine);
    }
    // STEP 0 backward: the three projections.
    let c = trace.tokens.channels;
    let n = trace.tokens.count();
    let mut dwq = Tensor::zeros(&[c, c])?;
    let mut dwk = Tensor::zeros(&[c, c])?;
    let mut dwv = Tensor::zeros(&[c, c])?;
    let mut dtokens = TokenField::zeros(trace.tokens.side, c)?;
    crate::diffcore::affine_backward(
        &trace.tokens.data,
        n,
        weights.wq,
        &dq[r - 1].data,
        &mut dwq,
        None,
        &mut dtokens.data,
    )?;
    crate::diffcore::affine_backward(
        &trace.tokens.data,
        n,
        weights.wk,
        &dk[r - 1].data,
        &mut dwk,
        None,
        &mut dtokens.data,
    )?;
    crate::diffcore::affine_backward(
        &trace.tokens.data,
        n,
        weights.wv,
        &dv[r - 1].data,
        &mut dwv,
        None,
        &mut dtokens.data,
    )?;
    Ok(VCycleGrads {
        wq: dwq,
        wk: dwk,
        wv: dwv,
        transitions,
        tokens: dtokens,
    })
}

/// Plain dense attention over all token pairs (softmax-normalized, scaled):
/// the quadratic-cost reference the hierarchical cycle approximates.
pub fn dense_attention(
    q: &TokenField,
    k: &TokenField,
    v: &TokenField,
    flops: &mut u64,
) -> Result<TokenField> {
    let side = q.side;
    let c = q.channels;
    if k.side != side || v.side != side || k.channels != c || v.channels != c {
        return Err(Error::shape(
            "q/k/v fields must share side and channels".to_string(),
        ));
    }
    let n = q.count();
    let alpha = 1.0 / (c as f64).sqrt();
    let mut h = TokenField::zeros(side, c)?;
    let mut scores = vec![0.0; n];
    let mut row = vec![0.0; n];
    for t in 0..n {
        let qi = q.token(t);
        for (j, s) in scores.iter_mut().enumerate() {
            let kj = k.token(j);
            let mut dot = 0.0;
            for i in 0..c {
                dot += qi[i] * kj[i];
            }
            *s = alpha * dot;
        }
        softmax_slice(&scores, &mut row);
        let ht = h.token_mut(t);
        for (j, &w) in row.iter().enumerate() {
            let vj = v.token(j);
            for i in 0..c {
                ht[i] += w * vj[i];
            }
        }
    }
    *flops += (n * n) as u64 * (2 * c as u64 + 1);
    Ok(h)
}
