//! The full operator network: patch embedding with coordinate channels,
//! `k` residual hierarchical-attention cycles with per-cycle layer
//! normalization, and a linear per-token decoder back to the grid.
//!
//! One forward pass is
//!
//! ```text
//! tokens = embed(a)                              // p×p patches → C_r
//! repeat k times: tokens += LN(v_cycle(tokens))  // residual cycles
//! u = unpatchify(decode(tokens))                 // C_r → p×p pixels
//! ```
//!
//! All parameters live in a [`ParamStore`] under stable names, so
//! checkpoints, the optimizer, and gradient checks all address the same
//! flat layout. Reverse-mode gradients are explicit: `backward` walks the
//! saved forward trace and accumulates into the store's gradient buffers.

use crate::data::dataset::{fnv1a64, Fnv1a};
use crate::data::resample::bilinear_resample;
use crate::diffcore::{
    affine, affine_backward, layer_norm, layer_norm_backward, LayerNormCache, ParamId,
    ParamStore, Tensor,
};
use crate::error::{Error, Result};
use crate::grid::GridField;
use crate::hattn::{
    v_cycle_backward, v_cycle_traced, AttnMode, TokenField, TransitionWeights, VCycleTrace,
    VCycleWeights,
};
use crate::hierarchy::IndexTree;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

/// File magic for checkpoint files.
pub const CHECKPOINT_MAGIC: [u8; 8] = *b"HANOCK01";
/// Checkpoint schema version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HanoConfig {
    /// Tree depth `r` (1 = single level).
    pub levels: usize,
    /// Channel width per level, coarsest first; length `r`.
    pub widths: Vec<usize>,
    /// Odd attention window per level; length `r`.
    pub windows: Vec<usize>,
    /// Patch size `p`; the token grid side is `n/p`.
    pub patch: usize,
    /// Number of residual attention cycles `k`.
    pub cycles: usize,
    /// Softmax-normalize attention windows.
    pub normalize: bool,
    /// Append the two normalized grid coordinates as input channels.
    pub include_coords: bool,
    /// Input fields per sample (the scalar coefficient).
    pub d_a: usize,
    /// Output fields per sample (the scalar solution).
    pub d_u: usize,
}

impl HanoConfig {
    /// Production-scale defaults: five levels of width 32, window 3,
    /// patch 4, two cycles.
    pub fn standard() -> Self {
        HanoConfig {
            levels: 5,
            widths: vec![32; 5],
            windows: vec![3; 5],
            patch: 4,
            cycles: 2,
            normalize: true,
            include_coords: true,
            d_a: 1,
            d_u: 1,
        }
    }

    /// Desk-scale test configuration: three levels of width 8.
    pub fn toy() -> Self {
        HanoConfig {
            levels: 3,
            widths: vec![8; 3],
            windows: vec![3; 3],
            patch: 4,
            cycles: 2,
            normalize: true,
            include_coords: true,
            d_a: 1,
            d_u: 1,
        }
    }

    /// Structural validation independent of any input resolution.
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::invalid("need at least one level"));
        }
        if self.widths.len() != self.levels || self.windows.len() != self.levels {
            return Err(Error::invalid(format!(
                "widths ({}) and windows ({}) must both have one entry per level ({})",
                self.widths.len(),
                self.windows.len(),
                self.levels
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::invalid("channel widths must be positive"));
        }
        if self.windows.iter().any(|&w| w == 0 || w % 2 == 0) {
            return Err(Error::invalid("windows must be positive and odd"));
        }
        if self.patch == 0 {
            return Err(Error::invalid("patch size must be positive"));
        }
        if self.cycles == 0 {
            return Err(Error::invalid("need at least one cycle"));
        }
        if self.d_a != 1 || self.d_u != 1 {
            return Err(Error::invalid(
                "only scalar input and output fields are supported (d_a = d_u = 1)"
                    .to_string(),
            ));
        }
        Ok(())
    }

    /// Validate against a concrete grid resolution and return the token
    /// grid side.
    pub fn token_side(&self, n: usize) -> Result<usize> {
        self.validate()?;
        if n == 0 || !n.is_multiple_of(self.patch) {
            return Err(Error::invalid(format!(
                "resolution {n} is not divisible by patch size {}",
                self.patch
            )));
        }
        let side = n / self.patch;
        // The tree constructor re-checks; this gives a clearer message.
        let factor = 1usize << (self.levels - 1);
        if !side.is_multiple_of(factor) || (self.levels > 1 && side / factor < 2) {
            return Err(Error::invalid(format!(
                "token side {side} cannot host {} levels",
                self.levels
            )));
        }
        Ok(side)
    }

    /// Input channels per pixel.
    pub fn d_in(&self) -> usize {
        self.d_a + if self.include_coords { 2 } else { 0 }
    }

    /// Channel width at the finest level.
    pub fn finest_width(&self) -> usize {
        *self.widths.last().expect("validated: at least one level")
    }

    fn attn_mode(&self) -> AttnMode {
        AttnMode {
            normalize: self.normalize,
            scale: true,
        }
    }

    /// Total parameter scalar count, in closed form.
    pub fn param_count(&self) -> usize {
        let c = self.finest_width();
        let p2 = self.patch * self.patch;
        let embed = c * p2 * self.d_in() + c;
        let transitions: usize = (1..self.levels)
            .map(|m| 16 * self.widths[m - 1] * self.widths[m])
            .sum();
        let per_cycle = 3 * c * c + transitions + 2 * c;
        let decode = p2 * self.d_u * c + p2 * self.d_u;
        embed + self.cycles * per_cycle + decode
    }
}

/// Resolved parameter ids for one transition (coarse level `m` to `m+1`).
#[derive(Debug, Clone)]
struct TransitionIds {
    rq: [ParamId; 4],
    rk: [ParamId; 4],
    rv: [ParamId; 4],
    d: [ParamId; 4],
}

/// Resolved parameter ids for one cycle.
#[derive(Debug, Clone)]
struct CycleIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    transitions: Vec<TransitionIds>,
    ln_gamma: ParamId,
    ln_beta: ParamId,
}

/// Resolved ids for the whole parameter layout.
#[derive(Debug, Clone)]
struct Layout {
    embed_w: ParamId,
    embed_b: ParamId,
    cycles: Vec<CycleIds>,
    decode_w: ParamId,
    decode_b: ParamId,
}

/// A model: configuration plus its parameter store.
#[derive(Debug, Clone)]
pub struct ModelState {
    config: HanoConfig,
    layout: Layout,
    store: ParamStore,
}

/// Saved intermediate state of one forward pass.
pub struct ForwardTrace {
    n: usize,
    tree: IndexTree,
    /// Flattened patch inputs, `n_tokens × (p²·d_in)`.
    patches: Vec<f64>,
    /// Token state right after the patch embedding.
    embedded: TokenField,
    /// Per-cycle attention trace.
    cycle_traces: Vec<VCycleTrace>,
    /// Per-cycle layer-norm cache.
    ln_caches: Vec<LayerNormCache>,
    /// Token state after the last cycle.
    final_tokens: TokenField,
}

impl ForwardTrace {
    /// The token field the patch embedding produced (pre-attention).
    pub fn embedded_tokens(&self) -> &TokenField {
        &self.embedded
    }
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    )
    .expect("positive dims")
}

impl ModelState {
    /// Initialize parameters: weights uniform in `±1/√fan_in`, biases zero,
    /// layer-norm gain one. Insertion order (and therefore checkpoint
    /// order) is fixed: embedding, cycles in order, decoder.
    pub fn init(config: HanoConfig, seed: u64) -> Result<ModelState> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.finest_width();
        let p2 = config.patch * config.patch;
        let d_in = config.d_in();

        let embed_w = store.insert("embed.w", uniform_tensor(&mut rng, &[c, p2 * d_in], p2 * d_in))?;
        let embed_b = store.insert("embed.b", Tensor::zeros(&[c])?)?;

        let mut cycles = Vec::with_capacity(config.cycles);
        for cyc in 0..config.cycles {
            let wq = store.insert(&format!("cyc{cyc}.wq"), uniform_tensor(&mut rng, &[c, c], c))?;
            let wk = store.insert(&format!("cyc{cyc}.wk"), uniform_tensor(&mut rng, &[c, c], c))?;
            let wv = store.insert(&format!("cyc{cyc}.wv"), uniform_tensor(&mut rng, &[c, c], c))?;
            let mut transitions = Vec::with_capacity(config.levels - 1);
            for m in 1..config.levels {
                let shape = [config.widths[m - 1], config.widths[m]];
                let fan = config.widths[m];
                let mut group = |tag: &str| -> Result<[ParamId; 4]> {
                    let mut ids = Vec::with_capacity(4);
                    for slot in 0..4 {
                        ids.push(store.insert(
                            &format!("cyc{cyc}.t{m}.{tag}{slot}"),
                            uniform_tensor(&mut rng, &shape, fan),
                        )?);
                    }
                    Ok([ids[0], ids[1], ids[2], ids[3]])
                };
                let rq = group("rq")?;
                let rk = group("rk")?;
                let rv = group("rv")?;
                let d = group("d")?;
                transitions.push(TransitionIds { rq, rk, rv, d });
            }
            let ln_gamma = store.insert(
                &format!("cyc{cyc}.ln.g"),
                Tensor::from_vec(&[c], vec![1.0; c])?,
            )?;
            let ln_beta = store.insert(&format!("cyc{cyc}.ln.b"), Tensor::zeros(&[c])?)?;
            cycles.push(CycleIds {
                wq,
                wk,
                wv,
                transitions,
                ln_gamma,
                ln_beta,
            });
        }

        let decode_w = store.insert(
            "decode.w",
            uniform_tensor(&mut rng, &[p2 * config.d_u, c], c),
        )?;
        let decode_b = store.insert("decode.b", Tensor::zeros(&[p2 * config.d_u])?)?;

        let state = ModelState {
            config,
            layout: Layout {
                embed_w,
                embed_b,
                cycles,
                decode_w,
                decode_b,
            },
            store,
        };
        debug_assert_eq!(state.store.scalar_count(), state.config.param_count());
        Ok(state)
    }

    pub fn config(&self) -> &HanoConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn cycle_weights<'a>(store: &'a ParamStore, ids: &CycleIds) -> VCycleWeights<'a> {
        VCycleWeights {
            wq: store.value(ids.wq),
            wk: store.value(ids.wk),
            wv: store.value(ids.wv),
            transitions: ids
                .transitions
                .iter()
                .map(|t| TransitionWeights {
                    reduce_q: t.rq.map(|id| store.value(id)),
                    reduce_k: t.rk.map(|id| store.value(id)),
                    reduce_v: t.rv.map(|id| store.value(id)),
                    decompose: t.d.map(|id| store.value(id)),
                })
                .collect(),
        }
    }

    /// Flatten a grid into patch rows: token `(tr, tc)` collects its `p×p`
    /// pixels row-major, each contributing `d_in` channels — the field
    /// value, then (when enabled) the normalized coordinates.
    fn patchify_input(&self, a: &GridField) -> (usize, Vec<f64>) {
        let n = a.n();
        let p = self.config.patch;
        let side = n / p;
        let d_in = self.config.d_in();
        let mut patches = Vec::with_capacity(side * side * p * p * d_in);
        for tr in 0..side {
            for tc in 0..side {
                for pr in 0..p {
                    for pc in 0..p {
                        let i = tr * p + pr;
                        let j = tc * p + pc;
                        patches.push(a.get(i, j));
                        if self.config.include_coords {
                            patches.push(i as f64 / (n - 1) as f64);
                            patches.push(j as f64 / (n - 1) as f64);
                        }
                    }
                }
            }
        }
        (side, patches)
    }

    /// Run the network on a coefficient field at a compatible resolution.
    pub fn forward(&self, a: &GridField) -> Result<GridField> {
        self.forward_traced(a).map(|(pred, _)| pred)
    }

    /// Forward pass that also returns the trace [`backward`] needs.
    ///
    /// [`backward`]: ModelState::backward
    pub fn forward_traced(&self, a: &GridField) -> Result<(GridField, ForwardTrace)> {
        let n = a.n();
        let side = self.config.token_side(n)?;
        if !a.is_finite() {
            return Err(Error::numerical("non-finite input field".to_string()));
        }
        let tree = IndexTree::build(side, self.config.levels, &self.config.windows)?;
        let c = self.config.finest_width();
        let (side2, patches) = self.patchify_input(a);
        debug_assert_eq!(side, side2);
        let n_tokens = side * side;

        let embedded = affine(
            &patches,
            n_tokens,
            self.store.value(self.layout.embed_w),
            Some(self.store.value(self.layout.embed_b)),
        )?;
        let mut tokens = TokenField::from_vec(side, c, embedded)?;

        let mode = self.config.attn_mode();
        let embedded = tokens.clone();
        let mut cycle_traces = Vec::with_capacity(self.config.cycles);
        let mut ln_caches = Vec::with_capacity(self.config.cycles);
        let mut flops = 0u64;
        for ids in &self.layout.cycles {
            let weights = Self::cycle_weights(&self.store, ids);
            let (attn, trace) = v_cycle_traced(&tokens, &weights, &tree, mode, &mut flops)?;
            let (normed, cache) = layer_norm(
                attn.data(),
                n_tokens,
                self.store.value(ids.ln_gamma),
                self.store.value(ids.ln_beta),
            )?;
            for (t, d) in tokens.data_mut().iter_mut().zip(&normed) {
                *t += d;
            }
            cycle_traces.push(trace);
            ln_caches.push(cache);
        }

        let decoded = affine(
            tokens.data(),
            n_tokens,
            self.store.value(self.layout.decode_w),
            Some(self.store.value(self.layout.decode_b)),
        )?;
        let p = self.config.patch;
        let mut out = GridField::zeros(n)?;
        for tr in 0..side {
            for tc in 0..side {
                let row = &decoded[(tr * side + tc) * p * p..(tr * side + tc + 1) * p * p];
                for pr in 0..p {
                    for pc in 0..p {
                        out.set(tr * p + pr, tc * p + pc, row[pr * p + pc]);
                    }
                }
            }
        }
        if !out.is_finite() {
            return Err(Error::numerical("non-finite model output".to_string()));
        }
        Ok((
            out,
            ForwardTrace {
                n,
                tree,
                patches,
                embedded,
                cycle_traces,
                ln_caches,
                final_tokens: tokens,
            },
        ))
    }

    /// Accumulate parameter gradients for one traced forward pass, given
    /// the loss gradient with respect to the prediction grid.
    pub fn backward(&mut self, trace: &ForwardTrace, d_out: &GridField) -> Result<()> {
        if d_out.n() != trace.n {
            return Err(Error::shape(format!(
                "output gradient resolution {} does not match the trace ({})",
                d_out.n(),
                trace.n
            )));
        }
        let p = self.config.patch;
        let side = trace.n / p;
        let n_tokens = side * side;
        let c = self.config.finest_width();

        // Decoder backward (patchify the output gradient).
        let mut d_decoded = vec![0.0; n_tokens * p * p];
        for tr in 0..side {
            for tc in 0..side {
                let row = &mut d_decoded[(tr * side + tc) * p * p..(tr * side + tc + 1) * p * p];
                for pr in 0..p {
                    for pc in 0..p {
                        row[pr * p + pc] = d_out.get(tr * p + pr, tc * p + pc);
                    }
                }
            }
        }
        let mut d_decode_w = Tensor::zeros(&[p * p * self.config.d_u, c])?;
        let mut d_decode_b = Tensor::zeros(&[p * p * self.config.d_u])?;
        let mut d_tokens = vec![0.0; n_tokens * c];
        affine_backward(
            trace.final_tokens.data(),
            n_tokens,
            self.store.value(self.layout.decode_w),
            &d_decoded,
            &mut d_decode_w,
            Some(&mut d_decode_b),
            &mut d_tokens,
        )?;
        self.store.add_to_grad(self.layout.decode_w, &d_decode_w)?;
        self.store.add_to_grad(self.layout.decode_b, &d_decode_b)?;

        // Cycles in reverse. Residual: d(input) = d(output) + attention
        // path gradient.
        let mode = self.config.attn_mode();
        for (idx, ids) in self.layout.cycles.iter().enumerate().rev() {
            let mut d_gamma = Tensor::zeros(&[c])?;
            let mut d_beta = Tensor::zeros(&[c])?;
            let mut d_attn = vec![0.0; n_tokens * c];
            layer_norm_backward(
                &trace.ln_caches[idx],
                n_tokens,
                self.store.value(ids.ln_gamma),
                &d_tokens,
                &mut d_gamma,
                &mut d_beta,
                &mut d_attn,
            )?;
            let d_attn_field = TokenField::from_vec(side, c, d_attn)?;
            let weights = Self::cycle_weights(&self.store, ids);
            let grads = v_cycle_backward(
                &trace.cycle_traces[idx],
                &weights,
                &trace.tree,
                mode,
                &d_attn_field,
            )?;
            // Residual pass-through plus the attention branch.
            for (d, g) in d_tokens.iter_mut().zip(grads.tokens.data()) {
                *d += g;
            }
            self.store.add_to_grad(ids.ln_gamma, &d_gamma)?;
            self.store.add_to_grad(ids.ln_beta, &d_beta)?;
            self.store.add_to_grad(ids.wq, &grads.wq)?;
            self.store.add_to_grad(ids.wk, &grads.wk)?;
            self.store.add_to_grad(ids.wv, &grads.wv)?;
            for (t_ids, t_grads) in ids.transitions.iter().zip(&grads.transitions) {
                for slot in 0..4 {
                    self.store.add_to_grad(t_ids.rq[slot], &t_grads.reduce_q[slot])?;
                    self.store.add_to_grad(t_ids.rk[slot], &t_grads.reduce_k[slot])?;
                    self.store.add_to_grad(t_ids.rv[slot], &t_grads.reduce_v[slot])?;
                    self.store.add_to_grad(t_ids.d[slot], &t_grads.decompose[slot])?;
                }
            }
        }

        // Embedding backward; the input itself needs no gradient.
        let d_in = self.config.d_in();
        let mut d_embed_w = Tensor::zeros(&[c, p * p * d_in])?;
        let mut d_embed_b = Tensor::zeros(&[c])?;
        let mut d_patches = vec![0.0; trace.patches.len()];
        affine_backward(
            &trace.patches,
            n_tokens,
            self.store.value(self.layout.embed_w),
            &d_tokens,
            &mut d_embed_w,
            Some(&mut d_embed_b),
            &mut d_patches,
        )?;
        self.store.add_to_grad(self.layout.embed_w, &d_embed_w)?;
        self.store.add_to_grad(self.layout.embed_b, &d_embed_b)?;
        Ok(())
    }

    /// Evaluate an input of any resolution by resampling to the model's
    /// training resolution and resampling the prediction back.
    pub fn eval_at_resolution(&self, a: &GridField, train_n: usize) -> Result<GridField> {
        if a.n() == train_n {
            return self.forward(a);
        }
        let resampled = bilinear_resample(a, train_n)?;
        let pred = self.forward(&resampled)?;
        bilinear_resample(&pred, a.n())
    }

    /// Write a checkpoint: magic, JSON header (version, config, parameter
    /// names and shapes in store order), f64 little-endian payload,
    /// trailing FNV-1a checksum. Bitwise deterministic.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self
                .store
                .iter()
                .map(|(name, value)| ParamEntry {
                    name: name.to_string(),
                    shape: value.shape().to_vec(),
                })
                .collect(),
        };
        let meta = serde_json::to_vec(&header)
            .map_err(|e| Error::format(format!("checkpoint header serialization failed: {e}")))?;
        let meta_len = u32::try_from(meta.len())
            .map_err(|_| Error::format("checkpoint header too large".to_string()))?;
        let mut file = std::io::BufWriter::new(fs::File::create(path)?);
        let mut hash = Fnv1a::new();
        let mut emit = |file: &mut std::io::BufWriter<fs::File>, bytes: &[u8]| -> Result<()> {
            hash.update(bytes);
            file.write_all(bytes)?;
            Ok(())
        };
        emit(&mut file, &CHECKPOINT_MAGIC)?;
        emit(&mut file, &meta_len.to_le_bytes())?;
        emit(&mut file, &meta)?;
        let mut buf = Vec::new();
        for (_, value) in self.store.iter() {
            buf.clear();
            for v in value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            emit(&mut file, &buf)?;
        }
        let digest = hash.finish();
        file.write_all(&digest.to_le_bytes())?;
        file.flush()?;
        Ok(())
    }

    /// Load a checkpoint saved by [`save_checkpoint`]; validates magic,
    /// checksum, and that the stored parameters exactly match the layout
    /// the config implies.
    ///
    /// [`save_checkpoint`]: ModelState::save_checkpoint
    pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
        let bytes = fs::read(path)?;
        if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + 8 {
            return Err(Error::format("file too short to be a checkpoint".to_string()));
        }
        if bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::format(format!(
                "bad magic {:?} (expected {:?})",
                &bytes[..8],
                CHECKPOINT_MAGIC
            )));
        }
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let meta_end = 12 + meta_len;
        if bytes.len() < meta_end + 8 {
            return Err(Error::format("truncated checkpoint header".to_string()));
        }
        let body_end = bytes.len() - 8;
        let stored = u64::from_le_bytes(bytes[body_end..].try_into().expect("8 bytes"));
        let computed = fnv1a64(&bytes[..body_end]);
        if stored != computed {
            return Err(Error::format(format!(
                "checksum mismatch: stored {stored:#018x}, computed {computed:#018x}"
            )));
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[12..meta_end])
            .map_err(|e| Error::format(format!("checkpoint header parse failed: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::format(format!(
                "unsupported checkpoint version {}",
                header.version
            )));
        }
        // Build the canonical layout for this config, then overwrite values
        // from the payload, verifying names and shapes as we go.
        let mut state = ModelState::init(header.config, 0)?;
        let expected: Vec<(String, Vec<usize>)> = state
            .store
            .iter()
            .map(|(n, v)| (n.to_string(), v.shape().to_vec()))
            .collect();
        if expected.len() != header.params.len() {
            return Err(Error::format(format!(
                "checkpoint stores {} parameters, config implies {}",
                header.params.len(),
                expected.len()
            )));
        }
        let mut offset = meta_end;
        for ((name, shape), entry) in expected.iter().zip(&header.params) {
            if &entry.name != name || &entry.shape != shape {
                return Err(Error::format(format!(
                    "checkpoint parameter {:?} {:?} does not match layout {:?} {:?}",
                    entry.name, entry.shape, name, shape
                )));
            }
            let numel: usize = shape.iter().product();
            let end = offset + numel * 8;
            if end > body_end {
                return Err(Error::format("truncated checkpoint payload".to_string()));
            }
            let id = state.store.id(name)?;
            let dst = state.store.value_mut(id);
            for (slot, chunk) in dst.data_mut().iter_mut().zip(bytes[offset..end].chunks_exact(8))
            {
                *slot = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
            }
            offset = end;
        }
        if offset != body_end {
            return Err(Error::format(format!(
                "checkpoint payload has {} trailing bytes",
                body_end - offset
            )));
        }
        Ok(state)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    version: u32,
    config: HanoConfig,
    params: Vec<ParamEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;
    use crate::spectral::{rel_h1, rel_h1_grad};
    use tempfile::tempdir;

    fn small_config() -> HanoConfig {
        HanoConfig {
            levels: 2,
            widths: vec![4, 4],
            windows: vec![3, 3],
            patch: 4,
            cycles: 1,
            normalize: true,
            include_coords: true,
            d_a: 1,
            d_u: 1,
        }
    }

    fn wiggly_field(n: usize, phase: f64) -> GridField {
        let mut f = GridField::zeros(n).unwrap();
        for i in 0..n {
            for j in 0..n {
                let x = i as f64 / (n - 1) as f64;
                let y = j as f64 / (n - 1) as f64;
                f.set(
                    i,
                    j,
                    (2.0 * std::f64::consts::PI * (x + 2.0 * y) + phase).sin()
                        + 0.3 * (6.0 * std::f64::consts::PI * x).cos(),
                );
            }
        }
        f
    }

    #[test]
    fn init_is_deterministic_with_zero_biases_and_counted_params() {
        let a = ModelState::init(small_config(), 11).unwrap();
        let b = ModelState::init(small_config(), 11).unwrap();
        for ((_, va), (_, vb)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(va.data(), vb.data());
        }
        assert_eq!(a.store.scalar_count(), a.config.param_count());
        for name in ["embed.b", "decode.b", "cyc0.ln.b"] {
            let id = a.store.id(name).unwrap();
            assert!(a.store.value(id).data().iter().all(|&v| v == 0.0));
        }
        let g = a.store.id("cyc0.ln.g").unwrap();
        assert!(a.store.value(g).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn init_scale_matches_uniform_fan_in_moment() {
        // A 100×100 projection has 10⁴ entries; uniform ±1/√fan_in has
        // standard deviation (1/√fan_in)/√3.
        let config = HanoConfig {
            levels: 1,
            widths: vec![100],
            windows: vec![1],
            patch: 1,
            cycles: 1,
            normalize: true,
            include_coords: false,
            d_a: 1,
            d_u: 1,
        };
        let state = ModelState::init(config, 5).unwrap();
        let id = state.store.id("cyc0.wq").unwrap();
        let data = state.store.value(id).data();
        let mean: f64 = data.iter().sum::<f64>() / data.len() as f64;
        let var: f64 =
            data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / data.len() as f64;
        let want = (1.0 / 100.0f64.sqrt()) / 3.0f64.sqrt();
        assert!(
            (var.sqrt() - want).abs() < 0.1 * want,
            "std {} vs {want}",
            var.sqrt()
        );
    }

    #[test]
    fn patch_embedding_matches_a_literal_oracle() {
        let state = ModelState::init(small_config(), 3).unwrap();
        let n = 16;
        let a = wiggly_field(n, 0.4);
        let (_, trace) = state.forward_traced(&a).unwrap();
        let pred_tokens = trace.embedded_tokens();
        // Literal re-computation: flatten each 4×4 patch with its pixel
        // coordinates and apply the affine map by hand.
        let p = 4;
        let side = n / p;
        let w = state.store.value(state.layout.embed_w);
        let b = state.store.value(state.layout.embed_b);
        let c = state.config.finest_width();
        for tr in 0..side {
            for tc in 0..side {
                let mut input = Vec::new();
                for pr in 0..p {
                    for pc in 0..p {
                        let i = tr * p + pr;
                        let j = tc * p + pc;
                        input.push(a.get(i, j));
                        input.push(i as f64 / (n - 1) as f64);
                        input.push(j as f64 / (n - 1) as f64);
                    }
                }
                for o in 0..c {
                    let mut acc = b.data()[o];
                    for (k, &x) in input.iter().enumerate() {
                        acc += w.data()[o * input.len() + k] * x;
                    }
                    let got = pred_tokens.token(tr * side + tc)[o];
                    assert!((acc - got).abs() < 1e-12, "token ({tr},{tc}) ch {o}");
                }
            }
        }
    }

    #[test]
    fn zero_embedding_weights_give_bias_tokens_and_zero_decoder_gives_bias_output() {
        let mut state = ModelState::init(small_config(), 9).unwrap();
        let n = 16;
        let a = wiggly_field(n, 0.0);
        // Zero decoder weights, fixed bias: output constant.
        let w_id = state.layout.decode_w;
        state.store.value_mut(w_id).fill(0.0);
        let b_id = state.layout.decode_b;
        state.store.value_mut(b_id).fill(0.75);
        let pred = state.forward(&a).unwrap();
        assert!(pred.values().iter().all(|&v| (v - 0.75).abs() < 1e-15));

        // Zero embedding weights, fixed bias: every token equals the bias.
        let ew = state.layout.embed_w;
        state.store.value_mut(ew).fill(0.0);
        let eb = state.layout.embed_b;
        state.store.value_mut(eb).fill(0.25);
        let (_, trace) = state.forward_traced(&a).unwrap();
        let tokens = trace.embedded_tokens();
        for t in 0..tokens.count() {
            assert!(tokens.token(t).iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn forward_is_deterministic_and_shape_preserving() {
        let state = ModelState::init(HanoConfig::toy(), 21).unwrap();
        let a = wiggly_field(32, 1.3);
        let p1 = state.forward(&a).unwrap();
        let p2 = state.forward(&a).unwrap();
        assert_eq!(p1.values(), p2.values());
        assert_eq!(p1.n(), 32);
        // Same seed, fresh init: identical prediction.
        let again = ModelState::init(HanoConfig::toy(), 21).unwrap();
        assert_eq!(again.forward(&a).unwrap().values(), p1.values());
    }

    #[test]
    fn incompatible_resolutions_are_rejected() {
        let state = ModelState::init(small_config(), 2).unwrap();
        // 10 is not divisible by the patch size; 12 gives a token side of 3,
        // which cannot split into two levels.
        assert!(state.forward(&wiggly_field(10, 0.0)).is_err());
        assert!(state.forward(&wiggly_field(12, 0.0)).is_err());
    }

    /// Full-model gradient check against central differences, both loss
    /// branches, on a two-level configuration.
    #[test]
    fn full_model_gradients_match_finite_differences() {
        let config = small_config();
        let a = wiggly_field(16, 0.7);
        let target = wiggly_field(16, 2.1);

        let mut state = ModelState::init(config.clone(), 13).unwrap();
        state.store.zero_grads();
        let (pred, trace) = state.forward_traced(&a).unwrap();
        let (_, d_out) = rel_h1_grad(&pred, &target).unwrap();
        state.backward(&trace, &d_out).unwrap();

        let layout = state.layout.clone();
        let loss_config = config.clone();
        let report = grad_check(
            &mut state.store,
            |store| {
                let probe = ModelState {
                    config: loss_config.clone(),
                    layout: layout.clone(),
                    store: store.clone(),
                };
                let pred = probe.forward(&a)?;
                rel_h1(&pred, &target)
            },
            1e-5,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "worst {} at {}[{}]: analytic {} vs fd {}",
            report.max_rel_err,
            report.worst_param,
            report.worst_index,
            report.analytic,
            report.finite_diff
        );
    }

    #[test]
    fn eval_at_resolution_matches_forward_at_native_and_transfers() {
        let state = ModelState::init(HanoConfig::toy(), 31).unwrap();
        let a = wiggly_field(32, 0.9);
        let native = state.forward(&a).unwrap();
        let same = state.eval_at_resolution(&a, 32).unwrap();
        assert_eq!(native.values(), same.values());
        let fine = wiggly_field(64, 0.9);
        let transferred = state.eval_at_resolution(&fine, 32).unwrap();
        assert_eq!(transferred.n(), 64);
        assert!(transferred.is_finite());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise_and_tampering_is_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.hck");
        let state = ModelState::init(HanoConfig::toy(), 4).unwrap();
        state.save_checkpoint(&path).unwrap();
        let loaded = ModelState::load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, state.config);
        for ((na, va), (nb, vb)) in state.store.iter().zip(loaded.store.iter()) {
            assert_eq!(na, nb);
            assert_eq!(va.data(), vb.data());
        }
        // Saving the loaded model reproduces the file byte-for-byte.
        let path2 = dir.path().join("model2.hck");
        loaded.save_checkpoint(&path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());

        // Predictions agree bitwise.
        let a = wiggly_field(32, 0.2);
        assert_eq!(
            state.forward(&a).unwrap().values(),
            loaded.forward(&a).unwrap().values()
        );

        // Corrupt one payload byte.
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() - 100;
        bytes[mid] ^= 0x01;
        fs::write(&path, &bytes).unwrap();
        let err = ModelState::load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "got: {err}");
    }
}
