//! Hookable transformer encoder victims (image-glyph and tabular).
//!
//! Pre-norm blocks, learned positional embeddings, GELU MLP, CLS token at
//! index 0 feeding the classifier head. Every forward pass can record the
//! per-layer attention maps and let an interceptor replace the map a layer
//! actually uses for its value aggregation — the hook the hot-fix path
//! plugs into.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
pub const ROW_SUM_TOL_RAW: f64 = 1e-9;
pub const ROW_SUM_TOL_OVERRIDE: f64 = 1e-5;

/// Input modality plus its tokenization geometry.
#[derive(Debug, Clone, PartialEq)]
pub enum Modality {
    Image { side: usize, patch: usize },
    Tabular { vocab_sizes: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub modality: Modality,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub mlp_ratio: usize,
    pub n_classes: usize,
}

impl ModelConfig {
    /// Desk-scale image default: 2 layers, 2 heads, d=32, 16x16 glyphs in
    /// 4x4 patches.
    pub fn glyph_default() -> Self {
        ModelConfig {
            modality: Modality::Image { side: 16, patch: 4 },
            n_layers: 2,
            n_heads: 2,
            d_model: 32,
            mlp_ratio: 2,
            n_classes: 4,
        }
    }

    pub fn tabular_default(n_features: usize, vocab: usize) -> Self {
        ModelConfig {
            modality: Modality::Tabular {
                vocab_sizes: vec![vocab; n_features],
            },
            n_layers: 2,
            n_heads: 2,
            d_model: 32,
            mlp_ratio: 2,
            n_classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Contract(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if let Modality::Image { side, patch } = self.modality {
            if patch == 0 || side % patch != 0 {
                return Err(Error::Contract(format!(
                    "image side {side} not divisible by patch {patch}"
                )));
            }
        }
        Ok(())
    }

    /// Token count including the CLS token at index 0.
    pub fn token_count(&self) -> usize {
        match &self.modality {
            Modality::Image { side, patch } => (side / patch) * (side / patch) + 1,
            Modality::Tabular { vocab_sizes } => vocab_sizes.len() + 1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// A raw sample the model can tokenize.
pub enum SampleInput<'a> {
    /// [1, side, side] pixel tensor.
    Image(&'a Tensor),
    /// Category id per feature.
    Tabular(&'a [usize]),
}

/// Per-layer attention maps [heads, n, n] recorded during one forward.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub maps: Vec<Tensor>,
    pub token_count: usize,
}

impl AttentionTrace {
    /// Checks the row-stochasticity invariant on every recorded map.
    pub fn validate(&self, tol: f64) -> Result<()> {
        for map in &self.maps {
            validate_row_stochastic(map, tol)?;
        }
        Ok(())
    }
}

/// Optional per-layer replacement maps for the value aggregation.
#[derive(Debug, Clone, Default)]
pub struct AttentionOverride {
    pub maps: Vec<Option<Tensor>>,
}

impl AttentionOverride {
    pub fn empty(n_layers: usize) -> Self {
        AttentionOverride {
            maps: vec![None; n_layers],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.maps.iter().all(|m| m.is_none())
    }
}

pub fn validate_row_stochastic(map: &Tensor, tol: f64) -> Result<()> {
    let n = *map.shape.last().unwrap_or(&0);
    if n == 0 {
        return Err(Error::Contract(String::from("empty attention map")));
    }
    for (r, row) in map.data.chunks(n).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > tol {
            return Err(Error::Contract(format!(
                "attention row {r} sums to {sum}, outside 1 ± {tol}"
            )));
        }
    }
    Ok(())
}

struct LayerWeights {
    ln1_g: Tensor,
    ln1_b: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

enum EmbedWeights {
    /// Linear projection of flattened patches.
    Image { w: Tensor, b: Tensor },
    /// One embedding table shared by every feature; feature identity is
    /// carried by the positional embeddings alone, so a uniform pooled
    /// readout sees only the bag of feature values and isolating a single
    /// feature requires position-selective attention.
    Tabular { table: Tensor },
}

pub struct VictimModel {
    pub cfg: ModelConfig,
    embed: EmbedWeights,
    cls: Tensor,
    pos: Tensor,
    layers: Vec<LayerWeights>,
    ln_f_g: Tensor,
    ln_f_b: Tensor,
    head_w: Tensor,
    head_b: Tensor,
}

fn ones(shape: &[usize]) -> Tensor {
    Tensor::full(shape, 1.0)
}

impl VictimModel {
    pub fn new(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let n = cfg.token_count();
        let std = 0.02;
        let embed = match &cfg.modality {
            Modality::Image { patch, .. } => EmbedWeights::Image {
                w: Tensor::randn(&[patch * patch, d], std, rng).param(),
                b: Tensor::zeros(&[d]).param(),
            },
            Modality::Tabular { vocab_sizes } => EmbedWeights::Tabular {
                table: Tensor::randn(
                    &[vocab_sizes.iter().copied().max().unwrap_or(1), d],
                    std,
                    rng,
                )
                .param(),
            },
        };
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(LayerWeights {
                ln1_g: ones(&[d]).param(),
                ln1_b: Tensor::zeros(&[d]).param(),
                wq: Tensor::randn(&[d, d], std, rng).param(),
                bq: Tensor::zeros(&[d]).param(),
                wk: Tensor::randn(&[d, d], std, rng).param(),
                bk: Tensor::zeros(&[d]).param(),
                wv: Tensor::randn(&[d, d], std, rng).param(),
                bv: Tensor::zeros(&[d]).param(),
                wo: Tensor::randn(&[d, d], std, rng).param(),
                bo: Tensor::zeros(&[d]).param(),
                ln2_g: ones(&[d]).param(),
                ln2_b: Tensor::zeros(&[d]).param(),
                w1: Tensor::randn(&[d, d * cfg.mlp_ratio], std, rng).param(),
                b1: Tensor::zeros(&[d * cfg.mlp_ratio]).param(),
                w2: Tensor::randn(&[d * cfg.mlp_ratio, d], std, rng).param(),
                b2: Tensor::zeros(&[d]).param(),
            });
        }
        Ok(VictimModel {
            embed,
            cls: Tensor::randn(&[1, d], std, rng).param(),
            pos: Tensor::randn(&[n, d], std, rng).param(),
            layers,
            ln_f_g: ones(&[d]).param(),
            ln_f_b: Tensor::zeros(&[d]).param(),
            head_w: Tensor::randn(&[d, cfg.n_classes], std, rng).param(),
            head_b: Tensor::zeros(&[cfg.n_classes]).param(),
            cfg,
        })
    }

    /// Visits every parameter with a stable name (checkpoint order).
    pub fn for_each_param(&self, mut f: impl FnMut(String, &Tensor)) {
        match &self.embed {
            EmbedWeights::Image { w, b } => {
                f(String::from("embed.w"), w);
                f(String::from("embed.b"), b);
            }
            EmbedWeights::Tabular { table } => {
                f(String::from("embed.table"), table);
            }
        }
        f(String::from("cls"), &self.cls);
        f(String::from("pos"), &self.pos);
        for (l, lw) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("ln1_g", &lw.ln1_g),
                ("ln1_b", &lw.ln1_b),
                ("wq", &lw.wq),
                ("bq", &lw.bq),
                ("wk", &lw.wk),
                ("bk", &lw.bk),
                ("wv", &lw.wv),
                ("bv", &lw.bv),
                ("wo", &lw.wo),
                ("bo", &lw.bo),
                ("ln2_g", &lw.ln2_g),
                ("ln2_b", &lw.ln2_b),
                ("w1", &lw.w1),
                ("b1", &lw.b1),
                ("w2", &lw.w2),
                ("b2", &lw.b2),
            ] {
                f(format!("layer{l}.{name}"), t);
            }
        }
        f(String::from("ln_f_g"), &self.ln_f_g);
        f(String::from("ln_f_b"), &self.ln_f_b);
        f(String::from("head_w"), &self.head_w);
        f(String::from("head_b"), &self.head_b);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        match &mut self.embed {
            EmbedWeights::Image { w, b } => {
                out.push(w);
                out.push(b);
            }
            EmbedWeights::Tabular { table } => out.push(table),
        }
        out.push(&mut self.cls);
        out.push(&mut self.pos);
        for lw in &mut self.layers {
            out.push(&mut lw.ln1_g);
            out.push(&mut lw.ln1_b);
            out.push(&mut lw.wq);
            out.push(&mut lw.bq);
            out.push(&mut lw.wk);
            out.push(&mut lw.bk);
            out.push(&mut lw.wv);
            out.push(&mut lw.bv);
            out.push(&mut lw.wo);
            out.push(&mut lw.bo);
            out.push(&mut lw.ln2_g);
            out.push(&mut lw.ln2_b);
            out.push(&mut lw.w1);
            out.push(&mut lw.b1);
            out.push(&mut lw.w2);
            out.push(&mut lw.b2);
        }
        out.push(&mut self.ln_f_g);
        out.push(&mut self.ln_f_b);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    /// Replaces a named parameter's values (checkpoint loading).
    pub fn set_param(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let mut names = Vec::new();
        self.for_each_param(|n, t| names.push((n, t.shape.clone(), t.numel())));
        let idx = names
            .iter()
            .position(|(n, _, _)| n == name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        if names[idx].2 != data.len() {
            return Err(Error::ShapeMismatch {
                op: "set_param",
                lhs: names[idx].1.clone(),
                rhs: vec![data.len()],
            });
        }
        // params_mut order matches for_each_param order
        self.params_mut()[idx].data = data;
        Ok(())
    }

    fn bind(&self, tape: &mut Tape, frozen: bool) -> BoundModel {
        let leaf = |tape: &mut Tape, t: &Tensor| -> Var {
            if frozen {
                tape.constant(&t.shape, t.data.clone())
            } else {
                tape.leaf(t)
            }
        };
        BoundModel {
            embed: match &self.embed {
                EmbedWeights::Image { w, b } => {
                    BoundEmbed::Image(leaf(tape, w), leaf(tape, b))
                }
                EmbedWeights::Tabular { table } => {
                    BoundEmbed::Tabular(leaf(tape, table))
                }
            },
            cls: leaf(tape, &self.cls),
            pos: leaf(tape, &self.pos),
            layers: self
                .layers
                .iter()
                .map(|lw| BoundLayer {
                    ln1_g: leaf(tape, &lw.ln1_g),
                    ln1_b: leaf(tape, &lw.ln1_b),
                    wq: leaf(tape, &lw.wq),
                    bq: leaf(tape, &lw.bq),
                    wk: leaf(tape, &lw.wk),
                    bk: leaf(tape, &lw.bk),
                    wv: leaf(tape, &lw.wv),
                    bv: leaf(tape, &lw.bv),
                    wo: leaf(tape, &lw.wo),
                    bo: leaf(tape, &lw.bo),
                    ln2_g: leaf(tape, &lw.ln2_g),
                    ln2_b: leaf(tape, &lw.ln2_b),
                    w1: leaf(tape, &lw.w1),
                    b1: leaf(tape, &lw.b1),
                    w2: leaf(tape, &lw.w2),
                    b2: leaf(tape, &lw.b2),
                })
                .collect(),
            ln_f_g: leaf(tape, &self.ln_f_g),
            ln_f_b: leaf(tape, &self.ln_f_b),
            head_w: leaf(tape, &self.head_w),
            head_b: leaf(tape, &self.head_b),
        }
    }

    /// Pulls gradients accumulated on a consumed tape back into the
    /// parameter tensors. Binding must come from `bind(..., false)`.
    fn harvest_grads(&mut self, tape: &Tape, bound: &BoundModel) {
        let vars = bound.var_list();
        let mut params = self.params_mut();
        debug_assert_eq!(vars.len(), params.len());
        for (p, v) in params.iter_mut().zip(vars) {
            tape.grad_into(v, p);
        }
    }

    // ── tokenization ───────────────────────────────────────────────

    /// Embeds a raw sample into [n, d_model] tokens, CLS at index 0.
    pub fn tokenize(&self, tape: &mut Tape, input: &SampleInput) -> Result<Var> {
        let bound = self.bind(tape, true);
        self.tokenize_bound(tape, &bound, input)
    }

    fn tokenize_bound(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        input: &SampleInput,
    ) -> Result<Var> {
        let tokens = match (input, &bound.embed) {
            (SampleInput::Image(img), BoundEmbed::Image(w, b)) => {
                let (side, patch) = match self.cfg.modality {
                    Modality::Image { side, patch } => (side, patch),
                    _ => unreachable!(),
                };
                if img.shape != [1, side, side] {
                    return Err(Error::ShapeMismatch {
                        op: "tokenize",
                        lhs: img.shape.clone(),
                        rhs: vec![1, side, side],
                    });
                }
                let img_var = tape.constant(&img.shape, img.data.clone());
                self.patchify_var(tape, img_var, side, patch, *w, *b)?
            }
            (SampleInput::Tabular(features), BoundEmbed::Tabular(table)) => {
                let vocab_sizes = match &self.cfg.modality {
                    Modality::Tabular { vocab_sizes } => vocab_sizes,
                    _ => unreachable!(),
                };
                if features.len() != vocab_sizes.len() {
                    return Err(Error::ShapeMismatch {
                        op: "tokenize",
                        lhs: vec![features.len()],
                        rhs: vec![vocab_sizes.len()],
                    });
                }
                for (&cat, &v) in features.iter().zip(vocab_sizes) {
                    if cat >= v {
                        return Err(Error::IndexOutOfRange {
                            what: "tabular feature value",
                            index: cat,
                            len: v,
                        });
                    }
                }
                tape.gather_rows(*table, features)?
            }
            _ => {
                return Err(Error::Contract(String::from(
                    "sample modality does not match model config",
                )))
            }
        };
        let with_cls = tape.concat0(bound.cls, tokens)?;
        tape.add(with_cls, bound.pos)
    }

    /// Binds all weights to the tape as constants (no gradients flow into
    /// them), for callers that differentiate through the input instead.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundModel {
        self.bind(tape, true)
    }

    /// Patch extraction + linear projection for an on-tape image (used by
    /// trigger inversion, which differentiates through the input).
    pub fn patchify(&self, tape: &mut Tape, bound: &BoundModel, img: Var) -> Result<Var> {
        let (side, patch) = match self.cfg.modality {
            Modality::Image { side, patch } => (side, patch),
            _ => return Err(Error::Contract(String::from("patchify needs image modality"))),
        };
        let (w, b) = match &bound.embed {
            BoundEmbed::Image(w, b) => (*w, *b),
            _ => {
                return Err(Error::Contract(String::from(
                    "patchify needs image embedding weights",
                )))
            }
        };
        let tokens = self.patchify_var(tape, img, side, patch, w, b)?;
        let with_cls = tape.concat0(bound.cls, tokens)?;
        tape.add(with_cls, bound.pos)
    }

    /// Full forward over an on-tape image, weights frozen on `bound`;
    /// returns logits. Gradients flow into the image only.
    pub fn forward_image_var(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        img: Var,
    ) -> Result<Var> {
        let mut tokens = self.patchify(tape, bound, img)?;
        for l in 0..self.cfg.n_layers {
            let (next, _) = self.attention_layer_forward(tape, l, bound, tokens, None)?;
            tokens = next;
        }
        self.classify(tape, bound, tokens)
    }

    fn patchify_var(
        &self,
        tape: &mut Tape,
        img: Var,
        side: usize,
        patch: usize,
        w: Var,
        b: Var,
    ) -> Result<Var> {
        let grid = side / patch;
        let mut indices = Vec::with_capacity(side * side);
        for py in 0..grid {
            for px in 0..grid {
                for y in 0..patch {
                    for x in 0..patch {
                        indices.push((py * patch + y) * side + px * patch + x);
                    }
                }
            }
        }
        let patches = tape.gather_flat(img, &indices, &[grid * grid, patch * patch])?;
        let proj = tape.matmul(patches, w)?;
        tape.add_bias(proj, b)
    }

    // ── forward ────────────────────────────────────────────────────

    /// One encoder block. `override_map`, when given, replaces the computed
    /// attention for the value aggregation; the returned map is the one
    /// actually used.
    pub fn attention_layer_forward(
        &self,
        tape: &mut Tape,
        bound_layer_idx: usize,
        bound: &BoundModel,
        tokens: Var,
        override_map: Option<&Tensor>,
    ) -> Result<(Var, Var)> {
        self.attention_layer_forward_impl(tape, bound_layer_idx, bound, tokens, override_map, true)
    }

    fn attention_layer_forward_impl(
        &self,
        tape: &mut Tape,
        bound_layer_idx: usize,
        bound: &BoundModel,
        tokens: Var,
        override_map: Option<&Tensor>,
        validate_override: bool,
    ) -> Result<(Var, Var)> {
        let lw = &bound.layers[bound_layer_idx];
        let n = self.cfg.token_count();
        let h = self.cfg.n_heads;
        let dk = self.cfg.head_dim();

        let normed = tape.layernorm(tokens, lw.ln1_g, lw.ln1_b, LN_EPS)?;
        let q = tape.matmul(normed, lw.wq)?;
        let q = tape.add_bias(q, lw.bq)?;
        let k = tape.matmul(normed, lw.wk)?;
        let k = tape.add_bias(k, lw.bk)?;
        let v = tape.matmul(normed, lw.wv)?;
        let v = tape.add_bias(v, lw.bv)?;
        let qh = tape.split_heads(q, h)?;
        let kh = tape.split_heads(k, h)?;
        let vh = tape.split_heads(v, h)?;
        let kt = tape.transpose2(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / libm::sqrt(dk as f64));
        let attn = tape.softmax_rows(scores)?;

        let used = match override_map {
            None => attn,
            Some(map) => {
                if map.shape != [h, n, n] {
                    return Err(Error::ShapeMismatch {
                        op: "attention override",
                        lhs: map.shape.clone(),
                        rhs: vec![h, n, n],
                    });
                }
                if validate_override {
                    validate_row_stochastic(map, ROW_SUM_TOL_OVERRIDE)?;
                }
                tape.constant(&map.shape, map.data.clone())
            }
        };

        let ctx = tape.matmul(used, vh)?;
        let merged = tape.merge_heads(ctx)?;
        let proj = tape.matmul(merged, lw.wo)?;
        let proj = tape.add_bias(proj, lw.bo)?;
        let tokens = tape.add(tokens, proj)?;

        let normed2 = tape.layernorm(tokens, lw.ln2_g, lw.ln2_b, LN_EPS)?;
        let hmid = tape.matmul(normed2, lw.w1)?;
        let hmid = tape.add_bias(hmid, lw.b1)?;
        let hmid = tape.gelu(hmid);
        let out = tape.matmul(hmid, lw.w2)?;
        let out = tape.add_bias(out, lw.b2)?;
        let tokens = tape.add(tokens, out)?;
        Ok((tokens, used))
    }

    fn classify(&self, tape: &mut Tape, bound: &BoundModel, tokens: Var) -> Result<Var> {
        let normed = tape.layernorm(tokens, bound.ln_f_g, bound.ln_f_b, LN_EPS)?;
        let cls = tape.gather_flat(
            normed,
            &(0..self.cfg.d_model).collect::<Vec<_>>(),
            &[1, self.cfg.d_model],
        )?;
        let logits = tape.matmul(cls, bound.head_w)?;
        tape.add_bias(logits, bound.head_b)
    }

    /// Full forward with an interceptor called on each layer's computed
    /// attention map. The interceptor may return a replacement map (rows
    /// must sum to 1 ± 1e-5); `None` keeps the computed map, bit-exact.
    /// Returns logits and the trace of maps actually used.
    pub fn forward_intercepted(
        &self,
        input: &SampleInput,
        interceptor: impl FnMut(usize, &Tensor) -> Result<Option<Tensor>>,
    ) -> Result<(Tensor, AttentionTrace)> {
        self.forward_intercepted_impl(input, interceptor, true)
    }

    /// Like `forward_intercepted` but accepts replacement maps whose rows
    /// do not sum to one — needed by the no-rescale ablation, which
    /// deliberately breaks the row-sum constraint.
    pub fn forward_intercepted_unchecked(
        &self,
        input: &SampleInput,
        interceptor: impl FnMut(usize, &Tensor) -> Result<Option<Tensor>>,
    ) -> Result<(Tensor, AttentionTrace)> {
        self.forward_intercepted_impl(input, interceptor, false)
    }

    fn forward_intercepted_impl(
        &self,
        input: &SampleInput,
        mut interceptor: impl FnMut(usize, &Tensor) -> Result<Option<Tensor>>,
        validate_override: bool,
    ) -> Result<(Tensor, AttentionTrace)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, true);
        let mut tokens = self.tokenize_bound(&mut tape, &bound, input)?;
        let n = self.cfg.token_count();
        let h = self.cfg.n_heads;
        let mut maps = Vec::with_capacity(self.cfg.n_layers);
        for l in 0..self.cfg.n_layers {
            // compute this layer's attention first so the interceptor can
            // see it, then rerun the block with the chosen map
            let (next, used) = {
                let (tokens_plain, attn) =
                    self.attention_layer_forward(&mut tape, l, &bound, tokens, None)?;
                let attn_tensor =
                    Tensor::new(vec![h, n, n], tape.data(attn).to_vec())?;
                match interceptor(l, &attn_tensor)? {
                    None => ((tokens_plain, attn), attn_tensor),
                    Some(replacement) => {
                        let (tokens_over, used_var) = self.attention_layer_forward_impl(
                            &mut tape,
                            l,
                            &bound,
                            tokens,
                            Some(&replacement),
                            validate_override,
                        )?;
                        ((tokens_over, used_var), replacement)
                    }
                }
            };
            tokens = next.0;
            maps.push(used);
        }
        let logits = self.classify(&mut tape, &bound, tokens)?;
        let logits_t = Tensor::new(
            vec![self.cfg.n_classes],
            tape.data(logits).to_vec(),
        )?;
        Ok((
            logits_t,
            AttentionTrace {
                maps,
                token_count: n,
            },
        ))
    }

    /// Forward with fixed per-layer overrides (streaming recomputation:
    /// later layers see the effect of earlier overrides). Empty overrides
    /// reproduce the plain forward bit-exactly.
    pub fn forward_collect(
        &self,
        input: &SampleInput,
        overrides: &AttentionOverride,
    ) -> Result<(Tensor, AttentionTrace)> {
        if !overrides.maps.is_empty() && overrides.maps.len() != self.cfg.n_layers {
            return Err(Error::Contract(format!(
                "override count {} != layer count {}",
                overrides.maps.len(),
                self.cfg.n_layers
            )));
        }
        self.forward_intercepted(input, |l, _| {
            Ok(overrides.maps.get(l).and_then(|m| m.clone()))
        })
    }

    /// Plain forward pass: logits plus recorded trace.
    pub fn forward(&self, input: &SampleInput) -> Result<(Tensor, AttentionTrace)> {
        self.forward_intercepted(input, |_, _| Ok(None))
    }

    pub fn predict(&self, input: &SampleInput) -> Result<usize> {
        let (logits, _) = self.forward(input)?;
        Ok(argmax(&logits.data))
    }

    // ── training ───────────────────────────────────────────────────

    /// Cross-entropy training with AdamW. `data` yields (input, label).
    /// Deterministic given seed and data order.
    pub fn train<'a>(
        &mut self,
        data: &[(SampleInput<'a>, usize)],
        epochs: usize,
        batch_size: usize,
        lr: f64,
        seed: u64,
    ) -> Result<TrainLog> {
        self.train_with_decay(data, epochs, batch_size, lr, 0.01, seed)
    }

    /// [`Self::train`] with an explicit AdamW weight-decay coefficient.
    /// Stronger decay discourages large value/output projections, which
    /// pushes shortcut features into the attention pattern itself.
    pub fn train_with_decay<'a>(
        &mut self,
        data: &[(SampleInput<'a>, usize)],
        epochs: usize,
        batch_size: usize,
        lr: f64,
        weight_decay: f64,
        seed: u64,
    ) -> Result<TrainLog> {
        let mut rng = Rng::seed_from_u64(seed);
        let mut opt = AdamW::new(lr, weight_decay);
        let mut log = TrainLog::default();
        let mut order: Vec<usize> = (0..data.len()).collect();
        for epoch in 0..epochs {
            rng.shuffle(&mut order);
            let mut epoch_loss = 0.0;
            let mut batches = 0.0;
            for chunk in order.chunks(batch_size) {
                let mut tape = Tape::new();
                let bound = self.bind(&mut tape, false);
                let mut losses: Option<Var> = None;
                for &i in chunk {
                    let (input, label) = &data[i];
                    let tokens = self.tokenize_bound(&mut tape, &bound, input)?;
                    let mut t = tokens;
                    for l in 0..self.cfg.n_layers {
                        let (next, _) =
                            self.attention_layer_forward(&mut tape, l, &bound, t, None)?;
                        t = next;
                    }
                    let logits = self.classify(&mut tape, &bound, t)?;
                    let loss = tape.cross_entropy(logits, &[*label])?;
                    losses = Some(match losses {
                        None => loss,
                        Some(prev) => tape.add(prev, loss)?,
                    });
                }
                let total = losses
                    .ok_or_else(|| Error::Contract(String::from("empty batch")))?;
                let mean = tape.scale(total, 1.0 / chunk.len() as f64);
                let loss_val = tape.value_scalar(mean);
                if !loss_val.is_finite() {
                    return Err(Error::Contract(format!(
                        "NaN loss at step {} (lr {lr})",
                        opt.step_count()
                    )));
                }
                tape.backward(mean)?;
                self.harvest_grads(&tape, &bound);
                opt.step(&mut self.params_mut())?;
                epoch_loss += loss_val;
                batches += 1.0;
            }
            log.epoch_loss.push(if batches > 0.0 {
                epoch_loss / batches
            } else {
                0.0
            });
            let _ = epoch;
        }
        Ok(log)
    }

    /// Zeroes one token column across every layer's maps (rows
    /// renormalized), reruns inference, and reports the fraction of
    /// samples still producing their original (compromised) prediction.
    pub fn zero_column_probe(
        &self,
        samples: &[SampleInput],
        column: usize,
    ) -> Result<f64> {
        let n = self.cfg.token_count();
        if column >= n {
            return Err(Error::IndexOutOfRange {
                what: "zero_column_probe",
                index: column,
                len: n,
            });
        }
        if samples.is_empty() {
            return Err(Error::Contract(String::from("no samples for probe")));
        }
        let mut preserved = 0usize;
        for input in samples {
            let before = self.predict(input)?;
            let (logits, _) = self.forward_intercepted(input, |_, map| {
                Ok(Some(zero_column_renormalized(map, column)))
            })?;
            if argmax(&logits.data) == before {
                preserved += 1;
            }
        }
        Ok(preserved as f64 / samples.len() as f64)
    }
}

/// Zeroes column `col` of every row of a [heads, n, n] map and
/// renormalizes each row. A row with no remaining mass falls back to
/// uniform over the other columns.
pub fn zero_column_renormalized(map: &Tensor, col: usize) -> Tensor {
    let n = *map.shape.last().unwrap();
    let mut out = map.clone();
    for row in out.data.chunks_mut(n) {
        row[col] = 0.0;
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            for v in row.iter_mut() {
                *v /= sum;
            }
        } else {
            let fill = 1.0 / (n - 1) as f64;
            for (j, v) in row.iter_mut().enumerate() {
                *v = if j == col { 0.0 } else { fill };
            }
        }
    }
    out
}

pub fn argmax(data: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in data.iter().enumerate() {
        if v > data[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
}


struct BoundLayer {
    ln1_g: Var,
    ln1_b: Var,
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln2_g: Var,
    ln2_b: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

enum BoundEmbed {
    Image(Var, Var),
    Tabular(Var),
}

pub struct BoundModel {
    embed: BoundEmbed,
    cls: Var,
    pos: Var,
    layers: Vec<BoundLayer>,
    ln_f_g: Var,
    ln_f_b: Var,
    head_w: Var,
    head_b: Var,
}

impl BoundModel {
    /// Var list in the same order as `VictimModel::params_mut`.
    fn var_list(&self) -> Vec<Var> {
        let mut out = Vec::new();
        match &self.embed {
            BoundEmbed::Image(w, b) => {
                out.push(*w);
                out.push(*b);
            }
            BoundEmbed::Tabular(table) => out.push(*table),
        }
        out.push(self.cls);
        out.push(self.pos);
        for lw in &self.layers {
            out.extend([
                lw.ln1_g, lw.ln1_b, lw.wq, lw.bq, lw.wk, lw.bk, lw.wv, lw.bv, lw.wo, lw.bo,
                lw.ln2_g, lw.ln2_b, lw.w1, lw.b1, lw.w2, lw.b2,
            ]);
        }
        out.push(self.ln_f_g);
        out.push(self.ln_f_b);
        out.push(self.head_w);
        out.push(self.head_b);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_image_cfg() -> ModelConfig {
        ModelConfig {
            modality: Modality::Image { side: 8, patch: 4 },
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            mlp_ratio: 2,
            n_classes: 3,
        }
    }

    #[test]
    fn token_counts_include_cls() {
        assert_eq!(ModelConfig::glyph_default().token_count(), 17);
        assert_eq!(ModelConfig::tabular_default(6, 4).token_count(), 7);
    }

    #[test]
    fn config_invariants_are_enforced() {
        let mut cfg = tiny_image_cfg();
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_image_cfg();
        cfg.modality = Modality::Image { side: 10, patch: 4 };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn forward_shapes_and_row_stochastic_trace() {
        let mut rng = Rng::seed_from_u64(5);
        let model = VictimModel::new(tiny_image_cfg(), &mut rng).unwrap();
        let img = Tensor::randn(&[1, 8, 8], 1.0, &mut rng);
        let (logits, trace) = model.forward(&SampleInput::Image(&img)).unwrap();
        assert_eq!(logits.shape, vec![3]);
        assert_eq!(trace.maps.len(), 2);
        assert_eq!(trace.maps[0].shape, vec![2, 5, 5]);
        trace.validate(ROW_SUM_TOL_RAW).unwrap();
    }

    #[test]
    fn patchify_geometry_oracle() {
        // pick weights so token i's first feature is the pixel sum of
        // patch i-1, then feed an image whose pixels equal their patch id
        let mut rng = Rng::seed_from_u64(6);
        let mut model = VictimModel::new(tiny_image_cfg(), &mut rng).unwrap();
        let mut w = vec![0.0; 16 * 16];
        for r in 0..16 {
            w[r * 16] = 1.0;
        }
        model.set_param("embed.w", w).unwrap();
        model.set_param("embed.b", vec![0.0; 16]).unwrap();
        model.set_param("cls", vec![0.0; 16]).unwrap();
        model.set_param("pos", vec![0.0; 5 * 16]).unwrap();
        let mut px = vec![0.0; 64];
        for y in 0..8 {
            for x in 0..8 {
                px[y * 8 + x] = ((y / 4) * 2 + x / 4) as f64;
            }
        }
        let img = Tensor::new(vec![1, 8, 8], px).unwrap();
        let mut tape = Tape::new();
        let tokens = model.tokenize(&mut tape, &SampleInput::Image(&img)).unwrap();
        let data = tape.data(tokens);
        assert_eq!(data[0], 0.0); // CLS
        for p in 0..4 {
            assert_eq!(data[(p + 1) * 16], 16.0 * p as f64);
        }
    }

    #[test]
    fn tabular_tokenize_embeds_each_feature() {
        let mut rng = Rng::seed_from_u64(7);
        let cfg = ModelConfig::tabular_default(3, 5);
        let model = VictimModel::new(cfg, &mut rng).unwrap();
        let (logits, trace) = model
            .forward(&SampleInput::Tabular(&[0, 4, 2]))
            .unwrap();
        assert_eq!(logits.shape, vec![2]);
        assert_eq!(trace.token_count, 4);
        assert!(model.forward(&SampleInput::Tabular(&[0, 4])).is_err());
        assert!(model.forward(&SampleInput::Tabular(&[0, 4, 5])).is_err());
        // shared table + positions: swapping equal-vocab features changes
        // only the positional component, not the value embeddings
        let mut tape = Tape::new();
        let a = model.tokenize(&mut tape, &SampleInput::Tabular(&[1, 4, 2])).unwrap();
        let av = tape.data(a).to_vec();
        let b = model.tokenize(&mut tape, &SampleInput::Tabular(&[1, 2, 4])).unwrap();
        let bv = tape.data(b).to_vec();
        assert_ne!(av, bv);
    }

    #[test]
    fn empty_override_is_bit_identical_to_plain_forward() {
        let mut rng = Rng::seed_from_u64(8);
        let model = VictimModel::new(tiny_image_cfg(), &mut rng).unwrap();
        let img = Tensor::randn(&[1, 8, 8], 1.0, &mut rng);
        let input = SampleInput::Image(&img);
        let (plain, trace_plain) = model.forward(&input).unwrap();
        let (bypass, trace_bypass) = model
            .forward_collect(&input, &AttentionOverride::empty(2))
            .unwrap();
        assert_eq!(plain.data, bypass.data);
        for (a, b) in trace_plain.maps.iter().zip(&trace_bypass.maps) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn overriding_with_the_computed_map_changes_nothing() {
        let mut rng = Rng::seed_from_u64(9);
        let model = VictimModel::new(tiny_image_cfg(), &mut rng).unwrap();
        let img = Tensor::randn(&[1, 8, 8], 1.0, &mut rng);
        let input = SampleInput::Image(&img);
        let (plain, trace) = model.forward(&input).unwrap();
        let overrides = AttentionOverride {
            maps: trace.maps.into_iter().map(Some).collect(),
        };
        let (echoed, _) = model.forward_collect(&input, &overrides).unwrap();
        assert_eq!(plain.data, echoed.data);
    }

    #[test]
    fn override_rows_must_sum_to_one() {
        let mut rng = Rng::seed_from_u64(10);
        let model = VictimModel::new(tiny_image_cfg(), &mut rng).unwrap();
        let img = Tensor::randn(&[1, 8, 8], 1.0, &mut rng);
        let bad = Tensor::full(&[2, 5, 5], 0.5);
        let overrides = AttentionOverride {
            maps: vec![Some(bad), None],
        };
        assert!(model
            .forward_collect(&SampleInput::Image(&img), &overrides)
            .is_err());
    }

    #[test]
    fn uniform_override_equalizes_context_rows() {
        // uniform attention averages the value vectors, so the map the
        // trace reports must be exactly what the layer used
        let mut rng = Rng::seed_from_u64(11);
        let model = VictimModel::new(tiny_image_cfg(), &mut rng).unwrap();
        let img = Tensor::randn(&[1, 8, 8], 1.0, &mut rng);
        let uniform = Tensor::full(&[2, 5, 5], 0.2);
        let overrides = AttentionOverride {
            maps: vec![Some(uniform.clone()), Some(uniform.clone())],
        };
        let (_, trace) = model
            .forward_collect(&SampleInput::Image(&img), &overrides)
            .unwrap();
        assert_eq!(trace.maps[0].data, uniform.data);
        assert_eq!(trace.maps[1].data, uniform.data);
    }

    #[test]
    fn zero_epochs_is_a_no_op_and_training_reduces_loss() {
        let mut rng = Rng::seed_from_u64(12);
        let mut model = VictimModel::new(tiny_image_cfg(), &mut rng).unwrap();
        let imgs: Vec<Tensor> = (0..6)
            .map(|_| Tensor::randn(&[1, 8, 8], 1.0, &mut rng))
            .collect();
        let data: Vec<(SampleInput, usize)> = imgs
            .iter()
            .enumerate()
            .map(|(i, t)| (SampleInput::Image(t), i % 3))
            .collect();

        let mut before = Vec::new();
        model.for_each_param(|_, t| before.extend_from_slice(&t.data));
        let log = model.train(&data, 0, 4, 1e-3, 99).unwrap();
        assert!(log.epoch_loss.is_empty());
        let mut after = Vec::new();
        model.for_each_param(|_, t| after.extend_from_slice(&t.data));
        assert_eq!(before, after);

        let log = model.train(&data, 12, 4, 1e-3, 99).unwrap();
        assert!(log.epoch_loss.last().unwrap() < log.epoch_loss.first().unwrap());
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let run = || -> Vec<f64> {
            let mut rng = Rng::seed_from_u64(13);
            let mut model = VictimModel::new(tiny_image_cfg(), &mut rng).unwrap();
            let imgs: Vec<Tensor> = (0..4)
                .map(|_| Tensor::randn(&[1, 8, 8], 1.0, &mut rng))
                .collect();
            let data: Vec<(SampleInput, usize)> = imgs
                .iter()
                .enumerate()
                .map(|(i, t)| (SampleInput::Image(t), i % 3))
                .collect();
            model.train(&data, 3, 2, 1e-3, 7).unwrap();
            let mut out = Vec::new();
            model.for_each_param(|_, t| out.extend_from_slice(&t.data));
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_column_probe_bounds_and_errors() {
        let mut rng = Rng::seed_from_u64(14);
        let model = VictimModel::new(tiny_image_cfg(), &mut rng).unwrap();
        let img = Tensor::randn(&[1, 8, 8], 1.0, &mut rng);
        let inputs = vec![SampleInput::Image(&img)];
        let rate = model.zero_column_probe(&inputs, 2).unwrap();
        assert!((0.0..=1.0).contains(&rate));
        assert!(model.zero_column_probe(&inputs, 5).is_err());
        assert!(model.zero_column_probe(&[], 0).is_err());
    }

    #[test]
    fn zero_column_helper_renormalizes_rows() {
        let map = Tensor::full(&[1, 3, 3], 1.0 / 3.0);
        let out = zero_column_renormalized(&map, 1);
        for row in out.data.chunks(3) {
            assert_eq!(row[1], 0.0);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
