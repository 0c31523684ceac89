//! Synthetic datasets, backdoor poisoning, bias injection, and the paired
//! debugging sets that drive detector training and repair evaluation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{SampleInput, VictimModel};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const GLYPH_SIDE: usize = 16;
pub const GLYPH_CLASSES: usize = 4;
pub const GLYPH_NOISE: f64 = 0.2;
pub const TABULAR_FEATURES: usize = 6;
pub const TABULAR_VOCAB: usize = 4;
pub const PROTECTED_INDEX: usize = 0;
pub const PROTECTED_VALUES: [usize; 2] = [0, 1];

/// One 16x16 grayscale glyph with provenance flags.
#[derive(Debug, Clone)]
pub struct GlyphSample {
    /// [1, 16, 16], values in [0, 1].
    pub image: Tensor,
    pub label: usize,
    pub poisoned: bool,
    /// Token indices (CLS offset applied) of patches touched by a trigger.
    pub trigger_patch_ids: Vec<usize>,
}

/// One categorical record with a designated protected feature.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularSample {
    pub features: Vec<usize>,
    pub protected_index: usize,
    pub label: usize,
}

/// A trigger: where it goes (mask), what it looks like (pattern), what it
/// forces (target class), and how opaquely it is blended.
#[derive(Debug, Clone)]
pub struct TriggerSpec {
    /// [16, 16]; {0,1} for stamps, [0,1] for blended variants.
    pub mask: Tensor,
    /// [1, 16, 16].
    pub pattern: Tensor,
    pub target_class: usize,
    /// 1.0 reproduces an opaque stamp; lower values blend.
    pub blend_alpha: f64,
}

impl TriggerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.mask.shape != [GLYPH_SIDE, GLYPH_SIDE] {
            return Err(Error::ShapeMismatch {
                op: "trigger mask",
                lhs: self.mask.shape.clone(),
                rhs: vec![GLYPH_SIDE, GLYPH_SIDE],
            });
        }
        if self.pattern.shape != [1, GLYPH_SIDE, GLYPH_SIDE] {
            return Err(Error::ShapeMismatch {
                op: "trigger pattern",
                lhs: self.pattern.shape.clone(),
                rhs: vec![1, GLYPH_SIDE, GLYPH_SIDE],
            });
        }
        if self.mask.data.iter().all(|&v| v == 0.0) {
            return Err(Error::Contract(String::from("trigger mask has empty support")));
        }
        if self.target_class >= GLYPH_CLASSES {
            return Err(Error::IndexOutOfRange {
                what: "trigger target class",
                index: self.target_class,
                len: GLYPH_CLASSES,
            });
        }
        if !(0.0 < self.blend_alpha && self.blend_alpha <= 1.0) {
            return Err(Error::Contract(format!(
                "blend_alpha {} outside (0, 1]",
                self.blend_alpha
            )));
        }
        Ok(())
    }

    /// An all-ones square stamp of side `size` whose lower-right corner is
    /// the image's lower-right corner.
    pub fn corner_stamp(size: usize, target_class: usize) -> Self {
        let mut mask = vec![0.0; GLYPH_SIDE * GLYPH_SIDE];
        let start = GLYPH_SIDE - size;
        for y in start..GLYPH_SIDE {
            for x in start..GLYPH_SIDE {
                mask[y * GLYPH_SIDE + x] = 1.0;
            }
        }
        TriggerSpec {
            mask: Tensor::new(vec![GLYPH_SIDE, GLYPH_SIDE], mask).unwrap(),
            pattern: Tensor::full(&[1, GLYPH_SIDE, GLYPH_SIDE], 1.0),
            target_class,
            blend_alpha: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DebugKind {
    Backdoor,
    Unfairness,
}

#[derive(Debug, Clone)]
pub struct DebugPair<S> {
    pub clean: S,
    pub compromised: S,
    pub anomalous_columns: Vec<usize>,
}

/// Paired clean/compromised samples with ground-truth anomalous columns,
/// plus the clean pool the benign attention reference is built from.
#[derive(Debug, Clone)]
pub struct DebuggingSet<S> {
    pub pairs: Vec<DebugPair<S>>,
    pub kind: DebugKind,
    pub clean_pool: Vec<S>,
    /// How many pairs were requested; fewer means triggering failed on
    /// some samples (partial set).
    pub requested: usize,
}

impl<S> DebuggingSet<S> {
    pub fn is_partial(&self) -> bool {
        self.pairs.len() < self.requested
    }

    pub fn validate(&self, token_count: usize) -> Result<()> {
        for pair in &self.pairs {
            if pair.anomalous_columns.is_empty() {
                return Err(Error::Contract(String::from(
                    "compromised sample with no anomalous columns",
                )));
            }
            for &c in &pair.anomalous_columns {
                if c >= token_count {
                    return Err(Error::IndexOutOfRange {
                        what: "anomalous column",
                        index: c,
                        len: token_count,
                    });
                }
            }
        }
        Ok(())
    }
}

// ── glyphs ─────────────────────────────────────────────────────────

fn draw_glyph(class: usize, rng: &mut Rng) -> Tensor {
    let s = GLYPH_SIDE;
    let mut px = vec![0.0; s * s];
    // per-sample jitter keeps classes from being pixel-identical
    let jitter = rng.next_below(3) as isize - 1;
    let shift = |v: usize| -> usize {
        (v as isize + jitter).clamp(0, s as isize - 1) as usize
    };
    // strokes span the whole canvas so that every 4x4 patch carries class
    // signal; no patch is a constant background token
    let mut set = |y: usize, x: usize| px[y * s + x] = 1.0;
    match class {
        0 => {
            // horizontal bars through every patch row
            for &row in &[2usize, 6, 9, 12] {
                let r = shift(row);
                for x in 0..s - 1 {
                    set(r, x);
                    set((r + 1).min(s - 1), x);
                }
            }
        }
        1 => {
            // vertical bars through every patch column
            for &col in &[2usize, 6, 9, 12] {
                let c = shift(col);
                for y in 0..s - 1 {
                    set(y, c);
                    set(y, (c + 1).min(s - 1));
                }
            }
        }
        2 => {
            // diagonal X spanning corner to corner
            for v in 1..s - 3 {
                let v = shift(v);
                set(v, v);
                set((v + 1).min(s - 1), v);
                set(v, s - 1 - v);
                set((v + 1).min(s - 1), s - 1 - v);
            }
        }
        _ => {
            // ring hugging the border
            let (lo, hi) = (shift(2), shift(13));
            for v in lo..=hi {
                set(lo, v);
                set(hi, v);
                set(v, lo);
                set(v, hi);
            }
        }
    }
    for v in px.iter_mut() {
        *v = (*v + rng.next_f64() * GLYPH_NOISE).min(1.0);
    }
    Tensor::new(vec![1, s, s], px).unwrap()
}

/// Balanced four-class glyph dataset; deterministic per seed.
pub fn gen_glyphs(count: usize, seed: u64) -> Result<Vec<GlyphSample>> {
    if count == 0 {
        return Err(Error::Contract(String::from("glyph count must be >= 1")));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % GLYPH_CLASSES;
        out.push(GlyphSample {
            image: draw_glyph(label, &mut rng),
            label,
            poisoned: false,
            trigger_patch_ids: Vec::new(),
        });
    }
    rng.shuffle(&mut out);
    Ok(out)
}

/// Token indices (CLS at 0, so patch p maps to token p+1) of the patches
/// that contain at least one pixel of the mask's support.
pub fn mask_patch_tokens(mask: &Tensor, patch: usize) -> Vec<usize> {
    let grid = GLYPH_SIDE / patch;
    let mut hit = vec![false; grid * grid];
    for y in 0..GLYPH_SIDE {
        for x in 0..GLYPH_SIDE {
            if mask.data[y * GLYPH_SIDE + x] > 0.0 {
                hit[(y / patch) * grid + x / patch] = true;
            }
        }
    }
    hit.iter()
        .enumerate()
        .filter_map(|(p, &h)| if h { Some(p + 1) } else { None })
        .collect()
}

/// Blends the trigger in: x' = (1 - alpha*M) .* x + alpha*M .* pattern.
/// An all-zero mask leaves the sample untouched (and unpoisoned).
pub fn apply_trigger(x: &GlyphSample, t: &TriggerSpec, patch: usize) -> Result<GlyphSample> {
    if t.mask.shape != [GLYPH_SIDE, GLYPH_SIDE] || t.pattern.shape != x.image.shape {
        return Err(Error::ShapeMismatch {
            op: "apply_trigger",
            lhs: t.mask.shape.clone(),
            rhs: x.image.shape.clone(),
        });
    }
    let tokens = mask_patch_tokens(&t.mask, patch);
    if tokens.is_empty() {
        return Ok(x.clone());
    }
    let mut img = x.image.data.clone();
    for i in 0..img.len() {
        let m = t.blend_alpha * t.mask.data[i];
        img[i] = (1.0 - m) * img[i] + m * t.pattern.data[i];
    }
    Ok(GlyphSample {
        image: Tensor::new(x.image.shape.clone(), img)?,
        label: x.label,
        poisoned: true,
        trigger_patch_ids: tokens,
    })
}

/// Stamps floor(rate * n) uniformly chosen samples and relabels them to
/// the trigger's target class.
pub fn poison_dataset(
    data: &[GlyphSample],
    t: &TriggerSpec,
    rate: f64,
    patch: usize,
    seed: u64,
) -> Result<Vec<GlyphSample>> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Contract(format!("poison rate {rate} outside (0, 1)")));
    }
    t.validate()?;
    let n_poison = (rate * data.len() as f64) as usize;
    let mut rng = Rng::seed_from_u64(seed);
    let chosen = rng.sample_distinct(data.len(), n_poison);
    let mut out: Vec<GlyphSample> = data.to_vec();
    for &i in &chosen {
        let mut s = apply_trigger(&out[i], t, patch)?;
        s.label = t.target_class;
        out[i] = s;
    }
    Ok(out)
}

// ── tabular ────────────────────────────────────────────────────────

/// Deterministic label rule over the non-protected features: compares the
/// first pair of non-protected features against the second pair. The rule
/// is position-dependent on purpose — a pooled bag of feature values
/// cannot compute it, so the model has to separate feature positions
/// through attention rather than lean on a value-sum shortcut.
fn tabular_rule(features: &[usize]) -> usize {
    usize::from(features[1] + features[2] > features[3] + features[4])
}

/// Borderline samples are the exact ties of the comparison rule;
/// discrimination in the generator concentrates there, where the
/// legitimate rule is ambiguous, so a trained model consults the
/// protected feature only for this contested slice instead of on every
/// input.
fn tabular_borderline(features: &[usize]) -> bool {
    let a = features[1] + features[2];
    let b = features[3] + features[4];
    a.abs_diff(b) <= 1
}

/// Six categorical features (vocab 4), feature 0 protected and binary.
/// Labels follow a rule on features 1..6; borderline samples get
/// overwritten with the protected value with probability `bias_strength`.
pub fn gen_tabular_biased(
    count: usize,
    bias_strength: f64,
    seed: u64,
) -> Result<Vec<TabularSample>> {
    if !(0.0..=1.0).contains(&bias_strength) {
        return Err(Error::Contract(format!(
            "bias_strength {bias_strength} outside [0, 1]"
        )));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut features = Vec::with_capacity(TABULAR_FEATURES);
        features.push(rng.next_below(2));
        for _ in 1..TABULAR_FEATURES {
            features.push(rng.next_below(TABULAR_VOCAB));
        }
        let mut label = tabular_rule(&features);
        // Discrimination is one-sided: only the marked protected group has
        // borderline labels pulled toward its value. The model then has to
        // verify group membership exactly — a misread costs accuracy on the
        // other group, whose borderline labels still follow the rule.
        if tabular_borderline(&features)
            && features[PROTECTED_INDEX] == 1
            && rng.next_f64() < bias_strength
        {
            label = 1;
        }
        out.push(TabularSample {
            features,
            protected_index: PROTECTED_INDEX,
            label,
        });
    }
    Ok(out)
}

/// All variants of `x` that differ only in the protected feature.
pub fn enumerate_perturbations(
    x: &TabularSample,
    protected_values: &[usize],
) -> Result<Vec<TabularSample>> {
    if protected_values.len() < 2 {
        return Err(Error::Contract(String::from(
            "protected value set needs at least 2 values",
        )));
    }
    let current = x.features[x.protected_index];
    if !protected_values.contains(&current) {
        return Err(Error::Contract(format!(
            "protected value {current} not in the permissible set"
        )));
    }
    Ok(protected_values
        .iter()
        .filter(|&&v| v != current)
        .map(|&v| {
            let mut f = x.features.clone();
            f[x.protected_index] = v;
            TabularSample {
                features: f,
                protected_index: x.protected_index,
                label: x.label,
            }
        })
        .collect())
}

/// True when swapping the protected attribute changes the prediction.
pub fn is_divergent(
    model: &VictimModel,
    x: &TabularSample,
    protected_values: &[usize],
) -> Result<bool> {
    let base = model.predict(&SampleInput::Tabular(&x.features))?;
    for variant in enumerate_perturbations(x, protected_values)? {
        if model.predict(&SampleInput::Tabular(&variant.features))? != base {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Positions where two feature vectors disagree (labels excluded).
pub fn hamming(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

// ── debugging sets ─────────────────────────────────────────────────

/// Pairs clean glyphs with their triggered counterparts, keeping only
/// pairs the model actually misclassifies to the target class. Returns a
/// partial set (flagged via `requested`) when triggering fails on some.
pub fn build_backdoor_debugset(
    model: &VictimModel,
    clean_data: &[GlyphSample],
    t: &TriggerSpec,
    size: usize,
    patch: usize,
) -> Result<DebuggingSet<GlyphSample>> {
    t.validate()?;
    let mut pairs = Vec::new();
    let mut clean_pool = Vec::new();
    for x in clean_data {
        if pairs.len() == size {
            break;
        }
        if x.label == t.target_class {
            continue;
        }
        let triggered = apply_trigger(x, t, patch)?;
        if model.predict(&SampleInput::Image(&triggered.image))? == t.target_class {
            clean_pool.push(x.clone());
            let cols = triggered.trigger_patch_ids.clone();
            pairs.push(DebugPair {
                clean: x.clone(),
                compromised: triggered,
                anomalous_columns: cols,
            });
        }
    }
    Ok(DebuggingSet {
        pairs,
        kind: DebugKind::Backdoor,
        clean_pool,
        requested: size,
    })
}

/// Splits `data` into divergent and fair samples under the protected
/// attribute swap test, then pairs each divergent sample with the fair
/// sample sharing its protected value at minimum Hamming distance (ties
/// broken by lowest index).
pub fn build_bias_debugset(
    model: &VictimModel,
    data: &[TabularSample],
    protected_values: &[usize],
) -> Result<DebuggingSet<TabularSample>> {
    let mut divergent = Vec::new();
    let mut fair = Vec::new();
    for x in data {
        if is_divergent(model, x, protected_values)? {
            divergent.push(x.clone());
        } else {
            fair.push(x.clone());
        }
    }
    if divergent.is_empty() {
        return Err(Error::Contract(String::from(
            "model already fair at this sample budget",
        )));
    }
    let mut pairs = Vec::new();
    for x in &divergent {
        let pv = x.features[x.protected_index];
        let mut best: Option<(usize, usize)> = None; // (distance, index)
        for (i, c) in fair.iter().enumerate() {
            if c.features[c.protected_index] != pv {
                continue;
            }
            let d = hamming(&c.features, &x.features);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        if let Some((_, i)) = best {
            pairs.push(DebugPair {
                clean: fair[i].clone(),
                compromised: x.clone(),
                anomalous_columns: vec![x.protected_index + 1],
            });
        }
    }
    if pairs.is_empty() {
        return Err(Error::Contract(String::from(
            "no fair partner shares a protected value with any divergent sample",
        )));
    }
    let requested = pairs.len();
    Ok(DebuggingSet {
        pairs,
        kind: DebugKind::Unfairness,
        clean_pool: fair,
        requested,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::optim::AdamW;
    use crate::tape::Tape;

    #[test]
    fn glyphs_are_balanced_and_in_range() {
        let data = gen_glyphs(8, 7).unwrap();
        assert_eq!(data.len(), 8);
        let mut counts = [0usize; 4];
        for s in &data {
            assert_eq!(s.image.shape, vec![1, 16, 16]);
            assert!(s.image.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
            counts[s.label] += 1;
        }
        assert_eq!(counts, [2, 2, 2, 2]);
        assert!(gen_glyphs(0, 7).is_err());
    }

    #[test]
    fn glyph_generation_is_deterministic() {
        let a = gen_glyphs(20, 3).unwrap();
        let b = gen_glyphs(20, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.label, y.label);
            assert_eq!(x.image.data, y.image.data);
        }
    }

    #[test]
    fn linear_probe_separates_glyph_classes() {
        // softmax regression on raw pixels; classes are separable by design
        let train = gen_glyphs(200, 11).unwrap();
        let test = gen_glyphs(80, 12).unwrap();
        let mut w = Tensor::zeros(&[256, 4]).param();
        let mut b = Tensor::zeros(&[4]).param();
        let mut opt = AdamW::new(0.05, 0.0);
        for _ in 0..30 {
            let mut tape = Tape::new();
            let wv = tape.leaf(&w);
            let bv = tape.leaf(&b);
            let xs: Vec<f64> = train.iter().flat_map(|s| s.image.data.clone()).collect();
            let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
            let x = tape.constant(&[200, 256], xs);
            let logits = tape.matmul(x, wv).unwrap();
            let logits = tape.add_bias(logits, bv).unwrap();
            let loss = tape.cross_entropy(logits, &labels).unwrap();
            tape.backward(loss).unwrap();
            tape.grad_into(wv, &mut w);
            tape.grad_into(bv, &mut b);
            opt.step(&mut [&mut w, &mut b]).unwrap();
        }
        let mut correct = 0;
        for s in &test {
            let mut scores = b.data.clone();
            for (i, &px) in s.image.data.iter().enumerate() {
                for c in 0..4 {
                    scores[c] += px * w.data[i * 4 + c];
                }
            }
            if crate::model::argmax(&scores) == s.label {
                correct += 1;
            }
        }
        let acc = correct as f64 / test.len() as f64;
        assert!(acc >= 0.9, "linear probe accuracy {acc}");
    }

    #[test]
    fn trigger_stamp_is_exact_and_idempotent() {
        let t = TriggerSpec::corner_stamp(2, 0);
        t.validate().unwrap();
        let x = GlyphSample {
            image: Tensor::zeros(&[1, 16, 16]),
            label: 1,
            poisoned: false,
            trigger_patch_ids: Vec::new(),
        };
        let y = apply_trigger(&x, &t, 4).unwrap();
        assert!(y.poisoned);
        for yy in 14..16 {
            for xx in 14..16 {
                assert_eq!(y.image.data[yy * 16 + xx], 1.0);
            }
        }
        assert_eq!(y.image.data.iter().filter(|&&v| v == 1.0).count(), 4);
        let twice = apply_trigger(&y, &t, 4).unwrap();
        assert_eq!(twice.image.data, y.image.data);
    }

    #[test]
    fn zero_mask_is_a_no_op_and_fails_validation() {
        let t = TriggerSpec {
            mask: Tensor::zeros(&[16, 16]),
            pattern: Tensor::full(&[1, 16, 16], 1.0),
            target_class: 0,
            blend_alpha: 1.0,
        };
        assert!(t.validate().is_err());
        let x = gen_glyphs(1, 5).unwrap().remove(0);
        let y = apply_trigger(&x, &t, 4).unwrap();
        assert!(!y.poisoned);
        assert_eq!(y.image.data, x.image.data);
    }

    #[test]
    fn half_alpha_blends_to_midpoint() {
        let mut t = TriggerSpec::corner_stamp(2, 0);
        t.blend_alpha = 0.5;
        let x = GlyphSample {
            image: Tensor::zeros(&[1, 16, 16]),
            label: 1,
            poisoned: false,
            trigger_patch_ids: Vec::new(),
        };
        let y = apply_trigger(&x, &t, 4).unwrap();
        assert_eq!(y.image.data[15 * 16 + 15], 0.5);
    }

    #[test]
    fn corner_stamp_maps_to_single_token() {
        let t = TriggerSpec::corner_stamp(2, 0);
        // 2x2 at bottom-right with patch 4 -> patch 15 -> token 16
        assert_eq!(mask_patch_tokens(&t.mask, 4), vec![16]);
        // a 2x2 straddling a patch boundary hits multiple tokens
        let mut mask = vec![0.0; 256];
        for y in 3..5 {
            for x in 3..5 {
                mask[y * 16 + x] = 1.0;
            }
        }
        let m = Tensor::new(vec![16, 16], mask).unwrap();
        assert_eq!(mask_patch_tokens(&m, 4), vec![1, 2, 5, 6]);
    }

    #[test]
    fn poison_counts_and_labels() {
        let data = gen_glyphs(100, 21).unwrap();
        let t = TriggerSpec::corner_stamp(2, 3);
        let poisoned = poison_dataset(&data, &t, 0.1, 4, 77).unwrap();
        let hits: Vec<&GlyphSample> = poisoned.iter().filter(|s| s.poisoned).collect();
        assert_eq!(hits.len(), 10);
        assert!(hits.iter().all(|s| s.label == 3));
        assert!(poison_dataset(&data, &t, 0.0, 4, 77).is_err());
        assert!(poison_dataset(&data, &t, 1.0, 4, 77).is_err());
    }

    #[test]
    fn tabular_bias_zero_means_rule_labels() {
        let data = gen_tabular_biased(300, 0.0, 9).unwrap();
        for s in &data {
            assert_eq!(s.label, tabular_rule(&s.features));
            assert!(s.features[0] < 2);
            assert!(s.features.iter().all(|&f| f < TABULAR_VOCAB));
        }
        let again = gen_tabular_biased(300, 0.0, 9).unwrap();
        assert_eq!(data, again);
    }

    #[test]
    fn perturbations_vary_only_the_protected_feature() {
        let x = TabularSample {
            features: vec![1, 2, 0, 3, 1, 0],
            protected_index: 0,
            label: 0,
        };
        let vs = enumerate_perturbations(&x, &[0, 1]).unwrap();
        assert_eq!(vs.len(), 1);
        assert_eq!(vs[0].features, vec![0, 2, 0, 3, 1, 0]);
        let vs = enumerate_perturbations(
            &TabularSample {
                features: vec![2, 0, 0, 0, 0, 0],
                protected_index: 0,
                label: 0,
            },
            &[0, 1, 2, 3],
        )
        .unwrap();
        assert_eq!(vs.len(), 3);
        assert!(enumerate_perturbations(&x, &[1]).is_err());
    }

    #[test]
    fn hamming_pairing_matches_exhaustive_scan() {
        let mut rng = Rng::seed_from_u64(33);
        let probe = TabularSample {
            features: vec![1, 2, 0, 3, 1, 0],
            protected_index: 0,
            label: 0,
        };
        // random pool; best partner found by the documented exhaustive scan
        let pool: Vec<TabularSample> = (0..200)
            .map(|_| TabularSample {
                features: (0..6).map(|_| rng.next_below(4)).collect(),
                protected_index: 0,
                label: rng.next_below(2),
            })
            .collect();
        let mut best = (usize::MAX, usize::MAX);
        for (i, c) in pool.iter().enumerate() {
            if c.features[0] != probe.features[0] {
                continue;
            }
            let d = hamming(&c.features, &probe.features);
            if d < best.0 {
                best = (d, i);
            }
        }
        // replicate the selection rule used by build_bias_debugset
        let mut chosen: Option<(usize, usize)> = None;
        for (i, c) in pool.iter().enumerate() {
            if c.features[0] != probe.features[0] {
                continue;
            }
            let d = hamming(&c.features, &probe.features);
            if chosen.is_none_or(|(bd, _)| d < bd) {
                chosen = Some((d, i));
            }
        }
        assert_eq!(chosen.unwrap(), best);
    }

    #[test]
    fn hamming_example_from_documentation() {
        let x = [1usize, 2, 0, 3, 1, 0];
        assert_eq!(hamming(&x, &[1, 2, 0, 3, 1, 1]), 1);
        assert_eq!(hamming(&x, &[1, 0, 0, 0, 0, 0]), 3);
    }

    #[test]
    fn backdoor_debugset_pairs_are_misclassified_and_in_range() {
        // untrained model: predictions are arbitrary but deterministic, so
        // the filter still applies; just check invariants on whatever passes
        let mut rng = Rng::seed_from_u64(55);
        let cfg = ModelConfig::glyph_default();
        let model = VictimModel::new(cfg, &mut rng).unwrap();
        let data = gen_glyphs(40, 60).unwrap();
        let t = TriggerSpec::corner_stamp(2, 0);
        let set = build_backdoor_debugset(&model, &data, &t, 10, 4).unwrap();
        set.validate(17).unwrap();
        for pair in &set.pairs {
            assert_eq!(pair.anomalous_columns, vec![16]);
            assert!(pair.compromised.poisoned);
            assert_eq!(
                model
                    .predict(&SampleInput::Image(&pair.compromised.image))
                    .unwrap(),
                0
            );
        }
        assert_eq!(set.clean_pool.len(), set.pairs.len());
    }

    #[test]
    fn bias_debugset_requires_divergence() {
        let mut rng = Rng::seed_from_u64(56);
        let cfg = ModelConfig::tabular_default(TABULAR_FEATURES, TABULAR_VOCAB);
        let model = VictimModel::new(cfg, &mut rng).unwrap();
        let data = gen_tabular_biased(60, 0.5, 57).unwrap();
        match build_bias_debugset(&model, &data, &PROTECTED_VALUES) {
            Ok(set) => {
                set.validate(7).unwrap();
                for pair in &set.pairs {
                    assert_eq!(pair.anomalous_columns, vec![1]);
                    assert_eq!(
                        pair.clean.features[0],
                        pair.compromised.features[0]
                    );
                }
            }
            Err(Error::Contract(msg)) => {
                assert!(msg.contains("fair"), "{msg}");
            }
            Err(e) => panic!("unexpected error {e}"),
        }
    }
}
