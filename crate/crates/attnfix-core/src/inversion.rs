//! Gradient-based trigger reconstruction and target-class identification.
//!
//! For a suspected target class, optimizes a sigmoid-parameterized mask
//! and pattern so that blending them into clean images drives the frozen
//! victim toward that class, with an L1 penalty keeping the mask sparse.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{GlyphSample, TriggerSpec, GLYPH_SIDE};
use crate::error::{Error, Result};
use crate::model::{argmax, SampleInput, VictimModel};
use crate::optim::AdamW;
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const INVERSION_LR: f64 = 0.05;
pub const INVERSION_BATCH: usize = 32;
pub const DEFAULT_LAMBDA_SPARSITY: f64 = 0.01;
pub const FLIP_RATE_QUALIFIER: f64 = 0.8;
pub const BINARIZE_THRESHOLD: f64 = 0.5;

/// Reconstruction for one candidate class.
#[derive(Debug, Clone)]
pub struct ClassInversion {
    /// [16, 16], values in [0, 1].
    pub mask: Tensor,
    /// [1, 16, 16], values in [0, 1].
    pub pattern: Tensor,
    pub final_loss: f64,
    pub l1_mass: f64,
    /// Fraction of clean samples whose blended version predicts the class.
    pub flip_rate: f64,
}

#[derive(Debug, Clone)]
pub struct InversionResult {
    pub per_class: Vec<ClassInversion>,
    pub chosen_target: usize,
    /// Set when no class's mask stands out as a sparse outlier.
    pub low_confidence: bool,
}

impl ClassInversion {
    /// Binarizes the mask at 0.5 into a stampable trigger.
    pub fn to_trigger(&self, target_class: usize) -> Result<TriggerSpec> {
        let mask = Tensor::new(
            self.mask.shape.clone(),
            self.mask
                .data
                .iter()
                .map(|&v| f64::from(u8::from(v > BINARIZE_THRESHOLD)))
                .collect(),
        )?;
        let t = TriggerSpec {
            mask,
            pattern: self.pattern.clone(),
            target_class,
            blend_alpha: 1.0,
        };
        t.validate()?;
        Ok(t)
    }
}

/// Intersection-over-union of two binary masks (nonzero = member).
pub fn mask_iou(a: &Tensor, b: &Tensor) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (x, y) = (x > 0.0, y > 0.0);
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Reconstructs a trigger that flips the frozen model toward class `c`.
pub fn invert_trigger(
    model: &VictimModel,
    clean_data: &[GlyphSample],
    c: usize,
    lambda_sparsity: f64,
    steps: usize,
    seed: u64,
) -> Result<ClassInversion> {
    if clean_data.is_empty() {
        return Err(Error::Contract(String::from("inversion needs clean samples")));
    }
    if c >= model.cfg.n_classes {
        return Err(Error::IndexOutOfRange {
            what: "inversion target class",
            index: c,
            len: model.cfg.n_classes,
        });
    }
    let px = GLYPH_SIDE * GLYPH_SIDE;
    // zero init: sigmoid(0) = 0.5 everywhere
    let mut u_mask = Tensor::zeros(&[GLYPH_SIDE, GLYPH_SIDE]).param();
    let mut u_pattern = Tensor::zeros(&[1, GLYPH_SIDE, GLYPH_SIDE]).param();
    let mut opt = AdamW::new(INVERSION_LR, 0.0);
    let mut rng = Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..clean_data.len()).collect();
    let mut cursor = order.len(); // force an initial shuffle
    let mut final_loss = 0.0;

    for step in 0..steps {
        let mut tape = Tape::new();
        let um = tape.leaf(&u_mask);
        let up = tape.leaf(&u_pattern);
        let mask = tape.sigmoid(um);
        let pattern = tape.sigmoid(up);
        let mask_img = tape.reshape(mask, &[1, GLYPH_SIDE, GLYPH_SIDE])?;
        let ones = tape.constant(&[1, GLYPH_SIDE, GLYPH_SIDE], vec![1.0; px]);
        let keep = tape.sub(ones, mask_img)?;
        let bound = model.bind_frozen(&mut tape);

        let mut losses: Option<crate::tape::Var> = None;
        for _ in 0..INVERSION_BATCH {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            let sample = &clean_data[order[cursor]];
            cursor += 1;
            let x = tape.constant(&sample.image.shape, sample.image.data.clone());
            let kept = tape.mul(keep, x)?;
            let added = tape.mul(mask_img, pattern)?;
            let blended = tape.add(kept, added)?;
            let logits = model.forward_image_var(&mut tape, &bound, blended)?;
            let loss = tape.cross_entropy(logits, &[c])?;
            losses = Some(match losses {
                None => loss,
                Some(prev) => tape.add(prev, loss)?,
            });
        }
        let ce = tape.scale(losses.unwrap(), 1.0 / INVERSION_BATCH as f64);
        // mask is nonnegative, so its L1 norm is a plain sum
        let l1 = tape.sum(mask);
        let penalty = tape.scale(l1, lambda_sparsity);
        let total = tape.add(ce, penalty)?;
        final_loss = tape.value_scalar(total);
        if !final_loss.is_finite() {
            return Err(Error::Contract(format!(
                "inversion diverged: non-finite loss at step {step} (lr {INVERSION_LR})"
            )));
        }
        tape.backward(total)?;
        tape.grad_into(um, &mut u_mask);
        tape.grad_into(up, &mut u_pattern);
        opt.step(&mut [&mut u_mask, &mut u_pattern])?;
    }

    let mask = Tensor::new(
        vec![GLYPH_SIDE, GLYPH_SIDE],
        u_mask.data.iter().map(|&v| crate::tape::sigmoid(v)).collect(),
    )?;
    let pattern = Tensor::new(
        vec![1, GLYPH_SIDE, GLYPH_SIDE],
        u_pattern
            .data
            .iter()
            .map(|&v| crate::tape::sigmoid(v))
            .collect(),
    )?;
    let l1_mass: f64 = mask.data.iter().sum();
    let flip_rate = measure_flip_rate(model, clean_data, &mask, &pattern, c)?;
    Ok(ClassInversion {
        mask,
        pattern,
        final_loss,
        l1_mass,
        flip_rate,
    })
}

/// Fraction of clean samples the continuous blend flips to `c`.
fn measure_flip_rate(
    model: &VictimModel,
    clean_data: &[GlyphSample],
    mask: &Tensor,
    pattern: &Tensor,
    c: usize,
) -> Result<f64> {
    let mut flipped = 0usize;
    for sample in clean_data {
        let mut img = sample.image.data.clone();
        for i in 0..img.len() {
            let m = mask.data[i];
            img[i] = (1.0 - m) * img[i] + m * pattern.data[i];
        }
        let blended = Tensor::new(sample.image.shape.clone(), img)?;
        let (logits, _) = model.forward(&SampleInput::Image(&blended))?;
        flipped += usize::from(argmax(&logits.data) == c);
    }
    Ok(flipped as f64 / clean_data.len() as f64)
}

/// Runs inversion for every class and picks the suspected target: the
/// sparsest mask among classes with flip rate >= 0.8, else the class with
/// the highest flip rate.
pub fn identify_target_class(
    model: &VictimModel,
    clean_data: &[GlyphSample],
    lambda_sparsity: f64,
    steps: usize,
    seed: u64,
) -> Result<InversionResult> {
    let n_classes = model.cfg.n_classes;
    if n_classes < 2 {
        return Err(Error::Contract(String::from(
            "target identification needs >= 2 classes",
        )));
    }
    let mut per_class = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        per_class.push(invert_trigger(
            model,
            clean_data,
            c,
            lambda_sparsity,
            steps,
            seed.wrapping_add(c as u64),
        )?);
    }
    let qualified: Vec<usize> = (0..n_classes)
        .filter(|&c| per_class[c].flip_rate >= FLIP_RATE_QUALIFIER)
        .collect();
    let chosen_target = if qualified.is_empty() {
        (0..n_classes)
            .max_by(|&a, &b| {
                per_class[a]
                    .flip_rate
                    .partial_cmp(&per_class[b].flip_rate)
                    .unwrap()
            })
            .unwrap()
    } else {
        *qualified
            .iter()
            .min_by(|&&a, &&b| {
                per_class[a]
                    .l1_mass
                    .partial_cmp(&per_class[b].l1_mass)
                    .unwrap()
            })
            .unwrap()
    };
    // confidence check: the smallest mask should be a clear outlier
    // against the median mass; when it is not (min * 3 > median), no
    // class stands out and the result is flagged
    let mut masses: Vec<f64> = per_class.iter().map(|r| r.l1_mass).collect();
    masses.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = masses[masses.len() / 2];
    let low_confidence = masses[0] * 3.0 > median;
    Ok(InversionResult {
        per_class,
        chosen_target,
        low_confidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_glyphs;
    use crate::model::{ModelConfig, VictimModel};

    fn small_model(seed: u64) -> VictimModel {
        let mut rng = Rng::seed_from_u64(seed);
        VictimModel::new(ModelConfig::glyph_default(), &mut rng).unwrap()
    }

    #[test]
    fn zero_steps_keeps_initialization() {
        let model = small_model(1);
        let data = gen_glyphs(8, 2).unwrap();
        let r = invert_trigger(&model, &data, 0, 0.01, 0, 3).unwrap();
        assert!(r.mask.data.iter().all(|&v| v == 0.5));
        assert!(r.pattern.data.iter().all(|&v| v == 0.5));
        assert!((r.l1_mass - 128.0).abs() < 1e-12);
    }

    #[test]
    fn mask_and_pattern_stay_in_unit_range() {
        let model = small_model(4);
        let data = gen_glyphs(16, 5).unwrap();
        let r = invert_trigger(&model, &data, 1, 0.01, 5, 6).unwrap();
        assert!(r.mask.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(r.pattern.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!((0.0..=1.0).contains(&r.flip_rate));
    }

    #[test]
    fn victim_weights_are_never_mutated() {
        let model = small_model(7);
        let mut before = Vec::new();
        model.for_each_param(|_, t| before.extend_from_slice(&t.data));
        let data = gen_glyphs(16, 8).unwrap();
        invert_trigger(&model, &data, 0, 0.01, 3, 9).unwrap();
        let mut after = Vec::new();
        model.for_each_param(|_, t| after.extend_from_slice(&t.data));
        assert_eq!(before, after);
    }

    #[test]
    fn sparsity_pressure_shrinks_the_mask_on_average() {
        let model = small_model(10);
        let data = gen_glyphs(16, 11).unwrap();
        let mean_mass = |lambda: f64| -> f64 {
            (0..5)
                .map(|s| {
                    invert_trigger(&model, &data, 0, lambda, 8, 100 + s)
                        .unwrap()
                        .l1_mass
                })
                .sum::<f64>()
                / 5.0
        };
        assert!(mean_mass(0.1) < mean_mass(0.0));
    }

    #[test]
    fn identify_runs_once_per_class() {
        let model = small_model(12);
        let data = gen_glyphs(8, 13).unwrap();
        let r = identify_target_class(&model, &data, 0.01, 1, 14).unwrap();
        assert_eq!(r.per_class.len(), 4);
        assert!(r.chosen_target < 4);
    }

    #[test]
    fn iou_counts_overlap() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((mask_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(mask_iou(&a, &a), 1.0);
    }
}
