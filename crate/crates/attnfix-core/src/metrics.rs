//! Evaluation metrics (accuracy, attack success rate, unfairness, strict
//! detector metrics) and the two pipeline ablations.

use alloc::string::String;

use alloc::vec::Vec;

use crate::data::{enumerate_perturbations, TabularSample};
use crate::detector::{Detector, LabeledMap};
use crate::error::{Error, Result};
use crate::hotpatch::{patch_attention, BenignReference, PATCH_EPS};
use crate::model::{argmax, SampleInput, VictimModel};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Fraction of samples a predictor labels correctly.
pub fn eval_accuracy<'a>(
    mut predict: impl FnMut(&SampleInput) -> Result<usize>,
    data: &[(SampleInput<'a>, usize)],
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract(String::from("accuracy needs a nonempty test set")));
    }
    let mut correct = 0usize;
    for (input, label) in data {
        correct += usize::from(predict(input)? == *label);
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Fraction of triggered samples predicted as the attacker's target.
/// Samples whose true label already equals the target are excluded.
pub fn eval_asr<'a>(
    mut predict: impl FnMut(&SampleInput) -> Result<usize>,
    triggered: &[(SampleInput<'a>, usize)],
    target_class: usize,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (input, true_label) in triggered {
        if *true_label == target_class {
            continue;
        }
        total += 1;
        hits += usize::from(predict(input)? == target_class);
    }
    if total == 0 {
        return Err(Error::Contract(String::from(
            "no triggered samples left after excluding the target class",
        )));
    }
    Ok(hits as f64 / total as f64)
}

/// Fraction of samples whose prediction flips under some protected
/// attribute swap.
pub fn eval_uf(
    mut predict: impl FnMut(&SampleInput) -> Result<usize>,
    data: &[TabularSample],
    protected_values: &[usize],
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract(String::from("unfairness needs a nonempty test set")));
    }
    let mut divergent = 0usize;
    for x in data {
        let base = predict(&SampleInput::Tabular(&x.features))?;
        for variant in enumerate_perturbations(x, protected_values)? {
            if predict(&SampleInput::Tabular(&variant.features))? != base {
                divergent += 1;
                break;
            }
        }
    }
    Ok(divergent as f64 / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fpr: f64,
    pub fnr: f64,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Strict map-level counting: a compromised map scores a true positive
/// only when the flagged set equals the ground truth exactly; a clean map
/// scores a true negative only when nothing is flagged.
pub fn eval_detector_strict(
    detector: &Detector,
    maps: &[LabeledMap],
    tau: f64,
) -> Result<DetectorMetrics> {
    if maps.is_empty() {
        return Err(Error::Contract(String::from("strict evaluation needs maps")));
    }
    let (mut tp, mut fp, mut tn, mut fneg) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for example in maps {
        let (scores, _) = detector.score_map(&example.map)?;
        let flagged: Vec<usize> = scores
            .iter()
            .enumerate()
            .filter_map(|(j, &p)| if p > tau { Some(j) } else { None })
            .collect();
        let truth: Vec<usize> = example
            .labels
            .iter()
            .enumerate()
            .filter_map(|(j, &l)| if l == 1.0 { Some(j) } else { None })
            .collect();
        if truth.is_empty() {
            if flagged.is_empty() {
                tn += 1.0;
            } else {
                fp += 1.0;
            }
        } else if flagged == truth {
            tp += 1.0;
        } else {
            fneg += 1.0;
        }
    }
    let precision = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
    let recall = if tp + fneg == 0.0 { 0.0 } else { tp / (tp + fneg) };
    let fpr = if fp + tn == 0.0 { 0.0 } else { fp / (fp + tn) };
    let fnr = if fneg + tp == 0.0 { 0.0 } else { fneg / (fneg + tp) };
    Ok(DetectorMetrics {
        precision,
        recall,
        f1: f1_score(precision, recall),
        fpr,
        fnr,
    })
}

// ── ablations ──────────────────────────────────────────────────────

/// Replaces the given columns with reference values without rescaling the
/// rest — the no-rescale ablation. Output rows generally do not sum to 1.
pub fn patch_without_rescale(map: &Tensor, cols: &[usize], q_layer: &Tensor) -> Result<Tensor> {
    if cols.is_empty() {
        return Err(Error::Contract(String::from("no columns to overwrite")));
    }
    let (heads, n) = (map.shape[0], map.shape[1]);
    let mut out = map.data.clone();
    for &k in cols {
        if k >= n {
            return Err(Error::IndexOutOfRange {
                what: "overwritten column",
                index: k,
                len: n,
            });
        }
        for h in 0..heads {
            for i in 0..n {
                out[(h * n + i) * n + k] = q_layer.data[i * n + k];
            }
        }
    }
    Tensor::new(map.shape.clone(), out)
}

/// "w/o Det." ablation: ignores the detector and patches 1–3 uniformly
/// chosen random columns per layer (seeded via `rng`).
pub fn predict_wo_detector(
    input: &SampleInput,
    victim: &VictimModel,
    qref: &BenignReference,
    rng: &mut Rng,
) -> Result<usize> {
    let n = victim.cfg.token_count();
    // decide the columns up front so the closure stays deterministic
    let per_layer: Vec<Vec<usize>> = (0..victim.cfg.n_layers)
        .map(|_| {
            let c = 1 + rng.next_below(3);
            rng.sample_distinct(n, c)
        })
        .collect();
    let (logits, _) = victim.forward_intercepted(input, |l, map| {
        Ok(Some(patch_attention(
            map,
            &per_layer[l],
            &qref.per_layer[l],
            PATCH_EPS,
        )?))
    })?;
    Ok(argmax(&logits.data))
}

/// "w/o Rec." ablation: real detector, but flagged columns are overwritten
/// without rescaling the remaining columns.
pub fn predict_wo_rescale(
    input: &SampleInput,
    victim: &VictimModel,
    detector: &Detector,
    qref: &BenignReference,
    tau: f64,
) -> Result<usize> {
    let (logits, _) = victim.forward_intercepted_unchecked(input, |l, map| {
        let merged = crate::detector::aggregate_heads(map)?;
        let (scores, _) = detector.score_map(&merged)?;
        let cols: Vec<usize> = scores
            .iter()
            .enumerate()
            .filter_map(|(j, &p)| if p > tau { Some(j) } else { None })
            .collect();
        if cols.is_empty() {
            return Ok(None);
        }
        Ok(Some(patch_without_rescale(map, &cols, &qref.per_layer[l])?))
    })?;
    Ok(argmax(&logits.data))
}
