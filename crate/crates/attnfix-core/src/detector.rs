//! Contrastively trained per-column anomaly scorer for attention maps.
//!
//! A head-averaged map goes through a small conv stack; mean-pooling over
//! the row axis yields one feature vector per column; a shared MLP plus
//! sigmoid turns each into an anomaly probability. Training mixes BCE with
//! an InfoNCE term that pulls same-label column features together.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::DebuggingSet;
use crate::error::{Error, Result};
use crate::model::{AttentionTrace, SampleInput, VictimModel};
use crate::optim::AdamW;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const CONV_CHANNELS: [usize; 2] = [8, 16];
pub const COLUMN_FEATURE_DIM: usize = 16;
pub const MLP_HIDDEN: usize = 32;
pub const CONTRAST_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_LAMBDA_CONTRAST: f64 = 1.0;
pub const DETECTOR_LR: f64 = 1e-4;
pub const DETECTOR_EPOCHS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub token_count: usize,
    pub tau: f64,
    pub lambda_contrast: f64,
}

impl DetectorConfig {
    pub fn new(token_count: usize) -> Self {
        DetectorConfig {
            token_count,
            tau: DEFAULT_TAU,
            lambda_contrast: DEFAULT_LAMBDA_CONTRAST,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.tau && self.tau < 1.0) {
            return Err(Error::Contract(format!("tau {} outside (0, 1)", self.tau)));
        }
        if self.lambda_contrast < 0.0 {
            return Err(Error::Contract(format!(
                "lambda_contrast {} negative",
                self.lambda_contrast
            )));
        }
        if self.token_count == 0 {
            return Err(Error::Contract(String::from("token_count must be positive")));
        }
        Ok(())
    }
}

/// Per-layer anomaly probabilities, one vector of length n per layer.
#[derive(Debug, Clone)]
pub struct AnomalyScores {
    pub per_layer: Vec<Vec<f64>>,
}

/// Flagged (layer, column) pairs.
pub type AnomalySet = Vec<(usize, usize)>;

/// Mean over the head axis: [heads, n, n] -> [n, n].
pub fn aggregate_heads(map: &Tensor) -> Result<Tensor> {
    if map.shape.len() != 3 || map.shape[1] != map.shape[2] {
        return Err(Error::ShapeMismatch {
            op: "aggregate_heads",
            lhs: map.shape.clone(),
            rhs: vec![0, 0, 0],
        });
    }
    let (h, n) = (map.shape[0], map.shape[1]);
    if h == 0 {
        return Err(Error::Contract(String::from("aggregate_heads needs >= 1 head")));
    }
    let mut out = vec![0.0; n * n];
    for head in 0..h {
        for i in 0..n * n {
            out[i] += map.data[head * n * n + i];
        }
    }
    for v in out.iter_mut() {
        *v /= h as f64;
    }
    Tensor::new(vec![n, n], out)
}

pub struct Detector {
    pub cfg: DetectorConfig,
    conv1_k: Tensor,
    conv1_b: Tensor,
    conv2_k: Tensor,
    conv2_b: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

struct BoundDetector {
    conv1_k: Var,
    conv1_b: Var,
    conv2_k: Var,
    conv2_b: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl Detector {
    pub fn new(cfg: DetectorConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let std = 0.1;
        Ok(Detector {
            cfg,
            conv1_k: Tensor::randn(&[CONV_CHANNELS[0], 1, 3, 3], std, rng).param(),
            conv1_b: Tensor::zeros(&[CONV_CHANNELS[0]]).param(),
            conv2_k: Tensor::randn(&[CONV_CHANNELS[1], CONV_CHANNELS[0], 3, 3], std, rng)
                .param(),
            conv2_b: Tensor::zeros(&[CONV_CHANNELS[1]]).param(),
            w1: Tensor::randn(&[COLUMN_FEATURE_DIM, MLP_HIDDEN], std, rng).param(),
            b1: Tensor::zeros(&[MLP_HIDDEN]).param(),
            w2: Tensor::randn(&[MLP_HIDDEN, 1], std, rng).param(),
            // negative prior: most columns are benign, so scores should
            // start near zero rather than sigmoid(0) = 0.5
            b2: Tensor::new(vec![1], vec![-4.0])?.param(),
        })
    }

    /// All-zero weights: every score is exactly sigmoid(0) = 0.5.
    pub fn zeroed(cfg: DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Detector {
            cfg,
            conv1_k: Tensor::zeros(&[CONV_CHANNELS[0], 1, 3, 3]).param(),
            conv1_b: Tensor::zeros(&[CONV_CHANNELS[0]]).param(),
            conv2_k: Tensor::zeros(&[CONV_CHANNELS[1], CONV_CHANNELS[0], 3, 3]).param(),
            conv2_b: Tensor::zeros(&[CONV_CHANNELS[1]]).param(),
            w1: Tensor::zeros(&[COLUMN_FEATURE_DIM, MLP_HIDDEN]).param(),
            b1: Tensor::zeros(&[MLP_HIDDEN]).param(),
            w2: Tensor::zeros(&[MLP_HIDDEN, 1]).param(),
            b2: Tensor::zeros(&[1]).param(),
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv1_k,
            &mut self.conv1_b,
            &mut self.conv2_k,
            &mut self.conv2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    pub fn for_each_param(&self, mut f: impl FnMut(String, &Tensor)) {
        for (name, t) in [
            ("conv1_k", &self.conv1_k),
            ("conv1_b", &self.conv1_b),
            ("conv2_k", &self.conv2_k),
            ("conv2_b", &self.conv2_b),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ] {
            f(String::from(name), t);
        }
    }

    pub fn set_param(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let mut names = Vec::new();
        self.for_each_param(|n, t| names.push((n, t.numel())));
        let idx = names
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Contract(format!("unknown detector parameter {name}")))?;
        if names[idx].1 != data.len() {
            return Err(Error::Contract(format!(
                "detector parameter {name} expects {} values, got {}",
                names[idx].1,
                data.len()
            )));
        }
        self.params_mut()[idx].data = data;
        Ok(())
    }

    fn bind(&self, tape: &mut Tape, frozen: bool) -> BoundDetector {
        let leaf = |tape: &mut Tape, t: &Tensor| -> Var {
            if frozen {
                tape.constant(&t.shape, t.data.clone())
            } else {
                tape.leaf(t)
            }
        };
        BoundDetector {
            conv1_k: leaf(tape, &self.conv1_k),
            conv1_b: leaf(tape, &self.conv1_b),
            conv2_k: leaf(tape, &self.conv2_k),
            conv2_b: leaf(tape, &self.conv2_b),
            w1: leaf(tape, &self.w1),
            b1: leaf(tape, &self.b1),
            w2: leaf(tape, &self.w2),
            b2: leaf(tape, &self.b2),
        }
    }

    /// Adds a per-channel bias to a [c, n, n] activation.
    fn add_channel_bias(tape: &mut Tape, x: Var, bias: Var, c: usize, nn: usize) -> Result<Var> {
        let flat = tape.reshape(x, &[c, nn])?;
        let bc = tape.broadcast_col(bias, nn)?;
        tape.add(flat, bc)
    }

    /// Conv stack + row-mean pooling + shared MLP on one [n, n] map.
    /// Returns (probabilities [n], column features [n, 16]).
    fn forward_on_tape(&self, tape: &mut Tape, bound: &BoundDetector, map: Var) -> Result<(Var, Var)> {
        let n = self.cfg.token_count;
        let nn = n * n;
        let img = tape.reshape(map, &[1, n, n])?;
        let c1 = tape.conv2d(img, bound.conv1_k)?;
        let c1 = Self::add_channel_bias(tape, c1, bound.conv1_b, CONV_CHANNELS[0], nn)?;
        let c1 = tape.reshape(c1, &[CONV_CHANNELS[0], n, n])?;
        let c1 = tape.relu(c1);
        let c2 = tape.conv2d(c1, bound.conv2_k)?;
        let c2 = Self::add_channel_bias(tape, c2, bound.conv2_b, CONV_CHANNELS[1], nn)?;
        let c2 = tape.reshape(c2, &[CONV_CHANNELS[1], n, n])?;
        let c2 = tape.relu(c2);
        // mean over the row axis keeps one vector per column
        let pooled = tape.mean_axis1(c2)?; // [16, n]
        let features = tape.transpose2(pooled)?; // [n, 16]
        let h = tape.matmul(features, bound.w1)?;
        let h = tape.add_bias(h, bound.b1)?;
        let h = tape.relu(h);
        let out = tape.matmul(h, bound.w2)?;
        let out = tape.add_bias(out, bound.b2)?;
        let flat = tape.reshape(out, &[n])?;
        let probs = tape.sigmoid(flat);
        Ok((probs, features))
    }

    /// Inference on one head-averaged map.
    pub fn score_map(&self, map: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let n = self.cfg.token_count;
        if map.shape != [n, n] {
            return Err(Error::ShapeMismatch {
                op: "score_map",
                lhs: map.shape.clone(),
                rhs: vec![n, n],
            });
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, true);
        let m = tape.constant(&map.shape, map.data.clone());
        let (probs, features) = self.forward_on_tape(&mut tape, &bound, m)?;
        let features =
            Tensor::new(vec![n, COLUMN_FEATURE_DIM], tape.data(features).to_vec())?;
        Ok((tape.data(probs).to_vec(), features))
    }

    /// Scores every layer of a trace (heads averaged first).
    pub fn score_trace(&self, trace: &AttentionTrace) -> Result<AnomalyScores> {
        let mut per_layer = Vec::with_capacity(trace.maps.len());
        for map in &trace.maps {
            let merged = aggregate_heads(map)?;
            per_layer.push(self.score_map(&merged)?.0);
        }
        Ok(AnomalyScores { per_layer })
    }

    /// Flags every (layer, column) whose score strictly exceeds tau.
    pub fn localize(&self, trace: &AttentionTrace, tau: f64) -> Result<AnomalySet> {
        let scores = self.score_trace(trace)?;
        Ok(flag_over_threshold(&scores, tau))
    }
}

pub fn flag_over_threshold(scores: &AnomalyScores, tau: f64) -> AnomalySet {
    let mut out = Vec::new();
    for (l, layer) in scores.per_layer.iter().enumerate() {
        for (j, &p) in layer.iter().enumerate() {
            if p > tau {
                out.push((l, j));
            }
        }
    }
    out
}

/// Training example: one head-averaged map plus per-column labels.
#[derive(Debug, Clone)]
pub struct LabeledMap {
    pub map: Tensor,
    pub labels: Vec<f64>,
}

/// Runs the victim over every sample in the debugging set and labels the
/// columns of every layer's head-averaged map (clean maps all zero,
/// compromised maps 1 at the annotated columns).
pub fn collect_training_maps<S>(
    victim: &VictimModel,
    set: &DebuggingSet<S>,
    mut to_input: impl FnMut(&S) -> SampleInput<'_> + Copy,
) -> Result<Vec<LabeledMap>>
where
    S: Clone,
{
    let n = victim.cfg.token_count();
    let mut out = Vec::new();
    let push_maps = |trace: &AttentionTrace, labels: &[f64], out: &mut Vec<LabeledMap>| -> Result<()> {
        for map in &trace.maps {
            out.push(LabeledMap {
                map: aggregate_heads(map)?,
                labels: labels.to_vec(),
            });
        }
        Ok(())
    };
    for pair in &set.pairs {
        let clean_labels = vec![0.0; n];
        let mut bad_labels = vec![0.0; n];
        for &c in &pair.anomalous_columns {
            bad_labels[c] = 1.0;
        }
        let (_, clean_trace) = victim.forward(&to_input(&pair.clean))?;
        push_maps(&clean_trace, &clean_labels, &mut out)?;
        let (_, bad_trace) = victim.forward(&to_input(&pair.compromised))?;
        push_maps(&bad_trace, &bad_labels, &mut out)?;
    }
    Ok(out)
}

/// BCE + lambda * InfoNCE over one map's columns. The contrastive term is
/// skipped when the map's columns all share one label. `rng` draws the
/// positive partner per anchor.
fn delta_loss_on_tape(
    detector: &Detector,
    tape: &mut Tape,
    bound: &BoundDetector,
    example: &LabeledMap,
    lambda: f64,
    rng: &mut Rng,
) -> Result<Var> {
    let n = detector.cfg.token_count;
    if example.labels.len() != n {
        return Err(Error::Contract(format!(
            "labels length {} != token count {n}",
            example.labels.len()
        )));
    }
    let m = tape.constant(&example.map.shape, example.map.data.clone());
    let (probs, features) = detector.forward_on_tape(tape, bound, m)?;
    let bce = tape.bce_loss(probs, &example.labels)?;
    if lambda == 0.0 {
        return Ok(bce);
    }
    let positives: Vec<usize> = (0..n).filter(|&j| example.labels[j] == 1.0).collect();
    let negatives: Vec<usize> = (0..n).filter(|&j| example.labels[j] == 0.0).collect();
    if positives.is_empty() || negatives.is_empty() {
        return Ok(bce);
    }
    let mut triples = Vec::new();
    for &anchor in positives.iter().chain(&negatives) {
        let same: Vec<usize> = if example.labels[anchor] == 1.0 {
            positives.iter().copied().filter(|&j| j != anchor).collect()
        } else {
            negatives.iter().copied().filter(|&j| j != anchor).collect()
        };
        if same.is_empty() {
            continue;
        }
        let pos = same[rng.next_below(same.len())];
        let diff: Vec<usize> = if example.labels[anchor] == 1.0 {
            negatives.clone()
        } else {
            positives.clone()
        };
        triples.push((anchor, pos, diff));
    }
    if triples.is_empty() {
        return Ok(bce);
    }
    // cosine similarities between column features
    let sq = tape.mul(features, features)?;
    let sums = tape.sum_rows(sq)?;
    let eps = tape.constant(&[n], vec![1e-12; n]);
    let safe = tape.add(sums, eps)?;
    let norms = tape.sqrt(safe);
    let bc = tape.broadcast_col(norms, COLUMN_FEATURE_DIM)?;
    let unit = tape.div(features, bc)?;
    let ut = tape.transpose2(unit)?;
    let sims = tape.matmul(unit, ut)?;
    let contrast = tape.info_nce(sims, CONTRAST_TEMPERATURE, &triples)?;
    let scaled = tape.scale(contrast, lambda);
    tape.add(bce, scaled)
}

/// Scalar convenience wrapper around `delta_loss_on_tape`.
pub fn delta_loss(
    detector: &Detector,
    example: &LabeledMap,
    lambda: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = detector.bind(&mut tape, true);
    let loss = delta_loss_on_tape(detector, &mut tape, &bound, example, lambda, rng)?;
    Ok(tape.value_scalar(loss))
}

#[derive(Debug, Clone, Default)]
pub struct DetectorTrainLog {
    pub epoch_loss: Vec<f64>,
}

/// Trains a detector on labeled maps: AdamW, one optimizer step per map,
/// seeded shuffling each epoch.
pub fn train_detector_on_maps(
    detector: &mut Detector,
    maps: &[LabeledMap],
    epochs: usize,
    seed: u64,
) -> Result<DetectorTrainLog> {
    if maps.is_empty() {
        return Err(Error::Contract(String::from("no maps to train on")));
    }
    let lambda = detector.cfg.lambda_contrast;
    let mut rng = Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(DETECTOR_LR, 0.01);
    let mut order: Vec<usize> = (0..maps.len()).collect();
    let mut log = DetectorTrainLog::default();
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for &i in &order {
            let mut tape = Tape::new();
            let bound = detector.bind(&mut tape, false);
            let loss =
                delta_loss_on_tape(detector, &mut tape, &bound, &maps[i], lambda, &mut rng)?;
            let value = tape.value_scalar(loss);
            if !value.is_finite() {
                return Err(Error::Contract(format!(
                    "detector training diverged at step {}",
                    opt.step_count()
                )));
            }
            tape.backward(loss)?;
            for (v, p) in [
                bound.conv1_k,
                bound.conv1_b,
                bound.conv2_k,
                bound.conv2_b,
                bound.w1,
                bound.b1,
                bound.w2,
                bound.b2,
            ]
            .into_iter()
            .zip(detector.params_mut())
            {
                tape.grad_into(v, p);
            }
            opt.step(&mut detector.params_mut())?;
            total += value;
        }
        log.epoch_loss.push(total / maps.len() as f64);
    }
    Ok(log)
}

/// Full training entry point over a debugging set.
pub fn train_detector<S: Clone>(
    victim: &VictimModel,
    set: &DebuggingSet<S>,
    cfg: DetectorConfig,
    epochs: usize,
    seed: u64,
    to_input: impl FnMut(&S) -> SampleInput<'_> + Copy,
) -> Result<(Detector, DetectorTrainLog)> {
    if set.pairs.is_empty() {
        return Err(Error::Contract(String::from(
            "debugging set has no compromised samples",
        )));
    }
    let maps = collect_training_maps(victim, set, to_input)?;
    let mut rng = Rng::seed_from_u64(seed);
    let mut detector = Detector::new(cfg, &mut rng)?;
    let log = train_detector_on_maps(&mut detector, &maps, epochs, seed.wrapping_add(1))?;
    Ok((detector, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_map(n: usize) -> Tensor {
        Tensor::full(&[n, n], 1.0 / n as f64)
    }

    /// Uniform map with one hot column pinned to `value`.
    fn spiked_map(n: usize, col: usize, value: f64) -> Tensor {
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                m[i * n + j] = if j == col {
                    value
                } else {
                    (1.0 - value) / (n - 1) as f64
                };
            }
        }
        Tensor::new(vec![n, n], m).unwrap()
    }

    #[test]
    fn aggregate_single_head_is_identity() {
        let m = Tensor::new(vec![1, 2, 2], vec![0.3, 0.7, 0.6, 0.4]).unwrap();
        assert_eq!(aggregate_heads(&m).unwrap().data, m.data);
    }

    #[test]
    fn aggregate_transposed_heads_is_symmetric() {
        let a = vec![0.3, 0.7, 0.6, 0.4];
        let at = vec![0.3, 0.6, 0.7, 0.4];
        let m = Tensor::new(vec![2, 2, 2], [a, at].concat()).unwrap();
        let out = aggregate_heads(&m).unwrap();
        assert_eq!(out.data[1], out.data[2]);
    }

    #[test]
    fn aggregate_matches_loop_oracle() {
        let mut rng = Rng::seed_from_u64(3);
        let n = 5;
        let data: Vec<f64> = (0..4 * n * n).map(|_| rng.next_f64()).collect();
        let m = Tensor::new(vec![4, n, n], data.clone()).unwrap();
        let out = aggregate_heads(&m).unwrap();
        for i in 0..n * n {
            let want: f64 = (0..4).map(|h| data[h * n * n + i]).sum::<f64>() / 4.0;
            assert!((out.data[i] - want).abs() <= 1e-12);
        }
        // averaging preserves row-stochasticity of stochastic inputs
        let rows = Tensor::new(
            vec![2, 2, 2],
            vec![0.2, 0.8, 0.5, 0.5, 0.9, 0.1, 0.3, 0.7],
        )
        .unwrap();
        let avg = aggregate_heads(&rows).unwrap();
        for r in avg.data.chunks(2) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn zero_detector_scores_half_everywhere() {
        let det = Detector::zeroed(DetectorConfig::new(6)).unwrap();
        let (scores, _) = det.score_map(&uniform_map(6)).unwrap();
        assert!(scores.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn scores_stay_in_unit_interval() {
        let mut rng = Rng::seed_from_u64(4);
        let det = Detector::new(DetectorConfig::new(7), &mut rng).unwrap();
        let (scores, _) = det.score_map(&spiked_map(7, 3, 0.7)).unwrap();
        assert!(scores.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert!(det.score_map(&uniform_map(5)).is_err());
    }

    #[test]
    fn center_only_kernels_commute_with_column_permutation() {
        // with 1x1-equivalent kernels the conv sees each entry alone, so
        // swapping two columns of the map swaps their scores
        let mut det = Detector::zeroed(DetectorConfig::new(4)).unwrap();
        let mut k1 = vec![0.0; 8 * 9];
        for ch in 0..8 {
            k1[ch * 9 + 4] = 0.5 + 0.1 * ch as f64;
        }
        det.set_param("conv1_k", k1).unwrap();
        let mut k2 = vec![0.0; 16 * 8 * 9];
        let mut rng = Rng::seed_from_u64(5);
        for co in 0..16 {
            for ci in 0..8 {
                k2[(co * 8 + ci) * 9 + 4] = rng.next_normal() * 0.3;
            }
        }
        det.set_param("conv2_k", k2).unwrap();
        det.set_param(
            "w1",
            (0..16 * 32).map(|i| ((i % 7) as f64 - 3.0) * 0.1).collect(),
        )
        .unwrap();
        det.set_param("w2", (0..32).map(|i| (i as f64 - 16.0) * 0.05).collect())
            .unwrap();

        let m = spiked_map(4, 1, 0.7);
        let (scores, _) = det.score_map(&m).unwrap();
        // swap columns 1 and 2
        let mut swapped = m.data.clone();
        for i in 0..4 {
            swapped.swap(i * 4 + 1, i * 4 + 2);
        }
        let (scores2, _) = det
            .score_map(&Tensor::new(vec![4, 4], swapped).unwrap())
            .unwrap();
        assert!((scores[1] - scores2[2]).abs() < 1e-12);
        assert!((scores[2] - scores2[1]).abs() < 1e-12);
        assert!((scores[0] - scores2[0]).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_is_exact_bce() {
        let mut rng = Rng::seed_from_u64(6);
        let det = Detector::new(DetectorConfig::new(3), &mut rng).unwrap();
        let example = LabeledMap {
            map: spiked_map(3, 0, 0.7),
            labels: vec![1.0, 0.0, 0.0],
        };
        let (probs, _) = det.score_map(&example.map).unwrap();
        // hand BCE on the 3-column toy
        let clip = |p: f64| p.clamp(1e-7, 1.0 - 1e-7);
        let hand = -(libm::log(clip(probs[0]))
            + libm::log(1.0 - clip(probs[1]))
            + libm::log(1.0 - clip(probs[2])))
            / 3.0;
        let mut r = Rng::seed_from_u64(7);
        let got = delta_loss(&det, &example, 0.0, &mut r).unwrap();
        assert!((got - hand).abs() < 1e-12);
    }

    #[test]
    fn single_label_batch_skips_contrastive_term() {
        let mut rng = Rng::seed_from_u64(8);
        let det = Detector::new(DetectorConfig::new(3), &mut rng).unwrap();
        let example = LabeledMap {
            map: uniform_map(3),
            labels: vec![0.0, 0.0, 0.0],
        };
        let mut r1 = Rng::seed_from_u64(9);
        let mut r2 = Rng::seed_from_u64(9);
        let with = delta_loss(&det, &example, 1.0, &mut r1).unwrap();
        let without = delta_loss(&det, &example, 0.0, &mut r2).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn delta_loss_rejects_non_binary_labels() {
        let mut rng = Rng::seed_from_u64(10);
        let det = Detector::new(DetectorConfig::new(3), &mut rng).unwrap();
        let example = LabeledMap {
            map: uniform_map(3),
            labels: vec![0.5, 0.0, 1.0],
        };
        let mut r = Rng::seed_from_u64(11);
        assert!(delta_loss(&det, &example, 0.0, &mut r).is_err());
    }

    #[test]
    fn threshold_flagging_is_strict_and_monotone() {
        let scores = AnomalyScores {
            per_layer: vec![vec![0.05, 0.95, 0.09], vec![0.1, 0.2, 0.02]],
        };
        assert_eq!(flag_over_threshold(&scores, 0.1), vec![(0, 1), (1, 1)]);
        // 0.1 itself is not > 0.1
        assert!(!flag_over_threshold(&scores, 0.1).contains(&(1, 0)));
        assert!(flag_over_threshold(&scores, 1.0).is_empty());
        let loose = flag_over_threshold(&scores, 0.05);
        let tight = flag_over_threshold(&scores, 0.5);
        assert!(tight.iter().all(|p| loose.contains(p)));
    }

    #[test]
    fn epochs_zero_keeps_initial_weights() {
        let mut rng = Rng::seed_from_u64(12);
        let mut det = Detector::new(DetectorConfig::new(4), &mut rng).unwrap();
        let mut before = Vec::new();
        det.for_each_param(|_, t| before.extend_from_slice(&t.data));
        let maps = vec![LabeledMap {
            map: spiked_map(4, 2, 0.7),
            labels: vec![0.0, 0.0, 1.0, 0.0],
        }];
        let log = train_detector_on_maps(&mut det, &maps, 0, 13).unwrap();
        assert!(log.epoch_loss.is_empty());
        let mut after = Vec::new();
        det.for_each_param(|_, t| after.extend_from_slice(&t.data));
        assert_eq!(before, after);
    }

    /// Rank-based AUC of scores against binary truth.
    fn auc(pairs: &[(f64, bool)]) -> f64 {
        let mut pos = 0.0;
        let mut neg = 0.0;
        let mut won = 0.0;
        for &(s, t) in pairs {
            if t {
                pos += 1.0;
            } else {
                neg += 1.0;
            }
            let _ = s;
        }
        for &(sp, tp) in pairs {
            if !tp {
                continue;
            }
            for &(sn, tn) in pairs {
                if tn {
                    continue;
                }
                if sp > sn {
                    won += 1.0;
                } else if sp == sn {
                    won += 0.5;
                }
            }
        }
        won / (pos * neg)
    }

    #[test]
    fn synthetic_spike_columns_are_separable() {
        // planted spike columns at 0.7 against a uniform background; the
        // trained detector must rank spiked columns above clean ones
        let n = 8;
        let mut rng = Rng::seed_from_u64(14);
        let mut maps = Vec::new();
        for i in 0..40 {
            if i % 2 == 0 {
                let col = 1 + rng.next_below(n - 1);
                let mut labels = vec![0.0; n];
                labels[col] = 1.0;
                let mut m = spiked_map(n, col, 0.7);
                for v in m.data.iter_mut() {
                    *v = (*v + rng.next_f64() * 0.01).max(0.0);
                }
                maps.push(LabeledMap { map: m, labels });
            } else {
                let mut m = uniform_map(n);
                for v in m.data.iter_mut() {
                    *v += rng.next_f64() * 0.01;
                }
                maps.push(LabeledMap {
                    map: m,
                    labels: vec![0.0; n],
                });
            }
        }
        let (held_out, train) = maps.split_at(10);
        let mut det = Detector::new(DetectorConfig::new(n), &mut rng).unwrap();
        let log = train_detector_on_maps(&mut det, train, 40, 15).unwrap();
        assert!(log.epoch_loss.last().unwrap() < log.epoch_loss.first().unwrap());
        let mut pairs = Vec::new();
        for ex in held_out {
            let (scores, _) = det.score_map(&ex.map).unwrap();
            for j in 0..n {
                pairs.push((scores[j], ex.labels[j] == 1.0));
            }
        }
        let auc = auc(&pairs);
        assert!(auc >= 0.95, "held-out AUC {auc}");
    }
}
