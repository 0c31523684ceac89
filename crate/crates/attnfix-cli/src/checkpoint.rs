//! Checkpoint persistence: every artifact is an `ATPT` tensor file plus a
//! small JSON sidecar describing how to rebuild the object.

use std::collections::BTreeMap;
use std::path::Path;

use attnfix_core::data::TriggerSpec;
use attnfix_core::detector::{Detector, DetectorConfig};
use attnfix_core::hotpatch::BenignReference;
use attnfix_core::model::VictimModel;
use attnfix_core::rng::Rng;
use attnfix_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::atpt;
use crate::config::VictimConfig;
use crate::dataset::{read_json, write_json};
use crate::errors::{CliError, CliResult};

fn apply_params(
    entries: Vec<(String, Tensor)>,
    expected: &[String],
    mut set: impl FnMut(&str, Vec<f64>) -> attnfix_core::Result<()>,
) -> CliResult<()> {
    let mut by_name: BTreeMap<String, Tensor> = entries.into_iter().collect();
    for name in expected {
        let t = by_name.remove(name).ok_or_else(|| {
            CliError::Contract(format!("checkpoint missing parameter `{name}`"))
        })?;
        set(name, t.data)?;
    }
    if let Some((name, _)) = by_name.into_iter().next() {
        return Err(CliError::Contract(format!(
            "checkpoint has unknown parameter `{name}`"
        )));
    }
    Ok(())
}

pub fn save_victim(dir: &Path, victim: &VictimModel, victim_json: &VictimConfig) -> CliResult<()> {
    let mut entries = Vec::new();
    victim.for_each_param(|name, t| entries.push((name, t.clone())));
    atpt::write_tensors(&dir.join("victim.atpt"), &entries)?;
    write_json(&dir.join("victim.json"), victim_json)
}

pub fn load_victim(dir: &Path) -> CliResult<VictimModel> {
    let victim_json: VictimConfig = read_json(&dir.join("victim.json"))?;
    let cfg = victim_json.to_core()?;
    // seed irrelevant: every parameter is overwritten below
    let mut victim = VictimModel::new(cfg, &mut Rng::seed_from_u64(0))?;
    let mut expected = Vec::new();
    victim.for_each_param(|name, _| expected.push(name));
    let entries = atpt::read_tensors(&dir.join("victim.atpt"))?;
    apply_params(entries, &expected, |name, data| victim.set_param(name, data))?;
    Ok(victim)
}

#[derive(Debug, Serialize, Deserialize)]
struct DetectorJson {
    token_count: usize,
    tau: f64,
    lambda_contrast: f64,
}

pub fn save_detector(dir: &Path, detector: &Detector) -> CliResult<()> {
    let mut entries = Vec::new();
    detector.for_each_param(|name, t| entries.push((name, t.clone())));
    atpt::write_tensors(&dir.join("detector.atpt"), &entries)?;
    write_json(
        &dir.join("detector.json"),
        &DetectorJson {
            token_count: detector.cfg.token_count,
            tau: detector.cfg.tau,
            lambda_contrast: detector.cfg.lambda_contrast,
        },
    )
}

pub fn load_detector(dir: &Path) -> CliResult<Detector> {
    let json: DetectorJson = read_json(&dir.join("detector.json"))?;
    let cfg = DetectorConfig {
        token_count: json.token_count,
        tau: json.tau,
        lambda_contrast: json.lambda_contrast,
    };
    let mut detector = Detector::new(cfg, &mut Rng::seed_from_u64(0))?;
    let mut expected = Vec::new();
    detector.for_each_param(|name, _| expected.push(name));
    let entries = atpt::read_tensors(&dir.join("detector.atpt"))?;
    apply_params(entries, &expected, |name, data| {
        detector.set_param(name, data)
    })?;
    Ok(detector)
}

#[derive(Debug, Serialize, Deserialize)]
struct QrefJson {
    layers: usize,
    token_count: usize,
    sample_count: usize,
}

pub fn save_qref(dir: &Path, qref: &BenignReference) -> CliResult<()> {
    let entries: Vec<(String, Tensor)> = qref
        .per_layer
        .iter()
        .enumerate()
        .map(|(l, q)| (format!("q.{l}"), q.clone()))
        .collect();
    atpt::write_tensors(&dir.join("qref.atpt"), &entries)?;
    let n = qref.per_layer.first().map_or(0, |q| q.shape[0]);
    write_json(
        &dir.join("qref.json"),
        &QrefJson {
            layers: qref.per_layer.len(),
            token_count: n,
            sample_count: qref.sample_count,
        },
    )
}

pub fn load_qref(dir: &Path) -> CliResult<BenignReference> {
    let json: QrefJson = read_json(&dir.join("qref.json"))?;
    let entries = atpt::read_tensors(&dir.join("qref.atpt"))?;
    let mut per_layer = vec![None; json.layers];
    for (name, t) in entries {
        let idx: usize = name
            .strip_prefix("q.")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| {
                CliError::Contract(format!("unexpected tensor `{name}` in reference file"))
            })?;
        if idx >= json.layers {
            return Err(CliError::Contract(format!(
                "reference layer {idx} out of range"
            )));
        }
        per_layer[idx] = Some(t);
    }
    let per_layer: Option<Vec<Tensor>> = per_layer.into_iter().collect();
    let qref = BenignReference {
        per_layer: per_layer
            .ok_or_else(|| CliError::Contract("reference file missing a layer".into()))?,
        sample_count: json.sample_count,
    };
    qref.validate()?;
    Ok(qref)
}

#[derive(Debug, Serialize, Deserialize)]
struct TriggerJson {
    target_class: usize,
    blend_alpha: f64,
}

pub fn save_trigger(dir: &Path, name: &str, trigger: &TriggerSpec) -> CliResult<()> {
    atpt::write_tensors(
        &dir.join(format!("{name}.atpt")),
        &[
            ("mask".to_string(), trigger.mask.clone()),
            ("pattern".to_string(), trigger.pattern.clone()),
        ],
    )?;
    write_json(
        &dir.join(format!("{name}.json")),
        &TriggerJson {
            target_class: trigger.target_class,
            blend_alpha: trigger.blend_alpha,
        },
    )
}

pub fn load_trigger(dir: &Path, name: &str) -> CliResult<TriggerSpec> {
    let json: TriggerJson = read_json(&dir.join(format!("{name}.json")))?;
    let entries = atpt::read_tensors(&dir.join(format!("{name}.atpt")))?;
    let mut mask = None;
    let mut pattern = None;
    for (name, t) in entries {
        match name.as_str() {
            "mask" => mask = Some(t),
            "pattern" => pattern = Some(t),
            other => {
                return Err(CliError::Contract(format!(
                    "unexpected tensor `{other}` in trigger file"
                )))
            }
        }
    }
    let t = TriggerSpec {
        mask: mask.ok_or_else(|| CliError::Contract("trigger file missing mask".into()))?,
        pattern: pattern
            .ok_or_else(|| CliError::Contract("trigger file missing pattern".into()))?,
        target_class: json.target_class,
        blend_alpha: json.blend_alpha,
    };
    t.validate()?;
    Ok(t)
}
