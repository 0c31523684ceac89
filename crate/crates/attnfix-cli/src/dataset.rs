//! JSON (de)serialization of datasets and debugging sets.

use std::fs;
use std::path::Path;

use attnfix_core::data::{
    DebugKind, DebugPair, DebuggingSet, GlyphSample, TabularSample, GLYPH_SIDE,
};
use attnfix_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::errors::{CliError, CliResult, PathCtx};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlyphSampleJson {
    pub label: usize,
    pub poisoned: bool,
    pub trigger_patch_ids: Vec<usize>,
    pub pixels: Vec<f64>,
}

impl GlyphSampleJson {
    pub fn from_core(s: &GlyphSample) -> Self {
        GlyphSampleJson {
            label: s.label,
            poisoned: s.poisoned,
            trigger_patch_ids: s.trigger_patch_ids.clone(),
            pixels: s.image.data.clone(),
        }
    }

    pub fn to_core(&self) -> CliResult<GlyphSample> {
        let image = Tensor::new(vec![1, GLYPH_SIDE, GLYPH_SIDE], self.pixels.clone())?;
        Ok(GlyphSample {
            image,
            label: self.label,
            poisoned: self.poisoned,
            trigger_patch_ids: self.trigger_patch_ids.clone(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TabularSampleJson {
    pub features: Vec<usize>,
    pub protected_index: usize,
    pub label: usize,
}

impl TabularSampleJson {
    pub fn from_core(s: &TabularSample) -> Self {
        TabularSampleJson {
            features: s.features.clone(),
            protected_index: s.protected_index,
            label: s.label,
        }
    }

    pub fn to_core(&self) -> TabularSample {
        TabularSample {
            features: self.features.clone(),
            protected_index: self.protected_index,
            label: self.label,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DebugPairJson<S> {
    pub clean: S,
    pub compromised: S,
    pub anomalous_columns: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DebugsetJson<S> {
    pub kind: String,
    pub requested: usize,
    pub pairs: Vec<DebugPairJson<S>>,
    pub clean_pool: Vec<S>,
}

fn kind_str(kind: &DebugKind) -> &'static str {
    match kind {
        DebugKind::Backdoor => "backdoor",
        DebugKind::Unfairness => "unfairness",
    }
}

fn kind_from_str(s: &str) -> CliResult<DebugKind> {
    match s {
        "backdoor" => Ok(DebugKind::Backdoor),
        "unfairness" => Ok(DebugKind::Unfairness),
        other => Err(CliError::Contract(format!("unknown debugset kind `{other}`"))),
    }
}

pub fn save_glyph_debugset(path: &Path, ds: &DebuggingSet<GlyphSample>) -> CliResult<()> {
    let json = DebugsetJson {
        kind: kind_str(&ds.kind).to_string(),
        requested: ds.requested,
        pairs: ds
            .pairs
            .iter()
            .map(|p| DebugPairJson {
                clean: GlyphSampleJson::from_core(&p.clean),
                compromised: GlyphSampleJson::from_core(&p.compromised),
                anomalous_columns: p.anomalous_columns.clone(),
            })
            .collect(),
        clean_pool: ds.clean_pool.iter().map(GlyphSampleJson::from_core).collect(),
    };
    write_json(path, &json)
}

pub fn load_glyph_debugset(path: &Path) -> CliResult<DebuggingSet<GlyphSample>> {
    let json: DebugsetJson<GlyphSampleJson> = read_json(path)?;
    let mut pairs = Vec::with_capacity(json.pairs.len());
    for p in &json.pairs {
        pairs.push(DebugPair {
            clean: p.clean.to_core()?,
            compromised: p.compromised.to_core()?,
            anomalous_columns: p.anomalous_columns.clone(),
        });
    }
    let mut clean_pool = Vec::with_capacity(json.clean_pool.len());
    for s in &json.clean_pool {
        clean_pool.push(s.to_core()?);
    }
    Ok(DebuggingSet {
        pairs,
        kind: kind_from_str(&json.kind)?,
        clean_pool,
        requested: json.requested,
    })
}

pub fn save_tabular_debugset(path: &Path, ds: &DebuggingSet<TabularSample>) -> CliResult<()> {
    let json = DebugsetJson {
        kind: kind_str(&ds.kind).to_string(),
        requested: ds.requested,
        pairs: ds
            .pairs
            .iter()
            .map(|p| DebugPairJson {
                clean: TabularSampleJson::from_core(&p.clean),
                compromised: TabularSampleJson::from_core(&p.compromised),
                anomalous_columns: p.anomalous_columns.clone(),
            })
            .collect(),
        clean_pool: ds
            .clean_pool
            .iter()
            .map(TabularSampleJson::from_core)
            .collect(),
    };
    write_json(path, &json)
}

pub fn load_tabular_debugset(path: &Path) -> CliResult<DebuggingSet<TabularSample>> {
    let json: DebugsetJson<TabularSampleJson> = read_json(path)?;
    Ok(DebuggingSet {
        pairs: json
            .pairs
            .iter()
            .map(|p| DebugPair {
                clean: p.clean.to_core(),
                compromised: p.compromised.to_core(),
                anomalous_columns: p.anomalous_columns.clone(),
            })
            .collect(),
        kind: kind_from_str(&json.kind)?,
        clean_pool: json.clean_pool.iter().map(|s| s.to_core()).collect(),
        requested: json.requested,
    })
}

pub fn save_glyph_dataset(path: &Path, data: &[GlyphSample]) -> CliResult<()> {
    let json: Vec<GlyphSampleJson> = data.iter().map(GlyphSampleJson::from_core).collect();
    write_json(path, &json)
}

pub fn save_tabular_dataset(path: &Path, data: &[TabularSample]) -> CliResult<()> {
    let json: Vec<TabularSampleJson> = data.iter().map(TabularSampleJson::from_core).collect();
    write_json(path, &json)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).at(path)?;
    fs::write(path, text).at(path)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).at(path)?;
    serde_json::from_str(&text).at(path)
}
