//! Shared pipeline helpers: deterministic data regeneration and scenario
//! plumbing used by several subcommands.

use attnfix_core::data::{
    gen_glyphs, gen_tabular_biased, poison_dataset, GlyphSample, TabularSample, TriggerSpec,
};
use attnfix_core::model::{Modality, SampleInput};

use crate::config::{RunConfig, Scenario};
use crate::errors::{CliError, CliResult};

/// Patch side length of the image victim (pixels per token edge).
pub fn glyph_patch(cfg: &RunConfig) -> CliResult<usize> {
    match cfg.victim.to_core()?.modality {
        Modality::Image { patch, .. } => Ok(patch),
        Modality::Tabular { .. } => Err(CliError::Contract(
            "backdoor scenario needs an image victim".into(),
        )),
    }
}

/// The attacker's trigger as declared in the config.
pub fn planted_trigger(cfg: &RunConfig) -> CliResult<TriggerSpec> {
    let size = cfg.attack.trigger_size.ok_or_else(|| {
        CliError::Contract("backdoor scenario needs `attack.trigger_size`".into())
    })?;
    let target = cfg.attack.target_class.ok_or_else(|| {
        CliError::Contract("backdoor scenario needs `attack.target_class`".into())
    })?;
    Ok(TriggerSpec::corner_stamp(size, target))
}

pub fn bias_strength(cfg: &RunConfig) -> CliResult<f64> {
    cfg.attack.bias_strength.ok_or_else(|| {
        CliError::Contract("unfairness scenario needs `attack.bias_strength`".into())
    })
}

pub fn glyph_train(cfg: &RunConfig) -> CliResult<Vec<GlyphSample>> {
    Ok(gen_glyphs(cfg.data.train, cfg.data.seed_train)?)
}

pub fn glyph_test(cfg: &RunConfig) -> CliResult<Vec<GlyphSample>> {
    Ok(gen_glyphs(cfg.data.test, cfg.data.seed_test)?)
}

pub fn glyph_train_poisoned(cfg: &RunConfig) -> CliResult<Vec<GlyphSample>> {
    let train = glyph_train(cfg)?;
    let trigger = planted_trigger(cfg)?;
    let rate = cfg
        .attack
        .poison_rate
        .ok_or_else(|| CliError::Contract("backdoor scenario needs `attack.poison_rate`".into()))?;
    let seed = cfg
        .attack
        .seed_poison
        .ok_or_else(|| CliError::Contract("backdoor scenario needs `attack.seed_poison`".into()))?;
    Ok(poison_dataset(&train, &trigger, rate, glyph_patch(cfg)?, seed)?)
}

pub fn tabular_train(cfg: &RunConfig) -> CliResult<Vec<TabularSample>> {
    Ok(gen_tabular_biased(
        cfg.data.train,
        bias_strength(cfg)?,
        cfg.data.seed_train,
    )?)
}

pub fn tabular_test(cfg: &RunConfig) -> CliResult<Vec<TabularSample>> {
    Ok(gen_tabular_biased(
        cfg.data.test,
        bias_strength(cfg)?,
        cfg.data.seed_test,
    )?)
}

pub fn glyph_inputs(data: &[GlyphSample]) -> Vec<(SampleInput<'_>, usize)> {
    data.iter()
        .map(|s| (SampleInput::Image(&s.image), s.label))
        .collect()
}

pub fn tabular_inputs(data: &[TabularSample]) -> Vec<(SampleInput<'_>, usize)> {
    data.iter()
        .map(|s| (SampleInput::Tabular(&s.features), s.label))
        .collect()
}

pub fn require_scenario(cfg: &RunConfig, want: Scenario, cmd: &str) -> CliResult<()> {
    if cfg.scenario != want {
        return Err(CliError::Contract(format!(
            "`{cmd}` applies only to the {} scenario",
            match want {
                Scenario::Backdoor => "backdoor",
                Scenario::Unfairness => "unfairness",
            }
        )));
    }
    Ok(())
}
