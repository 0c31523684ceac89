//! Subcommand implementations. Every command reads the JSON run config,
//! regenerates seeded data where needed, and persists artifacts under the
//! configured output directory.

use std::time::Instant;

use attnfix_core::data::{
    apply_trigger, build_backdoor_debugset, build_bias_debugset, gen_glyphs, gen_tabular_biased,
    is_divergent, GlyphSample, TabularSample, PROTECTED_VALUES,
};
use attnfix_core::detector::{
    collect_training_maps, train_detector, DetectorConfig, DETECTOR_EPOCHS,
};
use attnfix_core::hotpatch::{build_benign_reference, hotfix_predict};
use attnfix_core::metrics::{
    eval_accuracy, eval_asr, eval_detector_strict, eval_uf, predict_wo_detector,
    predict_wo_rescale,
};
use attnfix_core::model::{SampleInput, VictimModel};
use attnfix_core::rng::Rng;
use serde_json::json;

use crate::checkpoint;
use crate::config::{RunConfig, Scenario};
use crate::dataset;
use crate::errors::{CliError, CliResult};
use crate::pipeline::*;
use crate::report::{fmt_f, write_csv, write_jsonl};

/// Boxed predictor used by the ablation variants.
type PredictFn<'a> = Box<dyn FnMut(&SampleInput) -> attnfix_core::Result<usize> + 'a>;

pub fn gen_data(cfg: &RunConfig) -> CliResult<()> {
    cfg.ensure_dirs()?;
    match cfg.scenario {
        Scenario::Backdoor => {
            let train = glyph_train(cfg)?;
            let test = glyph_test(cfg)?;
            dataset::save_glyph_dataset(&cfg.dir_debugset().join("train.json"), &train)?;
            dataset::save_glyph_dataset(&cfg.dir_debugset().join("test.json"), &test)?;
            println!("wrote {} train / {} test glyph samples", train.len(), test.len());
        }
        Scenario::Unfairness => {
            let train = tabular_train(cfg)?;
            let test = tabular_test(cfg)?;
            dataset::save_tabular_dataset(&cfg.dir_debugset().join("train.json"), &train)?;
            dataset::save_tabular_dataset(&cfg.dir_debugset().join("test.json"), &test)?;
            println!(
                "wrote {} train / {} test tabular samples",
                train.len(),
                test.len()
            );
        }
    }
    Ok(())
}

pub fn poison(cfg: &RunConfig) -> CliResult<()> {
    require_scenario(cfg, Scenario::Backdoor, "poison")?;
    cfg.ensure_dirs()?;
    let poisoned = glyph_train_poisoned(cfg)?;
    let trigger = planted_trigger(cfg)?;
    dataset::save_glyph_dataset(&cfg.dir_debugset().join("train_poisoned.json"), &poisoned)?;
    checkpoint::save_trigger(&cfg.dir_checkpoints(), "trigger_planted", &trigger)?;
    let hits = poisoned.iter().filter(|s| s.poisoned).count();
    println!(
        "poisoned {hits}/{} samples toward class {}",
        poisoned.len(),
        trigger.target_class
    );
    Ok(())
}

pub fn train_victim(cfg: &RunConfig) -> CliResult<()> {
    cfg.ensure_dirs()?;
    let core_cfg = cfg.victim.to_core()?;
    let mut victim = VictimModel::new(core_cfg, &mut Rng::seed_from_u64(cfg.base_seed()))?;
    let log = match cfg.scenario {
        Scenario::Backdoor => {
            let poisoned = glyph_train_poisoned(cfg)?;
            let data = glyph_inputs(&poisoned);
            victim.train(
                &data,
                cfg.train.epochs,
                cfg.train.batch,
                cfg.train.lr,
                cfg.seed_victim_train(),
            )?
        }
        Scenario::Unfairness => {
            let train = tabular_train(cfg)?;
            let data = tabular_inputs(&train);
            victim.train(
                &data,
                cfg.train.epochs,
                cfg.train.batch,
                cfg.train.lr,
                cfg.seed_victim_train(),
            )?
        }
    };
    checkpoint::save_victim(&cfg.dir_checkpoints(), &victim, &cfg.victim)?;
    let rows: Vec<serde_json::Value> = log
        .epoch_loss
        .iter()
        .enumerate()
        .map(|(i, l)| json!({"epoch": i, "loss": l}))
        .collect();
    write_jsonl(&cfg.dir_reports().join("train_victim.jsonl"), &rows)?;
    let acc = match cfg.scenario {
        Scenario::Backdoor => {
            let test = glyph_test(cfg)?;
            eval_accuracy(|x| victim.predict(x), &glyph_inputs(&test))?
        }
        Scenario::Unfairness => {
            let test = tabular_test(cfg)?;
            eval_accuracy(|x| victim.predict(x), &tabular_inputs(&test))?
        }
    };
    println!(
        "trained victim: final loss {:.4}, clean test accuracy {acc:.3}",
        log.epoch_loss.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn invert_trigger(cfg: &RunConfig) -> CliResult<()> {
    require_scenario(cfg, Scenario::Backdoor, "invert-trigger")?;
    cfg.ensure_dirs()?;
    let victim = checkpoint::load_victim(&cfg.dir_checkpoints())?;
    let pool = gen_glyphs(cfg.data.inversion_pool, cfg.data.seed_inversion_pool)?;
    let result = attnfix_core::inversion::identify_target_class(
        &victim,
        &pool,
        cfg.attack.lambda_sparsity,
        cfg.attack.inversion_steps,
        cfg.seed_inversion(),
    )?;
    let trigger = result.per_class[result.chosen_target].to_trigger(result.chosen_target)?;
    checkpoint::save_trigger(&cfg.dir_checkpoints(), "trigger_inverted", &trigger)?;
    let mut rows = Vec::new();
    for (c, inv) in result.per_class.iter().enumerate() {
        rows.push(json!({
            "class": c,
            "l1_mass": inv.l1_mass,
            "flip_rate": inv.flip_rate,
            "final_loss": inv.final_loss,
            "chosen": c == result.chosen_target,
        }));
        let side = inv.mask.shape[0];
        let csv_rows: Vec<Vec<String>> = inv
            .mask
            .data
            .chunks(side)
            .map(|row| row.iter().map(|v| fmt_f(*v)).collect())
            .collect();
        let header: Vec<String> = (0..side).map(|i| format!("x{i}")).collect();
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        write_csv(
            &cfg.dir_plots().join(format!("inversion_mask_{c}.csv")),
            &header_refs,
            &csv_rows,
        )?;
    }
    rows.push(json!({
        "chosen_target": result.chosen_target,
        "low_confidence": result.low_confidence,
    }));
    write_jsonl(&cfg.dir_reports().join("inversion.jsonl"), &rows)?;
    println!(
        "inverted trigger: target class {}, low_confidence {}",
        result.chosen_target, result.low_confidence
    );
    Ok(())
}

pub fn build_debugset(cfg: &RunConfig) -> CliResult<()> {
    cfg.ensure_dirs()?;
    let victim = checkpoint::load_victim(&cfg.dir_checkpoints())?;
    match cfg.scenario {
        Scenario::Backdoor => {
            let trigger = checkpoint::load_trigger(&cfg.dir_checkpoints(), "trigger_inverted")?;
            let pool = gen_glyphs(cfg.data.pool, cfg.data.seed_pool)?;
            let ds = build_backdoor_debugset(
                &victim,
                &pool,
                &trigger,
                cfg.data.debug_pairs,
                glyph_patch(cfg)?,
            )?;
            dataset::save_glyph_debugset(&cfg.dir_debugset().join("debugset.json"), &ds)?;
            println!(
                "debugging set: {} pairs, {} clean pool samples, partial {}",
                ds.pairs.len(),
                ds.clean_pool.len(),
                ds.is_partial()
            );
        }
        Scenario::Unfairness => {
            let pool = gen_tabular_biased(cfg.data.pool, bias_strength(cfg)?, cfg.data.seed_pool)?;
            let ds = build_bias_debugset(&victim, &pool, &PROTECTED_VALUES)?;
            dataset::save_tabular_debugset(&cfg.dir_debugset().join("debugset.json"), &ds)?;
            println!(
                "debugging set: {} pairs, {} clean pool samples",
                ds.pairs.len(),
                ds.clean_pool.len()
            );
        }
    }
    Ok(())
}

pub fn train_detector_cmd(cfg: &RunConfig) -> CliResult<()> {
    cfg.ensure_dirs()?;
    let victim = checkpoint::load_victim(&cfg.dir_checkpoints())?;
    let mut dcfg = DetectorConfig::new(victim.cfg.token_count());
    dcfg.tau = cfg.tau;
    dcfg.lambda_contrast = cfg.detector.lambda_contrast;
    let (detector, log) = match cfg.scenario {
        Scenario::Backdoor => {
            let ds = dataset::load_glyph_debugset(&cfg.dir_debugset().join("debugset.json"))?;
            train_detector(
                &victim,
                &ds,
                dcfg,
                DETECTOR_EPOCHS,
                cfg.detector.seed,
                |s: &GlyphSample| SampleInput::Image(&s.image),
            )?
        }
        Scenario::Unfairness => {
            let ds = dataset::load_tabular_debugset(&cfg.dir_debugset().join("debugset.json"))?;
            train_detector(
                &victim,
                &ds,
                dcfg,
                DETECTOR_EPOCHS,
                cfg.detector.seed,
                |s: &TabularSample| SampleInput::Tabular(&s.features),
            )?
        }
    };
    checkpoint::save_detector(&cfg.dir_checkpoints(), &detector)?;
    let rows: Vec<serde_json::Value> = log
        .epoch_loss
        .iter()
        .enumerate()
        .map(|(i, l)| json!({"epoch": i, "loss": l}))
        .collect();
    write_jsonl(&cfg.dir_reports().join("train_detector.jsonl"), &rows)?;
    println!(
        "trained detector: loss {:.4} -> {:.4}",
        log.epoch_loss.first().copied().unwrap_or(f64::NAN),
        log.epoch_loss.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn build_qref(cfg: &RunConfig) -> CliResult<()> {
    cfg.ensure_dirs()?;
    let victim = checkpoint::load_victim(&cfg.dir_checkpoints())?;
    let qref = match cfg.scenario {
        Scenario::Backdoor => {
            let ds = dataset::load_glyph_debugset(&cfg.dir_debugset().join("debugset.json"))?;
            build_benign_reference(
                &victim,
                ds.clean_pool.iter().map(|s| SampleInput::Image(&s.image)),
            )?
        }
        Scenario::Unfairness => {
            let ds = dataset::load_tabular_debugset(&cfg.dir_debugset().join("debugset.json"))?;
            build_benign_reference(
                &victim,
                ds.clean_pool.iter().map(|s| SampleInput::Tabular(&s.features)),
            )?
        }
    };
    checkpoint::save_qref(&cfg.dir_checkpoints(), &qref)?;
    println!(
        "benign reference built from {} clean samples",
        qref.sample_count
    );
    Ok(())
}

pub fn evaluate(cfg: &RunConfig) -> CliResult<()> {
    cfg.ensure_dirs()?;
    let victim = checkpoint::load_victim(&cfg.dir_checkpoints())?;
    let detector = checkpoint::load_detector(&cfg.dir_checkpoints())?;
    let qref = checkpoint::load_qref(&cfg.dir_checkpoints())?;
    let mode = cfg.mode.to_core();
    let tau = cfg.tau;
    let mut rows = Vec::new();
    let mut main_csv = Vec::new();

    match cfg.scenario {
        Scenario::Backdoor => {
            let test = glyph_test(cfg)?;
            let planted = planted_trigger(cfg)?;
            let patch = glyph_patch(cfg)?;
            let triggered: Vec<GlyphSample> = test
                .iter()
                .map(|s| apply_trigger(s, &planted, patch))
                .collect::<attnfix_core::Result<_>>()?;
            let clean_inputs = glyph_inputs(&test);
            let trig_inputs = glyph_inputs(&triggered);
            let acc_before = eval_accuracy(|x| victim.predict(x), &clean_inputs)?;
            let asr_before =
                eval_asr(|x| victim.predict(x), &trig_inputs, planted.target_class)?;
            let acc_after = eval_accuracy(
                |x| hotfix_predict(x, &victim, &detector, &qref, tau, mode).map(|r| r.0),
                &clean_inputs,
            )?;
            let asr_after = eval_asr(
                |x| hotfix_predict(x, &victim, &detector, &qref, tau, mode).map(|r| r.0),
                &trig_inputs,
                planted.target_class,
            )?;
            for (k, v) in [
                ("acc_before", acc_before),
                ("acc_after", acc_after),
                ("asr_before", asr_before),
                ("asr_after", asr_after),
            ] {
                rows.push(json!({"table": "main", "metric": k, "value": v}));
                main_csv.push(vec![k.to_string(), fmt_f(v)]);
            }
        }
        Scenario::Unfairness => {
            let test = tabular_test(cfg)?;
            let inputs = tabular_inputs(&test);
            let acc_before = eval_accuracy(|x| victim.predict(x), &inputs)?;
            let uf_before = eval_uf(|x| victim.predict(x), &test, &PROTECTED_VALUES)?;
            let acc_after = eval_accuracy(
                |x| hotfix_predict(x, &victim, &detector, &qref, tau, mode).map(|r| r.0),
                &inputs,
            )?;
            let uf_after = eval_uf(
                |x| hotfix_predict(x, &victim, &detector, &qref, tau, mode).map(|r| r.0),
                &test,
                &PROTECTED_VALUES,
            )?;
            for (k, v) in [
                ("acc_before", acc_before),
                ("acc_after", acc_after),
                ("uf_before", uf_before),
                ("uf_after", uf_after),
            ] {
                rows.push(json!({"table": "main", "metric": k, "value": v}));
                main_csv.push(vec![k.to_string(), fmt_f(v)]);
            }
        }
    }

    // held-out detector evaluation
    let metrics = detector_eval(cfg, &victim, &detector)?;
    rows.push(json!({
        "table": "detector",
        "precision": metrics.precision,
        "recall": metrics.recall,
        "f1": metrics.f1,
        "fpr": metrics.fpr,
        "fnr": metrics.fnr,
        "tau": tau,
    }));
    write_jsonl(&cfg.dir_reports().join("metrics.jsonl"), &rows)?;
    write_csv(
        &cfg.dir_plots().join("main.csv"),
        &["metric", "value"],
        &main_csv,
    )?;
    write_csv(
        &cfg.dir_plots().join("detector.csv"),
        &["precision", "recall", "f1", "fpr", "fnr", "tau"],
        &[vec![
            fmt_f(metrics.precision),
            fmt_f(metrics.recall),
            fmt_f(metrics.f1),
            fmt_f(metrics.fpr),
            fmt_f(metrics.fnr),
            fmt_f(tau),
        ]],
    )?;
    for row in &rows {
        println!("{row}");
    }
    Ok(())
}

fn detector_eval(
    cfg: &RunConfig,
    victim: &VictimModel,
    detector: &attnfix_core::detector::Detector,
) -> CliResult<attnfix_core::metrics::DetectorMetrics> {
    let maps = match cfg.scenario {
        Scenario::Backdoor => {
            let trigger = checkpoint::load_trigger(&cfg.dir_checkpoints(), "trigger_inverted")?;
            let pool = gen_glyphs(cfg.data.eval_pool, cfg.data.seed_eval)?;
            let ds = build_backdoor_debugset(
                victim,
                &pool,
                &trigger,
                cfg.data.eval_pairs,
                glyph_patch(cfg)?,
            )?;
            collect_training_maps(victim, &ds, |s: &GlyphSample| SampleInput::Image(&s.image))?
        }
        Scenario::Unfairness => {
            let pool =
                gen_tabular_biased(cfg.data.eval_pool, bias_strength(cfg)?, cfg.data.seed_eval)?;
            let ds = build_bias_debugset(victim, &pool, &PROTECTED_VALUES)?;
            collect_training_maps(victim, &ds, |s: &TabularSample| {
                SampleInput::Tabular(&s.features)
            })?
        }
    };
    Ok(eval_detector_strict(detector, &maps, cfg.tau)?)
}

pub fn ablate(cfg: &RunConfig) -> CliResult<()> {
    cfg.ensure_dirs()?;
    let victim = checkpoint::load_victim(&cfg.dir_checkpoints())?;
    let detector = checkpoint::load_detector(&cfg.dir_checkpoints())?;
    let qref = checkpoint::load_qref(&cfg.dir_checkpoints())?;
    let mode = cfg.mode.to_core();
    let tau = cfg.tau;
    let mut rows = Vec::new();
    let mut csv = Vec::new();
    match cfg.scenario {
        Scenario::Backdoor => {
            let test = glyph_test(cfg)?;
            let planted = planted_trigger(cfg)?;
            let patch = glyph_patch(cfg)?;
            let triggered: Vec<GlyphSample> = test
                .iter()
                .map(|s| apply_trigger(s, &planted, patch))
                .collect::<attnfix_core::Result<_>>()?;
            let clean_inputs = glyph_inputs(&test);
            let trig_inputs = glyph_inputs(&triggered);
            let mut rng = Rng::seed_from_u64(cfg.seed_ablation());
            let variants: [(&str, PredictFn); 3] = [
                (
                    "full",
                    Box::new(|x: &SampleInput| {
                        hotfix_predict(x, &victim, &detector, &qref, tau, mode).map(|r| r.0)
                    }),
                ),
                (
                    "wo_det",
                    Box::new(|x: &SampleInput| predict_wo_detector(x, &victim, &qref, &mut rng)),
                ),
                (
                    "wo_rec",
                    Box::new(|x: &SampleInput| {
                        predict_wo_rescale(x, &victim, &detector, &qref, tau)
                    }),
                ),
            ];
            for (name, mut predict) in variants {
                let asr = eval_asr(&mut predict, &trig_inputs, planted.target_class)?;
                let acc = eval_accuracy(&mut predict, &clean_inputs)?;
                rows.push(json!({"variant": name, "asr": asr, "acc": acc}));
                csv.push(vec![name.to_string(), fmt_f(asr), fmt_f(acc)]);
            }
            write_csv(
                &cfg.dir_plots().join("ablation.csv"),
                &["variant", "asr", "acc"],
                &csv,
            )?;
        }
        Scenario::Unfairness => {
            let test = tabular_test(cfg)?;
            let inputs = tabular_inputs(&test);
            let mut rng = Rng::seed_from_u64(cfg.seed_ablation());
            let variants: [(&str, PredictFn); 3] = [
                (
                    "full",
                    Box::new(|x: &SampleInput| {
                        hotfix_predict(x, &victim, &detector, &qref, tau, mode).map(|r| r.0)
                    }),
                ),
                (
                    "wo_det",
                    Box::new(|x: &SampleInput| predict_wo_detector(x, &victim, &qref, &mut rng)),
                ),
                (
                    "wo_rec",
                    Box::new(|x: &SampleInput| {
                        predict_wo_rescale(x, &victim, &detector, &qref, tau)
                    }),
                ),
            ];
            for (name, mut predict) in variants {
                let uf = eval_uf(&mut predict, &test, &PROTECTED_VALUES)?;
                let acc = eval_accuracy(&mut predict, &inputs)?;
                rows.push(json!({"variant": name, "uf": uf, "acc": acc}));
                csv.push(vec![name.to_string(), fmt_f(uf), fmt_f(acc)]);
            }
            write_csv(
                &cfg.dir_plots().join("ablation.csv"),
                &["variant", "uf", "acc"],
                &csv,
            )?;
        }
    }
    write_jsonl(&cfg.dir_reports().join("ablation.jsonl"), &rows)?;
    for row in &rows {
        println!("{row}");
    }
    Ok(())
}

pub fn probe_zero_column(cfg: &RunConfig) -> CliResult<()> {
    cfg.ensure_dirs()?;
    let victim = checkpoint::load_victim(&cfg.dir_checkpoints())?;
    let n = victim.cfg.token_count();
    let mut rows = Vec::new();
    let mut csv = Vec::new();
    match cfg.scenario {
        Scenario::Backdoor => {
            let test = glyph_test(cfg)?;
            let planted = planted_trigger(cfg)?;
            let patch = glyph_patch(cfg)?;
            let triggered: Vec<GlyphSample> = test
                .iter()
                .map(|s| apply_trigger(s, &planted, patch))
                .collect::<attnfix_core::Result<_>>()?;
            // compromised samples: attack currently succeeding
            let alive: Vec<&GlyphSample> = triggered
                .iter()
                .filter(|s| {
                    s.label != planted.target_class
                        && victim
                            .predict(&SampleInput::Image(&s.image))
                            .map(|p| p == planted.target_class)
                            .unwrap_or(false)
                })
                .take(50)
                .collect();
            if alive.is_empty() {
                return Err(CliError::Contract(
                    "no successful attacks to probe; is the victim backdoored?".into(),
                ));
            }
            let trigger_cols = alive[0].trigger_patch_ids.clone();
            let inputs: Vec<SampleInput> =
                alive.iter().map(|s| SampleInput::Image(&s.image)).collect();
            for col in 0..n {
                let keep = victim.zero_column_probe(&inputs, col)?;
                let is_trigger = trigger_cols.contains(&col);
                rows.push(json!({"column": col, "keep_rate": keep, "trigger": is_trigger}));
                csv.push(vec![col.to_string(), fmt_f(keep), is_trigger.to_string()]);
            }
        }
        Scenario::Unfairness => {
            let test = tabular_test(cfg)?;
            let divergent: Vec<&TabularSample> = test
                .iter()
                .filter(|s| is_divergent(&victim, s, &PROTECTED_VALUES).unwrap_or(false))
                .take(50)
                .collect();
            if divergent.is_empty() {
                return Err(CliError::Contract(
                    "no divergent samples to probe; is the victim biased?".into(),
                ));
            }
            let protected_col = divergent[0].protected_index + 1;
            let inputs: Vec<SampleInput> = divergent
                .iter()
                .map(|s| SampleInput::Tabular(&s.features))
                .collect();
            for col in 0..n {
                let keep = victim.zero_column_probe(&inputs, col)?;
                let is_protected = col == protected_col;
                rows.push(json!({"column": col, "keep_rate": keep, "protected": is_protected}));
                csv.push(vec![col.to_string(), fmt_f(keep), is_protected.to_string()]);
            }
        }
    }
    write_jsonl(&cfg.dir_reports().join("zero_column.jsonl"), &rows)?;
    write_csv(
        &cfg.dir_plots().join("zero_column.csv"),
        &["column", "keep_rate", "special"],
        &csv,
    )?;
    for row in &rows {
        println!("{row}");
    }
    Ok(())
}

pub fn bench_latency(cfg: &RunConfig) -> CliResult<()> {
    cfg.ensure_dirs()?;
    let victim = checkpoint::load_victim(&cfg.dir_checkpoints())?;
    let detector = checkpoint::load_detector(&cfg.dir_checkpoints())?;
    let qref = checkpoint::load_qref(&cfg.dir_checkpoints())?;
    let mode = cfg.mode.to_core();
    let tau = cfg.tau;

    // Measurement closures share one input list; medians over >= 1000
    // single-sample inferences after warm-up.
    let glyph_store;
    let tabular_store;
    let inputs: Vec<SampleInput> = match cfg.scenario {
        Scenario::Backdoor => {
            glyph_store = glyph_test(cfg)?;
            glyph_store
                .iter()
                .map(|s| SampleInput::Image(&s.image))
                .collect()
        }
        Scenario::Unfairness => {
            tabular_store = tabular_test(cfg)?;
            tabular_store
                .iter()
                .map(|s| SampleInput::Tabular(&s.features))
                .collect()
        }
    };
    let runs = 1000usize.max(inputs.len());
    type TimedFn<'a> = Box<dyn FnMut(&SampleInput) -> CliResult<()> + 'a>;
    let measure = |mut f: TimedFn| -> CliResult<f64> {
        for input in inputs.iter().take(50) {
            f(input)?;
        }
        let mut times = Vec::with_capacity(runs);
        for i in 0..runs {
            let input = &inputs[i % inputs.len()];
            let t0 = Instant::now();
            f(input)?;
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        times.sort_by(f64::total_cmp);
        Ok(times[times.len() / 2])
    };
    let base_ms = measure(Box::new(|x| {
        victim.forward(x)?;
        Ok(())
    }))?;
    let detect_only_ms = measure(Box::new(|x| {
        let (_, trace) = victim.forward(x)?;
        detector.score_trace(&trace)?;
        Ok(())
    }))?;
    let detect_and_patch_ms = measure(Box::new(|x| {
        hotfix_predict(x, &victim, &detector, &qref, tau, mode)?;
        Ok(())
    }))?;
    let row = json!({
        "base_ms": base_ms,
        "detect_only_ms": detect_only_ms,
        "detect_and_patch_ms": detect_and_patch_ms,
        "runs": runs,
    });
    write_jsonl(&cfg.dir_reports().join("latency.jsonl"), std::slice::from_ref(&row))?;
    write_csv(
        &cfg.dir_plots().join("latency.csv"),
        &["base_ms", "detect_only_ms", "detect_and_patch_ms"],
        &[vec![
            fmt_f(base_ms),
            fmt_f(detect_only_ms),
            fmt_f(detect_and_patch_ms),
        ]],
    )?;
    println!("{row}");
    Ok(())
}
