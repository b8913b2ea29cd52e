//! Subcommand implementations. Each command reads and writes only its
//! declared files and stamps every output with the tool version, run
//! seed, and a digest of the effective configuration.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

use ctp_core::corpus::{balance, chronological_split, synthesize_description};
use ctp_core::embed::{embed_corpus, load_matrix, save_matrix, FeatureVector};
use ctp_core::eval::{
    confusion, corpus_stats, drop_feature_importance, metrics as compute_metrics, per_phase_report,
    EvalError,
};
use ctp_core::forest::{load as load_forest, predict, save as save_forest, RFDataset};
use ctp_core::formats::{config_digest, read_jsonl, write_jsonl, FileMeta};
use ctp_core::linkage::{label_corpus, LabelValue, LabeledTrial};
use ctp_core::llmgate::{
    predict_batch, submit_finetune, validate_export, wait_for_completion, write_export,
    ChatService, HttpChatService, ReplayStub,
};
use ctp_core::registry::{
    parse_drug_tracker, parse_trial_records, validate_record, ParseError, TrialRecord,
};

use crate::config::PipelineConfig;
use crate::records::{DescriptionRecord, PredictionRecord};
use crate::synth::{generate, SyntheticSpec};

fn reader(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn writer(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn read_items<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_jsonl(reader(path)?)
        .map_err(|(line, e)| anyhow::anyhow!("{} line {line}: {e}", path.display()))
}

/// Metadata header for an output of `command` under this configuration.
fn meta_for(config: &PipelineConfig, command: &str, args: &impl Serialize) -> FileMeta {
    let digest = config_digest(&serde_json::json!({
        "command": command,
        "config": config,
        "args": args,
    }));
    FileMeta::new(Some(config.seed), digest)
}

fn report_parse_errors(source: &str, errors: &[ParseError]) {
    for error in errors.iter().take(20) {
        log::warn!("{source}: {error}");
    }
    if errors.len() > 20 {
        log::warn!("{source}: {} further parse errors", errors.len() - 20);
    }
}

pub fn gen_synthetic(config: &PipelineConfig, spec: &SyntheticSpec, out_dir: &Path) -> Result<()> {
    let corpus = generate(spec)?;
    let meta = meta_for(config, "gen-synthetic", spec);
    std::fs::create_dir_all(out_dir)?;
    let trials_path = out_dir.join("trials.jsonl");
    let tracker_path = out_dir.join("tracker.jsonl");
    write_jsonl(writer(&trials_path)?, &meta, &corpus.trials)?;
    write_jsonl(writer(&tracker_path)?, &meta, &corpus.tracker)?;
    println!(
        "wrote {} trials to {} and {} tracker records to {}",
        corpus.trials.len(),
        trials_path.display(),
        corpus.tracker.len(),
        tracker_path.display()
    );
    Ok(())
}

pub fn ingest(
    config: &PipelineConfig,
    trials_path: &Path,
    tracker_path: &Path,
    out_dir: &Path,
) -> Result<()> {
    let (trials, trial_errors) = parse_trial_records(reader(trials_path)?);
    let (tracker, tracker_errors) = parse_drug_tracker(reader(tracker_path)?);
    report_parse_errors("trials", &trial_errors);
    report_parse_errors("tracker", &tracker_errors);

    let reports: Vec<_> = trials.iter().map(validate_record).collect();
    let usable = reports
        .iter()
        .filter(|r| r.quality == ctp_core::registry::RecordQuality::Usable)
        .count();

    std::fs::create_dir_all(out_dir)?;
    let meta = meta_for(
        config,
        "ingest",
        &serde_json::json!({
            "trials": trials_path.display().to_string(),
            "tracker": tracker_path.display().to_string(),
        }),
    );
    write_jsonl(
        writer(&out_dir.join("trials_normalized.jsonl"))?,
        &meta,
        &trials,
    )?;
    write_jsonl(
        writer(&out_dir.join("tracker_normalized.jsonl"))?,
        &meta,
        &tracker,
    )?;
    write_jsonl(
        writer(&out_dir.join("validation_reports.jsonl"))?,
        &meta,
        &reports,
    )?;

    #[derive(Serialize)]
    struct ErrorLine {
        source: &'static str,
        error: String,
    }
    let error_lines: Vec<ErrorLine> = trial_errors
        .iter()
        .map(|e| ErrorLine {
            source: "trials",
            error: e.to_string(),
        })
        .chain(tracker_errors.iter().map(|e| ErrorLine {
            source: "tracker",
            error: e.to_string(),
        }))
        .collect();
    write_jsonl(
        writer(&out_dir.join("parse_errors.jsonl"))?,
        &meta,
        &error_lines,
    )?;

    println!(
        "parsed {} trials ({} parse errors), {} tracker records ({} parse errors); {} usable / {} low-quality",
        trials.len(),
        trial_errors.len(),
        tracker.len(),
        tracker_errors.len(),
        usable,
        trials.len() - usable
    );
    Ok(())
}

pub fn label(
    config: &PipelineConfig,
    trials_path: &Path,
    tracker_path: &Path,
    out_path: &Path,
    unlabeled_out: Option<&Path>,
    stats_out: Option<&Path>,
) -> Result<()> {
    let (trials, trial_errors) = parse_trial_records(reader(trials_path)?);
    let (tracker, tracker_errors) = parse_drug_tracker(reader(tracker_path)?);
    report_parse_errors("trials", &trial_errors);
    report_parse_errors("tracker", &tracker_errors);

    let corpus = label_corpus(&trials, &tracker)?;
    let meta = meta_for(
        config,
        "label",
        &serde_json::json!({
            "trials": trials_path.display().to_string(),
            "tracker": tracker_path.display().to_string(),
        }),
    );
    write_jsonl(writer(out_path)?, &meta, &corpus.entries)?;
    if let Some(path) = unlabeled_out {
        write_jsonl(writer(path)?, &meta, &corpus.unlabeled)?;
    }
    if let Some(path) = stats_out {
        let mut out = writer(path)?;
        serde_json::to_writer_pretty(&mut out, &corpus.link_stats)?;
        out.write_all(b"\n")?;
    }
    let stats = &corpus.link_stats;
    println!(
        "labeled {} trials ({} yes-rule, {} at-ultimate, {} terminated); {} unlabeled, {} low-quality, {} phase-inconsistent",
        corpus.entries.len(),
        stats.rule1,
        stats.rule2,
        stats.rule3,
        corpus.unlabeled.len(),
        stats.low_quality,
        stats.phase_inconsistent
    );
    Ok(())
}

fn description_record(entry: &LabeledTrial, budget: usize) -> Result<DescriptionRecord> {
    let Some(last_modified) = entry.trial.last_modified else {
        bail!(
            "labeled trial {} has no last_modified date",
            entry.trial.nct_id
        );
    };
    let description = synthesize_description(&entry.trial, budget);
    Ok(DescriptionRecord {
        nct_id: entry.trial.nct_id.clone(),
        text: description.text,
        char_count: description.char_count,
        label: entry.label.value,
        rule: entry.label.rule,
        reason: entry.label.reason.clone(),
        phase: entry.trial.phase,
        last_modified,
    })
}

pub fn synthesize(
    config: &PipelineConfig,
    input: &Path,
    out_path: &Path,
    budget: Option<usize>,
) -> Result<()> {
    let entries: Vec<LabeledTrial> = read_items(input)?;
    let budget = budget.unwrap_or(config.char_budget);
    let meta = meta_for(
        config,
        "synthesize",
        &serde_json::json!({ "input": input.display().to_string(), "budget": budget }),
    );
    let records: Vec<DescriptionRecord> = entries
        .iter()
        .map(|entry| description_record(entry, budget))
        .collect::<Result<_>>()?;
    write_jsonl(writer(out_path)?, &meta, &records)?;
    println!(
        "synthesized {} descriptions (budget {budget} chars) into {}",
        records.len(),
        out_path.display()
    );
    Ok(())
}

pub fn split(
    config: &PipelineConfig,
    input: &Path,
    out_dir: &Path,
    balance_classes: bool,
) -> Result<()> {
    let entries: Vec<LabeledTrial> = read_items(input)?;
    let split = chronological_split(&entries, config.split.as_tuple())?;
    let (mut train, mut validation, test) = (split.train, split.validation, split.test);
    if balance_classes {
        train = balance(&train, config.seed)?;
        // A tiny validation slice can end up single-class; leave it as is
        // rather than failing the whole split.
        let classes = validation
            .iter()
            .map(|e| e.label.value)
            .collect::<std::collections::HashSet<_>>();
        if classes.len() == 2 {
            validation = balance(&validation, config.seed)?;
        } else if !validation.is_empty() {
            log::warn!("validation portion is single-class; skipping balancing");
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let meta = meta_for(
        config,
        "split",
        &serde_json::json!({
            "input": input.display().to_string(),
            "balance": balance_classes,
        }),
    );
    write_jsonl(writer(&out_dir.join("train.jsonl"))?, &meta, &train)?;
    write_jsonl(
        writer(&out_dir.join("validation.jsonl"))?,
        &meta,
        &validation,
    )?;
    write_jsonl(writer(&out_dir.join("test.jsonl"))?, &meta, &test)?;
    println!(
        "split {} entries into {}/{}/{} (cutoffs: train ≤ {:?}, validation ≤ {:?})",
        entries.len(),
        train.len(),
        validation.len(),
        test.len(),
        split.cutoff_dates.0,
        split.cutoff_dates.1
    );
    Ok(())
}

pub fn embed(
    config: &PipelineConfig,
    input: &Path,
    out_path: &Path,
    dim_override: Option<usize>,
) -> Result<()> {
    let entries: Vec<LabeledTrial> = read_items(input)?;
    let mut encoder_settings = config.encoder.clone();
    if let Some(dim) = dim_override {
        encoder_settings.dim = dim;
    }
    let provider = encoder_settings.provider(config.seed)?;
    let trials: Vec<TrialRecord> = entries.into_iter().map(|e| e.trial).collect();
    let vectors = embed_corpus(&trials, &provider, None)?;
    let meta = meta_for(
        config,
        "embed",
        &serde_json::json!({
            "input": input.display().to_string(),
            "provider": provider.id(),
        }),
    );
    save_matrix(out_path, &vectors, &serde_json::to_string(&meta)?)?;
    println!(
        "embedded {} trials at dimension {} into {}",
        vectors.len(),
        vectors.first().map_or(0, |v| v.values.len()),
        out_path.display()
    );
    Ok(())
}

/// Join persisted vectors with labeled entries into a training dataset.
fn dataset_from(vectors: &[FeatureVector], entries: &[LabeledTrial]) -> Result<RFDataset> {
    let index: HashMap<&str, usize> = vectors
        .iter()
        .enumerate()
        .map(|(i, v)| (v.source_nct_id.as_str(), i))
        .collect();
    let mut rows = Vec::with_capacity(entries.len());
    for entry in entries {
        let Some(&at) = index.get(entry.trial.nct_id.as_str()) else {
            bail!("no embedded vector for trial {}", entry.trial.nct_id);
        };
        rows.push((
            vectors[at].values.clone(),
            u8::from(entry.label.value == LabelValue::Yes),
        ));
    }
    Ok(RFDataset::new(rows)?)
}

pub fn train_rf(
    config: &PipelineConfig,
    vectors_path: &Path,
    train_path: &Path,
    out_path: &Path,
    trees_override: Option<usize>,
) -> Result<()> {
    let (vectors, _) = load_matrix(vectors_path)?;
    let entries: Vec<LabeledTrial> = read_items(train_path)?;
    let data = dataset_from(&vectors, &entries)?;
    let mut forest_settings = config.forest;
    if let Some(trees) = trees_override {
        forest_settings.trees = trees;
    }
    let params = forest_settings.params(config.seed);
    let forest = ctp_core::forest::train(&data, &params)?;
    let meta = meta_for(
        config,
        "train-rf",
        &serde_json::json!({
            "vectors": vectors_path.display().to_string(),
            "train": train_path.display().to_string(),
            "params": params,
        }),
    );
    save_forest(&forest, out_path, &serde_json::to_string(&meta)?)?;
    println!(
        "trained {} trees on {} rows of dimension {} into {}",
        forest.trees.len(),
        data.len(),
        data.dim(),
        out_path.display()
    );
    Ok(())
}

pub fn predict_rf(
    config: &PipelineConfig,
    forest_path: &Path,
    vectors_path: &Path,
    subset: Option<&Path>,
    out_path: &Path,
) -> Result<()> {
    let forest = load_forest(forest_path)?;
    let (vectors, _) = load_matrix(vectors_path)?;
    let selected: Vec<&FeatureVector> = match subset {
        Some(path) => {
            let entries: Vec<LabeledTrial> = read_items(path)?;
            let index: HashMap<&str, &FeatureVector> = vectors
                .iter()
                .map(|v| (v.source_nct_id.as_str(), v))
                .collect();
            let mut picked = Vec::with_capacity(entries.len());
            for entry in &entries {
                let Some(vector) = index.get(entry.trial.nct_id.as_str()) else {
                    bail!("no embedded vector for trial {}", entry.trial.nct_id);
                };
                picked.push(*vector);
            }
            picked
        }
        None => vectors.iter().collect(),
    };
    let mut predictions = Vec::with_capacity(selected.len());
    for vector in &selected {
        let (y, vote_fraction) = predict(&forest, &vector.values)?;
        predictions.push(PredictionRecord {
            nct_id: vector.source_nct_id.clone(),
            predicted: Some(if y == 1 {
                LabelValue::Yes
            } else {
                LabelValue::No
            }),
            vote_fraction: Some(vote_fraction),
            raw_reply: None,
        });
    }
    let meta = meta_for(
        config,
        "predict-rf",
        &serde_json::json!({
            "forest": forest_path.display().to_string(),
            "vectors": vectors_path.display().to_string(),
        }),
    );
    write_jsonl(writer(out_path)?, &meta, &predictions)?;
    println!(
        "predicted {} trials into {}",
        predictions.len(),
        out_path.display()
    );
    Ok(())
}

pub fn export_finetune(
    config: &PipelineConfig,
    input: &Path,
    out_path: &Path,
    reasoning: bool,
    budget: Option<usize>,
) -> Result<()> {
    let entries: Vec<LabeledTrial> = read_items(input)?;
    let budget = budget.unwrap_or(config.char_budget);
    let pairs: Vec<_> = entries
        .iter()
        .map(|entry| {
            (
                synthesize_description(&entry.trial, budget),
                entry.label.clone(),
            )
        })
        .collect();
    let examples = ctp_core::llmgate::build_export(&pairs, reasoning);
    let meta = meta_for(
        config,
        "export-finetune",
        &serde_json::json!({
            "input": input.display().to_string(),
            "reasoning": reasoning,
            "budget": budget,
        }),
    );
    let mut out = writer(out_path)?;
    writeln!(out, "{}", meta.to_line())?;
    write_export(&mut out, &examples)?;
    out.flush()?;
    // The file we just wrote must pass its own validation gate.
    let count = validate_export(reader(out_path)?)?;
    println!(
        "exported {count} chat examples ({}) to {}",
        if reasoning { "reasoning" } else { "plain" },
        out_path.display()
    );
    Ok(())
}

fn chat_service(
    config: &PipelineConfig,
    stub_fixtures: Option<&Path>,
    stub_empty: bool,
) -> Result<Box<dyn ChatService>> {
    if let Some(path) = stub_fixtures {
        return Ok(Box::new(ReplayStub::from_reader(reader(path)?)?));
    }
    if stub_empty {
        return Ok(Box::new(ReplayStub::new([])));
    }
    Ok(Box::new(HttpChatService::new(config.llm.clone())?))
}

pub fn finetune(
    config: &PipelineConfig,
    export: &Path,
    base_model: Option<&str>,
    stub: bool,
    job_out: Option<&Path>,
    poll_interval_ms: u64,
    max_polls: usize,
) -> Result<()> {
    let service = chat_service(config, None, stub)?;
    let base_model = base_model.unwrap_or(&config.llm.base_model_id);
    let mut job = submit_finetune(export, base_model, service.as_ref())?;
    println!(
        "submitted fine-tune job {} (base model {base_model})",
        job.job_id
    );
    let status = wait_for_completion(
        &mut job,
        service.as_ref(),
        std::time::Duration::from_millis(poll_interval_ms),
        max_polls,
    )?;
    if let Some(path) = job_out {
        let mut out = writer(path)?;
        serde_json::to_writer_pretty(&mut out, &job)?;
        out.write_all(b"\n")?;
    }
    match status {
        ctp_core::llmgate::JobStatus::Succeeded(model) => {
            println!("fine-tune succeeded: model id {model}");
            Ok(())
        }
        ctp_core::llmgate::JobStatus::Failed(reason) => bail!("fine-tune failed: {reason}"),
        other => bail!("fine-tune did not finish: {other:?}"),
    }
}

pub fn llm_predict(
    config: &PipelineConfig,
    model: &str,
    descriptions_path: &Path,
    stub_fixtures: Option<&Path>,
    out_path: &Path,
) -> Result<()> {
    let records: Vec<DescriptionRecord> = read_items(descriptions_path)?;
    let service = chat_service(config, stub_fixtures, false)?;
    let descriptions: Vec<ctp_core::corpus::TrialDescription> = records
        .iter()
        .map(|r| ctp_core::corpus::TrialDescription {
            text: r.text.clone(),
            source_nct_id: r.nct_id.clone(),
            char_count: r.char_count,
        })
        .collect();
    let replies = predict_batch(
        model,
        &descriptions,
        service.as_ref(),
        config.llm.max_parallel,
    )?;
    let unparsed = replies.iter().filter(|r| r.parsed.is_none()).count();
    let predictions: Vec<PredictionRecord> = records
        .iter()
        .zip(&replies)
        .map(|(record, reply)| PredictionRecord {
            nct_id: record.nct_id.clone(),
            predicted: reply.parsed,
            vote_fraction: None,
            raw_reply: Some(reply.raw_text.clone()),
        })
        .collect();
    let meta = meta_for(
        config,
        "llm-predict",
        &serde_json::json!({
            "model": model,
            "descriptions": descriptions_path.display().to_string(),
        }),
    );
    write_jsonl(writer(out_path)?, &meta, &predictions)?;
    println!(
        "predicted {} trials ({unparsed} unparseable replies) into {}",
        predictions.len(),
        out_path.display()
    );
    Ok(())
}

pub fn evaluate(
    config: &PipelineConfig,
    predictions_path: &Path,
    gold_path: &Path,
    out_prefix: Option<&str>,
) -> Result<()> {
    let predictions: Vec<PredictionRecord> = read_items(predictions_path)?;
    let gold: Vec<LabeledTrial> = read_items(gold_path)?;
    if predictions.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            golds: gold.len(),
        }
        .into());
    }
    let gold_index: HashMap<&str, &LabeledTrial> = gold
        .iter()
        .map(|entry| (entry.trial.nct_id.as_str(), entry))
        .collect();
    let mut aligned_predictions = Vec::with_capacity(predictions.len());
    let mut golds = Vec::with_capacity(predictions.len());
    let mut phases = Vec::with_capacity(predictions.len());
    let mut seen = std::collections::HashSet::new();
    for prediction in &predictions {
        if !seen.insert(prediction.nct_id.as_str()) {
            bail!("duplicate prediction for {}", prediction.nct_id);
        }
        let Some(entry) = gold_index.get(prediction.nct_id.as_str()) else {
            bail!("prediction for {} has no gold label", prediction.nct_id);
        };
        aligned_predictions.push(prediction.predicted);
        golds.push(entry.label.value);
        phases.push(entry.trial.phase);
    }
    let report = per_phase_report(&aligned_predictions, &golds, &phases)?;
    print!("{}", report.render());
    if let Some(prefix) = out_prefix {
        let meta = meta_for(
            config,
            "evaluate",
            &serde_json::json!({
                "predictions": predictions_path.display().to_string(),
                "gold": gold_path.display().to_string(),
            }),
        );
        let csv_path = PathBuf::from(format!("{prefix}.csv"));
        let mut out = writer(&csv_path)?;
        writeln!(out, "# {}", meta.to_line())?;
        out.write_all(report.to_csv().as_bytes())?;
        let json_path = PathBuf::from(format!("{prefix}.json"));
        let mut out = writer(&json_path)?;
        serde_json::to_writer_pretty(&mut out, &report)?;
        out.write_all(b"\n")?;
        println!("wrote {} and {}", csv_path.display(), json_path.display());
    }
    Ok(())
}

pub fn feature_importance(
    config: &PipelineConfig,
    vectors_path: &Path,
    train_path: &Path,
    test_path: &Path,
    out_path: &Path,
    trees_override: Option<usize>,
) -> Result<()> {
    let (vectors, _) = load_matrix(vectors_path)?;
    let train_entries: Vec<LabeledTrial> = read_items(train_path)?;
    let test_entries: Vec<LabeledTrial> = read_items(test_path)?;
    let train_data = dataset_from(&vectors, &train_entries)?;
    let test_data = dataset_from(&vectors, &test_entries)?;

    let mut forest_settings = config.forest;
    if let Some(trees) = trees_override {
        forest_settings.trees = trees;
    }
    let params = forest_settings.params(config.seed);
    let train_eval = |train: &RFDataset, test: &RFDataset| {
        let forest = ctp_core::forest::train(train, &params)?;
        let predictions: Vec<Option<LabelValue>> = (0..test.len())
            .map(|row| {
                predict(&forest, test.feature_row(row)).map(|(y, _)| {
                    Some(if y == 1 {
                        LabelValue::Yes
                    } else {
                        LabelValue::No
                    })
                })
            })
            .collect::<Result<_, _>>()?;
        let golds: Vec<LabelValue> = test
            .labels()
            .iter()
            .map(|&l| {
                if l == 1 {
                    LabelValue::Yes
                } else {
                    LabelValue::No
                }
            })
            .collect();
        let matrix = confusion(&predictions, &golds).expect("aligned by construction");
        Ok(compute_metrics(&matrix)
            .expect("non-empty test set")
            .f1_positive)
    };
    let report = drop_feature_importance(train_eval, &train_data, &test_data)?;

    let meta = meta_for(
        config,
        "feature-importance",
        &serde_json::json!({
            "vectors": vectors_path.display().to_string(),
            "train": train_path.display().to_string(),
            "test": test_path.display().to_string(),
            "params": params,
        }),
    );
    let mut out = writer(out_path)?;
    writeln!(out, "# {}", meta.to_line())?;
    out.write_all(report.to_csv().as_bytes())?;
    println!("baseline f1_positive {:.4}", report.baseline_f1);
    for (name, delta) in &report.per_attribute {
        println!("{name:<18} delta_f1 {delta:+.4}");
    }
    Ok(())
}

pub fn stats(
    config: &PipelineConfig,
    labeled_path: &Path,
    unlabeled_path: Option<&Path>,
    out_dir: &Path,
) -> Result<()> {
    let entries: Vec<LabeledTrial> = read_items(labeled_path)?;
    let unlabeled: Vec<TrialRecord> = match unlabeled_path {
        Some(path) => read_items(path)?,
        None => Vec::new(),
    };
    let corpus = ctp_core::linkage::LabeledCorpus {
        entries,
        unlabeled,
        link_stats: Default::default(),
    };
    let bundle = corpus_stats(&corpus);
    std::fs::create_dir_all(out_dir)?;
    let meta = meta_for(
        config,
        "stats",
        &serde_json::json!({ "labeled": labeled_path.display().to_string() }),
    );
    for (name, body) in [
        ("per_phase.csv", bundle.phase_csv()),
        ("drug_class.csv", bundle.drug_class_csv()),
    ] {
        let mut out = writer(&out_dir.join(name))?;
        writeln!(out, "# {}", meta.to_line())?;
        out.write_all(body.as_bytes())?;
    }
    print!("{}", bundle.render());
    Ok(())
}
