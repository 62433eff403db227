// SPDX-License-Identifier: Apache-2.0

//! End-to-end pipeline (attribute, select, edit, evaluate) and the four
//! parameter studies built on it. Every run is a pure function of its inputs
//! and seeds; reports carry the full configuration and input hashes and no
//! timestamps, so repeated runs produce byte-identical files.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::attribution::{attribute_edit_set, AttributionConfig, AttributionScores};
use crate::data::{
    entity_name, generate_world, render_prompt, tokenize_all, world_to_corpus, Corpus, EditRecord,
    SyntheticWorld, Templates, TokenizedEdit, Vocab,
};
use crate::editor::{
    edit_batch_stream, into_batches, BatchOutcome, EditConfig, EditTrace, EditedFile, EnsemblePlan,
};
use crate::error::{KneError, Result};
use crate::metrics::{edit_success, evaluate, EditReport, FluencyConfig};
use crate::model::{
    greedy_answer, pretrain, AnswerQuery, Checkpoint, ModelConfig, NamedParams, ParamSource,
    PretrainConfig,
};
use crate::selection::{
    ensemble_stats, select, EnsembleStats, KnowledgeNeuronalEnsemble, SelectionConfig,
};

/// Synthetic world parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_entities: usize,
    pub n_relations: usize,
    pub density: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_entities: 40,
            n_relations: 8,
            density: 0.8,
            seed: 1,
        }
    }
}

impl WorldConfig {
    pub fn build(&self) -> Result<(SyntheticWorld, Templates, Corpus)> {
        let world = generate_world(self.n_entities, self.n_relations, self.density, self.seed)?;
        let templates = Templates::default_for(self.n_relations);
        let corpus = world_to_corpus(&world, &templates)?;
        Ok((world, templates, corpus))
    }
}

/// The desk-scale model used by the experiments: 4 layers, width 64.
pub fn toy_model_config(vocab_size: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        d_model: 64,
        d_ff: 256,
        n_heads: 4,
        vocab_size,
        max_seq_len: 16,
        seed,
    }
}

/// Training recipe that brings [`toy_model_config`] to full triple recall.
pub fn toy_pretrain_config(seed: u64) -> PretrainConfig {
    PretrainConfig {
        steps: 2000,
        lr: 1e-3,
        batch_size: 32,
        seed,
        ..Default::default()
    }
}

/// Greedy recall of every world triple under each surface form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripleAccuracy {
    pub primary: f64,
    pub rephrase: f64,
    pub alias: f64,
}

pub fn triple_accuracy(
    source: &dyn ParamSource,
    vocab: &Vocab,
    world: &SyntheticWorld,
    templates: &Templates,
) -> Result<TripleAccuracy> {
    let (mut a, mut b, mut c) = (0usize, 0usize, 0usize);
    for t in &world.triples {
        let rt = templates.for_relation(t.relation)?;
        let object = vocab.encode(&entity_name(t.object))?;
        let hit = |pattern: &str, subject: &str| -> Result<bool> {
            let prompt = vocab.encode(&render_prompt(pattern, subject)?)?;
            Ok(greedy_answer(source, &prompt, object.len())? == object)
        };
        a += usize::from(hit(&rt.primary, &world.entity_name(t.subject))?);
        b += usize::from(hit(&rt.rephrase[0], &world.entity_name(t.subject))?);
        c += usize::from(hit(&rt.primary, &world.alias_name(t.subject))?);
    }
    let n = world.triples.len().max(1) as f64;
    Ok(TripleAccuracy {
        primary: a as f64 / n,
        rephrase: b as f64 / n,
        alias: c as f64 / n,
    })
}

/// Pretrains a model on the rendered world and packages it as a checkpoint
/// with its recipe and recall in the metadata.
pub fn pretrain_world(
    world_config: &WorldConfig,
    model_config: &ModelConfig,
    pretrain_config: &PretrainConfig,
) -> Result<(Checkpoint, TripleAccuracy)> {
    let (world, templates, corpus) = world_config.build()?;
    if model_config.vocab_size != corpus.vocab.len() {
        return Err(KneError::Config(format!(
            "model vocab_size {} but the corpus has {} words",
            model_config.vocab_size,
            corpus.vocab.len()
        )));
    }
    let out = pretrain(model_config, &corpus.tokenized()?, pretrain_config)?;
    let acc = triple_accuracy(&out.params, &corpus.vocab, &world, &templates)?;
    let mut ckpt = Checkpoint::new(corpus.vocab, out.params);
    ckpt.metadata
        .insert("world".into(), serde_json::to_value(world_config)?);
    ckpt.metadata
        .insert("pretrain".into(), serde_json::to_value(pretrain_config)?);
    ckpt.metadata
        .insert("initial_loss".into(), json!(out.initial_loss));
    ckpt.metadata
        .insert("final_loss".into(), json!(out.final_loss));
    ckpt.metadata
        .insert("triple_accuracy".into(), serde_json::to_value(acc)?);
    Ok((ckpt, acc))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A pretrained model plus the edit set every study works on.
#[derive(Clone, Debug)]
pub struct Lab {
    pub params: Arc<NamedParams>,
    pub vocab: Vocab,
    pub records: Vec<EditRecord>,
    tokenized: Vec<TokenizedEdit>,
}

impl Lab {
    pub fn new(checkpoint: Checkpoint, records: Vec<EditRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(KneError::Data("the edit set is empty".into()));
        }
        let tokenized = tokenize_all(&records, &checkpoint.vocab)?;
        Ok(Lab {
            params: Arc::new(checkpoint.params),
            vocab: checkpoint.vocab,
            records,
            tokenized,
        })
    }

    pub fn tokenized(&self) -> &[TokenizedEdit] {
        &self.tokenized
    }

    pub fn requests(&self) -> Vec<AnswerQuery> {
        self.tokenized.iter().map(|t| t.request.clone()).collect()
    }

    /// Edit prompts paired with the answer attribution should explain.
    pub fn attribution_queries(&self, target: AttributionTarget) -> Result<Vec<AnswerQuery>> {
        match target {
            AttributionTarget::TargetNew => Ok(self.requests()),
            AttributionTarget::GroundTruth => self
                .tokenized
                .iter()
                .zip(&self.records)
                .map(|(t, r)| {
                    Ok(AnswerQuery::new(
                        t.request.prompt.clone(),
                        self.vocab.encode(&r.ground_truth)?,
                    ))
                })
                .collect(),
        }
    }

    /// Hashes identifying the model and the edit set.
    pub fn input_hashes(&self) -> Result<Value> {
        let edits = serde_json::to_vec(&self.records)?;
        Ok(json!({
            "model_fingerprint": self.params.fingerprint(),
            "edits_sha256": sha256_hex(&edits),
            "n_edits": self.records.len(),
        }))
    }
}

/// Which answer attribution explains for each edit prompt.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttributionTarget {
    /// The requested new object.
    #[default]
    TargetNew,
    /// The object the model currently stores.
    GroundTruth,
}

/// Every knob of one attribute → select → edit → evaluate run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub attribution_target: AttributionTarget,
    pub attribution: AttributionConfig,
    pub selection: SelectionConfig,
    pub edit: EditConfig,
    pub fluency: FluencyConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig::seeded(0)
    }
}

impl PipelineConfig {
    /// Defaults with every stage seed derived from `seed`.
    pub fn seeded(seed: u64) -> Self {
        let mut c = PipelineConfig {
            seed,
            attribution_target: AttributionTarget::default(),
            attribution: AttributionConfig::default(),
            selection: SelectionConfig::default(),
            edit: EditConfig::default(),
            fluency: FluencyConfig::default(),
        };
        c.reseed(seed);
        c
    }

    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.attribution.subset_seed = seed;
        self.fluency.seed = seed.wrapping_add(1);
    }
}

/// Artifacts of one pipeline run.
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub scores: AttributionScores,
    pub ensemble: KnowledgeNeuronalEnsemble,
    pub stats: EnsembleStats,
    pub batches: Vec<BatchOutcome>,
    pub report: EditReport,
}

impl PipelineRun {
    pub fn traces(&self) -> Vec<EditTrace> {
        self.batches.iter().map(|b| b.trace.clone()).collect()
    }

    /// Writes `scores.json`, `ensemble.json`, `edited.json` and `report.json`.
    pub fn persist(&self, dir: &Path, config: &PipelineConfig) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| KneError::io(dir, e))?;
        self.scores.save(&dir.join("scores.json"))?;
        self.ensemble.save(&dir.join("ensemble.json"))?;
        if let Some(last) = self.batches.last() {
            EditedFile::new(
                &last.model,
                self.ensemble.clone(),
                config.edit,
                self.traces(),
            )
            .save(&dir.join("edited.json"))?;
        }
        write_report(&self.report, &dir.join("report.json"))
    }
}

/// Rejects reports with out-of-range metrics, then writes them.
pub fn write_report(report: &EditReport, path: &Path) -> Result<()> {
    validate_report(report)?;
    fs::write(path, report.to_json()?).map_err(|e| KneError::io(path, e))
}

pub fn validate_report(report: &EditReport) -> Result<()> {
    let unit = |name: &str, v: Option<f64>| -> Result<()> {
        match v {
            Some(x) if !(0.0..=1.0).contains(&x) => Err(KneError::Data(format!(
                "report field {name} = {x} outside [0, 1]"
            ))),
            _ => Ok(()),
        }
    };
    unit("edit_success", Some(report.edit_success))?;
    unit("portability", report.portability)?;
    unit("locality", report.locality)?;
    for (name, v) in [
        ("fluency", report.fluency),
        ("fluency_unedited", report.fluency_unedited),
    ] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(KneError::Data(format!(
                "report field {name} = {v} is not a finite non-negative value"
            )));
        }
    }
    if report.per_record.is_empty() {
        return Err(KneError::Data("report has no per-record entries".into()));
    }
    Ok(())
}

pub fn attribute_stage(lab: &Lab, config: &PipelineConfig) -> Result<AttributionScores> {
    let queries = lab
        .attribution_queries(config.attribution_target)
        .map_err(|e| e.in_stage("attribute"))?;
    attribute_edit_set(lab.params.as_ref(), &queries, &config.attribution)
        .map_err(|e| e.in_stage("attribute"))
}

pub fn select_stage(
    lab: &Lab,
    scores: &AttributionScores,
    config: &PipelineConfig,
) -> Result<(KnowledgeNeuronalEnsemble, EnsembleStats)> {
    let ensemble = select(scores, &config.selection).map_err(|e| e.in_stage("select"))?;
    let stats = ensemble_stats(&ensemble, lab.params.as_ref()).map_err(|e| e.in_stage("select"))?;
    Ok((ensemble, stats))
}

pub fn edit_stage(
    lab: &Lab,
    ensemble: &KnowledgeNeuronalEnsemble,
    config: &PipelineConfig,
) -> Result<Vec<BatchOutcome>> {
    let batches = into_batches(&lab.requests(), config.edit.batch_size)?;
    edit_batch_stream(
        lab.params.clone(),
        EnsemblePlan::Shared(ensemble),
        &batches,
        &config.edit,
    )
    .map_err(|e| e.in_stage("edit"))
}

fn trace_summary(traces: &[EditTrace]) -> Value {
    Value::Array(
        traces
            .iter()
            .map(|t| {
                json!({
                    "evaluations": t.steps.len(),
                    "best_step": t.best_step,
                    "early_stopped": t.early_stopped,
                    "initial_loss": t.steps.first().map(|s| s.loss),
                    "best_loss": t.steps.get(t.best_step).map(|s| s.loss),
                    "best_mean_prob": t.steps.get(t.best_step).map(|s| s.mean_prob),
                    "warning": t.warning,
                })
            })
            .collect(),
    )
}

pub fn evaluate_stage(
    lab: &Lab,
    config: &PipelineConfig,
    ensemble: &KnowledgeNeuronalEnsemble,
    stats: &EnsembleStats,
    batches: &[BatchOutcome],
) -> Result<EditReport> {
    let last = batches
        .last()
        .ok_or_else(|| KneError::Data("no edit batches ran".into()).in_stage("evaluate"))?;
    let traces: Vec<EditTrace> = batches.iter().map(|b| b.trace.clone()).collect();
    let snapshot = json!({
        "pipeline": config,
        "model": lab.params.config(),
        "inputs": lab.input_hashes()?,
        "ensemble": {
            "threshold": ensemble.threshold,
            "neurons": stats.neurons,
            "editable_params": stats.editable_params,
            "total_params": stats.total_params,
            "editable_fraction": stats.fraction,
            "paths": ensemble.paths.len(),
        },
        "edit_traces": trace_summary(&traces),
    });
    evaluate(
        lab.params.as_ref(),
        &last.model,
        lab.tokenized(),
        &config.fluency,
        snapshot,
    )
    .map_err(|e| e.in_stage("evaluate"))
}

/// Attribute, select, edit and evaluate; artifacts go to `out_dir` if given.
pub fn run_pipeline(
    lab: &Lab,
    config: &PipelineConfig,
    out_dir: Option<&Path>,
) -> Result<PipelineRun> {
    let scores = attribute_stage(lab, config)?;
    run_from_scores(lab, config, scores, out_dir)
}

fn run_from_scores(
    lab: &Lab,
    config: &PipelineConfig,
    scores: AttributionScores,
    out_dir: Option<&Path>,
) -> Result<PipelineRun> {
    let (ensemble, stats) = select_stage(lab, &scores, config)?;
    let batches = edit_stage(lab, &ensemble, config)?;
    let report = evaluate_stage(lab, config, &ensemble, &stats, &batches)?;
    let run = PipelineRun {
        scores,
        ensemble,
        stats,
        batches,
        report,
    };
    if let Some(dir) = out_dir {
        run.persist(dir, config)?;
    }
    Ok(run)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Pipeline,
    LocationStudy,
    SubsetLocalization,
    KeepFractionSweep,
    BatchSizeSweep,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::Pipeline,
        ExperimentKind::LocationStudy,
        ExperimentKind::SubsetLocalization,
        ExperimentKind::KeepFractionSweep,
        ExperimentKind::BatchSizeSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Pipeline => "pipeline",
            ExperimentKind::LocationStudy => "location-study",
            ExperimentKind::SubsetLocalization => "subset-localization",
            ExperimentKind::KeepFractionSweep => "keep-fraction-sweep",
            ExperimentKind::BatchSizeSweep => "batch-size-sweep",
        }
    }

    /// Grid used when none is given. Subset sizes are edit counts.
    pub fn default_grid(self, n_edits: usize) -> Vec<f64> {
        match self {
            ExperimentKind::Pipeline => vec![0.0],
            ExperimentKind::LocationStudy => (0..FAMILIES.len()).map(|i| i as f64).collect(),
            ExperimentKind::SubsetLocalization => {
                let mut g: Vec<f64> = [0.25, 0.5, 1.0]
                    .iter()
                    .map(|f| (f * n_edits as f64).ceil().max(1.0))
                    .collect();
                g.dedup();
                g
            }
            ExperimentKind::KeepFractionSweep => vec![0.001, 0.005, 0.01, 0.05, 0.1],
            ExperimentKind::BatchSizeSweep => vec![1.0, 5.0, 10.0, 25.0],
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = KneError;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| KneError::Config(format!("unknown experiment kind `{s}`")))
    }
}

/// Projection families compared by the location study.
pub const FAMILIES: [&str; 7] = [
    "gate_proj",
    "up_proj",
    "down_proj",
    "q_proj",
    "k_proj",
    "v_proj",
    "o_proj",
];

fn family_pattern(family: &str) -> String {
    if ["gate_proj", "up_proj", "down_proj"].contains(&family) {
        format!("layers.*.mlp.{family}")
    } else {
        format!("layers.*.self_attn.{family}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    /// Empty means [`ExperimentKind::default_grid`]. For the location study
    /// the values index [`FAMILIES`].
    #[serde(default)]
    pub grid: Vec<f64>,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

/// One grid point of a study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub point: String,
    pub edit_success: f64,
    pub portability: Option<f64>,
    pub locality: Option<f64>,
    pub fluency: f64,
    pub fluency_unedited: f64,
    pub neurons: usize,
    pub editable_fraction: f64,
}

impl StudyRow {
    fn of(point: String, run: &PipelineRun) -> Self {
        StudyRow {
            point,
            edit_success: run.report.edit_success,
            portability: run.report.portability,
            locality: run.report.locality,
            fluency: run.report.fluency,
            fluency_unedited: run.report.fluency_unedited,
            neurons: run.stats.neurons,
            editable_fraction: run.stats.fraction,
        }
    }
}

/// Per-batch progress recorded by the batch-size sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRow {
    pub batch_size: usize,
    pub batch_index: usize,
    pub edits: usize,
    /// Edit success on the batch's own records right after it was applied.
    pub batch_edit_success: f64,
    pub evaluations: usize,
    pub early_stopped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutcome {
    pub kind: ExperimentKind,
    pub rows: Vec<StudyRow>,
    pub batch_rows: Vec<BatchRow>,
    /// Recorded qualitative observations and the run configuration.
    pub summary: Value,
    pub files: Vec<PathBuf>,
}

fn point_label(kind: ExperimentKind, x: f64) -> Result<String> {
    Ok(match kind {
        ExperimentKind::Pipeline => "default".into(),
        ExperimentKind::LocationStudy => {
            let i = x as usize;
            if x.fract() != 0.0 || i >= FAMILIES.len() {
                return Err(KneError::Config(format!(
                    "location grid value {x} is not a family index"
                )));
            }
            FAMILIES[i].into()
        }
        _ => format!("{x}"),
    })
}

fn as_count(x: f64, what: &str) -> Result<usize> {
    if x < 1.0 || x.fract() != 0.0 {
        return Err(KneError::Config(format!(
            "{what} {x} must be a positive integer"
        )));
    }
    Ok(x as usize)
}

/// CSV with a first column named after the grid variable.
fn write_rows_csv(path: &Path, first: &str, rows: &[StudyRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| KneError::Data(e.to_string()))?;
    let header = [
        first,
        "edit_success",
        "portability",
        "locality",
        "fluency",
        "fluency_unedited",
        "neurons",
        "editable_fraction",
    ];
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = vec![header.map(String::from).to_vec()];
    for r in rows {
        out.push(vec![
            r.point.clone(),
            r.edit_success.to_string(),
            opt(r.portability),
            opt(r.locality),
            r.fluency.to_string(),
            r.fluency_unedited.to_string(),
            r.neurons.to_string(),
            r.editable_fraction.to_string(),
        ]);
    }
    for rec in out {
        w.write_record(&rec)
            .map_err(|e| KneError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| KneError::io(path, e))
}

fn write_batch_csv(path: &Path, rows: &[BatchRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| KneError::Data(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| KneError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| KneError::io(path, e))
}

/// Runs `spec` on `lab`. With `out_dir`, each grid point's artifacts go to
/// its own subdirectory and the study writes `<kind>.csv` and
/// `<kind>.json` at the top.
pub fn run_experiment(
    lab: &Lab,
    spec: &ExperimentSpec,
    out_dir: Option<&Path>,
) -> Result<ExperimentOutcome> {
    let kind = spec.kind;
    let grid = if spec.grid.is_empty() {
        kind.default_grid(lab.records.len())
    } else {
        spec.grid.clone()
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| KneError::io(dir, e))?;
    }
    let sub = |label: &str| out_dir.map(|d| d.join(format!("{kind}-{label}")));
    let base = &spec.pipeline;
    let mut rows = Vec::new();
    let mut batch_rows = Vec::new();

    // Studies that vary only selection or editing share one attribution.
    let shared_scores = match kind {
        ExperimentKind::KeepFractionSweep | ExperimentKind::BatchSizeSweep => {
            Some(attribute_stage(lab, base)?)
        }
        _ => None,
    };

    for &x in &grid {
        let label = point_label(kind, x)?;
        let mut cfg = base.clone();
        match kind {
            ExperimentKind::Pipeline => {}
            ExperimentKind::LocationStudy => {
                cfg.attribution.target_paths = vec![family_pattern(&label)]
            }
            ExperimentKind::SubsetLocalization => {
                let n = as_count(x, "subset size")?;
                if n > lab.records.len() {
                    return Err(KneError::Config(format!(
                        "subset size {n} exceeds the {} edits",
                        lab.records.len()
                    )));
                }
                cfg.attribution.subset = Some(n);
            }
            ExperimentKind::KeepFractionSweep => cfg.selection.keep_fraction = x,
            ExperimentKind::BatchSizeSweep => cfg.edit.batch_size = as_count(x, "batch size")?,
        }
        let dir = sub(&label);
        let run = match &shared_scores {
            Some(scores) => run_from_scores(lab, &cfg, scores.clone(), dir.as_deref())?,
            None => run_pipeline(lab, &cfg, dir.as_deref())?,
        };
        if kind == ExperimentKind::BatchSizeSweep {
            let tokenized = lab.tokenized();
            for (i, (b, chunk)) in run
                .batches
                .iter()
                .zip(tokenized.chunks(cfg.edit.batch_size))
                .enumerate()
            {
                batch_rows.push(BatchRow {
                    batch_size: cfg.edit.batch_size,
                    batch_index: i,
                    edits: chunk.len(),
                    batch_edit_success: edit_success(&b.model, chunk)?,
                    evaluations: b.trace.steps.len(),
                    early_stopped: b.trace.early_stopped,
                });
            }
        }
        rows.push(StudyRow::of(label, &run));
    }

    let summary = json!({
        "kind": kind,
        "grid": grid,
        "pipeline": base,
        "inputs": lab.input_hashes()?,
        "rows": rows,
        "observations": observations(kind, &rows),
    });
    let mut files = Vec::new();
    if let Some(dir) = out_dir {
        let first = match kind {
            ExperimentKind::Pipeline => "run",
            ExperimentKind::LocationStudy => "family",
            ExperimentKind::SubsetLocalization => "subset_size",
            ExperimentKind::KeepFractionSweep => "keep_fraction",
            ExperimentKind::BatchSizeSweep => "batch_size",
        };
        let csv_path = dir.join(format!("{kind}.csv"));
        write_rows_csv(&csv_path, first, &rows)?;
        files.push(csv_path);
        if kind == ExperimentKind::BatchSizeSweep {
            let p = dir.join(format!("{kind}-batches.csv"));
            write_batch_csv(&p, &batch_rows)?;
            files.push(p);
        }
        let p = dir.join(format!("{kind}.json"));
        fs::write(&p, serde_json::to_string_pretty(&summary)?).map_err(|e| KneError::io(&p, e))?;
        files.push(p);
    }
    Ok(ExperimentOutcome {
        kind,
        rows,
        batch_rows,
        summary,
        files,
    })
}

fn mean_of<'a>(rows: impl Iterator<Item = &'a StudyRow>) -> Option<f64> {
    let v: Vec<f64> = rows.map(|r| r.edit_success).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Qualitative findings recorded alongside each study; never asserted.
fn observations(kind: ExperimentKind, rows: &[StudyRow]) -> Value {
    match kind {
        ExperimentKind::Pipeline => Value::Null,
        ExperimentKind::LocationStudy => {
            let is_ffn =
                |r: &&StudyRow| ["gate_proj", "up_proj", "down_proj"].contains(&r.point.as_str());
            let ffn = mean_of(rows.iter().filter(is_ffn));
            let attn = mean_of(rows.iter().filter(|r| !is_ffn(r)));
            json!({
                "ffn_mean_edit_success": ffn,
                "attention_mean_edit_success": attn,
                "ffn_beats_attention": ffn.zip(attn).map(|(f, a)| f > a),
            })
        }
        ExperimentKind::SubsetLocalization => {
            let full = rows.last().map(|r| r.edit_success);
            let smallest = rows.first().map(|r| r.edit_success);
            json!({
                "smallest_subset_edit_success": smallest,
                "full_subset_edit_success": full,
                "smallest_within_5_points_of_full": smallest.zip(full).map(|(s, f)| (f - s).abs() <= 0.05),
            })
        }
        ExperimentKind::KeepFractionSweep => {
            let (lo, hi) = (rows.first(), rows.last());
            json!({
                "edit_success_rises_with_keep": lo.zip(hi).map(|(l, h)| h.edit_success >= l.edit_success),
                "locality_falls_with_keep": lo.zip(hi).and_then(|(l, h)| Some(h.locality? <= l.locality?)),
            })
        }
        ExperimentKind::BatchSizeSweep => {
            let (lo, hi) = (rows.first(), rows.last());
            let holds = lo.zip(hi).map(|(l, h)| l.edit_success >= h.edit_success);
            json!({
                "smallest_batch_edit_success": lo.map(|r| r.edit_success),
                "largest_batch_edit_success": hi.map(|r| r.edit_success),
                "declining_trend_holds": holds,
                "deviation": holds.map(|h| !h),
            })
        }
    }
}
