// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use log::info;
use serde_json::json;

use kne_core::attribution::AttributionScores;
use kne_core::data::{
    load_corpus_jsonl, load_knowedit_jsonl, make_edit_set, save_corpus_jsonl, save_edits_jsonl,
    EditRecord, Vocab,
};
use kne_core::editor::EditedFile;
use kne_core::experiments::{
    attribute_stage, edit_stage, pretrain_world, run_experiment, write_report, ExperimentSpec, Lab,
};
use kne_core::metrics::evaluate;
use kne_core::model::{pretrain, Checkpoint, ParamSource};
use kne_core::selection::{ensemble_stats, select, KnowledgeNeuronalEnsemble, SelectionScope};

use crate::config::RunConfig;
use crate::{
    AttributeArgs, Cli, Command, EditArgs, EvaluateArgs, ExperimentArgs, MakeDatasetArgs,
    PretrainArgs, SelectArgs,
};

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), cli.seed)?;
    fs::create_dir_all(&cli.out_dir)
        .with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let out = |given: &Option<PathBuf>, name: &str| -> PathBuf {
        given.clone().unwrap_or_else(|| cli.out_dir.join(name))
    };
    match &cli.command {
        Command::Pretrain(a) => cmd_pretrain(cfg, cli.seed, a, &out(&a.out, "model.json")),
        Command::MakeDataset(a) => cmd_make_dataset(&cfg, cli.seed, a, &cli.out_dir),
        Command::Attribute(a) => cmd_attribute(cfg, a, &out(&a.out, "scores.json")),
        Command::Select(a) => cmd_select(&cfg, a, &out(&a.out, "ensemble.json")),
        Command::Edit(a) => cmd_edit(cfg, a, &out(&a.out, "edited.json")),
        Command::Evaluate(a) => cmd_evaluate(&cfg, a, &out(&a.out, "report.json")),
        Command::Experiment(a) => cmd_experiment(cfg, a, &cli.out_dir),
    }
}

fn load_lab(model: &Path, edits: &Path) -> Result<Lab> {
    let ckpt = Checkpoint::load(model)?;
    let records: Vec<EditRecord> = load_knowedit_jsonl(edits)?;
    Ok(Lab::new(ckpt, records)?)
}

fn cmd_pretrain(mut cfg: RunConfig, seed: u64, a: &PretrainArgs, out: &Path) -> Result<()> {
    if let Some(steps) = a.steps {
        cfg.pretrain.steps = steps;
    }
    if let Some(lr) = a.lr {
        cfg.pretrain.lr = lr;
    }
    let ckpt = match &a.corpus {
        None => {
            let vocab = cfg.world.build()?.2.vocab.len();
            let mc = cfg.model.with_vocab(vocab, seed);
            let (ckpt, acc) = pretrain_world(&cfg.world, &mc, &cfg.pretrain)?;
            info!(
                "triple recall: primary {:.3}, rephrase {:.3}, alias {:.3}",
                acc.primary, acc.rephrase, acc.alias
            );
            ckpt
        }
        Some(path) => {
            let texts = load_corpus_jsonl(path)?;
            let vocab = Vocab::from_texts(texts.iter().map(String::as_str));
            let tokens = texts
                .iter()
                .map(|t| vocab.encode(t))
                .collect::<kne_core::Result<Vec<_>>>()?;
            let mc = cfg.model.with_vocab(vocab.len(), seed);
            let outcome = pretrain(&mc, &tokens, &cfg.pretrain)?;
            let mut ckpt = Checkpoint::new(vocab, outcome.params);
            ckpt.metadata
                .insert("corpus".into(), json!(path.display().to_string()));
            ckpt.metadata
                .insert("pretrain".into(), serde_json::to_value(&cfg.pretrain)?);
            ckpt.metadata
                .insert("initial_loss".into(), json!(outcome.initial_loss));
            ckpt.metadata
                .insert("final_loss".into(), json!(outcome.final_loss));
            ckpt
        }
    };
    ckpt.save(out)?;
    info!(
        "wrote {} ({} parameters)",
        out.display(),
        ckpt.params.total_params()
    );
    Ok(())
}

fn cmd_make_dataset(cfg: &RunConfig, seed: u64, a: &MakeDatasetArgs, dir: &Path) -> Result<()> {
    let (world, templates, corpus) = cfg.world.build()?;
    let n = a.n_edits.unwrap_or(cfg.dataset.n_edits);
    let loc = a.locality.unwrap_or(cfg.dataset.locality_per_record);
    let records = make_edit_set(&world, &templates, n, loc, seed)?;
    let (cp, ep) = (dir.join("corpus.jsonl"), dir.join("edits.jsonl"));
    save_corpus_jsonl(&cp, &corpus.texts)?;
    save_edits_jsonl(&ep, &records)?;
    info!(
        "wrote {} ({} sentences) and {} ({} edits)",
        cp.display(),
        corpus.texts.len(),
        ep.display(),
        records.len()
    );
    Ok(())
}

fn cmd_attribute(mut cfg: RunConfig, a: &AttributeArgs, out: &Path) -> Result<()> {
    let lab = load_lab(&a.model, &a.edits)?;
    let attr = &mut cfg.pipeline.attribution;
    if let Some(m) = a.steps {
        attr.riemann_steps = m;
    }
    if a.subset.is_some() {
        attr.subset = a.subset;
    }
    if let Some(paths) = &a.paths {
        attr.target_paths = paths.clone();
    }
    if let Some(mode) = a.mode {
        attr.mode = mode;
    }
    if let Some(t) = a.target {
        cfg.pipeline.attribution_target = t;
    }
    let scores = attribute_stage(&lab, &cfg.pipeline)?;
    scores.save(out)?;
    info!(
        "wrote {} ({} neurons over {} paths)",
        out.display(),
        scores.total_neurons(),
        scores.scores.len()
    );
    Ok(())
}

fn cmd_select(cfg: &RunConfig, a: &SelectArgs, out: &Path) -> Result<()> {
    let scores = AttributionScores::load(&a.scores)?;
    let mut sc = cfg.pipeline.selection;
    if let Some(k) = a.keep {
        sc.keep_fraction = k;
    }
    if a.per_layer {
        sc.scope = SelectionScope::PerLayer;
    }
    let ensemble = select(&scores, &sc)?;
    ensemble.save(out)?;
    info!(
        "wrote {} ({} neurons, threshold {})",
        out.display(),
        ensemble.len(),
        ensemble.threshold
    );
    if let Some(model) = &a.model {
        let ckpt = Checkpoint::load(model)?;
        let s = ensemble_stats(&ensemble, &ckpt.params)?;
        println!("{}", serde_json::to_string_pretty(&s)?);
    }
    Ok(())
}

fn cmd_edit(mut cfg: RunConfig, a: &EditArgs, out: &Path) -> Result<()> {
    let lab = load_lab(&a.model, &a.edits)?;
    let ensemble = KnowledgeNeuronalEnsemble::load(&a.ensemble)?;
    let ec = &mut cfg.pipeline.edit;
    if let Some(x) = a.alpha {
        ec.alpha = x;
    }
    if let Some(x) = a.steps {
        ec.max_steps = x;
    }
    if let Some(x) = a.lr {
        ec.lr = x;
    }
    if let Some(x) = a.batch_size {
        ec.batch_size = x;
    }
    let batches = edit_stage(&lab, &ensemble, &cfg.pipeline)?;
    let Some(last) = batches.last() else {
        bail!("no edit batches ran");
    };
    let traces = batches.iter().map(|b| b.trace.clone()).collect();
    EditedFile::new(&last.model, ensemble, cfg.pipeline.edit, traces).save(out)?;
    for (i, b) in batches.iter().enumerate() {
        let best = b.trace.steps.get(b.trace.best_step);
        info!(
            "batch {i}: best step {} loss {:.4} mean target probability {:.4}{}",
            b.trace.best_step,
            best.map_or(f64::NAN, |s| s.loss),
            best.map_or(f64::NAN, |s| s.mean_prob),
            if b.trace.early_stopped {
                ", early stop"
            } else {
                ""
            }
        );
    }
    info!("wrote {}", out.display());
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, a: &EvaluateArgs, out: &Path) -> Result<()> {
    let lab = load_lab(&a.original, &a.edits)?;
    let file = EditedFile::load(&a.edited)?;
    let edited = file.attach(Arc::clone(&lab.params))?;
    let snapshot = json!({
        "edit": file.config,
        "ensemble": {
            "threshold": file.ensemble.threshold,
            "keep_fraction": file.ensemble.keep_fraction,
            "neurons": file.ensemble.len(),
        },
        "fluency": cfg.pipeline.fluency,
        "seed": cfg.pipeline.seed,
        "model": lab.params.config(),
        "inputs": lab.input_hashes()?,
    });
    let report = evaluate(
        lab.params.as_ref(),
        &edited,
        lab.tokenized(),
        &cfg.pipeline.fluency,
        snapshot,
    )?;
    write_report(&report, out)?;
    println!(
        "ES {:.4}  PORT {}  LOC {}  FLUE {:.4} (unedited {:.4})",
        report.edit_success,
        fmt_opt(report.portability),
        fmt_opt(report.locality),
        report.fluency,
        report.fluency_unedited
    );
    info!("wrote {}", out.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn cmd_experiment(cfg: RunConfig, a: &ExperimentArgs, dir: &Path) -> Result<()> {
    let lab = load_lab(&a.model, &a.edits)?;
    let spec = ExperimentSpec {
        kind: a.kind,
        grid: a.grid.clone().unwrap_or(cfg.grid),
        pipeline: cfg.pipeline,
    };
    let outcome = run_experiment(&lab, &spec, Some(dir))?;
    for r in &outcome.rows {
        println!(
            "{:>14}  ES {:.4}  PORT {}  LOC {}  FLUE {:.4}  neurons {}",
            r.point,
            r.edit_success,
            fmt_opt(r.portability),
            fmt_opt(r.locality),
            r.fluency,
            r.neurons
        );
    }
    println!(
        "observations: {}",
        serde_json::to_string(&outcome.summary["observations"])?
    );
    for f in &outcome.files {
        info!("wrote {}", f.display());
    }
    Ok(())
}
