// SPDX-License-Identifier: Apache-2.0

//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits nonzero if any failed.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use kne_core::attribution::{
    attribute_edit_set, neuron_attribution, scaled_answer_probability, AttributionConfig,
    AttributionMeta, AttributionMode, AttributionScores,
};
use kne_core::autodiff::grad_check;
use kne_core::data::{
    entity_name, make_edit_set, render_prompt, EditRecord, SyntheticWorld, Templates,
};
use kne_core::editor::{edit, expand_delta, EditConfig, EnsembleEditor};
use kne_core::experiments::{
    pretrain_world, run_experiment, run_pipeline, toy_model_config, toy_pretrain_config,
    ExperimentKind, ExperimentSpec, Lab, PipelineConfig, WorldConfig,
};
use kne_core::model::{answer_nll, AnswerQuery, Bindings, Checkpoint, NamedParams, ParamSource};
use kne_core::optim::Adam;
use kne_core::selection::{ensemble_stats, select, SelectionConfig, SelectionScope};
use kne_core::{KneError, Result, Tape, Tensor, Var};

const FD_STEP: f64 = 1e-5;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }
}

/// Models and edit sets shared by several criteria.
struct Fixtures {
    world: SyntheticWorld,
    templates: Templates,
    two_layer: Checkpoint,
}

impl Fixtures {
    fn new() -> Result<Self> {
        let wc = WorldConfig::default();
        let (world, templates, corpus) = wc.build()?;
        let mut mc = toy_model_config(corpus.vocab.len(), 1);
        mc.n_layers = 2;
        let (two_layer, _) = pretrain_world(&wc, &mc, &toy_pretrain_config(1))?;
        Ok(Fixtures {
            world,
            templates,
            two_layer,
        })
    }

    /// Single-token primary prompts of the first `n` triples.
    fn triple_queries(&self, ckpt: &Checkpoint, n: usize) -> Result<Vec<AnswerQuery>> {
        self.world
            .triples
            .iter()
            .take(n)
            .map(|t| {
                let rt = self.templates.for_relation(t.relation)?;
                let prompt = ckpt.vocab.encode(&render_prompt(
                    &rt.primary,
                    &self.world.entity_name(t.subject),
                )?)?;
                let answer = ckpt.vocab.encode(&entity_name(t.object))?;
                Ok(AnswerQuery::new(prompt, answer))
            })
            .collect()
    }

    fn edit_records(&self, n: usize) -> Result<Vec<EditRecord>> {
        make_edit_set(&self.world, &self.templates, n, 5, 7)
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// `sum(y ⊙ w)` with a fixed non-uniform `w`.
fn weighted_sum<'t>(tape: &'t Tape, y: Var<'t>) -> Result<Var<'t>> {
    let shape = y.shape();
    let n: usize = shape.iter().product();
    let w = Tensor::new(
        shape,
        (0..n)
            .map(|i| 0.3 + ((i * 7919) % 13) as f64 / 10.0)
            .collect(),
    )?;
    let prod = tape.mul(y, tape.constant(w))?;
    Ok(tape.sum(prod))
}

type Primitive = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

fn criterion_1() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let pos = |r: &mut ChaCha8Rng, s: &[usize]| random(r, s).map(|x| 0.5 + x.abs());
    let mut worst: f64 = 0.0;
    let mut check = |name: &str, point: Vec<Tensor>, f: Primitive| -> Result<()> {
        let err = grad_check(f, &point, FD_STEP)?;
        if !(err < 1e-4) {
            println!("    {name}: relative error {err:e}");
        }
        worst = if err.is_nan() {
            f64::NAN
        } else {
            worst.max(err)
        };
        Ok(())
    };
    let (a, b) = (random(&mut rng, &[3, 4]), random(&mut rng, &[4, 5]));
    check("matmul", vec![a, b], |t, v| {
        weighted_sum(t, t.matmul(v[0], v[1])?)
    })?;
    let (a, b) = (random(&mut rng, &[3, 4]), random(&mut rng, &[5, 4]));
    check("matmul_nt", vec![a, b], |t, v| {
        weighted_sum(t, t.matmul_nt(v[0], v[1])?)
    })?;
    let (a, b) = (random(&mut rng, &[3, 4]), random(&mut rng, &[3, 4]));
    check("add", vec![a, b], |t, v| {
        weighted_sum(t, t.add(v[0], v[1])?)
    })?;
    let (a, b) = (random(&mut rng, &[3, 4]), random(&mut rng, &[4]));
    check("add row broadcast", vec![a, b], |t, v| {
        weighted_sum(t, t.add(v[0], v[1])?)
    })?;
    let (a, b) = (random(&mut rng, &[3, 4]), random(&mut rng, &[3, 4]));
    check("mul", vec![a, b], |t, v| {
        weighted_sum(t, t.mul(v[0], v[1])?)
    })?;
    check("scale", vec![random(&mut rng, &[3, 4])], |t, v| {
        weighted_sum(t, t.scale(v[0], -1.7))
    })?;
    check("softmax", vec![random(&mut rng, &[3, 5])], |t, v| {
        weighted_sum(t, t.softmax(v[0])?)
    })?;
    check("log", vec![pos(&mut rng, &[3, 4])], |t, v| {
        weighted_sum(t, t.log(v[0])?)
    })?;
    check("exp", vec![random(&mut rng, &[3, 4])], |t, v| {
        weighted_sum(t, t.exp(v[0]))
    })?;
    check("silu", vec![random(&mut rng, &[3, 4])], |t, v| {
        weighted_sum(t, t.silu(v[0]))
    })?;
    let (x, g) = (random(&mut rng, &[3, 4]), random(&mut rng, &[4]));
    check("rms_norm", vec![x, g], |t, v| {
        weighted_sum(t, t.rms_norm(v[0], v[1])?)
    })?;
    check("gather_rows", vec![random(&mut rng, &[5, 3])], |t, v| {
        weighted_sum(t, t.gather_rows(v[0], &[4, 0, 4, 2])?)
    })?;
    check("scatter_rows", vec![random(&mut rng, &[2, 3])], |t, v| {
        weighted_sum(t, t.scatter_rows(v[0], &[3, 1], 5)?)
    })?;
    let (a, b) = (random(&mut rng, &[2, 3]), random(&mut rng, &[4, 3]));
    check("concat rows", vec![a, b], |t, v| {
        weighted_sum(t, t.concat(&[v[0], v[1]], 0)?)
    })?;
    let (a, b) = (random(&mut rng, &[3, 2]), random(&mut rng, &[3, 4]));
    check("concat cols", vec![a, b], |t, v| {
        weighted_sum(t, t.concat(&[v[0], v[1]], 1)?)
    })?;
    check("slice rows", vec![random(&mut rng, &[5, 3])], |t, v| {
        weighted_sum(t, t.slice(v[0], 0, 1, 4)?)
    })?;
    check("slice cols", vec![random(&mut rng, &[3, 5])], |t, v| {
        weighted_sum(t, t.slice(v[0], 1, 2, 5)?)
    })?;
    check("sum", vec![random(&mut rng, &[3, 4])], |t, v| {
        Ok(t.sum(v[0]))
    })?;
    check("cross_entropy", vec![random(&mut rng, &[4, 6])], |t, v| {
        weighted_sum(t, t.cross_entropy(v[0], &[5, 0, 2, 2])?)
    })?;
    let qkv = vec![
        random(&mut rng, &[5, 4]),
        random(&mut rng, &[5, 4]),
        random(&mut rng, &[5, 4]),
    ];
    check("causal_attention", qkv, |t, v| {
        weighted_sum(t, t.causal_attention(v[0], v[1], v[2], 2, &[3, 2])?)
    })?;

    // Full model loss with respect to three random weight rows.
    let cfg = kne_core::model::ModelConfig {
        n_layers: 2,
        d_model: 16,
        d_ff: 32,
        n_heads: 2,
        vocab_size: 11,
        max_seq_len: 8,
        seed: 5,
    };
    let params = NamedParams::init(&cfg)?;
    let queries = vec![
        AnswerQuery::new(vec![1, 2, 3, 4], vec![5]),
        AnswerQuery::new(vec![6, 7], vec![8, 9]),
    ];
    let paths = cfg.projection_paths();
    for _ in 0..3 {
        let path = paths[rng.gen_range(0..paths.len())].clone();
        let w = params.param(&path)?.clone();
        let k = rng.gen_range(0..w.rows());
        let row = Tensor::new(vec![1, w.cols()], w.row(k).to_vec())?;
        let err = grad_check(
            |tape, v| {
                let mut b = Bindings::constants(tape, &params)?;
                let mut parts = Vec::new();
                if k > 0 {
                    parts.push(tape.slice(tape.constant_shared(w.clone()), 0, 0, k)?);
                }
                parts.push(v[0]);
                if k + 1 < w.rows() {
                    parts.push(tape.slice(tape.constant_shared(w.clone()), 0, k + 1, w.rows())?);
                }
                b.set(&path, tape.concat(&parts, 0)?)?;
                let nll = answer_nll(&cfg, tape, &b, &queries)?;
                Ok(tape.scale(tape.sum(nll), 1.0 / nll.value().numel() as f64))
            },
            &[row],
            FD_STEP,
        )?;
        if !(err < 1e-4) {
            println!("    model loss, {path} row {k}: relative error {err:e}");
        }
        worst = if err.is_nan() {
            f64::NAN
        } else {
            worst.max(err)
        };
    }
    Ok(Verdict::new(
        worst < 1e-4,
        format!("max relative error {worst:.2e} over 19 primitive checks and 3 model rows"),
    ))
}

fn criterion_2(fx: &Fixtures) -> Result<Verdict> {
    let ckpt = &fx.two_layer;
    let queries = fx.triple_queries(ckpt, 10)?;
    let paths = ckpt.params.config().projection_paths();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for q in &queries {
        let path = &paths[rng.gen_range(0..paths.len())];
        let k = rng.gen_range(0..ckpt.params.param(path)?.rows());
        let attr = neuron_attribution(&ckpt.params, q, path, k, 300)?;
        let p1 = scaled_answer_probability(&ckpt.params, q, path, k, 1.0, 0)?;
        let p0 = scaled_answer_probability(&ckpt.params, q, path, k, 0.0, 0)?;
        let gap = (attr - (p1 - p0)).abs();
        worst = if gap.is_nan() {
            f64::NAN
        } else {
            worst.max(gap)
        };
    }
    Ok(Verdict::new(
        worst < 1e-3,
        format!("max |Attr(m=300) - (P(1) - P(0))| = {worst:.2e} over 10 neurons"),
    ))
}

fn top_set(scores: &AttributionScores, keep: f64) -> Result<BTreeSet<(String, usize)>> {
    let cfg = SelectionConfig {
        keep_fraction: keep,
        scope: SelectionScope::Global,
    };
    let e = select(scores, &cfg)?;
    Ok(e.paths
        .into_iter()
        .flat_map(|(p, ids)| ids.into_iter().map(move |i| (p.clone(), i)))
        .collect())
}

fn criterion_3(fx: &Fixtures) -> Result<Verdict> {
    let ckpt = &fx.two_layer;
    let records = fx.edit_records(2)?;
    let queries: Vec<AnswerQuery> = records
        .iter()
        .map(|r| r.tokenize(&ckpt.vocab).map(|t| t.request))
        .collect::<Result<_>>()?;
    let joint = attribute_edit_set(&ckpt.params, &queries, &AttributionConfig::default())?;
    let exact = attribute_edit_set(
        &ckpt.params,
        &queries,
        &AttributionConfig {
            mode: AttributionMode::Exact,
            ..Default::default()
        },
    )?;
    let (a, b) = (top_set(&joint, 0.01)?, top_set(&exact, 0.01)?);
    let inter = a.intersection(&b).count() as f64;
    let union = a.union(&b).count() as f64;
    let jaccard = inter / union;
    Ok(Verdict::new(
        jaccard >= 0.8,
        format!(
            "top-1% Jaccard {jaccard:.3} ({} neurons each, 2 edits, m=20)",
            a.len()
        ),
    ))
}

fn criterion_4() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let sizes = [("a", 2500), ("b", 4000), ("c", 1500), ("d", 2000)];
    let mut scores = BTreeMap::new();
    for (p, n) in sizes {
        scores.insert(
            p.to_string(),
            (0..n)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect::<Vec<f64>>(),
        );
    }
    let meta = AttributionMeta {
        m: 20,
        edit_ids: vec![0],
        mode: AttributionMode::Joint,
    };
    let base = AttributionScores {
        scores: scores.clone(),
        meta: meta.clone(),
    };
    let scaled = AttributionScores {
        scores: scores
            .iter()
            .map(|(p, v)| (p.clone(), v.iter().map(|x| x * 7.3).collect()))
            .collect(),
        meta,
    };
    let mut flat: Vec<(f64, String, usize)> = scores
        .iter()
        .flat_map(|(p, v)| v.iter().enumerate().map(move |(i, &s)| (s, p.clone(), i)))
        .collect();
    assert_eq!(flat.len(), 10_000);
    flat.sort_by(|x, y| {
        y.0.total_cmp(&x.0)
            .then_with(|| (&x.1, x.2).cmp(&(&y.1, y.2)))
    });

    let mut failures = Vec::new();
    for (keep, want) in [
        (0.0001, 1),
        (0.001, 10),
        (0.01, 100),
        (0.0333, 333),
        (0.25, 2500),
        (1.0, 10_000),
    ] {
        let got = top_set(&base, keep)?;
        let oracle: BTreeSet<(String, usize)> = flat[..want]
            .iter()
            .map(|(_, p, i)| (p.clone(), *i))
            .collect();
        if got.len() != want || got != oracle {
            failures.push(format!(
                "keep {keep}: {} selected, oracle {want}",
                got.len()
            ));
        }
        if top_set(&scaled, keep)? != got {
            failures.push(format!("keep {keep}: selection changed under scaling"));
        }
    }
    let pass = failures.is_empty();
    let detail = if pass {
        "counts, oracle sets and 7.3x scale invariance exact at 6 keep fractions".to_string()
    } else {
        failures.join("; ")
    };
    Ok(Verdict::new(pass, detail))
}

fn edit_fixture(
    fx: &Fixtures,
) -> Result<(
    Arc<NamedParams>,
    kne_core::selection::KnowledgeNeuronalEnsemble,
    Vec<AnswerQuery>,
)> {
    let ckpt = &fx.two_layer;
    let records = fx.edit_records(3)?;
    let queries: Vec<AnswerQuery> = records
        .iter()
        .map(|r| r.tokenize(&ckpt.vocab).map(|t| t.request))
        .collect::<Result<_>>()?;
    let scores = attribute_edit_set(&ckpt.params, &queries, &AttributionConfig::default())?;
    let ensemble = select(&scores, &SelectionConfig::default())?;
    Ok((Arc::new(ckpt.params.clone()), ensemble, queries))
}

fn criterion_5(fx: &Fixtures) -> Result<Verdict> {
    let (base, ensemble, queries) = edit_fixture(fx)?;
    let cfg = EditConfig::default();
    let mut editor = EnsembleEditor::new(base.as_ref(), &ensemble, &queries, cfg)?;
    let paths: Vec<String> = ensemble.paths.keys().cloned().collect();
    let weights: Vec<Arc<Tensor>> = paths
        .iter()
        .map(|p| base.param(p).cloned())
        .collect::<Result<_>>()?;
    let mut full: Vec<Tensor> = weights.iter().map(|w| Tensor::zeros(w.shape())).collect();
    let mut adam = Adam::new(cfg.adam, &full);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        editor.step()?;
        let tape = Tape::new();
        let mut bind = Bindings::constants(&tape, base.as_ref())?;
        let mut leaves = Vec::new();
        for ((p, w), d) in paths.iter().zip(&weights).zip(&full) {
            let n = ensemble.paths[p].len() as f64;
            let leaf = tape.leaf(d.clone());
            let c = cfg.alpha / n.sqrt();
            bind.set(
                p,
                tape.add(tape.constant_shared(w.clone()), tape.scale(leaf, c))?,
            )?;
            leaves.push(leaf);
        }
        let nll = answer_nll(base.config(), &tape, &bind, &queries)?;
        let loss = tape.scale(tape.sum(nll), 1.0 / nll.value().numel() as f64);
        let mut grads = tape.backward(loss)?;
        let mut gs = Vec::new();
        for (p, leaf) in paths.iter().zip(&leaves) {
            let mut g = grads.take(*leaf);
            let keep = &ensemble.paths[p];
            for k in 0..g.rows() {
                if keep.binary_search(&k).is_err() {
                    g.row_mut(k).fill(0.0);
                }
            }
            gs.push(g);
        }
        adam.step(&mut full, &gs, cfg.lr);
        for (p, d) in paths.iter().zip(&full) {
            let diff = expand_delta(editor.delta(), p)?.max_abs_diff(d);
            worst = if diff.is_nan() {
                f64::NAN
            } else {
                worst.max(diff)
            };
        }
    }
    Ok(Verdict::new(
        worst < 1e-10,
        format!(
            "max |scatter - full| = {worst:.2e} over 20 steps, {} paths, {} neurons",
            paths.len(),
            ensemble.len()
        ),
    ))
}

fn digest(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for x in values {
        h.update(x.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn digest_rows(t: &Tensor, rows: impl Iterator<Item = usize>) -> String {
    let picked: Vec<f64> = rows.flat_map(|k| t.row(k).to_vec()).collect();
    digest(&picked)
}

fn criterion_6(fx: &Fixtures) -> Result<Verdict> {
    let (base, ensemble, queries) = edit_fixture(fx)?;
    let out = edit(base.clone(), &ensemble, &queries, &EditConfig::default())?;
    let edited = out.model.materialize();
    let mut mismatches = Vec::new();
    let mut changed_rows = 0usize;
    for (path, w) in base.iter() {
        let w_hat = edited.get(path)?;
        match ensemble.paths.get(path) {
            None => {
                if w.shape() != w_hat.shape() || digest(w.data()) != digest(w_hat.data()) {
                    mismatches.push(path.to_string());
                }
            }
            Some(sel) => {
                let rest = || (0..w.rows()).filter(|k| sel.binary_search(k).is_err());
                if digest_rows(w, rest()) != digest_rows(w_hat, rest()) {
                    mismatches.push(format!("{path} (unselected rows)"));
                }
                changed_rows += sel.iter().filter(|&&k| w.row(k) != w_hat.row(k)).count();
            }
        }
    }
    let pass = mismatches.is_empty() && changed_rows > 0;
    Ok(Verdict::new(
        pass,
        if mismatches.is_empty() {
            format!(
                "all frozen hashes equal; {changed_rows} of {} ensemble rows changed",
                ensemble.len()
            )
        } else {
            format!("hash mismatch: {}", mismatches.join(", "))
        },
    ))
}

/// Pretrain the toy model, edit 10 facts, and return the report bytes with
/// the verdicts for criteria 7 and 8.
fn toy_run(fx: &Fixtures) -> Result<(Vec<u8>, Verdict, Verdict, Checkpoint, f64)> {
    let start = Instant::now();
    let wc = WorldConfig::default();
    let vocab = wc.build()?.2.vocab.len();
    let (ckpt, acc) = pretrain_world(&wc, &toy_model_config(vocab, 1), &toy_pretrain_config(1))?;
    let recall = acc.primary;
    let lab = Lab::new(ckpt.clone(), fx.edit_records(10)?)?;
    let dir = tempfile::tempdir().map_err(|e| KneError::io(std::env::temp_dir(), e))?;
    let run = run_pipeline(&lab, &PipelineConfig::seeded(7), Some(dir.path()))?;
    let path = dir.path().join("report.json");
    let bytes = std::fs::read(&path).map_err(|e| KneError::io(&path, e))?;
    let secs = start.elapsed().as_secs_f64();
    let r = &run.report;
    let loc = r.locality.unwrap_or(0.0);
    let ratio = r.fluency / r.fluency_unedited;
    let c7 = Verdict::new(
        recall >= 0.95
            && r.edit_success >= 0.9
            && loc >= 0.8
            && r.locality_probes >= 50
            && (0.8..=1.2).contains(&ratio)
            && secs < 600.0,
        format!(
            "recall {recall:.3}, ES {:.3}, LOC {loc:.3} over {} probes, fluency {:.3} vs {:.3} unedited (ratio {ratio:.3}), {secs:.0} s",
            r.edit_success, r.locality_probes, r.fluency, r.fluency_unedited
        ),
    );
    let stats = ensemble_stats(&run.ensemble, &ckpt.params)?;
    let c8 = Verdict::new(
        (0.005..=0.02).contains(&stats.fraction),
        format!(
            "{} neurons, {} of {} params editable ({:.2}%)",
            stats.neurons,
            stats.editable_params,
            stats.total_params,
            100.0 * stats.fraction
        ),
    );
    Ok((bytes, c7, c8, ckpt, secs))
}

fn criterion_9(fx: &Fixtures, ckpt: &Checkpoint) -> Result<Verdict> {
    let lab = Lab::new(ckpt.clone(), fx.edit_records(25)?)?;
    let spec = ExperimentSpec {
        kind: ExperimentKind::BatchSizeSweep,
        grid: vec![1.0, 5.0, 10.0, 25.0],
        pipeline: PipelineConfig::seeded(7),
    };
    let dir = tempfile::tempdir().map_err(|e| KneError::io(std::env::temp_dir(), e))?;
    let out = run_experiment(&lab, &spec, Some(dir.path()))?;
    let csv = dir.path().join("batch-size-sweep.csv");
    let text = std::fs::read_to_string(&csv).map_err(|e| KneError::io(&csv, e))?;
    let lines = text.lines().count();
    let batch_lines = out.batch_rows.len();
    let es = |i: usize| out.rows[i].edit_success;
    let deviation = out.summary["observations"]["deviation"].as_bool();
    let pass = lines == 5 && batch_lines == 25 + 5 + 3 + 1 && deviation.is_some();
    Ok(Verdict::new(
        pass,
        format!(
            "CSV with {} data rows and {batch_lines} batch rows; ES(1) {:.3}, ES(25) {:.3}, deviation flagged: {}",
            lines.saturating_sub(1),
            es(0),
            es(3),
            deviation.map_or("missing".to_string(), |d| d.to_string())
        ),
    ))
}

fn run(
    id: usize,
    name: &str,
    results: &mut Vec<(usize, bool)>,
    f: impl FnOnce() -> Result<Verdict>,
) {
    let start = Instant::now();
    let v = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(v)) => v,
        Ok(Err(e)) => Verdict::new(false, format!("error: {e}")),
        Err(_) => Verdict::new(false, "panicked"),
    };
    record(id, name, results, v, start.elapsed().as_secs_f64());
}

fn record(id: usize, name: &str, results: &mut Vec<(usize, bool)>, v: Verdict, secs: f64) {
    let tag = if v.pass { "PASS" } else { "FAIL" };
    println!("criterion {id:>2} {tag} {name}: {} [{secs:.1} s]", v.detail);
    results.push((id, v.pass));
}

fn main() -> ExitCode {
    let mut results = Vec::new();
    run(1, "gradient correctness", &mut results, criterion_1);

    let start = Instant::now();
    let fx = match Fixtures::new() {
        Ok(fx) => {
            println!(
                "two-layer model pretrained [{:.1} s]",
                start.elapsed().as_secs_f64()
            );
            Some(fx)
        }
        Err(e) => {
            println!("fixture error: {e}");
            None
        }
    };
    let Some(fx) = fx else {
        for (id, name) in (2..=10).zip([
            "integrated-gradient completeness",
            "exact vs joint agreement",
            "selection exactness",
            "masked-update equivalence",
            "frozen parameters",
            "end-to-end toy edit",
            "parameter footprint",
            "batch sweep",
            "determinism",
        ]) {
            record(
                id,
                name,
                &mut results,
                Verdict::new(false, "fixtures unavailable"),
                0.0,
            );
        }
        return summarize(&results);
    };

    run(2, "integrated-gradient completeness", &mut results, || {
        criterion_2(&fx)
    });
    run(3, "exact vs joint agreement", &mut results, || {
        criterion_3(&fx)
    });
    run(4, "selection exactness", &mut results, criterion_4);
    run(5, "masked-update equivalence", &mut results, || {
        criterion_5(&fx)
    });
    run(6, "frozen parameters", &mut results, || criterion_6(&fx));

    let first = catch_unwind(AssertUnwindSafe(|| toy_run(&fx)));
    match first {
        Ok(Ok((bytes, c7, c8, ckpt, secs))) => {
            record(7, "end-to-end toy edit", &mut results, c7, secs);
            record(8, "parameter footprint", &mut results, c8, 0.0);
            run(9, "batch sweep", &mut results, || criterion_9(&fx, &ckpt));
            run(10, "determinism", &mut results, || {
                let (again, ..) = toy_run(&fx)?;
                Ok(Verdict::new(
                    again == bytes,
                    format!(
                        "repeat report {} ({} bytes)",
                        if again == bytes {
                            "byte-identical"
                        } else {
                            "differs"
                        },
                        bytes.len()
                    ),
                ))
            });
        }
        other => {
            let msg = match other {
                Ok(Err(e)) => format!("error: {e}"),
                _ => "panicked".to_string(),
            };
            for (id, name) in [
                (7, "end-to-end toy edit"),
                (8, "parameter footprint"),
                (9, "batch sweep"),
                (10, "determinism"),
            ] {
                record(
                    id,
                    name,
                    &mut results,
                    Verdict::new(false, msg.clone()),
                    0.0,
                );
            }
        }
    }
    summarize(&results)
}

fn summarize(results: &[(usize, bool)]) -> ExitCode {
    let failed: Vec<String> = results
        .iter()
        .filter(|(_, ok)| !ok)
        .map(|(id, _)| id.to_string())
        .collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(" (criteria {})", failed.join(", "))
        }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
