// SPDX-License-Identifier: Apache-2.0

use super::*;
use crate::model::{answer_probability, ModelConfig};

fn base() -> Arc<NamedParams> {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 8,
        d_ff: 12,
        n_heads: 2,
        vocab_size: 9,
        max_seq_len: 10,
        seed: 17,
    };
    Arc::new(NamedParams::init(&cfg).unwrap())
}

fn ensemble(entries: &[(&str, Vec<usize>)]) -> KnowledgeNeuronalEnsemble {
    KnowledgeNeuronalEnsemble {
        threshold: 0.0,
        keep_fraction: 0.1,
        paths: entries
            .iter()
            .map(|(p, v)| (p.to_string(), v.clone()))
            .collect(),
        scope: Default::default(),
        layer_thresholds: BTreeMap::new(),
    }
}

fn queries() -> Vec<AnswerQuery> {
    vec![
        AnswerQuery::new(vec![1, 2, 3], vec![4]),
        AnswerQuery::new(vec![5, 6], vec![7, 8]),
    ]
}

fn config() -> EditConfig {
    EditConfig {
        max_steps: 15,
        lr: 0.1,
        verify_frozen: true,
        ..Default::default()
    }
}

fn block(rows: usize, idx: Vec<usize>, w: Tensor) -> DeltaParams {
    let mut blocks = BTreeMap::new();
    blocks.insert(
        "p".to_string(),
        DeltaBlock {
            indices: idx,
            rows,
            w_kne: w,
        },
    );
    DeltaParams { blocks }
}

fn ramp(rows: usize, cols: usize) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|i| i as f64 * 0.37 - 1.1).collect(),
    )
    .unwrap()
}

#[test]
fn expand_delta_cases() {
    let d = block(5, vec![1, 3], Tensor::zeros(&[2, 4]));
    assert!(expand_delta(&d, "p")
        .unwrap()
        .data()
        .iter()
        .all(|&x| x == 0.0));

    let w = ramp(3, 4);
    let full = expand_delta(&block(3, vec![0, 1, 2], w.clone()), "p").unwrap();
    assert!(full.bit_eq(&w));

    let w = ramp(2, 4);
    let dw = expand_delta(&block(6, vec![2, 5], w.clone()), "p").unwrap();
    assert_eq!(dw.row(2), w.row(0));
    assert_eq!(dw.row(5), w.row(1));
    assert!(dw.row(0).iter().chain(dw.row(4)).all(|&x| x == 0.0));

    assert!(expand_delta(&block(2, vec![0, 2], ramp(2, 4)), "p").is_err());
    assert!(expand_delta(&d, "q").is_err());
}

#[test]
fn apply_update_algebra() {
    let w = ramp(4, 3);
    assert!(apply_update(&w, &Tensor::zeros(&[4, 3]), 1.0, 2)
        .unwrap()
        .bit_eq(&w));

    let n = 7;
    let ones = Tensor::ones(&[4, 3]);
    let up = apply_update(&w, &ones, (n as f64).sqrt(), n).unwrap();
    for (a, b) in up.data().iter().zip(w.data()) {
        assert_eq!(*a, b + 1.0);
    }

    let a = apply_update(&Tensor::zeros(&[4, 3]), &ones, 1.0, 4).unwrap();
    let b = apply_update(&Tensor::zeros(&[4, 3]), &ones, 1.0, 16).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert_eq!(*y, 0.5 * x);
    }

    assert!(apply_update(&w, &ones, 1.0, 0).is_err());
    assert!(apply_update(&w, &Tensor::zeros(&[4, 3]), 1.0, 0).is_ok());
    assert!(apply_update(&w, &Tensor::zeros(&[3, 4]), 1.0, 1).is_err());
}

#[test]
fn negative_zero_rows_stay_bit_identical() {
    let mut w = ramp(3, 2);
    w.row_mut(0).fill(-0.0);
    let mut dw = Tensor::zeros(&[3, 2]);
    dw.row_mut(1).fill(0.5);
    let up = apply_update(&w, &dw, 1.0, 1).unwrap();
    assert!(up.row(0).iter().all(|x| x.to_bits() == (-0.0f64).to_bits()));
}

#[test]
fn satisfied_edits_stop_at_step_zero() {
    let b = base();
    let e = ensemble(&[("layers.1.mlp.down_proj", vec![0, 2])]);
    let cfg = EditConfig {
        early_stop_prob: 1e-9,
        ..config()
    };
    let out = edit(b.clone(), &e, &queries(), &cfg).unwrap();
    assert!(out.trace.early_stopped);
    assert_eq!(out.trace.steps.len(), 1);
    assert!(out
        .delta
        .blocks
        .values()
        .all(|d| d.w_kne.data().iter().all(|&x| x == 0.0)));
    assert!(out.model.materialize().fingerprint() == b.fingerprint());
}

#[test]
fn editing_raises_target_probability_and_freezes_the_rest() {
    let b = base();
    let e = ensemble(&[
        ("layers.0.mlp.up_proj", vec![1, 4, 9]),
        ("layers.1.mlp.down_proj", vec![0, 2]),
        ("layers.1.self_attn.v_proj", vec![7]),
    ]);
    let qs = queries();
    let out = edit(b.clone(), &e, &qs, &config()).unwrap();
    let first = out.trace.steps.first().unwrap();
    let best = out.trace.steps[out.trace.best_step];
    assert!(best.loss < first.loss);
    let before = answer_probability(b.as_ref(), &qs[0]).unwrap().product;
    let after = answer_probability(&out.model, &qs[0]).unwrap().product;
    assert!(after > before);

    for path in b.paths() {
        let w = b.get(path).unwrap();
        let w_hat = out.model.param(path).unwrap();
        match e.paths.get(path) {
            None => assert!(w.bit_eq(w_hat)),
            Some(idx) => {
                for k in 0..w.rows() {
                    let same = w
                        .row(k)
                        .iter()
                        .zip(w_hat.row(k))
                        .all(|(a, b)| a.to_bits() == b.to_bits());
                    assert_eq!(same, !idx.contains(&k), "{path} row {k}");
                }
            }
        }
    }

    // Reconstruction from the returned blocks.
    for (path, blk) in &out.delta.blocks {
        let c = 1.0 / (blk.n() as f64).sqrt();
        let dw = expand_delta(&out.delta, path).unwrap();
        let w = b.get(path).unwrap();
        let got = out.model.param(path).unwrap();
        for ((x, y), d) in got.data().iter().zip(w.data()).zip(dw.data()) {
            assert!((x - (y + c * d)).abs() <= 1e-12);
        }
    }

    let again = edit(b.clone(), &e, &qs, &config()).unwrap();
    assert_eq!(
        again.model.materialize().fingerprint(),
        out.model.materialize().fingerprint()
    );
}

#[test]
fn trace_warns_when_target_not_reached() {
    let b = base();
    let e = ensemble(&[("layers.0.self_attn.q_proj", vec![3])]);
    let cfg = EditConfig {
        max_steps: 2,
        lr: 1e-4,
        ..config()
    };
    let out = edit(b, &e, &queries(), &cfg).unwrap();
    assert!(!out.trace.early_stopped);
    assert!(out.trace.warning.is_some());
    assert_eq!(out.trace.steps.len(), 3);
}

#[test]
fn argument_errors() {
    let b = base();
    let qs = queries();
    assert!(matches!(
        edit(b.clone(), &ensemble(&[]), &qs, &config()),
        Err(KneError::EmptyEnsemble { .. })
    ));
    let e = ensemble(&[("layers.0.mlp.down_proj", vec![1])]);
    assert!(edit(b.clone(), &e, &[], &config()).is_err());
    assert!(edit(b.clone(), &ensemble(&[("embed", vec![1])]), &qs, &config()).is_err());
    assert!(edit(
        b.clone(),
        &ensemble(&[("layers.0.mlp.down_proj", vec![8])]),
        &qs,
        &config()
    )
    .is_err());
    let bad = EditConfig {
        alpha: 0.0,
        ..config()
    };
    assert!(edit(b.clone(), &e, &qs, &bad).is_err());
    let long = vec![AnswerQuery::new(vec![1; 10], vec![2, 3])];
    assert!(edit(b, &e, &long, &config()).is_err());
}

#[test]
fn masked_full_matrix_trajectory() {
    let b = base();
    let path = "layers.1.mlp.gate_proj";
    let idx = vec![2, 5, 11];
    let e = ensemble(&[(path, idx.clone())]);
    let qs = queries();
    let cfg = config();
    let mut editor = EnsembleEditor::new(b.as_ref(), &e, &qs, cfg).unwrap();

    let w = b.get(path).unwrap().clone();
    let c = 1.0 / (idx.len() as f64).sqrt();
    let mut full = vec![Tensor::zeros(w.shape())];
    let mut adam = Adam::new(cfg.adam, &full);
    for _ in 0..8 {
        editor.step().unwrap();
        let tape = Tape::new();
        let mut bind = Bindings::constants(&tape, b.as_ref()).unwrap();
        let leaf = tape.leaf(full[0].clone());
        let w_hat = tape
            .add(tape.constant(w.clone()), tape.scale(leaf, c))
            .unwrap();
        bind.set(path, w_hat).unwrap();
        let nll = answer_nll(b.config(), &tape, &bind, &qs).unwrap();
        let loss = tape.scale(tape.sum(nll), 1.0 / nll.value().numel() as f64);
        let mut g = tape.backward(loss).unwrap().take(leaf);
        for k in 0..g.rows() {
            if !idx.contains(&k) {
                g.row_mut(k).fill(0.0);
            }
        }
        adam.step(&mut full, &[g], cfg.lr);
        let scattered = expand_delta(editor.delta(), path).unwrap();
        assert!(scattered.max_abs_diff(&full[0]) < 1e-12);
    }
}

#[test]
fn batch_stream_matches_single_and_sequential_edits() {
    let b = base();
    let e = ensemble(&[("layers.1.mlp.down_proj", vec![0, 3, 5])]);
    let qs = queries();
    let cfg = config();

    let joint = edit(b.clone(), &e, &qs, &cfg).unwrap();
    let stream = edit_batch_stream(
        b.clone(),
        EnsemblePlan::Shared(&e),
        std::slice::from_ref(&qs),
        &cfg,
    )
    .unwrap();
    assert_eq!(stream.len(), 1);
    assert_eq!(
        stream[0].model.materialize().fingerprint(),
        joint.model.materialize().fingerprint()
    );

    let singles = into_batches(&qs, 1).unwrap();
    let stream = edit_batch_stream(b.clone(), EnsemblePlan::Shared(&e), &singles, &cfg).unwrap();
    let first = edit(b.clone(), &e, &qs[..1], &cfg).unwrap();
    let second = edit(Arc::new(first.model.materialize()), &e, &qs[1..], &cfg).unwrap();
    assert_eq!(
        stream[1].model.materialize().fingerprint(),
        second.model.materialize().fingerprint()
    );
    assert_eq!(stream[1].model.base().fingerprint(), b.fingerprint());

    let per = vec![e.clone()];
    assert!(edit_batch_stream(b, EnsemblePlan::PerBatch(&per), &singles, &cfg).is_err());
}

#[test]
fn edited_file_round_trip() {
    let b = base();
    let e = ensemble(&[("layers.0.mlp.down_proj", vec![1, 6])]);
    let out = edit(b.clone(), &e, &queries(), &config()).unwrap();
    let file = EditedFile::new(&out.model, e, config(), vec![out.trace.clone()]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("edited.json");
    file.save(&path).unwrap();
    let back = EditedFile::load(&path).unwrap();
    assert_eq!(back, file);
    let model = back.attach(b.clone()).unwrap();
    assert_eq!(
        model.materialize().fingerprint(),
        out.model.materialize().fingerprint()
    );

    let other = Arc::new(NamedParams::zeros(b.config()).unwrap());
    assert!(back.attach(other).is_err());
}
