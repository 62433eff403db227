// SPDX-License-Identifier: Apache-2.0

//! Pretrains the toy model on the default synthetic world, edits ten facts
//! with the default pipeline and prints the report.

use std::time::Instant;

use kne_core::data::make_edit_set;
use kne_core::experiments::{
    pretrain_world, run_pipeline, toy_model_config, toy_pretrain_config, Lab, PipelineConfig,
    WorldConfig,
};

fn main() -> kne_core::Result<()> {
    let start = Instant::now();
    let world_config = WorldConfig::default();
    let (world, templates, corpus) = world_config.build()?;
    let model_config = toy_model_config(corpus.vocab.len(), 1);
    let (checkpoint, accuracy) =
        pretrain_world(&world_config, &model_config, &toy_pretrain_config(1))?;
    println!("pretrained in {:.1?}: {accuracy:?}", start.elapsed());

    let records = make_edit_set(&world, &templates, 10, 5, 7)?;
    let lab = Lab::new(checkpoint, records)?;
    let run = run_pipeline(&lab, &PipelineConfig::seeded(7), None)?;
    let r = &run.report;
    println!(
        "ES {:.3} PORT {:?} LOC {:?} fluency {:.3} (unedited {:.3}) editable {:.4}",
        r.edit_success,
        r.portability,
        r.locality,
        r.fluency,
        r.fluency_unedited,
        run.stats.fraction
    );
    for t in run.traces() {
        println!(
            "trace: {} evaluations, best {}, early stop {}",
            t.steps.len(),
            t.best_step,
            t.early_stopped
        );
    }
    println!("total {:.1?}", start.elapsed());
    Ok(())
}
