//! `gt eval`: load a checkpoint and report accuracy plus macro-F1 on a
//! split, with full-graph (strategy-free) inference.

use gt_core::trainer::{load_into, read_checkpoint, Session};
use gt_core::{CoreError, Result};

use crate::commands::{load_bundle, load_config};
use crate::EvalArgs;

pub fn run(args: &EvalArgs) -> Result<u8> {
    let cfg = load_config(&args.common)?;
    let bundle = load_bundle(&cfg)?;
    let model = cfg.model_spec(&bundle)?;
    let training = cfg.training_config();

    let checkpoint = read_checkpoint(&args.checkpoint)?;
    let session = Session::new(&bundle, &model, &training, cfg.partitions, cfg.contiguous)?;
    let mut params = (*session.manager.latest().params).clone();
    load_into(&checkpoint, &model.spec_hash(), &mut params)?;

    let split = match args.split.as_str() {
        "train" => &bundle.train_mask,
        "val" => &bundle.validation_mask,
        "test" => &bundle.test_mask,
        other => {
            return Err(CoreError::Config(format!(
                "unknown split {other}; expected train, val or test"
            )))
        }
    };
    if split.is_empty() {
        return Err(CoreError::Config(format!(
            "split {} is empty in this dataset",
            args.split
        )));
    }
    let report = session.evaluate(&bundle, &params, split, bundle.class_count)?;
    println!(
        "split={} nodes={} accuracy={:.6} macro_f1={:.6} (checkpoint version {} step {})",
        args.split, report.total, report.accuracy, report.macro_f1, checkpoint.version,
        checkpoint.step,
    );
    Ok(0)
}
