//! `gt train`: run the configured training strategy, writing metrics,
//! checkpoints and run metadata.

use std::sync::atomic::{AtomicBool, Ordering};

use gt_core::cluster::{cluster_louvain, load_clusters};
use gt_core::trainer::{run_training, Strategy, TrainOptions};
use gt_core::{CoreError, Result};

use crate::commands::{ensure_out_dir, load_bundle, load_config};
use crate::CommonArgs;

static STOP: AtomicBool = AtomicBool::new(false);

extern "C" fn on_signal(_sig: libc::c_int) {
    STOP.store(true, Ordering::Relaxed);
}

fn install_signal_handler() {
    unsafe {
        let handler = on_signal as *const () as libc::sighandler_t;
        libc::signal(libc::SIGINT, handler);
        libc::signal(libc::SIGTERM, handler);
    }
}

pub fn run(args: &CommonArgs) -> Result<u8> {
    let cfg = load_config(args)?;
    let bundle = load_bundle(&cfg)?;
    ensure_out_dir(&cfg.out_dir)?;
    let model = cfg.model_spec(&bundle)?;
    let training = cfg.training_config();

    let clusters = if matches!(cfg.strategy, Strategy::Cluster) {
        Some(match &cfg.clusters {
            Some(path) => load_clusters(path, bundle.graph.num_nodes)?,
            None => cluster_louvain(&bundle.graph, cfg.seed),
        })
    } else {
        None
    };

    // Run metadata: enough to audit how the numbers were produced.
    let meta_path = cfg.out_dir.join("run.meta");
    let meta = format!(
        "spec_hash={}\nnormalization={}\ndeterministic={}\npartitions={}\n--- config ---\n{}",
        model.spec_hash(),
        cfg.normalization.as_str(),
        cfg.deterministic,
        cfg.partitions,
        cfg.serialize()
    );
    std::fs::write(&meta_path, meta).map_err(|e| CoreError::Io {
        path: meta_path.display().to_string(),
        source: e,
    })?;

    install_signal_handler();
    let metrics = cfg.out_dir.join("metrics.tsv");
    let best = cfg.out_dir.join("checkpoint_best.bin");
    let final_ck = cfg.out_dir.join("checkpoint_final.bin");
    let report = run_training(&TrainOptions {
        bundle: &bundle,
        model: &model,
        config: &training,
        partitions: cfg.partitions,
        contiguous_partitions: cfg.contiguous,
        clusters: clusters.as_ref(),
        metrics_path: Some(&metrics),
        checkpoint_best: Some(&best),
        checkpoint_final: Some(&final_ck),
        stop: Some(&STOP),
    })?;

    println!(
        "steps={} final_loss={:.6} train_acc={:.6} best_val={} test_acc={} test_macro_f1={} \
         msgs={} bytes={} gathers={} frames={} wall_ms={}{}",
        report.steps_run,
        report.final_loss,
        report.final_train_acc,
        report
            .best_val_acc
            .map(|v| format!("{v:.6}"))
            .unwrap_or_else(|| "-".into()),
        report
            .test_acc
            .map(|v| format!("{v:.6}"))
            .unwrap_or_else(|| "-".into()),
        report
            .test_macro_f1
            .map(|v| format!("{v:.6}"))
            .unwrap_or_else(|| "-".into()),
        report.total_messages,
        report.counters.bytes,
        report.counters.gather_calls,
        report.counters.frames_allocated,
        report.wall_ms_total,
        if report.stopped_early { " (early stop)" } else { "" },
    );
    Ok(0)
}
