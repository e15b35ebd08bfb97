pub mod eval;
pub mod gradcheck;
pub mod oracle;
pub mod partition;
pub mod train;

use std::path::Path;

use gt_core::graph::io::load_dataset;
use gt_core::graph::IngestOptions;
use gt_core::{DatasetBundle, Result};

use crate::config::RunConfig;
use crate::CommonArgs;

/// Loads the config with CLI overrides applied.
pub fn load_config(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.deterministic {
        cfg.deterministic = true;
    }
    if let Some(p) = args.partitions {
        cfg.partitions = p;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_bundle(cfg: &RunConfig) -> Result<DatasetBundle> {
    let bundle = load_dataset(
        &cfg.edges,
        &cfg.features,
        &cfg.labels,
        IngestOptions {
            symmetrize: cfg.symmetrize,
            add_self_loops: cfg.self_loops,
        },
    )?;
    bundle.graph.check_invariants()?;
    Ok(bundle)
}

pub fn ensure_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| gt_core::CoreError::Io {
        path: dir.display().to_string(),
        source: e,
    })
}
