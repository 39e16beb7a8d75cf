//! The JSON run configuration consumed by `train` and `crossval`.

use ppmseg_core::error::{Error, Result};
use ppmseg_core::trainer::TrainConfig;
use serde::Deserialize;
use std::path::{Path, PathBuf};

/// Everything a training run needs: the full optimization/model
/// configuration plus the artifact paths. Unknown keys are rejected at
/// every nesting level so a misspelled hyperparameter fails loudly instead
/// of silently training with a default.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Directory holding `<id>.<png|jpg|jpeg>` images and
    /// `<id>_segmentation.png` masks (or a `manifest.csv`).
    pub data_dir: PathBuf,
    /// Directory that receives checkpoints, CSV files, and reports.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Best-checkpoint file name; relative paths resolve inside `out_dir`.
    #[serde(default = "default_checkpoint")]
    pub checkpoint: PathBuf,
    /// Optimization, augmentation, and model settings.
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_checkpoint() -> PathBuf {
    PathBuf::from("model.ckpt")
}

impl RunConfig {
    /// Where the best checkpoint is written.
    pub fn checkpoint_path(&self) -> PathBuf {
        if self.checkpoint.is_absolute() {
            self.checkpoint.clone()
        } else {
            self.out_dir.join(&self.checkpoint)
        }
    }
}

/// Load and validate a run configuration. Parse errors report the file and
/// the line/column of the offending token.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.train.validate()?;
    Ok(cfg)
}
