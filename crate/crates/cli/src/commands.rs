//! The six subcommands. Each returns the process exit code on the happy
//! path; typed errors bubble to `main`, which maps them to exit codes.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ppmseg_core::checkpoint::{load_checkpoint, Checkpoint};
use ppmseg_core::data::{kfold, load_dataset, resize_for_net, split_80_20, Sample};
use ppmseg_core::error::{Error, Result};
use ppmseg_core::gradcheck::run_suite;
use ppmseg_core::metrics::{aggregate, MetricsRecord, MetricsReport};
use ppmseg_core::no_grad;
use ppmseg_core::postprocess::{postprocess_pipeline, write_mask_png};
use ppmseg_core::toy::write_toy_dataset;
use ppmseg_core::trainer::{evaluate, fit, EvalSample};
use serde::Serialize;

use crate::config::{load_run_config, RunConfig};

/// Command-line overrides for paths and seed baked into the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

fn load_with_overrides(config: &Path, ov: &Overrides) -> Result<RunConfig> {
    let mut cfg = load_run_config(config)?;
    if let Some(d) = &ov.data {
        cfg.data_dir = d.clone();
    }
    if let Some(o) = &ov.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = ov.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct PerImageRow<'a> {
    id: &'a str,
    #[serde(flatten)]
    metrics: MetricsRecord,
}

#[derive(Serialize)]
struct MetricsDoc<'a> {
    per_image: Vec<PerImageRow<'a>>,
    mean: MetricsRecord,
}

/// Render a report as pretty JSON with one entry per image plus the mean.
fn metrics_json(ids: &[String], report: &MetricsReport) -> Result<String> {
    if ids.len() != report.per_image.len() {
        return Err(Error::Contract(format!(
            "{} ids for {} per-image records",
            ids.len(),
            report.per_image.len()
        )));
    }
    let doc = MetricsDoc {
        per_image: ids
            .iter()
            .zip(&report.per_image)
            .map(|(id, m)| PerImageRow { id, metrics: *m })
            .collect(),
        mean: report.mean,
    };
    let mut text = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Contract(format!("metrics serialization: {e}")))?;
    text.push('\n');
    Ok(text)
}

fn eval_samples(val: &[Sample], net_size: (usize, usize)) -> Result<Vec<EvalSample>> {
    val.iter()
        .map(|s| {
            if s.mask.is_none() {
                return Err(Error::Ingestion(format!(
                    "sample '{}' has no reference mask",
                    s.id
                )));
            }
            EvalSample::from_sample(s, net_size)
        })
        .collect()
}

/// Train on an 80/20 split; write the best checkpoint, the per-epoch
/// history CSV, and the final validation metrics JSON.
pub fn cmd_train(config: &Path, ov: &Overrides) -> Result<u8> {
    let cfg = load_with_overrides(config, ov)?;
    let samples = load_dataset(&cfg.data_dir)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let plan = split_80_20(&ids, cfg.train.seed)?;
    if plan.validation.is_empty() {
        return Err(Error::Ingestion(format!(
            "dataset has {} samples; an 80/20 split needs at least 5",
            ids.len()
        )));
    }
    let val_ids: BTreeSet<&String> = plan.validation.iter().collect();
    let (val, train): (Vec<Sample>, Vec<Sample>) =
        samples.into_iter().partition(|s| val_ids.contains(&s.id));
    println!(
        "training on {} samples, validating on {} (seed {})",
        train.len(),
        val.len(),
        cfg.train.seed
    );

    let (ck, history) = fit(&cfg.train, &train, &val)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let ckpt_path = cfg.checkpoint_path();
    ck.write_file(&ckpt_path)?;
    std::fs::write(cfg.out_dir.join("history.csv"), history.to_csv())?;

    // Final metrics come from re-reading the checkpoint that was just
    // written, so the reported numbers are those of the shipped artifact.
    let model = Checkpoint::read_file(&ckpt_path)?.to_model()?;
    let evals = eval_samples(&val, model.config().input_size)?;
    let report = evaluate(&model, &evals)?;
    let eval_ids: Vec<String> = evals.iter().map(|s| s.id.clone()).collect();
    std::fs::write(
        cfg.out_dir.join("metrics.json"),
        metrics_json(&eval_ids, &report)?,
    )?;
    println!(
        "best epoch {} ({} trained); validation JA {:.4}; wrote {}",
        ck.epoch,
        history.rows.len(),
        report.mean.ja,
        ckpt_path.display()
    );
    Ok(0)
}

const FOLDS: usize = 5;

/// Five-fold cross-validation; writes `folds.csv` with one row per fold
/// plus a mean row.
pub fn cmd_crossval(config: &Path, ov: &Overrides) -> Result<u8> {
    let cfg = load_with_overrides(config, ov)?;
    let samples = load_dataset(&cfg.data_dir)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let plans = kfold(&ids, FOLDS, cfg.train.seed)?;

    let mut rows: Vec<MetricsRecord> = Vec::with_capacity(plans.len());
    for (i, plan) in plans.iter().enumerate() {
        let val_ids: BTreeSet<&String> = plan.validation.iter().collect();
        let train: Vec<Sample> = samples
            .iter()
            .filter(|s| !val_ids.contains(&s.id))
            .cloned()
            .collect();
        let val: Vec<Sample> = samples
            .iter()
            .filter(|s| val_ids.contains(&s.id))
            .cloned()
            .collect();
        let mut fold_cfg = cfg.train.clone();
        // Distinct init per fold; the fold assignment itself stays tied to
        // the base seed.
        fold_cfg.seed = cfg.train.seed.wrapping_add(i as u64);
        let (ck, _) = fit(&fold_cfg, &train, &val)?;
        let model = ck.to_model()?;
        let evals = eval_samples(&val, model.config().input_size)?;
        let report = evaluate(&model, &evals)?;
        println!(
            "fold {i}: JA {:.4} DC {:.4} SN {:.4} SP {:.4}",
            report.mean.ja, report.mean.dc, report.mean.sn, report.mean.sp
        );
        rows.push(report.mean);
    }

    let mean = aggregate(&rows)?;
    let mut csv = String::new();
    csv.push_str("# five-fold cross-validation results for this run's dataset and scale.\n");
    csv.push_str(
        "# reference full-scale training (ISIC 2018, 2594 images, 192x256) reaches a\n",
    );
    csv.push_str("# five-fold mean Jaccard near 83.7%; desk-scale runs are not comparable.\n");
    csv.push_str("fold,ja,dc,sn,sp,thresholded_ja\n");
    let fmt = |label: &str, r: &MetricsRecord| {
        format!(
            "{label},{},{},{},{},{}\n",
            r.ja, r.dc, r.sn, r.sp, r.thresholded_ja
        )
    };
    for (i, r) in rows.iter().enumerate() {
        csv.push_str(&fmt(&i.to_string(), r));
    }
    csv.push_str(&fmt("mean", &mean));
    std::fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join("folds.csv");
    std::fs::write(&path, csv)?;
    println!(
        "mean over {FOLDS} folds: JA {:.4} DC {:.4}; wrote {}",
        mean.ja,
        mean.dc,
        path.display()
    );
    Ok(0)
}

/// Predict a mask for every image in a directory and write
/// `<id>_mask.png` files at each image's original resolution.
pub fn cmd_predict(checkpoint: &Path, data: &Path, out: &Path) -> Result<u8> {
    let model = load_checkpoint(checkpoint)?;
    let samples = load_dataset(data)?;
    if samples.is_empty() {
        return Err(Error::Ingestion(format!(
            "no images found in {}",
            data.display()
        )));
    }
    std::fs::create_dir_all(out)?;
    for s in &samples {
        let net = resize_for_net(s, model.config().input_size)?;
        let prob = no_grad(|| model.forward(&net.image))?;
        let mask = postprocess_pipeline(&prob, s.original_size())?;
        write_mask_png(&mask, &out.join(format!("{}_mask.png", s.id)))?;
    }
    println!("wrote {} masks to {}", samples.len(), out.display());
    Ok(0)
}

/// Evaluate a checkpoint against a dataset with reference masks; write (or
/// print) a metrics JSON with per-image and mean JA/DC/SN/SP and the
/// 65%-thresholded Jaccard.
pub fn cmd_eval(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<u8> {
    let model = load_checkpoint(checkpoint)?;
    let samples = load_dataset(data)?;
    let evals = eval_samples(&samples, model.config().input_size)?;
    let report = evaluate(&model, &evals)?;
    let ids: Vec<String> = evals.iter().map(|s| s.id.clone()).collect();
    let json = metrics_json(&ids, &report)?;
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("metrics.json");
            std::fs::write(&path, json)?;
            println!(
                "{} images: JA {:.4} DC {:.4} SN {:.4} SP {:.4} thresholded JA {:.4}; wrote {}",
                evals.len(),
                report.mean.ja,
                report.mean.dc,
                report.mean.sn,
                report.mean.sp,
                report.mean.thresholded_ja,
                path.display()
            );
        }
        None => print!("{json}"),
    }
    Ok(0)
}

/// Check every backward pass against central differences and print the
/// error table. Exit 0 only if every row passes.
pub fn cmd_gradcheck(seed: u64, inject_fault: bool) -> Result<u8> {
    let report = run_suite(seed, inject_fault)?;
    print!("{}", report.table());
    if report.all_pass() {
        println!("all gradients verified");
        Ok(0)
    } else {
        println!("gradient verification FAILED");
        Ok(4)
    }
}

/// Generate a synthetic dataset of ellipse lesions on textured backgrounds.
pub fn cmd_make_toy(out: &Path, count: usize, seed: u64) -> Result<u8> {
    if count == 0 {
        return Err(Error::Contract("count must be >= 1".into()));
    }
    let ids = write_toy_dataset(out, count, seed)?;
    println!(
        "wrote {} image/mask pairs to {}",
        ids.len(),
        out.display()
    );
    Ok(0)
}
