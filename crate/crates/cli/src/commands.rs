//! One function per subcommand. Each returns its result as a value as well
//! as printing it, so tests need not parse stdout.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serpent_core::checkpoint;
use serpent_core::model::{DscFormer, SIZE_MULTIPLE};
use serpent_core::suite::{units, Scope};
use serpent_core::train::{evaluate, predict_masks, train, EpochRecord, Pair};
use serpent_core::ParamStore;
use serpent_data::{build_dataset, load_split, pgm, DatasetManifest, Difficulty, GrayImage, Split};
use serpent_metrics::MetricsReport;

use crate::{CliError, RunConfig};

pub const BEST_CHECKPOINT: &str = "checkpoint.spt";
pub const LAST_CHECKPOINT: &str = "last.spt";
pub const TRAIN_LOG: &str = "train_log.tsv";
pub const RUN_CONFIG: &str = "run_config.txt";

/// Prints one line of command output. A closed stdout is not an error:
/// results are also written to files.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub fn generate(n_train: usize, n_test: usize, seed: u64, size: usize, difficulty: Difficulty, out: &Path) -> Result<PathBuf, CliError> {
    build_dataset(n_train, n_test, seed, size, difficulty, out)?;
    let manifest = out.join(serpent_data::MANIFEST_NAME);
    say!("{}", manifest.display());
    Ok(manifest)
}

fn load_pairs(manifest: &Path, split: Split) -> Result<Vec<Pair>, CliError> {
    let m = DatasetManifest::load(manifest)?;
    let pairs = load_split(&m, split)?;
    if pairs.is_empty() {
        return Err(CliError::Usage(format!("{}: no {split} entries", manifest.display())));
    }
    Ok(pairs)
}

pub struct TrainSummary {
    pub best_iou: f64,
    pub best_epoch: usize,
    pub records: Vec<EpochRecord>,
}

/// Trains on the manifest's train split, validating on its test split.
/// Writes the effective config, the epoch log and both checkpoints under
/// the run directory.
pub fn train_run(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let train_set = load_pairs(&cfg.manifest, Split::Train)?;
    let val_set = load_pairs(&cfg.manifest, Split::Test)?;
    create_dir(&cfg.out_dir)?;
    write(&cfg.out_dir.join(RUN_CONFIG), cfg.to_text())?;
    let log_path = cfg.out_dir.join(TRAIN_LOG);
    let mut log = fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let (model, params) = DscFormer::new(cfg.model_config())?;
    log::info!("model has {} parameters in {} tensors", params.numel(), params.len());
    let mut log_error = None;
    let outcome = train(&model, params, &train_set, &val_set, &cfg.train_config(), |r| {
        if let Err(e) = writeln!(log, "{}", r.tsv_line()).and_then(|_| log.flush()) {
            log_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_error {
        return Err(CliError::io(&log_path, e));
    }
    checkpoint::save(&outcome.best, &cfg.out_dir.join(BEST_CHECKPOINT))?;
    checkpoint::save(&outcome.last, &cfg.out_dir.join(LAST_CHECKPOINT))?;
    say!("best validation IoU {:.6} at epoch {}", outcome.best_iou, outcome.best_epoch);
    Ok(TrainSummary {
        best_iou: outcome.best_iou,
        best_epoch: outcome.best_epoch,
        records: outcome.records,
    })
}

/// Builds the configured model and loads `path` into it, or keeps the
/// seeded initial parameters when no checkpoint is given.
pub fn load_model(cfg: &RunConfig, path: Option<&Path>) -> Result<(DscFormer, ParamStore<f32>), CliError> {
    cfg.validate()?;
    let (model, init) = DscFormer::new(cfg.model_config())?;
    let Some(path) = path else {
        return Ok((model, init));
    };
    let loaded = checkpoint::load(path)?;
    checkpoint::check_compatible(&init, &loaded)?;
    Ok((model, loaded))
}

/// Evaluates one split and writes `metrics.tsv` and `metrics.json` into
/// `report_dir`.
pub fn eval(cfg: &RunConfig, ckpt: Option<&Path>, split: Split, report_dir: &Path) -> Result<MetricsReport, CliError> {
    let (model, params) = load_model(cfg, ckpt)?;
    let pairs = load_pairs(&cfg.manifest, split)?;
    let report = evaluate(&model, &params, &pairs, cfg.batch)?;
    create_dir(report_dir)?;
    write(&report_dir.join("metrics.tsv"), report.to_tsv())?;
    write(&report_dir.join("metrics.json"), report.to_json())?;
    for (name, s) in [
        ("iou", report.iou),
        ("precision", report.precision),
        ("recall", report.recall),
        ("f1", report.f1),
        ("hausdorff", report.hausdorff),
    ] {
        say!("{name}\t{:.6}\t{:.6}", s.mean, s.std);
    }
    Ok(report)
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let k = i % period;
    if k < n {
        k
    } else {
        period - k
    }
}

/// Reflect-pads on the bottom and right up to the next multiple of `m`.
pub fn pad_reflect(image: &GrayImage, m: usize) -> GrayImage {
    let (h, w) = (image.height(), image.width());
    let (ph, pw) = (h.div_ceil(m).max(1) * m, w.div_ceil(m).max(1) * m);
    let mut data = Vec::with_capacity(ph * pw);
    for y in 0..ph {
        for x in 0..pw {
            data.push(image.get(reflect(y, h), reflect(x, w)));
        }
    }
    GrayImage::new(ph, pw, data)
}

pub fn predict(cfg: &RunConfig, ckpt: &Path, image: &Path, out: &Path) -> Result<serpent_data::SegmentationMask, CliError> {
    let (model, params) = load_model(cfg, Some(ckpt))?;
    let img = pgm::load(image)?;
    let (h, w) = (img.height(), img.width());
    if h == 0 || w == 0 {
        return Err(CliError::Usage(format!("{}: empty image", image.display())));
    }
    let padded = pad_reflect(&img, SIZE_MULTIPLE);
    let full = predict_masks(&model, &params, &[&padded], 1)?.remove(0);
    let mask = serpent_data::SegmentationMask::from_fn(h, w, |r, c| full.get(r, c));
    pgm::save_mask(out, &mask)?;
    say!("{}", out.display());
    Ok(mask)
}

/// Runs every unit of `scope`, printing one line per unit, and fails with
/// the names of units above tolerance.
pub fn gradcheck(scope: Scope, inject_fault: bool) -> Result<(), CliError> {
    let mut failing = Vec::new();
    for unit in units(scope)? {
        let report = unit.check(inject_fault)?;
        let verdict = if report.passed() { "PASS" } else { "FAIL" };
        say!(
            "{}\t{:.3e}\t{}\t{} entries\t{} refined\t{verdict}",
            report.unit, report.max_rel_error, report.worst, report.entries, report.refined
        );
        if !report.passed() {
            failing.push(report.unit);
        }
    }
    if failing.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheck(failing))
    }
}
