//! Training loop, evaluation and the CSV log.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use gmbinet_core::checkpoint::Checkpoint;
use gmbinet_core::graph::Model;
use gmbinet_core::metrics::{segmentation_metrics, MetricReport};
use gmbinet_core::network::{build_gmbinet, predict};
use gmbinet_core::train::{train_step, StepConfig, TrainState};
use gmbinet_core::Tensor;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::data::{self, Sample};
use crate::error::{Error, Result};
use crate::io;

pub const THREADS_ENV: &str = "GMBI_THREADS";

/// Worker count for data-parallel work: `GMBI_THREADS` if set, else all cores.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

pub fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build().map_err(|e| Error::usage(format!("thread pool: {e}")))
}

/// One row of the training log. Evaluation fields are set only on eval steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub mae: Option<f64>,
    pub iou: Option<f64>,
}

pub const LOG_HEADER: &str = "step,lr,loss,mae,iou";

impl LogRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.9e}")).unwrap_or_default();
        format!("{},{:.9e},{:.9e},{},{}", self.step, self.lr, self.loss, opt(self.mae), opt(self.iou))
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::usage(format!("malformed log row `{line}`"));
        if f.len() != 5 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        Ok(LogRow { step: f[0].parse().map_err(|_| bad())?, lr: num(f[1])?, loss: num(f[2])?, mae: opt(f[3])?, iou: opt(f[4])? })
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().skip(1).filter(|l| !l.trim().is_empty()).map(LogRow::parse).collect()
}

/// Per-image and mean metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub per_image: Vec<(String, MetricReport)>,
    pub mean: MetricReport,
}

/// Normalized image, as the network sees it.
pub fn prepare(image: &Tensor) -> Tensor {
    data::normalize(image)
}

/// Saliency map of one raw `[0, 1]` image at its own resolution.
pub fn saliency(model: &Model, image: &Tensor) -> Result<Tensor> {
    Ok(predict(model, &prepare(image))?)
}

/// Scores every sample (in parallel, results in input order).
pub fn evaluate(model: &Model, samples: &[Sample], threshold: f64, threads: usize) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::usage("nothing to evaluate: empty dataset"));
    }
    let per_image: Vec<(String, MetricReport)> = pool(threads)?.install(|| {
        samples
            .par_iter()
            .map(|s| {
                let map = saliency(model, &s.image)?;
                Ok((s.id.clone(), segmentation_metrics(&map, &s.mask, threshold)?))
            })
            .collect::<Result<_>>()
    })?;
    let reports: Vec<MetricReport> = per_image.iter().map(|r| r.1).collect();
    Ok(Evaluation { mean: MetricReport::mean(&reports)?, per_image })
}

/// Result of `fit`.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub state: TrainState,
    pub log: Vec<LogRow>,
    pub best_iou: Option<f64>,
    pub best_step: Option<u64>,
}

/// Where `fit` writes; without it nothing touches the disk.
#[derive(Debug, Clone)]
pub struct OutputDir {
    pub root: PathBuf,
}

impl OutputDir {
    pub fn log(&self) -> PathBuf {
        self.root.join("log.csv")
    }
    pub fn last(&self) -> PathBuf {
        self.root.join("last.ckpt")
    }
    pub fn best(&self) -> PathBuf {
        self.root.join("best.ckpt")
    }
    pub fn snapshot(&self) -> PathBuf {
        self.root.join("nonfinite.ckpt")
    }
}

pub fn new_model(cfg: &RunConfig) -> Result<Model> {
    Ok(Model::init(build_gmbinet(&cfg.net()?)?, cfg.seed))
}

/// Trains on `train` for `cfg.iters` steps, evaluating on `val` every
/// `cfg.eval_every` steps and at the end.
///
/// Batches are consecutive slices of per-epoch seeded permutations; a dataset
/// smaller than the batch is reshuffled and repeated. With `resume`, training
/// continues from the stored step and the log is appended to.
pub fn fit(cfg: &RunConfig, train: &[Sample], val: &[Sample], out: Option<&OutputDir>, resume: Option<&Checkpoint>) -> Result<FitOutcome> {
    fit_until(cfg, train, val, out, resume, cfg.iters)
}

/// `fit`, but stops after step `stop` (the schedule still spans `cfg.iters`).
/// `last.ckpt` is written at the stopping step.
pub fn fit_until(cfg: &RunConfig, train: &[Sample], val: &[Sample], out: Option<&OutputDir>, resume: Option<&Checkpoint>, stop: u64) -> Result<FitOutcome> {
    let stop = stop.min(cfg.iters);
    if train.is_empty() {
        return Err(Error::usage("training set is empty"));
    }
    cfg.validate()?;
    let step_cfg: StepConfig = cfg.step_config()?;
    let mut state = TrainState::new(new_model(cfg)?);
    if let Some(ck) = resume {
        ck.restore_state(&mut state)?;
    }
    let train: Vec<Sample> = train.iter().map(|s| s.resized(cfg.size, cfg.size)).collect::<Result<_>>()?;
    let plain: Vec<Sample> = if cfg.augment {
        Vec::new()
    } else {
        train.iter().map(|s| Sample { image: prepare(&s.image), ..s.clone() }).collect()
    };
    let threads = thread_count();

    let mut log_file = match out {
        Some(o) => {
            io::create_dir(&o.root)?;
            let path = o.log();
            let fresh = resume.is_none() || !path.exists();
            let mut f = OpenOptions::new().create(true).write(true).append(!fresh).truncate(fresh).open(&path).map_err(|e| Error::io(&path, e))?;
            if fresh {
                writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };

    let mut log = Vec::new();
    let (mut best_iou, mut best_step) = (None::<f64>, None);
    while state.step < stop {
        let idx = data::batch_indices(train.len(), cfg.batch, cfg.seed, state.step);
        let items: Vec<Sample> = if cfg.augment {
            idx.iter().map(|&i| data::augment(&train[i], cfg.seed, state.step)).collect::<Result<_>>()?
        } else {
            idx.iter().map(|&i| plain[i].clone()).collect()
        };
        let refs: Vec<&Sample> = items.iter().collect();
        let (images, masks) = data::batch(&refs)?;
        let loss = match train_step(&mut state, &images, &masks, &step_cfg) {
            Ok(l) => l,
            Err(e) => {
                if let Some(o) = out {
                    io::save_checkpoint(&Checkpoint::from_state(&state), &o.snapshot())?;
                }
                return Err(e.into());
            }
        };
        let step = state.step;
        let mut row = LogRow { step, lr: state.lr, loss, mae: None, iou: None };
        let eval_now = !val.is_empty() && (step % cfg.eval_every.max(1) == 0 || step == cfg.iters);
        if eval_now {
            let ev = evaluate(&state.model, val, cfg.threshold, threads)?;
            row.mae = Some(ev.mean.mae);
            row.iou = Some(ev.mean.iou);
            if best_iou.is_none_or(|b| ev.mean.iou > b) {
                best_iou = Some(ev.mean.iou);
                best_step = Some(step);
                if let Some(o) = out {
                    io::save_checkpoint(&Checkpoint::from_state(&state), &o.best())?;
                }
            }
        }
        if let Some((f, path)) = log_file.as_mut() {
            writeln!(f, "{}", row.to_csv()).map_err(|e| Error::io(&*path, e))?;
        }
        if let Some(o) = out {
            if step % cfg.ckpt_every.max(1) == 0 || step == stop {
                io::save_checkpoint(&Checkpoint::from_state(&state), &o.last())?;
            }
        }
        log.push(row);
    }
    if let Some((f, path)) = log_file.as_mut() {
        f.flush().map_err(|e| Error::io(&*path, e))?;
    }
    Ok(FitOutcome { state, log, best_iou, best_step })
}

/// Training and held-out samples described by a configuration.
pub fn datasets(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if cfg.synthetic > 0 {
        let train = data::synthetic_set(cfg.synthetic, cfg.size.max(64), cfg.noise, cfg.seed)?;
        let val = data::synthetic_set(cfg.synthetic_val, cfg.size.max(64), cfg.noise, data::mix(cfg.seed, 0x7661_6c))?;
        return Ok((train, val));
    }
    let root = cfg.data.as_ref().ok_or_else(|| Error::usage("no dataset: set `data` or `synthetic`"))?;
    let train = data::load_dataset(root, cfg.train_split.as_deref())?;
    let val = match cfg.val_split.as_deref() {
        Some(s) => data::load_dataset(root, Some(s))?,
        None => Vec::new(),
    };
    Ok((train, val))
}

/// Mean metrics as `key=value` lines.
pub fn metrics_text(r: &MetricReport) -> String {
    let mut s = String::new();
    for (k, v) in r.fields() {
        let _ = writeln!(s, "{k}={v}");
    }
    s
}

pub fn metrics_json(ev: &Evaluation) -> serde_json::Value {
    let obj = |r: &MetricReport| serde_json::Value::Object(r.fields().iter().map(|(k, v)| (k.to_string(), serde_json::json!(v))).collect());
    serde_json::json!({
        "mean": obj(&ev.mean),
        "per_image": ev.per_image.iter().map(|(id, r)| serde_json::json!({ "id": id, "metrics": obj(r) })).collect::<Vec<_>>(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_row_round_trip() {
        let r = LogRow { step: 3, lr: 1e-3, loss: 0.25, mae: None, iou: Some(0.5) };
        assert_eq!(LogRow::parse(&r.to_csv()).unwrap(), r);
        assert!(LogRow::parse("1,2").is_err());
    }
}
