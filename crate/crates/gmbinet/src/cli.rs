//! Command-line front end: `train`, `eval`, `predict`, `analyze`, `bench`, `synth`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use gmbinet_core::cost::{self, CostQuery, Family};
use gmbinet_core::graph::Model;
use gmbinet_core::network::build_gmbinet;
use gmbinet_core::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{read_entries, RunConfig};
use crate::data::{self, Sample, SynthKind, SynthSpec};
use crate::error::{Error, Result};
use crate::report::{self, RunManifest};
use crate::trainer::{self, OutputDir};
use crate::io;

#[derive(Debug, Parser)]
#[command(name = "gmbinet", version, about = "Lightweight defect segmentation: training, evaluation, cost analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network and write checkpoints, a CSV log and the resolved config.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write saliency maps for images.
    Predict(PredictArgs),
    /// Compare analytic and counted block costs and report network totals.
    Analyze(AnalyzeArgs),
    /// Time inference of a fresh or trained network.
    Bench(BenchArgs),
    /// Generate a synthetic defect dataset.
    Synth(SynthArgs),
}

/// Configuration sources. Precedence: defaults < profile < `--config` file < flags.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// `key = value` or JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named base settings: default or desk (64x64, batch 4, no augmentation,
    /// downsampled side labels).
    #[arg(long)]
    pub profile: Option<String>,
    /// Dataset root with images/ and masks/.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub train_split: Option<String>,
    #[arg(long)]
    pub val_split: Option<String>,
    /// Train on this many generated samples instead of a dataset.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long)]
    pub synthetic_val: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_floor: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub ckpt_every: Option<u64>,
    #[arg(long)]
    pub augment: Option<bool>,
    /// Comma-separated deep-supervision weights.
    #[arg(long)]
    pub alphas: Option<String>,
    /// upsample or downsample.
    #[arg(long)]
    pub side_loss: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub scale_dim: Option<usize>,
    #[arg(long)]
    pub kernel: Option<usize>,
    /// ewms, sum, mul, concat or none.
    #[arg(long)]
    pub interaction: Option<String>,
    #[arg(long)]
    pub forward_guidance: Option<bool>,
    #[arg(long)]
    pub backward_enhancement: Option<bool>,
    /// group, branch or single.
    #[arg(long)]
    pub mode: Option<String>,
    /// sum, concat or none.
    #[arg(long)]
    pub skip: Option<String>,
    #[arg(long)]
    pub width: Option<f64>,
}

impl ConfigArgs {
    fn flag_entries(&self) -> Vec<(String, String)> {
        fn push<T: ToString>(out: &mut Vec<(String, String)>, k: &str, v: &Option<T>) {
            if let Some(v) = v {
                out.push((k.to_string(), v.to_string()));
            }
        }
        let mut e = Vec::new();
        push(&mut e, "profile", &self.profile);
        push(&mut e, "data", &self.data.as_ref().map(|p| p.display().to_string()));
        push(&mut e, "train_split", &self.train_split);
        push(&mut e, "val_split", &self.val_split);
        push(&mut e, "synthetic", &self.synthetic);
        push(&mut e, "synthetic_val", &self.synthetic_val);
        push(&mut e, "noise", &self.noise);
        push(&mut e, "size", &self.size);
        push(&mut e, "batch", &self.batch);
        push(&mut e, "iters", &self.iters);
        push(&mut e, "lr", &self.lr);
        push(&mut e, "lr_floor", &self.lr_floor);
        push(&mut e, "seed", &self.seed);
        push(&mut e, "eval_every", &self.eval_every);
        push(&mut e, "ckpt_every", &self.ckpt_every);
        push(&mut e, "augment", &self.augment);
        push(&mut e, "alphas", &self.alphas);
        push(&mut e, "side_loss", &self.side_loss);
        push(&mut e, "threshold", &self.threshold);
        push(&mut e, "scale_dim", &self.scale_dim);
        push(&mut e, "kernel", &self.kernel);
        push(&mut e, "interaction", &self.interaction);
        push(&mut e, "forward_guidance", &self.forward_guidance);
        push(&mut e, "backward_enhancement", &self.backward_enhancement);
        push(&mut e, "mode", &self.mode);
        push(&mut e, "skip", &self.skip);
        push(&mut e, "width", &self.width);
        e
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let mut entries = match &self.config {
            Some(p) => read_entries(p)?,
            None => Vec::new(),
        };
        entries.extend(self.flag_entries());
        RunConfig::from_entries(&entries)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Output directory for checkpoints, log.csv, config.json and manifest.json.
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier run of the same config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Split of `data` to score; without `data`, a synthetic config is
    /// regenerated and `train` or `val` selects the set.
    #[arg(long)]
    pub split: Option<String>,
    /// Write one PNG saliency map per sample here.
    #[arg(long)]
    pub dump_pred: Option<PathBuf>,
    #[arg(long, default_value = "runs/eval")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image files or directories of PNGs.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value = "runs/predict")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, default_value_t = 3)]
    pub k: u64,
    #[arg(long, default_value_t = 32)]
    pub c: u64,
    #[arg(long, default_value_t = 128)]
    pub h: u64,
    #[arg(long, default_value_t = 128)]
    pub w: u64,
    /// Comma-separated scale dimensions.
    #[arg(long, default_value = "1,2,4,8")]
    pub n: String,
    /// Report FLOPs as 2 x MACs instead of MACs.
    #[arg(long)]
    pub double_flops: bool,
    #[arg(long, default_value = "runs/analyze")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Trained weights; a fresh build is timed without it.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub repeats: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    #[arg(long, default_value = "runs/bench")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 24)]
    pub count: usize,
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    /// scratch, patch or inclusion; all three in turn when omitted.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of samples listed under [val] in split.txt.
    #[arg(long, default_value_t = 0.25)]
    pub val_fraction: f64,
    #[arg(long, default_value = "runs/synth")]
    pub out: PathBuf,
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn main_with(argv: Vec<OsString>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli.command, &args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

struct Manifest {
    command: &'static str,
    argv: Vec<String>,
    start: Instant,
    artifacts: Vec<PathBuf>,
}

impl Manifest {
    fn new(command: &'static str, argv: &[String]) -> Self {
        Manifest { command, argv: argv.to_vec(), start: Instant::now(), artifacts: Vec::new() }
    }

    fn add(&mut self, p: impl Into<PathBuf>) {
        self.artifacts.push(p.into());
    }

    fn finish(self, out: &Path, config: serde_json::Value, seed: u64, threads: usize) -> Result<()> {
        let path = out.join("manifest.json");
        let m = RunManifest {
            command: self.command.into(),
            argv: self.argv,
            config,
            seed,
            artifacts: self.artifacts.iter().map(|p| p.display().to_string()).collect(),
            hardware: report::hardware(),
            threads,
            wall_time_s: self.start.elapsed().as_secs_f64(),
        };
        m.write(&path)?;
        println!("manifest: {}", path.display());
        Ok(())
    }
}

pub fn run(cmd: Command, argv: &[String]) -> Result<()> {
    match cmd {
        Command::Train(a) => train(a, argv),
        Command::Eval(a) => eval(a, argv),
        Command::Predict(a) => predict(a, argv),
        Command::Analyze(a) => analyze(a, argv),
        Command::Bench(a) => bench(a, argv),
        Command::Synth(a) => synth(a, argv),
    }
}

fn config_json(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Model> {
    let ck = io::load_checkpoint(checkpoint)?;
    let mut model = trainer::new_model(cfg)?;
    ck.restore_model(&mut model)?;
    Ok(model)
}

fn train(a: TrainArgs, argv: &[String]) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let mut m = Manifest::new("train", argv);
    let (train, val) = trainer::datasets(&cfg)?;
    let out = OutputDir { root: a.out.clone() };
    io::create_dir(&out.root)?;
    let cfg_path = out.root.join("config.json");
    io::write_text(&cfg_path, &cfg.to_json())?;
    let resume = a.resume.as_deref().map(io::load_checkpoint).transpose()?;
    let fit = trainer::fit(&cfg, &train, &val, Some(&out), resume.as_ref())?;
    if let Some(last) = fit.log.last() {
        println!("step {} lr {:.3e} loss {:.6}", last.step, last.lr, last.loss);
    }
    if let (Some(iou), Some(step)) = (fit.best_iou, fit.best_step) {
        println!("best held-out iou {iou:.4} at step {step}");
    }
    m.add(cfg_path);
    m.add(out.log());
    m.add(out.last());
    if fit.best_step.is_some() {
        m.add(out.best());
    }
    m.finish(&out.root, config_json(&cfg), cfg.seed, 1)
}

fn eval_samples(cfg: &RunConfig, split: Option<&str>) -> Result<Vec<Sample>> {
    if cfg.synthetic == 0 {
        if let Some(root) = &cfg.data {
            return data::load_dataset(root, split);
        }
    } else {
        let (train, val) = trainer::datasets(cfg)?;
        return match split.unwrap_or("train") {
            "train" => Ok(train),
            "val" => Ok(val),
            s => Err(Error::usage(format!("synthetic runs have splits train and val, not `{s}`"))),
        };
    }
    Err(Error::usage("no dataset: pass --data or a config with synthetic samples"))
}

fn eval(a: EvalArgs, argv: &[String]) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let mut m = Manifest::new("eval", argv);
    let model = load_model(&cfg, &a.checkpoint)?;
    let samples = eval_samples(&cfg, a.split.as_deref())?;
    let threads = trainer::thread_count();
    let ev = trainer::evaluate(&model, &samples, cfg.threshold, threads)?;
    io::create_dir(&a.out)?;
    let txt = a.out.join("metrics.txt");
    let json = a.out.join("metrics.json");
    io::write_text(&txt, &trainer::metrics_text(&ev.mean))?;
    io::write_text(&json, &serde_json::to_string_pretty(&trainer::metrics_json(&ev))?)?;
    print!("{}", trainer::metrics_text(&ev.mean));
    m.add(txt);
    m.add(json);
    if let Some(dir) = &a.dump_pred {
        io::create_dir(dir)?;
        for s in &samples {
            let p = dir.join(format!("{}.png", s.id));
            io::write_gray_png(&trainer::saliency(&model, &s.image)?, &p)?;
        }
        m.add(dir.clone());
    }
    m.finish(&a.out, config_json(&cfg), cfg.seed, threads)
}

fn image_paths(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::usage("no input images"));
    }
    Ok(out)
}

fn predict(a: PredictArgs, argv: &[String]) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let mut m = Manifest::new("predict", argv);
    let model = load_model(&cfg, &a.checkpoint)?;
    io::create_dir(&a.out)?;
    for path in image_paths(&a.inputs)? {
        let img = io::read_image(&path)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let dest = a.out.join(format!("{stem}.png"));
        io::write_gray_png(&trainer::saliency(&model, &img)?, &dest)?;
        m.add(dest);
    }
    m.finish(&a.out, config_json(&cfg), cfg.seed, 1)
}

fn parse_list(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|v| v.trim().parse::<u64>().map_err(|_| Error::InvalidValue { key: "n".into(), value: s.into(), reason: "expected comma-separated integers".into() }))
        .collect()
}

fn analyze(a: AnalyzeArgs, argv: &[String]) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let mut m = Manifest::new("analyze", argv);
    let ns = parse_list(&a.n)?;
    cost::check_scale_dims(a.c, &ns)?;
    let mut rows = Vec::new();
    let mut json_rows = Vec::new();
    for family in [Family::Multibranch, Family::Mi, Family::Gmbi] {
        for &n in &ns {
            let r = cost::compare_family(&CostQuery::new(family, a.k, a.c, a.h, a.w, n))?;
            rows.push(vec![
                r.family.name().to_string(),
                r.n.to_string(),
                r.analytic_macs.to_string(),
                r.counted_macs.to_string(),
                r.params.to_string(),
                format!("{:.6}", r.delta),
            ]);
            json_rows.push(serde_json::json!({
                "family": r.family.name(), "n": r.n, "analytic_macs": r.analytic_macs,
                "counted_macs": r.counted_macs, "params": r.params, "delta": r.delta,
            }));
        }
    }
    let mut text = format!("block costs, k={} c={} h={} w={}\n", a.k, a.c, a.h, a.w);
    text.push_str(&report::table(&["family", "n", "analytic_macs", "counted_macs", "params", "delta"], &rows));

    let net = build_gmbinet(&cfg.net()?)?;
    let rep = cost::count_graph(&net, Shape::new(1, 3, cfg.size, cfg.size))?;
    let flops = rep.flops(a.double_flops);
    text.push_str(&format!(
        "\nnetwork at {0}x{0}: params {1} ({2:.4} M), macs {3} ({4:.4} G), flops {5} ({6})\n",
        cfg.size,
        rep.params,
        rep.params as f64 / 1e6,
        rep.macs,
        rep.macs as f64 / 1e9,
        flops,
        if a.double_flops { "2 x macs" } else { "= macs" },
    ));
    print!("{text}");
    io::create_dir(&a.out)?;
    let txt = a.out.join("analyze.txt");
    let json = a.out.join("analyze.json");
    io::write_text(&txt, &text)?;
    let doc = serde_json::json!({
        "query": { "k": a.k, "c": a.c, "h": a.h, "w": a.w },
        "rows": json_rows,
        "network": { "input": cfg.size, "params": rep.params, "macs": rep.macs, "flops": flops, "secondary_ops": rep.secondary_ops },
    });
    io::write_text(&json, &serde_json::to_string_pretty(&doc)?)?;
    m.add(txt);
    m.add(json);
    m.finish(&a.out, config_json(&cfg), cfg.seed, 1)
}

fn bench(a: BenchArgs, argv: &[String]) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let mut m = Manifest::new("bench", argv);
    let model = match &a.checkpoint {
        Some(p) => load_model(&cfg, p)?,
        None => trainer::new_model(&cfg)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let input = Tensor::from_fn(Shape::new(1, 3, cfg.size, cfg.size), |_, _, _, _| rng.gen_range(-1.0f32..1.0));
    let rep = report::bench_latency(&model, &input, a.warmup, a.repeats)?;
    println!(
        "{}x{}: mean {:.3} ms, median {:.3} ms, {:.2} img/s, params {}, macs {}\n{}",
        cfg.size, cfg.size, rep.mean_ms, rep.median_ms, rep.images_per_second, rep.params, rep.macs, rep.hardware
    );
    io::create_dir(&a.out)?;
    let path = a.out.join("bench.json");
    io::write_text(&path, &serde_json::to_string_pretty(&rep)?)?;
    m.add(path);
    m.finish(&a.out, config_json(&cfg), cfg.seed, rep.threads)
}

fn synth(a: SynthArgs, argv: &[String]) -> Result<()> {
    let mut m = Manifest::new("synth", argv);
    if a.count == 0 {
        return Err(Error::usage("--count must be at least 1"));
    }
    if !(0.0..=1.0).contains(&a.val_fraction) {
        return Err(Error::usage("--val-fraction must lie in [0, 1]"));
    }
    let samples = match &a.kind {
        None => data::synthetic_set(a.count, a.size, a.noise, a.seed)?,
        Some(k) => {
            let kind = SynthKind::parse(k)?;
            (0..a.count)
                .map(|i| {
                    let mut spec = SynthSpec::new(kind, a.size, data::mix(a.seed, i as u64));
                    spec.noise = a.noise;
                    let mut s = data::generate(&spec)?;
                    s.id = format!("{i:04}_{}", kind.name());
                    Ok(s)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    data::save_dataset(&a.out, &samples)?;
    let n_val = (a.count as f64 * a.val_fraction).round() as usize;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let (tr, va) = ids.split_at(a.count - n_val.min(a.count));
    let split = a.out.join("split.txt");
    data::write_split(&split, &[("train", tr.to_vec()), ("val", va.to_vec())])?;
    println!("{} samples written to {}", a.count, a.out.display());
    m.add(a.out.join("images"));
    m.add(a.out.join("masks"));
    m.add(split);
    let config = serde_json::json!({
        "count": a.count, "size": a.size, "kind": a.kind, "noise": a.noise, "seed": a.seed, "val_fraction": a.val_fraction,
    });
    m.finish(&a.out, config, a.seed, 1)
}
