//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use gmbinet::trainer::read_log;
use gmbinet_core::cost::{self, count_graph, family_graph, CostQuery, Family};
use gmbinet_core::gmbi::Interaction;
use gmbinet_core::gradcheck::{ablation_grid, check_network, op_suite, TOLERANCE};
use gmbinet_core::loss::{bce_loss, ssim_loss, total_loss, LossWeights};
use gmbinet_core::network::{build_gmbinet, feature_shapes, NetConfig};
use gmbinet_core::{Shape, Tensor};

const PARAM_TARGET: f64 = 0.19e6;
const PARAM_TOL: f64 = 0.15;
const MAC_TARGET: f64 = 0.39e9;
const MAC_TOL: f64 = 0.20;
const OVERFIT_IOU: f64 = 0.9;
const OVERFIT_LOSS_RATIO: f64 = 0.2;
const OVERFIT_ITERS: u64 = 3000;
const LOG_TOL: f64 = 1e-5;
const LOSS_TOL: f64 = 1e-6;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn budgets() -> Result<(usize, u64), String> {
    let g = build_gmbinet(&NetConfig::default()).map_err(err)?;
    let rep = count_graph(&g, Shape::new(1, 3, 512, 512)).map_err(err)?;
    Ok((rep.params as usize, rep.macs))
}

fn params() -> Outcome {
    let (p, _) = budgets()?;
    let d = (p as f64 - PARAM_TARGET) / PARAM_TARGET;
    check(d.abs() <= PARAM_TOL, format!("params {p} ({:+.1}% vs 0.19 M, tolerance ±15%)", d * 100.0))
}

fn macs() -> Outcome {
    let (_, m) = budgets()?;
    let d = (m as f64 - MAC_TARGET) / MAC_TARGET;
    check(d.abs() <= MAC_TOL, format!("MACs at 512x512 {m} ({:+.1}% vs 0.39 G, tolerance ±20%)", d * 100.0))
}

fn scale_invariance() -> Outcome {
    let ns = [1u64, 2, 4, 8, 16];
    for (k, c, h) in [(3u64, 32u64, 64u64), (3, 128, 16), (1, 16, 8), (5, 96, 32)] {
        let costs: Vec<u64> = ns.iter().map(|&n| cost::cost_gmbi(&CostQuery::new(Family::Gmbi, k, c, h, h, n))).collect::<Result<_, _>>().map_err(err)?;
        if costs.windows(2).any(|w| w[0] != w[1]) {
            return Err(format!("cost_gmbi varies with n at k={k} c={c} h={h}: {costs:?}"));
        }
    }
    let mut totals = Vec::new();
    for &n in &ns {
        let g = build_gmbinet(&NetConfig::default().scale_dim(n as usize)).map_err(err)?;
        let rep = count_graph(&g, Shape::new(1, 3, 512, 512)).map_err(err)?;
        totals.push((rep.params, rep.macs));
    }
    check(totals.windows(2).all(|w| w[0] == w[1]), format!("n in {ns:?}: network (params, MACs) {:?}", totals[0]))
}

fn formula_oracles() -> Outcome {
    let mut cases = 0;
    for k in [1u64, 3] {
        for c in [8u64, 32] {
            for n in [1u64, 2, 4] {
                for h in [8u64, 32] {
                    let hw = h * h;
                    let expected = [
                        (Family::Multibranch, n * (k * k * c * hw + c * c * hw) + c * c * hw),
                        (Family::Mi, n * (k * k * c * hw) + c * (n * hw) + c * c * hw),
                        (Family::Gmbi, n * (k * k * (c / n) * hw) + c * c * hw),
                    ];
                    for (family, want) in expected {
                        let q = CostQuery::new(family, k, c, h, h, n);
                        let g = family_graph(&q).map_err(err)?;
                        let counted = count_graph(&g, Shape::new(1, c as usize, h as usize, h as usize)).map_err(err)?.macs;
                        let analytic = cost::analytic(&q).map_err(err)?;
                        if counted != want || analytic != want {
                            return Err(format!("{} k={k} c={c} n={n} h={h}: counted {counted}, analytic {analytic}, expected {want}", family.name()));
                        }
                        cases += 1;
                    }
                }
            }
        }
    }
    Ok(format!("{cases} (family, k, c, n, h) cases exact"))
}

fn gradients() -> Outcome {
    let mut worst = (0.0f64, String::new());
    let (mut probes, mut skipped, mut reports) = (0, 0, 0);
    for r in op_suite(17).map_err(err)? {
        if !r.passed(TOLERANCE) {
            return Err(format!("{}: rel error {:e} at {}", r.name, r.max_rel_error, r.worst));
        }
        if r.max_rel_error >= worst.0 {
            worst = (r.max_rel_error, r.worst.clone());
        }
        probes += r.probes;
        reports += 1;
    }
    for (name, cfg) in ablation_grid() {
        let r = check_network(&name, &cfg, 2, 5).map_err(err)?;
        if !r.passed(TOLERANCE) {
            return Err(format!("{name}: rel error {:e} at {}", r.max_rel_error, r.worst));
        }
        if r.max_rel_error >= worst.0 {
            worst = (r.max_rel_error, r.worst.clone());
        }
        probes += r.probes;
        skipped += r.skipped;
        reports += 1;
    }
    Ok(format!("{reports} checks, {probes} probes ({skipped} kink-straddling skipped), max rel error {:.2e} < {TOLERANCE:e} at {}", worst.0, worst.1))
}

fn ewms_parameter_free() -> Outcome {
    let count = |i: Interaction| -> Result<usize, String> {
        let mut cfg = NetConfig::default();
        cfg.block = cfg.block.interaction(i);
        Ok(count_graph(&build_gmbinet(&cfg).map_err(err)?, Shape::new(1, 3, 64, 64)).map_err(err)?.params as usize)
    };
    let base = count(Interaction::Ewms)?;
    let mut parts = vec![format!("ewms {base}")];
    for i in [Interaction::Sum, Interaction::Mul, Interaction::None] {
        let p = count(i)?;
        parts.push(format!("{} {p}", i.name()));
        if p != base {
            return Err(parts.join(", "));
        }
    }
    let concat = count(Interaction::Concat)?;
    parts.push(format!("concat {concat}"));
    check(concat > base, parts.join(", "))
}

fn gmbinet(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_gmbinet")).args(args).env("GMBI_THREADS", "1").output().map_err(err)?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("`gmbinet {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn overfit(tmp: &Path) -> Outcome {
    let run = tmp.join("overfit");
    let ev = tmp.join("overfit-eval");
    let iters = OVERFIT_ITERS.to_string();
    let t = Instant::now();
    gmbinet(&["train", "--profile", "desk", "--synthetic", "8", "--synthetic-val", "0", "--iters", &iters, "--seed", "7", "--out", s(&run)])?;
    let secs = t.elapsed().as_secs_f64();
    gmbinet(&["eval", "--config", s(&run.join("config.json")), "--checkpoint", s(&run.join("last.ckpt")), "--split", "train", "--out", s(&ev)])?;
    let log = read_log(&run.join("log.csv")).map_err(err)?;
    let (first, last) = (log.first().ok_or("empty log")?.loss, log.last().ok_or("empty log")?.loss);
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ev.join("metrics.json")).map_err(err)?).map_err(err)?;
    let iou = metrics["mean"]["iou"].as_f64().ok_or("metrics.json lacks mean iou")?;
    let ratio = last / first;
    check(
        iou >= OVERFIT_IOU && ratio < OVERFIT_LOSS_RATIO && log.len() as u64 == OVERFIT_ITERS,
        format!("desk profile, 8 samples, {} iters in {secs:.0} s: train IoU {iou:.4} (need >= {OVERFIT_IOU}), loss {first:.4} -> {last:.4} ({:.1}% of step 1, need < 20%)", log.len(), ratio * 100.0),
    )
}

fn loss_analytics() -> Outcome {
    let s = Shape::new(1, 1, 16, 16);
    let mut worst_bce = 0.0f64;
    for t in [0.0, 1.0] {
        let l = bce_loss(&Tensor::<f64>::full(s, 0.5), &Tensor::full(s, t)).map_err(err)?;
        worst_bce = worst_bce.max((l - std::f64::consts::LN_2).abs());
    }
    let map = Tensor::<f64>::from_fn(s, |_, _, y, x| ((y * 7 + x * 3) % 11) as f64 / 10.0);
    let ssim = ssim_loss(&map, &map).map_err(err)?.abs();
    let target = map.map(|v| (v > 0.5) as u8 as f64);
    let sides = vec![map.map(|v| 0.1 + 0.8 * v), Tensor::from_fn(Shape::new(1, 1, 8, 8), |_, _, y, x| 0.2 + 0.05 * ((x + y) % 10) as f64)];
    let l = |a: Vec<f64>| total_loss(&sides, &target, &LossWeights::new(a).expect("weights"));
    let (a, b) = (l(vec![0.7, 1.3]).map_err(err)?, l(vec![2.1, 3.9]).map_err(err)?);
    let split = l(vec![0.7, 0.0]).map_err(err)? + l(vec![0.0, 1.3]).map_err(err)?;
    let lin = (b - 3.0 * a).abs().max((split - a).abs());
    check(
        worst_bce <= LOSS_TOL && ssim <= LOSS_TOL && lin <= LOSS_TOL,
        format!("|BCE(0.5) - ln 2| {worst_bce:.1e}, SSIM loss of identical maps {ssim:.1e}, linearity error {lin:.1e} (tolerance {LOSS_TOL:e})"),
    )
}

fn determinism(tmp: &Path) -> Outcome {
    let runs = [tmp.join("det-a"), tmp.join("det-b")];
    for r in &runs {
        gmbinet(&["train", "--profile", "desk", "--synthetic", "8", "--synthetic-val", "2", "--eval-every", "50", "--iters", "100", "--seed", "3", "--out", s(r)])?;
    }
    let (a, b) = (read_log(&runs[0].join("log.csv")).map_err(err)?, read_log(&runs[1].join("log.csv")).map_err(err)?);
    if a.len() != 100 || b.len() != 100 {
        return Err(format!("log lengths {} and {}", a.len(), b.len()));
    }
    let opt = |x: Option<f64>, y: Option<f64>| match (x, y) {
        (Some(x), Some(y)) => (x - y).abs(),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    };
    let diff = a
        .iter()
        .zip(&b)
        .map(|(x, y)| if x.step != y.step { f64::INFINITY } else { (x.lr - y.lr).abs().max((x.loss - y.loss).abs()).max(opt(x.mae, y.mae)).max(opt(x.iou, y.iou)) })
        .fold(0.0, f64::max);
    let ck = runs[0].join("last.ckpt");
    let again = tmp.join("resaved.ckpt");
    gmbinet::io::save_checkpoint(&gmbinet::io::load_checkpoint(&ck).map_err(err)?, &again).map_err(err)?;
    let same_resave = std::fs::read(&ck).map_err(err)? == std::fs::read(&again).map_err(err)?;
    let same_runs = std::fs::read(&ck).map_err(err)? == std::fs::read(runs[1].join("last.ckpt")).map_err(err)?;
    check(
        diff < LOG_TOL && same_resave,
        format!("two 100-step runs: max log field difference {diff:.1e} (< {LOG_TOL:e}); save/load/save byte-identical {same_resave}; checkpoints of both runs identical {same_runs}"),
    )
}

fn shape_ledger() -> Outcome {
    let expected = [
        ("E1", 16, 256),
        ("E2", 32, 128),
        ("E3", 64, 64),
        ("E4", 96, 32),
        ("E5", 128, 16),
        ("D1", 16, 256),
        ("D2", 32, 128),
        ("D3", 64, 64),
        ("D4", 96, 32),
        ("D5", 128, 16),
    ];
    let g = build_gmbinet(&NetConfig::default()).map_err(err)?;
    let shapes = feature_shapes(&g, Shape::new(1, 3, 512, 512)).map_err(err)?;
    for (name, c, hw) in expected {
        let got = shapes.iter().find(|(n, _)| n == name).map(|(_, s)| *s).ok_or(format!("no tap {name}"))?;
        if got != Shape::new(1, c, hw, hw) {
            return Err(format!("{name}: got {got}, expected (1, {c}, {hw}, {hw})"));
        }
    }
    Ok("E1..E5 and D1..D5 at 512x512 match (16,256) (32,128) (64,64) (96,32) (128,16)".into())
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("parameter budget", Box::new(params)),
        ("MAC budget", Box::new(macs)),
        ("scale invariance", Box::new(scale_invariance)),
        ("formula oracles", Box::new(formula_oracles)),
        ("gradient correctness", Box::new(gradients)),
        ("EWMS parameter-free", Box::new(ewms_parameter_free)),
        ("overfit capacity", Box::new(|| overfit(tmp.path()))),
        ("loss analytics", Box::new(loss_analytics)),
        ("determinism", Box::new(|| determinism(tmp.path()))),
        ("shape ledger", Box::new(shape_ledger)),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("criterion {:>2} {name}: PASS - {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL - {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
