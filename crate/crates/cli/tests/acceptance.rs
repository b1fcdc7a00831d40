//! Acceptance suite: one PASS/FAIL line per criterion A1-A7.
//!
//! A7 is reported but does not gate the exit status.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use pdvseg::losses::{
    generalized_dice_loss_grad, one_hot, progressive_loss, progressive_loss_grad, soft_dice_loss_grad, DiceDenominator, LossConfig, LossGrad,
};
use pdvseg::metrics::{bland_altman, dice_labels, dice_to_jaccard, jaccard_labels, jaccard_to_dice, one_way_anova, pearson, summarize};
use pdvseg::networks::{build, Mode, NetKind, NetworkSpec, Parameters};
use pdvseg::nn::{Dims, Tensor};
use pdvseg::phantom::{generate_dataset, PhantomConfig};
use pdvseg::training::{load_checkpoint, predict_case, train, TrainConfig};
use pdvseg::volume::{load_mask, Manifest};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const LOSS_FD_TOL: f64 = 1e-4;
const NET_FD_TOL: f64 = 1e-3;
const A3_MIN_DICE: f64 = 0.85;
const A3_TRAIN_CASES: usize = 40;
const A3_TEST_CASES: usize = 10;
const A3_SHAPE: [usize; 3] = [64, 64, 32];
const A3_EPOCHS: usize = 12;
const A3_TRAIN_SEED: u64 = 2024;
const A3_TEST_SEED: u64 = 2025;
const A3_TRAIN_RUN_SEED: u64 = 7;
const JACCARD_OVERALL: f64 = 0.8770;
const DICE_OVERALL: f64 = 0.9345;
const JACCARD_TOL: f64 = 1e-4;
const COVERAGE_TOL: f64 = 0.01;
const PEARSON_TOL: f64 = 1e-12;
/// Asymptotic Kolmogorov-Smirnov critical value at alpha = 0.01.
const KS_CRIT_001: f64 = 1.6276;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn a1_shapes() -> Check {
    for spec in [NetworkSpec::pdvnet(A3_SHAPE), NetworkSpec::dvnet(A3_SHAPE), NetworkSpec::unet2d([64, 64])] {
        let (net, params, table) = build::<f32>(&spec, 1).map_err(|e| e.to_string())?;
        let d = Dims::new(1, 1, spec.spatial());
        let x = Tensor::from_vec(d, (0..d.len()).map(|i| (i % 17) as f32 / 17.0).collect());
        let pass = net.forward_pass(&params, &x, Mode::Train { dropout_seed: 1 }).map_err(|e| e.to_string())?;
        ensure(table.len() == pass.layer_vars.len(), "layer count differs")?;
        for (row, &v) in table.iter().zip(&pass.layer_vars) {
            let rd = pass.tape.dims(v);
            ensure(
                (row.channels, row.spatial) == (rd.c, rd.spatial),
                format!("{:?} {}: table {} x {:?}, runtime {}", spec.kind, row.name, row.channels, row.spatial, rd),
            )?;
        }
    }
    let (_, _, t) = build::<f32>(&NetworkSpec::pdvnet(A3_SHAPE), 0).map_err(|e| e.to_string())?;
    let c = |n: &str| t.get(n).map(|r| r.channels).unwrap_or(0);
    let (enter, leave) = (c("init.concat"), c("block1.l4.concat"));
    ensure(enter == 25 && leave == 45, format!("block 1 channels {enter} -> {leave}"))?;
    ensure(c("block2.l9.concat") == c("down2.prelu") + 80, "block 2 arithmetic")?;
    ensure(c("block3.l9.concat") == c("down3.prelu") + 160, "block 3 arithmetic")?;
    Ok(format!("3 networks, runtime shapes match the table; block 1 {enter}->{leave}"))
}

fn fixture(seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Dims::new(1, 6, [2, 2, 2]);
    let mut p = Tensor::zeros(d);
    for v in 0..8 {
        let w: Vec<f64> = (0..6).map(|_| rng.random::<f64>() + 0.05).collect();
        let s: f64 = w.iter().sum();
        for (c, wc) in w.iter().enumerate() {
            p.data_mut()[c * 8 + v] = wc / s;
        }
    }
    let labels: Vec<u8> = (0..8).map(|_| rng.random_range(0..6)).collect();
    (p, one_hot(&[&labels], [2, 2, 2], 6).unwrap())
}

/// Richardson-extrapolated central difference: fourth-order accurate, so
/// a moderate step keeps both truncation and rounding error far below the
/// tolerance even for components near 1e-7.
fn richardson(x: &Tensor<f64>, i: usize, h: f64, f: &dyn Fn(&Tensor<f64>) -> f64) -> f64 {
    let central = |h: f64| {
        let (mut up, mut down) = (x.clone(), x.clone());
        up.data_mut()[i] += h;
        down.data_mut()[i] -= h;
        (f(&up) - f(&down)) / (2.0 * h)
    };
    (4.0 * central(h / 2.0) - central(h)) / 3.0
}

fn worst_fd(probs: &Tensor<f64>, analytic: &Tensor<f64>, f: &dyn Fn(&Tensor<f64>) -> f64) -> f64 {
    (0..probs.data().len())
        .map(|i| rel_err(richardson(probs, i, 1e-4, f), analytic.data()[i], 1e-8))
        .fold(0.0, f64::max)
}

fn network_fd() -> Result<f64, String> {
    let spec = NetworkSpec::pdvnet([8, 8, 8]);
    let (net, mut params, _) = build::<f64>(&spec, 5).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::from_vec(Dims::new(1, 1, [8, 8, 8]), (0..512).map(|_| rng.random::<f64>()).collect());
    let labels: Vec<u8> = (0..64).map(|_| rng.random_range(0..6)).collect();
    let target = one_hot::<f64>(&[&labels], [4, 4, 4], 6).map_err(|e| e.to_string())?;
    let cfg = LossConfig::default();
    let loss = |p: &Parameters<f64>| progressive_loss(&net.forward(p, &x, Mode::Infer).unwrap(), &target, &cfg).unwrap();
    let pass = net.forward_pass(&params, &x, Mode::Infer).map_err(|e| e.to_string())?;
    let (_, grads) = progressive_loss_grad(&pass.head_values(), &target, &cfg).map_err(|e| e.to_string())?;
    let seeds: Vec<_> = pass.heads.iter().copied().zip(grads).collect();
    let g = pass.tape.backward(&seeds).into_params();
    let names: Vec<String> = params.trainable.keys().cloned().collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let name = &names[rng.random_range(0..names.len())];
        let i = rng.random_range(0..params.trainable[name].data().len());
        let orig = params.trainable[name].data()[i];
        params.trainable.get_mut(name).unwrap().data_mut()[i] = orig + h;
        let up = loss(&params);
        params.trainable.get_mut(name).unwrap().data_mut()[i] = orig - h;
        let down = loss(&params);
        params.trainable.get_mut(name).unwrap().data_mut()[i] = orig;
        worst = worst.max(rel_err((up - down) / (2.0 * h), g[name].data()[i], 1e-6));
    }
    Ok(worst)
}

fn a2_gradients() -> Check {
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let (p, t) = fixture(seed);
        for denom in [DiceDenominator::Squared, DiceDenominator::Plain] {
            let soft = |q: &Tensor<f64>| soft_dice_loss_grad(q, &t, eps, denom).unwrap();
            let gen = |q: &Tensor<f64>| generalized_dice_loss_grad(q, &t, eps, denom).unwrap();
            for f in [&soft as &dyn Fn(&Tensor<f64>) -> LossGrad<f64>, &gen] {
                worst = worst.max(worst_fd(&p, &f(&p).grad, &|q| f(q).value));
            }
        }
        let paths = [p.clone(), fixture(seed + 10).0, fixture(seed + 20).0];
        let cfg = LossConfig {
            pathway_weights: [0.5, 1.0, 2.0],
            ..LossConfig::default()
        };
        let (_, grads) = progressive_loss_grad(&paths, &t, &cfg).map_err(|e| e.to_string())?;
        for k in 0..3 {
            let f = |q: &Tensor<f64>| {
                let mut ps = paths.clone();
                ps[k] = q.clone();
                progressive_loss(&ps, &t, &cfg).unwrap()
            };
            worst = worst.max(worst_fd(&paths[k], &grads[k], &f));
        }
    }
    ensure(worst < LOSS_FD_TOL, format!("loss gradient rel. error {worst:.2e} >= {LOSS_FD_TOL:.0e}"))?;
    let net = network_fd()?;
    ensure(net < NET_FD_TOL, format!("network gradient rel. error {net:.2e} >= {NET_FD_TOL:.0e}"))?;
    Ok(format!("loss FD max rel. error {worst:.2e} (< {LOSS_FD_TOL:.0e}); network FD over 20 params {net:.2e} (< {NET_FD_TOL:.0e})"))
}

/// Mean test Dice of each pathway for `kind` trained on the A3 split.
fn train_and_test(kind: NetKind, train_m: &Manifest, test_m: &Manifest, dir: &Path) -> Result<Vec<f64>, String> {
    let mut cfg = TrainConfig::for_kind(kind, A3_SHAPE, dir.join(kind.as_str()));
    cfg.epochs = A3_EPOCHS;
    cfg.seed = A3_TRAIN_RUN_SEED;
    let state = train::<f32>(&cfg, train_m).map_err(|e| e.to_string())?;
    let (spec, params) = load_checkpoint::<f32>(&state.best_checkpoint).map_err(|e| e.to_string())?;
    let (net, _, _) = build::<f32>(&spec, 0).map_err(|e| e.to_string())?;
    let mut sums = vec![0.0; net.heads().len()];
    for entry in &test_m.cases {
        let preds = predict_case(&net, &params, test_m, entry).map_err(|e| e.to_string())?;
        let truth = load_mask(&test_m.mask_path(entry)).map_err(|e| e.to_string())?;
        for (s, p) in sums.iter_mut().zip(&preds) {
            *s += dice_labels(p.data(), truth.data()).map_err(|e| e.to_string())?.overall;
        }
    }
    Ok(sums.iter().map(|s| s / test_m.len() as f64).collect())
}

struct Desk {
    train: Manifest,
    test: Manifest,
    dir: tempfile::TempDir,
}

fn desk_data() -> Result<Desk, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let gen = |n, seed, sub: &str| {
        let cfg = PhantomConfig {
            shape: A3_SHAPE,
            seed,
            ..PhantomConfig::default()
        };
        let path = generate_dataset(n, &cfg, &dir.path().join(sub)).map_err(|e| e.to_string())?;
        Manifest::load(&path).map_err(|e| e.to_string())
    };
    Ok(Desk {
        train: gen(A3_TRAIN_CASES, A3_TRAIN_SEED, "train")?,
        test: gen(A3_TEST_CASES, A3_TEST_SEED, "test")?,
        dir,
    })
}

fn a3_desk_scale(d: &Desk, pdv: &mut Option<Vec<f64>>) -> Check {
    let paths = train_and_test(NetKind::Pdvnet, &d.train, &d.test, d.dir.path())?;
    *pdv = Some(paths.clone());
    let (p1, p3) = (paths[0], paths[2]);
    let detail = format!(
        "PDV-Net test Dice by pathway {:.4} / {:.4} / {:.4} ({} train, {} test, {} epochs)",
        p1, paths[1], p3, A3_TRAIN_CASES, A3_TEST_CASES, A3_EPOCHS
    );
    ensure(p3 >= A3_MIN_DICE, format!("{detail}: final Dice below {A3_MIN_DICE}"))?;
    ensure(p3 >= p1, format!("{detail}: pathway 3 below pathway 1"))?;
    Ok(detail)
}

/// Type-7 sample quantile written from the order statistics directly.
fn order_stat_quantile(xs: &[f64], q: f64) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 1 {
        return s[0];
    }
    // the k-th order statistic (0-based) sits at plotting position k / (n - 1)
    for k in 0..n - 1 {
        let (lo, hi) = (k as f64 / (n - 1) as f64, (k + 1) as f64 / (n - 1) as f64);
        if q >= lo && q <= hi {
            return s[k] + (q - lo) / (hi - lo) * (s[k + 1] - s[k]);
        }
    }
    s[n - 1]
}

fn a4_metric_oracles() -> Check {
    let d = jaccard_to_dice(JACCARD_OVERALL).map_err(|e| e.to_string())?;
    ensure((d - DICE_OVERALL).abs() < JACCARD_TOL, format!("J {JACCARD_OVERALL} -> D {d}"))?;
    let back = dice_to_jaccard(d).map_err(|e| e.to_string())?;
    ensure((back - JACCARD_OVERALL).abs() < 1e-12, "round trip")?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..1000 {
        let n = rng.random_range(1..200);
        let a: Vec<u8> = (0..n).map(|_| rng.random_range(0..6)).collect();
        let b: Vec<u8> = (0..n).map(|_| rng.random_range(0..6)).collect();
        let dab = dice_labels(&a, &b).map_err(|e| e.to_string())?;
        let dba = dice_labels(&b, &a).map_err(|e| e.to_string())?;
        let j = jaccard_labels(&a, &b).map_err(|e| e.to_string())?;
        ensure(dab == dba, "dice not symmetric")?;
        for l in 0..5 {
            ensure(j[l] <= dab.lobes[l] + 1e-12, "jaccard exceeds dice")?;
            ensure((2.0 * j[l] / (1.0 + j[l]) - dab.lobes[l]).abs() < 1e-12, "dice != 2J/(1+J)")?;
            ensure((0.0..=1.0).contains(&dab.lobes[l]), "dice outside [0, 1]")?;
        }
    }
    for _ in 0..200 {
        let n = rng.random_range(1..60);
        let xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let s = summarize(&xs).map_err(|e| e.to_string())?;
        for (q, v) in [(0.25, s.q1), (0.5, s.median), (0.75, s.q3)] {
            ensure((order_stat_quantile(&xs, q) - v).abs() < 1e-12, format!("quantile {q} of {n} values"))?;
        }
    }
    Ok(format!("J {JACCARD_OVERALL} -> D {d:.4}; 1000 random mask pairs; 200 quantile summaries"))
}

fn ks_uniform(mut p: Vec<f64>) -> f64 {
    p.sort_by(f64::total_cmp);
    let n = p.len() as f64;
    p.iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
        .fold(0.0, f64::max)
}

fn a5_statistics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let (trials, n, fresh) = (400, 400, 1000);
    let mut inside = 0usize;
    for _ in 0..trials {
        let truth: Vec<f64> = (0..n).map(|_| 1000.0 + 100.0 * noise.sample(&mut rng)).collect();
        let pred: Vec<f64> = truth.iter().map(|t| t + 5.0 + 20.0 * noise.sample(&mut rng)).collect();
        let ba = bland_altman(&pred, &truth).map_err(|e| e.to_string())?;
        inside += (0..fresh)
            .filter(|_| {
                let diff = 5.0 + 20.0 * noise.sample(&mut rng);
                ba.lower <= diff && diff <= ba.upper
            })
            .count();
    }
    let coverage = inside as f64 / (trials * fresh) as f64;
    ensure((coverage - 0.95).abs() <= COVERAGE_TOL, format!("coverage {coverage:.4}"))?;

    let f8 = one_way_anova(&[vec![1.0, 2.0], vec![3.0, 4.0]]).map_err(|e| e.to_string())?.f;
    ensure(f8 == 8.0, format!("hand fixture F = {f8}"))?;
    let f0 = one_way_anova(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).map_err(|e| e.to_string())?.f;
    ensure(f0 == 0.0, format!("identical groups F = {f0}"))?;
    let r = pearson(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]).map_err(|e| e.to_string())?.r;
    ensure((r - 0.6).abs() < PEARSON_TOL, format!("pearson r = {r}"))?;

    let sims = 2000;
    let ps: Vec<f64> = (0..sims)
        .map(|_| {
            let groups: Vec<Vec<f64>> = (0..3).map(|_| (0..8).map(|_| noise.sample(&mut rng)).collect()).collect();
            one_way_anova(&groups).unwrap().p
        })
        .collect();
    let d = ks_uniform(ps);
    let crit = KS_CRIT_001 / (sims as f64).sqrt();
    ensure(d < crit, format!("null ANOVA p-values: KS D = {d:.4} >= {crit:.4}"))?;
    Ok(format!("coverage {coverage:.4}; F = 8 and 0 exact; r = 0.6; null KS D {d:.4} < {crit:.4}"))
}

fn pdvseg(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_pdvseg"))
        .args(args)
        .env_remove("PDVSEG_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
}

fn file_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "run_manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn a6_determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
    for d in ["d1", "d2"] {
        pdvseg(&["gen-phantoms", "--count", "4", "--shape", "32x32x16", "--seed", "13", "--out", &p(d)])?;
    }
    let (a, b) = (file_bytes(&tmp.path().join("d1")), file_bytes(&tmp.path().join("d2")));
    ensure(a == b, "gen-phantoms outputs differ")?;
    let data = p("d1/manifest.json");
    for r in ["r1", "r2"] {
        pdvseg(&["train", "--model", "pdvnet", "--shape", "32x32x16", "--epochs", "3", "--seed", "3", "--data", &data, "--out", &p(r)])?;
    }
    let la = std::fs::read(tmp.path().join("r1/train_log.csv")).map_err(|e| e.to_string())?;
    let lb = std::fs::read(tmp.path().join("r2/train_log.csv")).map_err(|e| e.to_string())?;
    ensure(la == lb, "train logs differ")?;
    Ok(format!("{} phantom files identical; 3-epoch train logs identical ({} bytes)", a.len(), la.len()))
}

fn a7_ordering(d: &Desk, pdv: Option<Vec<f64>>) -> Check {
    let pdv = match pdv {
        Some(p) => *p.last().unwrap(),
        None => train_and_test(NetKind::Pdvnet, &d.train, &d.test, d.dir.path())?[2],
    };
    let dv = train_and_test(NetKind::Dvnet, &d.train, &d.test, d.dir.path())?[0];
    let unet = train_and_test(NetKind::Unet2d, &d.train, &d.test, d.dir.path())?[0];
    let detail = format!(
        "test Dice PDV-Net {pdv:.4}, DV-Net {dv:.4}, 2D U-Net {unet:.4} (data seeds {A3_TRAIN_SEED}/{A3_TEST_SEED}, train seed {A3_TRAIN_RUN_SEED})"
    );
    ensure(pdv >= dv && pdv > unet, format!("{detail}: ordering not reproduced"))?;
    Ok(detail)
}

fn run(id: &str, title: &str, gated: bool, f: impl FnOnce() -> Check) -> bool {
    if std::env::var("ACCEPTANCE_ONLY").is_ok_and(|only| !only.split(',').any(|c| c.trim() == id)) {
        println!("{id} SKIP {title}: not selected by ACCEPTANCE_ONLY");
        return true;
    }
    let t = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = t.elapsed().as_secs_f64();
    let note = if gated { "" } else { " [reported, not gated]" };
    match &result {
        Ok(msg) => println!("{id} PASS {title}: {msg} ({secs:.1}s){note}"),
        Err(msg) => println!("{id} FAIL {title}: {msg} ({secs:.1}s){note}"),
    }
    result.is_ok() || !gated
}

fn main() {
    println!("running acceptance criteria A1-A7");
    let mut ok = true;
    ok &= run("A1", "shape suite", true, a1_shapes);
    ok &= run("A2", "gradient suite", true, a2_gradients);
    let needs_desk = std::env::var("ACCEPTANCE_ONLY").map_or(true, |only| only.contains("A3") || only.contains("A7"));
    let desk = if needs_desk { desk_data() } else { Err("desk data not generated".into()) };
    let mut pdv = None;
    ok &= run("A3", "desk-scale PDV-Net", true, || a3_desk_scale(desk.as_ref().map_err(Clone::clone)?, &mut pdv));
    ok &= run("A4", "metric oracles", true, a4_metric_oracles);
    ok &= run("A5", "statistics suite", true, a5_statistics);
    ok &= run("A6", "determinism", true, a6_determinism);
    ok &= run("A7", "baseline ordering", false, || a7_ordering(desk.as_ref().map_err(Clone::clone)?, pdv));
    if !ok {
        println!("acceptance: FAILED");
        std::process::exit(1);
    }
    println!("acceptance: ok");
}
