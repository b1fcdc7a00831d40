use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use pdvseg::metrics::{
    bland_altman, dice_per_lobe, pearson, robustness_buckets, structure_volumes_ml, BlandAltman, BucketReport, CaseScores, Grouping, MetricsReport, Pearson,
    STRUCTURES,
};
use pdvseg::networks::{build, NetKind, Network, NetworkSpec};
use pdvseg::phantom::{generate_dataset, PhantomConfig};
use pdvseg::training::{load_checkpoint, predict_case, train as run_training, BatchMode, TrainConfig};
use pdvseg::volume::{load_mask, save_mask, CaseEntry, LabelMask, Manifest, ScanMetadata, LOBE_NAMES};
use pdvseg::Parameters32;
use serde::{Deserialize, Serialize};

use crate::run::{unix_now, RunManifest};
use crate::svg::bland_altman_svg;
use crate::{AgreementArgs, EvalArgs, GenPhantomsArgs, ReportArgs, TrainArgs, UsageError};

const DEFAULT_SHAPE: [usize; 3] = [64, 64, 32];

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, text: &str) -> Result<PathBuf> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path.to_path_buf())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<PathBuf> {
    write_file(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn gen_phantoms(a: &GenPhantomsArgs) -> Result<()> {
    let started = unix_now();
    if a.count == 0 {
        return Err(UsageError("--count must be positive".into()).into());
    }
    if let Some(d) = a.shape.iter().find(|&&d| d % 8 != 0) {
        return Err(UsageError(format!(
            "--shape {}x{}x{}: dimension {d} is not divisible by 8 (the networks halve every axis three times)",
            a.shape[0], a.shape[1], a.shape[2]
        ))
        .into());
    }
    let cfg = PhantomConfig {
        shape: a.shape,
        fissure_completeness: a.completeness,
        noise_sd: a.noise_sd,
        pathology_blob_count: a.blobs,
        seed: a.seed,
        ..PhantomConfig::default()
    };
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    let manifest = generate_dataset(a.count, &cfg, &a.out)?;
    info!("wrote {} phantoms to {}", a.count, a.out.display());
    let mut run = RunManifest::new("gen-phantoms", a, Some(a.seed), started)?;
    run.outputs.push(manifest.clone());
    run.write(&a.out)?;
    println!("{}", manifest.display());
    Ok(())
}

/// Resolves the training config: flags over the config file over defaults.
pub fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<TrainConfig>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => TrainConfig::for_kind(a.model, a.shape.unwrap_or(DEFAULT_SHAPE), PathBuf::from("runs").join(a.model.as_str())),
    };
    if cfg.network.kind != a.model {
        return Err(UsageError(format!("--model {} but the config describes a {} network", a.model, cfg.network.kind)).into());
    }
    if let Some(s) = a.shape {
        cfg.target_shape = s;
        cfg.network.in_shape = if a.model.is_2d() { s[..2].to_vec() } else { s.to_vec() };
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.optimizer.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.optimizer.batch_size = v;
    }
    if let Some(v) = a.dropout {
        cfg.network.dropout_rate = v;
    }
    if let Some(v) = &a.out {
        cfg.checkpoint_dir = v.clone();
    }
    cfg.validate().map_err(|e| UsageError(format!("invalid training config: {e}")))?;
    Ok(cfg)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let started = unix_now();
    let cfg = resolve_train_config(a)?;
    let manifest = Manifest::load(&a.data)?;
    info!(
        "pipeline: {}",
        match cfg.batch_mode() {
            BatchMode::Volume3d => "3d volumes",
            BatchMode::Slices2d => "2d slices (axial slices containing lung)",
        }
    );
    let state = run_training::<f32>(&cfg, &manifest)?;
    let dir = &cfg.checkpoint_dir;
    let config_path = write_json(&dir.join("config.json"), &cfg)?;
    info!("best validation dice {:.4} at epoch {}", state.best_val_dice, state.best_epoch);
    let mut run = RunManifest::new("train", &cfg, Some(cfg.seed), started)?;
    run.outputs = vec![
        config_path,
        state.best_checkpoint.clone(),
        state.last_checkpoint.clone(),
        dir.join(pdvseg::training::TRAIN_LOG),
        dir.join(pdvseg::training::TRAIN_STATE),
    ];
    run.write(dir)?;
    println!("{}", state.best_checkpoint.display());
    Ok(())
}

/// Where predicted masks come from.
enum Predictor {
    Model(Box<(Network, Parameters32)>),
    Dir(PathBuf),
}

impl Predictor {
    fn new(checkpoint: Option<&Path>, dir: Option<&Path>, expect: Option<NetKind>) -> Result<Self> {
        match (checkpoint, dir) {
            (Some(ck), _) => {
                let (spec, params): (NetworkSpec, Parameters32) = load_checkpoint(ck)?;
                if let Some(kind) = expect {
                    if spec.kind != kind {
                        return Err(pdvseg::Error::SpecMismatch {
                            expected: kind.to_string(),
                            found: spec.kind.to_string(),
                        }
                        .into());
                    }
                }
                let (net, _, _) = build::<f32>(&spec, 0)?;
                Ok(Predictor::Model(Box::new((net, params))))
            }
            (None, Some(d)) => Ok(Predictor::Dir(d.to_path_buf())),
            (None, None) => bail!("either a checkpoint or a predictions directory is required"),
        }
    }

    /// Per-pathway masks (one for stored predictions); `None` when the
    /// stored prediction is missing.
    fn predict(&self, manifest: &Manifest, entry: &CaseEntry) -> Result<Option<Vec<LabelMask>>> {
        match self {
            Predictor::Model(model) => Ok(Some(predict_case(&model.0, &model.1, manifest, entry)?)),
            Predictor::Dir(dir) => {
                let path = dir.join(entry.mask_path.file_name().context("mask path has no file name")?);
                if !path.exists() {
                    warn!("case {}: no prediction at {}, skipped", entry.case_id, path.display());
                    return Ok(None);
                }
                Ok(Some(vec![load_mask(&path)?]))
            }
        }
    }
}

/// A scored case: truth and final prediction plus Dice of every pathway.
struct Scored {
    entry: CaseEntry,
    truth: LabelMask,
    pred: LabelMask,
    pathways: Vec<f64>,
    scores: CaseScores,
}

fn score_cases(manifest: &Manifest, predictor: &Predictor) -> Result<(Vec<Scored>, Vec<String>)> {
    let mut scored = Vec::new();
    let mut skipped = Vec::new();
    for entry in &manifest.cases {
        let mask_path = manifest.mask_path(entry);
        if !mask_path.exists() {
            warn!("case {}: mask {} missing, skipped", entry.case_id, mask_path.display());
            skipped.push(entry.case_id.clone());
            continue;
        }
        let Some(preds) = predictor.predict(manifest, entry)? else {
            skipped.push(entry.case_id.clone());
            continue;
        };
        let truth = load_mask(&mask_path)?;
        let pathways = preds.iter().map(|p| Ok(dice_per_lobe(p, &truth)?.overall)).collect::<Result<Vec<_>>>()?;
        let pred = preds.into_iter().last().expect("at least one pathway");
        let dice = dice_per_lobe(&pred, &truth)?;
        scored.push(Scored {
            entry: entry.clone(),
            truth,
            pred,
            pathways,
            scores: CaseScores {
                case_id: entry.case_id.clone(),
                dice,
            },
        });
    }
    if !skipped.is_empty() {
        warn!("{} case(s) skipped", skipped.len());
    }
    Ok((scored, skipped))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalOutput {
    pub n_cases: usize,
    pub skipped: Vec<String>,
    /// Mean overall Dice of every pathway, coarsest first.
    pub pathway_overall: Vec<f64>,
    pub report: MetricsReport,
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let started = unix_now();
    let manifest = Manifest::load(&a.data)?;
    let predictor = Predictor::new(a.checkpoint.as_deref(), a.predictions_dir.as_deref(), a.model)?;
    let (scored, skipped) = score_cases(&manifest, &predictor)?;
    if scored.is_empty() {
        bail!("no case could be evaluated ({} skipped)", skipped.len());
    }
    create_dir(&a.out)?;
    if let Some(dir) = &a.save_predictions {
        create_dir(dir)?;
        for s in &scored {
            save_mask(&s.pred, &dir.join(s.entry.mask_path.file_name().expect("checked when predicting")))?;
        }
    }
    let n_paths = scored[0].pathways.len();
    let pathway_overall = (0..n_paths).map(|p| scored.iter().map(|s| s.pathways[p]).sum::<f64>() / scored.len() as f64).collect();
    let report = MetricsReport::from_cases(scored.iter().map(|s| s.scores.clone()).collect())?;
    let out = EvalOutput {
        n_cases: scored.len(),
        skipped,
        pathway_overall,
        report,
    };
    let mut run = RunManifest::new("eval", a, None, started)?;
    run.outputs = vec![
        write_file(&a.out.join("cases.csv"), &out.report.case_csv())?,
        write_file(&a.out.join("summary.csv"), &out.report.summary_csv())?,
        write_json(&a.out.join("report.json"), &out)?,
    ];
    run.write(&a.out)?;
    println!(
        "evaluated {} case(s), skipped {}; mean overall dice {:.4}",
        out.n_cases,
        out.skipped.len(),
        out.report.mean_overall()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StructureAgreement {
    pub structure: String,
    pub bland_altman: BlandAltman,
    /// `None` when either volume series is constant.
    pub pearson: Option<Pearson>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AgreementOutput {
    pub n_cases: usize,
    pub skipped: Vec<String>,
    pub structures: Vec<StructureAgreement>,
    pub robustness: Vec<BucketReport>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6e}")).unwrap_or_default()
}

pub fn agreement(a: &AgreementArgs) -> Result<()> {
    let started = unix_now();
    let manifest = Manifest::load(&a.data)?;
    let predictor = Predictor::new(a.checkpoint.as_deref(), a.predictions_dir.as_deref(), None)?;
    let (scored, skipped) = score_cases(&manifest, &predictor)?;
    if scored.len() < 2 {
        bail!("agreement analysis needs at least 2 cases, got {}", scored.len());
    }
    create_dir(&a.out)?;
    let truth_ml: Vec<[f64; 6]> = scored.iter().map(|s| structure_volumes_ml(&s.truth)).collect();
    let pred_ml: Vec<[f64; 6]> = scored.iter().map(|s| structure_volumes_ml(&s.pred)).collect();

    let mut volumes = String::from("case_id,structure,truth_ml,pred_ml\n");
    for (s, (t, p)) in scored.iter().zip(truth_ml.iter().zip(&pred_ml)) {
        for (k, name) in STRUCTURES.iter().enumerate() {
            let _ = writeln!(volumes, "{},{name},{:.6},{:.6}", s.entry.case_id, t[k], p[k]);
        }
    }
    let mut structures = Vec::new();
    let mut table = String::from("structure,n,bias_ml,sd_ml,lower_ml,upper_ml,pearson_r,pearson_p\n");
    let mut outputs = Vec::new();
    for (k, name) in STRUCTURES.iter().enumerate() {
        let t: Vec<f64> = truth_ml.iter().map(|v| v[k]).collect();
        let p: Vec<f64> = pred_ml.iter().map(|v| v[k]).collect();
        let ba = bland_altman(&p, &t)?;
        let r = match pearson(&p, &t) {
            Ok(r) => Some(r),
            Err(e) => {
                warn!("{name}: correlation not computed: {e}");
                None
            }
        };
        let _ = writeln!(
            table,
            "{name},{},{:.6},{:.6},{:.6},{:.6},{},{}",
            t.len(),
            ba.bias,
            ba.sd,
            ba.lower,
            ba.upper,
            fmt_opt(r.map(|r| r.r)),
            fmt_opt(r.map(|r| r.p))
        );
        if a.svg {
            outputs.push(write_file(&a.out.join(format!("bland_altman_{}.svg", name.to_lowercase())), &bland_altman_svg(name, &ba))?);
        }
        structures.push(StructureAgreement {
            structure: name.to_string(),
            bland_altman: ba,
            pearson: r,
        });
    }
    let dice: Vec<f64> = scored.iter().map(|s| s.scores.dice.overall).collect();
    let metas: Vec<ScanMetadata> = scored.iter().map(|s| s.entry.metadata.clone()).collect();
    let robustness = Grouping::ALL.iter().map(|&g| robustness_buckets(&dice, &metas, g)).collect::<pdvseg::Result<Vec<_>>>()?;
    let mut anova = String::from("grouping,bucket,n,mean,sd,median,q1,q3\n");
    let mut tests = String::from("grouping,f,p,df_between,df_within,note\n");
    for r in &robustness {
        for b in &r.buckets {
            let s = b.summary;
            let _ = writeln!(
                anova,
                "{},{},{},{},{},{},{},{}",
                r.grouping.as_str(),
                b.label,
                b.n,
                fmt_opt(s.map(|s| s.mean)),
                fmt_opt(s.filter(|s| s.sd_defined).map(|s| s.sd)),
                fmt_opt(s.map(|s| s.median)),
                fmt_opt(s.map(|s| s.q1)),
                fmt_opt(s.map(|s| s.q3))
            );
        }
        match &r.anova {
            Some(t) => {
                let _ = writeln!(tests, "{},{:.6e},{:.6e},{},{},", r.grouping.as_str(), t.f, t.p, t.df_between, t.df_within);
            }
            None => {
                let note = r.warning.clone().unwrap_or_default().replace(',', ";");
                let _ = writeln!(tests, "{},,,,,{note}", r.grouping.as_str());
            }
        }
    }
    let out = AgreementOutput {
        n_cases: scored.len(),
        skipped,
        structures,
        robustness,
    };
    outputs.extend([
        write_file(&a.out.join("volumes.csv"), &volumes)?,
        write_file(&a.out.join("agreement.csv"), &table)?,
        write_file(&a.out.join("robustness_buckets.csv"), &anova)?,
        write_file(&a.out.join("robustness_anova.csv"), &tests)?,
        write_json(&a.out.join("agreement.json"), &out)?,
    ]);
    let mut run = RunManifest::new("agreement", a, None, started)?;
    run.outputs = outputs;
    run.write(&a.out)?;
    println!("agreement over {} case(s) written to {}", out.n_cases, a.out.display());
    Ok(())
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let started = unix_now();
    let ev: EvalOutput = read_json(&a.eval.join("report.json"))?;
    let r = &ev.report;
    let mut md = format!("# Lobe segmentation report\n\n{} case(s) evaluated, {} skipped.\n\n", ev.n_cases, ev.skipped.len());
    md.push_str("| structure | mean ± SD | median | Q1 | Q3 |\n|---|---|---|---|---|\n");
    for (name, s) in LOBE_NAMES.iter().copied().zip(r.lobes.iter()).chain([("overall", &r.overall)]) {
        let _ = writeln!(md, "| {name} | {:.4} ± {:.4} | {:.4} | {:.4} | {:.4} |", s.mean, s.sd, s.median, s.q1, s.q3);
    }
    if ev.pathway_overall.len() > 1 {
        md.push_str("\n| pathway | mean overall Dice |\n|---|---|\n");
        for (i, d) in ev.pathway_overall.iter().enumerate() {
            let _ = writeln!(md, "| {} | {d:.4} |", i + 1);
        }
    }
    if let Some(dir) = &a.agreement {
        let ag: AgreementOutput = read_json(&dir.join("agreement.json"))?;
        md.push_str("\n## Volume agreement\n\n| structure | bias (ml) | limits of agreement (ml) | Pearson r | p |\n|---|---|---|---|---|\n");
        for s in &ag.structures {
            let ba = &s.bland_altman;
            let (rr, p) = s.pearson.map(|p| (format!("{:.4}", p.r), format!("{:.2e}", p.p))).unwrap_or_default();
            let _ = writeln!(md, "| {} | {:.2} | [{:.2}, {:.2}] | {rr} | {p} |", s.structure, ba.bias, ba.lower, ba.upper);
        }
        md.push_str("\n## Robustness\n\n| grouping | F | p | note |\n|---|---|---|---|\n");
        for b in &ag.robustness {
            match &b.anova {
                Some(t) => {
                    let _ = writeln!(md, "| {} | {:.4} | {:.4} | |", b.grouping.as_str(), t.f, t.p);
                }
                None => {
                    let _ = writeln!(md, "| {} | | | {} |", b.grouping.as_str(), b.warning.clone().unwrap_or_default());
                }
            }
        }
    }
    create_dir(&a.out)?;
    let mut run = RunManifest::new("report", a, None, started)?;
    run.outputs.push(write_file(&a.out.join("report.md"), &md)?);
    run.write(&a.out)?;
    println!("{}", a.out.join("report.md").display());
    Ok(())
}
