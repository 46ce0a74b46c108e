use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use msfanet::data::{kfold_splits, write_raw, CrowdSample};
use msfanet::eval::{evaluate, export_heatmap, EvalOptions, EvalReport};
use msfanet::model::MsfaNet;
use msfanet::train::{load_checkpoint, Trainer};
use serde::{Deserialize, Serialize};

use super::{create_dir, data_dir, optional_manifest, output_dir, write_file};
use crate::dataset::load_dataset;
use crate::manifest::ExperimentManifest;
use crate::{CliError, EvalArgs, GlobalArgs};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub train_images: usize,
    pub test_images: usize,
    pub mae: f64,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KFoldReport {
    pub k: usize,
    pub folds: Vec<FoldSummary>,
    pub mean_mae: f64,
    pub mean_mse: f64,
}

fn write_outputs(
    out: &Path,
    report: &EvalReport,
    samples: &[CrowdSample],
    predictions: &[msfanet::data::DensityMap],
    heatmaps: bool,
) -> Result<(), CliError> {
    create_dir(out)?;
    write_file(&out.join("report.json"), report.to_json())?;
    if heatmaps {
        let dir = out.join("heatmaps");
        create_dir(&dir)?;
        for (s, d) in samples.iter().zip(predictions) {
            export_heatmap(d, &dir.join(format!("{}.png", s.id)))?;
            write_raw(d, &dir.join(format!("{}.f32", s.id)))?;
        }
    }
    Ok(())
}

pub fn run(g: &GlobalArgs, a: &EvalArgs) -> Result<(), CliError> {
    let manifest = optional_manifest(g)?;
    let data = data_dir(a.data.as_deref(), manifest.as_ref())?;
    let mut opts = manifest.as_ref().map(|m| m.eval.clone()).unwrap_or_default();
    opts.regions |= a.regions;
    let out = output_dir(a.output.as_deref(), manifest.as_ref(), "eval");
    if let Some(k) = a.kfold {
        let mut m = manifest.ok_or_else(|| CliError::Validation(vec!["--kfold needs --manifest for the training settings".to_owned()]))?;
        if let Some(seed) = g.seed {
            m.train.seed = seed;
        }
        if let Some(w) = g.workers {
            m.train.workers = w;
        }
        if let Some(ab) = a.ablation {
            m.train.ablation = ab;
        }
        if let Some(n) = a.iterations {
            m.train.iterations = n;
        }
        let mut problems = m.validate();
        if k < 2 {
            problems.push(format!("--kfold must be >= 2, got {k}"));
        }
        if !problems.is_empty() {
            return Err(CliError::Validation(problems));
        }
        if g.dry_run {
            println!("k = {k}\ndata = {}\nout = {}\niterations per fold = {}", data.display(), out.display(), m.train.iterations);
            return Ok(());
        }
        return kfold(&m, k, &load_dataset(&data)?, &opts, a.heatmaps, &out);
    }
    let ckpt_path = a.checkpoint.as_deref().expect("clap requires --checkpoint without --kfold");
    let ckpt = load_checkpoint(ckpt_path)?;
    if let Some(m) = &manifest {
        let expected = m.model.clone().with_ablation(m.train.ablation);
        if expected != ckpt.model {
            return Err(CliError::Validation(vec![format!(
                "model config mismatch: manifest describes {}, checkpoint {} holds {}",
                serde_json::to_string(&expected).unwrap_or_default(),
                ckpt_path.display(),
                serde_json::to_string(&ckpt.model).unwrap_or_default()
            )]));
        }
    }
    if g.dry_run {
        println!("checkpoint = {}\ndata = {}\nout = {}\nregions = {}", ckpt_path.display(), data.display(), out.display(), opts.regions);
        return Ok(());
    }
    let net = MsfaNet::new(ckpt.model.clone())?;
    let samples = load_dataset(&data)?;
    let result = evaluate(&net, &ckpt.params, &samples, &opts)?;
    write_outputs(&out, &result.report, &samples, &result.predictions, a.heatmaps)?;
    println!("images {} MAE {:.4} MSE {:.4}", samples.len(), result.report.mae, result.report.mse);
    if let Some(r) = &result.report.region_mae {
        println!("region MAE far {:.4} mid {:.4} near {:.4}", r["far"], r["mid"], r["near"]);
    }
    Ok(())
}

fn kfold(m: &ExperimentManifest, k: usize, samples: &[CrowdSample], opts: &EvalOptions, heatmaps: bool, out: &Path) -> Result<(), CliError> {
    let folds = kfold_splits(&(0..samples.len()).collect::<Vec<_>>(), k, m.train.seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    let mut summaries = Vec::with_capacity(k);
    for (f, fold) in folds.iter().enumerate() {
        let dir = out.join(format!("fold-{f}"));
        create_dir(&dir.join("checkpoints"))?;
        let mut trainer = Trainer::new(m.model.clone(), m.train.clone(), m.augmentation.clone(), pick(&fold.train), m.paths.pretrained.as_deref())?;
        let mut log = BufWriter::new(File::create(dir.join("loss.ndjson"))?);
        trainer.run(m.train.iterations, &mut log, Some(&dir.join("checkpoints")))?;
        let test = pick(&fold.test);
        let result = evaluate(trainer.net(), trainer.params(), &test, opts)?;
        write_outputs(&dir, &result.report, &test, &result.predictions, heatmaps)?;
        println!("fold {f}: MAE {:.4} MSE {:.4}", result.report.mae, result.report.mse);
        summaries.push(FoldSummary {
            fold: f,
            train_images: fold.train.len(),
            test_images: fold.test.len(),
            mae: result.report.mae,
            mse: result.report.mse,
        });
    }
    let mean = |f: fn(&FoldSummary) -> f64| summaries.iter().map(f).sum::<f64>() / k as f64;
    let report = KFoldReport {
        k,
        mean_mae: mean(|s| s.mae),
        mean_mse: mean(|s| s.mse),
        folds: summaries,
    };
    write_file(&out.join("kfold.json"), serde_json::to_string_pretty(&report).expect("report serializes"))?;
    println!("{k}-fold mean MAE {:.4} MSE {:.4}", report.mean_mae, report.mean_mse);
    Ok(())
}
