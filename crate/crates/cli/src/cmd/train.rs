use std::fs::File;
use std::io::BufWriter;

use msfanet::model::MsfaNet;
use msfanet::train::{load_checkpoint, Trainer};

use super::{create_dir, output_dir, required_manifest, write_file};
use crate::dataset::load_dataset;
use crate::manifest::ExperimentManifest;
use crate::{CliError, GlobalArgs, TrainArgs};

/// Manifest with command-line overrides applied and the output root resolved.
pub fn resolve(g: &GlobalArgs, a: &TrainArgs) -> Result<ExperimentManifest, CliError> {
    let mut m = required_manifest(g, "train")?;
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
    m.paths.output_dir = output_dir(a.output.as_deref(), Some(&m), "");
    // Keep a clean path in the echoed config.
    m.paths.output_dir = m.paths.output_dir.components().collect();
    let problems = m.validate();
    if !problems.is_empty() {
        return Err(CliError::Validation(problems));
    }
    Ok(m)
}

pub fn run(g: &GlobalArgs, a: &TrainArgs) -> Result<(), CliError> {
    let m = resolve(g, a)?;
    let model = m.model.clone().with_ablation(m.train.ablation);
    if g.dry_run {
        let net = MsfaNet::new(model)?;
        println!("# parameters = {}", net.parameter_count());
        print!("{}", m.to_toml());
        return Ok(());
    }
    let samples = load_dataset(&m.paths.data_root)?;
    let out = &m.paths.output_dir;
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    write_file(&out.join("manifest.resolved.toml"), m.to_toml())?;

    let (mut trainer, log_file) = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.model != model {
                return Err(CliError::Validation(vec![format!(
                    "checkpoint {} was trained with a different model config than the manifest",
                    path.display()
                )]));
            }
            let log = File::options().create(true).append(true).open(out.join("loss.ndjson"))?;
            (Trainer::resume(ckpt, samples)?, log)
        }
        None => {
            let trainer = Trainer::new(m.model.clone(), m.train.clone(), m.augmentation.clone(), samples, m.paths.pretrained.as_deref())?;
            (trainer, File::create(out.join("loss.ndjson"))?)
        }
    };
    let remaining = m.train.iterations.saturating_sub(trainer.iteration());
    let mut log = BufWriter::new(log_file);
    let (records, last) = trainer.run(remaining, &mut log, Some(&ckpt_dir))?;
    if let Some(r) = records.last() {
        println!("iteration {} {} loss {:.6}", r.iteration, r.objective, r.value);
    }
    if let Some(p) = last {
        println!("checkpoint {}", p.display());
    }
    Ok(())
}
