use msfanet::data::{load_annotations, write_raw};
use msfanet::eval::{export_feature_channels, export_heatmap};
use msfanet::model::MsfaNet;
use msfanet::train::load_checkpoint;

use super::{create_dir, optional_manifest, output_dir};
use crate::{CliError, GlobalArgs, VisualizeArgs};

pub fn run(g: &GlobalArgs, a: &VisualizeArgs) -> Result<(), CliError> {
    let manifest = optional_manifest(g)?;
    let out = output_dir(a.output.as_deref(), manifest.as_ref(), "visualize");
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let loaded = load_annotations(&a.sample).map_err(|e| CliError::Validation(vec![e.to_string()]))?;
    let net = MsfaNet::new(ckpt.model.clone())?;
    if g.dry_run {
        println!("checkpoint = {}\nsample = {}\nout = {}\nlayers = {:?}", a.checkpoint.display(), a.sample.display(), out.display(), a.layers);
        return Ok(());
    }
    let pass = net.forward(&ckpt.params, &loaded.sample.image)?;
    let unknown: Vec<String> = a
        .layers
        .iter()
        .filter(|l| pass.feature(l).is_none())
        .map(|l| format!("unknown layer `{l}` (available: {})", pass.hook_names().collect::<Vec<_>>().join(", ")))
        .collect();
    if !unknown.is_empty() {
        return Err(CliError::Validation(unknown));
    }
    create_dir(&out)?;
    let id = &loaded.sample.id;
    let side = export_heatmap(&pass.density, &out.join(format!("{id}-density.png")))?;
    write_raw(&pass.density, &out.join(format!("{id}-density.f32")))?;
    for layer in &a.layers {
        let grid = pass.feature(layer).expect("checked above");
        let files = export_feature_channels(grid, layer, &out.join(format!("{id}-features")))?;
        println!("{layer}: {} channels", files.len());
    }
    println!("count {:.4} (density range {:.4}..{:.4})", pass.density.sum(), side.min, side.max);
    Ok(())
}
