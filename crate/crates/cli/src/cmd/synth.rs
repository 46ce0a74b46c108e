//! Synthetic dataset emission.

use msfanet::data::image::save_image;
use msfanet::data::synth::band_counts;
use msfanet::data::{synthesize_scene, DensityProfile, Sidecar};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{create_dir, optional_manifest, output_dir, write_file};
use crate::{CliError, GlobalArgs, SynthArgs};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthEntry {
    pub id: String,
    pub image: String,
    pub count: usize,
    /// Heads in the top, middle and bottom thirds.
    pub band_counts: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthIndex {
    pub seed: u64,
    pub profile: DensityProfile,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<SynthEntry>,
}

pub fn run(g: &GlobalArgs, a: &SynthArgs) -> Result<(), CliError> {
    let manifest = optional_manifest(g)?;
    let seed = g.seed.or(manifest.as_ref().map(|m| m.train.seed)).unwrap_or(0);
    let mut problems = Vec::new();
    if a.height == 0 || a.width == 0 {
        problems.push("--height and --width must be > 0".to_owned());
    }
    if a.min_heads > a.max_heads {
        problems.push(format!("--min-heads ({}) exceeds --max-heads ({})", a.min_heads, a.max_heads));
    }
    if !problems.is_empty() {
        return Err(CliError::Validation(problems));
    }
    let out = output_dir(a.out.as_deref(), manifest.as_ref(), "synth");
    if g.dry_run {
        println!("out = {}\nseed = {seed}\ncount = {}\nprofile = {:?}", out.display(), a.count, a.profile);
        return Ok(());
    }
    create_dir(&out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut index = SynthIndex {
        seed,
        profile: a.profile,
        height: a.height,
        width: a.width,
        samples: Vec::with_capacity(a.count),
    };
    for i in 0..a.count {
        let heads = rng.random_range(a.min_heads..=a.max_heads);
        let scene_seed = rng.next_u64();
        let scene = synthesize_scene(scene_seed, heads, (a.height, a.width), a.profile)?;
        let id = format!("synth-{i:04}");
        let image = format!("{id}.png");
        save_image(&scene.image, &out.join(&image))?;
        let sidecar = Sidecar {
            image: image.clone(),
            points: scene.annotations.points().iter().map(|&(x, y)| [x, y]).collect(),
            roi_polygons: None,
        };
        write_file(&out.join(format!("{id}.json")), serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"))?;
        index.samples.push(SynthEntry {
            id,
            image,
            count: heads,
            band_counts: band_counts(&scene.annotations),
        });
    }
    write_file(&out.join("index.json"), serde_json::to_string_pretty(&index).expect("index serializes"))?;
    println!("wrote {} samples to {}", a.count, out.display());
    Ok(())
}
