//! The seeded cross-resolution benchmark: labeled low-resolution source
//! scenes, unlabeled high-resolution target scenes and a target evaluation split.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::imaging::{gen_scene_at, ConstellationKind, Domain, GenConfig};
use crate::io::LabeledImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub scenes: usize,
    pub eval_scenes: usize,
    pub source_factor: f64,
    pub target_factor: f64,
    pub generator: GenConfig,
}

/// Generator used by the benchmark: cross and diagonal-cross constellations,
/// whose mass sits at the box center where maxima-centered proposals land,
/// under 4-look speckle.
pub fn benchmark_generator() -> GenConfig {
    GenConfig {
        families: vec![ConstellationKind::Cross, ConstellationKind::Diagonal],
        looks: 4.0,
        ..GenConfig::default()
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenes: 300,
            eval_scenes: 100,
            source_factor: 3.0,
            target_factor: 1.0,
            generator: benchmark_generator(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub source: Vec<LabeledImage>,
    pub target: Vec<LabeledImage>,
    pub eval: Vec<LabeledImage>,
}

fn split(
    cfg: &DataConfig,
    domain: Domain,
    factor: f64,
    seed: u64,
    first: usize,
    n: usize,
) -> Result<Vec<LabeledImage>> {
    (0..n)
        .map(|k| {
            let s = gen_scene_at(&cfg.generator, domain, factor, seed, (first + k) as u64)?;
            Ok(LabeledImage {
                id: format!("{k:06}"),
                image: s.image.image,
                annotation: s.annotation,
                domain,
                resolution_factor: factor,
            })
        })
        .collect()
}

/// Source, target and evaluation scenes use disjoint scene indices.
pub fn generate(cfg: &DataConfig, seed: u64) -> Result<Benchmark> {
    let n = cfg.scenes;
    Ok(Benchmark {
        source: split(cfg, Domain::Source, cfg.source_factor, seed, 0, n)?,
        target: split(cfg, Domain::Target, cfg.target_factor, seed, n, n)?,
        eval: split(
            cfg,
            Domain::Target,
            cfg.target_factor,
            seed,
            2 * n,
            cfg.eval_scenes,
        )?,
    })
}
