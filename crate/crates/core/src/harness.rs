//! Batch orchestration for explanation experiments: query/target selection,
//! per-query seed derivation and parallel execution. Queries are
//! embarrassingly parallel; every query gets its own derived stream so
//! results do not depend on scheduling.

use rayon::prelude::*;

use crate::ddpm::Denoiser;
use crate::error::Result;
use crate::guidance::{explain, explain_diverse, CounterfactualResult, GuidanceConfig};
use crate::nets::{AttributeTarget, Classifier, Embedder};
use crate::rngstream::derive_seed;
use crate::schedule::NoiseSchedule;
use crate::Image;

/// The target of a query is always the flip of the classifier's current
/// decision on the query attribute.
pub fn flip_target(
    classifier: &dyn Classifier,
    image: &Image,
    query_attribute: usize,
) -> Result<AttributeTarget> {
    let current = classifier.decides(
        image,
        AttributeTarget {
            attribute: query_attribute,
            value: true,
        },
    )?;
    Ok(AttributeTarget {
        attribute: query_attribute,
        value: !current,
    })
}

pub fn query_seed(base_seed: u64, query_index: usize) -> u64 {
    derive_seed(base_seed, &format!("query/{}", query_index))
}

pub fn run_seed(base_seed: u64, query_index: usize, run_index: usize) -> u64 {
    derive_seed(base_seed, &format!("query/{}/run/{}", query_index, run_index))
}

/// Explains every query in parallel. Indices name the queries for seed
/// derivation, so a subset run replays the same per-query streams as a full
/// run with the same base seed.
#[allow(clippy::too_many_arguments)]
pub fn run_query_batch(
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    classifier: &dyn Classifier,
    embedder: &dyn Embedder,
    queries: &[(usize, &Image)],
    query_attribute: usize,
    cfg: &GuidanceConfig,
    base_seed: u64,
) -> Result<Vec<CounterfactualResult>> {
    queries
        .par_iter()
        .map(|(index, image)| {
            let target = flip_target(classifier, image, query_attribute)?;
            explain(
                model,
                schedule,
                classifier,
                embedder,
                image,
                target,
                cfg,
                query_seed(base_seed, *index),
            )
        })
        .collect()
}

/// Runs `runs` independent seeded explanations per query; all results are
/// kept, including failures.
#[allow(clippy::too_many_arguments)]
pub fn run_diversity_batch(
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    classifier: &dyn Classifier,
    embedder: &dyn Embedder,
    queries: &[(usize, &Image)],
    query_attribute: usize,
    cfg: &GuidanceConfig,
    base_seed: u64,
    runs: usize,
) -> Result<Vec<Vec<CounterfactualResult>>> {
    queries
        .par_iter()
        .map(|(index, image)| {
            let target = flip_target(classifier, image, query_attribute)?;
            let seeds: Vec<u64> = (0..runs).map(|r| run_seed(base_seed, *index, r)).collect();
            explain_diverse(
                model, schedule, classifier, embedder, image, target, cfg, &seeds,
            )
        })
        .collect()
}
