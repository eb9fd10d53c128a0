//! Finite-difference check of a whole tracker on a tiny configuration, used
//! by the `gradcheck` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::ModelConfig;
use crate::error::Result;
use crate::event_io::{BBox, EventPoint, EventStream, SensorSize};
use crate::graph::build_knn_graph;
use crate::loss::LossWeights;
use crate::model::{Sample, Tracker, TrackerKind};
use crate::nn::gradcheck::{grad_check, GradCheckReport};
use crate::tensor::Mat;

pub const TOLERANCE: f64 = 1e-4;

/// 8-wide trackers on 8x8 crops with 4x4 patches: 4 template and 4 search
/// tokens, two blocks for the slow tracker.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        patch_size: 4,
        template_size: 8,
        search_size: 8,
        depth_slow: 2,
        depth_fast: 1,
        heads: 2,
        ..ModelConfig::desk()
    }
}

fn random_sample(rng: &mut ChaCha8Rng, nodes: usize) -> Result<Sample> {
    let sensor = SensorSize::new(32, 32);
    let mut points: Vec<EventPoint> = (0..nodes)
        .map(|_| EventPoint {
            t: rng.gen_range(0..1000),
            x: rng.gen_range(0..32),
            y: rng.gen_range(0..32),
            p: if rng.gen_bool(0.5) { 1 } else { -1 },
        })
        .collect();
    points.sort_by_key(|p| p.t);
    let stream = EventStream {
        points,
        duration: 1000,
        sensor,
    };
    let img = |rng: &mut ChaCha8Rng| (0..3 * 64).map(|_| rng.gen_range(0.0f32..2.0)).collect();
    Ok(Sample {
        template: img(rng),
        search: img(rng),
        graph: Some(build_knn_graph(&stream, 3)?),
    })
}

/// Loss gradient of every parameter of a perturbed tiny tracker against
/// central differences. The fast tracker includes the distillation term
/// towards random teacher features.
pub fn tracker_gradcheck(kind: TrackerKind, seed: u64, max_entries: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Tracker::<f64>::new(kind, &tiny_config(), seed)?;
    model.ps.perturb(&mut rng, 0.2);
    let sample = random_sample(&mut rng, 12)?;
    let gt = BBox::from_center(0.4, 0.6, 0.3, 0.25);
    let teacher = (kind == TrackerKind::Fast).then(|| {
        let c = model.cfg.embed_dim;
        Mat::from_fn(model.cfg.n_s(), c, |_, _| rng.gen_range(-1.0..1.0))
    });
    let weights = LossWeights::default();
    let mut grads = model.ps.grads();
    model.loss_and_grad(&sample, &gt, teacher.as_ref(), weights, &mut grads)?;
    let mut ps = model.ps.clone();
    let mut probe = model.clone();
    Ok(grad_check(
        &mut ps,
        &grads,
        |p| {
            probe.ps.clone_from(p);
            probe
                .loss(&sample, &gt, teacher.as_ref(), weights)
                .map(|b| b.total)
                .unwrap_or(f64::NAN)
        },
        TOLERANCE,
        max_entries,
    ))
}
