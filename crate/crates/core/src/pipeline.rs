//! Turning sequences into network inputs: stacked frames, template/search
//! crops, window graphs and the training-pair sampler.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{ModelConfig, IMAGE_CHANNELS};
use crate::error::{Error, Result};
use crate::event_io::{crop_region, stack_events, BBox, CropTransform, FrameStack, SequenceRecord, FRAME_CHANNELS};
use crate::fusion::event_graph;
use crate::graph::EventGraph;
use crate::model::Sample;

/// A sequence with its stacked frames and per-window graphs precomputed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub record: SequenceRecord,
    pub frames: FrameStack,
    pub graphs: Vec<Option<EventGraph>>,
}

impl Prepared {
    pub fn new(record: SequenceRecord, cfg: &ModelConfig) -> Result<Self> {
        record.validate()?;
        let frames = stack_events(&record.stream, record.delta_t)?;
        let graphs = (0..record.num_windows())
            .map(|i| event_graph(&record.window_events(i), cfg.max_points, cfg.knn_k))
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared { record, frames, graphs })
    }

    pub fn num_windows(&self) -> usize {
        self.frames.n
    }

    pub fn gt(&self, i: usize) -> BBox {
        self.record.ground_truth[i]
    }

    fn crop(&self, i: usize, around: &BBox, factor: f64, size: usize) -> Result<(Vec<f32>, CropTransform)> {
        debug_assert_eq!(FRAME_CHANNELS, IMAGE_CHANNELS);
        crop_region(
            self.frames.frame(i),
            FRAME_CHANNELS,
            self.frames.height,
            self.frames.width,
            around,
            factor,
            size,
        )
    }

    pub fn template(&self, cfg: &ModelConfig, i: usize) -> Result<Vec<f32>> {
        Ok(self.crop(i, &self.gt(i), cfg.template_factor, cfg.template_size)?.0)
    }

    pub fn search(&self, cfg: &ModelConfig, i: usize, around: &BBox) -> Result<(Vec<f32>, CropTransform)> {
        self.crop(i, around, cfg.search_factor, cfg.search_size)
    }
}

pub fn prepare_all(records: Vec<SequenceRecord>, cfg: &ModelConfig) -> Result<Vec<Prepared>> {
    records.into_iter().map(|r| Prepared::new(r, cfg)).collect()
}

/// One training pair before cropping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairSpec {
    pub seq: usize,
    pub template: usize,
    pub search: usize,
    /// Box the search crop is centred on: the ground truth, jittered.
    pub crop_box: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub pairs_per_sequence: usize,
    pub max_gap: usize,
    /// Centre jitter as a fraction of `sqrt(w * h)`.
    pub center_jitter: f64,
    /// Log-scale jitter of the crop box.
    pub scale_jitter: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            pairs_per_sequence: 16,
            max_gap: 10,
            center_jitter: 0.4,
            scale_jitter: 0.15,
        }
    }
}

fn pair_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_5A3F);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Training pairs of one epoch in a seed-determined order. Pair `index`
/// depends only on `(seed, epoch, index)`.
pub fn sample_pairs(data: &[Prepared], sc: &SamplerConfig, seed: u64, epoch: usize) -> Result<Vec<PairSpec>> {
    if sc.max_gap == 0 {
        return Err(Error::Argument("max_gap must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(data.len() * sc.pairs_per_sequence);
    for (s, seq) in data.iter().enumerate() {
        let n = seq.num_windows();
        if n < 2 {
            return Err(Error::Validation(format!(
                "sequence {} has {n} window(s), pairs need two",
                seq.record.name
            )));
        }
        for p in 0..sc.pairs_per_sequence {
            let mut rng = pair_rng(seed, epoch, s * sc.pairs_per_sequence + p);
            let template = rng.gen_range(0..n - 1);
            let gap = rng.gen_range(1..=sc.max_gap);
            let search = (template + gap).min(n - 1);
            let gt = seq.gt(search);
            let side = (gt.w * gt.h).sqrt();
            let (cx, cy) = gt.center();
            let jx = rng.gen_range(-sc.center_jitter..=sc.center_jitter) * side;
            let jy = rng.gen_range(-sc.center_jitter..=sc.center_jitter) * side;
            let scale = rng.gen_range(-sc.scale_jitter..=sc.scale_jitter).exp();
            out.push(PairSpec {
                seq: s,
                template,
                search,
                crop_box: BBox::from_center(cx + jx, cy + jy, gt.w * scale, gt.h * scale),
            });
        }
    }
    let mut rng = pair_rng(seed, epoch, usize::MAX >> 32);
    shuffle(&mut out, &mut rng);
    Ok(out)
}

fn shuffle<T>(v: &mut [T], rng: &mut ChaCha8Rng) {
    use rand::seq::SliceRandom;
    v.shuffle(rng);
}

/// Network input and normalized target of a pair. The search window's own
/// events supply the graph.
pub fn build_sample(data: &[Prepared], cfg: &ModelConfig, pair: &PairSpec) -> Result<(Sample, BBox)> {
    let seq = &data[pair.seq];
    let template = seq.template(cfg, pair.template)?;
    let (search, tf) = seq.search(cfg, pair.search, &pair.crop_box)?;
    let target = tf.sensor_to_normalized(&seq.gt(pair.search));
    Ok((
        Sample {
            template,
            search,
            graph: seq.graphs[pair.search].clone(),
        },
        target,
    ))
}
