//! Synthetic event sequences with exact ground truth.
//!
//! A box moves along a linear trajectory with an optional sinusoidal wobble.
//! Each window emits Poisson-distributed events on the box boundary plus
//! uniform background noise. Every random draw comes from a generator keyed
//! by `(seed, window, pixel)`, so output does not depend on iteration order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::event_io::{window_count, BBox, EventPoint, EventStream, SensorSize, SequenceRecord};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Wobble {
    pub amp_x: f64,
    pub amp_y: f64,
    /// Period in windows.
    pub period: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub sensor: SensorSize,
    pub duration: u64,
    pub delta_t: u64,
    pub start: BBox,
    /// Displacement per window in pixels.
    pub velocity: (f64, f64),
    pub wobble: Option<Wobble>,
    /// Expected events per boundary pixel per window.
    pub lambda_edge: f64,
    /// Expected events per pixel per window.
    pub lambda_bg: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn num_windows(&self) -> usize {
        window_count(self.duration, self.delta_t, false)
    }

    /// Ground-truth box of window `i`.
    pub fn box_at(&self, i: usize) -> BBox {
        let i = i as f64;
        let (mut dx, mut dy) = (self.velocity.0 * i, self.velocity.1 * i);
        if let Some(w) = self.wobble {
            let phase = 2.0 * std::f64::consts::PI * i / w.period;
            dx += w.amp_x * phase.sin();
            dy += w.amp_y * phase.sin();
        }
        BBox::new(self.start.x + dx, self.start.y + dy, self.start.w, self.start.h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.delta_t == 0 || self.duration == 0 {
            return Err(Error::Validation("duration and delta_t must be positive".into()));
        }
        if !(self.lambda_edge >= 0.0 && self.lambda_bg >= 0.0) {
            return Err(Error::Validation("event rates must be non-negative".into()));
        }
        if !(self.start.w > 0.0 && self.start.h > 0.0) {
            return Err(Error::Validation("start box must have positive size".into()));
        }
        if let Some(w) = self.wobble {
            if !(w.period > 0.0) {
                return Err(Error::Validation("wobble period must be positive".into()));
            }
        }
        let (sw, sh) = (self.sensor.width as f64, self.sensor.height as f64);
        for i in 0..self.num_windows() {
            let (cx, cy) = self.box_at(i).center();
            if !(cx >= 0.0 && cy >= 0.0 && cx < sw && cy < sh) {
                return Err(Error::Validation(format!(
                    "trajectory leaves the sensor at window {i} (centre {cx:.2}, {cy:.2})"
                )));
            }
        }
        Ok(())
    }
}

const DOMAIN_EDGE: u64 = 0;
const DOMAIN_BG: u64 = 1;

/// Generator for one `(seed, window, pixel)` cell.
fn keyed_rng(seed: u64, window: usize, domain: u64, pixel: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((window as u64) << 33) | (domain << 32) | pixel as u64);
    rng
}

fn poisson_draw(rng: &mut ChaCha8Rng, lambda: f64) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).map(|d| d.sample(rng) as u64).unwrap_or(0)
}

/// Inclusive integer pixel rectangle covered by a box.
fn pixel_rect(b: &BBox) -> Option<(i64, i64, i64, i64)> {
    let x0 = b.x.round() as i64;
    let y0 = b.y.round() as i64;
    let x1 = (b.x + b.w).round() as i64 - 1;
    let y1 = (b.y + b.h).round() as i64 - 1;
    if x1 < x0 || y1 < y0 {
        return None;
    }
    Some((x0, y0, x1, y1))
}

/// Boundary pixels of the box inside the sensor with their edge flags
/// `(left, right, top, bottom)`.
fn boundary_pixels(b: &BBox, sensor: SensorSize) -> Vec<(u32, u32, [bool; 4])> {
    let Some((x0, y0, x1, y1)) = pixel_rect(b) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let flags = [x == x0, x == x1, y == y0, y == y1];
            if !flags.iter().any(|&f| f) {
                continue;
            }
            if x < 0 || y < 0 || x >= sensor.width as i64 || y >= sensor.height as i64 {
                continue;
            }
            out.push((x as u32, y as u32, flags));
        }
    }
    out
}

/// Polarity of an edge pixel for motion `(vx, vy)`: `+1` on leading edges,
/// `-1` on trailing ones, `0` when the motion does not decide.
fn edge_polarity(flags: [bool; 4], vx: f64, vy: f64) -> i8 {
    let [left, right, top, bottom] = flags;
    if (left || right) && vx != 0.0 {
        let leading = (right && vx > 0.0) || (left && vx < 0.0);
        return if leading { 1 } else { -1 };
    }
    if (top || bottom) && vy != 0.0 {
        let leading = (bottom && vy > 0.0) || (top && vy < 0.0);
        return if leading { 1 } else { -1 };
    }
    0
}

pub fn generate_sequence(cfg: &SynthConfig) -> Result<SequenceRecord> {
    generate_named(cfg, "synthetic")
}

pub fn generate_named(cfg: &SynthConfig, name: &str) -> Result<SequenceRecord> {
    cfg.validate()?;
    let n = cfg.num_windows();
    let sensor = cfg.sensor;
    let mut points = Vec::new();
    let mut ground_truth = Vec::with_capacity(n);
    for i in 0..n {
        let b = cfg.box_at(i);
        ground_truth.push(b);
        let start = i as u64 * cfg.delta_t;
        let len = ((i as u64 + 1) * cfg.delta_t).min(cfg.duration) - start;
        let motion = if n > 1 {
            let (a, c) = if i + 1 < n { (b, cfg.box_at(i + 1)) } else { (cfg.box_at(i - 1), b) };
            (c.x - a.x, c.y - a.y)
        } else {
            (0.0, 0.0)
        };
        let mut window = Vec::new();
        for (x, y, flags) in boundary_pixels(&b, sensor) {
            let pixel = (y * sensor.width + x) as usize;
            let mut rng = keyed_rng(cfg.seed, i, DOMAIN_EDGE, pixel);
            let count = poisson_draw(&mut rng, cfg.lambda_edge);
            let fixed = edge_polarity(flags, motion.0, motion.1);
            for _ in 0..count {
                let t = start + rng.gen_range(0..len.max(1));
                let p = if fixed != 0 {
                    fixed
                } else if rng.gen_bool(0.5) {
                    1
                } else {
                    -1
                };
                window.push(EventPoint { t, x, y, p });
            }
        }
        if cfg.lambda_bg > 0.0 {
            for y in 0..sensor.height {
                for x in 0..sensor.width {
                    let pixel = (y * sensor.width + x) as usize;
                    let mut rng = keyed_rng(cfg.seed, i, DOMAIN_BG, pixel);
                    for _ in 0..poisson_draw(&mut rng, cfg.lambda_bg) {
                        let t = start + rng.gen_range(0..len.max(1));
                        let p = if rng.gen_bool(0.5) { 1 } else { -1 };
                        window.push(EventPoint { t, x, y, p });
                    }
                }
            }
        }
        window.sort_by_key(|e| e.t);
        points.extend(window);
    }
    let rec = SequenceRecord {
        name: name.to_string(),
        stream: EventStream {
            points,
            duration: cfg.duration,
            sensor,
        },
        delta_t: cfg.delta_t,
        ground_truth,
        attributes: Vec::new(),
    };
    rec.validate()?;
    Ok(rec)
}

/// Parameters for drawing a set of random sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub sensor: SensorSize,
    pub windows: usize,
    pub delta_t: u64,
    pub lambda_edge: f64,
    pub lambda_bg: f64,
    /// Box side range in pixels.
    pub box_side: (f64, f64),
    /// Maximum speed per axis in pixels per window.
    pub max_speed: f64,
    pub max_wobble: f64,
}

impl DatasetSpec {
    pub fn desk() -> Self {
        DatasetSpec {
            sensor: SensorSize::new(64, 64),
            windows: 20,
            delta_t: 10_000,
            lambda_edge: 2.0,
            lambda_bg: 0.005,
            box_side: (12.0, 20.0),
            max_speed: 1.0,
            max_wobble: 2.0,
        }
    }
}

/// Draws `count` sequences; sequence `j` depends only on `(seed, j)`.
pub fn generate_dataset(spec: &DatasetSpec, count: usize, seed: u64) -> Result<Vec<SequenceRecord>> {
    (0..count)
        .map(|j| {
            let cfg = random_config(spec, seed, j)?;
            let mut rec = generate_named(&cfg, &format!("seq_{j:03}"))?;
            rec.attributes = vec!["synthetic".into()];
            Ok(rec)
        })
        .collect()
}

fn random_config(spec: &DatasetSpec, seed: u64, index: usize) -> Result<SynthConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX - index as u64);
    let (sw, sh) = (spec.sensor.width as f64, spec.sensor.height as f64);
    let n = spec.windows as f64;
    for _ in 0..1000 {
        let w = rng.gen_range(spec.box_side.0..=spec.box_side.1);
        let h = rng.gen_range(spec.box_side.0..=spec.box_side.1);
        let vx = rng.gen_range(-spec.max_speed..=spec.max_speed);
        let vy = rng.gen_range(-spec.max_speed..=spec.max_speed);
        let wobble = Wobble {
            amp_x: rng.gen_range(0.0..=spec.max_wobble),
            amp_y: rng.gen_range(0.0..=spec.max_wobble),
            period: rng.gen_range(6.0..=16.0),
        };
        // keep the whole trajectory comfortably inside the sensor
        let margin_x = w / 2.0 + 1.0 + wobble.amp_x;
        let margin_y = h / 2.0 + 1.0 + wobble.amp_y;
        let (lo_x, hi_x) = (margin_x - vx.min(0.0) * n, sw - margin_x - vx.max(0.0) * n);
        let (lo_y, hi_y) = (margin_y - vy.min(0.0) * n, sh - margin_y - vy.max(0.0) * n);
        if lo_x >= hi_x || lo_y >= hi_y {
            continue;
        }
        let cx = rng.gen_range(lo_x..hi_x);
        let cy = rng.gen_range(lo_y..hi_y);
        let cfg = SynthConfig {
            sensor: spec.sensor,
            duration: spec.windows as u64 * spec.delta_t,
            delta_t: spec.delta_t,
            start: BBox::from_center(cx, cy, w, h),
            velocity: (vx, vy),
            wobble: Some(wobble),
            lambda_edge: spec.lambda_edge,
            lambda_bg: spec.lambda_bg,
            seed: seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64),
        };
        if cfg.validate().is_ok() {
            return Ok(cfg);
        }
    }
    Err(Error::Validation(
        "could not place a trajectory inside the sensor; reduce speed or box size".into(),
    ))
}
