//! Tracking loops, SR/PR/NPR scoring, latency benchmarking and result files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::event_io::{BBox, SensorSize};
use crate::fusion::event_graph;
use crate::head::Decoded;
use crate::model::{Sample, Tracker, TrackerKind};
use crate::pipeline::Prepared;
use crate::tensor::measure_flops;

pub const SUCCESS_STEPS: usize = 20;
pub const PRECISION_PX: f64 = 20.0;
pub const PRECISION_CURVE_PX: usize = 50;
pub const NORM_STEPS: usize = 50;
pub const NORM_MAX: f64 = 0.5;
pub const DEFAULT_WARMUP: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub sr: f64,
    pub pr: f64,
    pub npr: f64,
}

/// IoU thresholds `0, 0.05, ..., 1`, each computed as `i / 20`.
pub fn success_thresholds() -> Vec<f64> {
    (0..=SUCCESS_STEPS).map(|i| i as f64 / SUCCESS_STEPS as f64).collect()
}

pub fn norm_thresholds() -> Vec<f64> {
    (0..=NORM_STEPS).map(|i| i as f64 * NORM_MAX / NORM_STEPS as f64).collect()
}

fn fraction(n: usize, total: usize) -> f64 {
    n as f64 / total as f64
}

/// Fraction of windows passing each IoU threshold; threshold 0 needs a
/// strictly positive overlap.
pub fn success_curve(ious: &[f64]) -> Vec<(f64, f64)> {
    success_thresholds()
        .into_iter()
        .map(|t| {
            let pass = ious.iter().filter(|&&v| if t == 0.0 { v > 0.0 } else { v >= t }).count();
            (t, fraction(pass, ious.len()))
        })
        .collect()
}

fn at_most_curve(errs: &[f64], thresholds: impl IntoIterator<Item = f64>) -> Vec<(f64, f64)> {
    thresholds
        .into_iter()
        .map(|t| (t, fraction(errs.iter().filter(|&&e| e <= t).count(), errs.len())))
        .collect()
}

pub fn precision_curve(center_errs: &[f64]) -> Vec<(f64, f64)> {
    at_most_curve(center_errs, (0..=PRECISION_CURVE_PX).map(|p| p as f64))
}

pub fn norm_precision_curve(norm_errs: &[f64]) -> Vec<(f64, f64)> {
    at_most_curve(norm_errs, norm_thresholds())
}

fn mean_curve(c: &[(f64, f64)]) -> f64 {
    c.iter().map(|p| p.1).sum::<f64>() / c.len() as f64
}

/// Scores from per-window IoUs, centre errors in pixels and size-normalized
/// centre errors.
pub fn metrics_from_errors(ious: &[f64], center_errs: &[f64], norm_errs: &[f64]) -> Result<Metrics> {
    let n = ious.len();
    if n == 0 || center_errs.len() != n || norm_errs.len() != n {
        return Err(Error::Argument(format!(
            "need equal non-empty error lists, got {}, {} and {}",
            n,
            center_errs.len(),
            norm_errs.len()
        )));
    }
    let pr = fraction(center_errs.iter().filter(|&&e| e <= PRECISION_PX).count(), n);
    Ok(Metrics {
        sr: 100.0 * mean_curve(&success_curve(ious)),
        pr: 100.0 * pr,
        npr: 100.0 * mean_curve(&norm_precision_curve(norm_errs)),
    })
}

/// Per-window IoU, centre error and centre error normalized by the
/// ground-truth size.
pub fn window_errors(pred: &[BBox], gt: &[BBox]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if pred.len() != gt.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} ground-truth boxes",
            pred.len(),
            gt.len()
        )));
    }
    let mut ious = Vec::with_capacity(pred.len());
    let mut ce = Vec::with_capacity(pred.len());
    let mut ne = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(gt) {
        let ((px, py), (gx, gy)) = (p.center(), g.center());
        ious.push(p.iou(g));
        ce.push(((px - gx).powi(2) + (py - gy).powi(2)).sqrt());
        ne.push((((px - gx) / g.w).powi(2) + ((py - gy) / g.h).powi(2)).sqrt());
    }
    Ok((ious, ce, ne))
}

/// Outputs of one tracker over one sequence, `k` per window.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackRun {
    pub name: String,
    pub k: usize,
    /// Sensor-pixel boxes in output order.
    pub boxes: Vec<BBox>,
    pub t_out_us: Vec<u64>,
    /// Seconds per output.
    pub latencies: Vec<f64>,
    pub flops: Vec<u64>,
}

impl TrackRun {
    pub fn num_windows(&self) -> usize {
        self.boxes.len() / self.k
    }

    /// The last output of every window.
    pub fn window_boxes(&self) -> Vec<BBox> {
        self.boxes.chunks(self.k).map(|c| c[c.len() - 1]).collect()
    }
}

pub fn compute_metrics(run: &TrackRun, gt: &[BBox]) -> Result<Metrics> {
    if run.k == 0 || run.boxes.len() != gt.len() * run.k {
        return Err(Error::Argument(format!(
            "{} outputs at k={} for {} windows",
            run.boxes.len(),
            run.k,
            gt.len()
        )));
    }
    let (i, c, n) = window_errors(&run.window_boxes(), gt)?;
    metrics_from_errors(&i, &c, &n)
}

pub fn mean_iou(run: &TrackRun, gt: &[BBox], skip_first: bool) -> Result<f64> {
    let (ious, _, _) = window_errors(&run.window_boxes(), gt)?;
    let start = usize::from(skip_first && ious.len() > 1);
    Ok(ious[start..].iter().sum::<f64>() / (ious.len() - start) as f64)
}

/// Keeps a prediction on the sensor with at least one pixel of extent.
fn clamp_to_sensor(b: &BBox, sensor: SensorSize) -> Result<BBox> {
    if !(b.x.is_finite() && b.y.is_finite() && b.w.is_finite() && b.h.is_finite()) {
        return Err(Error::NonFinite(format!("predicted box {b:?}")));
    }
    let (sw, sh) = (sensor.width as f64, sensor.height as f64);
    let (cx, cy) = b.center();
    Ok(BBox::from_center(
        cx.clamp(0.0, sw),
        cy.clamp(0.0, sh),
        b.w.clamp(1.0, sw),
        b.h.clamp(1.0, sh),
    ))
}

fn output_time(i: usize, j: usize, k: usize, delta_t: u64) -> u64 {
    i as u64 * delta_t + (j as u64 * delta_t) / k as u64
}

/// Runs the tracking protocol. Window 0 reports the initial box; every other
/// window crops around the previous prediction. The slow tracker reads the
/// current frame and window. The fast tracker reuses the tokens of the
/// previous frame and emits `k` outputs from growing prefixes of the
/// current window; at window 0 it reads frame 0.
pub fn track_sequence(model: &Tracker<f32>, seq: &Prepared, k: usize) -> Result<TrackRun> {
    match model.kind {
        TrackerKind::Slow if k != 1 => Err(Error::Argument(format!("the slow tracker emits one output per window, not {k}"))),
        TrackerKind::Slow => track_slow(model, seq),
        TrackerKind::Fast if k == 0 => Err(Error::Argument("k must be at least 1".into())),
        TrackerKind::Fast => track_fast(model, seq, k),
    }
}

fn new_run(seq: &Prepared, k: usize) -> TrackRun {
    let cap = seq.num_windows() * k;
    TrackRun {
        name: seq.record.name.clone(),
        k,
        boxes: Vec::with_capacity(cap),
        t_out_us: Vec::with_capacity(cap),
        latencies: Vec::with_capacity(cap),
        flops: Vec::with_capacity(cap),
    }
}

fn slow_step(model: &Tracker<f32>, seq: &Prepared, template: &[f32], i: usize, prev: &BBox) -> Result<BBox> {
    let cfg = &model.cfg;
    let (search, tf) = seq.search(cfg, i, prev)?;
    let graph = event_graph(&seq.record.window_events(i), cfg.max_points, cfg.knn_k)?;
    let sample = Sample {
        template: template.to_vec(),
        search,
        graph,
    };
    let (fwd, _) = model.forward(&sample)?;
    clamp_to_sensor(&tf.normalized_to_sensor(&fwd.decoded.bbox), seq.record.stream.sensor)
}

fn track_slow(model: &Tracker<f32>, seq: &Prepared) -> Result<TrackRun> {
    let template = seq.template(&model.cfg, 0)?;
    let mut run = new_run(seq, 1);
    let mut prev = seq.gt(0);
    for i in 0..seq.num_windows() {
        let t0 = Instant::now();
        let (pred, flops) = measure_flops(|| slow_step(model, seq, &template, i, &prev));
        let elapsed = t0.elapsed().as_secs_f64();
        let pred = if i == 0 { seq.gt(0) } else { pred? };
        run.boxes.push(pred);
        run.t_out_us.push(output_time(i, 1, 1, seq.record.delta_t));
        run.latencies.push(elapsed);
        run.flops.push(flops);
        prev = pred;
    }
    Ok(run)
}

fn fast_window(
    model: &Tracker<f32>,
    seq: &Prepared,
    template: &[f32],
    i: usize,
    k: usize,
    prev: &BBox,
    mut emit: impl FnMut(usize, Decoded, &crate::event_io::CropTransform, f64, u64) -> Result<()>,
) -> Result<()> {
    let cfg = &model.cfg;
    let src = i.saturating_sub(1);
    let t0 = Instant::now();
    let (state, base_flops) = measure_flops(|| -> Result<_> {
        let (search, tf) = seq.search(cfg, src, prev)?;
        let (inner, _) = model.plan.split_at(model.depth());
        let vecs = if inner.hooks.is_empty() {
            model.zero_vectors()
        } else {
            let g = event_graph(&seq.record.window_events(src), cfg.max_points, cfg.knn_k)?;
            model.graph_vectors(g.as_ref())?
        };
        Ok((model.encode_visual(template, &search, &vecs)?, tf))
    });
    let (state, tf) = state?;
    let base_time = t0.elapsed().as_secs_f64();
    let window = seq.record.window_events(i);
    let mut carry = None;
    for j in 1..=k {
        let t1 = Instant::now();
        let (step, flops) = measure_flops(|| model.accumulation_step(&state, &window, j, k, carry.take()));
        let (decoded, vecs) = step?;
        let secs = t1.elapsed().as_secs_f64() + base_time / k as f64;
        carry = Some(vecs);
        emit(j, decoded, &tf, secs, flops + base_flops / k as u64)?;
    }
    Ok(())
}

fn track_fast(model: &Tracker<f32>, seq: &Prepared, k: usize) -> Result<TrackRun> {
    let template = seq.template(&model.cfg, 0)?;
    let sensor = seq.record.stream.sensor;
    let dt = seq.record.delta_t;
    let mut run = new_run(seq, k);
    let mut prev = seq.gt(0);
    for i in 0..seq.num_windows() {
        let mut last = prev;
        fast_window(model, seq, &template, i, k, &prev, |j, d, tf, secs, flops| {
            let b = if i == 0 {
                seq.gt(0)
            } else {
                clamp_to_sensor(&tf.normalized_to_sensor(&d.bbox), sensor)?
            };
            run.boxes.push(b);
            run.t_out_us.push(output_time(i, j, k, dt));
            run.latencies.push(secs);
            run.flops.push(flops);
            last = b;
            Ok(())
        })?;
        prev = last;
    }
    Ok(run)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyReport {
    pub tracker: String,
    pub k: usize,
    pub warmup: usize,
    pub outputs: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub outputs_per_sec: f64,
    pub flops_per_output: f64,
}

/// Nearest-rank percentile of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

pub fn latency_report(model: &Tracker<f32>, run: &TrackRun, warmup: usize) -> LatencyReport {
    let total: f64 = run.latencies.iter().sum();
    let flops: u64 = run.flops.iter().sum();
    LatencyReport {
        tracker: model.kind.to_string(),
        k: run.k,
        warmup,
        outputs: run.boxes.len(),
        median_ms: 1e3 * percentile(&run.latencies, 50.0),
        p95_ms: 1e3 * percentile(&run.latencies, 95.0),
        outputs_per_sec: run.boxes.len() as f64 / total,
        flops_per_output: flops as f64 / run.boxes.len() as f64,
    }
}

/// Times the tracking loop after `warmup` untimed passes over window 1.
pub fn bench_latency(model: &Tracker<f32>, seq: &Prepared, k: usize, warmup: usize) -> Result<(LatencyReport, TrackRun)> {
    let template = seq.template(&model.cfg, 0)?;
    let i = 1.min(seq.num_windows() - 1);
    for _ in 0..warmup {
        match model.kind {
            TrackerKind::Slow => {
                slow_step(model, seq, &template, i, &seq.gt(0))?;
            }
            TrackerKind::Fast => fast_window(model, seq, &template, i, k, &seq.gt(0), |_, _, _, _, _| Ok(()))?,
        }
    }
    let run = track_sequence(model, seq, k)?;
    Ok((latency_report(model, &run, warmup), run))
}

pub fn results_to_string(run: &TrackRun) -> String {
    let mut s = String::new();
    for (b, t) in run.boxes.iter().zip(&run.t_out_us) {
        let _ = writeln!(s, "{},{},{},{},{}", b.x, b.y, b.w, b.h, t);
    }
    s
}

/// Parses `x,y,w,h,t_out_us` lines; blank lines are skipped.
pub fn parse_results(text: &str) -> Result<Vec<(BBox, u64)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: n + 1, msg };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", f.len())));
        }
        let mut v = [0.0; 4];
        for (slot, s) in v.iter_mut().zip(&f[..4]) {
            *slot = s.parse::<f64>().map_err(|_| err(format!("bad number `{s}`")))?;
            if !slot.is_finite() {
                return Err(err(format!("non-finite value `{s}`")));
            }
        }
        let t = f[4].parse::<u64>().map_err(|_| err(format!("bad timestamp `{}`", f[4])))?;
        out.push((BBox::new(v[0], v[1], v[2], v[3]), t));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SequenceSummary {
    pub name: String,
    pub windows: usize,
    pub outputs: usize,
    pub metrics: Metrics,
    pub fps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub tracker: String,
    pub k: usize,
    pub mean: Metrics,
    pub fps: f64,
    pub sequences: Vec<SequenceSummary>,
    pub by_attribute: BTreeMap<String, Metrics>,
}

fn average(ms: &[Metrics]) -> Metrics {
    let n = ms.len().max(1) as f64;
    Metrics {
        sr: ms.iter().map(|m| m.sr).sum::<f64>() / n,
        pr: ms.iter().map(|m| m.pr).sum::<f64>() / n,
        npr: ms.iter().map(|m| m.npr).sum::<f64>() / n,
    }
}

/// Per-sequence and mean scores; attributes group sequences by tag.
pub fn summarize(tracker: &str, runs: &[TrackRun], data: &[Prepared]) -> Result<Summary> {
    if runs.len() != data.len() || runs.is_empty() {
        return Err(Error::Argument(format!("{} runs for {} sequences", runs.len(), data.len())));
    }
    let mut seqs = Vec::with_capacity(runs.len());
    let mut groups: BTreeMap<String, Vec<Metrics>> = BTreeMap::new();
    let (mut outs, mut secs) = (0usize, 0.0f64);
    for (run, seq) in runs.iter().zip(data) {
        let m = compute_metrics(run, &seq.record.ground_truth)?;
        let t: f64 = run.latencies.iter().sum();
        outs += run.boxes.len();
        secs += t;
        for a in &seq.record.attributes {
            groups.entry(a.clone()).or_default().push(m);
        }
        seqs.push(SequenceSummary {
            name: run.name.clone(),
            windows: run.num_windows(),
            outputs: run.boxes.len(),
            metrics: m,
            fps: run.boxes.len() as f64 / t,
        });
    }
    let all: Vec<Metrics> = seqs.iter().map(|s| s.metrics).collect();
    Ok(Summary {
        tracker: tracker.to_string(),
        k: runs[0].k,
        mean: average(&all),
        fps: outs as f64 / secs,
        sequences: seqs,
        by_attribute: groups.into_iter().map(|(k, v)| (k, average(&v))).collect(),
    })
}

/// `curve,threshold,value` rows over every window of every run.
pub fn curves_csv(runs: &[TrackRun], data: &[Prepared]) -> Result<String> {
    let (mut ious, mut ce, mut ne) = (Vec::new(), Vec::new(), Vec::new());
    for (run, seq) in runs.iter().zip(data) {
        let (i, c, n) = window_errors(&run.window_boxes(), &seq.record.ground_truth)?;
        ious.extend(i);
        ce.extend(c);
        ne.extend(n);
    }
    if ious.is_empty() {
        return Err(Error::Argument("no windows to plot".into()));
    }
    let mut s = String::from("curve,threshold,value\n");
    for (name, curve) in [
        ("success", success_curve(&ious)),
        ("precision", precision_curve(&ce)),
        ("norm_precision", norm_precision_curve(&ne)),
    ] {
        for (t, v) in curve {
            let _ = writeln!(s, "{name},{t},{v}");
        }
    }
    Ok(s)
}
