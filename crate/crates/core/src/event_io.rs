//! Event files, frame stacking, region cropping and the on-disk sequence layout.
//!
//! Event files are UTF-8 CSV with one `t,x,y,p` record per line (timestamp in
//! microseconds, polarity `-1` or `1`) in ascending timestamp order. Lines
//! starting with `#` and blank lines are ignored.
//!
//! A sequence directory holds `events.csv`, `groundtruth.txt` (one `x,y,w,h`
//! line per frame window) and `meta.cfg` (`key=value` lines with `sensor_h`,
//! `sensor_w`, `T` and `delta_t`, optionally `attributes`).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SensorSize {
    pub height: u32,
    pub width: u32,
}

impl SensorSize {
    pub fn new(height: u32, width: u32) -> Self {
        SensorSize { height, width }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EventPoint {
    pub t: u64,
    pub x: u32,
    pub y: u32,
    /// Either `-1` or `1`.
    pub p: i8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventStream {
    pub points: Vec<EventPoint>,
    /// Window length in microseconds; every point has `t <= duration`.
    pub duration: u64,
    pub sensor: SensorSize,
}

impl EventStream {
    pub fn empty(duration: u64, sensor: SensorSize) -> Self {
        EventStream {
            points: Vec::new(),
            duration,
            sensor,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut prev = 0u64;
        for (i, e) in self.points.iter().enumerate() {
            validate_point(e, self.sensor).map_err(|m| Error::Validation(format!("event {i}: {m}")))?;
            if e.t < prev {
                return Err(Error::Validation(format!("event {i}: unsorted timestamps")));
            }
            if e.t > self.duration {
                return Err(Error::Validation(format!(
                    "event {i}: timestamp {} beyond stream length {}",
                    e.t, self.duration
                )));
            }
            prev = e.t;
        }
        Ok(())
    }

    /// Events with `start <= t < end`, re-based so the window starts at zero.
    /// When `include_end` is set, events exactly at `end` are kept too.
    pub fn window(&self, start: u64, end: u64, include_end: bool) -> EventStream {
        let lo = self.points.partition_point(|e| e.t < start);
        let hi = if include_end {
            self.points.partition_point(|e| e.t <= end)
        } else {
            self.points.partition_point(|e| e.t < end)
        };
        EventStream {
            points: self.points[lo..hi]
                .iter()
                .map(|e| EventPoint { t: e.t - start, ..*e })
                .collect(),
            duration: end - start,
            sensor: self.sensor,
        }
    }

    /// Serializes to the canonical `t,x,y,p` CSV form.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.points.len() * 16);
        for e in &self.points {
            let _ = writeln!(out, "{},{},{},{}", e.t, e.x, e.y, e.p);
        }
        out
    }
}

fn validate_point(e: &EventPoint, sensor: SensorSize) -> std::result::Result<(), String> {
    if e.p != 1 && e.p != -1 {
        return Err(format!("polarity {} is not -1 or 1", e.p));
    }
    if e.x >= sensor.width || e.y >= sensor.height {
        return Err(format!(
            "coordinate ({}, {}) outside sensor {}x{}",
            e.x, e.y, sensor.height, sensor.width
        ));
    }
    Ok(())
}

/// Parses event CSV text. `duration` is the stream length from sequence
/// metadata; without it the last timestamp is used.
pub fn parse_events_str(text: &str, sensor: SensorSize, duration: Option<u64>) -> Result<EventStream> {
    let mut points = Vec::new();
    let mut prev_t = 0u64;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',');
        let mut next = |name: &str| {
            fields
                .next()
                .map(str::trim)
                .ok_or_else(|| Error::Parse {
                    line: line_no,
                    msg: format!("missing field `{name}`"),
                })
        };
        let t_s = next("t")?;
        let x_s = next("x")?;
        let y_s = next("y")?;
        let p_s = next("p")?;
        if fields.next().is_some() {
            return Err(Error::Parse {
                line: line_no,
                msg: "expected exactly 4 fields".into(),
            });
        }
        let bad = |name: &str, v: &str| Error::Parse {
            line: line_no,
            msg: format!("invalid {name} `{v}`"),
        };
        let t: u64 = t_s.parse().map_err(|_| bad("timestamp", t_s))?;
        let x: u32 = x_s.parse().map_err(|_| bad("x", x_s))?;
        let y: u32 = y_s.parse().map_err(|_| bad("y", y_s))?;
        let p: i64 = p_s.parse().map_err(|_| bad("polarity", p_s))?;
        let p = i8::try_from(p).unwrap_or(0);
        let e = EventPoint { t, x, y, p };
        validate_point(&e, sensor).map_err(|m| Error::Validation(format!("line {line_no}: {m}")))?;
        if t < prev_t {
            return Err(Error::Validation(format!("line {line_no}: unsorted timestamps")));
        }
        prev_t = t;
        points.push(e);
    }
    let last = points.last().map_or(0, |e| e.t);
    let duration = match duration {
        Some(d) if d < last => {
            return Err(Error::Validation(format!(
                "timestamp {last} beyond stream length {d}"
            )))
        }
        Some(d) => d,
        None => last,
    };
    Ok(EventStream {
        points,
        duration,
        sensor,
    })
}

pub fn parse_events(path: &Path, sensor: SensorSize, duration: Option<u64>) -> Result<EventStream> {
    let text = fs::read_to_string(path)?;
    parse_events_str(&text, sensor, duration)
}

/// Stacked event frames, laid out `[frame][channel][row][col]`.
///
/// Channels: positive-event count, negative-event count, and the normalized
/// time of the most recent event at each pixel within its window.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameStack {
    pub data: Vec<f32>,
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub delta_t: u64,
}

pub const FRAME_CHANNELS: usize = 3;

impl FrameStack {
    pub fn frame_len(&self) -> usize {
        FRAME_CHANNELS * self.height * self.width
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let len = self.frame_len();
        &self.data[i * len..(i + 1) * len]
    }

    #[inline]
    pub fn at(&self, frame: usize, channel: usize, y: usize, x: usize) -> f32 {
        self.data[((frame * FRAME_CHANNELS + channel) * self.height + y) * self.width + x]
    }
}

/// Number of windows covering `duration`. A trailing partial window counts,
/// and a zero-length stream that still carries events gets one window.
pub fn window_count(duration: u64, delta_t: u64, has_events: bool) -> usize {
    let n = duration.div_ceil(delta_t) as usize;
    if n == 0 && has_events {
        1
    } else {
        n
    }
}

pub fn stack_events(stream: &EventStream, delta_t: u64) -> Result<FrameStack> {
    if delta_t == 0 {
        return Err(Error::Argument("delta_t must be positive".into()));
    }
    let n = window_count(stream.duration, delta_t, !stream.is_empty());
    let (h, w) = (stream.sensor.height as usize, stream.sensor.width as usize);
    let mut data = vec![0.0f32; n * FRAME_CHANNELS * h * w];
    for e in &stream.points {
        let i = ((e.t / delta_t) as usize).min(n - 1);
        let (x, y) = (e.x as usize, e.y as usize);
        let base = i * FRAME_CHANNELS * h * w;
        let ch = if e.p > 0 { 0 } else { 1 };
        data[base + ch * h * w + y * w + x] += 1.0;
        let rel = (e.t - i as u64 * delta_t) as f64 / delta_t as f64;
        data[base + 2 * h * w + y * w + x] = rel as f32;
    }
    Ok(FrameStack {
        data,
        n,
        height: h,
        width: w,
        delta_t,
    })
}

/// Axis-aligned box, top-left origin, in pixels unless stated otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x, self.y, self.x + self.w, self.y + self.h]
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        let inter = ix.max(0.0) * iy.max(0.0);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn scaled(&self, s: f64) -> BBox {
        BBox::new(self.x * s, self.y * s, self.w * s, self.h * s)
    }

    fn intersects_sensor(&self, sensor: SensorSize) -> bool {
        self.x < sensor.width as f64
            && self.y < sensor.height as f64
            && self.x + self.w > 0.0
            && self.y + self.h > 0.0
    }
}

/// Affine map between crop pixel coordinates and sensor coordinates:
/// `sensor = origin + crop * scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    /// Sensor pixels per crop pixel.
    pub scale: f64,
    pub out_size: usize,
}

impl CropTransform {
    pub fn to_sensor(&self, b: &BBox) -> BBox {
        BBox::new(
            self.origin_x + b.x * self.scale,
            self.origin_y + b.y * self.scale,
            b.w * self.scale,
            b.h * self.scale,
        )
    }

    pub fn to_crop(&self, b: &BBox) -> BBox {
        BBox::new(
            (b.x - self.origin_x) / self.scale,
            (b.y - self.origin_y) / self.scale,
            b.w / self.scale,
            b.h / self.scale,
        )
    }

    /// Box in `[0, 1]` crop coordinates to sensor pixels.
    pub fn normalized_to_sensor(&self, b: &BBox) -> BBox {
        self.to_sensor(&b.scaled(self.out_size as f64))
    }

    pub fn sensor_to_normalized(&self, b: &BBox) -> BBox {
        self.to_crop(b).scaled(1.0 / self.out_size as f64)
    }
}

/// Crops a square of side `context_factor * sqrt(w * h)` centred on `bbox`
/// out of a `channels x height x width` frame, zero padded, and resizes it
/// bilinearly (half-pixel centres) to `out_size x out_size`.
pub fn crop_region(
    frame: &[f32],
    channels: usize,
    height: usize,
    width: usize,
    bbox: &BBox,
    context_factor: f64,
    out_size: usize,
) -> Result<(Vec<f32>, CropTransform)> {
    if !(bbox.w > 0.0 && bbox.h > 0.0) {
        return Err(Error::Validation(format!(
            "degenerate box {}x{}",
            bbox.w, bbox.h
        )));
    }
    if !(context_factor > 0.0) || out_size == 0 {
        return Err(Error::Argument("context factor and output size must be positive".into()));
    }
    if frame.len() != channels * height * width {
        return Err(Error::shape(
            "frame",
            format!("expected {}x{}x{}", channels, height, width),
        ));
    }
    let side = context_factor * (bbox.w * bbox.h).sqrt();
    let (cx, cy) = bbox.center();
    let tf = CropTransform {
        origin_x: cx - side / 2.0,
        origin_y: cy - side / 2.0,
        scale: side / out_size as f64,
        out_size,
    };
    let mut out = vec![0.0f32; channels * out_size * out_size];
    let fetch = |c: usize, yy: isize, xx: isize| -> f64 {
        if yy < 0 || xx < 0 || yy >= height as isize || xx >= width as isize {
            0.0
        } else {
            frame[(c * height + yy as usize) * width + xx as usize] as f64
        }
    };
    for v in 0..out_size {
        let sy = tf.origin_y + (v as f64 + 0.5) * tf.scale - 0.5;
        let y0 = sy.floor();
        let fy = sy - y0;
        for u in 0..out_size {
            let sx = tf.origin_x + (u as f64 + 0.5) * tf.scale - 0.5;
            let x0 = sx.floor();
            let fx = sx - x0;
            let (yi, xi) = (y0 as isize, x0 as isize);
            for c in 0..channels {
                let top = fetch(c, yi, xi) * (1.0 - fx) + fetch(c, yi, xi + 1) * fx;
                let bot = fetch(c, yi + 1, xi) * (1.0 - fx) + fetch(c, yi + 1, xi + 1) * fx;
                out[(c * out_size + v) * out_size + u] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    Ok((out, tf))
}

/// A tracked sequence: events, one ground-truth box per window, optional tags.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub name: String,
    pub stream: EventStream,
    pub delta_t: u64,
    pub ground_truth: Vec<BBox>,
    pub attributes: Vec<String>,
}

impl SequenceRecord {
    pub fn num_windows(&self) -> usize {
        window_count(self.stream.duration, self.delta_t, !self.stream.is_empty())
    }

    pub fn validate(&self) -> Result<()> {
        if self.delta_t == 0 {
            return Err(Error::Validation("delta_t must be positive".into()));
        }
        self.stream.validate()?;
        let n = self.num_windows();
        if self.ground_truth.len() != n {
            return Err(Error::Validation(format!(
                "{} ground-truth boxes for {} windows",
                self.ground_truth.len(),
                n
            )));
        }
        for (i, b) in self.ground_truth.iter().enumerate() {
            if !(b.w > 0.0 && b.h > 0.0) {
                return Err(Error::Validation(format!("box {i} has non-positive size")));
            }
            if !b.intersects_sensor(self.stream.sensor) {
                return Err(Error::Validation(format!("box {i} lies outside the sensor")));
            }
        }
        Ok(())
    }

    /// Events of window `i`, re-based to the window start. The final window
    /// also keeps events stamped exactly at the stream end.
    pub fn window_events(&self, i: usize) -> EventStream {
        let n = self.num_windows();
        let start = i as u64 * self.delta_t;
        let end = ((i + 1) as u64 * self.delta_t).min(self.stream.duration.max(start));
        let last = i + 1 == n;
        let mut w = self.stream.window(start, end, last);
        // a trailing partial window still normalizes time by the full interval
        w.duration = self.delta_t;
        w
    }
}

/// Contents of `meta.cfg`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceMeta {
    pub sensor: SensorSize,
    pub duration: u64,
    pub delta_t: u64,
    pub attributes: Vec<String>,
}

pub fn parse_meta(text: &str) -> Result<SequenceMeta> {
    let (mut h, mut w, mut t, mut dt) = (None, None, None, None);
    let mut attributes = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: idx + 1,
            msg: "expected key=value".into(),
        })?;
        let (k, v) = (k.trim(), v.trim());
        let num = |v: &str| -> Result<u64> {
            v.parse().map_err(|_| Error::Parse {
                line: idx + 1,
                msg: format!("invalid integer `{v}` for `{k}`"),
            })
        };
        match k {
            "sensor_h" => h = Some(num(v)?),
            "sensor_w" => w = Some(num(v)?),
            "T" => t = Some(num(v)?),
            "delta_t" => dt = Some(num(v)?),
            "attributes" => {
                attributes = v
                    .split(';')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            other => {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("unknown key `{other}`"),
                })
            }
        }
    }
    let missing = |k: &str| Error::Validation(format!("meta.cfg missing `{k}`"));
    let h = h.ok_or_else(|| missing("sensor_h"))?;
    let w = w.ok_or_else(|| missing("sensor_w"))?;
    let dim = |v: u64, k: &str| -> Result<u32> {
        u32::try_from(v)
            .ok()
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::Validation(format!("`{k}` must be in 1..=u32::MAX")))
    };
    let delta_t = dt.ok_or_else(|| missing("delta_t"))?;
    if delta_t == 0 {
        return Err(Error::Validation("delta_t must be positive".into()));
    }
    Ok(SequenceMeta {
        sensor: SensorSize::new(dim(h, "sensor_h")?, dim(w, "sensor_w")?),
        duration: t.ok_or_else(|| missing("T"))?,
        delta_t,
        attributes,
    })
}

pub fn meta_to_string(meta: &SequenceMeta) -> String {
    let mut s = format!(
        "sensor_h={}\nsensor_w={}\nT={}\ndelta_t={}\n",
        meta.sensor.height, meta.sensor.width, meta.duration, meta.delta_t
    );
    if !meta.attributes.is_empty() {
        let _ = writeln!(s, "attributes={}", meta.attributes.join(";"));
    }
    s
}

/// Parses `groundtruth.txt`: one `x,y,w,h` line per window.
pub fn parse_groundtruth(text: &str) -> Result<Vec<BBox>> {
    let mut boxes = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<&str> = line.split(',').map(str::trim).collect();
        if vals.len() != 4 {
            return Err(Error::Parse {
                line: idx + 1,
                msg: format!("expected 4 values, got {}", vals.len()),
            });
        }
        let mut v = [0.0f64; 4];
        for (slot, s) in v.iter_mut().zip(&vals) {
            *slot = s
                .parse::<f64>()
                .ok()
                .filter(|f| f.is_finite())
                .ok_or_else(|| Error::Parse {
                    line: idx + 1,
                    msg: format!("invalid number `{s}`"),
                })?;
        }
        boxes.push(BBox::new(v[0], v[1], v[2], v[3]));
    }
    Ok(boxes)
}

pub fn groundtruth_to_string(boxes: &[BBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        let _ = writeln!(s, "{},{},{},{}", b.x, b.y, b.w, b.h);
    }
    s
}

pub fn load_sequence(dir: &Path) -> Result<SequenceRecord> {
    let meta = parse_meta(&fs::read_to_string(dir.join("meta.cfg"))?)?;
    let stream = parse_events(&dir.join("events.csv"), meta.sensor, Some(meta.duration))?;
    let ground_truth = parse_groundtruth(&fs::read_to_string(dir.join("groundtruth.txt"))?)?;
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let rec = SequenceRecord {
        name,
        stream,
        delta_t: meta.delta_t,
        ground_truth,
        attributes: meta.attributes,
    };
    rec.validate()?;
    Ok(rec)
}

pub fn write_sequence(dir: &Path, rec: &SequenceRecord) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("events.csv"), rec.stream.to_csv())?;
    fs::write(dir.join("groundtruth.txt"), groundtruth_to_string(&rec.ground_truth))?;
    let meta = SequenceMeta {
        sensor: rec.stream.sensor,
        duration: rec.stream.duration,
        delta_t: rec.delta_t,
        attributes: rec.attributes.clone(),
    };
    fs::write(dir.join("meta.cfg"), meta_to_string(&meta))?;
    Ok(())
}

/// Loads every sequence directory under `root`, sorted by name.
pub fn load_dataset(root: &Path) -> Result<Vec<SequenceRecord>> {
    let mut dirs: Vec<_> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join("meta.cfg").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Validation(format!(
            "no sequence directories under {}",
            root.display()
        )));
    }
    dirs.iter().map(|d| load_sequence(d)).collect()
}
