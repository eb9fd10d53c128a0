//! Run configuration: an INI-style file with `[model]`, `[data]`, `[train]`,
//! `[finetune]` and `[track]` sections of `key = value` lines, plus
//! command-line overrides.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::event_io::SensorSize;
use crate::synthgen::DatasetSpec;
use crate::trainer::{Stage, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Full,
}

impl FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            _ => Err(Error::Config(format!("unknown scale `{s}`, expected desk or full"))),
        }
    }
}

impl std::fmt::Display for Scale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scale::Desk => "desk",
            Scale::Full => "full",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub spec: DatasetSpec,
    pub sequences: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackConfig {
    pub k: usize,
    pub warmup: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scale: Scale,
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub finetune: TrainConfig,
    /// Stage 1 stops early once mean training IoU reaches this; 0 disables.
    pub target_iou: f64,
    pub track: TrackConfig,
}

/// One `key = value` assignment with where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub section: String,
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Splits INI text into assignments; `#` and `;` start comments.
pub fn parse_ini(text: &str) -> Result<Vec<Assignment>> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split(['#', ';']).next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: n + 1, msg };
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| err(format!("unterminated section header `{line}`")))?
                .trim();
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(err(format!("bad section name `{name}`")));
            }
            section = name.to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(err("empty key".into()));
        }
        if section.is_empty() {
            return Err(err(format!("key `{k}` appears before any section")));
        }
        out.push(Assignment {
            section: section.clone(),
            key: k.to_string(),
            value: v.to_string(),
            line: n + 1,
        });
    }
    Ok(out)
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}` has invalid value `{v}`")))
}

fn float(key: &str, v: &str) -> Result<f64> {
    let x: f64 = num(key, v)?;
    if !x.is_finite() {
        return Err(Error::Config(format!("`{key}` must be finite")));
    }
    Ok(x)
}

fn triple(key: &str, v: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("`{key}` needs three comma-separated values")));
    }
    Ok([num(key, parts[0])?, num(key, parts[1])?, num(key, parts[2])?])
}

impl RunConfig {
    pub fn preset(scale: Scale) -> Self {
        let (model, train, finetune) = match scale {
            Scale::Desk => (
                ModelConfig::desk(),
                TrainConfig::desk(Stage::Slow),
                TrainConfig::desk(Stage::Finetune),
            ),
            Scale::Full => (
                ModelConfig::full(),
                TrainConfig::full(Stage::Slow),
                TrainConfig::full(Stage::Finetune),
            ),
        };
        RunConfig {
            scale,
            seed: 0,
            model,
            data: DataConfig {
                spec: DatasetSpec::desk(),
                sequences: 20,
            },
            train,
            finetune,
            target_iou: 0.0,
            track: TrackConfig { k: 3, warmup: 10 },
        }
    }

    /// Every `section.key` with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
        let m = &self.model;
        let d = &self.data.spec;
        let list = |v: [usize; 3]| format!("{},{},{}", v[0], v[1], v[2]);
        let mut e = vec![
            ("model", "scale", self.scale.to_string()),
            ("model", "embed_dim", m.embed_dim.to_string()),
            ("model", "patch_size", m.patch_size.to_string()),
            ("model", "template_size", m.template_size.to_string()),
            ("model", "search_size", m.search_size.to_string()),
            ("model", "depth_slow", m.depth_slow.to_string()),
            ("model", "depth_fast", m.depth_fast.to_string()),
            ("model", "heads", m.heads.to_string()),
            ("model", "mlp_ratio", m.mlp_ratio.to_string()),
            ("model", "gcn_dims", list(m.gcn_dims)),
            ("model", "voxel_grid", list(m.voxel_grid)),
            ("model", "knn_k", m.knn_k.to_string()),
            ("model", "max_points", m.max_points.to_string()),
            ("model", "template_factor", m.template_factor.to_string()),
            ("model", "search_factor", m.search_factor.to_string()),
            ("data", "sequences", self.data.sequences.to_string()),
            ("data", "windows", d.windows.to_string()),
            ("data", "delta_t", d.delta_t.to_string()),
            ("data", "sensor_height", d.sensor.height.to_string()),
            ("data", "sensor_width", d.sensor.width.to_string()),
            ("data", "lambda_edge", d.lambda_edge.to_string()),
            ("data", "lambda_bg", d.lambda_bg.to_string()),
            ("data", "box_min", d.box_side.0.to_string()),
            ("data", "box_max", d.box_side.1.to_string()),
            ("data", "max_speed", d.max_speed.to_string()),
            ("data", "max_wobble", d.max_wobble.to_string()),
        ];
        for (sec, t) in [("train", &self.train), ("finetune", &self.finetune)] {
            e.extend([
                (sec, "epochs", t.epochs.to_string()),
                (sec, "lr_backbone", t.lr_backbone.to_string()),
                (sec, "lr_gcn", t.lr_gcn.to_string()),
                (sec, "weight_decay", t.weight_decay.to_string()),
                (sec, "batch_size", t.batch_size.to_string()),
                (sec, "lambda_focal", t.weights.focal.to_string()),
                (sec, "lambda_l1", t.weights.l1.to_string()),
                (sec, "lambda_giou", t.weights.giou.to_string()),
                (sec, "lambda_kd", t.weights.kd.to_string()),
                (sec, "pairs_per_sequence", t.sampler.pairs_per_sequence.to_string()),
                (sec, "max_gap", t.sampler.max_gap.to_string()),
                (sec, "center_jitter", t.sampler.center_jitter.to_string()),
                (sec, "scale_jitter", t.sampler.scale_jitter.to_string()),
            ]);
        }
        e.push(("train", "target_iou", self.target_iou.to_string()));
        e.push(("finetune", "probe_size", self.finetune.probe_size.to_string()));
        e.push(("track", "k", self.track.k.to_string()));
        e.push(("track", "warmup", self.track.warmup.to_string()));
        e
    }

    pub fn valid_keys() -> Vec<String> {
        RunConfig::preset(Scale::Desk)
            .entries()
            .into_iter()
            .map(|(s, k, _)| format!("{s}.{k}"))
            .collect()
    }

    /// Resolves a bare key to its section when the name is unambiguous.
    pub fn qualify(key: &str) -> Result<(String, String)> {
        if let Some((s, k)) = key.split_once('.') {
            return Ok((s.to_string(), k.to_string()));
        }
        let hits: Vec<String> = Self::valid_keys()
            .into_iter()
            .filter(|q| q.split_once('.').map(|(_, k)| k) == Some(key))
            .collect();
        match hits.as_slice() {
            [one] => {
                let (s, k) = one.split_once('.').expect("qualified");
                Ok((s.to_string(), k.to_string()))
            }
            [] => Err(unknown_key(key)),
            _ => Err(Error::Config(format!(
                "key `{key}` is ambiguous, use one of: {}",
                hits.join(", ")
            ))),
        }
    }

    pub fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let q = format!("{section}.{key}");
        let m = &mut self.model;
        let d = &mut self.data.spec;
        match (section, key) {
            ("model", "scale") => {
                let s: Scale = v.parse()?;
                if s != self.scale {
                    return Err(Error::Config("`model.scale` must be set before any other key".into()));
                }
            }
            ("model", "embed_dim") => m.embed_dim = num(&q, v)?,
            ("model", "patch_size") => m.patch_size = num(&q, v)?,
            ("model", "template_size") => m.template_size = num(&q, v)?,
            ("model", "search_size") => m.search_size = num(&q, v)?,
            ("model", "depth_slow") => m.depth_slow = num(&q, v)?,
            ("model", "depth_fast") => m.depth_fast = num(&q, v)?,
            ("model", "heads") => m.heads = num(&q, v)?,
            ("model", "mlp_ratio") => m.mlp_ratio = num(&q, v)?,
            ("model", "gcn_dims") => m.gcn_dims = triple(&q, v)?,
            ("model", "voxel_grid") => m.voxel_grid = triple(&q, v)?,
            ("model", "knn_k") => m.knn_k = num(&q, v)?,
            ("model", "max_points") => m.max_points = num(&q, v)?,
            ("model", "template_factor") => m.template_factor = float(&q, v)?,
            ("model", "search_factor") => m.search_factor = float(&q, v)?,
            ("data", "sequences") => self.data.sequences = num(&q, v)?,
            ("data", "windows") => d.windows = num(&q, v)?,
            ("data", "delta_t") => d.delta_t = num(&q, v)?,
            ("data", "sensor_height") => d.sensor = SensorSize::new(num(&q, v)?, d.sensor.width),
            ("data", "sensor_width") => d.sensor = SensorSize::new(d.sensor.height, num(&q, v)?),
            ("data", "lambda_edge") => d.lambda_edge = float(&q, v)?,
            ("data", "lambda_bg") => d.lambda_bg = float(&q, v)?,
            ("data", "box_min") => d.box_side.0 = float(&q, v)?,
            ("data", "box_max") => d.box_side.1 = float(&q, v)?,
            ("data", "max_speed") => d.max_speed = float(&q, v)?,
            ("data", "max_wobble") => d.max_wobble = float(&q, v)?,
            ("train", "target_iou") => self.target_iou = float(&q, v)?,
            ("finetune", "probe_size") => self.finetune.probe_size = num(&q, v)?,
            ("train" | "finetune", _) => {
                let t = if section == "train" { &mut self.train } else { &mut self.finetune };
                match key {
                    "epochs" => t.epochs = num(&q, v)?,
                    "lr_backbone" => t.lr_backbone = float(&q, v)?,
                    "lr_gcn" => t.lr_gcn = float(&q, v)?,
                    "weight_decay" => t.weight_decay = float(&q, v)?,
                    "batch_size" => t.batch_size = num(&q, v)?,
                    "lambda_focal" => t.weights.focal = float(&q, v)?,
                    "lambda_l1" => t.weights.l1 = float(&q, v)?,
                    "lambda_giou" => t.weights.giou = float(&q, v)?,
                    "lambda_kd" => t.weights.kd = float(&q, v)?,
                    "pairs_per_sequence" => t.sampler.pairs_per_sequence = num(&q, v)?,
                    "max_gap" => t.sampler.max_gap = num(&q, v)?,
                    "center_jitter" => t.sampler.center_jitter = float(&q, v)?,
                    "scale_jitter" => t.sampler.scale_jitter = float(&q, v)?,
                    _ => return Err(unknown_key(&q)),
                }
            }
            ("track", "k") => self.track.k = num(&q, v)?,
            ("track", "warmup") => self.track.warmup = num(&q, v)?,
            _ => return Err(unknown_key(&q)),
        }
        Ok(())
    }

    /// Builds a config from file assignments followed by overrides. The
    /// scale may come from either and picks the presets.
    pub fn from_assignments(file: &[Assignment], overrides: &[(String, String)], seed: u64) -> Result<Self> {
        let mut scale = Scale::Desk;
        for a in file {
            if a.section == "model" && a.key == "scale" {
                scale = a.value.parse()?;
            }
        }
        for (k, v) in overrides {
            if RunConfig::qualify(k)? == ("model".to_string(), "scale".to_string()) {
                scale = v.parse()?;
            }
        }
        let mut cfg = RunConfig::preset(scale);
        cfg.seed = seed;
        for a in file {
            cfg.set(&a.section, &a.key, &a.value).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", a.line)),
                other => other,
            })?;
        }
        for (k, v) in overrides {
            let (s, k) = RunConfig::qualify(k)?;
            cfg.set(&s, &k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str, overrides: &[(String, String)], seed: u64) -> Result<Self> {
        RunConfig::from_assignments(&parse_ini(text)?, overrides, seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.finetune.validate()?;
        let d = &self.data.spec;
        if self.data.sequences == 0 || d.windows < 2 || d.delta_t == 0 {
            return Err(Error::Config("data needs sequences >= 1, windows >= 2 and delta_t > 0".into()));
        }
        if d.sensor.height == 0 || d.sensor.width == 0 {
            return Err(Error::Config("sensor size must be positive".into()));
        }
        if !(d.box_side.0 > 0.0 && d.box_side.0 <= d.box_side.1) {
            return Err(Error::Config("need 0 < box_min <= box_max".into()));
        }
        if self.track.k == 0 {
            return Err(Error::Config("track.k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.target_iou) {
            return Err(Error::Config("train.target_iou must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// The whole configuration as INI text; parsing it back yields `self`.
    pub fn to_ini(&self) -> String {
        let mut s = format!("# seed = {}\n", self.seed);
        let mut current = "";
        for (sec, key, val) in self.entries() {
            if sec != current {
                let _ = write!(s, "{}[{sec}]\n", if current.is_empty() { "" } else { "\n" });
                current = sec;
            }
            let _ = writeln!(s, "{key} = {val}");
        }
        s
    }

    /// Training settings of `stage` with the run seed applied.
    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        let mut t = match stage {
            Stage::Finetune => self.finetune.clone(),
            _ => self.train.clone(),
        };
        t.stage = stage;
        t.seed = self.seed;
        t
    }
}

fn unknown_key(key: &str) -> Error {
    Error::Config(format!(
        "unknown key `{key}`; valid keys: {}",
        RunConfig::valid_keys().join(", ")
    ))
}
