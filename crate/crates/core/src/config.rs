//! Pipeline configuration and its flat `key = value` file format.
//!
//! One assignment per line, `#` starts a comment, lists are comma-separated.
//! Keys that are absent keep their defaults. The full key list with defaults
//! is produced by [`RefinerConfig::to_text`].

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::Tap;

/// Iterations per training stage: G1 alone, G2 alone (G1 frozen), joint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSchedule {
    pub global: usize,
    pub local: usize,
    pub joint: usize,
}

impl StageSchedule {
    pub fn new(global: usize, local: usize, joint: usize) -> Self {
        Self { global, local, joint }
    }

    pub fn total(&self) -> usize {
        self.global + self.local + self.joint
    }

    pub fn iters(&self, stage: usize) -> usize {
        match stage {
            1 => self.global,
            2 => self.local,
            3 => self.joint,
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinerConfig {
    /// Weight of the unmasked (global) style term inside the style loss.
    pub lambda_global: f64,
    /// Weight of the masked (local) style term inside the style loss.
    pub lambda_local: f64,
    /// Style weight in the total objective.
    pub eta: f64,
    /// Photorealism (matting) weight in the total objective.
    pub theta: f64,
    /// Weight of the style/content objective against the adversarial loss.
    pub lambda: f64,
    /// Content weight in the total objective.
    pub mu: f64,
    /// Weight of the generator's adversarial loss.
    pub adv_weight: f64,
    pub local_style_layers: Vec<Tap>,
    pub global_style_layers: Vec<Tap>,
    /// Per-layer style weights for the local (masked) term.
    pub local_style_weights: BTreeMap<Tap, f64>,
    /// Per-layer style weights for the global term.
    pub global_style_weights: BTreeMap<Tap, f64>,
    pub local_content_layer: Tap,
    pub global_content_layer: Tap,
    /// Per-layer content weights.
    pub content_weights: BTreeMap<Tap, f64>,
    pub matting_eps: f64,
    /// Side of the global generator's working resolution; the enhancer works
    /// at twice this size.
    pub train_resolution: usize,
    pub stages: StageSchedule,
    pub learning_rate: f64,
    pub stage3_lr_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Channel width of the first perceptual module (64 is the standard topology).
    pub percept_width: usize,
    pub g1_width: usize,
    pub g1_blocks: usize,
    pub g2_width: usize,
    pub g2_blocks: usize,
    pub disc_layer: Tap,
    pub disc_width: usize,
    pub seg_width: usize,
    pub seg_epochs: usize,
    pub seg_learning_rate: f64,
    pub checkpoint_every: usize,
    /// Pretrained perceptual weight file; empty selects the seeded random
    /// extractor.
    pub percept_weights: String,
}

fn taps(names: &[&str]) -> Vec<Tap> {
    names.iter().map(|n| Tap::parse(n).expect("built-in tap name")).collect()
}

fn uniform(layers: &[Tap]) -> BTreeMap<Tap, f64> {
    let w = 1.0 / layers.len().max(1) as f64;
    layers.iter().map(|&t| (t, w)).collect()
}

impl Default for RefinerConfig {
    fn default() -> Self {
        let local_style_layers = taps(&["conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1"]);
        let global_style_layers = taps(&["conv1_2", "conv2_2", "conv3_3", "conv4_3", "conv5_3"]);
        let local_content_layer = Tap::parse("conv4_2").unwrap();
        let global_content_layer = Tap::parse("conv3_2").unwrap();
        Self {
            lambda_global: 1.0,
            lambda_local: 1.0,
            eta: 1e2,
            theta: 1e4,
            lambda: 1.0,
            mu: 1e2,
            adv_weight: 1.0,
            local_style_weights: uniform(&local_style_layers),
            global_style_weights: uniform(&global_style_layers),
            local_style_layers,
            global_style_layers,
            content_weights: [(local_content_layer, 1.0), (global_content_layer, 1.0)].into_iter().collect(),
            local_content_layer,
            global_content_layer,
            matting_eps: 1e-5,
            train_resolution: 64,
            stages: StageSchedule::new(300, 200, 200),
            learning_rate: 2e-4,
            stage3_lr_decay: 10.0,
            batch_size: 2,
            seed: 0,
            percept_width: 16,
            g1_width: 16,
            g1_blocks: 3,
            g2_width: 8,
            g2_blocks: 2,
            disc_layer: Tap::parse("conv3_1").unwrap(),
            disc_width: 32,
            seg_width: 8,
            seg_epochs: 30,
            seg_learning_rate: 2e-3,
            checkpoint_every: 100,
            percept_weights: String::new(),
        }
    }
}

/// Read a configuration file; absent keys keep their defaults.
pub fn load_config(path: &Path) -> Result<RefinerConfig> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    RefinerConfig::parse(&text)
}

impl RefinerConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut explicit_local_weights = false;
        let mut explicit_global_weights = false;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::ParseError { line: line_no, message: format!("expected `key = value`, got `{line}`") })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "local_style_weights" => explicit_local_weights = true,
                "global_style_weights" => explicit_global_weights = true,
                _ => {}
            }
            cfg.set(key, value).map_err(|e| match e {
                Error::InvalidWeight(_) => e,
                other => Error::ParseError { line: line_no, message: other.to_string() },
            })?;
        }
        if !explicit_local_weights {
            cfg.local_style_weights = uniform(&cfg.local_style_layers);
        }
        if !explicit_global_weights {
            cfg.global_style_weights = uniform(&cfg.global_style_layers);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::InvalidParams(format!("{key}: cannot parse `{value}` as {what}"));
        let real = || -> Result<f64> {
            let v: f64 = value.parse().map_err(|_| bad("a number"))?;
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidWeight(key.to_string()));
            }
            Ok(v)
        };
        let count = || -> Result<usize> { value.parse().map_err(|_| bad("a non-negative integer")) };
        let layer_list = || -> Result<Vec<Tap>> { value.split(',').filter(|s| !s.trim().is_empty()).map(Tap::parse).collect() };
        match key {
            "lambda_global" => self.lambda_global = real()?,
            "lambda_local" => self.lambda_local = real()?,
            "eta" => self.eta = real()?,
            "theta" => self.theta = real()?,
            "lambda" => self.lambda = real()?,
            "mu" => self.mu = real()?,
            "adv_weight" => self.adv_weight = real()?,
            "local_style_layers" => self.local_style_layers = layer_list()?,
            "global_style_layers" => self.global_style_layers = layer_list()?,
            "local_style_weights" => self.local_style_weights = self.weight_list(key, value, &self.local_style_layers)?,
            "global_style_weights" => self.global_style_weights = self.weight_list(key, value, &self.global_style_layers)?,
            "local_content_layer" | "global_content_layer" => {
                let tap = Tap::parse(value)?;
                let old = if key == "local_content_layer" {
                    std::mem::replace(&mut self.local_content_layer, tap)
                } else {
                    std::mem::replace(&mut self.global_content_layer, tap)
                };
                let w = self.content_weights.remove(&old).unwrap_or(1.0);
                self.content_weights.insert(tap, w);
            }
            "local_content_weight" => {
                let w = real()?;
                self.content_weights.insert(self.local_content_layer, w);
            }
            "global_content_weight" => {
                let w = real()?;
                self.content_weights.insert(self.global_content_layer, w);
            }
            "matting_eps" => self.matting_eps = real()?,
            "train_resolution" => self.train_resolution = count()?,
            "stage_iters" => {
                let parts: Vec<usize> = value.split(',').map(|s| s.trim().parse().map_err(|_| bad("three counts"))).collect::<Result<_>>()?;
                if parts.len() != 3 {
                    return Err(bad("three counts"));
                }
                self.stages = StageSchedule::new(parts[0], parts[1], parts[2]);
            }
            "learning_rate" => self.learning_rate = real()?,
            "stage3_lr_decay" => self.stage3_lr_decay = real()?,
            "batch_size" => self.batch_size = count()?,
            "seed" => self.seed = value.parse().map_err(|_| bad("an unsigned integer"))?,
            "percept_width" => self.percept_width = count()?,
            "g1_width" => self.g1_width = count()?,
            "g1_blocks" => self.g1_blocks = count()?,
            "g2_width" => self.g2_width = count()?,
            "g2_blocks" => self.g2_blocks = count()?,
            "disc_layer" => self.disc_layer = Tap::parse(value)?,
            "disc_width" => self.disc_width = count()?,
            "seg_width" => self.seg_width = count()?,
            "seg_epochs" => self.seg_epochs = count()?,
            "seg_learning_rate" => self.seg_learning_rate = real()?,
            "checkpoint_every" => self.checkpoint_every = count()?,
            "percept_weights" => self.percept_weights = value.to_string(),
            _ => return Err(Error::InvalidParams(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn weight_list(&self, key: &str, value: &str, layers: &[Tap]) -> Result<BTreeMap<Tap, f64>> {
        let ws: Vec<f64> = value
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| Error::InvalidParams(format!("{key}: bad number `{s}`"))))
            .collect::<Result<_>>()?;
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidWeight(key.to_string()));
        }
        if ws.len() != layers.len() {
            return Err(Error::InvalidParams(format!("{key}: {} weights for {} layers", ws.len(), layers.len())));
        }
        Ok(layers.iter().copied().zip(ws).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let scalars = [
            ("lambda_global", self.lambda_global),
            ("lambda_local", self.lambda_local),
            ("eta", self.eta),
            ("theta", self.theta),
            ("lambda", self.lambda),
            ("mu", self.mu),
            ("adv_weight", self.adv_weight),
            ("learning_rate", self.learning_rate),
            ("stage3_lr_decay", self.stage3_lr_decay),
        ];
        for (name, v) in scalars {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidWeight(name.into()));
            }
        }
        let maps = [
            ("local_style_weights", &self.local_style_weights),
            ("global_style_weights", &self.global_style_weights),
            ("content_weights", &self.content_weights),
        ];
        for (name, map) in maps {
            if map.values().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(Error::InvalidWeight(name.into()));
            }
        }
        if self.matting_eps <= 0.0 {
            return Err(Error::InvalidWeight("matting_eps".into()));
        }
        if self.train_resolution < 8 || self.train_resolution % 4 != 0 {
            return Err(Error::InvalidParams("train_resolution must be a multiple of 4 and at least 8".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParams("batch_size must be positive".into()));
        }
        for (name, w) in [("percept_width", self.percept_width), ("g1_width", self.g1_width), ("g2_width", self.g2_width), ("disc_width", self.disc_width), ("seg_width", self.seg_width)] {
            if w == 0 {
                return Err(Error::InvalidParams(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Enhancer (output) resolution.
    pub fn output_resolution(&self) -> usize {
        2 * self.train_resolution
    }

    /// Style weight of `tap` in the local or global term (zero if unconfigured).
    pub fn style_weight(&self, tap: Tap, local: bool) -> f64 {
        let map = if local { &self.local_style_weights } else { &self.global_style_weights };
        map.get(&tap).copied().unwrap_or(0.0)
    }

    pub fn content_weight(&self, tap: Tap) -> f64 {
        self.content_weights.get(&tap).copied().unwrap_or(0.0)
    }

    /// Every tap the losses read.
    pub fn loss_taps(&self) -> Vec<Tap> {
        let mut all: Vec<Tap> = self
            .local_style_layers
            .iter()
            .chain(&self.global_style_layers)
            .copied()
            .chain(self.content_weights.keys().copied())
            .collect();
        all.sort();
        all.dedup();
        all
    }

    /// Render the configuration in the file format, one key per line.
    pub fn to_text(&self) -> String {
        let list = |ts: &[Tap]| ts.iter().map(|t| t.name()).collect::<Vec<_>>().join(", ");
        let wlist = |ts: &[Tap], m: &BTreeMap<Tap, f64>| ts.iter().map(|t| format!("{}", m.get(t).copied().unwrap_or(0.0))).collect::<Vec<_>>().join(", ");
        let s = &self.stages;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        kv("lambda_global", self.lambda_global.to_string());
        kv("lambda_local", self.lambda_local.to_string());
        kv("eta", self.eta.to_string());
        kv("theta", self.theta.to_string());
        kv("lambda", self.lambda.to_string());
        kv("mu", self.mu.to_string());
        kv("adv_weight", self.adv_weight.to_string());
        kv("local_style_layers", list(&self.local_style_layers));
        kv("local_style_weights", wlist(&self.local_style_layers, &self.local_style_weights));
        kv("global_style_layers", list(&self.global_style_layers));
        kv("global_style_weights", wlist(&self.global_style_layers, &self.global_style_weights));
        kv("local_content_layer", self.local_content_layer.name().into());
        kv("local_content_weight", self.content_weight(self.local_content_layer).to_string());
        kv("global_content_layer", self.global_content_layer.name().into());
        kv("global_content_weight", self.content_weight(self.global_content_layer).to_string());
        kv("matting_eps", self.matting_eps.to_string());
        kv("train_resolution", self.train_resolution.to_string());
        kv("stage_iters", format!("{}, {}, {}", s.global, s.local, s.joint));
        kv("learning_rate", self.learning_rate.to_string());
        kv("stage3_lr_decay", self.stage3_lr_decay.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("seed", self.seed.to_string());
        kv("percept_width", self.percept_width.to_string());
        kv("g1_width", self.g1_width.to_string());
        kv("g1_blocks", self.g1_blocks.to_string());
        kv("g2_width", self.g2_width.to_string());
        kv("g2_blocks", self.g2_blocks.to_string());
        kv("disc_layer", self.disc_layer.name().into());
        kv("disc_width", self.disc_width.to_string());
        kv("seg_width", self.seg_width.to_string());
        kv("seg_epochs", self.seg_epochs.to_string());
        kv("seg_learning_rate", self.seg_learning_rate.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("percept_weights", self.percept_weights.clone());
        out
    }
}
