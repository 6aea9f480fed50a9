//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors. Every
//! artifact records [`RunConfig::hash`], the SHA-256 of the canonical text.

use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::assign::GroupSet;
use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::metrics::{IouKind, MetricsConfig};
use crate::model::{HeadShape, IqpMode, LossConfig, Strategy, SwitchSignal, TrainConfig};
use crate::scene::{BevGrid, FeatureSpec, SceneConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train_frames: usize,
    pub eval_frames: usize,
    pub data_seed: u64,
    pub grid: BevGrid,
    pub min_objects: usize,
    pub max_objects: usize,
    pub base_rate: f64,
    pub min_points: usize,
    pub max_points: usize,
    pub ground_points: usize,
    pub clutter_min: usize,
    pub clutter_max: usize,
    pub point_jitter: f64,

    pub channels: usize,
    pub hidden: usize,
    pub strategy: Strategy,
    pub dar_groups: GroupSet,
    pub samples: usize,
    pub multipos_radius: usize,
    pub iou_th: f64,
    pub ema_decay: f64,
    pub switch_signal: SwitchSignal,
    pub iqp: IqpMode,
    pub train_iou: bool,
    pub alpha: f64,
    pub loss: LossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub grad_clip: f64,
    pub seed: u64,

    pub max_dets: usize,
    pub min_conf: f64,
    pub nms_iou: f64,
    pub ap_iou: Vec<f64>,
    pub iou_kind: IouKind,
    pub mrpe_match_iou: f64,
    pub mse_split: f64,

    /// Ablation seeds.
    pub seeds: Vec<u64>,
    /// Ablation cells: name and override list, in declaration order.
    pub cells: Vec<(String, String)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        let loss = LossConfig::default();
        let decode = DecodeConfig::default();
        let metrics = MetricsConfig::default();
        Self {
            train_frames: 200,
            eval_frames: 50,
            data_seed: 7,
            grid: scene.grid,
            min_objects: scene.min_objects,
            max_objects: scene.max_objects,
            base_rate: scene.base_rate,
            min_points: scene.min_points,
            max_points: scene.max_points,
            ground_points: scene.ground_points,
            clutter_min: scene.clutter_min,
            clutter_max: scene.clutter_max,
            point_jitter: scene.point_jitter,
            channels: 16,
            hidden: 16,
            strategy: Strategy::Switch,
            dar_groups: GroupSet::only_center(),
            samples: 4,
            multipos_radius: 1,
            iou_th: 0.6,
            ema_decay: 0.9,
            switch_signal: SwitchSignal::Measured,
            iqp: IqpMode::V2,
            train_iou: true,
            alpha: 0.5,
            loss,
            epochs: 8,
            batch_size: 4,
            lr: 1e-2,
            momentum: 0.9,
            grad_clip: 5.0,
            seed: 0,
            max_dets: decode.max_dets,
            min_conf: decode.min_conf,
            nms_iou: decode.nms_iou,
            ap_iou: metrics.ap_iou,
            iou_kind: metrics.iou_kind,
            mrpe_match_iou: metrics.mrpe_match_iou,
            mse_split: metrics.mse_split,
            seeds: vec![0, 1, 2],
            cells: Vec::new(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, got `{value}`"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Keys that describe the dataset; ablation cells may not override them.
pub const DATA_KEYS: &[&str] = &[
    "train_frames",
    "eval_frames",
    "data_seed",
    "grid_height",
    "grid_width",
    "cell",
    "origin_x",
    "origin_y",
    "min_objects",
    "max_objects",
    "base_rate",
    "min_points",
    "max_points",
    "ground_points",
    "clutter_min",
    "clutter_max",
    "point_jitter",
];

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let v = value.trim();
        match key {
            "train_frames" => self.train_frames = parse(key, v)?,
            "eval_frames" => self.eval_frames = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "grid_height" => self.grid.height = parse(key, v)?,
            "grid_width" => self.grid.width = parse(key, v)?,
            "cell" => self.grid.cell = parse(key, v)?,
            "origin_x" => self.grid.origin_x = parse(key, v)?,
            "origin_y" => self.grid.origin_y = parse(key, v)?,
            "min_objects" => self.min_objects = parse(key, v)?,
            "max_objects" => self.max_objects = parse(key, v)?,
            "base_rate" => self.base_rate = parse(key, v)?,
            "min_points" => self.min_points = parse(key, v)?,
            "max_points" => self.max_points = parse(key, v)?,
            "ground_points" => self.ground_points = parse(key, v)?,
            "clutter_min" => self.clutter_min = parse(key, v)?,
            "clutter_max" => self.clutter_max = parse(key, v)?,
            "point_jitter" => self.point_jitter = parse(key, v)?,
            "channels" => self.channels = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "strategy" => self.strategy = v.parse()?,
            "dar_groups" => self.dar_groups = v.parse()?,
            "samples" => self.samples = parse(key, v)?,
            "multipos_radius" => self.multipos_radius = parse(key, v)?,
            "iou_th" => self.iou_th = parse(key, v)?,
            "ema_decay" => self.ema_decay = parse(key, v)?,
            "switch_signal" => self.switch_signal = v.parse()?,
            "iqp" => self.iqp = v.parse()?,
            "train_iou" => self.train_iou = parse_bool(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "w_hm" => self.loss.hm_weight = parse(key, v)?,
            "w_reg" => self.loss.reg_weight = parse(key, v)?,
            "w_obj" => self.loss.obj_weight = parse(key, v)?,
            "w_iou" => self.loss.iou_weight = parse(key, v)?,
            "focal_alpha" => self.loss.focal_alpha = parse(key, v)?,
            "focal_beta" => self.loss.focal_beta = parse(key, v)?,
            "obj_threshold" => self.loss.obj_threshold = parse(key, v)?,
            "iou_positives" => self.loss.iou_positives = v.parse()?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "max_dets" => self.max_dets = parse(key, v)?,
            "min_conf" => self.min_conf = parse(key, v)?,
            "nms_iou" => self.nms_iou = parse(key, v)?,
            "ap_iou" => self.ap_iou = parse_list(key, v)?,
            "iou_kind" => {
                self.iou_kind = match v.to_ascii_lowercase().as_str() {
                    "bev" => IouKind::Bev,
                    "3d" => IouKind::ThreeD,
                    _ => return Err(Error::config(key, format!("expected bev or 3d, got `{v}`"))),
                }
            }
            "mrpe_match_iou" => self.mrpe_match_iou = parse(key, v)?,
            "mse_split" => self.mse_split = parse(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            _ => {
                if let Some(name) = key.strip_prefix("cell.") {
                    if name.is_empty() || name.contains(',') {
                        return Err(Error::config(key, "cell names must be non-empty and comma-free"));
                    }
                    match self.cells.iter_mut().find(|c| c.0 == name) {
                        Some(c) => c.1 = v.to_string(),
                        None => self.cells.push((name.to_string(), v.to_string())),
                    }
                } else {
                    return Err(Error::config(key, "unknown key"));
                }
            }
        }
        Ok(())
    }

    /// Applies an assignment of the form `key=value`.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::config(pair, "expected key=value"))?;
        self.set(k, v)
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_pair(line)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    /// Applies a whitespace-separated list of `key=value` overrides.
    pub fn apply_overrides(&mut self, overrides: &str) -> Result<()> {
        for pair in overrides.split_whitespace() {
            self.set_pair(pair)?;
        }
        Ok(())
    }

    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let g = &self.grid;
        let l = &self.loss;
        let mut v: Vec<(&str, String)> = vec![
            ("train_frames", self.train_frames.to_string()),
            ("eval_frames", self.eval_frames.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("grid_height", g.height.to_string()),
            ("grid_width", g.width.to_string()),
            ("cell", g.cell.to_string()),
            ("origin_x", g.origin_x.to_string()),
            ("origin_y", g.origin_y.to_string()),
            ("min_objects", self.min_objects.to_string()),
            ("max_objects", self.max_objects.to_string()),
            ("base_rate", self.base_rate.to_string()),
            ("min_points", self.min_points.to_string()),
            ("max_points", self.max_points.to_string()),
            ("ground_points", self.ground_points.to_string()),
            ("clutter_min", self.clutter_min.to_string()),
            ("clutter_max", self.clutter_max.to_string()),
            ("point_jitter", self.point_jitter.to_string()),
            ("channels", self.channels.to_string()),
            ("hidden", self.hidden.to_string()),
            ("strategy", self.strategy.to_string()),
            ("dar_groups", self.dar_groups.to_string()),
            ("samples", self.samples.to_string()),
            ("multipos_radius", self.multipos_radius.to_string()),
            ("iou_th", self.iou_th.to_string()),
            ("ema_decay", self.ema_decay.to_string()),
            ("switch_signal", self.switch_signal.to_string()),
            ("iqp", self.iqp.to_string()),
            ("train_iou", self.train_iou.to_string()),
            ("alpha", self.alpha.to_string()),
            ("w_hm", l.hm_weight.to_string()),
            ("w_reg", l.reg_weight.to_string()),
            ("w_obj", l.obj_weight.to_string()),
            ("w_iou", l.iou_weight.to_string()),
            ("focal_alpha", l.focal_alpha.to_string()),
            ("focal_beta", l.focal_beta.to_string()),
            ("obj_threshold", l.obj_threshold.to_string()),
            ("iou_positives", l.iou_positives.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("seed", self.seed.to_string()),
            ("max_dets", self.max_dets.to_string()),
            ("min_conf", self.min_conf.to_string()),
            ("nms_iou", self.nms_iou.to_string()),
            ("ap_iou", join(&self.ap_iou)),
            (
                "iou_kind",
                match self.iou_kind {
                    IouKind::Bev => "bev".into(),
                    IouKind::ThreeD => "3d".into(),
                },
            ),
            ("mrpe_match_iou", self.mrpe_match_iou.to_string()),
            ("mse_split", self.mse_split.to_string()),
            ("seeds", join(&self.seeds)),
        ];
        let mut out: Vec<(String, String)> = v.drain(..).map(|(k, v)| (k.to_string(), v)).collect();
        out.extend(self.cells.iter().map(|(n, o)| (format!("cell.{n}"), o.clone())));
        out
    }

    /// Canonical text; parsing it reproduces this configuration.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Hex SHA-256 of the canonical text, truncated to 16 characters.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    pub fn scene(&self) -> SceneConfig {
        let mut s = SceneConfig {
            grid: self.grid,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            base_rate: self.base_rate,
            min_points: self.min_points,
            max_points: self.max_points,
            ground_points: self.ground_points,
            clutter_min: self.clutter_min,
            clutter_max: self.clutter_max,
            point_jitter: self.point_jitter,
            ..SceneConfig::default()
        };
        s.sensor_x = self.grid.origin_x;
        s.sensor_y = self.grid.origin_y;
        s
    }

    pub fn class_names(&self) -> Vec<String> {
        self.scene().classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn feature_spec(&self) -> FeatureSpec {
        self.scene().feature_spec(self.channels)
    }

    pub fn head_shape(&self) -> HeadShape {
        HeadShape {
            in_channels: self.channels,
            hidden: self.hidden,
            num_classes: self.scene().num_classes(),
            iqp: self.iqp,
        }
    }

    /// IoU branch is trained in this configuration.
    pub fn iou_trained(&self) -> bool {
        self.train_iou
    }

    /// Score exponent actually used: 0 when the IoU branch is untrained.
    pub fn effective_alpha(&self) -> f64 {
        if self.iou_trained() {
            self.alpha
        } else {
            0.0
        }
    }

    pub fn train_config(&self, parallel: bool) -> TrainConfig {
        TrainConfig {
            head: self.head_shape(),
            strategy: self.strategy,
            dar_groups: self.dar_groups,
            samples_per_object: self.samples,
            multipos_radius: self.multipos_radius,
            switch_iou_th: self.iou_th,
            ema_decay: self.ema_decay,
            switch_signal: self.switch_signal,
            loss: LossConfig {
                train_iou: self.iou_trained(),
                ..self.loss
            },
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            grad_clip: self.grad_clip,
            seed: self.seed,
            parallel,
        }
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            max_dets: self.max_dets,
            min_conf: self.min_conf,
            nms_iou: self.nms_iou,
            alpha: self.effective_alpha(),
        }
    }

    pub fn metrics_config(&self) -> MetricsConfig {
        MetricsConfig {
            ap_iou: self.ap_iou.clone(),
            iou_kind: self.iou_kind,
            mrpe_match_iou: self.mrpe_match_iou,
            mse_split: self.mse_split,
        }
    }

    /// Checks every value against what the modules accept.
    pub fn validate(&self) -> Result<()> {
        self.scene().validate()?;
        let unit = |k: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(k, format!("must lie in [0, 1], got {v}")))
            }
        };
        if self.channels < crate::scene::BASE_CHANNELS {
            return Err(Error::config(
                "channels",
                format!("must be at least {}", crate::scene::BASE_CHANNELS),
            ));
        }
        if self.hidden == 0 {
            return Err(Error::config("hidden", "must be positive"));
        }
        if self.samples == 0 {
            return Err(Error::config("samples", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.max_dets == 0 {
            return Err(Error::config("max_dets", "must be positive"));
        }
        for (k, v) in [
            ("iou_th", self.iou_th),
            ("ema_decay", self.ema_decay),
            ("alpha", self.alpha),
            ("obj_threshold", self.loss.obj_threshold),
            ("min_conf", self.min_conf),
            ("nms_iou", self.nms_iou),
            ("mrpe_match_iou", self.mrpe_match_iou),
            ("mse_split", self.mse_split),
            ("momentum", self.momentum),
        ] {
            unit(k, v)?;
        }
        for (k, v) in [
            ("lr", self.lr),
            ("w_hm", self.loss.hm_weight),
            ("w_reg", self.loss.reg_weight),
            ("w_obj", self.loss.obj_weight),
            ("w_iou", self.loss.iou_weight),
            ("focal_alpha", self.loss.focal_alpha),
            ("focal_beta", self.loss.focal_beta),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(k, format!("must be finite and non-negative, got {v}")));
            }
        }
        if !self.grad_clip.is_finite() {
            return Err(Error::config("grad_clip", "must be finite"));
        }
        let classes = self.scene().num_classes();
        if self.ap_iou.len() != classes {
            return Err(Error::config(
                "ap_iou",
                format!("expected {classes} thresholds, got {}", self.ap_iou.len()),
            ));
        }
        for &t in &self.ap_iou {
            unit("ap_iou", t)?;
        }
        let mut names = BTreeMap::new();
        for (name, overrides) in &self.cells {
            if names.insert(name.clone(), ()).is_some() {
                return Err(Error::config(format!("cell.{name}"), "duplicate cell"));
            }
            let mut probe = self.clone();
            for pair in overrides.split_whitespace() {
                let key = pair.split_once('=').map_or(pair, |p| p.0).trim();
                if DATA_KEYS.contains(&key) || key == "seed" || key.starts_with("cell.") || key == "seeds" {
                    return Err(Error::config(
                        format!("cell.{name}"),
                        format!("`{key}` cannot be overridden per cell"),
                    ));
                }
            }
            probe.apply_overrides(overrides)?;
            probe.cells.clear();
            probe.validate()?;
        }
        Ok(())
    }

    /// Configuration of one ablation cell at one seed.
    pub fn cell_config(&self, overrides: &str, seed: u64) -> Result<RunConfig> {
        let mut c = self.clone();
        c.cells.clear();
        c.apply_overrides(overrides)?;
        c.seed = seed;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let mut c = RunConfig::default();
        c.set("strategy", "dar_static").unwrap();
        c.set("cell.full", "strategy=switch iqp=v2").unwrap();
        c.set("ap_iou", "0.7, 0.5,0.5").unwrap();
        let back = RunConfig::parse_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn hash_changes_with_values() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.set("lr", "0.02").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn comments_and_unknown_keys() {
        let c = RunConfig::parse_text("# hello\n\nepochs = 3  # trailing\n").unwrap();
        assert_eq!(c.epochs, 3);
        match RunConfig::parse_text("bogus = 1") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "bogus"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validation_names_the_key() {
        let mut c = RunConfig::default();
        c.iou_th = 1.5;
        match c.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "iou_th"),
            other => panic!("unexpected {other:?}"),
        }
        let mut c = RunConfig::default();
        c.set("cell.bad", "train_frames=3").unwrap();
        assert!(c.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn untrained_iou_forces_alpha_zero() {
        let mut c = RunConfig::default();
        c.iqp = IqpMode::Off;
        c.train_iou = false;
        assert_eq!(c.decode_config().alpha, 0.0);
        c.train_iou = true;
        assert_eq!(c.decode_config().alpha, 0.5);
    }
}
