//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment. Every key has a default;
//! unknown keys are rejected. Environment variables `AGGDET_<KEY>` (key
//! upper-cased) override file values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::anchors::{AnchorConfig, MatchConfig};
use crate::error::{Error, Result};
use crate::infer::{EnsembleMode, InferConfig, NmsConfig};
use crate::loss::FocalConfig;
use crate::model::backbone::BackboneConfig;
use crate::model::fprn::FprnConfig;
use crate::model::ModelConfig;
use crate::roi::AlignConfig;
use crate::synth::{DatasetSpec, PhantomSpec};
use crate::train::{LrSchedule, TrainConfig, TrainMode};

pub const ENV_PREFIX: &str = "AGGDET_";

/// `(key, default, description)`.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("threads", "1", "worker threads (kernels are single-threaded; recorded for the manifest)"),
    // data
    ("n_train", "40", "training phantoms written by gen-data"),
    ("n_test", "10", "test phantoms written by gen-data"),
    ("dims", "64", "phantom edge length in voxels"),
    ("lesions_min", "1", "fewest lesions per phantom"),
    ("lesions_max", "3", "most lesions per phantom"),
    ("diameter_min", "4", "smallest lesion diameter"),
    ("diameter_max", "12", "largest lesion diameter"),
    ("vessels", "3", "vessel-like distractors per phantom"),
    ("noise", "0.05", "Gaussian noise sigma"),
    ("lesion_contrast", "1", "lesion peak intensity above background"),
    ("background", "0", "tissue intensity"),
    // model
    ("anchors", "anchor1", "anchor set: anchor1 | anchor2"),
    ("crop", "32", "training crop edge (multiple of 16)"),
    ("pre_channels", "8", "channels of the stem convolutions"),
    ("growth", "16", "dense-block growth rate"),
    ("bottleneck", "32", "dense-layer bottleneck width"),
    ("encode_layers", "1,1,1", "dense layers per encoder stage"),
    ("decode_layers", "1,1", "dense layers per decoder stage"),
    ("fprn_crop", "5", "feature crop side around a proposal (odd)"),
    ("magnify", "false", "local magnification of RoI crops"),
    ("magnify_bias", "false", "bias terms in the magnification convolutions"),
    ("align_out", "2", "RoI Align output cells per axis"),
    ("align_samples", "2", "RoI Align samples per cell and axis"),
    ("fprn_hidden", "256", "classifier hidden width"),
    ("score_thresh", "0.2689414213699951", "proposal score threshold"),
    ("pre_nms_top_k", "64", "proposals kept per level before NMS"),
    // training
    ("warmup_epochs", "20", "RPN-only epochs"),
    ("epochs", "40", "epochs in `mode` after warmup"),
    ("abs_epochs", "0", "epochs with hard-region sampling"),
    ("batch_size", "2", "crops per iteration"),
    ("iters_per_epoch", "0", "iterations per epoch, 0 = one crop per training scan"),
    ("lr", "0.01", "initial learning rate"),
    ("lr_decay", "0.1", "learning-rate factor per milestone"),
    ("lr_milestones", "48", "comma-separated epochs at which the rate decays"),
    ("momentum", "0.9", "SGD momentum"),
    ("weight_decay", "0.0001", "L2 penalty"),
    ("clip_norm", "10", "gradient-norm cap, 0 disables"),
    ("mode", "joint", "rpn_only | joint | alternating"),
    ("abs_enabled", "false", "anchor based sampling stage"),
    ("abs_focus_prob", "0.5", "probability of a hard-region crop"),
    ("abs_score_thresh", "0.5", "fused score for a missed detection to count as hard"),
    ("gt_center_prob", "0.5", "probability of a lesion-centered crop"),
    ("flip", "true", "random axis flips"),
    ("pad_value", "0", "fill value outside the volume"),
    ("fprn_cap", "48", "second-branch samples per batch"),
    ("fprn_gt_jitter", "2", "jittered lesion copies per lesion for the second branch"),
    ("focal_alpha", "0.8", "focal loss alpha"),
    ("focal_gamma", "5", "focal loss gamma"),
    ("focus_t0", "1", "negative-term factor at the first iteration"),
    ("focus_t1", "10", "negative-term factor at the last iteration"),
    ("tn_threshold", "0.5", "score below which a negative counts as true negative"),
    ("reg_weight", "1", "regression loss weight"),
    ("iou_pos", "0.5", "anchor IoU for a positive"),
    ("iou_neg", "0.02", "anchor IoU below which an anchor is negative"),
    // inference and evaluation
    ("tile", "64", "inference tile edge, 0 = whole volume"),
    ("margin", "16", "tile overlap margin"),
    ("nms_iou", "0.1", "NMS cube-IoU threshold"),
    ("max_detections", "100", "detections kept per scan"),
    ("with_fprn", "true", "rescore proposals with the second branch"),
    ("ensemble", "union", "two-model merge: union | intersection"),
    ("ensemble_checkpoint", "", "second model for ensembling (empty = none)"),
    ("tnp_threshold", "", "score threshold for the TNP score (empty = none)"),
];

fn default_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|k| k.0 == key).map(|k| k.1)
}

fn static_key(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|k| k.0 == key).map(|k| k.0)
}

/// Explicitly set values over the built-in defaults.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse_str(text: &str, source: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| Error::Parse {
                path: source.to_string(),
                line: i + 1,
                reason,
            };
            let Some((k, v)) = line.split_once('=') else {
                return Err(err(format!("expected `key = value`, got `{line}`")));
            };
            let k = k.trim();
            if let Some(prev) = seen.insert(k.to_string(), i + 1) {
                return Err(err(format!("duplicate key `{k}` (first set on line {prev})")));
            }
            cfg.set(k, v.trim()).map_err(|e| err(e.to_string()))?;
        }
        Ok(cfg)
    }

    /// Reads, applies environment overrides and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse_str(&text, &path.display().to_string())?;
        cfg.apply_env(std::env::vars())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults plus environment overrides, validated.
    pub fn from_env() -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_env(std::env::vars())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if default_of(key).is_none() {
            return Err(Error::invalid("config key", format!("unknown key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `AGGDET_<KEY>` variables; other variables are ignored.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        for (name, value) in vars {
            if let Some(rest) = name.strip_prefix(ENV_PREFIX) {
                let key = rest.to_ascii_lowercase();
                self.set(&key, &value)
                    .map_err(|_| Error::invalid("environment", format!("`{name}` does not name a config key")))?;
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        match self.values.get(key) {
            Some(v) => v,
            None => default_of(key).unwrap_or_else(|| panic!("`{key}` is not a config key")),
        }
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let k = static_key(key).unwrap_or_else(|| panic!("`{key}` is not a config key"));
        let v = self.get(key);
        v.parse().map_err(|e: T::Err| Error::invalid(k, format!("`{v}`: {e}")))
    }

    fn list(&self, key: &str) -> Result<Vec<usize>> {
        let k = static_key(key).unwrap_or_else(|| panic!("`{key}` is not a config key"));
        let v = self.get(key).trim();
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| s.trim().parse().map_err(|e| Error::invalid(k, format!("`{v}`: {e}"))))
            .collect()
    }

    fn fixed<const N: usize>(&self, key: &str) -> Result<[usize; N]> {
        let v = self.list(key)?;
        v.try_into()
            .map_err(|v: Vec<usize>| Error::invalid(static_key(key).expect("known"), format!("need {N} values, got {}", v.len())))
    }

    fn optional_path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key).trim();
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn threads(&self) -> Result<usize> {
        let n: usize = self.parsed("threads")?;
        if n == 0 {
            return Err(Error::invalid("threads", "must be >= 1"));
        }
        Ok(n)
    }

    pub fn n_train(&self) -> Result<usize> {
        self.parsed("n_train")
    }

    pub fn n_test(&self) -> Result<usize> {
        self.parsed("n_test")
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let n: usize = self.parsed("dims")?;
        let ds = DatasetSpec {
            template: PhantomSpec {
                dims: [n; 3],
                diameter_range: (self.parsed("diameter_min")?, self.parsed("diameter_max")?),
                n_vessels: self.parsed("vessels")?,
                noise_sigma: self.parsed("noise")?,
                lesion_contrast: self.parsed("lesion_contrast")?,
                background: self.parsed("background")?,
                ..PhantomSpec::default()
            },
            lesion_count: (self.parsed("lesions_min")?, self.parsed("lesions_max")?),
        };
        if ds.lesion_count.0 > ds.lesion_count.1 {
            return Err(Error::invalid("lesions_min", "must not exceed lesions_max"));
        }
        ds.template.validate()?;
        Ok(ds)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                crop: self.parsed("crop")?,
                pre_channels: self.parsed("pre_channels")?,
                growth: self.parsed("growth")?,
                bottleneck: self.parsed("bottleneck")?,
                encode_layers: self.fixed("encode_layers")?,
                decode_layers: self.fixed("decode_layers")?,
                ..BackboneConfig::default()
            },
            anchors: AnchorConfig::by_name(self.get("anchors"))?,
            fprn: FprnConfig {
                crop_side: self.parsed("fprn_crop")?,
                magnify: self.parsed("magnify")?,
                magnify_bias: self.parsed("magnify_bias")?,
                align: AlignConfig {
                    out_size: self.parsed("align_out")?,
                    samples: self.parsed("align_samples")?,
                },
                hidden: self.parsed("fprn_hidden")?,
            },
            score_thresh: self.parsed("score_thresh")?,
            pre_nms_top_k: self.parsed("pre_nms_top_k")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let ipe: usize = self.parsed("iters_per_epoch")?;
        let cfg = TrainConfig {
            warmup_epochs: self.parsed("warmup_epochs")?,
            epochs: self.parsed("epochs")?,
            abs_epochs: self.parsed("abs_epochs")?,
            batch_size: self.parsed("batch_size")?,
            crop_size: self.parsed("crop")?,
            iters_per_epoch: (ipe > 0).then_some(ipe),
            lr: LrSchedule {
                start: self.parsed("lr")?,
                decay: self.parsed("lr_decay")?,
                milestones: self.list("lr_milestones")?,
            },
            momentum: self.parsed("momentum")?,
            weight_decay: self.parsed("weight_decay")?,
            clip_norm: self.parsed("clip_norm")?,
            mode: self.parsed::<TrainMode>("mode")?,
            abs_enabled: self.parsed("abs_enabled")?,
            abs_focus_prob: self.parsed("abs_focus_prob")?,
            abs_score_thresh: self.parsed("abs_score_thresh")?,
            gt_center_prob: self.parsed("gt_center_prob")?,
            flip: self.parsed("flip")?,
            pad_value: self.parsed("pad_value")?,
            fprn_cap: self.parsed("fprn_cap")?,
            fprn_gt_jitter: self.parsed("fprn_gt_jitter")?,
            focal: FocalConfig {
                alpha: self.parsed("focal_alpha")?,
                gamma: self.parsed("focal_gamma")?,
            },
            focus_t0: self.parsed("focus_t0")?,
            focus_t1: self.parsed("focus_t1")?,
            tn_threshold: self.parsed("tn_threshold")?,
            reg_weight: self.parsed("reg_weight")?,
            matching: MatchConfig {
                iou_pos: self.parsed("iou_pos")?,
                iou_neg: self.parsed("iou_neg")?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn infer_config(&self) -> Result<InferConfig> {
        let tile: usize = self.parsed("tile")?;
        Ok(InferConfig {
            tile: (tile > 0).then_some(tile),
            margin: self.parsed("margin")?,
            nms: NmsConfig {
                iou_thresh: self.parsed("nms_iou")?,
                max_detections: self.parsed("max_detections")?,
            },
            with_fprn: self.parsed("with_fprn")?,
            pad_value: self.parsed("pad_value")?,
            ensemble: self.parsed::<EnsembleMode>("ensemble")?,
        })
    }

    pub fn ensemble_checkpoint(&self) -> Option<PathBuf> {
        self.optional_path("ensemble_checkpoint")
    }

    pub fn tnp_threshold(&self) -> Result<Option<f64>> {
        if self.get("tnp_threshold").trim().is_empty() {
            return Ok(None);
        }
        let t: f64 = self.parsed("tnp_threshold")?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid("tnp_threshold", "must be in [0, 1]"));
        }
        Ok(Some(t))
    }

    /// Builds every typed config once and checks referenced files exist.
    pub fn validate(&self) -> Result<()> {
        self.threads()?;
        self.n_train()?;
        self.n_test()?;
        self.dataset_spec()?;
        let model = self.model_config()?;
        let train = self.train_config()?;
        if train.crop_size != model.backbone.crop {
            return Err(Error::invalid("crop", "model and training crop differ"));
        }
        self.infer_config()?;
        self.tnp_threshold()?;
        if let Some(p) = self.ensemble_checkpoint() {
            if !p.is_file() {
                return Err(Error::invalid("ensemble_checkpoint", format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Every key with its effective value, sorted; the basis of the config
    /// hash in run manifests.
    pub fn canonical(&self) -> String {
        let mut keys: Vec<&str> = KEYS.iter().map(|k| k.0).collect();
        keys.sort_unstable();
        let mut s = String::new();
        for k in keys {
            let _ = writeln!(s, "{k} = {}", self.get(k));
        }
        s
    }

    /// A commented config file listing every key at its default.
    pub fn template() -> String {
        let mut s = String::new();
        for (k, v, doc) in KEYS {
            let _ = writeln!(s, "# {doc}\n{k} = {v}");
        }
        s
    }
}
