//! Run configuration: one flat key-value text file plus command-line
//! overrides.
//!
//! The format is a line-oriented `key = value` list with `#` comments. Keys
//! are dotted paths into the per-module config structs; unknown keys are
//! rejected so typos fail loudly. [`RunConfig::echo`] prints every key in
//! sorted order, and feeding that text back through [`RunConfig::apply_text`]
//! reproduces the run exactly (floats print with round-trip precision).

use std::path::{Path, PathBuf};

use crate::data::GenConfig;
use crate::error::{Error, Result};
use crate::infer::InferConfig;
use crate::loss::LossConfig;
use crate::model::{ConverterKind, ModelConfig};
use crate::train::TrainConfig;

/// Which detector a run trains and evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Point-set detector: deformable sampling driven by the learnt points.
    Points,
    /// Anchored box-regression twin with an unlearnable sampling grid.
    Baseline,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "points" => Ok(ModelKind::Points),
            "baseline" => Ok(ModelKind::Baseline),
            other => Err(Error::Config(format!(
                "unknown model.kind '{other}' (expected points or baseline)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Points => "points",
            ModelKind::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data: GenConfig,
    pub kind: ModelKind,
    pub model: ModelConfig,
    /// Seed for parameter initialization.
    pub model_seed: u64,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub infer: InferConfig,
    /// Instances per finite-difference suite.
    pub gradcheck_instances: usize,
    pub gradcheck_seed: u64,
    pub study_seed: u64,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: GenConfig::default(),
            kind: ModelKind::Points,
            model: ModelConfig::default(),
            model_seed: 0,
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            infer: InferConfig::default(),
            gradcheck_instances: 100,
            gradcheck_seed: 0,
            study_seed: 0,
            dataset: None,
            checkpoint: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for key '{key}'")))
}

impl RunConfig {
    /// Set one key. Unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data.num_scenes" => self.data.num_scenes = parse(key, value)?,
            "data.image_size" => self.data.image_size = parse(key, value)?,
            "data.min_objects" => self.data.min_objects = parse(key, value)?,
            "data.max_objects" => self.data.max_objects = parse(key, value)?,
            "data.min_size" => self.data.min_size = parse(key, value)?,
            "data.max_size" => self.data.max_size = parse(key, value)?,
            "data.noise_std" => self.data.noise_std = parse(key, value)?,
            "data.seed" => self.data.seed = parse(key, value)?,
            "model.kind" => self.kind = ModelKind::parse(value)?,
            "model.num_classes" => self.model.num_classes = parse(key, value)?,
            "model.base_channels" => self.model.base_channels = parse(key, value)?,
            "model.head_channels" => self.model.head_channels = parse(key, value)?,
            "model.num_points" => self.model.num_points = parse(key, value)?,
            "model.converter" => self.model.converter = ConverterKind::parse(value)?,
            "model.partial_count" => self.model.partial_count = parse(key, value)?,
            "model.seed" => self.model_seed = parse(key, value)?,
            "train.iterations" => self.train.iterations = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.learning_rate" => self.train.learning_rate = parse(key, value)?,
            "train.momentum" => self.train.momentum = parse(key, value)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, value)?,
            "train.warmup_iterations" => self.train.warmup_iterations = parse(key, value)?,
            "train.warmup_start_factor" => self.train.warmup_start_factor = parse(key, value)?,
            "train.decay_at" => self.train.decay_at = parse(key, value)?,
            "train.decay_factor" => self.train.decay_factor = parse(key, value)?,
            "train.hflip" => self.train.hflip = parse(key, value)?,
            "train.seed" => self.train.seed = parse(key, value)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(key, value)?,
            "loss.smooth_l1_beta" => self.loss.smooth_l1_beta = parse(key, value)?,
            "loss.focal_alpha" => self.loss.focal_alpha = parse(key, value)?,
            "loss.focal_gamma" => self.loss.focal_gamma = parse(key, value)?,
            "loss.cls_weight" => self.loss.cls_weight = parse(key, value)?,
            "loss.loc_weight_stage1" => self.loss.loc_weight_stage1 = parse(key, value)?,
            "loss.loc_weight_stage2" => self.loss.loc_weight_stage2 = parse(key, value)?,
            "infer.score_thresh" => self.infer.score_thresh = parse(key, value)?,
            "infer.topk_per_level" => self.infer.topk_per_level = parse(key, value)?,
            "infer.nms_iou" => self.infer.nms_iou = parse(key, value)?,
            "gradcheck.instances" => self.gradcheck_instances = parse(key, value)?,
            "gradcheck.seed" => self.gradcheck_seed = parse(key, value)?,
            "study.seed" => self.study_seed = parse(key, value)?,
            "paths.dataset" => self.dataset = Some(PathBuf::from(value)),
            "paths.checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Apply a `key=value` command-line override.
    pub fn set_assignment(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got '{kv}'")))?;
        self.set(k.trim(), v.trim())
    }

    /// Apply a config file's text. `origin` names the source in errors.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{origin}:{}: expected key = value", idx + 1))
            })?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("{origin}:{}: {e}", idx + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// `--seed N` steers every stochastic stage at once.
    pub fn override_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.model_seed = seed;
        self.train.seed = seed;
        self.gradcheck_seed = seed;
        self.study_seed = seed;
    }

    /// The fully resolved configuration, one sorted `key = value` line each.
    /// Unset paths are omitted; everything else round-trips through
    /// [`RunConfig::apply_text`].
    pub fn echo(&self) -> String {
        let mut kv: Vec<(&str, String)> = vec![
            ("data.num_scenes", self.data.num_scenes.to_string()),
            ("data.image_size", self.data.image_size.to_string()),
            ("data.min_objects", self.data.min_objects.to_string()),
            ("data.max_objects", self.data.max_objects.to_string()),
            ("data.min_size", self.data.min_size.to_string()),
            ("data.max_size", self.data.max_size.to_string()),
            ("data.noise_std", self.data.noise_std.to_string()),
            ("data.seed", self.data.seed.to_string()),
            ("model.kind", self.kind.name().to_string()),
            ("model.num_classes", self.model.num_classes.to_string()),
            ("model.base_channels", self.model.base_channels.to_string()),
            ("model.head_channels", self.model.head_channels.to_string()),
            ("model.num_points", self.model.num_points.to_string()),
            ("model.converter", self.model.converter.name().to_string()),
            ("model.partial_count", self.model.partial_count.to_string()),
            ("model.seed", self.model_seed.to_string()),
            ("train.iterations", self.train.iterations.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.learning_rate", self.train.learning_rate.to_string()),
            ("train.momentum", self.train.momentum.to_string()),
            ("train.weight_decay", self.train.weight_decay.to_string()),
            ("train.warmup_iterations", self.train.warmup_iterations.to_string()),
            ("train.warmup_start_factor", self.train.warmup_start_factor.to_string()),
            ("train.decay_at", self.train.decay_at.to_string()),
            ("train.decay_factor", self.train.decay_factor.to_string()),
            ("train.hflip", self.train.hflip.to_string()),
            ("train.seed", self.train.seed.to_string()),
            ("train.checkpoint_every", self.train.checkpoint_every.to_string()),
            ("loss.smooth_l1_beta", self.loss.smooth_l1_beta.to_string()),
            ("loss.focal_alpha", self.loss.focal_alpha.to_string()),
            ("loss.focal_gamma", self.loss.focal_gamma.to_string()),
            ("loss.cls_weight", self.loss.cls_weight.to_string()),
            ("loss.loc_weight_stage1", self.loss.loc_weight_stage1.to_string()),
            ("loss.loc_weight_stage2", self.loss.loc_weight_stage2.to_string()),
            ("infer.score_thresh", self.infer.score_thresh.to_string()),
            ("infer.topk_per_level", self.infer.topk_per_level.to_string()),
            ("infer.nms_iou", self.infer.nms_iou.to_string()),
            ("gradcheck.instances", self.gradcheck_instances.to_string()),
            ("gradcheck.seed", self.gradcheck_seed.to_string()),
            ("study.seed", self.study_seed.to_string()),
        ];
        if let Some(p) = &self.dataset {
            kv.push(("paths.dataset", p.display().to_string()));
        }
        if let Some(p) = &self.checkpoint {
            kv.push(("paths.checkpoint", p.display().to_string()));
        }
        kv.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (k, v) in kv {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        if !(self.infer.score_thresh >= 0.0 && self.infer.score_thresh < 1.0) {
            return Err(Error::Config(format!(
                "infer.score_thresh must lie in [0, 1), got {}",
                self.infer.score_thresh
            )));
        }
        if self.infer.topk_per_level == 0 {
            return Err(Error::Config("infer.topk_per_level must be positive".into()));
        }
        if !(self.infer.nms_iou >= 0.0 && self.infer.nms_iou <= 1.0) {
            return Err(Error::Config(format!(
                "infer.nms_iou must lie in [0, 1], got {}",
                self.infer.nms_iou
            )));
        }
        if self.gradcheck_instances == 0 {
            return Err(Error::Config("gradcheck.instances must be positive".into()));
        }
        Ok(())
    }

    /// Path keys the commands require; one-line errors when missing.
    pub fn dataset_path(&self) -> Result<&Path> {
        self.dataset.as_deref().ok_or_else(|| {
            Error::Config("paths.dataset is not set (--set paths.dataset=DIR)".into())
        })
    }

    pub fn checkpoint_path(&self) -> Result<&Path> {
        self.checkpoint.as_deref().ok_or_else(|| {
            Error::Config("paths.checkpoint is not set (--set paths.checkpoint=FILE)".into())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips_to_an_identical_config() {
        let mut cfg = RunConfig::default();
        cfg.set("train.learning_rate", "0.0123456789012345").unwrap();
        cfg.set("model.converter", "partial_minmax").unwrap();
        cfg.set("model.kind", "baseline").unwrap();
        cfg.set("paths.dataset", "/tmp/ds").unwrap();
        let echo = cfg.echo();

        let mut back = RunConfig::default();
        back.apply_text(&echo, "echo").unwrap();
        assert_eq!(echo, back.echo());
        assert_eq!(back.train.learning_rate.to_bits(), cfg.train.learning_rate.to_bits());
        assert_eq!(back.kind, ModelKind::Baseline);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.set("train.learningrate", "0.1").unwrap_err();
        assert!(err.to_string().contains("unknown config key"));
        let err = cfg.apply_text("data.seed = 1\nnope = 2\n", "test").unwrap_err();
        assert!(err.to_string().contains("test:2"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# full line\n\ndata.seed = 9 # trailing\n", "test").unwrap();
        assert_eq!(cfg.data.seed, 9);
    }

    #[test]
    fn malformed_lines_name_their_source() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("data.seed 9\n", "conf.txt").unwrap_err();
        assert!(err.to_string().contains("conf.txt:1"), "{err}");
    }

    #[test]
    fn seed_flag_steers_every_stage() {
        let mut cfg = RunConfig::default();
        cfg.override_seed(77);
        assert_eq!(cfg.data.seed, 77);
        assert_eq!(cfg.model_seed, 77);
        assert_eq!(cfg.train.seed, 77);
        assert_eq!(cfg.gradcheck_seed, 77);
        assert_eq!(cfg.study_seed, 77);
    }

    #[test]
    fn set_assignment_splits_on_the_first_equals() {
        let mut cfg = RunConfig::default();
        cfg.set_assignment("paths.dataset=/a=b/c").unwrap();
        assert_eq!(cfg.dataset.as_deref(), Some(Path::new("/a=b/c")));
        assert!(cfg.set_assignment("no-equals").is_err());
    }

    #[test]
    fn bad_values_name_the_key() {
        let mut cfg = RunConfig::default();
        let err = cfg.set("train.iterations", "many").unwrap_err();
        assert!(err.to_string().contains("train.iterations"), "{err}");
    }
}
