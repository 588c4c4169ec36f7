//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` (and anything after a `#`) are comments. Lists are
//! comma-separated. Relative paths resolve against the config file's
//! directory. The `LAGAT_SEED` environment variable overrides `seed`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::SsmConfig;
use crate::ingest::{parse_lane_list, Schema};
use crate::nn::ModelConfig;
use crate::synth::ScenarioSpec;
use crate::train::TrainConfig;
use crate::trajectory::SourceTag;

pub const SEED_ENV: &str = "LAGAT_SEED";

/// Dataset roles in pipeline order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Role {
    Pretrain,
    Finetune,
    Test,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Pretrain, Role::Finetune, Role::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Pretrain => "pretrain",
            Role::Finetune => "finetune",
            Role::Test => "test",
        }
    }
}

/// Where a role's raw file comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// A file on disk in the given schema.
    File(PathBuf),
    /// The scenario written by the `synth` command.
    Synth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub role: Role,
    pub source: DataSource,
    pub schema: Schema,
    pub source_tag: Option<SourceTag>,
    pub lane_max: Option<u32>,
    pub merge_lane_ids: Option<BTreeSet<u32>>,
    /// Sidecar metadata file, used when lane keys are absent.
    pub meta: Option<PathBuf>,
    /// Vehicle count of the synthetic scenario for this role.
    pub synth_vehicles: Option<usize>,
    /// Added to the global seed for this role's scenario.
    pub synth_seed_offset: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RmaxSetting {
    Fixed(f64),
    Estimate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub datasets: Vec<DatasetConfig>,
    pub rmax: RmaxSetting,
    pub lower_lane_is_left: bool,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub ssm: SsmConfig,
    /// Anchor stride for evaluation and graph dumps.
    pub eval_stride: usize,
    pub synth: ScenarioSpec,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 42,
            out_dir: PathBuf::from("out"),
            datasets: Vec::new(),
            rmax: RmaxSetting::Estimate,
            lower_lane_is_left: true,
            model: ModelConfig::default(),
            pretrain: TrainConfig::pretrain(),
            finetune: TrainConfig::finetune(),
            ssm: SsmConfig::default(),
            eval_stride: 10,
            synth: ScenarioSpec::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for key `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{value}` for key `{key}`"))),
    }
}

fn parse_list<const N: usize>(key: &str, value: &str) -> Result<[f64; N]> {
    let parts: Vec<f64> = value
        .split(',')
        .map(|s| parse::<f64>(key, s.trim()))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("key `{key}` needs {N} comma-separated values")))
}

fn set_train(cfg: &mut TrainConfig, field: &str, key: &str, value: &str) -> Result<bool> {
    match field {
        "epochs" => cfg.epochs = parse(key, value)?,
        "batch_size" => cfg.batch_size = parse(key, value)?,
        "lr" => cfg.lr = parse(key, value)?,
        "weight_decay" => cfg.weight_decay = parse(key, value)?,
        "clip_norm" => cfg.clip_norm = parse(key, value)?,
        "step_sample" => cfg.step_sample = parse(key, value)?,
        "patience" => cfg.patience = parse(key, value)?,
        "factor" => cfg.factor = parse(key, value)?,
        "lambda2" => cfg.lambda2 = parse(key, value)?,
        "split" => cfg.split = parse_list(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl Config {
    pub fn dataset(&self, role: Role) -> Option<&DatasetConfig> {
        self.datasets.iter().find(|d| d.role == role)
    }

    /// Reads and validates a config file, applying the seed override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let env_seed = std::env::var(SEED_ENV).ok();
        Self::parse_str(&text, &base, env_seed.as_deref())
    }

    /// Parses config text; relative paths are joined onto `base`.
    pub fn parse_str(text: &str, base: &Path, env_seed: Option<&str>) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = BTreeSet::new();
        let mut datasets: BTreeMap<Role, BTreeMap<String, String>> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("line {}: {msg}", n + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key = value, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(at(format!("duplicate key `{key}`")));
            }
            cfg.set(key, value, base, &mut datasets).map_err(|e| match e {
                Error::Config(m) => at(m),
                other => other,
            })?;
        }
        if !seen.contains("out_dir") {
            cfg.out_dir = base.join("out");
        }
        if let Some(s) = env_seed {
            cfg.seed = parse(SEED_ENV, s)?;
        }
        cfg.pretrain.seed = cfg.seed;
        cfg.finetune.seed = cfg.seed;
        cfg.synth.seed = cfg.seed;
        for (role, keys) in datasets {
            cfg.datasets.push(dataset_config(role, keys, base)?);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(
        &mut self,
        key: &str,
        value: &str,
        base: &Path,
        datasets: &mut BTreeMap<Role, BTreeMap<String, String>>,
    ) -> Result<()> {
        let unknown = || Error::Config(format!("unknown key `{key}`"));
        match key {
            "seed" => self.seed = parse(key, value)?,
            "out_dir" => self.out_dir = base.join(value),
            "rmax" => {
                self.rmax = if value == "estimate" {
                    RmaxSetting::Estimate
                } else {
                    RmaxSetting::Fixed(parse(key, value)?)
                }
            }
            "graph.lower_lane_is_left" => self.lower_lane_is_left = parse_bool(key, value)?,
            "model.lstm_hidden" => self.model.lstm_hidden = parse(key, value)?,
            "model.heads" => self.model.heads = parse(key, value)?,
            "model.head_dim" => self.model.head_dim = parse(key, value)?,
            "model.gat_layers" => self.model.gat_layers = parse(key, value)?,
            "model.decoder_hidden" => self.model.decoder_hidden = parse(key, value)?,
            "ssm.ttc_threshold" => self.ssm.ttc_threshold = parse(key, value)?,
            "ssm.drac_threshold" => self.ssm.drac_threshold = parse(key, value)?,
            "ssm.collision_distance" => self.ssm.collision_distance = parse(key, value)?,
            "ssm.all_pairs" => self.ssm.all_pairs = parse_bool(key, value)?,
            "eval.stride" => self.eval_stride = parse(key, value)?,
            "synth.lanes" => self.synth.lanes = parse(key, value)?,
            "synth.merge_lanes" => {
                self.synth.merge_lane_ids = parse_lane_list(value).map_err(|e| Error::Config(e.to_string()))?
            }
            "synth.vehicles" => self.synth.vehicles = parse(key, value)?,
            "synth.duration" => self.synth.duration = parse(key, value)?,
            "synth.desired_speed" => self.synth.desired_speed = parse(key, value)?,
            "synth.speed_jitter" => self.synth.speed_jitter = parse(key, value)?,
            "synth.time_headway" => self.synth.time_headway = parse(key, value)?,
            "synth.max_accel" => self.synth.max_accel = parse(key, value)?,
            "synth.comfort_decel" => self.synth.comfort_decel = parse(key, value)?,
            "synth.max_decel" => self.synth.max_decel = parse(key, value)?,
            "synth.min_gap" => self.synth.min_gap = parse(key, value)?,
            "synth.merge_window" => self.synth.merge_window = parse_list(key, value)?,
            "synth.road_length" => self.synth.road_length = parse(key, value)?,
            _ => {
                let (prefix, field) = key.split_once('.').ok_or_else(unknown)?;
                let role = Role::ALL.into_iter().find(|r| r.as_str() == prefix).ok_or_else(unknown)?;
                let train = match role {
                    Role::Pretrain => Some(&mut self.pretrain),
                    Role::Finetune => Some(&mut self.finetune),
                    Role::Test => None,
                };
                if let Some(t) = train {
                    if set_train(t, field, key, value)? {
                        return Ok(());
                    }
                }
                const DATASET_KEYS: [&str; 8] =
                    ["path", "schema", "source", "lane_max", "merge_lanes", "meta", "synth_vehicles", "synth_seed_offset"];
                if !DATASET_KEYS.contains(&field) {
                    return Err(unknown());
                }
                datasets.entry(role).or_default().insert(field.to_string(), value.to_string());
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if let RmaxSetting::Fixed(r) = self.rmax {
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::Config("rmax must be positive or `estimate`".into()));
            }
        }
        let s = &self.ssm;
        if !(s.ttc_threshold > 0.0 && s.drac_threshold > 0.0 && s.collision_distance > 0.0) {
            return Err(Error::Config("ssm thresholds must be strictly positive".into()));
        }
        if self.eval_stride == 0 {
            return Err(Error::Config("eval.stride must be positive".into()));
        }
        for (name, t) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            if t.epochs == 0 || t.batch_size == 0 || t.step_sample == 0 {
                return Err(Error::Config(format!("{name}: epochs, batch_size and step_sample must be positive")));
            }
            if !(t.lr > 0.0 && t.clip_norm > 0.0 && t.factor > 0.0 && t.factor < 1.0 && t.lambda2 >= 0.0) {
                return Err(Error::Config(format!("{name}: lr, clip_norm, factor or lambda2 out of range")));
            }
            let sum: f64 = t.split.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || t.split.iter().any(|f| *f < 0.0) {
                return Err(Error::Config(format!("{name}.split must be nonnegative and sum to 1")));
            }
        }
        for d in &self.datasets {
            if let DataSource::File(p) = &d.source {
                if !p.is_file() {
                    return Err(Error::Config(format!("{}.path: {} does not exist", d.role.as_str(), p.display())));
                }
            }
            if let Some(m) = &d.meta {
                if !m.is_file() {
                    return Err(Error::Config(format!("{}.meta: {} does not exist", d.role.as_str(), m.display())));
                }
            }
        }
        Ok(())
    }
}

fn dataset_config(role: Role, mut keys: BTreeMap<String, String>, base: &Path) -> Result<DatasetConfig> {
    let name = role.as_str();
    let key = |f: &str| format!("{name}.{f}");
    let path = keys
        .remove("path")
        .ok_or_else(|| Error::Config(format!("`{}` is required when other {name}.* dataset keys are set", key("path"))))?;
    let source = if path == "synth" {
        DataSource::Synth
    } else {
        DataSource::File(base.join(path))
    };
    let schema = match keys.remove("schema") {
        Some(s) => match s.as_str() {
            "ngsim" => Schema::Ngsim,
            "ute" => Schema::Ute,
            other => return Err(Error::Config(format!("bad value `{other}` for key `{}`", key("schema")))),
        },
        None => Schema::Ute,
    };
    if source == DataSource::Synth && schema != Schema::Ute {
        return Err(Error::Config(format!("`{}`: synthetic data is written in the ute schema", key("schema"))));
    }
    let source_tag = match keys.remove("source") {
        Some(s) => Some(s.parse().map_err(|e: Error| Error::Config(format!("{}: {e}", key("source"))))?),
        None => None,
    };
    let lane_max = keys.remove("lane_max").map(|v| parse(&key("lane_max"), &v)).transpose()?;
    let merge_lane_ids = keys
        .remove("merge_lanes")
        .map(|v| parse_lane_list(&v).map_err(|e| Error::Config(format!("{}: {e}", key("merge_lanes")))))
        .transpose()?;
    let meta = keys.remove("meta").map(|m| base.join(m));
    let synth_vehicles = keys.remove("synth_vehicles").map(|v| parse(&key("synth_vehicles"), &v)).transpose()?;
    let synth_seed_offset = keys
        .remove("synth_seed_offset")
        .map(|v| parse(&key("synth_seed_offset"), &v))
        .transpose()?
        .unwrap_or(role as u64 * 1000);
    if let DataSource::File(_) = source {
        if meta.is_none() && lane_max.is_none() {
            return Err(Error::Config(format!("{name}: set `{}` or `{}`", key("lane_max"), key("meta"))));
        }
    }
    Ok(DatasetConfig {
        role,
        source,
        schema,
        source_tag,
        lane_max,
        merge_lane_ids,
        meta,
        synth_vehicles,
        synth_seed_offset,
    })
}
