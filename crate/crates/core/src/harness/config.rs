use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::ssm::{canonical_observation, canonical_transition, LinearModel, LorenzModel, NoiseSpec, StateSpaceModel};
use crate::training::{LossMode, OnlineConfig, TrainingConfig};
use crate::{from_db, Error, Result};

/// Which model family an experiment runs on.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelSpec {
    Linear {
        m: usize,
        n: usize,
        f: Option<DMatrix<f64>>,
        h: Option<DMatrix<f64>>,
    },
    Lorenz {
        dt: f64,
        taylor_order: usize,
    },
}

/// How the regularization weight follows the noise level of a grid point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GammaScaling {
    None,
    /// `γ·r²`, keeping the regularizer's share of the loss fixed across the
    /// grid.
    R2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OnlineExperiment {
    pub config: OnlineConfig,
    pub q2_db: f64,
    pub pretrain_r2_db: f64,
    pub stream_r2_db: f64,
    pub stream_len: usize,
    pub pretrain_mode: LossMode,
}

/// A fully resolved experiment description.
///
/// Built from `section.key = value` lines; every key has a default, so an
/// empty file is a valid (2×2 linear) config. The hash covers the resolved
/// key set, so two files that differ only in comments or key order share it.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub id: String,
    pub model: ModelSpec,
    /// `1/r²` grid in dB.
    pub inv_r2_db: Vec<f64>,
    pub nu_db: f64,
    pub train_len: usize,
    pub eval_lens: Vec<usize>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Trajectories used for evaluations longer than `train_len`.
    pub n_long: usize,
    pub training: TrainingConfig,
    pub gamma_scaling: GammaScaling,
    pub online: OnlineExperiment,
    /// Multiplier on the initial `fc_out` weights; small values start the
    /// filter close to pure prediction.
    pub init_gain_scale: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
    entries: BTreeMap<String, String>,
}

const KEYS: &[(&str, &str)] = &[
    ("experiment.id", "default"),
    ("experiment.seed", "0"),
    ("output.dir", "out"),
    ("model.kind", "linear"),
    ("model.m", "2"),
    ("model.n", "2"),
    ("model.f", ""),
    ("model.h", ""),
    ("model.dt", "0.02"),
    ("model.taylor_order", "5"),
    ("noise.inv_r2_db", "0"),
    ("noise.nu_db", "0"),
    ("data.train_len", "80"),
    ("data.eval_lens", "80"),
    ("data.n_train", "800"),
    ("data.n_val", "100"),
    ("data.n_test", "100"),
    ("data.n_long", "20"),
    ("train.mode", "unsupervised"),
    ("train.gamma", "1e-4"),
    ("train.gamma_scaling", "r2"),
    ("train.batch_size", "32"),
    ("train.epochs", "200"),
    ("train.learning_rate", "1e-3"),
    ("train.eval_every", "1"),
    ("train.patience", "20"),
    ("train.clip_norm", "none"),
    ("train.init_gain_scale", "1"),
    ("online.window", "10"),
    ("online.learning_rate", "1e-3"),
    ("online.steps_per_window", "1"),
    ("online.gamma", "0"),
    ("online.q2_db", "10"),
    ("online.pretrain_r2_db", "10"),
    ("online.stream_r2_db", "25"),
    ("online.stream_len", "4000"),
    ("online.pretrain_mode", "supervised"),
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse_num(key, s)).collect()
}

fn parse_matrix(key: &str, v: &str, rows: usize, cols: usize) -> Result<Option<DMatrix<f64>>> {
    if v.trim().is_empty() {
        return Ok(None);
    }
    let data: Vec<f64> = parse_list(key, v)?;
    if data.len() != rows * cols {
        return Err(Error::Config(format!("{key}: expected {} values, got {}", rows * cols, data.len())));
    }
    Ok(Some(DMatrix::from_row_slice(rows, cols, &data)))
}

fn optional<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    match v.trim() {
        "none" | "" => Ok(None),
        s => parse_num(key, s).map(Some),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut overrides = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `section.key = value`", i + 1)))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::resolve(overrides)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Re-resolves with one key replaced.
    pub fn with(&self, key: &str, value: impl ToString) -> Result<Self> {
        let mut entries: Vec<(String, String)> = self.entries.clone().into_iter().collect();
        entries.push((key.to_string(), value.to_string()));
        Self::resolve(entries)
    }

    fn resolve(overrides: Vec<(String, String)>) -> Result<Self> {
        let mut entries: BTreeMap<String, String> = KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        for (k, v) in overrides {
            if !entries.contains_key(&k) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
            entries.insert(k, v);
        }
        let get = |k: &str| entries[k].as_str();

        let model = match get("model.kind") {
            "linear" => {
                let m: usize = parse_num("model.m", get("model.m"))?;
                let n: usize = parse_num("model.n", get("model.n"))?;
                if m == 0 || n == 0 {
                    return Err(Error::Config("model dimensions must be positive".into()));
                }
                ModelSpec::Linear {
                    m,
                    n,
                    f: parse_matrix("model.f", get("model.f"), m, m)?,
                    h: parse_matrix("model.h", get("model.h"), n, m)?,
                }
            }
            "lorenz" => ModelSpec::Lorenz {
                dt: parse_num("model.dt", get("model.dt"))?,
                taylor_order: parse_num("model.taylor_order", get("model.taylor_order"))?,
            },
            other => return Err(Error::Config(format!("model.kind: unknown model `{other}`"))),
        };

        let inv_r2_db: Vec<f64> = parse_list("noise.inv_r2_db", get("noise.inv_r2_db"))?;
        if inv_r2_db.is_empty() {
            return Err(Error::Config("noise.inv_r2_db: the grid is empty".into()));
        }
        let eval_lens: Vec<usize> = parse_list("data.eval_lens", get("data.eval_lens"))?;
        let training = TrainingConfig {
            mode: get("train.mode").parse()?,
            gamma: parse_num("train.gamma", get("train.gamma"))?,
            batch_size: parse_num("train.batch_size", get("train.batch_size"))?,
            epochs: parse_num("train.epochs", get("train.epochs"))?,
            learning_rate: parse_num("train.learning_rate", get("train.learning_rate"))?,
            seed: parse_num("experiment.seed", get("experiment.seed"))?,
            eval_every: parse_num("train.eval_every", get("train.eval_every"))?,
            patience: optional("train.patience", get("train.patience"))?,
            clip_norm: optional("train.clip_norm", get("train.clip_norm"))?,
        };
        let gamma_scaling = match get("train.gamma_scaling") {
            "r2" => GammaScaling::R2,
            "none" => GammaScaling::None,
            other => return Err(Error::Config(format!("train.gamma_scaling: unknown value `{other}`"))),
        };
        let online = OnlineExperiment {
            config: OnlineConfig {
                window: parse_num("online.window", get("online.window"))?,
                learning_rate: parse_num("online.learning_rate", get("online.learning_rate"))?,
                steps_per_window: parse_num("online.steps_per_window", get("online.steps_per_window"))?,
                gamma: parse_num("online.gamma", get("online.gamma"))?,
            },
            q2_db: parse_num("online.q2_db", get("online.q2_db"))?,
            pretrain_r2_db: parse_num("online.pretrain_r2_db", get("online.pretrain_r2_db"))?,
            stream_r2_db: parse_num("online.stream_r2_db", get("online.stream_r2_db"))?,
            stream_len: parse_num("online.stream_len", get("online.stream_len"))?,
            pretrain_mode: get("online.pretrain_mode").parse()?,
        };

        let cfg = ExperimentConfig {
            id: get("experiment.id").to_string(),
            model,
            inv_r2_db,
            nu_db: parse_num("noise.nu_db", get("noise.nu_db"))?,
            train_len: parse_num("data.train_len", get("data.train_len"))?,
            eval_lens,
            n_train: parse_num("data.n_train", get("data.n_train"))?,
            n_val: parse_num("data.n_val", get("data.n_val"))?,
            n_test: parse_num("data.n_test", get("data.n_test"))?,
            n_long: parse_num("data.n_long", get("data.n_long"))?,
            training,
            gamma_scaling,
            online,
            init_gain_scale: parse_num("train.init_gain_scale", get("train.init_gain_scale"))?,
            seed: parse_num("experiment.seed", get("experiment.seed"))?,
            out_dir: PathBuf::from(get("output.dir")),
            entries,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.train_len == 0 || self.eval_lens.iter().any(|&t| t == 0) {
            return Err(Error::Config("trajectory lengths must be positive".into()));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("data.n_train and data.n_test must be positive".into()));
        }
        if self.inv_r2_db.iter().chain([&self.nu_db]).any(|v| !v.is_finite()) {
            return Err(Error::Config("noise grid values must be finite".into()));
        }
        if let ModelSpec::Lorenz { dt, taylor_order } = self.model {
            if !(dt > 0.0) || taylor_order == 0 {
                return Err(Error::Config("lorenz needs dt > 0 and taylor_order >= 1".into()));
            }
        }
        if !self.init_gain_scale.is_finite() {
            return Err(Error::Config("train.init_gain_scale must be finite".into()));
        }
        self.training.validate(self.n_train)?;
        self.online.config.validate()?;
        if self.online.stream_len == 0 {
            return Err(Error::Config("online.stream_len must be positive".into()));
        }
        Ok(())
    }

    /// The resolved `key = value` listing, defaults included.
    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First 16 hex digits of SHA-256 over [`render`](Self::render).
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.render().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn noise(&self, inv_r2_db: f64) -> Result<NoiseSpec> {
        NoiseSpec::from_db(inv_r2_db, self.nu_db)
    }

    /// The model at one grid point.
    pub fn model_at(&self, inv_r2_db: f64) -> Result<StateSpaceModel> {
        let noise = self.noise(inv_r2_db)?;
        self.model_with(noise)
    }

    pub fn model_with(&self, noise: NoiseSpec) -> Result<StateSpaceModel> {
        Ok(match &self.model {
            ModelSpec::Linear { m, n, f, h } => {
                let f = match f {
                    Some(f) => f.clone(),
                    None => canonical_transition(*m)?,
                };
                let h = match h {
                    Some(h) => h.clone(),
                    None => canonical_observation(*n, *m)?,
                };
                let base = LinearModel::new(f, h, DMatrix::identity(*m, *m), DMatrix::identity(*n, *n))?;
                StateSpaceModel::Linear(base.with_noise(noise)?)
            }
            ModelSpec::Lorenz { dt, taylor_order } => {
                let mut model = LorenzModel::new(noise.q2, noise.r2)?;
                model.dt = *dt;
                model.taylor_order = *taylor_order;
                model.validate()?;
                StateSpaceModel::Lorenz(model)
            }
        })
    }

    /// Training settings at one grid point.
    pub fn training_at(&self, noise: &NoiseSpec) -> TrainingConfig {
        let mut cfg = self.training.clone();
        if self.gamma_scaling == GammaScaling::R2 {
            cfg.gamma *= noise.r2;
        }
        cfg
    }
}

/// Linear-scale `(q², r²)` from dB values.
pub fn noise_from_variances_db(q2_db: f64, r2_db: f64) -> Result<NoiseSpec> {
    NoiseSpec::new(from_db(q2_db), from_db(r2_db))
}
