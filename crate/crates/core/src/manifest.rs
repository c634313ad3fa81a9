//! Flat `key=value` text files: run manifests and configuration files.
//!
//! Lines starting with `#` and blank lines are ignored. Keys keep their
//! insertion order when rendered.

use std::fs;
use std::path::Path;

use crate::data::{MixtureSpec, RNG_ALGORITHM};
use crate::error::{Error, Result};
use crate::trainer::{TrainConfig, INIT_SCHEME};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets `key`, replacing an earlier value in place.
    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key, value)),
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut m = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected key=value, got {line:?}"),
                });
            };
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: "empty key".into(),
                });
            }
            m.set(k, v.trim());
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}

/// Short human label for a model trained with smoothing `alpha`.
pub fn model_label(alpha: f64) -> String {
    if alpha == 0.0 {
        "CE".to_string()
    } else {
        format!("LS a={alpha}")
    }
}

/// Everything needed to rerun one training job.
pub fn training_manifest(spec: &MixtureSpec, tcfg: &TrainConfig, n_train: usize) -> Manifest {
    let sizes = tcfg.layer_sizes(spec.dim(), spec.num_classes());
    let arch: Vec<String> = sizes.iter().map(|s| s.to_string()).collect();
    let mut m = Manifest::new();
    m.set("label", model_label(tcfg.alpha))
        .set("seed", tcfg.seed)
        .set("alpha", tcfg.alpha)
        .set("architecture", format!("mlp {} relu", arch.join("-")))
        .set("optimiser", "sgd-momentum constant-lr")
        .set("epochs", tcfg.epochs)
        .set("batch_size", tcfg.batch_size)
        .set("learning_rate", tcfg.learning_rate)
        .set("momentum", tcfg.momentum)
        .set("weight_decay", tcfg.weight_decay)
        .set("init_scheme", INIT_SCHEME)
        .set("n_train", n_train)
        .set("dataset_spec", spec.canonical())
        .set("dataset_spec_hash", spec.hash_hex())
        .set("rng_algorithm", RNG_ALGORITHM);
    m
}
