//! Run configuration, its JSON schema and the resolved-config hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::loss::{ClassWeights, JointLossConfig};
use crate::motion::SeverityPreset;
use crate::net::NetConfig;
use crate::real::Precision;

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "DABSEG_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Where cases come from. With `root` unset the run synthesizes
/// `phantoms` cases in memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset directory in the `<case>/<case>_<modality>.nii` layout.
    pub root: Option<PathBuf>,
    /// Suffix of the degraded modality files (`<case>_<tag>_<suffix>.nii`);
    /// `None` trains on the clean files.
    pub degraded_suffix: Option<String>,
    /// Split manifest; when absent the cases are split by `split_ratios`.
    pub manifest: Option<PathBuf>,
    pub split_ratios: [f64; 3],
    pub phantoms: usize,
    pub phantom_size: usize,
    /// Motion severity preset (builtin name or file) for in-memory phantoms.
    pub severity: String,
    pub per_modality_motion: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            degraded_suffix: Some("S2".into()),
            manifest: None,
            split_ratios: [8.0, 1.0, 1.0],
            phantoms: 20,
            phantom_size: 48,
            severity: "S2".into(),
            per_modality_motion: false,
        }
    }
}

/// The four switches that define an ablation variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantFlags {
    pub use_fdmds: bool,
    pub lambda_rec: f64,
    pub et_weight: bool,
    pub literal_eq3: bool,
}

/// Everything that determines a training run.
///
/// Paper-scale values are 250 epochs, 128^3 patches and embedding width 32;
/// the defaults are the desk-scale ones (60 epochs, 32^3 patches of 48^3
/// phantoms, width 16).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Optimizer steps per epoch; 0 means one step per training case.
    pub steps_per_epoch: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub patch_size: [usize; 3],
    pub seed: u64,
    pub precision: Precision,
    pub net: NetConfig,
    pub loss: JointLossConfig,
    pub et_weight: bool,
    /// Weights used when `et_weight` is set; defaults to `(2, 1, 1)` from
    /// half of the epochs on.
    pub class_weights: Option<ClassWeights>,
    /// Feed the clean volume instead of the degraded one with probability 1/2.
    pub mix_clean: bool,
    pub adam: AdamConfig,
    /// Write `ckpt_<epoch>.bin` every this many epochs (0 = only the last).
    pub checkpoint_every: usize,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            steps_per_epoch: 0,
            lr0: 1e-4,
            lr_min: 0.0,
            batch_size: 1,
            patch_size: [32; 3],
            seed: 0,
            precision: Precision::F32,
            net: NetConfig::desk(),
            loss: JointLossConfig::default(),
            et_weight: true,
            class_weights: None,
            mix_clean: false,
            adam: AdamConfig::default(),
            checkpoint_every: 10,
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn flags(&self) -> VariantFlags {
        VariantFlags {
            use_fdmds: self.net.use_fdmds,
            lambda_rec: self.loss.lambda_rec,
            et_weight: self.et_weight,
            literal_eq3: self.net.fdmds.literal_eq3,
        }
    }

    pub fn set_flags(&mut self, f: VariantFlags) {
        self.net.use_fdmds = f.use_fdmds;
        self.loss.lambda_rec = f.lambda_rec;
        self.et_weight = f.et_weight;
        self.net.fdmds.literal_eq3 = f.literal_eq3;
    }

    /// Class weights in force, or `None` for uniform weighting throughout.
    pub fn class_weights(&self) -> Option<ClassWeights> {
        self.et_weight.then(|| {
            self.class_weights
                .unwrap_or_else(|| ClassWeights::et_emphasis(self.epochs))
        })
    }

    /// Whether training ever reads the clean reference volumes.
    pub fn needs_clean(&self) -> bool {
        self.mix_clean || self.reconstructs()
    }

    /// Whether the reconstruction term contributes to the loss.
    pub fn reconstructs(&self) -> bool {
        self.net.use_fdmds && self.loss.lambda_rec > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.net.validate()?;
        self.loss.validate()?;
        if let Some(w) = self.class_weights {
            w.validate()?;
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size != 1 {
            return bad(format!(
                "batch_size {} unsupported; training uses one patch per step",
                self.batch_size
            ));
        }
        if !(self.lr0.is_finite()
            && self.lr0 > 0.0
            && self.lr_min >= 0.0
            && self.lr_min <= self.lr0)
        {
            return bad(format!(
                "need 0 <= lr_min <= lr0 with lr0 > 0, got {} / {}",
                self.lr_min, self.lr0
            ));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad(format!("invalid Adam settings {a:?}"));
        }
        self.net
            .check_patch(self.patch_size)
            .map_err(|e| Error::Config(e.to_string()))?;
        if !self.net.use_fdmds && self.loss.lambda_rec != 0.0 {
            return bad("lambda_rec must be 0 when FDMDS is disabled".into());
        }
        let d = &self.data;
        if d.root.is_none() {
            if d.phantoms == 0 {
                return bad("no dataset root and no phantoms to synthesize".into());
            }
            if self.patch_size.iter().any(|&p| p > d.phantom_size) {
                return bad(format!(
                    "patch {:?} exceeds phantom size {}",
                    self.patch_size, d.phantom_size
                ));
            }
            SeverityPreset::resolve(&d.severity)?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }

    /// Applies `DABSEG_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| {
                Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
            })?;
        }
        Ok(())
    }

    /// Writes `config.json` and `config.sha256` into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("config.json");
        std::fs::write(&p, self.to_json()).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("config.sha256");
        std::fs::write(&p, format!("{}\n", self.hash())).map_err(|e| Error::io(&p, e))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        let back = TrainConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c = TrainConfig::from_json(r#"{"epochs": 3, "seed": 9}"#).unwrap();
        assert_eq!((c.epochs, c.seed, c.lr0), (3, 9, 1e-4));
        assert_ne!(c.hash(), TrainConfig::default().hash());
    }

    #[test]
    fn rejects_bad_patch_and_rec_without_stem() {
        let mut c = TrainConfig {
            patch_size: [24; 3],
            ..TrainConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.patch_size = [32; 3];
        c.net.use_fdmds = false;
        assert!(c.validate().is_err());
        c.loss.lambda_rec = 0.0;
        c.validate().unwrap();
        assert!(!c.needs_clean());
    }
}
