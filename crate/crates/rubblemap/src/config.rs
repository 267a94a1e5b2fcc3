//! Pipeline configuration: defaults, key=value file parsing, flag
//! overrides, validation, and the content hash that ties persisted
//! artifacts to the configuration that produced them.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::format::fingerprint_hex;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassWeighting {
    On,
    Off,
    /// Cross-validation runs both variants and reports them side by side.
    Both,
}

impl ClassWeighting {
    fn parse(s: &str) -> Result<ClassWeighting> {
        match s {
            "on" => Ok(ClassWeighting::On),
            "off" => Ok(ClassWeighting::Off),
            "both" => Ok(ClassWeighting::Both),
            other => Err(Error::Config(format!(
                "class_weighting must be on|off|both, got {other}"
            ))),
        }
    }

    fn as_str(&self) -> &'static str {
        match self {
            ClassWeighting::On => "on",
            ClassWeighting::Off => "off",
            ClassWeighting::Both => "both",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub manifest: PathBuf,
    pub model_dir: PathBuf,
    pub gmm_k: usize,
    pub gmm_max_descriptors: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub min_area: usize,
    pub crf_iters: usize,
    pub crf_tol: f64,
    pub theta_pos: f64,
    pub theta_int: f64,
    pub kernel_weights: (f64, f64),
    pub svm_c: f64,
    pub svm_epochs: usize,
    pub unary_lr: f64,
    pub unary_epochs: usize,
    pub unary_samples_per_image: usize,
    pub class_weighting: ClassWeighting,
    pub folds: usize,
    pub seed: u64,
    /// Optional per-image descriptor imports (<image stem>.nzrd files).
    pub descriptor_dir: Option<PathBuf>,
    /// Optional per-image probability-field imports (<image stem>.nzrp).
    pub probs_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> PipelineConfig {
        PipelineConfig {
            manifest: PathBuf::from("corpus/manifest.json"),
            model_dir: PathBuf::from("models"),
            gmm_k: 64,
            gmm_max_descriptors: 20_000,
            patch_size: 7,
            stride: 3,
            min_area: 25,
            crf_iters: 10,
            crf_tol: 1e-3,
            theta_pos: 2.0,
            theta_int: 0.2,
            kernel_weights: (0.08, 0.12),
            svm_c: 1.0,
            svm_epochs: 300,
            unary_lr: 1.0,
            unary_epochs: 150,
            unary_samples_per_image: 600,
            class_weighting: ClassWeighting::On,
            folds: 5,
            seed: 7,
            descriptor_dir: None,
            probs_dir: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value for {key}: {value}")))
}

impl PipelineConfig {
    /// Applies one key=value setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "manifest" => self.manifest = PathBuf::from(value),
            "model_dir" => self.model_dir = PathBuf::from(value),
            "gmm_k" => self.gmm_k = parse_num(key, value)?,
            "gmm_max_descriptors" => self.gmm_max_descriptors = parse_num(key, value)?,
            "patch_size" => self.patch_size = parse_num(key, value)?,
            "stride" => self.stride = parse_num(key, value)?,
            "min_area" => self.min_area = parse_num(key, value)?,
            "crf_iters" => self.crf_iters = parse_num(key, value)?,
            "crf_tol" => self.crf_tol = parse_num(key, value)?,
            "theta_pos" => self.theta_pos = parse_num(key, value)?,
            "theta_int" => self.theta_int = parse_num(key, value)?,
            "kernel_weights" => {
                let parts: Vec<&str> = value.split(',').collect();
                if parts.len() != 2 {
                    return Err(Error::Config(format!(
                        "kernel_weights wants w1,w2, got {value}"
                    )));
                }
                self.kernel_weights =
                    (parse_num(key, parts[0].trim())?, parse_num(key, parts[1].trim())?);
            }
            "svm_c" => self.svm_c = parse_num(key, value)?,
            "svm_epochs" => self.svm_epochs = parse_num(key, value)?,
            "unary_lr" => self.unary_lr = parse_num(key, value)?,
            "unary_epochs" => self.unary_epochs = parse_num(key, value)?,
            "unary_samples_per_image" => self.unary_samples_per_image = parse_num(key, value)?,
            "class_weighting" => self.class_weighting = ClassWeighting::parse(value)?,
            "folds" => self.folds = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "descriptor_dir" => self.descriptor_dir = Some(PathBuf::from(value)),
            "probs_dir" => self.probs_dir = Some(PathBuf::from(value)),
            other => return Err(Error::Config(format!("unknown config key {other}"))),
        }
        Ok(())
    }

    /// Loads a plain key=value file ('#' starts a comment).
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        cfg.merge_file(path)?;
        Ok(cfg)
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected key=value, got {line}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.gmm_k == 0 {
            return Err(Error::Config("gmm_k must be >= 1".into()));
        }
        if self.patch_size % 2 == 0 || self.patch_size == 0 {
            return Err(Error::Config("patch_size must be odd".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        if !(self.crf_tol >= 0.0) {
            return Err(Error::Config("crf_tol must be >= 0".into()));
        }
        if !(self.theta_pos > 0.0) || !(self.theta_int > 0.0) {
            return Err(Error::Config("kernel bandwidths must be positive".into()));
        }
        if !(self.kernel_weights.0 > 0.0) || !(self.kernel_weights.1 > 0.0) {
            return Err(Error::Config("kernel weights must be positive".into()));
        }
        if !(self.svm_c > 0.0) {
            return Err(Error::Config("svm_c must be positive".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("folds must be >= 2".into()));
        }
        if self.unary_samples_per_image == 0 {
            return Err(Error::Config("unary_samples_per_image must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical one-line-per-key rendering; the hash input. Paths are
    /// excluded so moving a corpus or model directory does not invalidate
    /// artifacts trained with identical parameters.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "class_weighting={}", self.class_weighting.as_str());
        let _ = writeln!(s, "crf_iters={}", self.crf_iters);
        let _ = writeln!(s, "crf_tol={}", self.crf_tol);
        let _ = writeln!(s, "folds={}", self.folds);
        let _ = writeln!(s, "gmm_k={}", self.gmm_k);
        let _ = writeln!(s, "gmm_max_descriptors={}", self.gmm_max_descriptors);
        let _ = writeln!(s, "kernel_weights={},{}", self.kernel_weights.0, self.kernel_weights.1);
        let _ = writeln!(s, "min_area={}", self.min_area);
        let _ = writeln!(s, "patch_size={}", self.patch_size);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "stride={}", self.stride);
        let _ = writeln!(s, "svm_c={}", self.svm_c);
        let _ = writeln!(s, "svm_epochs={}", self.svm_epochs);
        let _ = writeln!(s, "theta_int={}", self.theta_int);
        let _ = writeln!(s, "theta_pos={}", self.theta_pos);
        let _ = writeln!(s, "unary_epochs={}", self.unary_epochs);
        let _ = writeln!(s, "unary_lr={}", self.unary_lr);
        let _ = writeln!(s, "unary_samples_per_image={}", self.unary_samples_per_image);
        s
    }

    pub fn hash(&self) -> String {
        fingerprint_hex(self.canonical().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        PipelineConfig::default().validate().unwrap();
    }

    #[test]
    fn file_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(
            &path,
            "# comment\ngmm_k = 8\nkernel_weights = 0.4, 0.9\nclass_weighting=both\n",
        )
        .unwrap();
        let mut cfg = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg.gmm_k, 8);
        assert_eq!(cfg.kernel_weights, (0.4, 0.9));
        assert_eq!(cfg.class_weighting, ClassWeighting::Both);
        cfg.set("gmm_k", "16").unwrap();
        assert_eq!(cfg.gmm_k, 16);
        assert!(cfg.set("nonsense", "1").is_err());
    }

    #[test]
    fn hash_tracks_parameters_not_paths() {
        let mut a = PipelineConfig::default();
        let mut b = PipelineConfig::default();
        b.manifest = PathBuf::from("elsewhere.json");
        assert_eq!(a.hash(), b.hash());
        a.gmm_k = 3;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn invalid_settings_rejected() {
        let mut cfg = PipelineConfig::default();
        cfg.patch_size = 6;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::default();
        cfg.svm_c = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::default();
        cfg.folds = 1;
        assert!(cfg.validate().is_err());
    }
}
