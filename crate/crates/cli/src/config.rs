use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};
use wsdc_core::data::{gen_gmm_split, load_cifar10, Dataset, Split};
use wsdc_core::metrics::SymbolTarget;
use wsdc_core::nn::{CodebookInit, TrainConfig};

use crate::CliError;

/// SNR in dB; `inf` (JSON string or CLI token) is the noiseless sentinel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Snr(pub f64);

impl Serialize for Snr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else {
            s.serialize_str("inf")
        }
    }
}

impl<'de> Deserialize<'de> for Snr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Snr;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an SNR in dB or the string \"inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Snr, E> {
                Ok(Snr(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Snr, E> {
                Ok(Snr(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Snr, E> {
                Ok(Snr(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Snr, E> {
                parse_snr(v).map_err(E::custom)
            }
        }
        d.deserialize_any(V)
    }
}

pub fn parse_snr(s: &str) -> Result<Snr, String> {
    let t = s.trim();
    match t.to_ascii_lowercase().as_str() {
        "inf" | "+inf" | "infinity" => Ok(Snr(f64::INFINITY)),
        _ => match t.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Snr(v)),
            _ => Err(format!("invalid SNR {s:?}; expected a number in dB or \"inf\"")),
        },
    }
}

pub fn format_snr(s: Snr) -> String {
    if s.0.is_finite() {
        format!("{}", s.0)
    } else {
        "inf".into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Gmm {
        #[serde(default = "defaults::n_classes")]
        n_classes: usize,
        #[serde(default = "defaults::dim")]
        dim: usize,
        #[serde(default = "defaults::separation")]
        separation: f64,
        #[serde(default = "defaults::per_class")]
        n_train_per_class: usize,
        #[serde(default = "defaults::per_class")]
        n_test_per_class: usize,
        /// Defaults to the run seed.
        #[serde(default)]
        seed: Option<u64>,
    },
    Cifar10 {
        dir: PathBuf,
        #[serde(default)]
        max_train: Option<usize>,
        #[serde(default)]
        max_test: Option<usize>,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Gmm {
            n_classes: defaults::n_classes(),
            dim: defaults::dim(),
            separation: defaults::separation(),
            n_train_per_class: defaults::per_class(),
            n_test_per_class: defaults::per_class(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitName {
    #[default]
    Gaussian,
    UniformBox,
    Kmeans,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SymbolTargetName {
    #[default]
    Gaussian,
    Uniform,
}

/// A single JSON experiment description. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "Q")]
    pub q: usize,
    pub epochs: usize,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    /// `null` selects `0.05 * mean(C)` per Sinkhorn solve.
    #[serde(default)]
    pub eps: Option<f64>,
    #[serde(default = "defaults::snr_train_db")]
    pub snr_train_db: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::yes")]
    pub channel_in_loop: bool,
    #[serde(default = "defaults::hidden")]
    pub encoder_hidden: Vec<usize>,
    #[serde(default = "defaults::hidden")]
    pub head_hidden: Vec<usize>,
    #[serde(default = "defaults::gaussian_std")]
    pub gaussian_std: f64,
    /// Defaults to `batch_size`.
    #[serde(default)]
    pub n_gauss: Option<usize>,
    #[serde(default)]
    pub per_q: bool,
    #[serde(default)]
    pub per_q_logits: bool,
    #[serde(default)]
    pub commitment: f64,
    #[serde(default)]
    pub codebook_init: InitName,
    #[serde(default = "defaults::ws_max_iter")]
    pub ws_max_iter: usize,
    #[serde(default = "defaults::ws_tol")]
    pub ws_tol: f64,
    #[serde(default)]
    pub augment: bool,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default = "defaults::snr_test_list")]
    pub snr_test_list: Vec<Snr>,
    #[serde(default = "defaults::alpha_list")]
    pub alpha_list: Vec<f64>,
    #[serde(default)]
    pub symbol_target: SymbolTargetName,
    /// Latent slices used by the reported transport cost.
    #[serde(default = "defaults::ot_cost_points")]
    pub ot_cost_points: usize,
}

mod defaults {
    use super::Snr;
    pub fn n_classes() -> usize {
        10
    }
    pub fn dim() -> usize {
        32
    }
    pub fn separation() -> f64 {
        6.0
    }
    pub fn per_class() -> usize {
        100
    }
    pub fn alpha() -> f64 {
        0.5
    }
    pub fn lambda() -> f64 {
        1.0
    }
    pub fn snr_train_db() -> f64 {
        12.0
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn lr() -> f64 {
        1e-3
    }
    pub fn yes() -> bool {
        true
    }
    pub fn hidden() -> Vec<usize> {
        vec![128, 128]
    }
    pub fn gaussian_std() -> f64 {
        1.0
    }
    pub fn ws_max_iter() -> usize {
        2000
    }
    pub fn ws_tol() -> f64 {
        1e-6
    }
    pub fn snr_test_list() -> Vec<Snr> {
        [4.0, 8.0, 12.0, 16.0, 20.0].into_iter().map(Snr).collect()
    }
    pub fn alpha_list() -> Vec<f64> {
        vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
    }
    pub fn ot_cost_points() -> usize {
        64
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<u8>), CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let text = std::str::from_utf8(&bytes).map_err(|_| CliError::Config(format!("config {} is not UTF-8", path.display())))?;
        Ok((Self::from_json(text)?, bytes))
    }

    /// Fills defaulted optional fields so the manifest echoes effective values.
    pub fn resolve(&mut self) {
        if self.n_gauss.is_none() {
            self.n_gauss = Some(self.batch_size);
        }
        if let DatasetConfig::Gmm { seed, .. } = &mut self.dataset {
            seed.get_or_insert(self.seed);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, msg: String| Err(CliError::Config(format!("field \"{field}\": {msg}")));
        if self.lr.is_nan() || self.lr <= 0.0 {
            return bad("lr", format!("must be > 0, got {}", self.lr));
        }
        if self.snr_test_list.is_empty() {
            return bad("snr_test_list", "must not be empty".into());
        }
        if self.snr_test_list.iter().any(|s| s.0.is_nan() || s.0 == f64::NEG_INFINITY) {
            return bad("snr_test_list", "contains an invalid value".into());
        }
        if self.alpha_list.is_empty() {
            return bad("alpha_list", "must not be empty".into());
        }
        if let Some(a) = self.alpha_list.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return bad("alpha_list", format!("{a} is outside [0, 1]"));
        }
        if self.ot_cost_points == 0 {
            return bad("ot_cost_points", "must be >= 1".into());
        }
        if let DatasetConfig::Gmm { n_classes, dim, separation, n_train_per_class, n_test_per_class, .. } = &self.dataset {
            if *n_classes < 2 || *dim < 2 || !(*separation > 0.0) || *n_train_per_class == 0 || *n_test_per_class == 0 {
                return bad("dataset", "gmm needs n_classes >= 2, dim >= 2, separation > 0 and nonempty splits".into());
            }
        }
        self.train_config().validate().map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            k: self.k,
            d: self.d,
            q: self.q,
            alpha: self.alpha,
            lambda: self.lambda,
            eps: self.eps,
            snr_train_db: self.snr_train_db,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            channel_in_loop: self.channel_in_loop,
            encoder_hidden: self.encoder_hidden.clone(),
            head_hidden: self.head_hidden.clone(),
            gaussian_std: self.gaussian_std,
            n_gauss: self.n_gauss,
            per_q: self.per_q,
            per_q_logits: self.per_q_logits,
            commitment: self.commitment,
            codebook_init: match self.codebook_init {
                InitName::Gaussian => CodebookInit::Gaussian,
                InitName::UniformBox => CodebookInit::UniformBox,
                InitName::Kmeans => CodebookInit::KMeansOnSample,
            },
            ws_max_iter: self.ws_max_iter,
            ws_tol: self.ws_tol,
            augment: self.augment,
        }
    }

    pub fn symbol_target(&self) -> SymbolTarget {
        match self.symbol_target {
            SymbolTargetName::Gaussian => SymbolTarget::Gaussian,
            SymbolTargetName::Uniform => SymbolTarget::Uniform,
        }
    }

    /// Training and test splits.
    pub fn datasets(&self) -> Result<(Dataset, Dataset), CliError> {
        match &self.dataset {
            DatasetConfig::Gmm { n_classes, dim, separation, n_train_per_class, n_test_per_class, seed } => {
                let seed = seed.unwrap_or(self.seed);
                let train = gen_gmm_split(*n_classes, *dim, *separation, *n_train_per_class, seed, Split::Train)?;
                let test = gen_gmm_split(*n_classes, *dim, *separation, *n_test_per_class, seed, Split::Test)?;
                Ok((train, test))
            }
            DatasetConfig::Cifar10 { dir, max_train, max_test } => {
                let mut train = load_cifar10(dir, Split::Train)?;
                let mut test = load_cifar10(dir, Split::Test)?;
                if let Some(n) = max_train {
                    train = train.truncated(*n);
                }
                if let Some(n) = max_test {
                    test = test.truncated(*n);
                }
                Ok((train, test))
            }
        }
    }

    /// Files the run reads besides the config itself.
    pub fn input_files(&self) -> Vec<PathBuf> {
        match &self.dataset {
            DatasetConfig::Gmm { .. } => Vec::new(),
            DatasetConfig::Cifar10 { dir, .. } => wsdc_core::data::CIFAR_TRAIN_FILES
                .iter()
                .chain(std::iter::once(&wsdc_core::data::CIFAR_TEST_FILE))
                .map(|f| dir.join(f))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"K": 16, "D": 4, "Q": 2, "epochs": 2}"#).unwrap();
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.snr_train_db, 12.0);
        assert_eq!(cfg.dataset, DatasetConfig::default());
        assert_eq!(cfg.snr_test_list.len(), 5);
        cfg.validate().unwrap();
    }

    #[test]
    fn missing_and_unknown_fields() {
        let e = ExperimentConfig::from_json(r#"{"D": 4, "Q": 2, "epochs": 2}"#).unwrap_err();
        assert!(e.to_string().contains("`K`"), "{e}");
        let e = ExperimentConfig::from_json(r#"{"K": 16, "D": 4, "Q": 2, "epochs": 2, "learning_rate": 0.1}"#).unwrap_err();
        assert!(e.to_string().contains("learning_rate"), "{e}");
        let e = ExperimentConfig::from_json(r#"{"K": 16, "D": 4, "Q": 2, "epochs": 2, "dataset": {"kind": "gmm", "dims": 3}}"#).unwrap_err();
        assert!(e.to_string().contains("dims"), "{e}");
    }

    #[test]
    fn snr_tokens() {
        let cfg = ExperimentConfig::from_json(r#"{"K": 4, "D": 1, "Q": 1, "epochs": 1, "snr_test_list": [4, 8.5, "inf"]}"#).unwrap();
        assert_eq!(cfg.snr_test_list, vec![Snr(4.0), Snr(8.5), Snr(f64::INFINITY)]);
        let back = serde_json::to_string(&cfg.snr_test_list).unwrap();
        assert_eq!(back, r#"[4.0,8.5,"inf"]"#);
        assert!(parse_snr("loud").is_err());
    }

    #[test]
    fn invalid_values_name_the_field() {
        let mut cfg = ExperimentConfig::from_json(r#"{"K": 16, "D": 4, "Q": 2, "epochs": 2}"#).unwrap();
        cfg.lr = 0.0;
        assert!(cfg.validate().unwrap_err().to_string().contains("\"lr\""));
        cfg.lr = 1e-3;
        cfg.k = 32;
        assert!(cfg.validate().is_err());
    }
}
