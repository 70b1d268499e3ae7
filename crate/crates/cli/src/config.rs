//! Run configuration: one JSON document mirroring the library configs plus input paths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use splatfix::pipeline::PipelineConfig;
use splatfix::synth::{CorruptSpec, SynthSpec};
use splatfix::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// `oracle`, `noisy-oracle`, `identity`, `prior` or `bridge:<dir>`.
    pub kind: String,
    /// Perturbation scale of `noisy-oracle`, prior spread of `prior`.
    pub spread: f64,
    pub bridge_timeout_secs: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            kind: "noisy-oracle".into(),
            spread: 0.05,
            bridge_timeout_secs: 600.0,
        }
    }
}

/// Input locations. Camera files are JSON; image directories hold `view_<i>.pfm`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Inputs {
    /// Scene JSON or 3DGS PLY.
    pub scene: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub train_images: Option<PathBuf>,
    pub trajectory: Option<PathBuf>,
    pub trajectory_images: Option<PathBuf>,
    /// Image directories compared by `eval`.
    pub predicted: Option<PathBuf>,
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub synth: SynthSpec,
    pub corrupt: CorruptSpec,
    pub denoiser: DenoiserConfig,
    pub inputs: Inputs,
    /// Seeds run by `ablate`, one case per seed.
    pub ablation_seeds: Vec<u64>,
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn check(&self) -> Result<()> {
        self.pipeline.check()?;
        let kind = self.denoiser.kind.as_str();
        if !(matches!(kind, "oracle" | "noisy-oracle" | "identity" | "prior") || kind.starts_with("bridge:")) {
            return Err(Error::UnknownKind(format!("denoiser `{kind}`")));
        }
        if !(self.denoiser.spread >= 0.0 && self.denoiser.spread.is_finite()) {
            return Err(Error::Config(format!("denoiser spread must be >= 0, got {}", self.denoiser.spread)));
        }
        if self.denoiser.bridge_timeout_secs.is_nan() || self.denoiser.bridge_timeout_secs <= 0.0 {
            return Err(Error::Config("bridge timeout must be positive".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parses `lo,mid,hi`.
pub fn parse_gamma(text: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let bad = || Error::Config(format!("expected three comma-separated gamma levels, got `{text}`"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| bad())?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"pipeline": {"sed": 3}}"#);
        assert!(err.is_err());
        let ok: RunConfig = serde_json::from_str(r#"{"pipeline": {"seed": 3}}"#).unwrap();
        assert_eq!(ok.pipeline.seed, 3);
    }

    #[test]
    fn round_trips() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn gamma_parsing() {
        assert_eq!(parse_gamma("0.001, 0.01,0.1").unwrap(), [0.001, 0.01, 0.1]);
        assert!(parse_gamma("1,2").is_err());
        assert!(parse_gamma("a,b,c").is_err());
    }
}
