//! One TOML file holding every stage's settings and all named seeds.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cdm::{CdmConfig, CdmTrainConfig};
use crate::channel::ChannelConfig;
use crate::corpus::SynthConfig;
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::metrics::TdcfParams;
use crate::privacy::{PrivacyConfig, ShuffleMode};
use crate::probe::ProbeConfig;

/// Every random choice in a run derives from one of these.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub corpus: u64,
    pub cdm: u64,
    pub detector: u64,
    /// Root seed of random-mode shuffling; unused by inverse mode.
    pub shuffle: u64,
    pub probe: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self::from_root(0)
    }
}

impl Seeds {
    /// Distinct named seeds from one root, as set by `--seed`.
    pub fn from_root(root: u64) -> Self {
        Self {
            corpus: root,
            cdm: root.wrapping_add(1),
            detector: root.wrapping_add(2),
            shuffle: root.wrapping_add(3),
            probe: root.wrapping_add(4),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecsTable {
    /// Name → command template with `{in}` and `{out}` placeholders.
    pub external: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntelligibilityConfig {
    /// Test bonafide utterances decoded for the intelligibility proxy.
    pub utterances: usize,
}

impl Default for IntelligibilityConfig {
    fn default() -> Self {
        Self { utterances: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VeilConfig {
    pub seeds: Seeds,
    pub synth: SynthConfig,
    pub cdm: CdmConfig,
    pub cdm_train: CdmTrainConfig,
    pub detector: DetectorConfig,
    pub privacy: PrivacyConfig,
    /// Training-time channel augmentation.
    pub channel: ChannelConfig,
    pub tdcf: TdcfParams,
    pub probe: ProbeConfig,
    pub intelligibility: IntelligibilityConfig,
    pub codecs: CodecsTable,
}

impl Default for VeilConfig {
    fn default() -> Self {
        Self {
            seeds: Seeds::default(),
            synth: SynthConfig::default(),
            cdm: CdmConfig::default(),
            cdm_train: CdmTrainConfig::default(),
            detector: DetectorConfig::default(),
            privacy: PrivacyConfig::default(),
            channel: ChannelConfig::augmentation(),
            tdcf: TdcfParams::default(),
            probe: ProbeConfig::default(),
            intelligibility: IntelligibilityConfig::default(),
            codecs: CodecsTable::default(),
        }
    }
}

impl VeilConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Copy with the named seeds pushed into every stage and the external
    /// codec table merged into the channel config. All consumers read the
    /// resolved form.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.synth.seed = c.seeds.corpus;
        c.cdm_train.seed = c.seeds.cdm;
        c.probe.seed = c.seeds.probe;
        if let ShuffleMode::Random { .. } = c.privacy.mode {
            c.privacy.mode = ShuffleMode::Random { seed: c.seeds.shuffle };
        }
        for (k, v) in &c.codecs.external {
            c.channel.external.insert(k.clone(), v.clone());
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.resolved();
        c.synth.validate()?;
        c.cdm.validate()?;
        c.cdm_train.validate()?;
        c.detector.validate()?;
        c.channel.validate()?;
        c.tdcf.validate()?;
        if !c.detector.embed_dim.is_multiple_of(c.detector.heads) {
            return Err(Error::Config("detector heads must divide embed_dim".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of the resolved config, hex encoded.
    pub fn fingerprint(&self) -> Result<String> {
        let json = serde_json::to_string(&self.resolved())?;
        let digest = Sha256::digest(json.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_and_partial_files() {
        let c = VeilConfig::default();
        let back = VeilConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        let partial = VeilConfig::from_toml("[seeds]\ncorpus = 7\n[codecs.external]\ncp = \"cp {in} {out}\"\n").unwrap();
        assert_eq!(partial.seeds.corpus, 7);
        assert_eq!(partial.detector, DetectorConfig::default());
        assert_eq!(partial.resolved().channel.external["cp"], "cp {in} {out}");
        assert!(matches!(VeilConfig::from_toml("[seeds]\ncorpus = \"x\""), Err(Error::Config(_))));
    }

    #[test]
    fn seeds_reach_every_stage() {
        let mut c = VeilConfig::default();
        c.seeds = Seeds::from_root(10);
        c.privacy.mode = ShuffleMode::Random { seed: 0 };
        let r = c.resolved();
        assert_eq!((r.synth.seed, r.cdm_train.seed, r.probe.seed), (10, 11, 14));
        assert_eq!(r.privacy.mode, ShuffleMode::Random { seed: 13 });
        c.validate().unwrap();
    }

    #[test]
    fn fingerprint_tracks_every_field() {
        let base = VeilConfig::default();
        let f0 = base.fingerprint().unwrap();
        assert_eq!(f0, VeilConfig::default().fingerprint().unwrap());
        assert_eq!(f0.len(), 64);
        let mutations: Vec<Box<dyn Fn(&mut VeilConfig)>> = vec![
            Box::new(|c| c.seeds.corpus += 1),
            Box::new(|c| c.seeds.detector += 1),
            Box::new(|c| c.synth.n_utterances += 2),
            Box::new(|c| c.cdm.codebook_size /= 2),
            Box::new(|c| c.cdm_train.learning_rate *= 2.0),
            Box::new(|c| c.detector.dropout = 0.2),
            Box::new(|c| c.privacy.shuffle = false),
            Box::new(|c| c.privacy.window_frames = 25),
            Box::new(|c| c.channel.quantize_levels = 128),
            Box::new(|c| c.tdcf.c_miss = 2.0),
            Box::new(|c| c.probe.epochs += 1),
            Box::new(|c| c.intelligibility.utterances += 1),
            Box::new(|c| {
                c.codecs.external.insert("x".into(), "cp {in} {out}".into());
            }),
        ];
        let mut seen = std::collections::BTreeSet::from([f0.clone()]);
        for m in &mutations {
            let mut c = base.clone();
            m(&mut c);
            assert!(seen.insert(c.fingerprint().unwrap()), "mutation left the fingerprint unchanged");
        }
    }
}
