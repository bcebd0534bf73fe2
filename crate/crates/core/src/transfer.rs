//! Layer-wise transfer of a trained model to a new magnification.
//!
//! The target model starts as a copy of the source. Each hidden layer is either
//! frozen at its source values (bit 0) or fine-tuned on the target data (bit 1).
//! There is no pre-training on the target.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Patch;
use crate::nn::TrainConfig;
use crate::sda::{self, SdaModel};

/// Per-layer reuse code, first hidden layer first. `true` means fine-tune.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TlSetting {
    code: Vec<bool>,
}

impl TlSetting {
    pub fn new(code: Vec<bool>) -> Result<Self> {
        if code.is_empty() {
            return Err(Error::param("setting", "empty code"));
        }
        Ok(Self { code })
    }

    pub fn code(&self) -> &[bool] {
        &self.code
    }

    pub fn len(&self) -> usize {
        self.code.len()
    }

    pub fn is_empty(&self) -> bool {
        self.code.is_empty()
    }
}

impl fmt::Display for TlSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.code {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for TlSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().trim_start_matches('[').trim_end_matches(']');
        let code = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::param("setting", format!("unexpected `{other}` in code"))),
            })
            .collect::<Result<Vec<_>>>()?;
        TlSetting::new(code)
    }
}

impl Serialize for TlSetting {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TlSetting {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferOptions {
    /// Keep the source output layer and never train it.
    pub freeze_output: bool,
}

/// Copies `source`, re-initializes its output layer from `config.seed` and
/// fine-tunes the layers `setting` opens on the target patches.
pub fn transfer(
    source: &SdaModel,
    target_train: &[Patch],
    setting: &TlSetting,
    config: &TrainConfig,
    options: TransferOptions,
) -> Result<SdaModel> {
    source.validate()?;
    if setting.len() != source.hidden.len() {
        return Err(Error::DimensionMismatch(format!(
            "setting {setting} has {} bits, source model has {} hidden layers",
            setting.len(),
            source.hidden.len()
        )));
    }
    if let Some(p) = target_train.iter().find(|p| p.side != source.patch_side) {
        return Err(Error::DimensionMismatch(format!(
            "target patch side {} differs from source {}",
            p.side, source.patch_side
        )));
    }
    let mut target = copy_for_target(source, config.seed, options);
    target.metadata.history.finetune.clear();
    target.metadata.seed = config.seed;
    sda::fine_tune(
        &target,
        target_train,
        config,
        setting.code(),
        !options.freeze_output,
    )
}

/// The model fine-tuning starts from: source hidden layers, fresh output layer.
pub fn copy_for_target(source: &SdaModel, seed: u64, options: TransferOptions) -> SdaModel {
    let mut target = source.clone();
    if !options.freeze_output {
        let n = source.hidden.last().map_or(0, |l| l.n_hidden());
        target.output = SdaModel::fresh_output(n, seed);
    }
    target
}

/// The reuse settings evaluated for an `n`-layer network.
///
/// Suffix codes (reuse the first `k` layers, fine-tune the rest), then prefix
/// codes (fine-tune the first `k`, freeze the rest), then all-ones. For three
/// layers this is `011, 001, 110, 100, 111`.
pub fn all_settings(n_hidden: usize) -> Result<Vec<TlSetting>> {
    if n_hidden == 0 {
        return Err(Error::param("n_hidden", "must be at least 1"));
    }
    let mut out = Vec::new();
    for reused in 1..n_hidden {
        out.push((0..n_hidden).map(|i| i >= reused).collect());
    }
    for tuned in (1..n_hidden).rev() {
        out.push((0..n_hidden).map(|i| i < tuned).collect());
    }
    out.push(vec![true; n_hidden]);
    out.into_iter().map(TlSetting::new).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::PatchLabel;

    fn patches(n: usize) -> Vec<Patch> {
        (0..n)
            .map(|i| {
                let v = if i % 2 == 0 { 0.1 } else { 0.9 };
                let label = if i % 2 == 0 {
                    PatchLabel::Particle
                } else {
                    PatchLabel::Background
                };
                Patch::new(3, vec![v; 9], (0.0, 0.0)).unwrap().with_label(label)
            })
            .collect()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 0.5,
            epochs,
            batch_size: 4,
            seed: 21,
        }
    }

    #[test]
    fn parse_and_display() {
        let s: TlSetting = "011".parse().unwrap();
        assert_eq!(s.code(), &[false, true, true]);
        assert_eq!(s.to_string(), "011");
        assert_eq!("[110]".parse::<TlSetting>().unwrap().to_string(), "110");
        assert!("01x".parse::<TlSetting>().is_err());
        assert!("".parse::<TlSetting>().is_err());
    }

    #[test]
    fn three_layer_settings_match_table() {
        let codes: Vec<String> = all_settings(3).unwrap().iter().map(|s| s.to_string()).collect();
        assert_eq!(codes, ["011", "001", "110", "100", "111"]);
        let one: Vec<String> = all_settings(1).unwrap().iter().map(|s| s.to_string()).collect();
        assert_eq!(one, ["1"]);
        assert!(all_settings(0).is_err());
        for n in 1..6 {
            assert!(all_settings(n).unwrap().iter().all(|s| s.len() == n));
        }
    }

    #[test]
    fn zero_epochs_copies_hidden_layers() {
        let source = SdaModel::init(3, &[4, 4, 4], 5).unwrap();
        for code in ["000", "111"] {
            let out = transfer(&source, &patches(8), &code.parse().unwrap(), &cfg(0), Default::default())
                .unwrap();
            assert_eq!(out.hidden, source.hidden);
            assert_eq!(out.output, SdaModel::fresh_output(4, 21));
        }
    }

    #[test]
    fn frozen_layers_survive_training() {
        let source = SdaModel::init(3, &[4, 4, 4], 5).unwrap();
        let out = transfer(&source, &patches(8), &"001".parse().unwrap(), &cfg(5), Default::default())
            .unwrap();
        assert_eq!(out.hidden[0], source.hidden[0]);
        assert_eq!(out.hidden[1], source.hidden[1]);
        assert_ne!(out.hidden[2], source.hidden[2]);
    }

    #[test]
    fn freeze_output_reproduces_literal_all_zero() {
        let source = SdaModel::init(3, &[4, 4], 5).unwrap();
        let out = transfer(
            &source,
            &patches(8),
            &"00".parse().unwrap(),
            &cfg(5),
            TransferOptions { freeze_output: true },
        )
        .unwrap();
        assert_eq!(out.hidden, source.hidden);
        assert_eq!(out.output, source.output);
    }

    #[test]
    fn mismatches_rejected() {
        let source = SdaModel::init(3, &[4, 4, 4], 5).unwrap();
        assert!(transfer(&source, &patches(4), &"01".parse().unwrap(), &cfg(1), Default::default()).is_err());
        let wrong = vec![Patch::new(2, vec![0.5; 4], (0.0, 0.0)).unwrap().with_label(PatchLabel::Particle)];
        assert!(transfer(&source, &wrong, &"111".parse().unwrap(), &cfg(1), Default::default()).is_err());
    }
}
