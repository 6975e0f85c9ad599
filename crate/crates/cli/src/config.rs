//! Run configuration: preset defaults overlaid with an optional JSON file.

use std::path::Path;

use commvq::keyquant::{EmConfig, KeyQuantConfig};
use commvq::valquant::ValTrainConfig;
use commvq::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[value(name = "1bit")]
    #[serde(rename = "1bit")]
    OneBit,
    #[value(name = "2bit")]
    #[serde(rename = "2bit")]
    TwoBit,
}

impl Preset {
    /// Value bits per scalar; `N_c = bits · d`.
    pub fn value_bits(self) -> usize {
        match self {
            Preset::OneBit => 1,
            Preset::TwoBit => 2,
        }
    }

    pub fn rounds(self) -> usize {
        match self {
            Preset::OneBit => 11,
            Preset::TwoBit => 21,
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeySection {
    pub g: Option<usize>,
    pub n_levels: Option<usize>,
    pub rounds: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValueSection {
    pub n_codes: Option<usize>,
    pub hidden: Option<usize>,
    pub steps: Option<usize>,
    pub batch: Option<usize>,
    pub step_size: Option<f64>,
    pub gumbel_t_start: Option<f64>,
    pub gumbel_t_end: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmSection {
    pub soft_iters: Option<usize>,
    pub hard_iters_max: Option<usize>,
    pub t0: Option<f64>,
    pub decay: Option<f64>,
    pub tol: Option<f64>,
    pub ridge: Option<f64>,
}

/// Contents of a `--config` file. Every field is optional.
#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub d: Option<usize>,
    pub preset: Option<Preset>,
    pub key: KeySection,
    pub value: ValueSection,
    pub em: EmSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidInput(format!("config {}: {e}", path.display())))
    }
}

/// Fully resolved settings for one run.
#[derive(Clone, Debug, Serialize)]
pub struct Resolved {
    pub seed: u64,
    pub preset: Preset,
    pub key: KeyQuantConfig,
    pub n_codes: usize,
    pub value: ValTrainConfig,
    pub em: EmConfig,
}

impl Resolved {
    /// Flag values win over the file, which wins over the preset.
    pub fn build(
        file: &RunConfig,
        preset: Option<Preset>,
        seed: Option<u64>,
        d: usize,
    ) -> Result<Self> {
        let preset = preset.or(file.preset).unwrap_or(Preset::OneBit);
        let seed = seed.or(file.seed).unwrap_or(0);
        let key = KeyQuantConfig::new(
            d,
            file.key.g.unwrap_or(64.min(d / 2).max(1)),
            file.key.n_levels.unwrap_or(64),
            file.key.rounds.unwrap_or(preset.rounds()),
        )?;
        let n_codes = file.value.n_codes.unwrap_or(preset.value_bits() * d);
        if n_codes == 0 {
            return Err(Error::InvalidInput("value n_codes must be >= 1".into()));
        }
        let vd = ValTrainConfig::default();
        let value = ValTrainConfig {
            steps: file.value.steps.unwrap_or(vd.steps),
            batch: file.value.batch.unwrap_or(vd.batch),
            step_size: file.value.step_size.unwrap_or(vd.step_size),
            gumbel_t_start: file.value.gumbel_t_start.unwrap_or(vd.gumbel_t_start),
            gumbel_t_end: file.value.gumbel_t_end.unwrap_or(vd.gumbel_t_end),
            seed,
            hidden: file.value.hidden,
        };
        value.validate()?;
        let ed = EmConfig::default();
        let em = EmConfig {
            soft_iters: file.em.soft_iters.unwrap_or(ed.soft_iters),
            hard_iters_max: file.em.hard_iters_max.unwrap_or(ed.hard_iters_max),
            t0: file.em.t0.or(ed.t0),
            decay: file.em.decay.unwrap_or(ed.decay),
            tol: file.em.tol.unwrap_or(ed.tol),
            ridge: file.em.ridge.or(ed.ridge),
            seed,
            search: ed.search,
        };
        em.validate()?;
        Ok(Self {
            seed,
            preset,
            key,
            n_codes,
            value,
            em,
        })
    }
}
