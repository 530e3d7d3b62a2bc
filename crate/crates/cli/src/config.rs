//! Run configuration: one JSON document. `profile` and `preset` pick the
//! defaults; any other field given in the file overrides them.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use ssgan_core::nn::NetConfig;
use ssgan_core::trainer::{HyperParams, Preset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 32×32 grayscale, short schedule.
    Desk,
    /// 64×64 RGB, full schedule.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub n_way: usize,
    pub k_shot: usize,
    pub queries: usize,
    pub episodes: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            queries: 15,
            episodes: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub profile: Profile,
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    /// Bilinear-resize images that do not match `net.image_size`.
    pub resize: bool,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub net: NetConfig,
    pub hp: HyperParams,
    pub eval: EvalSettings,
}

impl RunConfig {
    /// Fully expanded defaults of a profile and preset.
    pub fn defaults(profile: Profile, preset: Preset) -> Self {
        let (net, hp) = match profile {
            Profile::Desk => (NetConfig::desk(), HyperParams::desk()),
            Profile::Full => (NetConfig::default(), HyperParams::full()),
        };
        Self {
            preset,
            profile,
            manifest: PathBuf::from("data/manifest.csv"),
            out_dir: PathBuf::from("runs/default"),
            resize: false,
            checkpoint_every: 500,
            log_every: 100,
            net,
            hp: hp.with_preset(preset),
            eval: EvalSettings::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text).context("config is not valid JSON")?;
        let Value::Object(user) = user else {
            bail!("config must be a JSON object");
        };
        let preset: Preset = pick(&user, "preset")?.unwrap_or(Preset::GdBT2);
        let profile: Profile = pick(&user, "profile")?.unwrap_or(Profile::Desk);
        let mut merged = serde_json::to_value(Self::defaults(profile, preset))?;
        merge(&mut merged, Value::Object(user), "")?;
        let cfg: Self = serde_json::from_value(merged).context("config field types")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.hp.validate(&self.net)?;
        let e = &self.eval;
        if e.n_way < 2 || e.k_shot < 1 || e.queries < 1 || e.episodes < 1 {
            bail!("eval: need n_way >= 2 and k_shot, queries, episodes >= 1, got {e:?}");
        }
        Ok(())
    }
}

fn pick<V: serde::de::DeserializeOwned>(map: &Map<String, Value>, key: &str) -> Result<Option<V>> {
    map.get(key)
        .map(|v| serde_json::from_value(v.clone()).with_context(|| format!("config field {key}")))
        .transpose()
}

/// Overlays `user` onto `base`, refusing keys that `base` does not have.
fn merge(base: &mut Value, user: Value, at: &str) -> Result<()> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => merge_maps(b, u, at),
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn merge_maps(base: &mut Map<String, Value>, user: Map<String, Value>, at: &str) -> Result<()> {
    for (k, v) in user {
        let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
        let slot = base.get_mut(&k).ok_or_else(|| anyhow!("unknown config field {path}"))?;
        merge(slot, v, &path)?;
    }
    Ok(())
}
