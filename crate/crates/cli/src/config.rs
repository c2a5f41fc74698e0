//! `key = value` run configuration files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pocketgroove::models::{ConditionFlags, ModelConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub flags: ConditionFlags,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub vae: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            model: ModelConfig::full(),
            flags: ConditionFlags::default(),
            manifest: None,
            out: None,
            vae: None,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| anyhow::anyhow!("`{key}`: cannot parse `{v}`"))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("`{key}`: expected true or false, got `{v}`"),
    }
}

fn pair(key: &str, v: &str) -> Result<[usize; 2]> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        bail!("`{key}`: expected two comma-separated integers, got `{v}`");
    }
    Ok([num(key, parts[0])?, num(key, parts[1])?])
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v)
}

impl RunConfig {
    /// Parse config text. Relative paths resolve against `base`. A `preset`
    /// line must come before any model-size key it should not overwrite.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut c = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected `key = value`", lineno + 1))?;
            let key = key.trim();
            let v = unquote(value.trim());
            c.set(key, v, base).with_context(|| format!("line {}", lineno + 1))?;
        }
        c.train.validate()?;
        c.model.validate()?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).with_context(|| format!("in {}", path.display()))
    }

    fn set(&mut self, key: &str, v: &str, base: &Path) -> Result<()> {
        let t = &mut self.train;
        let m = &mut self.model;
        match key {
            "steps" => t.steps = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "learning_rate" => t.learning_rate = num(key, v)?,
            "seed" => t.seed = num(key, v)?,
            "beta_target" => t.beta_target = num(key, v)?,
            "beta1_cb" => t.beta1_cb = num(key, v)?,
            "beta2_cmt" => t.beta2_cmt = num(key, v)?,
            "tf_start" => t.tf_start = num(key, v)?,
            "tf_end" => t.tf_end = num(key, v)?,
            "checkpoint_every" => t.checkpoint_every = num(key, v)?,
            "use_genre" => self.flags.use_genre = boolean(key, v)?,
            "use_patterns" => self.flags.use_patterns = boolean(key, v)?,
            "preset" => {
                *m = match v {
                    "full" => ModelConfig::full(),
                    "desk" => ModelConfig::desk(),
                    "tiny" => ModelConfig::tiny(),
                    _ => bail!("`preset`: expected full, desk or tiny, got `{v}`"),
                }
            }
            "skel_hidden" => m.skel_hidden = num(key, v)?,
            "note_hidden" => m.note_hidden = num(key, v)?,
            "conv_channels" => m.conv_channels = pair(key, v)?,
            "code_dim" => m.code_dim = num(key, v)?,
            "codebook_size" => m.codebook_size = num(key, v)?,
            "groove_hidden" => m.groove_hidden = num(key, v)?,
            "latent_dim" => m.latent_dim = num(key, v)?,
            "decoder_hidden" => m.decoder_hidden = num(key, v)?,
            "decoder_layers" => m.decoder_layers = num(key, v)?,
            "prior_hidden" => m.prior_hidden = num(key, v)?,
            "prior_layers" => m.prior_layers = num(key, v)?,
            "prior_embed" => m.prior_embed = num(key, v)?,
            "classifier_hidden" => m.classifier_hidden = num(key, v)?,
            "classifier_layers" => m.classifier_layers = num(key, v)?,
            "manifest" => self.manifest = Some(base.join(v)),
            "out" => self.out = Some(base.join(v)),
            "vae" => self.vae = Some(base.join(v)),
            _ => bail!("unknown key `{key}`"),
        }
        Ok(())
    }
}
