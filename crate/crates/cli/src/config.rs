//! Flat `key = value` training configuration.

use std::str::FromStr;

use formparse::{ModelConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab_min_count: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            vocab_min_count: 1,
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("{key}: cannot parse {value:?}"))
}

fn flag(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("{key}: expected a boolean, got {value:?}")),
    }
}

impl Settings {
    pub const KEYS: &'static [&'static str] = &[
        "lr",
        "beta1",
        "beta2",
        "eps",
        "weight_decay",
        "warmup_fraction",
        "batch_size",
        "epochs",
        "max_steps",
        "clip_norm",
        "seed",
        "soft_label",
        "soft_label_start",
        "soft_label_warm",
        "checkpoint_every",
        "re_threshold",
        "d_model",
        "layers",
        "heads",
        "ffn_mult",
        "max_sequence",
        "coord_buckets",
        "visual_dim",
        "dropout",
        "d_label",
        "d_biaff",
        "use_decoder",
        "scale_soft_by_labels",
        "head_dropout",
        "label_set",
        "vocab_min_count",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let (t, m) = (&mut self.train, &mut self.model);
        match key {
            "lr" => t.lr = num(key, value)?,
            "beta1" => t.beta1 = num(key, value)?,
            "beta2" => t.beta2 = num(key, value)?,
            "eps" => t.eps = num(key, value)?,
            "weight_decay" => t.weight_decay = num(key, value)?,
            "warmup_fraction" => t.warmup_fraction = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "epochs" => t.epochs = num(key, value)?,
            "max_steps" => t.max_steps = if value == "none" { None } else { Some(num(key, value)?) },
            "clip_norm" => t.clip_norm = num(key, value)?,
            "seed" => {
                t.seed = num(key, value)?;
                m.init_seed = t.seed;
            }
            "soft_label" => t.soft_label.enabled = flag(key, value)?,
            "soft_label_start" => t.soft_label.ep_start = num(key, value)?,
            "soft_label_warm" => t.soft_label.ep_warm = num(key, value)?,
            "checkpoint_every" => t.checkpoint_every = num(key, value)?,
            "re_threshold" => t.re_threshold = num(key, value)?,
            "d_model" => m.encoder.d_model = num(key, value)?,
            "layers" => m.encoder.layers = num(key, value)?,
            "heads" => m.encoder.heads = num(key, value)?,
            "ffn_mult" => m.encoder.ffn_mult = num(key, value)?,
            "max_sequence" => m.encoder.max_len = num(key, value)?,
            "coord_buckets" => m.encoder.coord_buckets = num(key, value)?,
            "visual_dim" => m.encoder.visual_dim = num(key, value)?,
            "dropout" => m.encoder.dropout = num(key, value)?,
            "d_label" => m.heads.d_label = num(key, value)?,
            "d_biaff" => m.heads.d_biaff = num(key, value)?,
            "use_decoder" => m.heads.use_decoder = flag(key, value)?,
            "scale_soft_by_labels" => m.heads.scale_soft_by_labels = flag(key, value)?,
            "head_dropout" => m.heads.dropout = num(key, value)?,
            "label_set" => m.label_set = value.to_string(),
            "vocab_min_count" => self.vocab_min_count = num(key, value)?,
            _ => return Err(format!("unknown key {key:?}; known keys: {}", Self::KEYS.join(", "))),
        }
        Ok(())
    }

    /// Applies every `key = value` line; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), String> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", n + 1))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| format!("line {}: {e}", n + 1))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_comments() {
        let mut s = Settings::default();
        s.apply_text("# desk scale\nlr = 0.003\nepochs=60  # short\n\nsoft_label = off\nseed = 9\n")
            .unwrap();
        assert_eq!(s.train.lr, 0.003);
        assert_eq!(s.train.epochs, 60);
        assert!(!s.train.soft_label.enabled);
        assert_eq!((s.train.seed, s.model.init_seed), (9, 9));
        assert_eq!(s.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn every_key_is_accepted() {
        for key in Settings::KEYS {
            let value = match *key {
                "soft_label" | "use_decoder" | "scale_soft_by_labels" => "true",
                "label_set" => "indform",
                "max_steps" => "none",
                _ => "1",
            };
            Settings::default().set(key, value).unwrap();
        }
    }

    #[test]
    fn rejects_bad_lines() {
        let mut s = Settings::default();
        assert!(s.apply_text("lr 0.1").unwrap_err().contains("line 1"));
        assert!(s.apply_text("\nwarp = 9").unwrap_err().contains("line 2"));
        assert!(s.apply_text("epochs = many").is_err());
    }
}
