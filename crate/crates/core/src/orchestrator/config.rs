use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dsl::LabelType;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed config: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Predict,
    Rules,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Predict => "predict",
            Mode::Rules => "rules",
        })
    }
}

impl FromStr for Mode {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "predict" => Ok(Mode::Predict),
            "rules" => Ok(Mode::Rules),
            other => Err(ConfigError(format!(
                "unknown mode `{other}` (expected predict or rules)"
            ))),
        }
    }
}

/// Job descriptor from the `[morf]` section of a config file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Path or HTTP(S) URL of the image archive.
    pub image: String,
    pub image_digest: Option<String>,
    /// Controller script reference (predict mode).
    pub controller: Option<String>,
    /// Rule file reference (rules mode).
    pub rules: Option<String>,
    pub label_type: Option<LabelType>,
    pub webhook: Option<String>,
    /// Overridden by the authenticated user when submitted over HTTP.
    pub user: Option<String>,
    /// Reuse cached step outputs (default true).
    pub cache: bool,
}

const KEYS: [&str; 9] = [
    "mode",
    "image",
    "image_digest",
    "controller",
    "rules",
    "label_type",
    "webhook",
    "user",
    "cache",
];

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let ini = ini::Ini::load_from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        let section = ini
            .section(Some("morf"))
            .ok_or_else(|| ConfigError("missing [morf] section".into()))?;
        for (k, _) in section.iter() {
            if !KEYS.contains(&k) {
                return Err(ConfigError(format!("unknown key `{k}`")));
            }
        }
        let get = |k: &str| {
            section
                .get(k)
                .map(str::trim)
                .filter(|v| !v.is_empty())
                .map(str::to_string)
        };
        let mode: Mode = get("mode")
            .ok_or_else(|| ConfigError("missing `mode`".into()))?
            .parse()?;
        let image = get("image").ok_or_else(|| ConfigError("missing `image`".into()))?;
        let controller = get("controller");
        let rules = get("rules");
        match (mode, &controller, &rules) {
            (_, Some(_), Some(_)) => {
                return Err(ConfigError(
                    "config names both a controller script and a rule file".into(),
                ))
            }
            (Mode::Predict, None, _) => {
                return Err(ConfigError("predict mode requires `controller`".into()))
            }
            (Mode::Rules, _, None) => {
                return Err(ConfigError("rules mode requires `rules`".into()))
            }
            _ => {}
        }
        let label_type = get("label_type")
            .map(|v| {
                v.parse::<LabelType>()
                    .map_err(|e| ConfigError(e.to_string()))
            })
            .transpose()?;
        let image_digest = get("image_digest").map(|d| d.to_ascii_lowercase());
        if let Some(d) = &image_digest {
            if d.len() != 64 || !d.chars().all(|c| c.is_ascii_hexdigit()) {
                return Err(ConfigError(
                    "`image_digest` must be 64 hex characters".into(),
                ));
            }
        }
        let webhook = get("webhook");
        if let Some(w) = &webhook {
            if !(w.starts_with("http://") || w.starts_with("https://")) {
                return Err(ConfigError("`webhook` must be an http(s) URL".into()));
            }
        }
        let cache = match get("cache").as_deref() {
            None | Some("on") | Some("true") | Some("yes") => true,
            Some("off") | Some("false") | Some("no") => false,
            Some(other) => return Err(ConfigError(format!("bad value `{other}` for `cache`"))),
        };
        Ok(ExperimentConfig {
            mode,
            image,
            image_digest,
            controller,
            rules,
            label_type,
            webhook,
            user: get("user"),
            cache,
        })
    }

    pub fn render(&self) -> String {
        let mut out = format!("[morf]\nmode = {}\nimage = {}\n", self.mode, self.image);
        let mut line = |k: &str, v: &Option<String>| {
            if let Some(v) = v {
                out.push_str(&format!("{k} = {v}\n"));
            }
        };
        line("image_digest", &self.image_digest);
        line("controller", &self.controller);
        line("rules", &self.rules);
        line(
            "label_type",
            &self.label_type.map(|l| l.as_str().to_string()),
        );
        line("webhook", &self.webhook);
        line("user", &self.user);
        if !self.cache {
            out.push_str("cache = off\n");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PREDICT: &str = "[morf]\nmode = predict\nimage = ./image.tar\ncontroller = listing1.morf\nlabel_type = dropout\n";

    #[test]
    fn parses_predict_config() {
        let c = ExperimentConfig::parse(PREDICT).unwrap();
        assert_eq!(c.mode, Mode::Predict);
        assert_eq!(c.controller.as_deref(), Some("listing1.morf"));
        assert_eq!(c.label_type, Some(LabelType::Dropout));
        assert!(c.cache);
        assert_eq!(ExperimentConfig::parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_configs() {
        let cases = [
            "mode = predict\n",
            "[morf]\nimage = x\ncontroller = c\n",
            "[morf]\nmode = batch\nimage = x\ncontroller = c\n",
            "[morf]\nmode = predict\ncontroller = c\n",
            "[morf]\nmode = predict\nimage = x\ncontroller = c\nrules = r\n",
            "[morf]\nmode = predict\nimage = x\n",
            "[morf]\nmode = rules\nimage = x\ncontroller = c\n",
            "[morf]\nmode = predict\nimage = x\ncontroller = c\nlabel_type = grade\n",
            "[morf]\nmode = predict\nimage = x\ncontroller = c\ncolour = red\n",
            "[morf]\nmode = predict\nimage = x\ncontroller = c\nwebhook = ftp://x\n",
            "[morf]\nmode = predict\nimage = x\ncontroller = c\nimage_digest = abc\n",
        ];
        for text in cases {
            assert!(ExperimentConfig::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn rules_config() {
        let c = ExperimentConfig::parse(
            "[morf]\nmode = rules\nimage = i.tar\nrules = r.rule\ncache = off\n",
        )
        .unwrap();
        assert_eq!(c.mode, Mode::Rules);
        assert!(!c.cache);
    }
}
