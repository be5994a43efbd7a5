//! Flat `key=value` settings from a config file plus `--set` overrides,
//! routed to the configuration structs a subcommand understands.

use std::fmt;
use std::fs;
use std::path::Path;

use tlm::{FusionConfig, ModelConfig, RescoreConfig, TrainConfig};

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation: unknown key, malformed override, conflicting flags.
    Usage(String),
    Run(tlm::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage error: {msg}"),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

impl From<tlm::Error> for CliError {
    fn from(e: tlm::Error) -> Self {
        CliError::Run(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Which configuration structs a subcommand accepts keys for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Model,
    Train,
    Rescore,
    Fusion,
}

impl Group {
    fn keys(self) -> &'static [&'static str] {
        match self {
            Group::Model => &ModelConfig::KEYS,
            Group::Train => &TrainConfig::KEYS,
            Group::Rescore => RescoreConfig::KEYS,
            Group::Fusion => FusionConfig::KEYS,
        }
    }
}

/// Ordered settings, later entries overriding earlier ones.
#[derive(Debug, Default)]
pub struct Settings {
    entries: Vec<(String, String)>,
}

impl Settings {
    /// Reads `config` (if any) and then applies `overrides`, checking every
    /// key against the groups the caller accepts.
    pub fn load(config: Option<&Path>, overrides: &[String], groups: &[Group]) -> CliResult<Settings> {
        let mut entries = Vec::new();
        if let Some(path) = config {
            let text = fs::read_to_string(path)?;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    CliError::Usage(format!(
                        "{}:{}: expected key=value, got `{line}`",
                        path.display(),
                        i + 1
                    ))
                })?;
                entries.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{o}`")))?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        let valid: Vec<&str> = groups.iter().flat_map(|g| g.keys().iter().copied()).collect();
        if let Some((k, _)) = entries.iter().find(|(k, _)| !valid.contains(&k.as_str())) {
            let listing = if valid.is_empty() {
                "this command takes no configuration keys".to_string()
            } else {
                format!("valid keys: {}", valid.join(", "))
            };
            return Err(CliError::Usage(format!("unknown key `{k}`; {listing}")));
        }
        Ok(Settings { entries })
    }

    fn apply(&self, group: Group, mut set: impl FnMut(&str, &str) -> tlm::Result<()>) -> CliResult<()> {
        for (k, v) in &self.entries {
            if group.keys().contains(&k.as_str()) {
                set(k, v)?;
            }
        }
        Ok(())
    }

    pub fn model(&self, base: ModelConfig) -> CliResult<ModelConfig> {
        let mut c = base;
        self.apply(Group::Model, |k, v| c.set(k, v))?;
        c.validate()?;
        Ok(c)
    }

    pub fn train(&self, base: TrainConfig) -> CliResult<TrainConfig> {
        let mut c = base;
        self.apply(Group::Train, |k, v| c.set(k, v))?;
        Ok(c)
    }

    pub fn rescore(&self) -> CliResult<RescoreConfig> {
        let mut c = RescoreConfig::default();
        self.apply(Group::Rescore, |k, v| c.set(k, v))?;
        c.validate()?;
        Ok(c)
    }

    pub fn fusion(&self) -> CliResult<FusionConfig> {
        let mut c = FusionConfig::default();
        self.apply(Group::Fusion, |k, v| c.set(k, v))?;
        c.validate()?;
        Ok(c)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sets(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.cfg");
        fs::write(&path, "# model\nlayers = 3\nd_res=16\n\nheads=2\n").unwrap();
        let s = Settings::load(Some(&path), &sets(&["layers=5"]), &[Group::Model]).unwrap();
        let c = s.model(ModelConfig::default()).unwrap();
        assert_eq!((c.layers, c.d_res, c.heads), (5, 16, 2));
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = Settings::load(None, &sets(&["beam=3"]), &[Group::Model, Group::Train]).unwrap_err();
        let CliError::Usage(msg) = err else {
            panic!("{err:?}")
        };
        assert!(msg.contains("`beam`"), "{msg}");
        assert!(msg.contains("layers") && msg.contains("learning_rate"), "{msg}");
    }

    #[test]
    fn keys_route_to_their_group() {
        let s = Settings::load(None, &sets(&["beam=3", "lm_scale=0.5"]), &[Group::Rescore]).unwrap();
        let r = s.rescore().unwrap();
        assert_eq!((r.beam, r.lm_scale), (Some(3), 0.5));
    }

    #[test]
    fn malformed_override_is_usage_error() {
        assert!(matches!(
            Settings::load(None, &sets(&["layers"]), &[Group::Model]),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn bad_value_is_a_run_error() {
        let s = Settings::load(None, &sets(&["layers=two"]), &[Group::Model]).unwrap();
        assert!(matches!(s.model(ModelConfig::default()), Err(CliError::Run(_))));
    }
}
