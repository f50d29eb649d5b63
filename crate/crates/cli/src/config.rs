//! Effective configuration: `sciunit.toml`, then command line flags, then
//! environment variables, each overriding the previous.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sciunit_core::chunkstore::RollingHashParams;
use sciunit_core::reuse::Backend;
use sciunit_core::{Error, Result};

pub const CONFIG_FILE: &str = "sciunit.toml";
pub const DEFAULT_API_PORT: u16 = 7780;
const CURRENT_FILE: &str = "current";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChunkSettings {
    pub window_len: Option<usize>,
    pub boundary_bits: Option<u32>,
    pub min_chunk: Option<usize>,
    pub max_chunk: Option<usize>,
}

/// One layer of settings; unset fields defer to the layer below.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub sciunit_root: Option<PathBuf>,
    pub sciunit: Option<String>,
    pub backend: Option<Backend>,
    pub repository_url: Option<String>,
    pub api_port: Option<u16>,
    #[serde(default)]
    pub chunk: ChunkSettings,
}

impl Settings {
    fn overlay(&mut self, top: Settings) {
        macro_rules! take {
            ($($f:ident).+) => {
                if top.$($f).+.is_some() {
                    self.$($f).+ = top.$($f).+;
                }
            };
        }
        take!(sciunit_root);
        take!(sciunit);
        take!(backend);
        take!(repository_url);
        take!(api_port);
        take!(chunk.window_len);
        take!(chunk.boundary_bits);
        take!(chunk.min_chunk);
        take!(chunk.max_chunk);
    }

    /// Reads the `SCIUNIT_*` variables through `var`.
    pub fn from_env(var: impl Fn(&str) -> Option<String>) -> Result<Settings> {
        let parse = |name: &str| -> Result<Option<u64>> {
            var(name)
                .map(|v| {
                    v.trim()
                        .parse::<u64>()
                        .map_err(|_| Error::Config(format!("{name}={v:?} is not a number")))
                })
                .transpose()
        };
        Ok(Settings {
            sciunit_root: var("SCIUNIT_ROOT").map(PathBuf::from),
            sciunit: var("SCIUNIT_NAME"),
            backend: var("SCIUNIT_BACKEND")
                .map(|b| b.parse().map_err(|e: Error| Error::Config(e.to_string())))
                .transpose()?,
            repository_url: var("SCIUNIT_REPOSITORY_URL"),
            api_port: parse("SCIUNIT_API_PORT")?
                .map(|p| u16::try_from(p).map_err(|_| Error::Config(format!("port {p} is out of range"))))
                .transpose()?,
            chunk: ChunkSettings {
                window_len: parse("SCIUNIT_WINDOW_LEN")?.map(|v| v as usize),
                boundary_bits: parse("SCIUNIT_BOUNDARY_BITS")?.map(|v| v as u32),
                min_chunk: parse("SCIUNIT_MIN_CHUNK")?.map(|v| v as usize),
                max_chunk: parse("SCIUNIT_MAX_CHUNK")?.map(|v| v as usize),
            },
        })
    }

    pub fn from_file(path: &Path) -> Result<Settings> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Config {
    pub sciunit_root: PathBuf,
    /// Explicitly chosen sciunit; otherwise the one last opened.
    pub sciunit: Option<String>,
    pub backend: Backend,
    pub repository_url: Option<String>,
    pub api_port: u16,
    pub chunk: RollingHashParams,
    /// Configuration file that was read, if any.
    pub config_file: Option<PathBuf>,
}

fn default_root(var: &impl Fn(&str) -> Option<String>) -> PathBuf {
    match var("HOME") {
        Some(home) if !home.is_empty() => Path::new(&home).join(".sciunit"),
        _ => PathBuf::from(".sciunit"),
    }
}

/// Picks the configuration file: the explicit path, `SCIUNIT_CONFIG`,
/// `./sciunit.toml`, then `$HOME/.config/sciunit/sciunit.toml`.
fn locate_file(explicit: Option<&Path>, var: &impl Fn(&str) -> Option<String>) -> Result<Option<PathBuf>> {
    if let Some(p) = explicit.map(Path::to_path_buf).or_else(|| var("SCIUNIT_CONFIG").map(PathBuf::from)) {
        if !p.is_file() {
            return Err(Error::Config(format!("config file {} does not exist", p.display())));
        }
        return Ok(Some(p));
    }
    let mut candidates = vec![PathBuf::from(CONFIG_FILE)];
    if let Some(home) = var("HOME") {
        candidates.push(Path::new(&home).join(".config/sciunit").join(CONFIG_FILE));
    }
    Ok(candidates.into_iter().find(|p| p.is_file()))
}

impl Config {
    /// Resolves file, flag and environment layers.
    pub fn load(explicit_file: Option<&Path>, flags: Settings, var: impl Fn(&str) -> Option<String>) -> Result<Config> {
        let file = locate_file(explicit_file, &var)?;
        let mut settings = match &file {
            Some(p) => Settings::from_file(p)?,
            None => Settings::default(),
        };
        settings.overlay(flags);
        settings.overlay(Settings::from_env(&var)?);

        let mut chunk = RollingHashParams::default();
        if let Some(n) = settings.chunk.window_len {
            chunk.window_len = n;
        }
        if let Some(k) = settings.chunk.boundary_bits {
            if k == 0 || k >= 30 {
                return Err(Error::Config(format!("boundary_bits {k} outside [1, 30)")));
            }
            chunk.boundary_bits = k;
            chunk.threshold = (1u64 << k) - 1;
        }
        if let Some(m) = settings.chunk.min_chunk {
            chunk.min_chunk = m;
        }
        if let Some(m) = settings.chunk.max_chunk {
            chunk.max_chunk = m;
        }
        chunk.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(Config {
            sciunit_root: settings.sciunit_root.unwrap_or_else(|| default_root(&var)),
            sciunit: settings.sciunit,
            backend: settings.backend.unwrap_or_default(),
            repository_url: settings.repository_url,
            api_port: settings.api_port.unwrap_or(DEFAULT_API_PORT),
            chunk,
            config_file: file,
        })
    }

    /// Name of the sciunit commands operate on.
    pub fn current_sciunit(&self) -> Result<String> {
        if let Some(name) = &self.sciunit {
            return Ok(name.clone());
        }
        match fs::read_to_string(self.sciunit_root.join(CURRENT_FILE)) {
            Ok(name) if !name.trim().is_empty() => Ok(name.trim().to_string()),
            _ => Err(Error::NotFound(
                "no sciunit is open; run `sciunit create <name>` or `sciunit open <name>`".into(),
            )),
        }
    }

    pub fn set_current_sciunit(&self, name: &str) -> Result<()> {
        fs::create_dir_all(&self.sciunit_root)
            .and_then(|_| fs::write(self.sciunit_root.join(CURRENT_FILE), format!("{name}\n")))
            .map_err(|e| Error::storage(format!("recording the open sciunit in {}", self.sciunit_root.display()), e))
    }

    pub fn repository(&self) -> Result<&str> {
        self.repository_url
            .as_deref()
            .ok_or_else(|| Error::Config("no repository configured; set repository_url or pass --url".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn env(pairs: &[(&str, &str)]) -> impl Fn(&str) -> Option<String> {
        let map: HashMap<String, String> = pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        move |k| map.get(k).cloned()
    }

    #[test]
    fn layers_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join(CONFIG_FILE);
        fs::write(
            &file,
            "sciunit_root = \"/from/file\"\napi_port = 1000\nrepository_url = \"http://file\"\n[chunk]\nboundary_bits = 11\n",
        )
        .unwrap();
        let flags = Settings {
            api_port: Some(2000),
            repository_url: Some("http://flag".into()),
            ..Default::default()
        };
        let cfg = Config::load(Some(&file), flags, env(&[("SCIUNIT_REPOSITORY_URL", "http://env")])).unwrap();
        assert_eq!(cfg.sciunit_root, Path::new("/from/file"));
        assert_eq!(cfg.api_port, 2000);
        assert_eq!(cfg.repository_url.as_deref(), Some("http://env"));
        assert_eq!(cfg.chunk.boundary_bits, 11);
        assert_eq!(cfg.chunk.threshold, 2047);
    }

    #[test]
    fn defaults_without_file() {
        let cfg = Config::load(None, Settings::default(), env(&[("HOME", "/home/x")])).unwrap();
        assert_eq!(cfg.sciunit_root, Path::new("/home/x/.sciunit"));
        assert_eq!(cfg.backend, Backend::Auto);
        assert_eq!(cfg.api_port, DEFAULT_API_PORT);
        assert_eq!(cfg.chunk, RollingHashParams::default());
        assert!(matches!(cfg.repository(), Err(Error::Config(_))));
    }

    #[test]
    fn bad_values_are_config_errors() {
        let e = Config::load(None, Settings::default(), env(&[("SCIUNIT_API_PORT", "x")])).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        let e = Config::load(None, Settings::default(), env(&[("SCIUNIT_BACKEND", "vm")])).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        let e = Config::load(Some(Path::new("/nonexistent/sciunit.toml")), Settings::default(), env(&[])).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn current_sciunit_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let flags = Settings {
            sciunit_root: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let cfg = Config::load(None, flags, env(&[])).unwrap();
        assert!(matches!(cfg.current_sciunit(), Err(Error::NotFound(_))));
        cfg.set_current_sciunit("demo").unwrap();
        assert_eq!(cfg.current_sciunit().unwrap(), "demo");
    }
}
