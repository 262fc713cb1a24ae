use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

pub const CONFIG_ENV: &str = "EDUCTION_CONFIG";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    pub dst_port: u16,
    pub gmt_port: u16,
    pub lease_ms: u64,
    pub heartbeat_ms: u64,
    pub pipeline_windows: usize,
    pub log_path: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            dst_port: 4747,
            gmt_port: 4748,
            lease_ms: 5000,
            heartbeat_ms: 1000,
            pipeline_windows: 8,
            log_path: PathBuf::from("./data"),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {0}: expected `key = value`")]
    MalformedLine(usize),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn number<T: FromStr>(v: &str, line: usize) -> Result<T, ConfigError> {
    v.parse().map_err(|_| ConfigError::MalformedLine(line))
}

impl Config {
    /// Parses `key = value` lines. Blank lines and `#` comments are
    /// ignored; later lines override earlier ones.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            let (k, v) = s.split_once('=').ok_or(ConfigError::MalformedLine(line))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() {
                return Err(ConfigError::MalformedLine(line));
            }
            match k {
                "dst.port" => c.dst_port = number(v, line)?,
                "gmt.port" => c.gmt_port = number(v, line)?,
                "lease.ms" => c.lease_ms = number(v, line)?,
                "heartbeat.ms" => c.heartbeat_ms = number(v, line)?,
                "pipeline.windows" => c.pipeline_windows = number(v, line)?,
                "log.path" => c.log_path = PathBuf::from(v),
                _ => return Err(ConfigError::UnknownKey { line, key: k.to_owned() }),
            }
        }
        Ok(c)
    }
}

pub fn load_config(path: &Path) -> Result<Config, ConfigError> {
    let text =
        std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    Config::parse(&text)
}

/// `--config` wins over `EDUCTION_CONFIG`; with neither, defaults.
pub fn resolve(explicit: Option<&Path>) -> Result<Config, ConfigError> {
    match explicit.map(Path::to_path_buf).or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from)) {
        Some(p) => load_config(&p),
        None => Ok(Config::default()),
    }
}
