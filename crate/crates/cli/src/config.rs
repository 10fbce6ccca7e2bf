//! Experiment configuration: one TOML file, optionally overridden from the
//! command line.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use tkd_core::eval::EvalConfig;
use tkd_core::pipeline::{ModelConfig, PipelineConfig};
use tkd_core::sim::{generate_stream, read_trace, SceneSpec, Stream, StreamConfig};

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds stream generation and every random choice of a run.
    pub seed: Option<u64>,
    /// Replay this trace instead of generating a stream from `scenes`.
    pub trace: Option<PathBuf>,
    /// Generator and world settings. With `trace`, only the world fields
    /// (`world_seed`, `feature_noise`, `object_amplitude`) matter; sizes come
    /// from the trace header.
    #[serde(default)]
    pub stream: StreamConfig,
    #[serde(default)]
    pub scenes: Vec<SceneSpec>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub ablate: AblateConfig,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub lambdas: Vec<f64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub target_counts: Vec<usize>,
    pub trials: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            target_counts: vec![1, 10, 25, 50],
            trials: 30,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Trace written by `generate`, report by `run`, table by `ablate` and
    /// `bench`, re-scored summary by `eval`.
    pub path: Option<PathBuf>,
    /// Adaptive decoder and selector state after `run`.
    pub checkpoint: Option<PathBuf>,
}

/// Loads `path`, applies `key=value` overrides (dotted keys, TOML values)
/// and validates the result.
pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<RunConfig, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut doc: toml::Table =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    for (key, value) in overrides {
        set(&mut doc, key, parse_value(value))?;
    }
    let cfg: RunConfig = toml::Value::Table(doc)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string().trim().replace('\n', " ")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// A TOML value, or a plain string when `raw` does not parse as one.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| CliError::Config(format!("empty override key `{key}`")))?;
    let mut table = doc;
    for part in parts {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{key}`: `{part}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        self.seed.expect("validated")
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.seed.is_none() {
            return Err(CliError::Config("`seed` is required".into()));
        }
        self.model.validate()?;
        self.pipeline().validate()?;
        self.eval.validate()?;
        Ok(())
    }

    /// Pipeline settings with the top-level seed.
    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            seed: self.seed.unwrap_or_default(),
            ..self.pipeline
        }
    }

    fn require_source(&self) -> Result<(), CliError> {
        match (&self.trace, self.scenes.is_empty()) {
            (Some(_), false) => Err(CliError::Config(
                "`trace` and `scenes` are mutually exclusive; give exactly one".into(),
            )),
            (None, true) => Err(CliError::Config("one of `scenes` or `trace` is required".into())),
            _ => Ok(()),
        }
    }

    /// Generator settings with the top-level seed.
    pub fn stream_config(&self) -> StreamConfig {
        StreamConfig {
            seed: self.seed(),
            ..self.stream
        }
    }

    /// Generates the configured stream; replaying a trace is refused.
    pub fn generate(&self) -> Result<Stream, CliError> {
        self.require_source()?;
        if self.trace.is_some() {
            return Err(CliError::Config("`generate` needs `scenes`, not `trace`".into()));
        }
        Ok(generate_stream(&self.scenes, &self.stream_config())?)
    }

    /// The stream to run on, and the world the student is pretrained in.
    pub fn load_stream(&self) -> Result<(Stream, StreamConfig), CliError> {
        self.require_source()?;
        match &self.trace {
            Some(path) => {
                let stream = read_trace(path).map_err(CliError::runtime)?;
                let h = stream.header;
                let world = StreamConfig {
                    s: h.s,
                    c: h.c,
                    d: h.d,
                    ..self.stream_config()
                };
                Ok((stream, world))
            }
            None => Ok((self.generate()?, self.stream_config())),
        }
    }
}
