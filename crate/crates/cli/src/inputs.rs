use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use nilm_core::trace_io::read_trace;
use nilm_core::{load_channel_files, ApplianceSpec, Error, GroundTruthTrace, PipelineConfig, Result};

/// Channel-selection document for per-channel datasets such as REDD.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChannelConfig {
    /// Resolved against the config file's directory when relative.
    data_dir: PathBuf,
    channel: Vec<Channel>,
    /// Indices into `channel`; all channels when absent.
    selection: Option<Vec<usize>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Channel {
    file: PathBuf,
    label: Option<String>,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        None => Ok(PipelineConfig::default()),
        Some(p) => PipelineConfig::from_toml(&read_text(p)?)
            .map_err(|e| Error::Config(format!("{}: {}", p.display(), e.to_string().trim_start_matches("invalid configuration: ")))),
    }
}

/// Loads a trace from `--channels`, one trace file, or several channel files.
pub fn load_trace(inputs: &[PathBuf], channels: Option<&Path>) -> Result<GroundTruthTrace> {
    if let Some(cfg_path) = channels {
        let cfg: ChannelConfig =
            toml::from_str(&read_text(cfg_path)?).map_err(|e| Error::Config(format!("{}: {e}", cfg_path.display())))?;
        let base = cfg_path.parent().unwrap_or(Path::new("."));
        let dir = if cfg.data_dir.is_absolute() { cfg.data_dir.clone() } else { base.join(&cfg.data_dir) };
        let paths: Vec<PathBuf> = cfg.channel.iter().map(|c| dir.join(&c.file)).collect();
        let selection = cfg.selection.clone().unwrap_or_else(|| (0..paths.len()).collect());
        let mut trace = load_channel_files(&paths, &selection)?;
        let renames: BTreeMap<String, String> = cfg
            .channel
            .iter()
            .filter_map(|c| {
                let stem = c.file.file_stem()?.to_string_lossy().into_owned();
                Some((stem, c.label.clone()?))
            })
            .collect();
        trace.per_appliance = std::mem::take(&mut trace.per_appliance)
            .into_iter()
            .map(|(k, v)| (renames.get(&k).cloned().unwrap_or(k), v))
            .collect();
        return Ok(trace);
    }
    match inputs {
        [] => Err(Error::Config("no input given".into())),
        [one] => read_trace(one),
        many => load_channel_files(many, &(0..many.len()).collect::<Vec<_>>()),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    appliance: Vec<ApplianceSpec>,
}

/// Reads appliance specs from TOML (`[[appliance]]` tables) or a JSON array.
pub fn load_specs(path: &Path) -> Result<Vec<ApplianceSpec>> {
    let text = read_text(path)?;
    let specs: Vec<ApplianceSpec> = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    } else {
        toml::from_str::<SpecFile>(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            .appliance
    };
    for (i, s) in specs.iter().enumerate() {
        s.validate()
            .map_err(|e| Error::Config(format!("{}: appliance[{i}]: {}", path.display(), strip_config_prefix(&e))))?;
    }
    Ok(specs)
}

fn strip_config_prefix(e: &Error) -> String {
    e.to_string().trim_start_matches("invalid configuration: ").to_string()
}
