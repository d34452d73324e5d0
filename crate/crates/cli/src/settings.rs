//! Resolution of command settings from defaults, an optional JSON config file
//! and command-line flags, in increasing priority.

use std::fmt;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Bad invocation, missing input or malformed config. Exits with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Fails with a usage error unless `path` exists.
pub fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

pub fn read_json(path: &Path, what: &str) -> anyhow::Result<Value> {
    require_file(path, what)?;
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{what} {} is not valid JSON: {e}", path.display())))
}

/// Recursively merges `top` into `base`. Objects merge key by key, anything
/// else in `top` replaces the value in `base`, and nulls in `top` are skipped.
pub fn overlay(base: &mut Value, top: &Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                if v.is_null() {
                    continue;
                }
                match b.get_mut(k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, t) if !t.is_null() => *b = t.clone(),
        _ => {}
    }
}

/// Builds `S` from its defaults, the config section and the flags.
pub fn resolve<S, A>(section: Option<&Value>, flags: &A, command: &str) -> anyhow::Result<S>
where
    S: Default + Serialize + DeserializeOwned,
    A: Serialize,
{
    let mut v = serde_json::to_value(S::default())?;
    if let Some(sec) = section {
        if !sec.is_object() {
            return Err(usage(format!("config section {command:?} must be an object")));
        }
        overlay(&mut v, sec);
    }
    overlay(&mut v, &serde_json::to_value(flags)?);
    serde_json::from_value(v).map_err(|e| usage(format!("invalid {command} settings: {e}")))
}

/// Options shared by every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Global {
    pub seed: u64,
    /// Worker threads for parallel sections; `None` uses every core.
    pub workers: Option<usize>,
    pub out_dir: PathBuf,
}

impl Default for Global {
    fn default() -> Self {
        Self { seed: 0, workers: None, out_dir: PathBuf::from("out") }
    }
}

/// Config file layout: global keys at the top level plus one object per command.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedConfig<'a, S: Serialize> {
    pub command: &'a str,
    #[serde(flatten)]
    pub global: &'a Global,
    pub settings: &'a S,
}

/// Creates the output directory and writes `<command>.config.json` into it.
/// Passing that file back through `--config` reruns the command unchanged.
pub fn prepare_out_dir<S: Serialize>(global: &Global, command: &str, settings: &S) -> anyhow::Result<()> {
    std::fs::create_dir_all(&global.out_dir)?;
    let cfg = ResolvedConfig { command, global, settings };
    let path = global.out_dir.join(format!("{command}.config.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&cfg)? + "\n")?;
    log::info!("resolved config written to {}", path.display());
    Ok(())
}

pub fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).map_err(|e| anyhow::anyhow!("cannot create {}: {e}", path.display()))?;
    Ok(BufWriter::new(f))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Splits a config file into its global part and the named command section.
pub fn split_config(file: Option<&Value>, command: &str) -> anyhow::Result<(Value, Option<Value>)> {
    let Some(file) = file else { return Ok((Value::Object(Default::default()), None)) };
    let obj = file.as_object().ok_or_else(|| usage("config file must hold a JSON object"))?;
    if let Some(c) = obj.get("command").and_then(Value::as_str) {
        if c != command {
            return Err(usage(format!("config file was written for {c:?}, not {command:?}")));
        }
    }
    let mut global = serde_json::Map::new();
    let mut section = None;
    for (k, v) in obj {
        match k.as_str() {
            "seed" | "workers" | "out_dir" => {
                global.insert(k.clone(), v.clone());
            }
            "command" => {}
            "settings" => section = Some(v.clone()),
            other => return Err(usage(format!("unknown config key {other:?}"))),
        }
    }
    Ok((Value::Object(global), section))
}
