//! Run configuration: preset defaults, then the config file, then flags.

use std::path::{Path, PathBuf};

use oneshot_landmarks::backbone::BackboneKind;
use oneshot_landmarks::pipeline::{digest_json, PipelineConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

pub const DEFAULT_PRESET: &str = "synthetic";

/// Fully resolved settings of one command invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub preset: String,
    pub pipeline: PipelineConfig,
    pub manifest: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
}

impl RunConfig {
    pub fn digest(&self) -> String {
        digest_json(self)
    }

    pub fn write_beside_outputs(&self) -> Result<PathBuf, CliError> {
        log::info!("run config digest {}", self.digest());
        write_record(&self.out, self)
    }
}

/// Writes `run_config.json` holding `config` and its digest into `dir`.
pub fn write_record<T: Serialize>(dir: &Path, config: &T) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let path = dir.join("run_config.json");
    let body = serde_json::json!({ "digest": digest_json(config), "config": config });
    let text = serde_json::to_string_pretty(&body).expect("run config serializes");
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

/// Keys a config file may set at its top level.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    preset: Option<String>,
    manifest: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    pipeline: Option<Value>,
}

/// Flag values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<String>,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub backbone: Option<String>,
}

/// Reads a TOML or JSON file (by extension; anything not `.json` is TOML)
/// into a JSON value.
pub fn read_config_value(path: &Path) -> Result<Value, CliError> {
    if !path.exists() {
        return Err(CliError::Validation(format!("config file not found: {}", path.display())));
    }
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let bad = |m: String| CliError::Validation(format!("{}: {m}", path.display()));
    if is_json {
        serde_json::from_str(&text).map_err(|e| bad(e.to_string()))
    } else {
        let v: toml::Value = toml::from_str(&text).map_err(|e| bad(e.to_string()))?;
        serde_json::to_value(v).map_err(|e| bad(e.to_string()))
    }
}

/// Recursively overlays `top` onto `base`; objects merge, anything else replaces.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, t) => *b = t,
    }
}

pub fn resolve(command: &str, config_file: Option<&Path>, flags: &Overrides) -> Result<RunConfig, CliError> {
    let file: FileConfig = match config_file {
        Some(path) => serde_json::from_value(read_config_value(path)?)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?,
        None => FileConfig::default(),
    };
    let preset = flags
        .preset
        .clone()
        .or(file.preset)
        .unwrap_or_else(|| DEFAULT_PRESET.to_string());
    let mut pipeline = PipelineConfig::preset(&preset)?;
    if let Some(overlay) = file.pipeline {
        let mut value = serde_json::to_value(&pipeline).expect("config serializes");
        merge(&mut value, overlay);
        pipeline = serde_json::from_value(value).map_err(|e| CliError::Validation(format!("pipeline config: {e}")))?;
    }
    if let Some(seed) = flags.seed.or(file.seed) {
        pipeline.train.seed = seed;
    }
    if let Some(k) = flags.k {
        pipeline.matching.k = k;
    }
    if let Some(kind) = &flags.backbone {
        pipeline.backbone.kind = kind.parse::<BackboneKind>()?;
    }
    pipeline.validate()?;
    Ok(RunConfig {
        command: command.to_string(),
        preset,
        seed: pipeline.train.seed,
        pipeline,
        manifest: flags.manifest.clone().or(file.manifest),
        out: flags.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from("out")),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_and_precedence() {
        let rc = resolve("train", None, &Overrides::default()).unwrap();
        assert_eq!(rc.preset, "synthetic");
        assert_eq!(rc.pipeline, PipelineConfig::synthetic());
        assert_eq!(rc.out, PathBuf::from("out"));

        let head = resolve("train", None, &Overrides { preset: Some("head".into()), ..Default::default() }).unwrap();
        assert_eq!(head.pipeline.train.sigma_global, 5.0);
        assert_eq!(head.pipeline.train.iters_global, 20000);
        assert_eq!(head.pipeline.matching.k, 3);
        let hand = resolve("train", None, &Overrides { preset: Some("hand".into()), ..Default::default() }).unwrap();
        assert_eq!((hand.pipeline.train.sigma_global, hand.pipeline.train.sigma_local), (8.0, 8.0));
        assert_eq!(hand.pipeline.train.iters_local, 3000);
        assert_eq!(hand.pipeline.matching.k, 5);

        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("run.toml");
        std::fs::write(
            &toml_path,
            "preset = \"head\"\nseed = 4\n[pipeline.train]\niters_global = 12\n[pipeline.matching]\nk = 7\n",
        )
        .unwrap();
        let rc = resolve("train", Some(&toml_path), &Overrides::default()).unwrap();
        assert_eq!(rc.preset, "head");
        assert_eq!(rc.pipeline.train.iters_global, 12);
        assert_eq!(rc.pipeline.train.sigma_global, 5.0);
        assert_eq!((rc.seed, rc.pipeline.train.seed, rc.pipeline.matching.k), (4, 4, 7));

        let flags = Overrides {
            seed: Some(9),
            k: Some(1),
            backbone: Some("synthetic-positional".into()),
            ..Default::default()
        };
        let rc = resolve("train", Some(&toml_path), &flags).unwrap();
        assert_eq!((rc.seed, rc.pipeline.matching.k), (9, 1));
        assert_eq!(rc.pipeline.train.iters_global, 12);
        assert_eq!(rc.pipeline.backbone.kind, BackboneKind::SyntheticPositional);

        let json_path = dir.path().join("run.json");
        std::fs::write(&json_path, r#"{"pipeline": {"short_side": 96}}"#).unwrap();
        assert_eq!(resolve("train", Some(&json_path), &Overrides::default()).unwrap().pipeline.short_side, 96);
    }

    #[test]
    fn rejects_bad_input() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.toml");
        std::fs::write(&p, "colour = 3\n").unwrap();
        assert!(matches!(resolve("x", Some(&p), &Overrides::default()), Err(CliError::Validation(_))));
        let missing = dir.path().join("missing.toml");
        let err = resolve("x", Some(&missing), &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("missing.toml"));
        let k0 = Overrides { k: Some(0), ..Default::default() };
        assert_eq!(resolve("x", None, &k0).unwrap_err().exit_code(), 2);
        let preset = Overrides { preset: Some("knee".into()), ..Default::default() };
        assert_eq!(resolve("x", None, &preset).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn digest_tracks_every_field() {
        let base = resolve("train", None, &Overrides::default()).unwrap();
        assert_eq!(base.digest(), base.clone().digest());
        let mut a = base.clone();
        a.seed += 1;
        let mut b = base.clone();
        b.pipeline.train.lr *= 2.0;
        let mut c = base.clone();
        c.manifest = Some("m.json".into());
        let mut d = base.clone();
        d.out = "elsewhere".into();
        for other in [a, b, c, d] {
            assert_ne!(other.digest(), base.digest());
        }
    }
}
