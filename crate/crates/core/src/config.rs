//! Application configuration: one TOML file, validated before any backend
//! is contacted. `SCIR_API_KEY` overrides any `api_key` in the file, and
//! keys are never written back out.
//!
//! ```toml
//! [run]
//! max_iterations = 2
//! ablation = "both"
//! parallelism = 4
//!
//! [run.policy]
//! fold_span_case = false
//!
//! [paths]
//! dataset = "data/dev.jsonl"
//! out_dir = "out"
//!
//! [endpoints.default]
//! base_url = "http://localhost:8000/v1"
//! model = "qwen3-4b"
//!
//! [backends]
//! extractor = { kind = "remote" }
//! pruner = { kind = "remote", endpoint = "default" }
//! redundancy = { kind = "scripted", script = "detector.jsonl" }
//! missing = { kind = "oracle" }
//!
//! [cassette]
//! path = "cassette.jsonl"
//! mode = "replay"
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    Cassette, CassetteMode, ChatClient, Detector, Extractor, FeedbackFollower, FixedPruner,
    OracleDetector, OracleExtractor, OraclePruner, Pruner, RemoteConfig, RemoteDetector,
    RemoteExtractor, RemotePruner, Script, ScriptedDetector, ScriptedExtractor, ScriptedPruner,
    Verdict,
};
use crate::engine::{Backends, RunConfig};
use crate::prompt::{PromptComposer, TemplateStore};

pub const DEFAULT_ENDPOINT: &str = "default";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

fn default_endpoint() -> String {
    DEFAULT_ENDPOINT.to_string()
}

fn default_fraction() -> f64 {
    1.0
}

/// How one model role is provided.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    #[default]
    Oracle,
    Remote {
        #[serde(default = "default_endpoint")]
        endpoint: String,
    },
    Scripted {
        script: PathBuf,
    },
    /// Pruner only.
    Fixed {
        verdict: FixedVerdict,
    },
    /// Extractor only: replays round-0 script replies, then applies the
    /// given fraction of each feedback section.
    Follower {
        script: PathBuf,
        #[serde(default = "default_fraction")]
        fraction: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedVerdict {
    Positive,
    Negative,
}

/// Command-line shorthand: `oracle`, `remote[:ENDPOINT]`, `scripted:PATH`,
/// `fixed:positive|negative`, `follower:PATH[@FRACTION]`.
impl FromStr for BackendSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, arg) = s.split_once(':').map_or((s, None), |(k, a)| (k, Some(a)));
        let need = |what: &str| {
            arg.filter(|a| !a.is_empty())
                .ok_or(format!("`{kind}` needs {what}"))
        };
        Ok(match kind {
            "oracle" => BackendSpec::Oracle,
            "remote" => BackendSpec::Remote {
                endpoint: arg.unwrap_or(DEFAULT_ENDPOINT).to_string(),
            },
            "scripted" => BackendSpec::Scripted {
                script: need("a script path")?.into(),
            },
            "fixed" => BackendSpec::Fixed {
                verdict: match need("a verdict")? {
                    "positive" => FixedVerdict::Positive,
                    "negative" => FixedVerdict::Negative,
                    other => return Err(format!("unknown verdict `{other}`")),
                },
            },
            "follower" => {
                let arg = need("a script path")?;
                let (path, fraction) = match arg.rsplit_once('@') {
                    Some((p, f)) => (
                        p,
                        f.parse::<f64>()
                            .map_err(|e| format!("bad fraction `{f}`: {e}"))?,
                    ),
                    None => (arg, 1.0),
                };
                BackendSpec::Follower {
                    script: path.into(),
                    fraction,
                }
            }
            other => return Err(format!("unknown backend kind `{other}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendWiring {
    pub extractor: BackendSpec,
    pub pruner: BackendSpec,
    pub redundancy: BackendSpec,
    pub missing: BackendSpec,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub gold: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    /// Directory of `<language>/<name>.txt` prompt template overrides.
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CassetteConfig {
    pub path: PathBuf,
    pub mode: CassetteMode,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub run: RunConfig,
    pub paths: Paths,
    pub endpoints: BTreeMap<String, RemoteConfig>,
    pub backends: BackendWiring,
    pub cassette: Option<CassetteConfig>,
}

impl AppConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| invalid(e.to_string().trim_end().replace('\n', " ")))
    }

    /// Loads a config file. Relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg =
            Self::from_toml(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            cfg.resolve_relative(base);
        }
        Ok(cfg)
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        for p in [
            &mut paths.dataset,
            &mut paths.out_dir,
            &mut paths.gold,
            &mut paths.predictions,
            &mut paths.templates,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        for spec in self.backend_specs_mut() {
            match spec {
                BackendSpec::Scripted { script } | BackendSpec::Follower { script, .. } => {
                    fix(script)
                }
                _ => {}
            }
        }
        if let Some(c) = &mut self.cassette {
            fix(&mut c.path);
        }
    }

    fn backend_specs_mut(&mut self) -> [&mut BackendSpec; 4] {
        let b = &mut self.backends;
        [
            &mut b.extractor,
            &mut b.pruner,
            &mut b.redundancy,
            &mut b.missing,
        ]
    }

    fn roles(&self) -> [(&'static str, &BackendSpec); 4] {
        let b = &self.backends;
        [
            ("extractor", &b.extractor),
            ("pruner", &b.pruner),
            ("redundancy", &b.redundancy),
            ("missing", &b.missing),
        ]
    }

    /// A configured endpoint; `default` falls back to stock settings.
    pub fn endpoint(&self, name: &str) -> Option<RemoteConfig> {
        match self.endpoints.get(name) {
            Some(ep) => Some(ep.clone()),
            None if name == DEFAULT_ENDPOINT => Some(RemoteConfig::default()),
            None => None,
        }
    }

    /// Checks everything that can be checked without calling a backend.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.run.parallelism == 0 {
            return Err(invalid("run.parallelism must be at least 1"));
        }
        for (name, ep) in &self.endpoints {
            if !(ep.base_url.starts_with("http://") || ep.base_url.starts_with("https://")) {
                return Err(invalid(format!(
                    "endpoints.{name}.base_url must start with http:// or https://"
                )));
            }
            if ep.model.trim().is_empty() {
                return Err(invalid(format!("endpoints.{name}.model is empty")));
            }
            if ep.max_attempts == 0 || ep.max_in_flight == 0 {
                return Err(invalid(format!(
                    "endpoints.{name}: max_attempts and max_in_flight must be at least 1"
                )));
            }
        }
        for (role, spec) in self.roles() {
            match spec {
                BackendSpec::Remote { endpoint } if self.endpoint(endpoint).is_none() => {
                    return Err(invalid(format!(
                        "backends.{role} uses undefined endpoint `{endpoint}`"
                    )));
                }
                BackendSpec::Fixed { .. } if role != "pruner" => {
                    return Err(invalid(format!(
                        "backends.{role}: `fixed` is only valid for the pruner"
                    )));
                }
                BackendSpec::Follower { fraction, .. }
                    if role != "extractor" || !(0.0..=1.0).contains(fraction) =>
                {
                    return Err(invalid(format!(
                        "backends.{role}: `follower` is only valid for the extractor, with fraction within [0, 1]"
                    )));
                }
                _ => {}
            }
            if let BackendSpec::Scripted { script } | BackendSpec::Follower { script, .. } = spec {
                if !script.is_file() {
                    return Err(invalid(format!(
                        "backends.{role}: script {} not found",
                        script.display()
                    )));
                }
            }
        }
        if let Some(c) = &self.cassette {
            if c.mode == CassetteMode::Replay && !c.path.is_file() {
                return Err(invalid(format!(
                    "cassette {} not found for replay",
                    c.path.display()
                )));
            }
        }
        if let Some(t) = &self.paths.templates {
            if !t.is_dir() {
                return Err(invalid(format!(
                    "template directory {} not found",
                    t.display()
                )));
            }
        }
        Ok(())
    }

    pub fn uses_remote(&self) -> bool {
        self.roles()
            .iter()
            .any(|(_, s)| matches!(s, BackendSpec::Remote { .. }))
    }

    /// Serializable view for manifests. The API key is never serialized,
    /// so this is safe to write out.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config always serializes")
    }

    /// Validates, then constructs every backend. No network traffic
    /// happens here.
    pub fn build_backends(&self) -> Result<Backends, ConfigError> {
        self.validate()?;
        let policy = &self.run.policy;
        let store = match &self.paths.templates {
            Some(dir) => TemplateStore::with_overrides(dir).map_err(|e| invalid(e.to_string()))?,
            None => TemplateStore::builtin(),
        };
        let composer = Arc::new(PromptComposer::new(store));

        let cassette = match &self.cassette {
            Some(c) => Some(Arc::new(
                Cassette::open(&c.path, c.mode).map_err(|e| invalid(e.to_string()))?,
            )),
            None => None,
        };
        let mut clients: BTreeMap<&str, Arc<ChatClient>> = BTreeMap::new();
        for (_, spec) in self.roles() {
            if let BackendSpec::Remote { endpoint } = spec {
                if !clients.contains_key(endpoint.as_str()) {
                    let client = ChatClient::new(
                        self.endpoint(endpoint).unwrap_or_default(),
                        cassette.clone(),
                    )
                    .map_err(|e| invalid(e.to_string()))?;
                    clients.insert(endpoint, Arc::new(client));
                }
            }
        }
        let mut scripts: BTreeMap<PathBuf, Arc<Script>> = BTreeMap::new();
        let mut script = |path: &PathBuf| -> Result<Arc<Script>, ConfigError> {
            if let Some(s) = scripts.get(path) {
                return Ok(s.clone());
            }
            let s = Arc::new(
                Script::from_path(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?,
            );
            scripts.insert(path.clone(), s.clone());
            Ok(s)
        };
        let client = |endpoint: &String| clients[endpoint.as_str()].clone();

        let extractor: Arc<dyn Extractor> = match &self.backends.extractor {
            BackendSpec::Oracle => Arc::new(OracleExtractor),
            BackendSpec::Remote { endpoint } => Arc::new(RemoteExtractor::new(client(endpoint))),
            BackendSpec::Scripted { script: p } => Arc::new(ScriptedExtractor::new(script(p)?)),
            BackendSpec::Follower {
                script: p,
                fraction,
            } => Arc::new(FeedbackFollower::new(
                script(p)?.initial_extractions(),
                *fraction,
                *policy,
            )),
            BackendSpec::Fixed { .. } => unreachable!("rejected by validate"),
        };
        let pruner: Arc<dyn Pruner> = match &self.backends.pruner {
            BackendSpec::Oracle => Arc::new(OraclePruner::new(*policy)),
            BackendSpec::Remote { endpoint } => {
                Arc::new(RemotePruner::new(client(endpoint), composer.clone()))
            }
            BackendSpec::Scripted { script: p } => Arc::new(ScriptedPruner::new(script(p)?)),
            BackendSpec::Fixed { verdict } => Arc::new(FixedPruner(match verdict {
                FixedVerdict::Positive => Verdict::Positive,
                FixedVerdict::Negative => Verdict::Negative,
            })),
            BackendSpec::Follower { .. } => unreachable!("rejected by validate"),
        };
        let mut detector = |spec: &BackendSpec| -> Result<Arc<dyn Detector>, ConfigError> {
            Ok(match spec {
                BackendSpec::Oracle => Arc::new(OracleDetector::new(*policy)),
                BackendSpec::Remote { endpoint } => Arc::new(RemoteDetector::new(
                    client(endpoint),
                    composer.clone(),
                    *policy,
                )),
                BackendSpec::Scripted { script: p } => {
                    Arc::new(ScriptedDetector::new(script(p)?, *policy))
                }
                BackendSpec::Fixed { .. } | BackendSpec::Follower { .. } => {
                    unreachable!("rejected by validate")
                }
            })
        };
        let redundancy = detector(&self.backends.redundancy)?;
        let missing = detector(&self.backends.missing)?;
        Ok(Backends {
            extractor,
            pruner,
            redundancy,
            missing,
            composer,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correction::Ablation;

    #[test]
    fn defaults_are_all_oracle_with_k_two() {
        let cfg = AppConfig::from_toml("").unwrap();
        assert_eq!(cfg.run.max_iterations, 2);
        assert_eq!(cfg.backends.extractor, BackendSpec::Oracle);
        cfg.validate().unwrap();
        assert!(!cfg.uses_remote());
    }

    #[test]
    fn full_file_parses() {
        let cfg = AppConfig::from_toml(
            r#"
            [run]
            max_iterations = 3
            ablation = "redundant_only"
            parallelism = 4
            [run.policy]
            fold_span_case = true
            [endpoints.default]
            base_url = "http://localhost:1/v1"
            model = "m"
            [backends]
            extractor = { kind = "remote" }
            pruner = { kind = "fixed", verdict = "negative" }
            "#,
        )
        .unwrap();
        assert_eq!(cfg.run.ablation, Ablation::RedundantOnly);
        assert!(cfg.run.policy.fold_span_case);
        assert!(cfg.run.policy.fold_name_case);
        cfg.validate().unwrap();
        assert!(cfg.uses_remote());
        let backends = cfg.build_backends().unwrap();
        assert_eq!(backends.ids().pruner, "always-negative");
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(AppConfig::from_toml("[run]\nmax_iters = 3").is_err());
        assert!(AppConfig::from_toml("bogus = 1").is_err());
        assert!(AppConfig::from_toml("[backends]\nextractor = { kind = \"magic\" }").is_err());
    }

    #[test]
    fn validation_errors() {
        let bad = |text: &str| {
            AppConfig::from_toml(text)
                .unwrap()
                .validate()
                .unwrap_err()
                .to_string()
        };
        assert!(
            bad("[backends]\nextractor = { kind = \"remote\", endpoint = \"x\" }")
                .contains("undefined endpoint")
        );
        assert!(
            bad("[backends]\nmissing = { kind = \"fixed\", verdict = \"positive\" }")
                .contains("only valid")
        );
        assert!(bad("[run]\nparallelism = 0").contains("parallelism"));
        assert!(bad("[endpoints.default]\nbase_url = \"ftp://x\"\nmodel = \"m\"").contains("http"));
        assert!(bad(
            "[backends]\nextractor = { kind = \"scripted\", script = \"/nonexistent.jsonl\" }"
        )
        .contains("not found"));
        assert!(
            bad("[cassette]\npath = \"/nonexistent.jsonl\"\nmode = \"replay\"")
                .contains("not found")
        );
    }

    #[test]
    fn api_key_never_serialized() {
        let cfg = AppConfig::from_toml(
            "[endpoints.default]\nbase_url = \"http://x\"\nmodel = \"m\"\napi_key = \"sk-very-secret\"",
        )
        .unwrap();
        assert!(!cfg.to_json().to_string().contains("sk-very-secret"));
        assert!(!format!("{cfg:?}").contains("sk-very-secret"));
    }

    #[test]
    fn shorthand_specs() {
        assert_eq!("oracle".parse::<BackendSpec>(), Ok(BackendSpec::Oracle));
        assert_eq!(
            "remote".parse::<BackendSpec>(),
            Ok(BackendSpec::Remote {
                endpoint: "default".into()
            })
        );
        assert_eq!(
            "follower:s.jsonl@0.5".parse::<BackendSpec>(),
            Ok(BackendSpec::Follower {
                script: "s.jsonl".into(),
                fraction: 0.5
            })
        );
        assert!("scripted".parse::<BackendSpec>().is_err());
        assert!("fixed:maybe".parse::<BackendSpec>().is_err());
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("s.jsonl"), "").unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(
            &path,
            "[paths]\ndataset = \"d.jsonl\"\n[backends]\nextractor = { kind = \"scripted\", script = \"s.jsonl\" }",
        )
        .unwrap();
        let cfg = AppConfig::load(&path).unwrap();
        assert_eq!(
            cfg.paths.dataset.as_deref(),
            Some(dir.path().join("d.jsonl").as_path())
        );
        cfg.validate().unwrap();
    }
}
