//! Service configuration, read from a TOML file. Every field has a default so
//! a partial file is enough.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use taskflow_core::engine::EngineConfig;
use taskflow_core::extract::{default_param_defs, ParamDef, ParamExtractor};
use taskflow_core::pipeline::{PipelineConfig, PipelineParams};

use crate::ServiceError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub listen: String,
    /// Where pipeline artifacts are read from and written to.
    pub artifact_dir: PathBuf,
    /// Dialogue corpus; needed to index utterance texts and to rerun the pipeline.
    pub corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub pipeline: PipelineParams,
    pub param_defs: Vec<ParamDef>,
    pub fallback_message: String,
    pub clarification_message: String,
    pub root_recovery: bool,
    /// Sessions untouched for this long are dropped.
    pub session_idle_secs: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        let engine = EngineConfig::default();
        Self {
            listen: "127.0.0.1:8080".into(),
            artifact_dir: "artifacts".into(),
            corpus: None,
            manifest: None,
            pipeline: PipelineParams::default(),
            param_defs: default_param_defs(),
            fallback_message: engine.fallback_message,
            clarification_message: engine.clarification_message,
            root_recovery: engine.root_recovery,
            session_idle_secs: 30 * 60,
        }
    }
}

impl ServiceConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ServiceError> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path)?;
        let config: Self = toml::from_str(&raw).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        let p = &self.pipeline;
        let r = &p.retrieval;
        let b = &p.beam;
        let checks: [(bool, &str); 11] = [
            (p.user_k >= 1, "pipeline.user_k must be at least 1"),
            (p.staff_k >= 1, "pipeline.staff_k must be at least 1"),
            (p.order >= 2, "pipeline.order must be at least 2"),
            (b.top_k >= 1, "pipeline.beam.top_k must be at least 1"),
            (b.beam_cap >= 1, "pipeline.beam.beam_cap must be at least 1"),
            (b.max_len >= 1, "pipeline.beam.max_len must be at least 1"),
            (b.max_completed >= 1, "pipeline.beam.max_completed must be at least 1"),
            (r.recall_k >= 1, "pipeline.retrieval.recall_k must be at least 1"),
            ((0.0..=1.0).contains(&r.threshold), "pipeline.retrieval.threshold must lie in [0, 1]"),
            (r.k1 >= 0.0 && (0.0..=1.0).contains(&r.b), "pipeline.retrieval needs k1 >= 0 and b in [0, 1]"),
            (self.session_idle_secs >= 1, "session_idle_secs must be at least 1"),
        ];
        if let Some((_, msg)) = checks.iter().find(|(ok, _)| !ok) {
            return Err(ServiceError::Config((*msg).to_string()));
        }
        ParamExtractor::new(self.param_defs.clone()).map_err(|e| ServiceError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            fallback_message: self.fallback_message.clone(),
            clarification_message: self.clarification_message.clone(),
            root_recovery: self.root_recovery,
        }
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig, ServiceError> {
        let corpus = self.corpus.clone().ok_or(ServiceError::NoCorpus)?;
        Ok(PipelineConfig {
            corpus,
            out_dir: self.artifact_dir.clone(),
            manifest: self.manifest.clone(),
            params: self.pipeline.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let config: ServiceConfig = toml::from_str(
            r#"
            listen = "0.0.0.0:9000"
            corpus = "logs.jsonl"
            [pipeline]
            order = 3
            seed = 7
            [pipeline.beam]
            top_k = 2
            "#,
        )
        .unwrap();
        assert_eq!(config.listen, "0.0.0.0:9000");
        assert_eq!(config.pipeline.order, 3);
        assert_eq!(config.pipeline.seed, 7);
        assert_eq!(config.pipeline.beam.top_k, 2);
        assert_eq!(config.pipeline.beam.beam_cap, 200);
        assert_eq!(config.pipeline.user_k, 100);
        assert_eq!(config.session_idle_secs, 1800);
        config.validate().unwrap();
    }

    #[test]
    fn round_trips_through_toml() {
        let config = ServiceConfig::default();
        let text = toml::to_string(&config).unwrap();
        assert_eq!(toml::from_str::<ServiceConfig>(&text).unwrap(), config);
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        let mut config = ServiceConfig::default();
        config.pipeline.retrieval.threshold = 1.5;
        assert!(matches!(config.validate(), Err(ServiceError::Config(m)) if m.contains("threshold")));
        let mut config = ServiceConfig::default();
        config.pipeline.order = 1;
        assert!(config.validate().is_err());
        let mut config = ServiceConfig::default();
        config.param_defs[0].patterns[0].pattern = "(".into();
        assert!(config.validate().is_err());
    }
}
