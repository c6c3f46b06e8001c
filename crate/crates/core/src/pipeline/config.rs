use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::gateway::{EndpointConfig, Endpoint, Gateway, HttpTransport, LlmRole, MockScript, MockTransport, Transport};
use crate::prompts::PromptSet;
use crate::rewrite::{AllDisqualifiedPolicy, ExportMode, RewriteOptions, ScoreUnavailablePolicy};
use crate::trajectory::{PassRateBounds, DEFAULT_SAMPLES_PER_QUERY};

/// Which passing trajectories of a kept query go on to pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardPolicy {
    #[default]
    AllPassing,
    FirstPassing,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointsConfig {
    pub extractor: Option<EndpointConfig>,
    pub rewriter: Option<EndpointConfig>,
    pub scorer: Option<EndpointConfig>,
    pub judge: Option<EndpointConfig>,
}

impl EndpointsConfig {
    pub fn get(&self, role: LlmRole) -> Option<&EndpointConfig> {
        match role {
            LlmRole::Extractor => self.extractor.as_ref(),
            LlmRole::Rewriter => self.rewriter.as_ref(),
            LlmRole::Scorer => self.scorer.as_ref(),
            LlmRole::Judge => self.judge.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewriteSection {
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub on_all_disqualified: AllDisqualifiedPolicy,
    #[serde(default)]
    pub on_score_unavailable: ScoreUnavailablePolicy,
    #[serde(default = "default_span")]
    pub screen_span: usize,
}

impl Default for RewriteSection {
    fn default() -> Self {
        RewriteSection {
            temperature: None,
            on_all_disqualified: AllDisqualifiedPolicy::default(),
            on_score_unavailable: ScoreUnavailablePolicy::default(),
            screen_span: default_span(),
        }
    }
}

fn default_span() -> usize {
    8
}
fn default_k() -> usize {
    DEFAULT_SAMPLES_PER_QUERY
}
fn default_three() -> u32 {
    3
}
fn default_max_rounds() -> u32 {
    crate::metrics::DEFAULT_MAX_ROUNDS
}
fn default_workers() -> usize {
    4
}
fn default_modes() -> Vec<ExportMode> {
    vec![ExportMode::Eff, ExportMode::Hybrid]
}

/// Pipeline configuration, read from TOML. Relative paths are resolved
/// against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Trajectory JSONL.
    pub input: PathBuf,
    /// QA records for pass-rate filtering. Without it every input trajectory
    /// is treated as already filtered.
    #[serde(default)]
    pub qa: Option<PathBuf>,
    /// Output directory, used when the command line gives none.
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub mock: bool,
    #[serde(default)]
    pub mock_script: Option<PathBuf>,
    /// Expected samples per query. Pass rates use the actual group size.
    #[serde(default = "default_k")]
    pub samples_per_query: usize,
    #[serde(default)]
    pub pass_rate: PassRateBounds,
    #[serde(default)]
    pub forward: ForwardPolicy,
    #[serde(default = "default_three")]
    pub vote_runs: u32,
    #[serde(default = "default_three")]
    pub rewrite_candidates: u32,
    #[serde(default)]
    pub rewrite: RewriteSection,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: u32,
    /// Trajectories processed concurrently.
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub workspace_cap: Option<usize>,
    #[serde(default = "default_modes")]
    pub export_modes: Vec<ExportMode>,
    #[serde(default)]
    pub prompts_dir: Option<PathBuf>,
    #[serde(default)]
    pub endpoints: EndpointsConfig,
}

impl PipelineConfig {
    /// A config for `input` with every other setting at its default.
    pub fn for_input(input: impl Into<PathBuf>) -> Self {
        toml::from_str::<PipelineConfig>("input = \"\"").map(|c| PipelineConfig { input: input.into(), ..c }).expect("defaults parse")
    }

    pub fn from_toml(text: &str, base: &Path) -> Result<Self, PipelineError> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.resolve(base);
        cfg.interpolate_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("reading {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.input);
        for p in [&mut self.qa, &mut self.out, &mut self.mock_script, &mut self.prompts_dir].into_iter().flatten() {
            fix(p);
        }
    }

    /// `api_key_env = "${NAME}"` is accepted as a spelling of `NAME`.
    fn interpolate_env(&mut self) -> Result<(), PipelineError> {
        for ep in [
            &mut self.endpoints.extractor,
            &mut self.endpoints.rewriter,
            &mut self.endpoints.scorer,
            &mut self.endpoints.judge,
        ]
        .into_iter()
        .flatten()
        {
            let name = ep.api_key_env.trim();
            if let Some(inner) = name.strip_prefix("${") {
                let inner = inner
                    .strip_suffix('}')
                    .ok_or_else(|| PipelineError::Config(format!("unterminated `{name}` in api_key_env")))?;
                ep.api_key_env = inner.to_string();
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.vote_runs != 3 {
            return bad(format!("vote_runs must be 3 (two-of-three vote), got {}", self.vote_runs));
        }
        if self.rewrite_candidates < 1 {
            return bad("rewrite_candidates must be at least 1".into());
        }
        if self.samples_per_query < 1 {
            return bad("samples_per_query must be at least 1".into());
        }
        if self.max_rounds < 1 {
            return bad("max_rounds must be at least 1".into());
        }
        if self.workers < 1 {
            return bad("workers must be at least 1".into());
        }
        let b = self.pass_rate;
        if !(0.0..=1.0).contains(&b.lower_exclusive) || !(0.0..=1.0).contains(&b.upper_inclusive) || b.lower_exclusive >= b.upper_inclusive {
            return bad(format!("pass_rate bounds ({}, {}] are not ordered within [0, 1]", b.lower_exclusive, b.upper_inclusive));
        }
        let modes: BTreeSet<_> = self.export_modes.iter().map(|m| m.file_name()).collect();
        if modes.len() != self.export_modes.len() {
            return bad("export_modes lists a mode twice".into());
        }
        for role in LlmRole::ALL {
            if let Some(ep) = self.endpoints.get(role) {
                ep.validate().map_err(|e| PipelineError::Config(format!("endpoints.{role}: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn rewrite_options(&self) -> RewriteOptions {
        RewriteOptions {
            candidates: self.rewrite_candidates,
            temperature: self.rewrite.temperature,
            on_all_disqualified: self.rewrite.on_all_disqualified,
            on_score_unavailable: self.rewrite.on_score_unavailable,
            screen_span: self.rewrite.screen_span,
        }
    }

    pub fn prompts(&self) -> Result<PromptSet, PipelineError> {
        match &self.prompts_dir {
            Some(dir) => PromptSet::from_dir(dir)
                .map_err(|e| PipelineError::Config(format!("prompts_dir {}: {e}", dir.display()))),
            None => Ok(PromptSet::default()),
        }
    }

    pub fn load_mock_script(&self) -> Result<MockScript, PipelineError> {
        let path = self
            .mock_script
            .as_ref()
            .ok_or_else(|| PipelineError::Config("mock mode needs `mock_script`".into()))?;
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("reading mock script {}: {e}", path.display())))?;
        MockScript::from_json(&text).map_err(|e| PipelineError::Config(format!("mock script {}: {e}", path.display())))
    }
}

/// Gateway for a run, plus the mock transport when one is used.
pub struct Connection {
    pub gateway: Gateway,
    pub mock: Option<Arc<MockTransport>>,
}

/// Builds the gateway. In mock mode every role is served by the configured
/// script; otherwise each role needs an endpoint and its API key must be set.
pub fn connect(cfg: &PipelineConfig, mock: bool) -> Result<Connection, PipelineError> {
    let prompts = cfg.prompts()?;
    if mock || cfg.mock {
        let script = cfg.load_mock_script()?;
        let (gateway, transport) = Gateway::mock(script).map_err(|e| PipelineError::Config(e.to_string()))?;
        return Ok(Connection { gateway: gateway.with_prompts(prompts), mock: Some(transport) });
    }
    let transport: Arc<dyn Transport> = Arc::new(HttpTransport::new());
    let endpoint = |role: LlmRole| -> Result<Endpoint, PipelineError> {
        let ep = cfg
            .endpoints
            .get(role)
            .ok_or_else(|| PipelineError::Config(format!("missing [endpoints.{role}] (or run with --mock)")))?;
        ep.api_key().map_err(|e| PipelineError::Endpoint(format!("{role}: {e}")))?;
        Endpoint::new(role, ep.clone(), transport.clone()).map_err(|e| PipelineError::Config(format!("{role}: {e}")))
    };
    let gateway = Gateway {
        extractor: endpoint(LlmRole::Extractor)?,
        rewriter: endpoint(LlmRole::Rewriter)?,
        scorer: endpoint(LlmRole::Scorer)?,
        judge: endpoint(LlmRole::Judge)?,
        prompts,
    };
    Ok(Connection { gateway, mock: None })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_path_resolution() {
        let cfg = PipelineConfig::from_toml("input = \"traj.jsonl\"\nmock_script = \"/abs/m.json\"", Path::new("/base")).unwrap();
        assert_eq!(cfg.input, PathBuf::from("/base/traj.jsonl"));
        assert_eq!(cfg.mock_script, Some(PathBuf::from("/abs/m.json")));
        assert_eq!(cfg.samples_per_query, 4);
        assert_eq!((cfg.vote_runs, cfg.rewrite_candidates, cfg.max_rounds), (3, 3, 100));
        assert_eq!(cfg.pass_rate, PassRateBounds::default());
        assert_eq!(cfg.export_modes, [ExportMode::Eff, ExportMode::Hybrid]);
        assert_eq!(PipelineConfig::for_input("x").samples_per_query, 4);
    }

    #[test]
    fn rejects_bad_settings() {
        let base = Path::new(".");
        for text in [
            "input = \"a\"\nvote_runs = 5",
            "input = \"a\"\n[pass_rate]\nlower_exclusive = 0.6\nupper_inclusive = 0.5",
            "input = \"a\"\nunknown = 1",
            "input = \"a\"\nworkers = 0",
            "input = \"a\"\n[endpoints.judge]\nbase_url = \"http://x\"\nmodel_name = \"m\"\nmax_inflight = 0",
        ] {
            assert!(matches!(PipelineConfig::from_toml(text, base), Err(PipelineError::Config(_))), "{text}");
        }
    }

    #[test]
    fn api_key_env_interpolation() {
        let text = "input = \"a\"\n[endpoints.scorer]\nbase_url = \"http://x\"\nmodel_name = \"m\"\napi_key_env = \"${SCORER_KEY}\"";
        let cfg = PipelineConfig::from_toml(text, Path::new(".")).unwrap();
        assert_eq!(cfg.endpoints.scorer.unwrap().api_key_env, "SCORER_KEY");
    }

    #[test]
    fn missing_key_is_an_endpoint_error() {
        let mut cfg = PipelineConfig::for_input("a");
        let mut ep = EndpointConfig::new("http://127.0.0.1:9", "m");
        ep.api_key_env = "TRAJCLIP_TEST_KEY_THAT_IS_NOT_SET".into();
        cfg.endpoints = EndpointsConfig {
            extractor: Some(ep.clone()),
            rewriter: Some(ep.clone()),
            scorer: Some(ep.clone()),
            judge: Some(ep),
        };
        assert!(matches!(connect(&cfg, false), Err(PipelineError::Endpoint(_))));
        cfg.endpoints.judge = None;
        for ep in [&mut cfg.endpoints.extractor, &mut cfg.endpoints.rewriter, &mut cfg.endpoints.scorer] {
            ep.as_mut().unwrap().api_key_env.clear();
        }
        assert!(matches!(connect(&cfg, false), Err(PipelineError::Config(_))));
    }
}
