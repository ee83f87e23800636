//! Shared wiring: model backend, sandbox, cache and run store.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use tabrule_core::agent::{Agent, Generator, ModelConfig, OllamaClient, PromptTemplate, ResponseCache, ScriptedModel};
use tabrule_core::dataset::EvidenceAdapter;
use tabrule_core::rule_loop::{Corpus, Evaluator, LoopConfig, RunSession, RunStore};
use tabrule_core::sandbox::{Sandbox, SandboxLimits};
use tabrule_core::Result;

pub enum Backend {
    Live(ModelConfig),
    Scripted(ScriptedModel),
}

pub struct Settings {
    pub root: PathBuf,
    pub backend: Backend,
    pub parallelism: usize,
    pub limits: SandboxLimits,
    /// Defaults for new runs.
    pub loop_config: LoopConfig,
    pub cache: bool,
    pub bypass_cache: bool,
}

pub struct Engine {
    store: RunStore,
    generator: Arc<dyn Generator>,
    cache: Option<Arc<ResponseCache>>,
    sandbox: Arc<Sandbox>,
    parallelism: usize,
    bypass_cache: bool,
    defaults: LoopConfig,
}

impl Engine {
    pub fn new(settings: Settings) -> Result<Engine> {
        let store = RunStore::new(&settings.root)?;
        let generator: Arc<dyn Generator> = match settings.backend {
            Backend::Live(cfg) => Arc::new(OllamaClient::new(cfg)?),
            Backend::Scripted(m) => Arc::new(m),
        };
        let cache = if settings.cache {
            Some(Arc::new(ResponseCache::open(&settings.root.join("responses.jsonl"))?))
        } else {
            None
        };
        Ok(Engine {
            store,
            generator,
            cache,
            sandbox: Arc::new(Sandbox::new(settings.limits)?),
            parallelism: settings.parallelism.max(1),
            bypass_cache: settings.bypass_cache,
            defaults: settings.loop_config,
        })
    }

    pub fn store(&self) -> &RunStore {
        &self.store
    }

    pub fn model_tag(&self) -> String {
        self.generator.model_tag()
    }

    pub fn defaults(&self) -> &LoopConfig {
        &self.defaults
    }

    pub fn evaluator(&self, template: &PromptTemplate) -> Evaluator {
        let mut agent = Agent::new(self.generator.clone()).with_parallelism(self.parallelism).bypass_cache(self.bypass_cache);
        if let Some(c) = &self.cache {
            agent = agent.with_cache(c.clone());
        }
        Evaluator::new(agent, self.sandbox.clone(), template.clone())
    }

    /// Loads a dataset and starts a run over its filtered instances.
    pub fn create_run(&self, dataset: &Path, adapter: EvidenceAdapter, run_id: Option<&str>, config: LoopConfig) -> Result<RunSession> {
        let corpus = Corpus::load(dataset, adapter, config.min_freq)?;
        let id = match run_id {
            Some(id) => id.to_string(),
            None => self.store.next_run_id()?,
        };
        self.store.create(&id, Arc::new(corpus), &self.model_tag(), config)
    }
}
