//! Code generation agent: prompt construction, model access and program extraction.

pub mod cache;
pub mod client;
pub mod extract;
pub mod prompt;

pub use cache::ResponseCache;
pub use client::{Agent, GenerationRequest, Generator, ModelConfig, ModelError, OllamaClient, ScriptedModel};
pub use extract::{extract_program, NoProgramFound};
pub use prompt::{build_prompt, PromptBundle, PromptTemplate, Rule, RuleOrigin, RuleSet, RuleStatus, ThinkPlacement};
