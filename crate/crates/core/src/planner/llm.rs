use serde::{Deserialize, Serialize};

use super::{AtomicTask, TaskCategory};
use crate::error::{Error, Result};
use crate::remote::{self, HttpConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Sent with every request so the server-side model sees the task taxonomy
/// and the three reasoning steps.
pub const PROMPT_TEMPLATE: &str = "You are an assistant that plans edits of a dynamic 3D scene.
Atomic task categories:
- ColorAdjustment, e.g. \"Repaint the wall blue\"
- TextureReplacement, e.g. \"Replace wooden flooring with marble\"
- MaterialProperties, e.g. \"Change from metal to wood\"
- LocalGeometryModification, e.g. \"Add a hat to the cat\"
- CategorySwapping, e.g. \"Convert the dog into a cat\"
- StyleTransfer, e.g. \"Change to cyberpunk style\"
- BackgroundEditing, e.g. \"Set the background to a forest\"
Step 1: ground abstract phrases in the instruction into concrete imperative sentences.
Step 2: segment the sentences into atomic tasks, one category each.
Step 3: note which task introduces an object another task refers to, and how hard each task is.
Reply with JSON only:
{\"grounded\": [\"<sentence>\", ...], \"tasks\": [{\"category\": \"<category>\", \"prompt\": \"<imperative>\", \"subject\": \"<noun phrase>\", \"introduces\": \"<noun phrase or null>\"}]}";

#[derive(Debug, Clone, Serialize)]
struct PlanRequest<'a> {
    instruction: &'a str,
    schema_version: u32,
    template: &'a str,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmTask {
    pub category: TaskCategory,
    pub prompt: String,
    pub subject: String,
    #[serde(default)]
    pub introduces: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct LlmReply {
    pub grounded: Vec<String>,
    pub tasks: Vec<LlmTask>,
}

impl LlmReply {
    fn validate(&self) -> Result<()> {
        if self.grounded.is_empty() || self.grounded.iter().any(|s| s.trim().is_empty()) {
            return Err(Error::MalformedResponse("grounded must be a non-empty list of sentences".into()));
        }
        for t in &self.tasks {
            if t.prompt.trim().is_empty() || t.subject.trim().is_empty() {
                return Err(Error::MalformedResponse(format!("task {:?} has an empty prompt or subject", t.prompt)));
            }
        }
        Ok(())
    }

    /// Sentences joined into one paragraph, each ending in a period.
    pub fn grounded_text(&self) -> String {
        self.grounded
            .iter()
            .map(|s| {
                let s = s.trim();
                if s.ends_with(['.', '!', '?']) {
                    s.to_string()
                } else {
                    format!("{s}.")
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn into_tasks(self) -> Vec<AtomicTask> {
        self.tasks
            .into_iter()
            .map(|t| {
                let intro = t.introduces.filter(|s| !s.trim().is_empty());
                AtomicTask::new(t.category, t.prompt.trim(), t.subject.trim(), intro.as_deref())
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmBackend {
    pub endpoint: String,
    pub http: HttpConfig,
}

impl LlmBackend {
    pub fn new(endpoint: &str) -> Self {
        LlmBackend {
            endpoint: endpoint.to_string(),
            http: HttpConfig::default(),
        }
    }

    /// One validated round trip; any schema violation fails the whole reply.
    pub fn request(&self, instruction: &str) -> Result<LlmReply> {
        let body = PlanRequest {
            instruction,
            schema_version: SCHEMA_VERSION,
            template: PROMPT_TEMPLATE,
        };
        let reply: LlmReply = remote::post_json(&remote::join(&self.endpoint, "plan"), &body, &self.http)?;
        reply.validate()?;
        Ok(reply)
    }
}
