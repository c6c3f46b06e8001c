//! Editable prompt templates.
//!
//! Defaults are compiled in from `assets/prompts/`. A directory containing
//! files with the same names overrides them one by one. Placeholders are
//! written `{{name}}`.

use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template(String);

impl Template {
    pub fn new(text: impl Into<String>) -> Self {
        Template(text.into())
    }

    pub fn text(&self) -> &str {
        &self.0
    }

    /// Replaces each `{{key}}` with its value. Unknown placeholders are left as is.
    pub fn render(&self, vars: &[(&str, &str)]) -> String {
        let mut out = String::with_capacity(self.0.len());
        let mut rest = self.0.as_str();
        while let Some(open) = rest.find("{{") {
            out.push_str(&rest[..open]);
            let after = &rest[open + 2..];
            match after.find("}}") {
                Some(close) => {
                    let key = after[..close].trim();
                    match vars.iter().find(|(k, _)| *k == key) {
                        Some((_, v)) => out.push_str(v),
                        None => out.push_str(&rest[open..open + 2 + close + 2]),
                    }
                    rest = &after[close + 2..];
                }
                None => {
                    out.push_str(&rest[open..]);
                    rest = "";
                }
            }
        }
        out.push_str(rest);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    /// Turn summarization into an action node.
    pub action_node: Template,
    /// Observation decomposition and support linking.
    pub info_edge: Template,
    /// Thought rewriting at a seam.
    pub message_refine: Template,
    pub judge: Template,
    /// System message placed at the start of every exported SFT example.
    pub agent_system: Template,
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            action_node: Template::new(include_str!("../assets/prompts/action_node.txt")),
            info_edge: Template::new(include_str!("../assets/prompts/info_edge.txt")),
            message_refine: Template::new(include_str!("../assets/prompts/message_refine.txt")),
            judge: Template::new(include_str!("../assets/prompts/judge.txt")),
            agent_system: Template::new(include_str!("../assets/prompts/agent_system.txt")),
        }
    }
}

impl PromptSet {
    pub const FILES: [&'static str; 5] =
        ["action_node.txt", "info_edge.txt", "message_refine.txt", "judge.txt", "agent_system.txt"];

    /// Defaults overridden by whichever template files exist in `dir`.
    pub fn from_dir(dir: &Path) -> std::io::Result<Self> {
        let mut set = PromptSet::default();
        for name in Self::FILES {
            let path = dir.join(name);
            if !path.exists() {
                continue;
            }
            let text = std::fs::read_to_string(&path)?;
            let slot = match name {
                "action_node.txt" => &mut set.action_node,
                "info_edge.txt" => &mut set.info_edge,
                "message_refine.txt" => &mut set.message_refine,
                "judge.txt" => &mut set.judge,
                _ => &mut set.agent_system,
            };
            *slot = Template::new(text);
        }
        Ok(set)
    }
}
