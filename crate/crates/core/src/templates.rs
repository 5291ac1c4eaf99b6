//! Versioned prompt templates. The identifier of every template used is
//! recorded in run output so a record can be traced back to its prompts.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Template {
    pub id: &'static str,
    pub text: &'static str,
}

impl Template {
    /// Replaces `{{name}}` placeholders.
    pub fn render(&self, vars: &[(&str, &str)]) -> String {
        let mut out = self.text.to_string();
        for (name, value) in vars {
            out = out.replace(&format!("{{{{{name}}}}}"), value);
        }
        out
    }
}

pub const SCENE: Template = Template { id: "scene.v1", text: include_str!("../templates/scene.v1.txt") };
pub const TRACES: Template = Template { id: "traces.v1", text: include_str!("../templates/traces.v1.txt") };
pub const GHA: Template = Template { id: "gha.v1", text: include_str!("../templates/gha.v1.txt") };
pub const NMA: Template = Template { id: "nma.v1", text: include_str!("../templates/nma.v1.txt") };
pub const COMPRESS: Template =
    Template { id: "compress.v1", text: include_str!("../templates/compress.v1.txt") };
pub const ARBITER: Template =
    Template { id: "arbiter.v1", text: include_str!("../templates/arbiter.v1.txt") };
pub const DIAGNOSE: Template =
    Template { id: "diagnose.v1", text: include_str!("../templates/diagnose.v1.txt") };

/// Identifier of the debate template pair.
pub const DEBATE_ID: &str = "gha.v1+nma.v1";
