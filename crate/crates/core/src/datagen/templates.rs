use std::collections::BTreeMap;
use std::io::Write;
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use super::DatagenError;

const SYSTEM_ROLE: &str =
    "You are a language model expert in suggesting image captions for different object categories.";

const USER_INSTRUCTION: &str = "suggest ten captions for images of a [{subject}]. The caption should provide a [{TASK}]. DO NOT add any unnecessary adjectives or emotional words in the caption. Please keep the caption factual and terse but complete. DO NOT add any unnecessary speculation about the things that are not part of the image, such as \"the image is inspiring to viewers\" or \"seeing this makes you feel joy\". DO NOT add things such as \"creates a unique and entertaining visual\", as these descriptions are interpretations and not a part of the image itself. The description should be purely factual, with no subjective speculation.";

const RIGID_EXAMPLES: &str = "Follow this guidance for the captions:
1. Generate captions of [{object_description}] in different backgrounds and scenes.
2. Generate captions of [{object_description}] with another object in the scene.

Example captions for \"White plastic bottle\" are:
1. A white plastic bottle on a roadside cobblestone with stone bricks.
2. A white plastic bottle is placed next to a steaming cup of coffee on a polished wooden table.

Example captions for a \"blue truck\" are:
1. A blue tank in a military storage facility with metal walls.
2. A blue tank on a desert battlefield ground, with palm trees in the background.";

const DESCRIPTION_EXAMPLES: &str = "Example caption descriptions for the category \"cat\":
1. The Siamese cat has blue almond-shaped eyes and cream-colored fur with dark chocolate points on the ears, face, paws, and tail.
2. The white fluffy Maine Coon cat with a long and bushy tail spread out beside it, and its thick fur has a mix of brown, black, and white stripes.
3. The Bengal cat with a marbled coat features a pattern of vivid orange and black spots.";

const BACKGROUND_EXAMPLES: &str = "Follow this guidance for the captions:
1. Generate captions of [{category}] in different backgrounds and scenes.
2. Generate captions of [{category}] with another object in the scene.
3. Generate captions of [{category}] with different stylistic representations.

Example captions for the category \"cat\" are:
1. Photo of a cat playing in a garden. The garden is filled with wildflowers.
2. A cat is sitting beside a book in a library.
3. Painting of a cat in watercolor style.";

/// Task phrase for background captions.
pub const BACKGROUND_TASK: &str = "a description of the background";
/// Task phrase for deformable-object descriptions.
pub const DESCRIPTION_TASK: &str =
    "detailed visual information of the category, including color and subspecies";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateKind {
    /// Backgrounds for a described rigid asset.
    RigidBackground,
    /// Detailed appearance descriptions for a deformable category.
    DeformableDescription,
    /// Backgrounds for a deformable category.
    DeformableBackground,
}

/// LLM instruction text with `{name}` slots.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub kind: TemplateKind,
    pub text: String,
}

impl PromptTemplate {
    /// The instruction used for `kind`, with role framing and examples.
    pub fn standard(kind: TemplateKind) -> Self {
        let (subject, examples) = match kind {
            TemplateKind::RigidBackground => ("{object_description}", RIGID_EXAMPLES),
            TemplateKind::DeformableDescription => ("{category}", DESCRIPTION_EXAMPLES),
            TemplateKind::DeformableBackground => ("{category}", BACKGROUND_EXAMPLES),
        };
        let user = USER_INSTRUCTION.replace("{subject}", subject);
        Self {
            kind,
            text: format!(
                "Role: system, Content: {SYSTEM_ROLE}\nRole: user, Content: {user}\n\n{examples}\n"
            ),
        }
    }

    /// Slot names appearing in the template, in order of first use.
    pub fn slots(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for name in slot_spans(&self.text).map(|(_, _, n)| n) {
            if !out.iter().any(|s| s == name) {
                out.push(name.to_string());
            }
        }
        out
    }

    /// Slot values for the standard template of this kind given the object
    /// description or category name.
    pub fn standard_slots(&self, subject: &str) -> BTreeMap<String, String> {
        let (key, task) = match self.kind {
            TemplateKind::RigidBackground => ("object_description", BACKGROUND_TASK),
            TemplateKind::DeformableDescription => ("category", DESCRIPTION_TASK),
            TemplateKind::DeformableBackground => ("category", BACKGROUND_TASK),
        };
        BTreeMap::from([
            (key.to_string(), subject.to_string()),
            ("TASK".to_string(), task.to_string()),
        ])
    }

    pub fn render(&self, slots: &BTreeMap<String, String>) -> Result<String, DatagenError> {
        let mut out = String::with_capacity(self.text.len());
        let mut last = 0;
        for (start, end, name) in slot_spans(&self.text) {
            let value = slots.get(name).ok_or_else(|| DatagenError::Template {
                slot: name.to_string(),
            })?;
            out.push_str(&self.text[last..start]);
            out.push_str(value);
            last = end;
        }
        out.push_str(&self.text[last..]);
        Ok(out)
    }
}

/// `(start, end, name)` of every `{identifier}` in `text`.
fn slot_spans(text: &str) -> impl Iterator<Item = (usize, usize, &str)> {
    text.match_indices('{').filter_map(move |(start, _)| {
        let rest = &text[start + 1..];
        let close = rest.find('}')?;
        let name = &rest[..close];
        let ident = !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
        ident.then(|| (start, start + close + 2, name))
    })
}

/// Splits an LLM answer into captions, dropping list numbering and bullets.
pub fn parse_captions(response: &str) -> Vec<String> {
    response
        .lines()
        .map(|line| {
            let line = line.trim();
            let line = line.trim_start_matches(|c: char| c.is_ascii_digit());
            let line = line.strip_prefix(['.', ')']).unwrap_or(line);
            line.trim_start_matches(['-', '*', ' ']).trim().to_string()
        })
        .filter(|l| !l.is_empty())
        .collect()
}

/// Anything that turns an instruction into candidate captions.
pub trait TextCompleter {
    fn complete(&self, prompt: &str) -> Result<Vec<String>, DatagenError>;
}

/// Returns fixed responses, keyed by a substring of the prompt.
#[derive(Debug, Clone, Default)]
pub struct CannedCompleter {
    pub responses: Vec<(String, String)>,
}

impl TextCompleter for CannedCompleter {
    fn complete(&self, prompt: &str) -> Result<Vec<String>, DatagenError> {
        self.responses
            .iter()
            .find(|(key, _)| prompt.contains(key.as_str()))
            .map(|(_, answer)| parse_captions(answer))
            .ok_or_else(|| DatagenError::Completer("no canned response matches the prompt".into()))
    }
}

/// Runs an external program with the prompt on stdin and reads captions
/// from its stdout.
#[derive(Debug, Clone)]
pub struct CommandCompleter {
    pub program: String,
    pub args: Vec<String>,
}

impl TextCompleter for CommandCompleter {
    fn complete(&self, prompt: &str) -> Result<Vec<String>, DatagenError> {
        let fail = |e: std::io::Error| DatagenError::Completer(format!("{}: {e}", self.program));
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(fail)?;
        child
            .stdin
            .take()
            .expect("stdin is piped")
            .write_all(prompt.as_bytes())
            .map_err(fail)?;
        let output = child.wait_with_output().map_err(fail)?;
        if !output.status.success() {
            return Err(DatagenError::Completer(format!(
                "{} exited with {}",
                self.program, output.status
            )));
        }
        Ok(parse_captions(&String::from_utf8_lossy(&output.stdout)))
    }
}
