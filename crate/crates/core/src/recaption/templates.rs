//! Prompt templates with `{slot}` placeholders.

use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::RecaptionError;

pub const STYLE_PREFIX_INSTRUCTION: &str = "Begin your description with \"This is\" followed by the overall style \
of the image, for example \"This is a black and white photograph of ...\" or \"This is a digital illustration of ...\".";

pub const NO_SPECULATION_CLAUSE: &str = "Describe only what is visible. Do not speculate about mood, atmosphere, \
emotions, intentions, history, purpose or anything else that cannot be seen directly, and avoid phrases such as \
\"a sense of\", \"evokes\" or \"suggests\". Do not mention things that are absent.";

pub const NO_TRANSCRIPTION_CLAUSE: &str = "Do not transcribe, quote or spell out any text, letters, words, signs, \
logos or numbers that appear in the image. If text is present, say only that there is text, without its content.";

const DEFAULT_DESCRIBE: &str = "{style_prefix_instruction}
Describe this image in detail: every visible object, person, animal and background element, with colors, \
materials, positions and how they relate to each other.
{no_speculation_clause}
{no_transcription_clause}";

const DEFAULT_PASS1: &str = "Below are a detailed description of an image and the original web caption that \
accompanied it.

Description:
\"\"\"
{description}
\"\"\"

Web caption:
\"\"\"
{web_caption}
\"\"\"

Extract a list of concise categories of objects, people, animals and scene elements that could be located in the \
image with bounding boxes. Keep informative attributes and proper names from either text. Output one category per \
line and nothing else.";

const DEFAULT_PASS2: &str = "Break each of the phrases below into its constituent parts: the basic standalone \
nouns and simple concepts it is made of. For example, a chocolate cake with ganache drip yields cake, chocolate, \
ganache and drip.

Phrases:
\"\"\"
{phrase_list}
\"\"\"

Output one item per line and nothing else.";

const DEFAULT_VERIFY: &str = "Does this image show {caption}? Answer yes or no.";

fn slot_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_]+)\}").expect("static regex"))
}

/// A template whose named slots each occur exactly once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Template(String);

impl Template {
    pub fn new(text: impl Into<String>, slots: &[&str]) -> Result<Self, RecaptionError> {
        let t = Template(text.into());
        t.check(slots)?;
        Ok(t)
    }

    pub fn check(&self, slots: &[&str]) -> Result<(), RecaptionError> {
        for slot in slots {
            let n = self.0.matches(&format!("{{{slot}}}")).count();
            if n != 1 {
                return Err(RecaptionError::Template(format!("slot {{{slot}}} appears {n} times, expected once")));
            }
        }
        Ok(())
    }

    pub fn text(&self) -> &str {
        &self.0
    }

    /// Single-pass substitution: slot values are never re-expanded.
    pub fn fill(&self, values: &[(&str, &str)]) -> String {
        slot_regex()
            .replace_all(&self.0, |caps: &regex::Captures<'_>| {
                let name = &caps[1];
                values.iter().find(|(k, _)| *k == name).map_or_else(|| caps[0].to_string(), |(_, v)| v.to_string())
            })
            .into_owned()
    }
}

pub const DESCRIBE_SLOTS: &[&str] = &["style_prefix_instruction", "no_speculation_clause", "no_transcription_clause"];
pub const PASS1_SLOTS: &[&str] = &["description", "web_caption"];
pub const PASS2_SLOTS: &[&str] = &["phrase_list"];
pub const VERIFY_SLOTS: &[&str] = &["caption"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub describe: Template,
    pub summarize_pass1: Template,
    pub summarize_pass2: Template,
    pub verify: Template,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            describe: Template(DEFAULT_DESCRIBE.into()),
            summarize_pass1: Template(DEFAULT_PASS1.into()),
            summarize_pass2: Template(DEFAULT_PASS2.into()),
            verify: Template(DEFAULT_VERIFY.into()),
        }
    }
}

impl PromptTemplates {
    pub fn check(&self) -> Result<(), RecaptionError> {
        self.describe.check(DESCRIBE_SLOTS)?;
        self.summarize_pass1.check(PASS1_SLOTS)?;
        self.summarize_pass2.check(PASS2_SLOTS)?;
        self.verify.check(VERIFY_SLOTS)
    }

    /// Loads `describe.txt`, `summarize_pass1.txt`, `summarize_pass2.txt` and
    /// `verify.txt` from `dir`; missing files keep the built-in defaults.
    pub fn load_dir(dir: &Path) -> Result<Self, RecaptionError> {
        let mut t = PromptTemplates::default();
        let slots: [(&str, &mut Template, &[&str]); 4] = [
            ("describe.txt", &mut t.describe, DESCRIBE_SLOTS),
            ("summarize_pass1.txt", &mut t.summarize_pass1, PASS1_SLOTS),
            ("summarize_pass2.txt", &mut t.summarize_pass2, PASS2_SLOTS),
            ("verify.txt", &mut t.verify, VERIFY_SLOTS),
        ];
        for (file, target, names) in slots {
            let path = dir.join(file);
            if path.exists() {
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| RecaptionError::Template(format!("{}: {e}", path.display())))?;
                *target = Template::new(text.trim_end().to_string(), names)
                    .map_err(|e| RecaptionError::Template(format!("{}: {e}", path.display())))?;
            }
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_have_each_slot_once() {
        PromptTemplates::default().check().unwrap();
    }

    #[test]
    fn duplicate_or_missing_slot_rejected() {
        assert!(Template::new("{caption} and {caption}", VERIFY_SLOTS).is_err());
        assert!(Template::new("no slot here", VERIFY_SLOTS).is_err());
    }

    #[test]
    fn fill_is_single_pass() {
        let t = Template::new("Does this image show {caption}?", VERIFY_SLOTS).unwrap();
        assert_eq!(t.fill(&[("caption", "a {caption}")]), "Does this image show a {caption}?");
    }

    #[test]
    fn load_dir_overrides_selected_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("verify.txt"), "Is there {caption} here?\n").unwrap();
        let t = PromptTemplates::load_dir(dir.path()).unwrap();
        assert_eq!(t.verify.text(), "Is there {caption} here?");
        assert_eq!(t.describe, PromptTemplates::default().describe);

        std::fs::write(dir.path().join("verify.txt"), "Is there a cat?").unwrap();
        assert!(PromptTemplates::load_dir(dir.path()).is_err());
    }
}
