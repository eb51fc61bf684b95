use regex::{Regex, RegexBuilder};

use super::SimulationError;

/// Cleans raw completions for one speaker.
///
/// Steps, in order: drop a leading `<self>:` prefix, cut at the first
/// `<self>:` or `<other>:` marker, strip fenced and indented code, drop the
/// trailing sentence fragment, collapse whitespace.
#[derive(Debug, Clone)]
pub struct Cleaner {
    leading_self: Regex,
    marker: Regex,
}

fn fenced_code() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)```.*?(?:```|\z)").expect("valid regex"))
}

fn indented_code() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^(?: {4}|\t).*$").expect("valid regex"))
}

fn sentence_end() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"[.!?…]+["'”’)\]]*"#).expect("valid regex"))
}

impl Cleaner {
    pub fn new(self_name: &str, other_name: &str) -> Self {
        let name = |n: &str| regex::escape(n.trim()).replace(' ', r"\s+");
        let leading_self = RegexBuilder::new(&format!(r"^\s*{}\s*:", name(self_name)))
            .case_insensitive(true)
            .build()
            .expect("escaped names form a valid regex");
        let marker = RegexBuilder::new(&format!(
            r"(?:{}|{})\s*:",
            name(other_name),
            name(self_name)
        ))
        .case_insensitive(true)
        .build()
        .expect("escaped names form a valid regex");
        Cleaner {
            leading_self,
            marker,
        }
    }

    pub fn clean(&self, raw: &str) -> Result<String, SimulationError> {
        let text = match self.leading_self.find(raw) {
            Some(m) => &raw[m.end()..],
            None => raw,
        };
        let text = match self.marker.find(text) {
            Some(m) => &text[..m.start()],
            None => text,
        };
        let text = fenced_code().replace_all(text, "");
        let text = indented_code().replace_all(&text, "");
        let text = match sentence_end().find_iter(&text).last() {
            Some(m) => &text[..m.end()],
            None => &text[..],
        };
        let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ");
        if collapsed.is_empty() {
            Err(SimulationError::EmptyAfterClean)
        } else {
            Ok(collapsed)
        }
    }
}

pub fn postprocess(raw: &str, self_name: &str, other_name: &str) -> Result<String, SimulationError> {
    Cleaner::new(self_name, other_name).clean(raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncates_at_other_speaker() {
        assert_eq!(
            postprocess("I want a sword.\nShop keeper: What kind", "Peasant", "Shop keeper").unwrap(),
            "I want a sword."
        );
    }

    #[test]
    fn clean_input_unchanged() {
        assert_eq!(postprocess("Hello there.", "A", "B").unwrap(), "Hello there.");
    }

    #[test]
    fn strips_fenced_code() {
        assert_eq!(
            postprocess("Sure, here is code:\n```\nx=1\n```", "A", "B").unwrap(),
            "Sure, here is code:"
        );
        assert_eq!(
            postprocess("Fine. ```python\nprint(1)", "A", "B").unwrap(),
            "Fine."
        );
    }

    #[test]
    fn strips_indented_code() {
        assert_eq!(
            postprocess("Look at this.\n    let x = 1;\nThat is all.", "A", "B").unwrap(),
            "Look at this. That is all."
        );
    }

    #[test]
    fn drops_trailing_fragment() {
        assert_eq!(
            postprocess("Good day to you. What kind of sword do you", "Shop keeper", "Knight")
                .unwrap(),
            "Good day to you."
        );
        assert_eq!(postprocess("He said \"go!\" and left", "A", "B").unwrap(), "He said \"go!\"");
        assert_eq!(postprocess("no punctuation at all", "A", "B").unwrap(), "no punctuation at all");
    }

    #[test]
    fn own_prefix_and_later_own_marker() {
        assert_eq!(
            postprocess("Doctor: How is the wound?\nDoctor: And", "Doctor", "Ghost").unwrap(),
            "How is the wound?"
        );
        assert_eq!(
            postprocess("genie from lamp : hi there! GHOST: boo", "Genie from lamp", "Ghost").unwrap(),
            "hi there!"
        );
    }

    #[test]
    fn empty_after_clean() {
        assert_eq!(
            postprocess("Shop keeper: ", "Knight", "Shop keeper"),
            Err(SimulationError::EmptyAfterClean)
        );
        assert_eq!(postprocess("```\ncode\n```", "A", "B"), Err(SimulationError::EmptyAfterClean));
        assert_eq!(postprocess("   ", "A", "B"), Err(SimulationError::EmptyAfterClean));
    }
}
