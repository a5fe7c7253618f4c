//! Failure-observation matching.
//!
//! A tool step "failed" when its observation looks like an environment error
//! rather than real tool output. The default patterns cover the feedback
//! strings the episode runner emits for unknown tools, unavailable (fake)
//! tools, and executor errors; callers can extend them with their own
//! substrings or regexes since real tool errors vary in wording.

use regex::Regex;
use thiserror::Error;

/// Substrings matched case-insensitively by [`FailurePatterns::default`].
pub const DEFAULT_FAILURE_SUBSTRINGS: [&str; 3] = [
    "unavailable tool",
    "tool execution error",
    "tool not in the list",
];

/// The observation the environment returns when an agent calls a tool that
/// is registered but deliberately unavailable. The augmentation pipeline
/// writes this exact string into generated failure steps so that the default
/// patterns recognize them.
pub fn unavailable_tool_observation(name: &str) -> String {
    format!("Error: unavailable tool '{name}'")
}

#[derive(Debug, Error)]
pub enum PatternError {
    #[error("failure pattern list must not be empty")]
    Empty,
    #[error("invalid failure regex '{pattern}': {source}")]
    BadRegex {
        pattern: String,
        source: regex::Error,
    },
}

#[derive(Debug, Clone)]
enum Matcher {
    /// Case-insensitive substring; stored lowercased.
    Substring(String),
    Pattern(Regex),
}

/// An ordered list of observation matchers deciding what counts as a tool
/// failure.
#[derive(Debug, Clone)]
pub struct FailurePatterns {
    matchers: Vec<Matcher>,
}

impl FailurePatterns {
    /// Builds a pattern set from case-insensitive substrings and regexes.
    /// At least one matcher is required.
    pub fn new<S: AsRef<str>>(substrings: &[S], regexes: &[S]) -> Result<Self, PatternError> {
        let mut matchers = Vec::with_capacity(substrings.len() + regexes.len());
        for s in substrings {
            matchers.push(Matcher::Substring(s.as_ref().to_lowercase()));
        }
        for r in regexes {
            let compiled = Regex::new(r.as_ref()).map_err(|source| PatternError::BadRegex {
                pattern: r.as_ref().to_string(),
                source,
            })?;
            matchers.push(Matcher::Pattern(compiled));
        }
        if matchers.is_empty() {
            return Err(PatternError::Empty);
        }
        Ok(Self { matchers })
    }

    pub fn is_failure(&self, observation: &str) -> bool {
        let lowered = observation.to_lowercase();
        self.matchers.iter().any(|m| match m {
            Matcher::Substring(needle) => lowered.contains(needle),
            Matcher::Pattern(re) => re.is_match(observation),
        })
    }
}

impl Default for FailurePatterns {
    fn default() -> Self {
        Self::new(&DEFAULT_FAILURE_SUBSTRINGS, &[]).expect("default patterns are non-empty")
    }
}
