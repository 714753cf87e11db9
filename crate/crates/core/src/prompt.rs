//! Level-adapted prompt assembly.
//!
//! A composed prompt is laid out as: level directive, retrieved reference
//! material (rank order, with sources), conversation history (oldest
//! first), then the question. When the token budget is exceeded, the
//! oldest history turns go first, then the lowest-ranked chunks. The
//! directive and the question are never dropped.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rag::RetrievedChunk;
use crate::session::{ChatTurn, Role};

/// Pedagogical explanation depth chosen by the learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResponseLevel {
    SimpleEnglish,
    LowerSecondary,
    UpperSecondary,
    Technical,
}

impl ResponseLevel {
    pub const ALL: [ResponseLevel; 4] = [
        ResponseLevel::SimpleEnglish,
        ResponseLevel::LowerSecondary,
        ResponseLevel::UpperSecondary,
        ResponseLevel::Technical,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ResponseLevel::SimpleEnglish => "SimpleEnglish",
            ResponseLevel::LowerSecondary => "LowerSecondary",
            ResponseLevel::UpperSecondary => "UpperSecondary",
            ResponseLevel::Technical => "Technical",
        }
    }

    /// The machine-readable marker, e.g. `[[LEVEL:Technical]]`.
    pub fn marker(self) -> String {
        format!("{MARKER_OPEN}{}]]", self.name())
    }
}

impl fmt::Display for ResponseLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown response level '{0}' (expected SimpleEnglish, LowerSecondary, UpperSecondary or Technical)")]
pub struct UnknownLevel(pub String);

impl FromStr for ResponseLevel {
    type Err = UnknownLevel;

    /// Case-insensitive; ignores `-`, `_` and spaces ("simple-english" works).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let folded: String = s
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | ' '))
            .flat_map(char::to_lowercase)
            .collect();
        ResponseLevel::ALL
            .into_iter()
            .find(|l| l.name().to_lowercase() == folded)
            .ok_or_else(|| UnknownLevel(s.to_string()))
    }
}

pub const MARKER_OPEN: &str = "[[LEVEL:";

const SIMPLE_ENGLISH: &str = "[[LEVEL:SimpleEnglish]]
You are a patient tutor explaining to a learner who is still building their English.
- Use short sentences and everyday words. Avoid jargon; if a subject word is unavoidable, explain it in plain words right away.
- Give one idea at a time, in small numbered steps.
- Use a familiar, intuitive comparison from daily life where it helps.
- End with a one-sentence summary.";

const LOWER_SECONDARY: &str = "[[LEVEL:LowerSecondary]]
You are a tutor for a lower secondary school student.
- Use clear, simple language and introduce the basic subject terms the curriculum expects, defining each one when it first appears.
- Explain step by step, with a short worked example where it helps.
- Keep the answer to a few short paragraphs or a short numbered list.
- Finish by restating the key idea in one sentence.";

const UPPER_SECONDARY: &str = "[[LEVEL:UpperSecondary]]
You are a tutor for an upper secondary school student preparing for examinations.
- Use correct subject terminology and expect the student to know foundational vocabulary.
- Structure the explanation: state the concept, explain the mechanism or reasoning step by step, then apply it to an example.
- Mention common misconceptions and how to avoid them.
- Be precise and complete while remaining readable.";

const TECHNICAL: &str = "[[LEVEL:Technical]]
You are a subject-matter expert answering a tertiary-level or professional learner.
- Use formal, subject-specific terminology and notation without simplification.
- Give structured, rigorous reasoning: definitions, assumptions, derivation or mechanism, and limitations.
- Where relevant, include equations, quantitative relationships and edge cases.
- Prefer precision over brevity, but keep the structure easy to follow.";

/// Built-in directive for a level.
pub fn level_directive(level: ResponseLevel) -> &'static str {
    match level {
        ResponseLevel::SimpleEnglish => SIMPLE_ENGLISH,
        ResponseLevel::LowerSecondary => LOWER_SECONDARY,
        ResponseLevel::UpperSecondary => UPPER_SECONDARY,
        ResponseLevel::Technical => TECHNICAL,
    }
}

/// Directive blocks in use, possibly overridden from `<data_dir>/levels/`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelTemplates {
    blocks: [String; 4],
}

impl Default for LevelTemplates {
    fn default() -> Self {
        Self {
            blocks: ResponseLevel::ALL.map(|l| level_directive(l).to_string()),
        }
    }
}

impl LevelTemplates {
    /// Loads `<dir>/<LevelName>.txt` for each level. A file that is missing
    /// is silently replaced by the built-in; one that is unreadable, does
    /// not start with its own marker, or contains another marker falls back
    /// with a warning. Returns the templates and the warnings.
    pub fn load(dir: &Path) -> (Self, Vec<String>) {
        let mut templates = Self::default();
        let mut warnings = Vec::new();
        for (slot, level) in ResponseLevel::ALL.into_iter().enumerate() {
            let path = dir.join(format!("{}.txt", level.name()));
            if !path.exists() {
                continue;
            }
            match fs::read_to_string(&path) {
                Ok(body) => {
                    let body = body.replace("\r\n", "\n");
                    let first = body.lines().next().unwrap_or("").trim();
                    if first != level.marker() {
                        warnings.push(format!(
                            "{}: first line must be {}; using built-in directive",
                            path.display(),
                            level.marker()
                        ));
                    } else if body.matches(MARKER_OPEN).count() != 1 {
                        warnings.push(format!(
                            "{}: template must contain exactly one level marker; using built-in directive",
                            path.display()
                        ));
                    } else {
                        templates.blocks[slot] = body.trim_end().to_string();
                    }
                }
                Err(e) => warnings.push(format!(
                    "{}: unreadable ({e}); using built-in directive",
                    path.display()
                )),
            }
        }
        for w in &warnings {
            tracing::warn!("{w}");
        }
        (templates, warnings)
    }

    pub fn directive(&self, level: ResponseLevel) -> &str {
        let slot = ResponseLevel::ALL.iter().position(|l| *l == level).unwrap();
        &self.blocks[slot]
    }
}

/// Rough token count: one token per four characters, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    chars_to_tokens(text.chars().count())
}

fn chars_to_tokens(chars: usize) -> usize {
    chars.div_ceil(4)
}

/// Default prompt budget: 80% of the context window minus the generation
/// allowance.
pub fn default_budget(context_window_tokens: u32, max_new_tokens: u32) -> usize {
    let usable = (context_window_tokens as u64 * 4 / 5) as usize;
    usable.saturating_sub(max_new_tokens as usize)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposedPrompt {
    pub text: String,
    pub estimated_tokens: usize,
    pub dropped_turns: usize,
    pub dropped_chunks: usize,
    pub level: ResponseLevel,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ComposeError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("budget of {budget} tokens cannot hold the directive and query ({required} tokens)")]
    BudgetTooSmall { budget: usize, required: usize },
}

const CONTEXT_HEADER: &str = "Reference material from the learner's documents (use it when relevant and name the source):\n\n";
const HISTORY_HEADER: &str = "Conversation so far:\n";
const SECTION_BREAK: &str = "\n";

/// Keeps user-supplied text from smuggling in a second level marker.
fn neutralize(text: &str) -> String {
    text.replace(MARKER_OPEN, "[ [LEVEL:")
}

fn render_chunk(c: &RetrievedChunk) -> String {
    format!(
        "[{}] Source: {} (part {})\n{}\n\n",
        c.rank,
        c.chunk.source_name,
        c.chunk.chunk_index + 1,
        neutralize(c.chunk.text.trim())
    )
}

fn render_turn(t: &ChatTurn) -> String {
    let speaker = match t.role {
        Role::User => "Student",
        Role::Assistant => "Tutor",
    };
    format!("{speaker}: {}\n", neutralize(t.text.trim()))
}

/// Composes a prompt using the built-in directives.
pub fn compose(
    level: ResponseLevel,
    history: &[ChatTurn],
    chunks: &[RetrievedChunk],
    query: &str,
    budget_tokens: usize,
) -> Result<ComposedPrompt, ComposeError> {
    compose_with(&LevelTemplates::default(), level, history, chunks, query, budget_tokens)
}

pub fn compose_with(
    templates: &LevelTemplates,
    level: ResponseLevel,
    history: &[ChatTurn],
    chunks: &[RetrievedChunk],
    query: &str,
    budget_tokens: usize,
) -> Result<ComposedPrompt, ComposeError> {
    let query = query.trim();
    if query.is_empty() {
        return Err(ComposeError::EmptyQuery);
    }
    let head = format!("{}\n\n", templates.directive(level).trim_end());
    let tail = format!("Question:\n{}\n\nAnswer:", neutralize(query));
    let fixed_chars = head.chars().count() + tail.chars().count();
    let required = chars_to_tokens(fixed_chars);
    if required > budget_tokens {
        return Err(ComposeError::BudgetTooSmall {
            budget: budget_tokens,
            required,
        });
    }

    let mut ranked: Vec<&RetrievedChunk> = chunks.iter().collect();
    ranked.sort_by_key(|c| c.rank);
    let chunk_text: Vec<String> = ranked.iter().map(|c| render_chunk(c)).collect();
    let turn_text: Vec<String> = history.iter().map(render_turn).collect();
    let chunk_chars: Vec<usize> = chunk_text.iter().map(|s| s.chars().count()).collect();
    let turn_chars: Vec<usize> = turn_text.iter().map(|s| s.chars().count()).collect();

    let section_chars = |items: &[usize], header: &str| -> usize {
        if items.is_empty() {
            0
        } else {
            header.chars().count() + items.iter().sum::<usize>() + SECTION_BREAK.len()
        }
    };

    // Turns kept are turn_text[first_turn..]; chunks kept are chunk_text[..kept_chunks].
    let mut first_turn = 0;
    let mut kept_chunks = chunk_text.len();
    let total_tokens = |first_turn: usize, kept_chunks: usize| {
        chars_to_tokens(
            fixed_chars
                + section_chars(&chunk_chars[..kept_chunks], CONTEXT_HEADER)
                + section_chars(&turn_chars[first_turn..], HISTORY_HEADER),
        )
    };
    while total_tokens(first_turn, kept_chunks) > budget_tokens {
        if first_turn < turn_text.len() {
            first_turn += 1;
        } else if kept_chunks > 0 {
            kept_chunks -= 1;
        } else {
            unreachable!("fixed part already checked against the budget");
        }
    }

    let mut text = head;
    if kept_chunks > 0 {
        text.push_str(CONTEXT_HEADER);
        for c in &chunk_text[..kept_chunks] {
            text.push_str(c);
        }
        text.push_str(SECTION_BREAK);
    }
    if first_turn < turn_text.len() {
        text.push_str(HISTORY_HEADER);
        for t in &turn_text[first_turn..] {
            text.push_str(t);
        }
        text.push_str(SECTION_BREAK);
    }
    text.push_str(&tail);

    let estimated_tokens = estimate_tokens(&text);
    debug_assert_eq!(estimated_tokens, total_tokens(first_turn, kept_chunks));
    Ok(ComposedPrompt {
        text,
        estimated_tokens,
        dropped_turns: first_turn,
        dropped_chunks: chunk_text.len() - kept_chunks,
        level,
    })
}
