//! Prompt-context assembly for multi-turn refinement.
//!
//! The full history of a trajectory is always kept by the caller. What goes
//! into the next prompt depends on the policy: every prior turn, or only the
//! `w` highest-reward turns. Selected turns keep their chronological order.
//! If the token estimate exceeds the budget, the oldest selected turns are
//! dropped and the context records how many were cut.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    /// Append every previous turn.
    Vanilla,
    /// Keep only the top-`w` turns by reward.
    #[serde(rename = "ctxmgmt")]
    ContextManagement,
}

impl std::str::FromStr for ContextMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "vanilla" => Ok(ContextMode::Vanilla),
            "ctxmgmt" | "context_management" => Ok(ContextMode::ContextManagement),
            other => Err(format!("unknown context mode {other:?} (expected vanilla or ctxmgmt)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextPolicy {
    pub mode: ContextMode,
    pub window: usize,
    pub max_context_tokens: usize,
}

impl Default for ContextPolicy {
    fn default() -> Self {
        Self {
            mode: ContextMode::ContextManagement,
            window: 4,
            max_context_tokens: 32_768,
        }
    }
}

pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// Whitespace-separated words times a factor, rounded up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WhitespaceTokenCounter {
    pub factor: f64,
}

impl Default for WhitespaceTokenCounter {
    fn default() -> Self {
        Self { factor: 1.3 }
    }
}

impl TokenCounter for WhitespaceTokenCounter {
    fn count(&self, text: &str) -> usize {
        (text.split_whitespace().count() as f64 * self.factor).ceil() as usize
    }
}

/// One turn of the external memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryTurn {
    /// Zero-based turn index.
    pub turn: usize,
    /// What the generator produced, rendered as text.
    pub candidate: String,
    pub feedback: String,
    pub reward: f64,
}

impl HistoryTurn {
    fn render(&self) -> String {
        format!(
            "### Turn {}\n{}\n### Feedback (turn {})\n{}\n",
            self.turn + 1,
            self.candidate,
            self.turn + 1,
            self.feedback
        )
    }
}

/// The prompt handed to a generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssembledContext {
    pub prompt_id: String,
    pub task: serde_json::Value,
    /// Zero-based index of the turn about to be generated.
    pub turn: usize,
    /// Turn indices included, in chronological order.
    pub selected_turns: Vec<usize>,
    pub history: Vec<HistoryTurn>,
    /// Selected turns dropped to fit the token budget.
    pub truncated_turns: usize,
    pub token_estimate: usize,
    pub text: String,
}

pub const TRUNCATION_MARKER: &str = "[earlier turns omitted to fit the context budget]";

/// Indices into `history` chosen by `policy`, in chronological order.
/// Reward ties go to the later turn.
pub fn select_turns(history: &[HistoryTurn], policy: &ContextPolicy) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..history.len()).collect();
    if policy.mode == ContextMode::ContextManagement && history.len() > policy.window {
        idx.sort_by(|&a, &b| {
            history[b]
                .reward
                .total_cmp(&history[a].reward)
                .then(history[b].turn.cmp(&history[a].turn))
        });
        idx.truncate(policy.window);
        idx.sort_by_key(|&i| history[i].turn);
    }
    idx
}

fn render(task_text: &str, turns: &[&HistoryTurn], truncated: bool) -> String {
    let mut text = String::new();
    text.push_str("## Task\n");
    text.push_str(task_text);
    text.push('\n');
    if truncated {
        text.push_str(TRUNCATION_MARKER);
        text.push('\n');
    }
    for t in turns {
        text.push_str(&t.render());
    }
    text
}

pub fn assemble_context(
    prompt_id: &str,
    task: &serde_json::Value,
    history: &[HistoryTurn],
    policy: &ContextPolicy,
    turn: usize,
    counter: &dyn TokenCounter,
) -> AssembledContext {
    let task_text = match task {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    let selected = select_turns(history, policy);
    let mut start = 0;
    let (text, tokens) = loop {
        let turns: Vec<&HistoryTurn> = selected[start..].iter().map(|&i| &history[i]).collect();
        let text = render(&task_text, &turns, start > 0);
        let tokens = counter.count(&text);
        if tokens <= policy.max_context_tokens || start == selected.len() {
            break (text, tokens);
        }
        start += 1;
    };
    let kept = &selected[start..];
    AssembledContext {
        prompt_id: prompt_id.to_string(),
        task: task.clone(),
        turn,
        selected_turns: kept.iter().map(|&i| history[i].turn).collect(),
        history: kept.iter().map(|&i| history[i].clone()).collect(),
        truncated_turns: start,
        token_estimate: tokens,
        text,
    }
}
