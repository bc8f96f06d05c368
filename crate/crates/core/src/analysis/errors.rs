//! Keyword heuristics that assign an incorrect episode to one error type.
//! Rules are tried in a fixed priority: configuration, answer extraction,
//! reasoning, arithmetic, knowledge gap; anything else is unclassified.

use serde::{Deserialize, Serialize};

use crate::domain::{BudgetTier, EpisodeRecord, ToolRegistry, Workflow};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorCategory {
    PolicyConfiguration,
    Reasoning,
    KnowledgeGap,
    Execution,
    Unclassified,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorSubtype {
    WorkflowMismatch,
    ToolMismatch,
    BudgetUnderallocation,
    WrongOperation,
    MissingSteps,
    ComprehensionFailure,
    RetrievalFailure,
    FactualError,
    ArithmeticError,
    AnswerExtractionError,
    None,
}

impl ErrorSubtype {
    pub fn category(self) -> ErrorCategory {
        use ErrorSubtype::*;
        match self {
            WorkflowMismatch | ToolMismatch | BudgetUnderallocation => ErrorCategory::PolicyConfiguration,
            WrongOperation | MissingSteps | ComprehensionFailure => ErrorCategory::Reasoning,
            RetrievalFailure | FactualError => ErrorCategory::KnowledgeGap,
            ArithmeticError | AnswerExtractionError => ErrorCategory::Execution,
            None => ErrorCategory::Unclassified,
        }
    }
}

/// A category with a subtype that always belongs to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ErrorLabel {
    pub category: ErrorCategory,
    pub subtype: ErrorSubtype,
}

impl From<ErrorSubtype> for ErrorLabel {
    fn from(subtype: ErrorSubtype) -> Self {
        Self {
            category: subtype.category(),
            subtype,
        }
    }
}

/// Keyword lists behind the heuristics. Matching is case-insensitive;
/// single words match whole words, phrases match as substrings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErrorKeywords {
    pub arithmetic: Vec<String>,
    pub factual: Vec<String>,
    pub complex: Vec<String>,
    /// Markers of a multi-step problem besides length and sub-question count.
    pub multi_step: Vec<String>,
    pub addition: Vec<String>,
    pub subtraction: Vec<String>,
    pub constraints: Vec<String>,
    pub not_found: Vec<String>,
    /// Query word count above which a single-call workflow is a mismatch.
    pub long_query_words: usize,
    /// Query word count above which a Low first-agent budget is too small.
    pub complex_query_words: usize,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for ErrorKeywords {
    fn default() -> Self {
        Self {
            arithmetic: strings(&["calculate", "sum", "total"]),
            factual: strings(&["who", "where", "when", "which", "what year", "capital of", "directed", "born", "founded"]),
            complex: strings(&["explain", "step-by-step", "step by step"]),
            multi_step: strings(&["such that", "solve", "prove", "derive"]),
            addition: strings(&["add", "added", "plus"]),
            subtraction: strings(&["subtract", "minus", "remaining"]),
            constraints: strings(&["remaining", "left", "after"]),
            not_found: strings(&[
                "could not find",
                "cannot find",
                "can't find",
                "no information available",
                "cannot determine",
            ]),
            long_query_words: 100,
            complex_query_words: 50,
        }
    }
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '-' && c != '\'')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn mentions(text: &str, keys: &[String]) -> bool {
    let lower = text.to_lowercase();
    let ws = words(text);
    keys.iter().any(|k| {
        let k = k.to_lowercase();
        if k.contains(' ') {
            lower.contains(&k)
        } else {
            ws.contains(&k)
        }
    })
}

/// Numbers in reading order; thousands separators are dropped.
fn numbers(text: &str) -> Vec<f64> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let flush = |cur: &mut String, out: &mut Vec<f64>| {
        let t = cur.trim_end_matches(['.', ',']).replace(',', "");
        if let Ok(v) = t.parse::<f64>() {
            out.push(v);
        }
        cur.clear();
    };
    for c in text.chars() {
        if c.is_ascii_digit() || (!cur.is_empty() && (c == '.' || c == ',')) {
            cur.push(c);
        } else if !cur.is_empty() {
            flush(&mut cur, &mut out);
        }
    }
    if !cur.is_empty() {
        flush(&mut cur, &mut out);
    }
    out
}

/// True when `op` sits between two operands (digits or brackets).
fn has_binary_op(text: &str, ops: &[char]) -> bool {
    let cs: Vec<char> = text.chars().filter(|c| !c.is_whitespace()).collect();
    (1..cs.len().saturating_sub(1)).any(|i| {
        ops.contains(&cs[i])
            && (cs[i - 1].is_ascii_digit() || cs[i - 1] == ')')
            && (cs[i + 1].is_ascii_digit() || cs[i + 1] == '(')
    })
}

const ADD_OPS: [char; 1] = ['+'];
const SUB_OPS: [char; 2] = ['-', '\u{2212}'];
const ALL_OPS: [char; 7] = ['+', '-', '\u{2212}', '*', '/', '\u{00d7}', '\u{00f7}'];

fn is_calculation(text: &str) -> bool {
    text.contains("<<") || (text.contains('=') && has_binary_op(text, &ALL_OPS))
}

#[derive(Debug, Clone, PartialEq)]
enum Answer {
    Number(f64),
    Text(String),
}

fn normalize(text: &str) -> String {
    words(text).join(" ")
}

/// Final answer of a text: what follows the last `####` marker if present,
/// then the last number, else the normalized text.
fn final_answer(text: &str) -> Answer {
    let tail = text.rsplit_once("####").map_or(text, |(_, t)| t);
    match numbers(tail).last() {
        Some(&v) => Answer::Number(v),
        None => Answer::Text(normalize(tail)),
    }
}

fn same_number(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-6 * b.abs().max(1.0)
}

fn answers_match(a: &Answer, b: &Answer) -> bool {
    match (a, b) {
        (Answer::Number(x), Answer::Number(y)) => same_number(*x, *y),
        (Answer::Text(x), Answer::Text(y)) => x == y,
        _ => false,
    }
}

fn appears_in(gold: &Answer, prediction: &str) -> bool {
    match gold {
        Answer::Number(g) => numbers(prediction).iter().any(|&v| same_number(v, *g)),
        Answer::Text(g) => !g.is_empty() && normalize(prediction).contains(g.as_str()),
    }
}

fn reasoning_steps(gold: &str) -> usize {
    let markers = gold.matches("<<").count();
    let lines = gold
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with("####"))
        .count();
    markers.max(lines)
}

fn policy_error(r: &EpisodeRecord, query: &str, kw: &ErrorKeywords) -> Option<ErrorSubtype> {
    let n_words = words(query).len();
    let sub_questions = query.matches('?').count();
    let multi_step = n_words > kw.long_query_words || sub_questions >= 2 || mentions(query, &kw.multi_step);
    if r.structure.workflow == Workflow::Direct && multi_step {
        return Some(ErrorSubtype::WorkflowMismatch);
    }
    let tools = r.structure.tools[0].union(r.structure.tools[1]);
    if (mentions(query, &kw.arithmetic) && !tools.contains(ToolRegistry::CALCULATOR))
        || (mentions(query, &kw.factual) && !tools.contains(ToolRegistry::WEB_SEARCH))
    {
        return Some(ErrorSubtype::ToolMismatch);
    }
    if r.structure.budgets[0] == BudgetTier::Low && (n_words > kw.complex_query_words || mentions(query, &kw.complex)) {
        return Some(ErrorSubtype::BudgetUnderallocation);
    }
    None
}

fn reasoning_error(prediction: &str, query: &str, gold: &str, kw: &ErrorKeywords) -> Option<ErrorSubtype> {
    let adds = |t: &str| mentions(t, &kw.addition) || has_binary_op(t, &ADD_OPS);
    let subs = |t: &str| mentions(t, &kw.subtraction) || has_binary_op(t, &SUB_OPS);
    if (adds(prediction) && !subs(prediction) && subs(gold)) || (subs(prediction) && !adds(prediction) && adds(gold)) {
        return Some(ErrorSubtype::WrongOperation);
    }
    let single_value = numbers(prediction).len() <= 1 && words(prediction).len() <= 3;
    if reasoning_steps(gold) >= 3 && single_value {
        return Some(ErrorSubtype::MissingSteps);
    }
    let required: Vec<String> = kw.constraints.iter().filter(|k| mentions(query, std::slice::from_ref(k))).cloned().collect();
    if !required.is_empty() && !mentions(prediction, &required) {
        return Some(ErrorSubtype::ComprehensionFailure);
    }
    None
}

/// Labels an incorrect episode. `query` is the question text and `gold` the
/// reference answer (a trailing `#### value` line marks its final value).
pub fn categorize_error(record: &EpisodeRecord, query: &str, gold: &str, kw: &ErrorKeywords) -> Result<ErrorLabel> {
    if record.outcome.correct {
        return Err(Error::Contract("categorize_error called on a correct episode".into()));
    }
    let prediction = record.outcome.answer_text.as_str();
    if let Some(s) = policy_error(record, query, kw) {
        return Ok(s.into());
    }
    let gold_final = final_answer(gold);
    let predicted = final_answer(prediction);
    if appears_in(&gold_final, prediction) && !answers_match(&predicted, &gold_final) {
        return Ok(ErrorSubtype::AnswerExtractionError.into());
    }
    if let Some(s) = reasoning_error(prediction, query, gold, kw) {
        return Ok(s.into());
    }
    if (is_calculation(gold) || is_calculation(prediction))
        && matches!((&predicted, &gold_final), (Answer::Number(p), Answer::Number(g)) if !same_number(*p, *g))
    {
        return Ok(ErrorSubtype::ArithmeticError.into());
    }
    let tools = record.structure.tools[0].union(record.structure.tools[1]);
    if tools.contains(ToolRegistry::WEB_SEARCH) || tools.contains(ToolRegistry::PYTHON_EXEC) {
        if mentions(prediction, &kw.not_found) {
            return Ok(ErrorSubtype::RetrievalFailure.into());
        }
        if !prediction.trim().is_empty() {
            return Ok(ErrorSubtype::FactualError.into());
        }
    }
    Ok(ErrorSubtype::None.into())
}
