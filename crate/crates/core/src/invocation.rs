//! First-call extraction from generated code, binding of the call against an
//! API stub, and classification of invalid calls.
//!
//! Only the argument *configuration* is checked: which parameters are bound,
//! by position or keyword. Argument values are never inspected.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::api_index::{terminal_name, ApiIndex, ApiSpec, Provider};
use crate::lexer::{scan, Token, TokenKind};

/// Half-open character range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharSpan {
    pub start: usize,
    pub end: usize,
}

impl CharSpan {
    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, start: usize, end: usize) -> bool {
        start < self.end && self.start < end
    }
}

/// A parsed call expression.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCandidate {
    pub callee_path: String,
    pub positional_count: usize,
    /// Keyword names in source order. Repeats are kept for the binder to
    /// reject. A `**mapping` splat is recorded with its `**` prefix.
    pub keyword_names: Vec<String>,
    /// Span of the terminal name of the callee.
    pub span: CharSpan,
    /// Span of the whole call, from the start of the callee path through the
    /// closing parenthesis.
    pub call_span: CharSpan,
}

impl CallCandidate {
    pub fn terminal_name(&self) -> &str {
        self.callee_path
            .rsplit('.')
            .next()
            .unwrap_or(self.callee_path.as_str())
    }
}

const NOT_CALLABLE: &[&str] = &[
    "and", "as", "assert", "async", "await", "class", "def", "del", "elif", "else", "except",
    "for", "from", "global", "if", "import", "in", "is", "lambda", "nonlocal", "not", "or",
    "pass", "raise", "return", "while", "with", "yield",
];

fn is_open(c: char) -> bool {
    matches!(c, '(' | '[' | '{')
}

fn is_close(c: char) -> bool {
    matches!(c, ')' | ']' | '}')
}

/// Finds the first identifier or dotted path immediately followed by `(`
/// whose matching `)` exists, scanning left to right while skipping string
/// literals and comments.
pub fn extract_first_call(text: &str) -> Option<CallCandidate> {
    let chars: Vec<char> = text.chars().collect();
    let toks = scan(&chars);
    let slice = |t: &Token| -> String { chars[t.start..t.end].iter().collect() };

    let mut i = 0;
    while i < toks.len() {
        if toks[i].kind != TokenKind::Ident || continues_path(&toks, i) {
            i += 1;
            continue;
        }
        // Consume Ident ('.' Ident)* with no gaps.
        let path_start = i;
        let mut j = i;
        while j + 2 < toks.len()
            && toks[j + 1].kind == TokenKind::Punct('.')
            && toks[j + 2].kind == TokenKind::Ident
        {
            j += 2;
        }
        let open = j + 1;
        if open >= toks.len() || toks[open].kind != TokenKind::Punct('(') {
            i = j + 1;
            continue;
        }
        let single = slice(&toks[path_start]);
        if (path_start == j && NOT_CALLABLE.contains(&single.as_str()))
            || follows_def(&toks, &chars, path_start)
        {
            i = open + 1;
            continue;
        }
        let Some(close) = matching_close(&toks, open) else {
            i = open + 1;
            continue;
        };
        let callee_path: String = toks[path_start..=j].iter().map(&slice).collect();
        let (positional_count, keyword_names) = classify_args(&toks, &chars, open, close);
        return Some(CallCandidate {
            callee_path,
            positional_count,
            keyword_names,
            span: CharSpan {
                start: toks[j].start,
                end: toks[j].end,
            },
            call_span: CharSpan {
                start: toks[path_start].start,
                end: toks[close].end,
            },
        });
    }
    None
}

/// True when the identifier at `i` is the tail of an `a.b` chain already seen.
fn continues_path(toks: &[Token], i: usize) -> bool {
    i >= 2 && toks[i - 1].kind == TokenKind::Punct('.') && toks[i - 2].kind == TokenKind::Ident
}

fn follows_def(toks: &[Token], chars: &[char], i: usize) -> bool {
    let prev = toks[..i].iter().rev().find(|t| t.kind != TokenKind::Space);
    match prev {
        Some(t) if t.kind == TokenKind::Ident => {
            let word: String = chars[t.start..t.end].iter().collect();
            word == "def" || word == "class"
        }
        _ => false,
    }
}

fn matching_close(toks: &[Token], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    for (k, t) in toks.iter().enumerate().skip(open) {
        if let TokenKind::Punct(c) = t.kind {
            if is_open(c) {
                depth += 1;
            } else if is_close(c) {
                depth -= 1;
                if depth == 0 {
                    return (c == ')').then_some(k);
                }
            }
        }
    }
    None
}

fn classify_args(toks: &[Token], chars: &[char], open: usize, close: usize) -> (usize, Vec<String>) {
    let mut positional = 0;
    let mut keywords = Vec::new();
    let mut depth = 0usize;
    let mut arg_start = open + 1;
    let mut handle = |range: &[Token]| {
        let sig: Vec<&Token> = range.iter().filter(|t| !t.is_trivia()).collect();
        if sig.is_empty() {
            return;
        }
        let text_of = |t: &Token| -> String { chars[t.start..t.end].iter().collect() };
        if sig.len() >= 2
            && sig[0].kind == TokenKind::Punct('*')
            && sig[1].kind == TokenKind::Punct('*')
            && sig[1].start == sig[0].end
        {
            let rest: String = sig[2..].iter().map(|t| text_of(t)).collect();
            keywords.push(format!("**{rest}"));
            return;
        }
        if sig.len() >= 2 && sig[0].kind == TokenKind::Ident && sig[1].kind == TokenKind::Punct('=') {
            let eq_doubled = sig
                .get(2)
                .is_some_and(|t| t.kind == TokenKind::Punct('=') && t.start == sig[1].end);
            if !eq_doubled {
                keywords.push(text_of(sig[0]));
                return;
            }
        }
        positional += 1;
    };
    for k in open + 1..close {
        if let TokenKind::Punct(c) = toks[k].kind {
            if is_open(c) {
                depth += 1;
            } else if is_close(c) {
                depth = depth.saturating_sub(1);
            } else if c == ',' && depth == 0 {
                handle(&toks[arg_start..k]);
                arg_start = k + 1;
            }
        }
    }
    handle(&toks[arg_start..close]);
    (positional, keywords)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BindingMode {
    KeywordOnly,
    PositionalOrKeyword,
}

impl BindingMode {
    /// SDK methods on AWS accept keywords only; Azure methods are ordinary
    /// Python functions.
    pub fn for_provider(provider: Provider) -> BindingMode {
        match provider {
            Provider::Aws => BindingMode::KeywordOnly,
            Provider::Azure => BindingMode::PositionalOrKeyword,
        }
    }
}

impl std::str::FromStr for BindingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "keyword-only" => Ok(BindingMode::KeywordOnly),
            "positional-or-keyword" => Ok(BindingMode::PositionalOrKeyword),
            other => Err(format!("unknown binding mode `{other}`")),
        }
    }
}

/// How the binding mode is chosen for each spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "mode")]
pub enum ModeSelection {
    #[default]
    ByProvider,
    Fixed(BindingMode),
}

impl ModeSelection {
    pub fn mode_for(&self, spec: &ApiSpec) -> BindingMode {
        match self {
            ModeSelection::ByProvider => BindingMode::for_provider(spec.provider),
            ModeSelection::Fixed(m) => *m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    Ok,
    MissingRequired,
    UnknownKeyword,
    DuplicateKeyword,
    TooManyPositional,
    NoCallFound,
    /// The callee name does not exist in the index.
    NotInIndex,
    /// The callee exists but is none of the task's targets.
    NotATarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    None,
    NonExistingApi,
    IncorrectExistingApi,
    InvalidUsageOfTarget,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::None => "none",
            Category::NonExistingApi => "non_existing_api",
            Category::IncorrectExistingApi => "incorrect_existing_api",
            Category::InvalidUsageOfTarget => "invalid_usage_of_target",
        })
    }
}

/// Outcome of judging one generated invocation.
///
/// `valid` holds exactly when `reason` is `Ok`. `category` is `None` for valid
/// calls and for generations without any call; every other outcome carries
/// exactly one hallucination category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub valid: bool,
    pub reason: Reason,
    pub category: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    pub callee: Option<String>,
    pub span: Option<CharSpan>,
}

impl Verdict {
    fn from_call(call: &CallCandidate, reason: Reason, category: Category, detail: Option<String>) -> Self {
        Verdict {
            valid: reason == Reason::Ok,
            reason,
            category,
            detail,
            callee: Some(call.callee_path.clone()),
            span: Some(call.span),
        }
    }

    pub fn no_call() -> Self {
        Verdict {
            valid: false,
            reason: Reason::NoCallFound,
            category: Category::None,
            detail: None,
            callee: None,
            span: None,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InvocationError {
    #[error("call to `{callee}` cannot be bound against stub `{spec}`")]
    NameMismatch { callee: String, spec: String },
    #[error("target API `{0}` is not in the index")]
    UnknownTarget(String),
    #[error("no target APIs given")]
    NoTargets,
}

/// Binds a call against a spec's stub. Formal order is required then
/// optional parameters. Checks run in order: positional arguments, then
/// keywords left to right, then required coverage; the first failure wins.
pub fn bind(spec: &ApiSpec, call: &CallCandidate, mode: BindingMode) -> Result<Verdict, InvocationError> {
    let callee = terminal_name(&call.callee_path).map_err(|_| InvocationError::NameMismatch {
        callee: call.callee_path.clone(),
        spec: spec.name.clone(),
    })?;
    if callee != spec.name {
        return Err(InvocationError::NameMismatch {
            callee: call.callee_path.clone(),
            spec: spec.name.clone(),
        });
    }
    let fail = |reason, detail: String| {
        Ok(Verdict::from_call(call, reason, Category::InvalidUsageOfTarget, Some(detail)))
    };
    let formals: Vec<&str> = spec.formal_params().collect();
    let mut bound: BTreeSet<&str> = BTreeSet::new();

    match mode {
        BindingMode::KeywordOnly if call.positional_count > 0 => {
            return fail(
                Reason::TooManyPositional,
                format!("{} positional argument(s) to a keyword-only API", call.positional_count),
            );
        }
        BindingMode::PositionalOrKeyword if call.positional_count > formals.len() => {
            return fail(
                Reason::TooManyPositional,
                format!(
                    "takes {} positional argument(s) but {} were given",
                    formals.len(),
                    call.positional_count
                ),
            );
        }
        _ => bound.extend(formals.iter().take(call.positional_count).copied()),
    }

    for kw in &call.keyword_names {
        if !formals.contains(&kw.as_str()) {
            return fail(Reason::UnknownKeyword, kw.clone());
        }
        if !bound.insert(kw.as_str()) {
            return fail(Reason::DuplicateKeyword, kw.clone());
        }
    }

    let missing: Vec<&str> = spec
        .required_params
        .iter()
        .map(String::as_str)
        .filter(|p| !bound.contains(p))
        .collect();
    if !missing.is_empty() {
        return fail(Reason::MissingRequired, missing.join(", "));
    }
    Ok(Verdict::from_call(call, Reason::Ok, Category::None, None))
}

/// Judges the first call of a generation against the task's target APIs.
///
/// A callee missing from the index is a non-existing API; one that exists but
/// is not a target is an incorrect existing API. A target callee is valid if
/// it binds against any same-named target spec, otherwise it is an invalid
/// usage of the target carrying the first failure reason.
pub fn validate(
    call: Option<&CallCandidate>,
    targets: &[String],
    index: &ApiIndex,
    modes: ModeSelection,
) -> Result<Verdict, InvocationError> {
    if targets.is_empty() {
        return Err(InvocationError::NoTargets);
    }
    if let Some(missing) = targets.iter().find(|t| !index.contains(t)) {
        return Err(InvocationError::UnknownTarget(missing.clone()));
    }
    let Some(call) = call else {
        return Ok(Verdict::no_call());
    };
    let name = call.terminal_name();
    if !index.contains(name) {
        return Ok(Verdict::from_call(
            call,
            Reason::NotInIndex,
            Category::NonExistingApi,
            Some(name.to_string()),
        ));
    }
    if !targets.iter().any(|t| t == name) {
        return Ok(Verdict::from_call(
            call,
            Reason::NotATarget,
            Category::IncorrectExistingApi,
            Some(name.to_string()),
        ));
    }
    let mut first_failure = None;
    for spec in index.lookup(name) {
        let verdict = bind(spec, call, modes.mode_for(spec))?;
        if verdict.valid {
            return Ok(verdict);
        }
        first_failure.get_or_insert(verdict);
    }
    Ok(first_failure.expect("target names resolve to at least one spec"))
}
