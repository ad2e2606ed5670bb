//! Prompt decomposition into short single-action scripts.
//!
//! The rule-based decomposer splits on a connector lexicon, strips subject
//! prefixes and maps known surface forms onto canonical scripts. An optional
//! LLM client sends the decomposition instruction to an external endpoint and
//! parses a numbered list back; it shares the same output contract.

use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synth::PRIMITIVES;

pub const MAX_SCRIPTS: usize = 8;
pub const MAX_SCRIPT_TOKENS: usize = 12;
pub const SENTENCE_PLACEHOLDER: &str = "{sentence}";
pub const DEFAULT_PROMPT_TEMPLATE: &str = "Please decompose the following action into simple actions:{sentence}";
/// Environment variable read for the LLM endpoint when the config has none.
pub const LLM_ENDPOINT_ENV: &str = "MOTIONGEN_LLM_ENDPOINT";

#[derive(Debug, Error)]
pub enum DecomposeError {
    #[error("text is empty")]
    EmptyText,
    #[error("no LLM endpoint configured")]
    NoEndpoint,
    #[error("prompt template lacks the {SENTENCE_PLACEHOLDER} placeholder")]
    BadTemplate,
    #[error("LLM transport error: {0}")]
    Transport(String),
    #[error("LLM request timed out")]
    Timeout,
    #[error("unparseable LLM response: {raw:?}")]
    Unparseable { raw: String },
}

pub type Result<T> = std::result::Result<T, DecomposeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScriptSource {
    RuleBased,
    ExternalLlm,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptList {
    pub scripts: Vec<String>,
    pub source: ScriptSource,
}

impl ScriptList {
    pub fn new(scripts: Vec<String>, source: ScriptSource) -> Self {
        Self { scripts, source }
    }

    pub fn len(&self) -> usize {
        self.scripts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scripts.is_empty()
    }

    /// Checks the per-script invariants (non-empty, token cap, no connectors).
    pub fn is_well_formed(&self) -> bool {
        self.scripts.iter().all(|s| {
            let tokens: Vec<&str> = s.split_whitespace().collect();
            !tokens.is_empty()
                && tokens.len() <= MAX_SCRIPT_TOKENS
                && !tokens.iter().any(|t| *t == "then" || *t == "while")
        })
    }
}

/// Splits on the connector only where both sides carry a verb.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Connector {
    pub tokens: Vec<String>,
    pub verb_guard: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecomposerConfig {
    /// Connectors in splitting priority order.
    pub connectors: Vec<Connector>,
    /// Surface form → canonical script.
    pub canonical: HashMap<String, String>,
    /// Idiomatic phrase → multi-script expansion.
    pub overrides: HashMap<String, Vec<String>>,
    pub verbs: Vec<String>,
    pub subject_prefixes: Vec<String>,
    pub llm_endpoint: Option<String>,
    pub prompt_template: String,
    pub llm_timeout_secs: u64,
}

impl Default for DecomposerConfig {
    fn default() -> Self {
        let connector = |t: &str, verb_guard| Connector {
            tokens: t.split_whitespace().map(String::from).collect(),
            verb_guard,
        };
        let mut canonical = HashMap::new();
        for p in PRIMITIVES {
            canonical.insert(p.script.to_string(), p.script.to_string());
            for form in p.forms.iter().chain(p.gerunds) {
                canonical.insert(form.to_string(), p.script.to_string());
            }
        }
        let both_hands: Vec<String> = [
            "raise the left hand",
            "lower the left hand",
            "raise the right hand",
            "lower the right hand",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let scorpion: Vec<String> = ["flex and grasp the foot", "swing the leg around", "lock out the arm"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut overrides = HashMap::new();
        for key in [
            "moving both hands in an up and down motion",
            "moves both hands in an up and down motion",
            "move both hands in an up and down motion",
        ] {
            overrides.insert(key.to_string(), both_hands.clone());
        }
        for key in ["does a scorpion", "performs a scorpion", "doing a scorpion", "scorpion"] {
            overrides.insert(key.to_string(), scorpion.clone());
        }
        let verbs = [
            "raise",
            "raises",
            "raising",
            "lift",
            "lifts",
            "lifting",
            "put",
            "puts",
            "putting",
            "lower",
            "lowers",
            "lowering",
            "drop",
            "drops",
            "dropping",
            "bring",
            "brings",
            "wave",
            "waves",
            "waving",
            "walk",
            "walks",
            "walking",
            "step",
            "steps",
            "stepping",
            "squat",
            "squats",
            "squatting",
            "crouch",
            "crouches",
            "crouching",
            "turn",
            "turns",
            "turning",
            "twist",
            "twists",
            "twisting",
            "kick",
            "kicks",
            "kicking",
            "jump",
            "jumps",
            "jumping",
            "hop",
            "hops",
            "hopping",
            "nod",
            "nods",
            "nodding",
            "bend",
            "bends",
            "bending",
            "bow",
            "bows",
            "bowing",
            "move",
            "moves",
            "moving",
            "run",
            "runs",
            "running",
            "sit",
            "sits",
            "stand",
            "stands",
            "swing",
            "swings",
            "throw",
            "throws",
            "spin",
            "spins",
            "clap",
            "claps",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        Self {
            connectors: vec![
                connector("and then", false),
                connector("then", false),
                connector("while", false),
                connector(",", true),
                connector("and", true),
            ],
            canonical,
            overrides,
            verbs,
            subject_prefixes: vec!["a person".into(), "the person".into(), "someone".into()],
            llm_endpoint: None,
            prompt_template: DEFAULT_PROMPT_TEMPLATE.to_string(),
            llm_timeout_secs: 30,
        }
    }
}

impl DecomposerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.prompt_template.contains(SENTENCE_PLACEHOLDER) {
            return Err(DecomposeError::BadTemplate);
        }
        Ok(())
    }

    pub fn fill_prompt(&self, text: &str) -> Result<String> {
        self.validate()?;
        Ok(self.prompt_template.replace(SENTENCE_PLACEHOLDER, text))
    }

    /// Endpoint from the config, falling back to [`LLM_ENDPOINT_ENV`].
    pub fn endpoint(&self) -> Option<String> {
        self.llm_endpoint
            .clone()
            .or_else(|| std::env::var(LLM_ENDPOINT_ENV).ok())
            .filter(|e| !e.trim().is_empty())
    }
}

fn tokenize(text: &str) -> Vec<String> {
    let mut cleaned = String::with_capacity(text.len() + 8);
    for ch in text.to_lowercase().chars() {
        match ch {
            ',' => cleaned.push_str(" , "),
            c if c.is_alphanumeric() || c == '\'' || c == '-' => cleaned.push(c),
            _ => cleaned.push(' '),
        }
    }
    cleaned.split_whitespace().map(String::from).collect()
}

struct RuleSplitter<'a> {
    cfg: &'a DecomposerConfig,
    prefixes: Vec<Vec<String>>,
}

impl<'a> RuleSplitter<'a> {
    fn new(cfg: &'a DecomposerConfig) -> Self {
        let prefixes = cfg.subject_prefixes.iter().map(|p| tokenize(p)).collect();
        Self { cfg, prefixes }
    }

    fn strip_subject<'t>(&self, tokens: &'t [String]) -> &'t [String] {
        for p in &self.prefixes {
            if tokens.len() > p.len() && tokens[..p.len()] == p[..] {
                return &tokens[p.len()..];
            }
        }
        tokens
    }

    fn has_verb(&self, tokens: &[String]) -> bool {
        tokens.iter().any(|t| self.cfg.verbs.contains(t))
    }

    fn split(&self, tokens: &[String], level: usize, out: &mut Vec<Vec<String>>) {
        let tokens = self.strip_subject(tokens);
        if tokens.is_empty() {
            return;
        }
        if let Some(expansion) = self.cfg.overrides.get(&tokens.join(" ")) {
            out.extend(expansion.iter().map(|s| tokenize(s)));
            return;
        }
        let Some(conn) = self.cfg.connectors.get(level) else {
            out.push(tokens.to_vec());
            return;
        };
        let k = conn.tokens.len();
        let mut pieces: Vec<&[String]> = Vec::new();
        let mut start = 0;
        let mut i = 0;
        while i + k <= tokens.len() {
            if tokens[i..i + k] == conn.tokens[..] {
                pieces.push(&tokens[start..i]);
                i += k;
                start = i;
            } else {
                i += 1;
            }
        }
        pieces.push(&tokens[start..]);
        if conn.verb_guard {
            let mut merged: Vec<Vec<String>> = Vec::new();
            for piece in pieces {
                match merged.last_mut() {
                    Some(prev) if !(self.has_verb(prev) && self.has_verb(piece)) => {
                        prev.extend(conn.tokens.iter().cloned());
                        prev.extend(piece.iter().cloned());
                    }
                    _ => merged.push(piece.to_vec()),
                }
            }
            for piece in merged {
                self.split(&piece, level + 1, out);
            }
        } else {
            for piece in pieces {
                self.split(piece, level + 1, out);
            }
        }
    }
}

fn finish_script(cfg: &DecomposerConfig, tokens: &[String]) -> Option<String> {
    let tokens: Vec<&str> = tokens
        .iter()
        .map(String::as_str)
        .filter(|t| *t != "," && *t != "then" && *t != "while")
        .take(MAX_SCRIPT_TOKENS)
        .collect();
    if tokens.is_empty() {
        return None;
    }
    let phrase = tokens.join(" ");
    Some(cfg.canonical.get(&phrase).cloned().unwrap_or(phrase))
}

/// Rule-based decomposition of a complex prompt.
pub fn decompose_rule_based(text: &str, cfg: &DecomposerConfig) -> Result<ScriptList> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(DecomposeError::EmptyText);
    }
    let mut fragments = Vec::new();
    RuleSplitter::new(cfg).split(&tokens, 0, &mut fragments);
    let mut scripts: Vec<String> = fragments.iter().filter_map(|f| finish_script(cfg, f)).collect();
    scripts.truncate(MAX_SCRIPTS);
    if scripts.is_empty() {
        // Only connector tokens were present.
        return Err(DecomposeError::EmptyText);
    }
    Ok(ScriptList::new(scripts, ScriptSource::RuleBased))
}

/// Treats the whole prompt as one script (the no-decomposition ablation).
pub fn decompose_identity(text: &str) -> Result<ScriptList> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(DecomposeError::EmptyText);
    }
    Ok(ScriptList::new(vec![tokens.join(" ")], ScriptSource::RuleBased))
}

/// Opaque text-in/text-out channel to an LLM.
pub trait LlmTransport {
    fn complete(&self, prompt: &str, timeout: Duration) -> Result<String>;
}

/// Plain HTTP POST of the prompt body; the response body is the completion.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    pub endpoint: String,
}

impl LlmTransport for HttpTransport {
    fn complete(&self, prompt: &str, timeout: Duration) -> Result<String> {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        match agent
            .post(&self.endpoint)
            .set("Content-Type", "text/plain; charset=utf-8")
            .send_string(prompt)
        {
            Ok(resp) => resp.into_string().map_err(|e| DecomposeError::Transport(e.to_string())),
            Err(ureq::Error::Transport(t)) if t.to_string().contains("timed out") => Err(DecomposeError::Timeout),
            Err(e) => Err(DecomposeError::Transport(e.to_string())),
        }
    }
}

/// Parses a numbered, bulleted or newline-separated list into scripts.
pub fn parse_llm_response(raw: &str, cfg: &DecomposerConfig) -> Result<ScriptList> {
    let mut scripts = Vec::new();
    for line in raw.lines() {
        let line = line.trim();
        let body = line
            .trim_start_matches(|c: char| c.is_ascii_digit())
            .trim_start_matches(['.', ')', ':', '-', '*', '•'])
            .trim();
        // Keep the numbering if the whole line was a number.
        let body = if body.is_empty() { line } else { body };
        let tokens = tokenize(body);
        if let Some(script) = finish_script(cfg, &tokens) {
            scripts.push(script);
        }
    }
    if scripts.is_empty() {
        return Err(DecomposeError::Unparseable { raw: raw.to_string() });
    }
    scripts.truncate(MAX_SCRIPTS);
    Ok(ScriptList::new(scripts, ScriptSource::ExternalLlm))
}

pub fn decompose_llm(text: &str, cfg: &DecomposerConfig, transport: &dyn LlmTransport) -> Result<ScriptList> {
    if text.trim().is_empty() {
        return Err(DecomposeError::EmptyText);
    }
    let prompt = cfg.fill_prompt(text)?;
    let raw = transport.complete(&prompt, Duration::from_secs(cfg.llm_timeout_secs))?;
    parse_llm_response(&raw, cfg)
}

/// LLM decomposition that falls back to the rule-based path on any failure.
pub fn decompose_llm_or_fallback(
    text: &str,
    cfg: &DecomposerConfig,
    transport: &dyn LlmTransport,
) -> Result<ScriptList> {
    match decompose_llm(text, cfg, transport) {
        Ok(s) => Ok(s),
        Err(DecomposeError::EmptyText) => Err(DecomposeError::EmptyText),
        Err(_) => decompose_rule_based(text, cfg),
    }
}

/// Which decomposer a pipeline uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecomposerKind {
    #[default]
    RuleBased,
    /// Whole prompt as a single script.
    Identity,
    ExternalLlm,
}

pub fn decompose(text: &str, kind: DecomposerKind, cfg: &DecomposerConfig) -> Result<ScriptList> {
    match kind {
        DecomposerKind::RuleBased => decompose_rule_based(text, cfg),
        DecomposerKind::Identity => decompose_identity(text),
        DecomposerKind::ExternalLlm => {
            let endpoint = cfg.endpoint().ok_or(DecomposeError::NoEndpoint)?;
            decompose_llm_or_fallback(text, cfg, &HttpTransport { endpoint })
        }
    }
}
