//! Structured reasoning traces and their latent-token compression.
//!
//! A trace looks like
//!
//! ```text
//! <THOUGHT>
//! <CONTEXT>...</CONTEXT>
//! <STRATEGY>...</STRATEGY>
//! <STEP_1>...</STEP_1>
//! ...
//! </THOUGHT>
//! ```
//!
//! Compressing stage `b` replaces the first `b` blocks (context, strategy,
//! step 1, step 2, ...) with `K` reserved tokens each and drops their tags.
//! Blocks that stay textual are copied byte for byte from the source.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

pub const THOUGHT_OPEN: &str = "<THOUGHT>";
pub const THOUGHT_CLOSE: &str = "</THOUGHT>";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CotParseError {
    #[error("missing <THOUGHT>...</THOUGHT> wrapper")]
    MissingWrapper,
    #[error("unexpected text at byte {0}")]
    UnexpectedText(usize),
    #[error("unknown tag {0}")]
    UnknownTag(String),
    #[error("block {0} is never closed")]
    Unclosed(String),
    #[error("tag {tag} nested inside block {block}")]
    Interleaved { block: String, tag: String },
    #[error("missing {0} block")]
    MissingBlock(&'static str),
    #[error("duplicate {0} block")]
    DuplicateBlock(&'static str),
    #[error("expected STEP_{expected}, found STEP_{found}")]
    NonContiguousStep { expected: usize, found: usize },
    #[error("{0} block out of order")]
    Misplaced(&'static str),
    #[error("no STEP blocks")]
    NoSteps,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CompressError {
    #[error("stage {stage} exceeds block count {blocks}")]
    StageOutOfRange { stage: usize, blocks: usize },
    #[error("latent vocabulary covers {max} steps, trace has {steps}")]
    VocabTooSmall { steps: usize, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BlockKind {
    Context,
    Strategy,
    Step(usize),
}

impl BlockKind {
    pub fn tag(&self) -> String {
        match self {
            BlockKind::Context => "CONTEXT".to_string(),
            BlockKind::Strategy => "STRATEGY".to_string(),
            BlockKind::Step(i) => format!("STEP_{i}"),
        }
    }

    fn from_tag(tag: &str) -> Option<BlockKind> {
        match tag {
            "CONTEXT" => Some(BlockKind::Context),
            "STRATEGY" => Some(BlockKind::Strategy),
            _ => {
                let idx: usize = tag.strip_prefix("STEP_")?.parse().ok()?;
                (idx >= 1).then_some(BlockKind::Step(idx))
            }
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotBlock {
    pub kind: BlockKind,
    pub text: String,
}

impl CotBlock {
    pub fn new(kind: BlockKind, text: impl Into<String>) -> Self {
        CotBlock {
            kind,
            text: text.into(),
        }
    }
}

/// A parsed trace. Keeps the source so uncompressed blocks can be copied verbatim.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuredCot {
    source: String,
    blocks: Vec<CotBlock>,
    spans: Vec<Range<usize>>,
    open_end: usize,
    close_start: usize,
}

impl StructuredCot {
    /// Renders blocks into the canonical newline-separated layout.
    pub fn from_blocks(blocks: Vec<CotBlock>) -> Result<Self, CotParseError> {
        let mut text = String::from(THOUGHT_OPEN);
        for b in &blocks {
            let tag = b.kind.tag();
            text.push('\n');
            text.push_str(&format!("<{tag}>{}</{tag}>", b.text));
        }
        text.push('\n');
        text.push_str(THOUGHT_CLOSE);
        parse_cot(&text)
    }

    pub fn blocks(&self) -> &[CotBlock] {
        &self.blocks
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn step_count(&self) -> usize {
        self.blocks.len() - 2
    }

    /// Total latent block count: context + strategy + one per step.
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }
}

fn is_tag_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_uppercase())
        && chars.all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_')
}

/// Finds the first `<NAME>` or `</NAME>` tag in `s`, returning its byte range.
fn find_tag(s: &str) -> Option<(Range<usize>, bool, &str)> {
    let mut from = 0;
    while let Some(rel) = s[from..].find('<') {
        let start = from + rel;
        let rest = &s[start + 1..];
        let (closing, name_start) = match rest.strip_prefix('/') {
            Some(_) => (true, start + 2),
            None => (false, start + 1),
        };
        if let Some(end_rel) = s[name_start..].find('>') {
            let name = &s[name_start..name_start + end_rel];
            if is_tag_name(name) {
                return Some((start..name_start + end_rel + 1, closing, name));
            }
        }
        from = start + 1;
    }
    None
}

/// Parses a `<THOUGHT>` trace into its blocks.
pub fn parse_cot(text: &str) -> Result<StructuredCot, CotParseError> {
    let lead = text.len() - text.trim_start().len();
    let trimmed_end = text.trim_end().len();
    if !text[lead..].starts_with(THOUGHT_OPEN) || !text[..trimmed_end].ends_with(THOUGHT_CLOSE) {
        return Err(CotParseError::MissingWrapper);
    }
    let open_end = lead + THOUGHT_OPEN.len();
    let close_start = trimmed_end - THOUGHT_CLOSE.len();
    if close_start < open_end {
        return Err(CotParseError::MissingWrapper);
    }

    let mut blocks = Vec::new();
    let mut spans = Vec::new();
    let mut pos = open_end;
    loop {
        let rest = &text[pos..close_start];
        let ws = rest.len() - rest.trim_start().len();
        pos += ws;
        if pos == close_start {
            break;
        }
        let rest = &text[pos..close_start];
        let Some((range, closing, name)) = find_tag(rest) else {
            return Err(CotParseError::UnexpectedText(pos));
        };
        if range.start != 0 {
            return Err(CotParseError::UnexpectedText(pos));
        }
        if closing {
            return Err(CotParseError::UnknownTag(format!("</{name}>")));
        }
        if name == "THOUGHT" {
            return Err(CotParseError::Interleaved {
                block: "THOUGHT".into(),
                tag: "<THOUGHT>".into(),
            });
        }
        let kind = BlockKind::from_tag(name)
            .ok_or_else(|| CotParseError::UnknownTag(format!("<{name}>")))?;
        let body_start = pos + range.end;
        let close_tag = format!("</{name}>");
        let body_region = &text[body_start..close_start];
        // The body runs to the first tag; it must be our own closing tag.
        let body_len = match find_tag(body_region) {
            Some((r, true, n)) if n == name => r.start,
            Some((r, _, _)) => {
                return Err(CotParseError::Interleaved {
                    block: name.to_string(),
                    tag: body_region[r].to_string(),
                })
            }
            None => return Err(CotParseError::Unclosed(name.to_string())),
        };
        let body = &text[body_start..body_start + body_len];
        let end = body_start + body_len + close_tag.len();
        blocks.push(CotBlock::new(kind, body));
        spans.push(pos..end);
        pos = end;
    }

    check_block_order(&blocks)?;
    Ok(StructuredCot {
        source: text.to_string(),
        blocks,
        spans,
        open_end,
        close_start,
    })
}

fn check_block_order(blocks: &[CotBlock]) -> Result<(), CotParseError> {
    let mut contexts = 0;
    let mut strategies = 0;
    let mut next_step = 1;
    for (i, b) in blocks.iter().enumerate() {
        match b.kind {
            BlockKind::Context => {
                contexts += 1;
                if contexts > 1 {
                    return Err(CotParseError::DuplicateBlock("CONTEXT"));
                }
                if i != 0 {
                    return Err(CotParseError::Misplaced("CONTEXT"));
                }
            }
            BlockKind::Strategy => {
                strategies += 1;
                if strategies > 1 {
                    return Err(CotParseError::DuplicateBlock("STRATEGY"));
                }
                if contexts == 0 {
                    return Err(CotParseError::MissingBlock("CONTEXT"));
                }
                if i != 1 {
                    return Err(CotParseError::Misplaced("STRATEGY"));
                }
            }
            BlockKind::Step(k) => {
                if contexts == 0 {
                    return Err(CotParseError::MissingBlock("CONTEXT"));
                }
                if strategies == 0 {
                    return Err(CotParseError::MissingBlock("STRATEGY"));
                }
                if k != next_step {
                    return Err(CotParseError::NonContiguousStep {
                        expected: next_step,
                        found: k,
                    });
                }
                next_step += 1;
            }
        }
    }
    if contexts == 0 {
        return Err(CotParseError::MissingBlock("CONTEXT"));
    }
    if strategies == 0 {
        return Err(CotParseError::MissingBlock("STRATEGY"));
    }
    if next_step == 1 {
        return Err(CotParseError::NoSteps);
    }
    Ok(())
}

/// Position of a latent token in the canonical scaffold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentSlot {
    /// 0 = context, 1 = strategy, 1 + i = step i.
    pub block: usize,
    pub slot: usize,
}

/// Reserved latent vocabulary: `K` tokens for context, strategy and each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentVocab {
    k: usize,
    max_steps: usize,
}

impl Default for LatentVocab {
    fn default() -> Self {
        LatentVocab::new(3, crate::plan::DEFAULT_MAX_PLAN_LEN)
    }
}

impl LatentVocab {
    /// `k` is capped at 26 so slot suffixes stay single letters.
    pub fn new(k: usize, max_steps: usize) -> Self {
        assert!((1..=26).contains(&k), "tokens per block must be in 1..=26");
        LatentVocab { k, max_steps }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps
    }

    fn suffix(slot: usize) -> char {
        (b'A' + slot as u8) as char
    }

    pub fn token(&self, block: usize, slot: usize) -> String {
        let s = Self::suffix(slot);
        match block {
            0 => format!("<THOUGHT_CONTEXT_{s}>"),
            1 => format!("<THOUGHT_STRATEGY_{s}>"),
            b => format!("<T_{}_{s}>", b - 1),
        }
    }

    pub fn block_tokens(&self, block: usize) -> Vec<String> {
        (0..self.k).map(|slot| self.token(block, slot)).collect()
    }

    /// Every reserved token, in scaffold order.
    pub fn all_tokens(&self) -> Vec<String> {
        (0..self.max_steps + 2)
            .flat_map(|b| self.block_tokens(b))
            .collect()
    }

    pub fn classify(&self, token: &str) -> Option<LatentSlot> {
        let inner = token.strip_prefix('<')?.strip_suffix('>')?;
        let (head, suffix) = inner.rsplit_once('_')?;
        let mut chars = suffix.chars();
        let c = chars.next()?;
        if chars.next().is_some() || !c.is_ascii_uppercase() {
            return None;
        }
        let slot = (c as u8 - b'A') as usize;
        if slot >= self.k {
            return None;
        }
        let block = match head {
            "THOUGHT_CONTEXT" => 0,
            "THOUGHT_STRATEGY" => 1,
            _ => {
                let digits = head.strip_prefix("T_")?;
                if digits.starts_with('0') || digits.starts_with('+') {
                    return None;
                }
                let i: usize = digits.parse().ok()?;
                if i == 0 || i > self.max_steps {
                    return None;
                }
                i + 1
            }
        };
        Some(LatentSlot { block, slot })
    }

    fn rank(&self, slot: LatentSlot) -> usize {
        slot.block * self.k + slot.slot
    }
}

/// A reasoning prefix with the leading `stage` blocks compressed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaffoldPrefix {
    pub text: String,
    pub stage: usize,
    pub blocks: usize,
    pub latent: Vec<String>,
}

impl ScaffoldPrefix {
    pub fn tokens(&self) -> Vec<String> {
        tokenize(&self.text)
    }

    pub fn is_fully_latent(&self) -> bool {
        self.stage == self.blocks
    }
}

/// Replaces the first `stage` blocks with their latent tokens.
pub fn compress(
    cot: &StructuredCot,
    stage: usize,
    vocab: &LatentVocab,
) -> Result<ScaffoldPrefix, CompressError> {
    let blocks = cot.block_count();
    if stage > blocks {
        return Err(CompressError::StageOutOfRange { stage, blocks });
    }
    if cot.step_count() > vocab.max_steps() {
        return Err(CompressError::VocabTooSmall {
            steps: cot.step_count(),
            max: vocab.max_steps(),
        });
    }
    if stage == 0 {
        return Ok(ScaffoldPrefix {
            text: cot.source.clone(),
            stage,
            blocks,
            latent: Vec::new(),
        });
    }
    let latent: Vec<String> = (0..stage).flat_map(|b| vocab.block_tokens(b)).collect();
    let tail_start = if stage < blocks {
        cot.spans[stage].start
    } else {
        cot.close_start
    };
    let mut text = String::with_capacity(cot.source.len());
    text.push_str(&cot.source[..cot.open_end]);
    text.push(' ');
    text.push_str(&latent.join(" "));
    text.push(' ');
    text.push_str(&cot.source[tail_start..]);
    Ok(ScaffoldPrefix {
        text,
        stage,
        blocks,
        latent,
    })
}

/// Splits text on whitespace and cuts `<...>` tags out as standalone tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut rest = chunk;
        while !rest.is_empty() {
            let tag = rest
                .find('<')
                .and_then(|s| rest[s..].find('>').map(|e| (s, s + e + 1)));
            match tag {
                Some((s, e)) => {
                    if s > 0 {
                        out.push(rest[..s].to_string());
                    }
                    out.push(rest[s..e].to_string());
                    rest = &rest[e..];
                }
                None => {
                    out.push(rest.to_string());
                    rest = "";
                }
            }
        }
    }
    out
}

fn looks_like_tag(token: &str) -> bool {
    token.len() > 2 && token.starts_with('<') && token.ends_with('>')
}

/// Why a prefix failed the latent-structure check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DiagnosticCode {
    ThoughtBlock,
    OutOfOrder,
    RepeatedToken,
    MissingToken,
    ResidualTag,
    StepCountMismatch,
}

impl fmt::Display for DiagnosticCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DiagnosticCode::ThoughtBlock => "THOUGHT_BLOCK",
            DiagnosticCode::OutOfOrder => "OUT_OF_ORDER",
            DiagnosticCode::RepeatedToken => "REPEATED_TOKEN",
            DiagnosticCode::MissingToken => "MISSING_TOKEN",
            DiagnosticCode::ResidualTag => "RESIDUAL_TAG",
            DiagnosticCode::StepCountMismatch => "STEP_COUNT_MISMATCH",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosticResult {
    pub valid: bool,
    pub code: Option<DiagnosticCode>,
    /// Number of complete step triplets seen (when the scaffold is well formed).
    pub step_count: Option<usize>,
}

impl DiagnosticResult {
    fn fail(code: DiagnosticCode) -> Self {
        DiagnosticResult {
            valid: false,
            code: Some(code),
            step_count: None,
        }
    }
}

/// Checks that `tokens` hold one `<THOUGHT>` block whose latent tokens spell
/// `C S T_1 .. T_n` exactly once each, with no leftover tags, where `n` is
/// `plan_len`. Plain words inside the block are ignored.
///
/// Checks run in a fixed order and the first failure is reported.
pub fn validate_latent_prefix<S: AsRef<str>>(
    tokens: &[S],
    plan_len: usize,
    vocab: &LatentVocab,
) -> DiagnosticResult {
    let opens: Vec<usize> = positions(tokens, THOUGHT_OPEN);
    let closes: Vec<usize> = positions(tokens, THOUGHT_CLOSE);
    if opens.len() != 1 || closes.len() != 1 || opens[0] > closes[0] {
        return DiagnosticResult::fail(DiagnosticCode::ThoughtBlock);
    }
    let inner = &tokens[opens[0] + 1..closes[0]];

    let mut ranks = Vec::new();
    let mut residual = false;
    for tok in inner {
        let tok = tok.as_ref();
        match vocab.classify(tok) {
            Some(slot) => ranks.push(vocab.rank(slot)),
            None if looks_like_tag(tok) => residual = true,
            None => {}
        }
    }

    if ranks.windows(2).any(|w| w[1] < w[0]) {
        return DiagnosticResult::fail(DiagnosticCode::OutOfOrder);
    }
    if ranks.windows(2).any(|w| w[1] == w[0]) {
        return DiagnosticResult::fail(DiagnosticCode::RepeatedToken);
    }
    let k = vocab.k();
    let gapless = ranks.iter().enumerate().all(|(i, &r)| i == r);
    if !gapless || ranks.len() % k != 0 || ranks.len() < 2 * k {
        return DiagnosticResult::fail(DiagnosticCode::MissingToken);
    }
    if residual {
        return DiagnosticResult::fail(DiagnosticCode::ResidualTag);
    }
    let steps = ranks.len() / k - 2;
    if steps != plan_len {
        return DiagnosticResult {
            valid: false,
            code: Some(DiagnosticCode::StepCountMismatch),
            step_count: Some(steps),
        };
    }
    DiagnosticResult {
        valid: true,
        code: None,
        step_count: Some(steps),
    }
}

fn positions<S: AsRef<str>>(tokens: &[S], needle: &str) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.as_ref() == needle)
        .map(|(i, _)| i)
        .collect()
}
