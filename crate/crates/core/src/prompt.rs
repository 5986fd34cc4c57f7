//! Demonstration-augmented prompts.
//!
//! A prompt is a list of nine role-tagged segments:
//!
//! ```text
//! START infer_text SEP infer_desc SEP infer_template SEP
//!       pos_text SEP pos_desc SEP pos_template SEP
//!       neg_text SEP neg_desc SEP neg_template END
//! ```
//!
//! The inference template carries the label mask; the demonstration templates
//! carry the label words. Special tokens are not part of the structure; a
//! backend supplies them when the prompt is serialized or encoded.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{compose_description, Variant};
use crate::corpus::{Label, MemeRecord};

/// Strings that may never appear inside segment text.
pub const RESERVED_MARKERS: &[&str] = &[
    "[START]",
    "[SEP]",
    "[END]",
    "[MASK]",
    "[LABEL_MASK]",
    "[TARGET_MASK]",
    "{W}",
    "{T}",
];

/// Target word used in demonstrations of non-hateful memes.
pub const NOBODY: &str = "nobody";

pub const DEFAULT_TEMPLATE: &str = "It was {W}.";
pub const DEFAULT_TARGET_TEMPLATE: &str = "It was {W} targeting at {T}.";

pub fn strip_reserved(text: &str) -> String {
    let mut out = text.to_string();
    for marker in RESERVED_MARKERS {
        out = out.replace(marker, " ");
    }
    out
}

fn contains_reserved(text: &str) -> bool {
    RESERVED_MARKERS.iter().any(|m| text.contains(m))
}

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("{field} contains a reserved marker: {text:?}")]
    ReservedMarker { field: &'static str, text: String },
    #[error("invalid label words: {0}")]
    LabelWords(String),
    #[error("invalid template {template:?}: {reason}")]
    Template { template: String, reason: String },
    #[error("hateful demonstration {0:?} has no target annotation")]
    MissingTarget(String),
    #[error("token budget {budget} is below the {required} tokens needed for templates and inference text")]
    BudgetTooSmall { budget: usize, required: usize },
}

/// Verbalizer: `pos_word` stands for non-hateful, `neg_word` for hateful.
///
/// Serialized as the string `"POS,NEG"`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LabelWordPair {
    pub pos_word: String,
    pub neg_word: String,
}

impl LabelWordPair {
    pub fn new(pos: impl Into<String>, neg: impl Into<String>) -> Result<Self, PromptError> {
        let pair = LabelWordPair {
            pos_word: pos.into(),
            neg_word: neg.into(),
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        for w in [&self.pos_word, &self.neg_word] {
            if w.is_empty() {
                return Err(PromptError::LabelWords("label words must be nonempty".into()));
            }
            if w.split_whitespace().count() != 1 || w.trim() != w {
                return Err(PromptError::LabelWords(format!("{w:?} is not a single word")));
            }
            if contains_reserved(w) {
                return Err(PromptError::LabelWords(format!("{w:?} is a reserved marker")));
            }
        }
        if self.pos_word == self.neg_word {
            return Err(PromptError::LabelWords(format!(
                "positive and negative words are both {:?}",
                self.pos_word
            )));
        }
        Ok(())
    }

    pub fn word_for(&self, label: Label) -> &str {
        match label {
            Label::NonHateful => &self.pos_word,
            Label::Hateful => &self.neg_word,
        }
    }

    pub fn swapped(&self) -> Self {
        LabelWordPair {
            pos_word: self.neg_word.clone(),
            neg_word: self.pos_word.clone(),
        }
    }
}

impl Default for LabelWordPair {
    fn default() -> Self {
        LabelWordPair {
            pos_word: "good".into(),
            neg_word: "bad".into(),
        }
    }
}

impl FromStr for LabelWordPair {
    type Err = PromptError;
    /// Parses `"POS,NEG"`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (pos, neg) = s
            .split_once(',')
            .ok_or_else(|| PromptError::LabelWords(format!("expected POS,NEG, got {s:?}")))?;
        LabelWordPair::new(pos.trim(), neg.trim())
    }
}

impl TryFrom<String> for LabelWordPair {
    type Error = PromptError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<LabelWordPair> for String {
    fn from(p: LabelWordPair) -> String {
        p.to_string()
    }
}

impl fmt::Display for LabelWordPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.pos_word, self.neg_word)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    LabelOnly,
    LabelAndTarget,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum TemplatePart {
    Literal(String),
    Word,
    Target,
}

/// Sentence with a `{W}` label slot and optionally a `{T}` target slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    source: String,
    parts: Vec<TemplatePart>,
}

impl Template {
    pub fn parse(source: &str) -> Result<Self, PromptError> {
        let bad = |reason: &str| PromptError::Template {
            template: source.to_string(),
            reason: reason.to_string(),
        };
        let mut parts = Vec::new();
        let mut rest = source;
        while !rest.is_empty() {
            let next = [("{W}", TemplatePart::Word), ("{T}", TemplatePart::Target)]
                .into_iter()
                .filter_map(|(marker, part)| rest.find(marker).map(|at| (at, marker, part)))
                .min_by_key(|(at, _, _)| *at);
            match next {
                Some((at, marker, part)) => {
                    if at > 0 {
                        parts.push(TemplatePart::Literal(rest[..at].to_string()));
                    }
                    parts.push(part);
                    rest = &rest[at + marker.len()..];
                }
                None => {
                    parts.push(TemplatePart::Literal(rest.to_string()));
                    rest = "";
                }
            }
        }
        let words = parts.iter().filter(|p| **p == TemplatePart::Word).count();
        let targets = parts.iter().filter(|p| **p == TemplatePart::Target).count();
        if words != 1 {
            return Err(bad("needs exactly one {W} slot"));
        }
        if targets > 1 {
            return Err(bad("allows at most one {T} slot"));
        }
        for part in &parts {
            if let TemplatePart::Literal(text) = part {
                if contains_reserved(text) {
                    return Err(bad("literal text contains a reserved marker"));
                }
            }
        }
        Ok(Template {
            source: source.to_string(),
            parts,
        })
    }

    pub fn label_only() -> Self {
        Template::parse(DEFAULT_TEMPLATE).expect("default template parses")
    }

    pub fn with_target() -> Self {
        Template::parse(DEFAULT_TARGET_TEMPLATE).expect("default target template parses")
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn kind(&self) -> TemplateKind {
        if self.parts.contains(&TemplatePart::Target) {
            TemplateKind::LabelAndTarget
        } else {
            TemplateKind::LabelOnly
        }
    }

    /// Fills the label slot. A target slot, if any, is left as `[TARGET_MASK]`.
    pub fn render(&self, word: &str) -> String {
        self.render_with_target(word, "[TARGET_MASK]")
    }

    pub fn render_with_target(&self, word: &str, target: &str) -> String {
        self.parts
            .iter()
            .map(|p| match p {
                TemplatePart::Literal(s) => s.as_str(),
                TemplatePart::Word => word,
                TemplatePart::Target => target,
            })
            .collect()
    }

    fn instantiate(&self, label: Fill<'_>, target: Fill<'_>) -> Vec<Piece> {
        self.parts
            .iter()
            .map(|p| match (p, label, target) {
                (TemplatePart::Literal(s), _, _) => Piece::Text(s.clone()),
                (TemplatePart::Word, Fill::Word(w), _) => Piece::Text(w.to_string()),
                (TemplatePart::Word, Fill::Mask, _) => Piece::Mask(SlotKind::Label),
                (TemplatePart::Target, _, Fill::Word(t)) => Piece::Text(t.to_string()),
                (TemplatePart::Target, _, Fill::Mask) => Piece::Mask(SlotKind::Target),
            })
            .collect()
    }
}

impl Default for Template {
    fn default() -> Self {
        Template::label_only()
    }
}

impl Serialize for Template {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.source)
    }
}

impl<'de> Deserialize<'de> for Template {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let source = String::deserialize(d)?;
        Template::parse(&source).map_err(serde::de::Error::custom)
    }
}

pub fn render_template(tpl: &Template, word: &str) -> String {
    tpl.render(word)
}

/// What goes into a template slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fill<'a> {
    Word(&'a str),
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKind {
    Label,
    Target,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Piece {
    Text(String),
    Mask(SlotKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    InferText,
    InferDesc,
    InferTemplate,
    PosText,
    PosDesc,
    PosTemplate,
    NegText,
    NegDesc,
    NegTemplate,
}

impl Role {
    pub const ORDER: [Role; 9] = [
        Role::InferText,
        Role::InferDesc,
        Role::InferTemplate,
        Role::PosText,
        Role::PosDesc,
        Role::PosTemplate,
        Role::NegText,
        Role::NegDesc,
        Role::NegTemplate,
    ];

    pub fn is_template(self) -> bool {
        matches!(self, Role::InferTemplate | Role::PosTemplate | Role::NegTemplate)
    }
}

/// Which of the three memes a demonstration block belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Infer,
    Pos,
    Neg,
}

impl Block {
    fn roles(self) -> [Role; 3] {
        match self {
            Block::Infer => [Role::InferText, Role::InferDesc, Role::InferTemplate],
            Block::Pos => [Role::PosText, Role::PosDesc, Role::PosTemplate],
            Block::Neg => [Role::NegText, Role::NegDesc, Role::NegTemplate],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub role: Role,
    pub pieces: Vec<Piece>,
}

impl Segment {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        Segment {
            role,
            pieces: vec![Piece::Text(text.into())],
        }
    }

    /// Renders the segment, writing `mask` for every mask slot.
    pub fn render(&self, mask: &str) -> String {
        self.pieces
            .iter()
            .map(|p| match p {
                Piece::Text(t) => t.as_str(),
                Piece::Mask(_) => mask,
            })
            .collect()
    }

    fn plain_text(&self) -> Option<&str> {
        match self.pieces.as_slice() {
            [Piece::Text(t)] => Some(t),
            _ => None,
        }
    }
}

/// Position of a mask: segment index, then piece index within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotLocator {
    pub segment: usize,
    pub piece: usize,
}

/// Special-token spellings used when a prompt becomes a flat string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecialTokens {
    pub start: String,
    pub sep: String,
    pub end: String,
    pub mask: String,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        SpecialTokens {
            start: "[START]".into(),
            sep: "[SEP]".into(),
            end: "[END]".into(),
            mask: "[MASK]".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub segments: Vec<Segment>,
    pub label_mask_slot: SlotLocator,
    pub target_mask_slot: Option<SlotLocator>,
}

impl Prompt {
    fn from_segments(segments: Vec<Segment>) -> Self {
        let mut label = None;
        let mut target = None;
        for (si, seg) in segments.iter().enumerate() {
            for (pi, piece) in seg.pieces.iter().enumerate() {
                let loc = SlotLocator { segment: si, piece: pi };
                match piece {
                    Piece::Mask(SlotKind::Label) => label = Some(loc),
                    Piece::Mask(SlotKind::Target) => target = Some(loc),
                    Piece::Text(_) => {}
                }
            }
        }
        Prompt {
            segments,
            label_mask_slot: label.expect("inference template always carries a label mask"),
            target_mask_slot: target,
        }
    }

    pub fn segment(&self, role: Role) -> Option<&Segment> {
        self.segments.iter().find(|s| s.role == role)
    }

    pub fn has_demonstrations(&self) -> bool {
        self.segments.len() == Role::ORDER.len()
    }

    pub fn mask_count(&self) -> usize {
        self.segments
            .iter()
            .flat_map(|s| &s.pieces)
            .filter(|p| matches!(p, Piece::Mask(_)))
            .count()
    }

    /// `START seg SEP seg ... END`, segments separated by single spaces.
    pub fn serialize(&self, tokens: &SpecialTokens) -> String {
        let body = self
            .segments
            .iter()
            .map(|s| s.render(&tokens.mask))
            .collect::<Vec<_>>()
            .join(&format!(" {} ", tokens.sep));
        format!("{} {} {}", tokens.start, body, tokens.end)
    }
}

fn check_text(field: &'static str, text: &str) -> Result<(), PromptError> {
    if text.trim().is_empty() {
        return Err(PromptError::Empty(field));
    }
    if contains_reserved(text) {
        return Err(PromptError::ReservedMarker {
            field,
            text: text.to_string(),
        });
    }
    Ok(())
}

/// Text, description, and completed template for one meme.
pub fn build_demonstration(
    block: Block,
    text: &str,
    desc: &str,
    tpl: &Template,
    label: Fill<'_>,
    target: Fill<'_>,
) -> Result<[Segment; 3], PromptError> {
    check_text("meme text", text)?;
    check_text("image description", desc)?;
    if let Fill::Word(w) = label {
        check_text("label word", w)?;
    }
    if let (TemplateKind::LabelAndTarget, Fill::Word(t)) = (tpl.kind(), target) {
        check_text("target word", t)?;
    }
    let [text_role, desc_role, tpl_role] = block.roles();
    Ok([
        Segment::text(text_role, text),
        Segment::text(desc_role, desc),
        Segment {
            role: tpl_role,
            pieces: tpl.instantiate(label, target),
        },
    ])
}

/// A meme as the prompt sees it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemeText<'a> {
    pub id: &'a str,
    pub text: &'a str,
    pub desc: &'a str,
    /// Only read for hateful demonstrations under a target template.
    pub target: Option<&'a str>,
}

impl<'a> MemeText<'a> {
    pub fn new(text: &'a str, desc: &'a str) -> Self {
        MemeText {
            id: "",
            text,
            desc,
            target: None,
        }
    }

    pub fn with_target(mut self, target: &'a str) -> Self {
        self.target = Some(target);
        self
    }
}

/// Builds `[infer | pos | neg]`; with `demos = None` only the inference block.
pub fn assemble_prompt(
    infer: MemeText<'_>,
    demos: Option<(MemeText<'_>, MemeText<'_>)>,
    labels: &LabelWordPair,
    tpl: &Template,
) -> Result<Prompt, PromptError> {
    labels.validate()?;
    let mut segments = Vec::with_capacity(9);
    segments.extend(build_demonstration(
        Block::Infer,
        infer.text,
        infer.desc,
        tpl,
        Fill::Mask,
        Fill::Mask,
    )?);
    if let Some((pos, neg)) = demos {
        segments.extend(build_demonstration(
            Block::Pos,
            pos.text,
            pos.desc,
            tpl,
            Fill::Word(&labels.pos_word),
            Fill::Word(NOBODY),
        )?);
        let neg_target = match tpl.kind() {
            TemplateKind::LabelOnly => NOBODY,
            TemplateKind::LabelAndTarget => neg
                .target
                .ok_or_else(|| PromptError::MissingTarget(neg.id.to_string()))?,
        };
        segments.extend(build_demonstration(
            Block::Neg,
            neg.text,
            neg.desc,
            tpl,
            Fill::Word(&labels.neg_word),
            Fill::Word(neg_target),
        )?);
    }
    Ok(Prompt::from_segments(segments))
}

/// Counts backend tokens. Used for budget enforcement.
pub trait TokenCounter {
    fn count_tokens(&self, text: &str) -> usize;

    /// START, END, and one separator between consecutive segments.
    fn structural_tokens(&self, n_segments: usize) -> usize {
        n_segments + 1
    }
}

fn segment_tokens(seg: &Segment, counter: &dyn TokenCounter) -> usize {
    seg.pieces
        .iter()
        .map(|p| match p {
            Piece::Text(t) => counter.count_tokens(t),
            Piece::Mask(_) => 1,
        })
        .sum()
}

pub fn prompt_tokens(p: &Prompt, counter: &dyn TokenCounter) -> usize {
    counter.structural_tokens(p.segments.len())
        + p.segments
            .iter()
            .map(|s| segment_tokens(s, counter))
            .sum::<usize>()
}

const TRIM_ORDER: [Role; 5] = [
    Role::NegDesc,
    Role::PosDesc,
    Role::InferDesc,
    Role::NegText,
    Role::PosText,
];

/// Shortens segment tails until the prompt fits `budget` tokens.
///
/// Templates and the inference meme text are never touched.
pub fn truncate_to_budget(
    p: &Prompt,
    budget: usize,
    counter: &dyn TokenCounter,
) -> Result<Prompt, PromptError> {
    let required = counter.structural_tokens(p.segments.len())
        + p.segments
            .iter()
            .filter(|s| s.role.is_template() || s.role == Role::InferText)
            .map(|s| segment_tokens(s, counter))
            .sum::<usize>();
    if budget < required {
        return Err(PromptError::BudgetTooSmall { budget, required });
    }
    let mut out = p.clone();
    let mut total = prompt_tokens(&out, counter);
    for role in TRIM_ORDER {
        if total <= budget {
            break;
        }
        let Some(seg) = out.segments.iter_mut().find(|s| s.role == role) else {
            continue;
        };
        let Some(text) = seg.plain_text() else { continue };
        let current = counter.count_tokens(text);
        let others = total - current;
        let words: Vec<&str> = text.split_whitespace().collect();
        // largest word prefix that still fits
        let keep = (0..=words.len())
            .collect::<Vec<_>>()
            .partition_point(|&n| others + counter.count_tokens(&words[..n].join(" ")) <= budget)
            .saturating_sub(1);
        let trimmed = words[..keep].join(" ");
        total = others + counter.count_tokens(&trimmed);
        seg.pieces = vec![Piece::Text(trimmed)];
    }
    Ok(out)
}

/// Everything needed to turn meme records into prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub label_words: LabelWordPair,
    pub template: Template,
    pub variant: Variant,
    pub use_demonstrations: bool,
    /// Maximum prompt length in backend tokens; `None` disables truncation.
    pub token_budget: Option<usize>,
    /// Stand-ins for target categories that are not single backend tokens.
    pub target_synonyms: BTreeMap<String, String>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            label_words: LabelWordPair::default(),
            template: Template::label_only(),
            variant: Variant::Det,
            use_demonstrations: true,
            token_budget: None,
            target_synonyms: BTreeMap::new(),
        }
    }
}

impl PromptConfig {
    pub fn target_word<'a>(&'a self, target: &'a str) -> &'a str {
        self.target_synonyms
            .get(target)
            .map(String::as_str)
            .unwrap_or(target)
    }

    /// Assembles (and, with a budget, truncates) the prompt for `infer`.
    pub fn build(
        &self,
        infer: &MemeRecord,
        demos: Option<(&MemeRecord, &MemeRecord)>,
        counter: &dyn TokenCounter,
    ) -> Result<Prompt, PromptError> {
        let render = |r: &MemeRecord| {
            (
                strip_reserved(&r.meme_text),
                compose_description(r, self.variant),
            )
        };
        let (it, id) = render(infer);
        let demo_texts = if self.use_demonstrations {
            demos.map(|(p, n)| (render(p), render(n)))
        } else {
            None
        };
        let infer_text = MemeText {
            id: &infer.id,
            text: &it,
            desc: &id,
            target: None,
        };
        let demo_pair = match (&demo_texts, demos) {
            (Some((pt, nt)), Some((p, n))) => Some((
                MemeText {
                    id: &p.id,
                    text: &pt.0,
                    desc: &pt.1,
                    target: None,
                },
                MemeText {
                    id: &n.id,
                    text: &nt.0,
                    desc: &nt.1,
                    target: n.target.as_deref().map(|t| self.target_word(t)),
                },
            )),
            _ => None,
        };
        let prompt = assemble_prompt(infer_text, demo_pair, &self.label_words, &self.template)?;
        match self.token_budget {
            Some(budget) => truncate_to_budget(&prompt, budget, counter),
            None => Ok(prompt),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Words;
    impl TokenCounter for Words {
        fn count_tokens(&self, text: &str) -> usize {
            text.split_whitespace().count()
        }
    }

    fn eq1_prompt() -> Prompt {
        assemble_prompt(
            MemeText::new("t1", "d1"),
            Some((MemeText::new("t2", "d2"), MemeText::new("t3", "d3"))),
            &LabelWordPair::default(),
            &Template::label_only(),
        )
        .unwrap()
    }

    #[test]
    fn renders_default_template() {
        let tpl = Template::label_only();
        assert_eq!(render_template(&tpl, "good"), "It was good.");
        assert_eq!(render_template(&tpl, "bad"), "It was bad.");
        assert_eq!(render_template(&tpl, "[MASK]"), "It was [MASK].");
        assert_eq!(tpl.kind(), TemplateKind::LabelOnly);
    }

    #[test]
    fn renders_target_template() {
        let tpl = Template::with_target();
        assert_eq!(tpl.kind(), TemplateKind::LabelAndTarget);
        assert_eq!(
            tpl.render_with_target("bad", "nationality"),
            "It was bad targeting at nationality."
        );
    }

    #[test]
    fn template_parse_rejects_bad_slots() {
        assert!(Template::parse("It was.").is_err());
        assert!(Template::parse("{W} {W}").is_err());
        assert!(Template::parse("{W} {T} {T}").is_err());
        assert!(Template::parse("[SEP] {W}").is_err());
        assert_eq!(Template::parse("{W}").unwrap().render("x"), "x");
    }

    #[test]
    fn demonstration_segments_in_order() {
        let tpl = Template::label_only();
        let segs =
            build_demonstration(Block::Pos, "t2", "d2", &tpl, Fill::Word("good"), Fill::Mask)
                .unwrap();
        let rendered: Vec<_> = segs.iter().map(|s| s.render("[MASK]")).collect();
        assert_eq!(rendered, ["t2", "d2", "It was good."]);
        assert_eq!(
            build_demonstration(Block::Neg, "", "d", &tpl, Fill::Word("bad"), Fill::Mask),
            Err(PromptError::Empty("meme text"))
        );
        assert_eq!(
            build_demonstration(Block::Neg, "t", " ", &tpl, Fill::Word("bad"), Fill::Mask),
            Err(PromptError::Empty("image description"))
        );
    }

    #[test]
    fn assembled_prompt_follows_role_order() {
        let p = eq1_prompt();
        let roles: Vec<_> = p.segments.iter().map(|s| s.role).collect();
        assert_eq!(roles, Role::ORDER);
        assert_eq!(p.mask_count(), 1);
        assert_eq!(p.segments[p.label_mask_slot.segment].role, Role::InferTemplate);
        assert!(p.target_mask_slot.is_none());
        assert_eq!(
            p.serialize(&SpecialTokens::default()),
            "[START] t1 [SEP] d1 [SEP] It was [MASK]. [SEP] t2 [SEP] d2 [SEP] It was good. \
             [SEP] t3 [SEP] d3 [SEP] It was bad. [END]"
        );
    }

    #[test]
    fn zero_demonstration_prompt() {
        let p = assemble_prompt(
            MemeText::new("t1", "d1"),
            None,
            &LabelWordPair::default(),
            &Template::label_only(),
        )
        .unwrap();
        assert_eq!(p.segments.len(), 3);
        assert!(!p.has_demonstrations());
        assert_eq!(
            p.serialize(&SpecialTokens::default()),
            "[START] t1 [SEP] d1 [SEP] It was [MASK]. [END]"
        );
    }

    #[test]
    fn target_prompt_carries_demo_targets() {
        let p = assemble_prompt(
            MemeText::new("t1", "d1"),
            Some((
                MemeText::new("t2", "d2"),
                MemeText::new("t3", "d3").with_target("sex"),
            )),
            &LabelWordPair::default(),
            &Template::with_target(),
        )
        .unwrap();
        let tokens = SpecialTokens::default();
        assert_eq!(p.mask_count(), 2);
        let target = p.target_mask_slot.unwrap();
        assert_eq!(target.segment, p.label_mask_slot.segment);
        assert!(target.piece > p.label_mask_slot.piece);
        assert_eq!(
            p.segment(Role::PosTemplate).unwrap().render(&tokens.mask),
            "It was good targeting at nobody."
        );
        assert_eq!(
            p.segment(Role::NegTemplate).unwrap().render(&tokens.mask),
            "It was bad targeting at sex."
        );
        assert_eq!(
            p.segment(Role::InferTemplate).unwrap().render(&tokens.mask),
            "It was [MASK] targeting at [MASK]."
        );
    }

    #[test]
    fn target_template_needs_hateful_demo_target() {
        let mut neg = MemeText::new("t3", "d3");
        neg.id = "n7";
        let err = assemble_prompt(
            MemeText::new("t1", "d1"),
            Some((MemeText::new("t2", "d2"), neg)),
            &LabelWordPair::default(),
            &Template::with_target(),
        )
        .unwrap_err();
        assert_eq!(err, PromptError::MissingTarget("n7".into()));
    }

    #[test]
    fn swapping_label_words_touches_only_demo_templates() {
        let a = eq1_prompt();
        let b = assemble_prompt(
            MemeText::new("t1", "d1"),
            Some((MemeText::new("t2", "d2"), MemeText::new("t3", "d3"))),
            &LabelWordPair::default().swapped(),
            &Template::label_only(),
        )
        .unwrap();
        for (x, y) in a.segments.iter().zip(&b.segments) {
            if matches!(x.role, Role::PosTemplate | Role::NegTemplate) {
                assert_ne!(x, y);
            } else {
                assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn label_word_validation() {
        assert!(LabelWordPair::new("good", "good").is_err());
        assert!(LabelWordPair::new("", "bad").is_err());
        assert!(LabelWordPair::new("very good", "bad").is_err());
        let p: LabelWordPair = "benign, offensive".parse().unwrap();
        assert_eq!(p.word_for(Label::NonHateful), "benign");
        assert_eq!(p.word_for(Label::Hateful), "offensive");
        assert!("good".parse::<LabelWordPair>().is_err());
    }

    fn long_prompt() -> Prompt {
        assemble_prompt(
            MemeText::new("infer text here", "infer desc words are here"),
            Some((
                MemeText::new("pos text", "pos desc a b c"),
                MemeText::new("neg text", "neg desc one two three four five six seven"),
            )),
            &LabelWordPair::default(),
            &Template::label_only(),
        )
        .unwrap()
    }

    #[test]
    fn truncation_within_budget_is_identity() {
        let p = long_prompt();
        let n = prompt_tokens(&p, &Words);
        assert_eq!(truncate_to_budget(&p, n, &Words).unwrap(), p);
    }

    #[test]
    fn truncation_trims_neg_desc_first() {
        let p = long_prompt();
        let n = prompt_tokens(&p, &Words);
        let t = truncate_to_budget(&p, n - 5, &Words).unwrap();
        assert_eq!(prompt_tokens(&t, &Words), n - 5);
        for (a, b) in p.segments.iter().zip(&t.segments) {
            if a.role == Role::NegDesc {
                assert_eq!(b.render(""), "neg desc one two");
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn truncation_rejects_tiny_budget() {
        let p = long_prompt();
        // 10 structural + 3 infer text + 3 x 4 template tokens
        let err = truncate_to_budget(&p, 24, &Words).unwrap_err();
        assert_eq!(err, PromptError::BudgetTooSmall { budget: 24, required: 25 });
        let t = truncate_to_budget(&p, 25, &Words).unwrap();
        assert_eq!(prompt_tokens(&t, &Words), 25);
        assert_eq!(t.segment(Role::InferText), p.segment(Role::InferText));
        assert_eq!(t.label_mask_slot, p.label_mask_slot);
    }

    #[test]
    fn prompt_config_roundtrips_through_toml() {
        let cfg = PromptConfig {
            template: Template::with_target(),
            ..Default::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        let back: PromptConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    proptest::proptest! {
        #[test]
        fn truncation_is_idempotent_and_fits(
            texts in proptest::collection::vec("[a-z]{1,6}( [a-z]{1,6}){0,12}", 6),
            slack in 0usize..60,
        ) {
            let p = assemble_prompt(
                MemeText::new(&texts[0], &texts[1]),
                Some((MemeText::new(&texts[2], &texts[3]), MemeText::new(&texts[4], &texts[5]))),
                &LabelWordPair::default(),
                &Template::label_only(),
            ).unwrap();
            let required = 10 + Words.count_tokens(&texts[0]) + 12;
            let budget = required + slack;
            let once = truncate_to_budget(&p, budget, &Words).unwrap();
            proptest::prop_assert!(prompt_tokens(&once, &Words) <= budget);
            let twice = truncate_to_budget(&once, budget, &Words).unwrap();
            proptest::prop_assert_eq!(&once, &twice);
            proptest::prop_assert_eq!(once.mask_count(), 1);
            let serialized = once.serialize(&SpecialTokens::default());
            proptest::prop_assert_eq!(serialized.matches("[SEP]").count(), 8);
        }
    }
}
