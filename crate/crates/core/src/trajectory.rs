//! Tagged trajectory grammar: `<think>`, `<search>`, `<information>` and
//! `<answer>` blocks, plus environment notices.
//!
//! Canonical text joins rendered segments with a single newline. Parsing is
//! total: any input yields a [`Trajectory`] or a [`TrajectoryError`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const SEARCH_OPEN: &str = "<search>";
pub const SEARCH_CLOSE: &str = "</search>";
pub const INFO_OPEN: &str = "<information>";
pub const INFO_CLOSE: &str = "</information>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

pub const TAGS: [&str; 8] = [
    THINK_OPEN,
    THINK_CLOSE,
    SEARCH_OPEN,
    SEARCH_CLOSE,
    INFO_OPEN,
    INFO_CLOSE,
    ANSWER_OPEN,
    ANSWER_CLOSE,
];

/// Injected after a malformed policy emission.
pub const INVALID_ACTION_NOTICE: &str = "My previous action is invalid. If I want to search, I should put the query between <search> and </search>. If I want to give the final answer, I should put the answer between <answer> and </answer>.";

/// Injected when the policy searches past its budget.
pub const SEARCH_LIMIT_NOTICE: &str = "My previous action is invalid. I have reached the search limit, so I should now give the final answer between <answer> and </answer>.";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TrajectoryError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("structure error at byte {offset}: {message}")]
    Structure { offset: usize, message: String },
    #[error("limit exceeded: {message}")]
    Limit { message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Policy,
    Environment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "content", rename_all = "snake_case")]
pub enum Segment {
    Think(String),
    Search(String),
    Information(Vec<String>),
    Answer(String),
    /// Environment text outside any tag, e.g. the invalid-action notice.
    Notice(String),
    /// Free policy text outside any tag.
    Text(String),
}

impl Segment {
    pub fn origin(&self) -> Origin {
        match self {
            Segment::Information(_) | Segment::Notice(_) => Origin::Environment,
            _ => Origin::Policy,
        }
    }

    pub fn render(&self) -> String {
        match self {
            Segment::Think(t) => format!("{THINK_OPEN}{t}{THINK_CLOSE}"),
            Segment::Search(q) => format!("{SEARCH_OPEN}{q}{SEARCH_CLOSE}"),
            Segment::Information(ps) => format!("{INFO_OPEN}{}{INFO_CLOSE}", ps.join("\n")),
            Segment::Answer(a) => format!("{ANSWER_OPEN}{a}{ANSWER_CLOSE}"),
            Segment::Notice(t) | Segment::Text(t) => t.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseOptions {
    pub max_searches: usize,
    pub top_k: usize,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            max_searches: 2,
            top_k: 3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    segments: Vec<Segment>,
    terminal: bool,
}

fn find_tag_at(text: &str, pos: usize) -> Option<&'static str> {
    let rest = &text[pos..];
    TAGS.iter().copied().find(|t| rest.starts_with(t))
}

/// Byte offset of the next recognized tag at or after `from`.
fn next_tag(text: &str, from: usize) -> Option<(usize, &'static str)> {
    let mut best: Option<(usize, &'static str)> = None;
    for tag in TAGS {
        if let Some(i) = text[from..].find(tag) {
            let i = from + i;
            if best.is_none_or(|(b, _)| i < b) {
                best = Some((i, tag));
            }
        }
    }
    best
}

const NOTICES: [&str; 2] = [INVALID_ACTION_NOTICE, SEARCH_LIMIT_NOTICE];

fn notice_at(text: &str, pos: usize) -> Option<&'static str> {
    NOTICES.iter().copied().find(|n| text[pos..].starts_with(n))
}

fn next_notice(text: &str, from: usize) -> Option<usize> {
    NOTICES
        .iter()
        .filter_map(|n| text[from..].find(n).map(|i| from + i))
        .min()
}

fn closing_for(open: &str) -> Option<&'static str> {
    match open {
        THINK_OPEN => Some(THINK_CLOSE),
        SEARCH_OPEN => Some(SEARCH_CLOSE),
        INFO_OPEN => Some(INFO_CLOSE),
        ANSWER_OPEN => Some(ANSWER_CLOSE),
        _ => None,
    }
}

fn split_passages(content: &str) -> Vec<String> {
    if content.is_empty() {
        Vec::new()
    } else {
        content.split('\n').map(str::to_owned).collect()
    }
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Append without checks; callers own the invariants.
    pub fn push(&mut self, segment: Segment) {
        if matches!(segment, Segment::Answer(_)) {
            self.terminal = true;
        }
        self.segments.push(segment);
    }

    /// End the episode without an answer.
    pub fn mark_terminal(&mut self) {
        self.terminal = true;
    }

    pub fn queries(&self) -> Vec<String> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Search(q) => Some(q.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn search_count(&self) -> usize {
        self.segments.iter().filter(|s| matches!(s, Segment::Search(_))).count()
    }

    pub fn answer(&self) -> Option<&str> {
        self.segments.iter().rev().find_map(|s| match s {
            Segment::Answer(a) => Some(a.as_str()),
            _ => None,
        })
    }

    pub fn think_texts(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Think(t) => Some(t.as_str()),
            _ => None,
        })
    }

    pub fn parse(text: &str, options: &ParseOptions) -> Result<Self, TrajectoryError> {
        let mut traj = Trajectory::new();
        let mut pos = 0usize;
        // byte offset where each segment started, for structure errors
        let mut starts: Vec<usize> = Vec::new();
        while pos < text.len() {
            let rest = &text[pos..];
            let trimmed = rest.trim_start();
            pos += rest.len() - trimmed.len();
            if pos >= text.len() {
                break;
            }
            if traj.answer().is_some() {
                // anything after the answer
                if let Some((off, _)) = next_tag(text, pos) {
                    return Err(TrajectoryError::Structure {
                        offset: off,
                        message: "answer must be the final segment".into(),
                    });
                }
                log::warn!("ignoring {} bytes of text after </answer>", text.len() - pos);
                break;
            }
            if let Some(notice) = notice_at(text, pos) {
                starts.push(pos);
                traj.push(Segment::Notice(notice.to_owned()));
                pos += notice.len();
                continue;
            }
            match find_tag_at(text, pos) {
                Some(open) if closing_for(open).is_some() => {
                    let close = closing_for(open).expect("opening tag");
                    let body_start = pos + open.len();
                    let Some(rel_end) = text[body_start..].find(close) else {
                        return Err(TrajectoryError::Parse {
                            offset: pos,
                            message: format!("unmatched {open}"),
                        });
                    };
                    let body_end = body_start + rel_end;
                    let body = &text[body_start..body_end];
                    if open != THINK_OPEN {
                        if let Some((off, tag)) = next_tag(body, 0) {
                            return Err(TrajectoryError::Parse {
                                offset: body_start + off,
                                message: format!("unexpected {tag} inside {open}"),
                            });
                        }
                    }
                    let segment = match open {
                        THINK_OPEN => Segment::Think(body.to_owned()),
                        SEARCH_OPEN => Segment::Search(body.to_owned()),
                        INFO_OPEN => Segment::Information(split_passages(body)),
                        _ => Segment::Answer(body.to_owned()),
                    };
                    starts.push(pos);
                    traj.push(segment);
                    pos = body_end + close.len();
                }
                Some(close) => {
                    return Err(TrajectoryError::Parse {
                        offset: pos,
                        message: format!("unmatched {close}"),
                    });
                }
                None => {
                    let tag_end = next_tag(text, pos).map_or(text.len(), |(i, _)| i);
                    let end = next_notice(text, pos).map_or(tag_end, |i| i.min(tag_end));
                    starts.push(pos);
                    traj.push(Segment::Text(text[pos..end].trim().to_owned()));
                    pos = end;
                }
            }
        }
        traj.check_structure(Some(&starts))?;
        traj.check_limits(options)?;
        Ok(traj)
    }

    fn check_structure(&self, starts: Option<&[usize]>) -> Result<(), TrajectoryError> {
        let offset = |i: usize| starts.and_then(|s| s.get(i).copied()).unwrap_or(i);
        let last = self.segments.len().saturating_sub(1);
        for (i, seg) in self.segments.iter().enumerate() {
            match seg {
                Segment::Answer(_) if i != last => {
                    return Err(TrajectoryError::Structure {
                        offset: offset(i),
                        message: "answer must be the final segment".into(),
                    })
                }
                Segment::Information(ps) => {
                    if i == 0 || !matches!(self.segments[i - 1], Segment::Search(_)) {
                        return Err(TrajectoryError::Structure {
                            offset: offset(i),
                            message: "information must directly follow a search".into(),
                        });
                    }
                    if ps.iter().any(|p| p.contains('\n')) {
                        return Err(TrajectoryError::Structure {
                            offset: offset(i),
                            message: "passage text contains a newline".into(),
                        });
                    }
                }
                Segment::Search(q) if q.trim().is_empty() => {
                    return Err(TrajectoryError::Structure {
                        offset: offset(i),
                        message: "empty search query".into(),
                    })
                }
                Segment::Notice(t) if !NOTICES.contains(&t.as_str()) => {
                    return Err(TrajectoryError::Structure {
                        offset: offset(i),
                        message: "unknown environment notice".into(),
                    })
                }
                // raw rejected emissions may hold partial tags
                Segment::Text(t) if t.trim().is_empty() || t.trim() != t => {
                    return Err(TrajectoryError::Structure {
                        offset: offset(i),
                        message: "free text must be non-empty and trimmed".into(),
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn check_limits(&self, options: &ParseOptions) -> Result<(), TrajectoryError> {
        let searches = self.search_count();
        if searches > options.max_searches {
            return Err(TrajectoryError::Limit {
                message: format!("{searches} search calls exceed the maximum of {}", options.max_searches),
            });
        }
        for seg in &self.segments {
            if let Segment::Information(ps) = seg {
                if ps.len() > options.top_k {
                    return Err(TrajectoryError::Limit {
                        message: format!("{} passages exceed top-k {}", ps.len(), options.top_k),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self, options: &ParseOptions) -> Result<(), TrajectoryError> {
        self.check_structure(None)?;
        self.check_limits(options)
    }

    /// Canonical text. Fails if the structural invariants do not hold.
    pub fn render(&self) -> Result<String, TrajectoryError> {
        self.check_structure(None)?;
        Ok(self.render_unchecked())
    }

    pub fn render_unchecked(&self) -> String {
        self.segments.iter().map(Segment::render).collect::<Vec<_>>().join("\n")
    }
}

pub trait Tokenizer {
    fn tokenize(&self, text: &str) -> Vec<String>;
}

/// Whitespace words, with every protocol tag split out as its own token.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordTokenizer;

impl Tokenizer for WordTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            let mut pos = 0;
            while pos < word.len() {
                match next_tag(word, pos) {
                    Some((i, tag)) => {
                        if i > pos {
                            out.push(word[pos..i].to_owned());
                        }
                        out.push(tag.to_owned());
                        pos = i + tag.len();
                    }
                    None => {
                        out.push(word[pos..].to_owned());
                        pos = word.len();
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossMask {
    pub tokens: Vec<String>,
    /// 1 for policy-emitted tokens, 0 for environment-injected ones.
    pub weights: Vec<u8>,
}

impl LossMask {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.weights.iter().filter(|&&w| w == 0).count()
    }

    pub fn concat(mut self, other: LossMask) -> LossMask {
        self.tokens.extend(other.tokens);
        self.weights.extend(other.weights);
        self
    }
}

pub fn loss_mask(trajectory: &Trajectory, tokenizer: &impl Tokenizer) -> LossMask {
    let mut mask = LossMask {
        tokens: Vec::new(),
        weights: Vec::new(),
    };
    for seg in trajectory.segments() {
        let weight = u8::from(seg.origin() == Origin::Policy);
        let tokens = tokenizer.tokenize(&seg.render());
        mask.weights.extend(std::iter::repeat_n(weight, tokens.len()));
        mask.tokens.extend(tokens);
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> ParseOptions {
        ParseOptions::default()
    }

    #[test]
    fn canonical_form() {
        let text = "<think>x</think>\n<search>q</search>\n<information>p1</information>\n<answer>a</answer>";
        let t = Trajectory::parse(text, &opts()).unwrap();
        assert_eq!(
            t.segments(),
            &[
                Segment::Think("x".into()),
                Segment::Search("q".into()),
                Segment::Information(vec!["p1".into()]),
                Segment::Answer("a".into()),
            ]
        );
        assert!(t.is_terminal());
        assert_eq!(t.render().unwrap(), text);
        assert_eq!(t.segments()[2].origin(), Origin::Environment);
    }

    #[test]
    fn empty_trajectory() {
        let t = Trajectory::parse("", &opts()).unwrap();
        assert!(t.is_empty());
        assert!(!t.is_terminal());
        assert_eq!(t.render().unwrap(), "");
    }

    #[test]
    fn search_limit() {
        let err = Trajectory::parse("<search>q</search><search>r</search><search>s</search>", &opts()).unwrap_err();
        assert!(matches!(err, TrajectoryError::Limit { .. }));
        let err = Trajectory::parse("<search>q</search><information>a\nb\nc\nd</information>", &opts()).unwrap_err();
        assert!(matches!(err, TrajectoryError::Limit { .. }));
    }

    #[test]
    fn unmatched_tags_report_offsets() {
        assert_eq!(
            Trajectory::parse("ab <search>q", &opts()).unwrap_err(),
            TrajectoryError::Parse {
                offset: 3,
                message: "unmatched <search>".into()
            }
        );
        match Trajectory::parse("x </answer>", &opts()).unwrap_err() {
            TrajectoryError::Parse { offset, .. } => assert_eq!(offset, 2),
            e => panic!("{e:?}"),
        }
        assert!(matches!(
            Trajectory::parse("<search>a<answer>b</answer></search>", &opts()),
            Err(TrajectoryError::Parse { .. })
        ));
    }

    #[test]
    fn structure_errors() {
        assert!(matches!(
            Trajectory::parse("<answer>a</answer><search>q</search>", &opts()),
            Err(TrajectoryError::Structure { .. })
        ));
        assert!(matches!(
            Trajectory::parse("<information>p</information>", &opts()),
            Err(TrajectoryError::Structure { .. })
        ));
        assert!(matches!(
            Trajectory::parse("<search>  </search>", &opts()),
            Err(TrajectoryError::Structure { .. })
        ));
    }

    #[test]
    fn text_after_answer_is_ignored() {
        let t = Trajectory::parse("<answer>a</answer> trailing words", &opts()).unwrap();
        assert_eq!(t.segments().len(), 1);
        assert_eq!(t.answer(), Some("a"));
    }

    #[test]
    fn stray_search_inside_think_is_think_text() {
        let text = "<think>Let me try. =search> paper lace hits </search> again</think>";
        let t = Trajectory::parse(text, &opts()).unwrap();
        assert_eq!(t.search_count(), 0);
        assert!(matches!(t.segments()[0], Segment::Think(_)));
    }

    #[test]
    fn notices_are_environment_text() {
        let text = format!("=search> q\n{INVALID_ACTION_NOTICE}\n<search>q</search>");
        let t = Trajectory::parse(&text, &opts()).unwrap();
        assert_eq!(t.segments()[0], Segment::Text("=search> q".into()));
        assert_eq!(t.segments()[1].origin(), Origin::Environment);
        assert_eq!(t.render().unwrap(), text);
    }

    #[test]
    fn word_tokenizer_splits_tags() {
        let toks = WordTokenizer.tokenize("<think>a b</think> <search>c</search>");
        assert_eq!(toks, ["<think>", "a", "b", "</think>", "<search>", "c", "</search>"]);
    }

    #[test]
    fn mask_counts() {
        let mut t = Trajectory::new();
        t.push(Segment::Think("one two three".into()));
        t.push(Segment::Search("four five".into()));
        t.push(Segment::Information(vec!["a b c d e".into(), "f g h i j".into()]));
        t.push(Segment::Answer("w x y z".into()));
        let m = loss_mask(&t, &WordTokenizer);
        assert_eq!(m.len(), 3 + 2 + 10 + 4 + 8);
        assert_eq!(m.masked_count(), 12);
        assert_eq!(m.tokens.len(), m.len());

        let mut plain = Trajectory::new();
        plain.push(Segment::Think("x".into()));
        plain.push(Segment::Answer("y".into()));
        assert!(loss_mask(&plain, &WordTokenizer).weights.iter().all(|&w| w == 1));
    }

    #[test]
    fn mask_is_local() {
        let a = Trajectory::parse(
            "<think>x y</think>\n<search>q</search>\n<information>p q r</information>",
            &opts(),
        )
        .unwrap();
        let b = Trajectory::parse("<think>z</think>\n<answer>done</answer>", &opts()).unwrap();
        let mut joined = a.clone();
        for s in b.segments() {
            joined.push(s.clone());
        }
        assert_eq!(
            loss_mask(&joined, &WordTokenizer),
            loss_mask(&a, &WordTokenizer).concat(loss_mask(&b, &WordTokenizer))
        );
    }
}
