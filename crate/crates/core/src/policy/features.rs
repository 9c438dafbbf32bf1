//! Macro-action vocabulary and the versioned feature registry.
//!
//! Each episode step exposes a small ordered set of complete emissions: a
//! think stub, candidate search queries composed from the last utterance and
//! the entities seen in the conversation, answer sentences copied from the
//! passages retrieved so far, an abstain answer and an empty answer.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, Episode};
use crate::reward::normalize;
use crate::text::is_punct;

/// Bump whenever a feature is added, removed or redefined.
pub const FEATURE_REGISTRY_VERSION: u32 = 1;

pub const ACTION_FEATURES: [&str; 24] = [
    "is_search",
    "is_answer_sentence",
    "is_abstain",
    "is_terminate",
    "is_think",
    "query_is_raw_utterance",
    "query_names_no_entity",
    "query_adds_entity",
    "query_entity_user_recency",
    "query_entity_assistant_only",
    "query_form_span_of_entity",
    "query_form_utterance_plus_entity",
    "query_form_entity_only",
    "query_repeats_issued",
    "search_again",
    "search_again_x_evidence",
    "answer_query_overlap",
    "answer_has_new_entity",
    "answer_source_rank_inv",
    "answer_from_latest_search",
    "answer_first_sentence",
    "answer_before_any_search",
    "think_after_invalid",
    "answer_utterance_overlap",
];

pub const VALUE_FEATURES: [&str; 8] = [
    "bias",
    "searches_used_frac",
    "best_evidence",
    "utterance_names_no_entity",
    "invalid_frac",
    "topic_entity_queried",
    "emissions_frac",
    "has_passages",
];

pub const ACTION_DIM: usize = ACTION_FEATURES.len();
pub const VALUE_DIM: usize = VALUE_FEATURES.len();

pub const THINK_STUB: &str = "<think>I should resolve references to earlier turns before searching.</think>";
pub const ABSTAIN_TEXT: &str = "Unfortunately, no relevant information is found.";

const PRONOUNS: [&str; 12] = [
    "it", "its", "they", "their", "them", "there", "this", "that", "he", "she", "his", "her",
];

const STOPWORDS: [&str; 40] = [
    "what", "about", "and", "is", "do", "you", "know", "the", "which", "does", "have", "tell", "me", "of", "a", "an",
    "who", "where", "when", "how", "are", "was", "were", "can", "i", "want", "to", "in", "on", "for", "with", "did",
    "now", "lets", "okay", "please", "so", "any", "other", "be",
];

const MAX_ENTITIES: usize = 6;

fn is_pronoun(word: &str) -> bool {
    PRONOUNS.contains(&word)
}

fn is_stop(word: &str) -> bool {
    STOPWORDS.contains(&word) || is_pronoun(word)
}

fn strip_edges(word: &str) -> &str {
    word.trim_matches(is_punct)
}

/// Maximal runs of capitalized words that are not function words.
/// With `skip_first`, the sentence-initial word never starts an entity.
pub fn capitalized_runs(text: &str, skip_first: bool) -> Vec<String> {
    let mut out = Vec::new();
    let mut run: Vec<&str> = Vec::new();
    for (i, raw) in text.split_whitespace().enumerate() {
        let w = strip_edges(raw);
        let capital = w.chars().next().is_some_and(char::is_uppercase);
        let function = is_stop(&w.to_lowercase());
        let eligible = capital && !function && !(skip_first && i == 0);
        if eligible {
            run.push(w);
        }
        let breaks = !eligible || raw.ends_with(|c: char| is_punct(c));
        if breaks && !run.is_empty() {
            out.push(run.join(" "));
            run.clear();
        }
    }
    if !run.is_empty() {
        out.push(run.join(" "));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntity {
    pub name: String,
    pub mentioned_by_user: bool,
    /// 0 for the entity most recently named by the user.
    pub user_recency: Option<usize>,
}

/// Entities named in the retained history and the current utterance.
pub fn history_entities(episode: &Episode) -> Vec<HistoryEntity> {
    // (name, last user turn, last any turn)
    let mut seen: Vec<(String, Option<usize>, usize)> = Vec::new();
    let note = |name: String, turn: usize, user: bool, seen: &mut Vec<(String, Option<usize>, usize)>| match seen
        .iter_mut()
        .find(|e| e.0 == name)
    {
        Some(e) => {
            e.2 = turn;
            if user {
                e.1 = Some(turn);
            }
        }
        None => seen.push((name, user.then_some(turn), turn)),
    };
    let n = episode.history.len();
    for (t, turn) in episode.history.iter().enumerate() {
        for e in capitalized_runs(&turn.question, false) {
            note(e, t, true, &mut seen);
        }
        for e in capitalized_runs(&turn.answer, false) {
            note(e, t, false, &mut seen);
        }
    }
    for e in capitalized_runs(&episode.utterance, false) {
        note(e, n, true, &mut seen);
    }

    let mut user_order: Vec<(usize, usize)> = seen
        .iter()
        .enumerate()
        .filter_map(|(i, e)| e.1.map(|t| (i, t)))
        .collect();
    user_order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut recency: HashMap<usize, usize> = HashMap::new();
    for (rank, (i, _)) in user_order.iter().enumerate() {
        recency.insert(*i, rank);
    }

    // most recently mentioned first
    let mut idx: Vec<usize> = (0..seen.len()).collect();
    idx.sort_by(|&a, &b| seen[b].2.cmp(&seen[a].2).then(a.cmp(&b)));
    idx.truncate(MAX_ENTITIES);
    idx.into_iter()
        .map(|i| HistoryEntity {
            name: seen[i].0.clone(),
            mentioned_by_user: seen[i].1.is_some(),
            user_recency: recency.get(&i).copied(),
        })
        .collect()
}

/// Words of the utterance that are neither function words nor entity names.
pub fn content_span(utterance: &str, entities: &[HistoryEntity]) -> String {
    let entity_words: BTreeSet<String> = entities
        .iter()
        .flat_map(|e| e.name.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>())
        .collect();
    utterance
        .split_whitespace()
        .map(strip_edges)
        .filter(|w| !w.is_empty())
        .filter(|w| {
            let lw = w.to_lowercase();
            !is_stop(&lw) && !entity_words.contains(&lw)
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn strip_question(utterance: &str) -> &str {
    utterance.trim().trim_end_matches(['?', '.', '!'])
}

fn substitute_pronouns(utterance: &str, entity: &str) -> Option<String> {
    let mut changed = false;
    let words: Vec<String> = strip_question(utterance)
        .split_whitespace()
        .map(|raw| {
            if is_pronoun(&strip_edges(raw).to_lowercase()) {
                changed = true;
                entity.to_owned()
            } else {
                raw.to_owned()
            }
        })
        .collect();
    changed.then(|| words.join(" "))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryForm {
    Raw,
    SpanOfEntity,
    PronounSubstitution,
    UtterancePlusEntity,
    EntityOnly,
    SpanOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionKind {
    Think,
    Search { query: String, form: QueryForm },
    Answer { text: String },
    Abstain,
    Terminate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroAction {
    pub kind: ActionKind,
    pub emission: String,
}

/// Row-major `rows x dim` matrix of per-action features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(dim: usize) -> Self {
        Self {
            rows: 0,
            dim,
            data: Vec::new(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == dim), "ragged feature rows");
        Self {
            rows: rows.len(),
            dim,
            data: rows.concat(),
        }
    }

    pub fn push(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.dim);
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn dot(&self, i: usize, w: &[f64]) -> f64 {
        self.row(i).iter().zip(w).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacroVocabulary {
    pub actions: Vec<MacroAction>,
    pub features: FeatureMatrix,
}

impl MacroVocabulary {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn position(&self, emission: &str) -> Option<usize> {
        self.actions.iter().position(|a| a.emission == emission)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.actions.iter().filter_map(|a| match &a.kind {
            ActionKind::Search { query, .. } => Some(query.as_str()),
            _ => None,
        })
    }
}

/// Split passage text into sentences, keeping terminal punctuation.
pub fn sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for w in text.split_whitespace() {
        current.push(w);
        if w.ends_with(['.', '?', '!']) {
            out.push(current.join(" "));
            current.clear();
        }
    }
    if !current.is_empty() {
        out.push(current.join(" "));
    }
    out
}

fn content_tokens(text: &str) -> Vec<String> {
    normalize(text).into_iter().filter(|t| !is_stop(t)).collect()
}

fn overlap_fraction(needles: &[String], haystack: &BTreeSet<String>) -> f64 {
    if needles.is_empty() {
        return 0.0;
    }
    needles.iter().filter(|t| haystack.contains(*t)).count() as f64 / needles.len() as f64
}

struct Candidate {
    kind: ActionKind,
    entity: Option<usize>,
}

fn query_candidates(utterance: &str, entities: &[HistoryEntity]) -> Vec<Candidate> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    let mut add = |query: String, form: QueryForm, entity: Option<usize>, out: &mut Vec<Candidate>| {
        if !query.trim().is_empty() && seen.insert(query.clone()) {
            out.push(Candidate {
                kind: ActionKind::Search { query, form },
                entity,
            });
        }
    };
    add(utterance.trim().to_owned(), QueryForm::Raw, None, &mut out);
    let span = content_span(utterance, entities);
    let bare = strip_question(utterance);
    for (i, e) in entities.iter().enumerate() {
        if !span.is_empty() {
            add(
                format!("{span} of {}", e.name),
                QueryForm::SpanOfEntity,
                Some(i),
                &mut out,
            );
        }
        if let Some(q) = substitute_pronouns(utterance, &e.name) {
            add(q, QueryForm::PronounSubstitution, Some(i), &mut out);
        }
        add(
            format!("{bare} {}", e.name),
            QueryForm::UtterancePlusEntity,
            Some(i),
            &mut out,
        );
        add(e.name.clone(), QueryForm::EntityOnly, Some(i), &mut out);
    }
    if !span.is_empty() {
        add(span, QueryForm::SpanOnly, None, &mut out);
    }
    out
}

/// Everything the feature maps need from an episode.
struct Analysis {
    entities: Vec<HistoryEntity>,
    utterance_entities: BTreeSet<String>,
    utterance_content: Vec<String>,
    issued: Vec<Vec<String>>,
    issued_norm: BTreeSet<Vec<String>>,
    best_evidence: f64,
}

fn analyze(episode: &Episode) -> Analysis {
    let entities = history_entities(episode);
    let utterance_entities: BTreeSet<String> = capitalized_runs(&episode.utterance, false).into_iter().collect();
    let utterance_content = content_tokens(&episode.utterance);
    let queries = episode.trajectory().queries();
    let issued: Vec<Vec<String>> = queries.iter().map(|q| content_tokens(q)).collect();
    let issued_norm = queries.iter().map(|q| normalize(q)).collect();
    let mut best_evidence: f64 = 0.0;
    for p in episode.retrieved() {
        for s in sentences(&p.text) {
            let toks: BTreeSet<String> = normalize(&s).into_iter().collect();
            let overlap = issued.iter().map(|q| overlap_fraction(q, &toks)).fold(0.0, f64::max);
            let fresh = sentence_has_new_entity(&s, &queries, &episode.utterance);
            best_evidence = best_evidence.max(overlap * f64::from(u8::from(fresh)));
        }
    }
    Analysis {
        entities,
        utterance_entities,
        utterance_content,
        issued,
        issued_norm,
        best_evidence,
    }
}

fn sentence_has_new_entity(sentence: &str, queries: &[String], utterance: &str) -> bool {
    let known: BTreeSet<String> = queries
        .iter()
        .map(String::as_str)
        .chain(std::iter::once(utterance))
        .flat_map(normalize)
        .collect();
    capitalized_runs(sentence, true)
        .iter()
        .any(|run| normalize(run).iter().any(|t| !known.contains(t)))
}

/// Build the ordered action set and its feature matrix.
pub fn build_vocabulary(episode: &Episode, config: &EnvConfig) -> MacroVocabulary {
    let a = analyze(episode);
    let searches_used = episode.searches_used();
    let queries = episode.trajectory().queries();
    let mut actions = Vec::new();
    let mut features = FeatureMatrix::new(ACTION_DIM);
    let mut row = [0.0; ACTION_DIM];

    let mut push = |kind: ActionKind, emission: String, row: &[f64]| {
        actions.push(MacroAction { kind, emission });
        features.push(row);
    };

    row[4] = 1.0;
    row[22] = episode.invalid_actions() as f64;
    push(ActionKind::Think, THINK_STUB.to_owned(), &row);

    if searches_used < config.max_searches {
        for cand in query_candidates(&episode.utterance, &a.entities) {
            let ActionKind::Search { query, form } = &cand.kind else {
                unreachable!()
            };
            let mut row = [0.0; ACTION_DIM];
            row[0] = 1.0;
            row[5] = f64::from(u8::from(*form == QueryForm::Raw));
            let names_entity = a.entities.iter().any(|e| query.contains(e.name.as_str()));
            row[6] = f64::from(u8::from(!names_entity));
            if let Some(i) = cand.entity {
                let e = &a.entities[i];
                row[7] = f64::from(u8::from(!a.utterance_entities.contains(&e.name)));
                row[8] = e.user_recency.map_or(0.0, |r| 1.0 / (1.0 + r as f64));
                row[9] = f64::from(u8::from(!e.mentioned_by_user));
            }
            row[10] = f64::from(u8::from(*form == QueryForm::SpanOfEntity));
            row[11] = f64::from(u8::from(*form == QueryForm::UtterancePlusEntity));
            row[12] = f64::from(u8::from(*form == QueryForm::EntityOnly));
            row[13] = f64::from(u8::from(a.issued_norm.contains(&normalize(query))));
            if searches_used > 0 {
                row[14] = 1.0;
                row[15] = a.best_evidence;
            }
            let emission = format!("<search>{query}</search>");
            push(cand.kind.clone(), emission, &row);
        }
    }

    let mut seen = BTreeSet::new();
    let latest = searches_used.checked_sub(1);
    for p in episode.retrieved() {
        for (si, s) in sentences(&p.text).into_iter().enumerate() {
            if !seen.insert(s.clone()) {
                continue;
            }
            let toks: BTreeSet<String> = normalize(&s).into_iter().collect();
            let mut row = [0.0; ACTION_DIM];
            row[1] = 1.0;
            row[16] = a.issued.iter().map(|q| overlap_fraction(q, &toks)).fold(0.0, f64::max);
            row[17] = f64::from(u8::from(sentence_has_new_entity(&s, &queries, &episode.utterance)));
            row[18] = 1.0 / p.rank as f64;
            row[19] = f64::from(u8::from(Some(p.search) == latest));
            row[20] = f64::from(u8::from(si == 0));
            row[23] = overlap_fraction(&a.utterance_content, &toks);
            let emission = format!("<answer>{s}</answer>");
            push(ActionKind::Answer { text: s }, emission, &row);
        }
    }

    let no_search = f64::from(u8::from(searches_used == 0));
    let mut row = [0.0; ACTION_DIM];
    row[2] = 1.0;
    row[21] = no_search;
    push(ActionKind::Abstain, format!("<answer>{ABSTAIN_TEXT}</answer>"), &row);
    let mut row = [0.0; ACTION_DIM];
    row[3] = 1.0;
    row[21] = no_search;
    push(ActionKind::Terminate, "<answer></answer>".to_owned(), &row);

    MacroVocabulary { actions, features }
}

/// Critic input for the state reached so far.
pub fn value_features(episode: &Episode, config: &EnvConfig) -> Vec<f64> {
    let a = analyze(episode);
    let topic = a.entities.iter().find(|e| e.user_recency == Some(0));
    let topic_queried = topic.is_some_and(|t| {
        let name = normalize(&t.name);
        a.issued.iter().any(|q| name.iter().all(|n| q.contains(n)))
    });
    let names_entity = !a.utterance_entities.is_empty();
    vec![
        1.0,
        episode.searches_used() as f64 / config.max_searches.max(1) as f64,
        a.best_evidence,
        f64::from(u8::from(!names_entity)),
        episode.invalid_actions() as f64 / config.max_invalid_actions.max(1) as f64,
        f64::from(u8::from(topic_queried)),
        episode.emissions() as f64 / 5.0,
        f64::from(u8::from(!episode.retrieved().is_empty())),
    ]
}
