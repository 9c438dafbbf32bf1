//! Episode mechanics: prompt construction, search calls, answer handling and
//! invalid-action recovery.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{RetrievalResult, Retriever};
use crate::dialogue::{Conversation, Turn};
use crate::text::word_count;
use crate::trajectory::{ParseOptions, Segment, Trajectory, INVALID_ACTION_NOTICE, SEARCH_LIMIT_NOTICE};

/// Instruction template given to the policy.
pub const POLICY_PROMPT: &str = include_str!("../assets/policy_prompt.txt");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnvError {
    #[error("turn index {index} out of range for conversation `{conversation}` with {turns} turns")]
    TurnOutOfRange {
        conversation: String,
        index: usize,
        turns: usize,
    },
    #[error("episode already terminated")]
    Terminated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub top_k: usize,
    pub max_searches: usize,
    pub max_invalid_actions: usize,
    pub max_prompt_tokens: usize,
    pub max_emission_tokens: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            top_k: 3,
            max_searches: 2,
            max_invalid_actions: 3,
            max_prompt_tokens: 3500,
            max_emission_tokens: 512,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("env.top_k", self.top_k),
            ("env.max_invalid_actions", self.max_invalid_actions),
            ("env.max_prompt_tokens", self.max_prompt_tokens),
            ("env.max_emission_tokens", self.max_emission_tokens),
        ] {
            if v == 0 {
                return Err(format!("{name} must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn parse_options(&self) -> ParseOptions {
        ParseOptions {
            max_searches: self.max_searches,
            top_k: self.top_k,
        }
    }
}

/// `User:` / `Assistant:` lines for every prior turn.
pub fn render_context_block(history: &[Turn]) -> String {
    history
        .iter()
        .map(|t| format!("User: {}\nAssistant: {}", t.question, t.answer))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_prompt(context_block: &str, last_user_utterance: &str) -> String {
    POLICY_PROMPT
        .replace("{context_block}", context_block)
        .replace("{last_user_utterance}", last_user_utterance)
}

/// A passage shown to the policy inside an information block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedPassage {
    pub id: String,
    pub title: String,
    pub text: String,
    /// 1-based rank within its search.
    pub rank: usize,
    /// Which search call (0-based) returned it.
    pub search: usize,
}

impl RetrievedPassage {
    fn render(&self) -> String {
        let text = self.text.replace('\n', " ");
        format!("Doc {} (Title: {}) {}", self.rank, self.title, text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub prompt: String,
    pub trajectory: String,
}

impl Observation {
    pub fn text(&self) -> String {
        if self.trajectory.is_empty() {
            self.prompt.clone()
        } else {
            format!("{}\n{}", self.prompt, self.trajectory)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "content", rename_all = "snake_case")]
pub enum Injection {
    None,
    Information(Vec<String>),
    Notice(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvStep {
    pub observation: Observation,
    pub injected: Injection,
    pub terminal: bool,
    pub searches_used: usize,
    pub invalid_actions: usize,
    /// Terminated by exhausting the invalid-action budget.
    pub forced: bool,
}

/// Single-owner state of one episode.
#[derive(Debug, Clone)]
pub struct Episode {
    pub conversation_id: String,
    pub turn_index: usize,
    /// Prior turns kept in the prompt after truncation.
    pub history: Vec<Turn>,
    pub utterance: String,
    prompt: String,
    trajectory: Trajectory,
    searches_used: usize,
    invalid_actions: usize,
    emissions: usize,
    forced: bool,
    results: Vec<RetrievalResult>,
    retrieved: Vec<RetrievedPassage>,
}

impl Episode {
    pub fn prompt(&self) -> &str {
        &self.prompt
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.trajectory
    }

    pub fn into_trajectory(self) -> Trajectory {
        self.trajectory
    }

    pub fn is_terminal(&self) -> bool {
        self.trajectory.is_terminal()
    }

    pub fn searches_used(&self) -> usize {
        self.searches_used
    }

    pub fn invalid_actions(&self) -> usize {
        self.invalid_actions
    }

    pub fn emissions(&self) -> usize {
        self.emissions
    }

    pub fn forced(&self) -> bool {
        self.forced
    }

    /// One retrieval result per accepted search, in order.
    pub fn results(&self) -> &[RetrievalResult] {
        &self.results
    }

    pub fn retrieved(&self) -> &[RetrievedPassage] {
        &self.retrieved
    }

    pub fn observation(&self) -> Observation {
        Observation {
            prompt: self.prompt.clone(),
            trajectory: self.trajectory.render_unchecked(),
        }
    }
}

/// Wraps a shared read-only retriever; episodes are independent.
pub struct SearchEnv<'a, R: Retriever + ?Sized> {
    retriever: &'a R,
    config: EnvConfig,
}

enum Action {
    Search(Vec<Segment>, String),
    Answer(Vec<Segment>),
}

fn classify(emission: &str) -> Option<Action> {
    let unlimited = ParseOptions {
        max_searches: usize::MAX,
        top_k: usize::MAX,
    };
    let parsed = Trajectory::parse(emission, &unlimited).ok()?;
    let (last, prefix) = parsed.segments().split_last()?;
    if !prefix.iter().all(|s| matches!(s, Segment::Think(_))) {
        return None;
    }
    match last {
        Segment::Search(q) => Some(Action::Search(prefix.to_vec(), q.clone())),
        Segment::Answer(_) => Some(Action::Answer(parsed.segments().to_vec())),
        _ => None,
    }
}

impl<'a, R: Retriever + ?Sized> SearchEnv<'a, R> {
    pub fn new(retriever: &'a R, config: EnvConfig) -> Self {
        Self { retriever, config }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn retriever(&self) -> &'a R {
        self.retriever
    }

    pub fn reset(&self, conversation: &Conversation, turn_index: usize) -> Result<Episode, EnvError> {
        if turn_index >= conversation.turns.len() {
            return Err(EnvError::TurnOutOfRange {
                conversation: conversation.id.clone(),
                index: turn_index,
                turns: conversation.turns.len(),
            });
        }
        let utterance = conversation.turns[turn_index].question.clone();
        let full = conversation.history(turn_index);
        // drop whole turns, oldest first, until the prompt fits
        let mut start = 0;
        let mut prompt = render_prompt(&render_context_block(full), &utterance);
        while word_count(&prompt) > self.config.max_prompt_tokens && start < full.len() {
            start += 1;
            prompt = render_prompt(&render_context_block(&full[start..]), &utterance);
        }
        Ok(Episode {
            conversation_id: conversation.id.clone(),
            turn_index,
            history: full[start..].to_vec(),
            utterance,
            prompt,
            trajectory: Trajectory::new(),
            searches_used: 0,
            invalid_actions: 0,
            emissions: 0,
            forced: false,
            results: Vec::new(),
            retrieved: Vec::new(),
        })
    }

    pub fn step(&self, episode: &mut Episode, emission: &str) -> Result<EnvStep, EnvError> {
        if episode.is_terminal() {
            return Err(EnvError::Terminated);
        }
        episode.emissions += 1;

        let words: Vec<&str> = emission.split_whitespace().collect();
        let truncated = words.len() > self.config.max_emission_tokens;
        let emission = if truncated {
            words[..self.config.max_emission_tokens].join(" ")
        } else {
            emission.to_owned()
        };

        let action = if truncated { None } else { classify(&emission) };
        let injected = match action {
            Some(Action::Answer(segments)) => {
                for s in segments {
                    episode.trajectory.push(s);
                }
                Injection::None
            }
            Some(Action::Search(_, _)) if episode.searches_used >= self.config.max_searches => {
                self.reject(episode, &emission, SEARCH_LIMIT_NOTICE)
            }
            Some(Action::Search(thinks, query)) => {
                for s in thinks {
                    episode.trajectory.push(s);
                }
                episode.trajectory.push(Segment::Search(query.clone()));
                let result = self.retriever.search(&query, self.config.top_k);
                let search = episode.searches_used;
                let mut shown = Vec::with_capacity(result.hits.len());
                for (i, hit) in result.hits.iter().enumerate() {
                    let (title, text) = self
                        .retriever
                        .passage(&hit.id)
                        .map(|p| (p.title.clone(), p.text.clone()))
                        .unwrap_or_default();
                    let passage = RetrievedPassage {
                        id: hit.id.clone(),
                        title,
                        text,
                        rank: i + 1,
                        search,
                    };
                    shown.push(passage.render());
                    episode.retrieved.push(passage);
                }
                episode.trajectory.push(Segment::Information(shown.clone()));
                episode.results.push(result);
                episode.searches_used += 1;
                Injection::Information(shown)
            }
            None => self.reject(episode, &emission, INVALID_ACTION_NOTICE),
        };

        Ok(EnvStep {
            observation: episode.observation(),
            injected,
            terminal: episode.is_terminal(),
            searches_used: episode.searches_used,
            invalid_actions: episode.invalid_actions,
            forced: episode.forced,
        })
    }

    fn reject(&self, episode: &mut Episode, emission: &str, notice: &str) -> Injection {
        let raw = emission.trim();
        if !raw.is_empty() {
            episode.trajectory.push(Segment::Text(raw.to_owned()));
        }
        episode.trajectory.push(Segment::Notice(notice.to_owned()));
        episode.invalid_actions += 1;
        if episode.invalid_actions >= self.config.max_invalid_actions {
            episode.forced = true;
            episode.trajectory.mark_terminal();
        }
        Injection::Notice(notice.to_owned())
    }
}
