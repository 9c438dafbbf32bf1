//! Seeded generator for small conversational QA worlds.
//!
//! Each conversation follows a topic entity through several attribute
//! questions. Follow-up turns refer back to the entity with a pronoun or by
//! ellipsis, and the gold rewrite names it explicitly. Every turn has exactly
//! one relevant passage holding the gold answer sentence verbatim.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Conversation, DatasetError, Turn};
use crate::corpus::{Passage, Qrels};

pub const ATTRIBUTES: [&str; 14] = [
    "capital",
    "river",
    "founder",
    "currency",
    "language",
    "anthem",
    "mountain",
    "festival",
    "dish",
    "harbor",
    "museum",
    "university",
    "poet",
    "bridge",
];

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "ve", "ra", "mi", "to", "sa", "ne", "du", "ri", "po", "ta", "gel", "mar", "bren", "dos", "vin", "tal",
    "or", "es", "ul", "quen", "zo", "hal",
];

const MAX_NAME_ATTEMPTS: usize = 100_000;

const KINDS: [&str; 6] = ["city", "province", "island", "valley", "kingdom", "republic"];
const TRAITS: [&str; 5] = ["quiet", "busy", "ancient", "green", "coastal"];
const NOUNS: [&str; 5] = ["streets", "markets", "hills", "gardens", "villages"];

const FULL_TEMPLATES: [&str; 3] = [
    "What is the {attr} of {entity}?",
    "Tell me about the {attr} of {entity}.",
    "Which {attr} does {entity} have?",
];

const ANAPHORIC_TEMPLATES: [&str; 6] = [
    "What about its {attr}?",
    "And its {attr}?",
    "What is its {attr}?",
    "Do you know its {attr}?",
    "What about the {attr}?",
    "And the {attr}?",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub conversations: usize,
    pub turns_per_conversation: usize,
    pub entity_pool_size: usize,
    pub anaphora_rate: f64,
    pub distractors_per_conversation: usize,
    /// Chance that a follow-up turn switches to a fresh entity.
    pub topic_shift_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            conversations: 100,
            turns_per_conversation: 4,
            entity_pool_size: 200,
            anaphora_rate: 0.7,
            distractors_per_conversation: 1,
            topic_shift_rate: 0.15,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let counts = [
            ("conversations", self.conversations),
            ("turns_per_conversation", self.turns_per_conversation),
            ("entity_pool_size", self.entity_pool_size),
            ("distractors_per_conversation", self.distractors_per_conversation),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(DatasetError::Spec(format!("`{name}` must be at least 1")));
            }
        }
        for (name, v) in [
            ("anaphora_rate", self.anaphora_rate),
            ("topic_shift_rate", self.topic_shift_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DatasetError::Spec(format!("`{name}` must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub conversations: Vec<Conversation>,
    pub corpus: Vec<Passage>,
    pub qrels: Qrels,
}

struct NameGen {
    used: BTreeSet<String>,
}

impl NameGen {
    fn new() -> Self {
        let used = ATTRIBUTES
            .iter()
            .chain(KINDS.iter())
            .chain(TRAITS.iter())
            .chain(NOUNS.iter())
            .map(|s| s.to_string())
            .collect();
        Self { used }
    }

    fn fresh(&mut self, rng: &mut ChaCha8Rng, syllables: usize) -> Result<String, DatasetError> {
        for _ in 0..MAX_NAME_ATTEMPTS {
            let mut name = String::new();
            for _ in 0..syllables {
                name.push_str(SYLLABLES[rng.gen_range(0..SYLLABLES.len())]);
            }
            if self.used.insert(name.clone()) {
                let mut chars = name.chars();
                let first = chars.next().expect("non-empty").to_ascii_uppercase();
                return Ok(std::iter::once(first).chain(chars).collect());
            }
        }
        Err(DatasetError::Spec("synthetic name space exhausted".into()))
    }
}

fn fill(template: &str, attr: &str, entity: &str) -> String {
    template.replace("{attr}", attr).replace("{entity}", entity)
}

/// Per-entity world facts, created lazily.
struct World {
    entities: Vec<String>,
    kinds: Vec<&'static str>,
    values: BTreeMap<(usize, &'static str), String>,
}

struct CorpusBuilder {
    passages: Vec<Passage>,
    fact_ids: BTreeMap<(usize, &'static str), String>,
}

impl CorpusBuilder {
    fn next_id(&self) -> String {
        format!("p{:05}", self.passages.len() + 1)
    }
}

fn fact_sentence(attr: &str, entity: &str, value: &str) -> String {
    format!("The {attr} of {entity} is {value}.")
}

/// Deterministic given `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData, DatasetError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut names = NameGen::new();

    let entities = (0..spec.entity_pool_size)
        .map(|_| names.fresh(&mut rng, 3))
        .collect::<Result<Vec<_>, _>>()?;
    let kinds = (0..spec.entity_pool_size)
        .map(|_| KINDS[rng.gen_range(0..KINDS.len())])
        .collect();
    let mut world = World {
        entities,
        kinds,
        values: BTreeMap::new(),
    };
    let mut order: Vec<usize> = (0..spec.entity_pool_size).collect();
    order.shuffle(&mut rng);
    let mut next_entity = 0usize;
    let mut take_entity = |rng: &mut ChaCha8Rng| {
        if next_entity == order.len() {
            order.shuffle(rng);
            next_entity = 0;
        }
        next_entity += 1;
        order[next_entity - 1]
    };

    let mut corpus = CorpusBuilder {
        passages: Vec::new(),
        fact_ids: BTreeMap::new(),
    };
    let mut qrels = Qrels::new();
    let mut conversations = Vec::with_capacity(spec.conversations);

    for c in 0..spec.conversations {
        let conv_id = format!("syn-{c:04}");
        let mut entity = take_entity(&mut rng);
        let mut unused: Vec<&'static str> = ATTRIBUTES.to_vec();
        unused.shuffle(&mut rng);
        let mut asked: Vec<(usize, &'static str)> = Vec::new();
        let mut turns = Vec::with_capacity(spec.turns_per_conversation);

        for t in 0..spec.turns_per_conversation {
            let shift = t > 0 && (unused.is_empty() || rng.gen_bool(spec.topic_shift_rate));
            if shift {
                let previous = entity;
                entity = take_entity(&mut rng);
                if entity == previous {
                    entity = take_entity(&mut rng);
                }
                unused = ATTRIBUTES.to_vec();
                unused.shuffle(&mut rng);
            }
            let attr = unused.pop().expect("attributes available");
            let name = world.entities[entity].clone();
            let anaphoric = t > 0 && !shift && rng.gen_bool(spec.anaphora_rate);
            let (question, rewrite) = if anaphoric {
                let template = ANAPHORIC_TEMPLATES[rng.gen_range(0..ANAPHORIC_TEMPLATES.len())];
                (fill(template, attr, &name), format!("{attr} of {name}"))
            } else {
                let template = FULL_TEMPLATES[rng.gen_range(0..FULL_TEMPLATES.len())];
                let q = fill(template, attr, &name);
                (q.clone(), q)
            };

            let value = match world.values.get(&(entity, attr)) {
                Some(v) => v.clone(),
                None => {
                    let v = format!("{} {}", names.fresh(&mut rng, 3)?, names.fresh(&mut rng, 3)?);
                    world.values.insert((entity, attr), v.clone());
                    v
                }
            };
            let answer = fact_sentence(attr, &name, &value);
            let pid = match corpus.fact_ids.get(&(entity, attr)) {
                Some(id) => id.clone(),
                None => {
                    let id = corpus.next_id();
                    let filler = format!(
                        "{name} is a {} known for its {} {}.",
                        world.kinds[entity],
                        TRAITS[rng.gen_range(0..TRAITS.len())],
                        NOUNS[rng.gen_range(0..NOUNS.len())]
                    );
                    corpus
                        .passages
                        .push(Passage::new(id.clone(), name.clone(), format!("{answer} {filler}")));
                    corpus.fact_ids.insert((entity, attr), id.clone());
                    id
                }
            };
            qrels.insert(&conv_id, t, &pid);
            asked.push((entity, attr));
            turns.push(Turn::new(question, answer).with_rewrite(rewrite).with_relevant([pid]));
        }

        // distractors mention the conversation's entities and attributes but
        // never an answer value
        for _ in 0..spec.distractors_per_conversation {
            let (e, a1) = asked[rng.gen_range(0..asked.len())];
            let a2 = loop {
                let a = ATTRIBUTES[rng.gen_range(0..ATTRIBUTES.len())];
                if a != a1 {
                    break a;
                }
            };
            let name = &world.entities[e];
            let id = corpus.next_id();
            corpus.passages.push(Passage::new(
                id,
                name.clone(),
                format!("Travelers visiting {name} often ask about the {a1} and the {a2}."),
            ));
        }

        conversations.push(Conversation { id: conv_id, turns });
    }

    Ok(SyntheticData {
        conversations,
        corpus: corpus.passages,
        qrels,
    })
}
