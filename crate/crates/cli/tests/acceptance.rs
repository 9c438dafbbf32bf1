//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

// The oracles index by position on purpose.
#![allow(clippy::needless_range_loop)]

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use convsearch::corpus::{hit_at, mrr, ndcg_at, recall_at, search_tokens, Index, Passage, Retriever};
use convsearch::dialogue::{Conversation, Turn};
use convsearch::env::{EnvConfig, Injection, SearchEnv};
use convsearch::policy::{log_softmax, FeatureMatrix, LinearCritic, LinearSoftmaxPolicy};
use convsearch::ppo::{
    actor_objective, compute_gae, critic_loss, critic_objective, gae_recursive, update_step, PpoConfig, RolloutBatch,
    TrajectoryRollout,
};
use convsearch::reward::{answer_reward, f1};
use convsearch::train::eval::evaluate;
use convsearch::train::{run_training, RunConfig, StepDiagnostics, TrainOutcome, Workspace};
use convsearch::trajectory::{
    loss_mask, ParseOptions, Segment, Trajectory, TrajectoryError, WordTokenizer, INVALID_ACTION_NOTICE,
    SEARCH_LIMIT_NOTICE,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<Duration, String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("took {took:.2?}, limit {limit:?}"))?;
    Ok(took)
}

// ---------------------------------------------------------------- 1

const WORDS: [&str; 16] = [
    "the", "a", "an", "cat", "Cat", "dog", "sat", "on", "mat", "paper", "lace", "hit", "x", "y", "and", "The",
];
const PUNCT: [&str; 8] = [",", ".", "!", "?", "'", "\"", "-", ";"];

fn random_text(rng: &mut impl Rng) -> String {
    let n = rng.gen_range(0..12);
    let mut s = String::new();
    for _ in 0..n {
        let mut w = WORDS.choose(rng).unwrap().to_string();
        if rng.gen_bool(0.25) {
            w.push_str(PUNCT.choose(rng).unwrap());
        }
        if rng.gen_bool(0.1) {
            w.insert_str(0, PUNCT.choose(rng).unwrap());
        }
        s.push_str(&w);
        s.push_str(if rng.gen_bool(0.1) { "  " } else { " " });
    }
    s
}

fn oracle_tokens(s: &str) -> Vec<String> {
    let cleaned: String = s
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .to_lowercase();
    cleaned
        .split_whitespace()
        .filter(|w| !["a", "an", "the"].contains(w))
        .map(String::from)
        .collect()
}

fn oracle_f1(pred: &str, gold: &str) -> f64 {
    let p = oracle_tokens(pred);
    let g = oracle_tokens(gold);
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let mut used = vec![false; g.len()];
    let mut common = 0usize;
    for t in &p {
        if let Some(j) = (0..g.len()).find(|&j| !used[j] && g[j] == *t) {
            used[j] = true;
            common += 1;
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

const SHORT_PRED: &str = "Paper Lace had a hit with \"Billy Don't Be a Hero\".";
const SHORT_GOLD: &str = "Billy Don't Be a Hero is a 1974 pop song that was first a UK hit for Paper Lace.";
const LONG_PRED: &str = "In Honduras, the traditional Christmas dinner is served around midnight on the 24th of December and typically consists of tamales, roast pork leg, accompanied by \"torrejas,\" for dessert, and eggnog.";
const LONG_GOLD: &str = "Christmas dinner is served around midnight on the 24th of December, consisting of tamales, roast pork leg, accompanied by ``torrejas,'' for dessert, and eggnog.";

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut nonzero = 0;
    for i in 0..1000 {
        let a = random_text(&mut rng);
        let b = random_text(&mut rng);
        let (got, want) = (f1(&a, &b), oracle_f1(&a, &b));
        ensure(got.to_bits() == want.to_bits(), || {
            format!("pair {i}: f1({a:?}, {b:?}) = {got}, oracle {want}")
        })?;
        nonzero += usize::from(got > 0.0);
    }
    let short = f1(SHORT_PRED, SHORT_GOLD);
    let long = answer_reward(Some(LONG_PRED), LONG_GOLD);
    ensure((short - 0.56).abs() <= 0.005, || {
        format!("short-answer example scored {short:.4}, want 0.56")
    })?;
    ensure((long - 0.8627).abs() <= 0.005, || {
        format!("long-answer example scored {long:.4}, want 0.8627")
    })?;
    let took = within(start, Duration::from_secs(5))?;
    Ok(format!(
        "1000/1000 pairs exact ({nonzero} with overlap); examples {short:.4} and {long:.4}; {took:.2?}"
    ))
}

// ---------------------------------------------------------------- 2

fn oracle_gae(values: &[f64], reward: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = values.len();
    let v = |i: usize| if i == n { reward } else { values[i] };
    (0..n)
        .map(|i| {
            let mut total = 0.0;
            for j in i..n {
                let mut w = 1.0;
                for _ in i..j {
                    w *= gamma * lambda;
                }
                total += w * (gamma * v(j + 1) - v(j));
            }
            total
        })
        .collect()
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let n = rng.gen_range(1..40);
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let reward = rng.gen_range(-1.0..2.0);
        let gamma = rng.gen_range(0.5..=1.0);
        let lambda = rng.gen_range(0.0..=1.0);
        let got = compute_gae(&values, reward, gamma, lambda).map_err(|e| e.to_string())?;
        let want = oracle_gae(&values, reward, gamma, lambda);
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
        ensure(worst <= 1e-10, || format!("case {case}: deviation {worst:e}"))?;

        let fast = compute_gae(&values, reward, 1.0, 1.0).map_err(|e| e.to_string())?;
        let slow = gae_recursive(&values, reward, 1.0, 1.0);
        for i in 0..n {
            let identity = reward - values[i];
            ensure((fast[i] - identity).abs() <= 1e-12, || {
                format!("case {case}: fast path off at {i}")
            })?;
            ensure((slow[i] - identity).abs() <= 1e-12, || {
                format!(
                    "case {case}: recursion differs from R - V at {i} by {:e}",
                    (slow[i] - identity).abs()
                )
            })?;
        }
    }
    let took = within(start, Duration::from_secs(5))?;
    Ok(format!(
        "200 cases, max deviation {worst:.1e}; unit-discount identity within 1e-12; {took:.2?}"
    ))
}

// ---------------------------------------------------------------- 3, 4

fn random_matrix(rng: &mut impl Rng, rows: usize, dim: usize) -> FeatureMatrix {
    let rows: Vec<Vec<f64>> = (0..rows)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    FeatureMatrix::from_rows(&rows)
}

struct Problem {
    batch: RolloutBatch,
    policy: LinearSoftmaxPolicy,
    reference: LinearSoftmaxPolicy,
    critic: LinearCritic,
    advantages: Vec<Vec<f64>>,
    config: PpoConfig,
}

fn random_problem(rng: &mut impl Rng, mask_rate: f64) -> Problem {
    let dim = rng.gen_range(2..6);
    let vdim = rng.gen_range(2..5);
    let policy = LinearSoftmaxPolicy {
        weights: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    };
    let reference = LinearSoftmaxPolicy {
        weights: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    };
    let critic = LinearCritic {
        weights: (0..vdim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    };
    let mut batch = RolloutBatch::default();
    let mut advantages = Vec::new();
    for _ in 0..rng.gen_range(1..5) {
        let mut t = TrajectoryRollout {
            reward: rng.gen_range(-0.5..1.5),
            ..Default::default()
        };
        let mut adv = Vec::new();
        for _ in 0..rng.gen_range(1..7) {
            let masked = rng.gen_bool(mask_rate);
            let rows = rng.gen_range(2..6);
            let obs = random_matrix(rng, rows, dim);
            let a = rng.gen_range(0..obs.rows);
            let lp = log_softmax(&obs, &policy.weights)[a];
            t.mask.push(u8::from(!masked));
            t.actions.push(a);
            t.old_log_probs.push(lp + rng.gen_range(-0.4..0.4));
            t.values.push(rng.gen_range(-1.0..1.0));
            t.value_features
                .push((0..vdim).map(|_| rng.gen_range(-1.0..1.0)).collect());
            t.observations.push(if masked { FeatureMatrix::new(dim) } else { obs });
            adv.push(rng.gen_range(-1.0..1.0));
        }
        batch.trajectories.push(t);
        advantages.push(adv);
    }
    let config = PpoConfig {
        clip_epsilon: rng.gen_range(0.1..0.3),
        kl_coef: rng.gen_range(1e-3..0.5),
        ..PpoConfig::default()
    };
    Problem {
        batch,
        policy,
        reference,
        critic,
        advantages,
        config,
    }
}

fn near_clip_boundary(p: &Problem) -> bool {
    let eps = p.config.clip_epsilon;
    p.batch.trajectories.iter().any(|t| {
        (0..t.len()).any(|i| {
            t.mask[i] != 0 && {
                let lp = log_softmax(&t.observations[i], &p.policy.weights)[t.actions[i]];
                let ratio = (lp - t.old_log_probs[i]).exp();
                (ratio - (1.0 - eps)).abs() < 1e-3 || (ratio - (1.0 + eps)).abs() < 1e-3
            }
        })
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-8)
}

fn central_difference(w: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..w.len())
        .map(|k| {
            let mut plus = w.to_vec();
            let mut minus = w.to_vec();
            plus[k] += h;
            minus[k] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut accepted, mut skipped, mut clipped_positions) = (0, 0, 0usize);
    let (mut worst_actor, mut worst_critic, mut worst_values) = (0.0f64, 0.0f64, 0.0f64);
    let h = 1e-6;
    while accepted < 100 {
        let p = random_problem(&mut rng, 0.3);
        if p.batch.unmasked_count() == 0 || near_clip_boundary(&p) {
            skipped += 1;
            continue;
        }
        accepted += 1;
        let (stats, _) =
            actor_objective(&p.batch, &p.policy, &p.reference, &p.advantages, &p.config).map_err(|e| e.to_string())?;
        clipped_positions += (stats.clip_fraction * p.batch.unmasked_count() as f64).round() as usize;
        let numeric = central_difference(&p.policy.weights, h, |w| {
            let pol = LinearSoftmaxPolicy { weights: w.to_vec() };
            actor_objective(&p.batch, &pol, &p.reference, &p.advantages, &p.config)
                .expect("valid batch")
                .0
                .loss
        });
        worst_actor = worst_actor.max(relative_error(&stats.grad, &numeric));

        let (_, cgrad) = critic_objective(&p.batch, &p.critic).map_err(|e| e.to_string())?;
        let numeric = central_difference(&p.critic.weights, h, |w| {
            critic_objective(&p.batch, &LinearCritic { weights: w.to_vec() })
                .expect("valid batch")
                .0
        });
        worst_critic = worst_critic.max(relative_error(&cgrad, &numeric));

        let t = &p.batch.trajectories[0];
        let (_, vgrad) = critic_loss(&t.values, t.reward).map_err(|e| e.to_string())?;
        let numeric = central_difference(&t.values, h, |v| critic_loss(v, t.reward).expect("non-empty").0);
        worst_values = worst_values.max(relative_error(&vgrad, &numeric));
    }
    ensure(worst_actor <= 1e-4, || {
        format!("actor gradient relative error {worst_actor:e}")
    })?;
    ensure(worst_critic <= 1e-4, || {
        format!("critic gradient relative error {worst_critic:e}")
    })?;
    ensure(worst_values <= 1e-4, || {
        format!("value-loss gradient relative error {worst_values:e}")
    })?;
    ensure(clipped_positions > 0, || "no batch exercised the clipped branch".into())?;
    let took = within(start, Duration::from_secs(30))?;
    Ok(format!(
        "100 batches ({skipped} near-boundary skipped, {clipped_positions} clipped positions); max rel error actor {worst_actor:.1e}, critic {worst_critic:.1e}, values {worst_values:.1e}; {took:.2?}"
    ))
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut trials = 0;
    let mut mutated = 0usize;
    while trials < 100 {
        let mut p = random_problem(&mut rng, 0.5);
        let masked = p.batch.unmasked_count();
        let total: usize = p.batch.trajectories.iter().map(TrajectoryRollout::len).sum();
        if masked == 0 || masked == total {
            continue;
        }
        trials += 1;
        p.config.normalize_advantages = trials % 2 == 0;
        let run = |p: &Problem| {
            let (s, kl) =
                actor_objective(&p.batch, &p.policy, &p.reference, &p.advantages, &p.config).expect("valid batch");
            let (closs, cgrad) = critic_objective(&p.batch, &p.critic).expect("valid batch");
            let (pol, cri, diag) =
                update_step(&p.policy, &p.critic, &p.reference, &p.batch, &p.config).expect("update");
            (
                s.loss.to_bits(),
                bits(&s.grad),
                kl.to_bits(),
                closs.to_bits(),
                bits(&cgrad),
                bits(&pol.weights),
                bits(&cri.weights),
                diag.actor_loss.to_bits(),
            )
        };
        let before = run(&p);
        let dim = p.policy.weights.len();
        for (t, adv) in p.batch.trajectories.iter_mut().zip(p.advantages.iter_mut()) {
            for i in 0..t.mask.len() {
                if t.mask[i] != 0 {
                    continue;
                }
                mutated += 1;
                t.old_log_probs[i] = rng.gen_range(-50.0..50.0);
                adv[i] = rng.gen_range(-100.0..100.0);
                t.values[i] = rng.gen_range(-100.0..100.0);
                t.value_features[i]
                    .iter_mut()
                    .for_each(|x| *x = rng.gen_range(-100.0..100.0));
                t.observations[i] = random_matrix(&mut rng, 4, dim);
                t.actions[i] = rng.gen_range(0..4);
            }
        }
        let after = run(&p);
        ensure(before == after, || {
            format!("trial {trials}: masked mutation changed the update")
        })?;
    }
    Ok(format!(
        "100 trials, {mutated} masked positions mutated; losses, gradients and updated weights bit-identical"
    ))
}

// ---------------------------------------------------------------- 5

const VOCAB: [&str; 12] = [
    "who",
    "sang",
    "Paper",
    "Lace",
    "hit",
    "1974",
    "\"quoted\"",
    "don't",
    "song",
    "night",
    "Chicago",
    "died?",
];

fn words(rng: &mut impl Rng, lo: usize, hi: usize) -> String {
    let n = rng.gen_range(lo..=hi);
    (0..n)
        .map(|_| *VOCAB.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

fn random_trajectory(rng: &mut impl Rng) -> Trajectory {
    let mut t = Trajectory::new();
    if rng.gen_bool(0.2) {
        t.push(Segment::Text(words(rng, 1, 5)));
        t.push(Segment::Notice(INVALID_ACTION_NOTICE.into()));
    }
    let searches = rng.gen_range(0..=2);
    for s in 0..searches {
        if rng.gen_bool(0.7) {
            let body = words(rng, 0, 8);
            t.push(Segment::Think(if rng.gen_bool(0.2) {
                format!(" {body} ")
            } else {
                body
            }));
        }
        t.push(Segment::Search(words(rng, 1, 6)));
        let k = rng.gen_range(0..=3);
        t.push(Segment::Information((0..k).map(|_| words(rng, 1, 10)).collect()));
        if s == 1 && rng.gen_bool(0.2) {
            t.push(Segment::Text(words(rng, 1, 3)));
            t.push(Segment::Notice(SEARCH_LIMIT_NOTICE.into()));
        }
    }
    if rng.gen_bool(0.6) {
        t.push(Segment::Think(words(rng, 1, 8)));
    }
    if rng.gen_bool(0.9) {
        t.push(Segment::Answer(words(rng, 0, 10)));
    }
    t
}

fn band_corpus() -> Index {
    Index::build(vec![
        Passage::new("pl1", "Paper Lace", "Their first two singles, released in 1974, were both written by Murray and Callander: Billy Don't Be a Hero (No. 1 UK) and The Night Chicago Died (No. 1 US)."),
        Passage::new("pl2", "Paper Lace", "Paper Lace are a British pop group formed in Nottingham in 1967."),
        Passage::new("x1", "Chicago", "Chicago is the most populous city in Illinois."),
        Passage::new("x2", "Heroes", "A hero is a real person or fictional character who overcomes adversity."),
        Passage::new("x3", "Singles", "A single is a type of music release with fewer tracks than an album."),
        Passage::new("x4", "Group", "A music group performs songs together."),
    ])
    .expect("valid corpus")
}

fn band_conversation() -> Conversation {
    Conversation {
        id: "paper-lace".into(),
        turns: vec![
            Turn::new("What was the song The Night Chicago Died about?", "In the song The Night Chicago Died, the narrator retells his mother's anguish while awaiting news of the fate of her husband, a Chicago policeman."),
            Turn::new("Who is the song The Night Chicago Died by?", "The Night Chicago Died is a song by the British group Paper Lace."),
            Turn::new("Does the group have other hits?", SHORT_GOLD),
        ],
    }
}

fn recovery_trace() -> Result<String, String> {
    // Recorded trace: the malformed call and the notice sit inside the think block.
    let trace = format!(
        "<think> Let's find out if the group Paper Lace has any other hits. =search> does the group Paper Lace have other hits? </search> {INVALID_ACTION_NOTICE} Let me try again. </think>\n\
         <search> does the group Paper Lace have other hits? </search>\n\
         <information>Their first two singles, released in 1974, were both written by Murray and Callander: \"Billy Don't Be a Hero\" (No. 1 UK) and \"The Night Chicago Died\" (No. 1 US).</information>\n\
         <think> Paper Lace had a hit with \"Billy Don't Be a Hero\". </think>\n\
         <answer> {SHORT_PRED} </answer>"
    );
    let t = Trajectory::parse(&trace, &ParseOptions::default()).map_err(|e| format!("recorded trace: {e}"))?;
    let kinds: Vec<&str> = t
        .segments()
        .iter()
        .map(|s| match s {
            Segment::Think(_) => "think",
            Segment::Search(_) => "search",
            Segment::Information(_) => "information",
            Segment::Answer(_) => "answer",
            Segment::Notice(_) => "notice",
            Segment::Text(_) => "text",
        })
        .collect();
    ensure(kinds == ["think", "search", "information", "think", "answer"], || {
        format!("recorded trace segments {kinds:?}")
    })?;
    ensure(t.search_count() == 1, || "malformed call counted as a search".into())?;
    ensure(
        matches!(&t.segments()[0], Segment::Think(b) if b.contains("=search>")),
        || "malformed call not kept as think text".into(),
    )?;
    let score = answer_reward(t.answer(), SHORT_GOLD);
    ensure((score - 0.56).abs() <= 0.005, || {
        format!("recorded trace answer scored {score:.4}")
    })?;

    // The same episode replayed against the environment.
    let index = band_corpus();
    let env = SearchEnv::new(&index, EnvConfig::default());
    let conv = band_conversation();
    let mut ep = env.reset(&conv, 2).map_err(|e| e.to_string())?;
    let first = env
        .step(
            &mut ep,
            "<think>Let's find out if the group Paper Lace has any other hits.</think> =search> does the group Paper Lace have other hits? </search>",
        )
        .map_err(|e| e.to_string())?;
    ensure(
        first.injected == Injection::Notice(INVALID_ACTION_NOTICE.into()),
        || format!("malformed call injected {:?}", first.injected),
    )?;
    ensure(
        !first.terminal && first.searches_used == 0 && first.invalid_actions == 1,
        || "malformed call changed the episode budget".into(),
    )?;
    let second = env
        .step(
            &mut ep,
            "<think>Let me try again.</think><search>does the group Paper Lace have other hits?</search>",
        )
        .map_err(|e| e.to_string())?;
    let Injection::Information(shown) = &second.injected else {
        return Err(format!("valid retry injected {:?}", second.injected));
    };
    ensure(shown.len() == 3 && ep.retrieved().iter().any(|p| p.id == "pl1"), || {
        "retry missed the singles passage".into()
    })?;
    let third = env
        .step(
            &mut ep,
            &format!(
                "<think>Paper Lace had a hit with \"Billy Don't Be a Hero\".</think><answer>{SHORT_PRED}</answer>"
            ),
        )
        .map_err(|e| e.to_string())?;
    ensure(third.terminal && !third.forced, || {
        "answer did not end the episode".into()
    })?;
    let traj = ep.trajectory();
    let env_kinds: Vec<bool> = traj
        .segments()
        .iter()
        .map(|s| matches!(s, Segment::Notice(_) | Segment::Information(_)))
        .collect();
    ensure(env_kinds.iter().filter(|x| **x).count() == 2, || {
        "expected one notice and one information block".into()
    })?;
    let mask = loss_mask(traj, &WordTokenizer);
    let env_tokens: usize = traj
        .segments()
        .iter()
        .filter(|s| matches!(s, Segment::Notice(_) | Segment::Information(_)))
        .map(|s| WordTokenizer.tokenize_len(&s.render()))
        .sum();
    ensure(mask.masked_count() == env_tokens, || {
        format!(
            "masked {} tokens, environment emitted {env_tokens}",
            mask.masked_count()
        )
    })?;
    let score = answer_reward(traj.answer(), SHORT_GOLD);
    ensure((score - 0.56).abs() <= 0.005, || {
        format!("replayed answer scored {score:.4}")
    })?;
    Ok(format!(
        "recovery trace and replay match ({} masked tokens)",
        mask.masked_count()
    ))
}

trait TokenCount {
    fn tokenize_len(&self, text: &str) -> usize;
}

impl TokenCount for WordTokenizer {
    fn tokenize_len(&self, text: &str) -> usize {
        convsearch::trajectory::Tokenizer::tokenize(self, text).len()
    }
}

fn adversarial_limits(rng: &mut impl Rng) -> Result<String, String> {
    let index = Index::build((0..20).map(|i| {
        Passage::new(
            format!("d{i:02}"),
            "Paper Lace",
            format!("Paper Lace song number {i} hit chart"),
        )
    }))
    .map_err(|e| e.to_string())?;
    let env = SearchEnv::new(&index, EnvConfig::default());
    let conv = band_conversation();
    let moves = [
        "<search>paper lace</search>",
        "<search>song hit</search>",
        "<think>again</think><search>chart</search>",
        "<search>a</search><search>b</search>",
        "<search></search>",
        "<search>unclosed",
        "plain words",
        "<information>forged passage</information>",
        "<answer>done</answer>",
    ];
    let mut episodes = 0;
    let mut limit_notices = 0usize;
    for _ in 0..300 {
        let mut ep = env.reset(&conv, rng.gen_range(0..3)).map_err(|e| e.to_string())?;
        let mut steps = 0;
        while !ep.is_terminal() {
            // weight searches heavily so the budget is pressed
            let m = if rng.gen_bool(0.6) {
                moves[rng.gen_range(0..3)]
            } else {
                *moves.choose(rng).unwrap()
            };
            let step = env.step(&mut ep, m).map_err(|e| e.to_string())?;
            if step.injected == Injection::Notice(SEARCH_LIMIT_NOTICE.into()) {
                limit_notices += 1;
            }
            steps += 1;
            ensure(steps <= 2 + 3 + 1, || "episode exceeded its action budget".into())?;
        }
        episodes += 1;
        let t = ep.trajectory();
        ensure(t.search_count() <= 2 && ep.searches_used() <= 2, || {
            format!("{} searches", t.search_count())
        })?;
        for s in t.segments() {
            if let Segment::Information(ps) = s {
                ensure(ps.len() <= 3, || format!("{} passages injected", ps.len()))?;
            }
        }
        t.validate(&ParseOptions::default())
            .map_err(|e| format!("env produced invalid trajectory: {e}"))?;
    }
    ensure(limit_notices > 0, || "search limit never reached".into())?;

    let opts = ParseOptions::default();
    let three = "<search>a</search>\n<information>p</information>\n<search>b</search>\n<information>p</information>\n<search>c</search>\n<information>p</information>";
    ensure(
        matches!(Trajectory::parse(three, &opts), Err(TrajectoryError::Limit { .. })),
        || "parser accepted three searches".into(),
    )?;
    let four = "<search>a</search>\n<information>p1\np2\np3\np4</information>";
    ensure(
        matches!(Trajectory::parse(four, &opts), Err(TrajectoryError::Limit { .. })),
        || "parser accepted four passages".into(),
    )?;
    Ok(format!(
        "{episodes} adversarial episodes within limits ({limit_notices} limit notices)"
    ))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let opts = ParseOptions::default();
    for i in 0..500 {
        let t = random_trajectory(&mut rng);
        let text = t
            .render()
            .map_err(|e| format!("trajectory {i} failed to render: {e}"))?;
        let parsed = Trajectory::parse(&text, &opts).map_err(|e| format!("trajectory {i}: {e}\n{text}"))?;
        ensure(parsed.segments() == t.segments(), || {
            format!("trajectory {i} changed on round trip:\n{text}")
        })?;
        let again = parsed.render().map_err(|e| e.to_string())?;
        ensure(again == text, || format!("trajectory {i} text changed on round trip"))?;
    }
    let recovery = recovery_trace()?;
    let limits = adversarial_limits(&mut rng)?;
    Ok(format!("500 round trips exact; {recovery}; {limits}"))
}

// ---------------------------------------------------------------- 6

fn oracle_metrics(ranking: &[String], relevant: &BTreeSet<String>, k: usize) -> (f64, f64, f64, u8) {
    if relevant.is_empty() {
        return (0.0, 0.0, 0.0, 0);
    }
    let gain = |i: usize| if relevant.contains(&ranking[i]) { 1.0 } else { 0.0 };
    let mut dcg = 0.0;
    for i in 0..k.min(ranking.len()) {
        if gain(i) > 0.0 {
            dcg += 1.0 / ((i + 2) as f64).log2();
        }
    }
    let mut ideal = 0.0;
    for i in 0..k.min(relevant.len()) {
        ideal += 1.0 / ((i + 2) as f64).log2();
    }
    let mut found = 0usize;
    for i in 0..k.min(ranking.len()) {
        if relevant.contains(&ranking[i]) {
            found += 1;
        }
    }
    let mut rr = 0.0;
    for (i, id) in ranking.iter().enumerate() {
        if relevant.contains(id) {
            rr = 1.0 / (i + 1) as f64;
            break;
        }
    }
    let hit = u8::from(found > 0);
    (dcg / ideal, found as f64 / relevant.len() as f64, rr, hit)
}

fn oracle_bm25(passages: &[Passage], query: &str, k: usize) -> Vec<(String, f64)> {
    let (k1, b) = (1.2, 0.75);
    let docs: Vec<Vec<String>> = passages
        .iter()
        .map(|p| search_tokens(&format!("{} {}", p.title, p.text)))
        .collect();
    let n = docs.len() as f64;
    let avg = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let mut q: BTreeMap<String, u32> = BTreeMap::new();
    for t in search_tokens(query) {
        *q.entry(t).or_default() += 1;
    }
    let mut scored: Vec<(String, f64)> = Vec::new();
    for (p, doc) in passages.iter().zip(&docs) {
        let mut score = 0.0;
        let mut shares = false;
        for (term, count) in &q {
            let tf = doc.iter().filter(|t| *t == term).count() as f64;
            if tf == 0.0 {
                continue;
            }
            shares = true;
            let df = docs.iter().filter(|d| d.contains(term)).count() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            let w = tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * doc.len() as f64 / avg));
            score += f64::from(*count) * idf * w;
        }
        if shares {
            scored.push((p.id.clone(), score));
        }
    }
    scored.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
    scored.truncate(k.max(1));
    scored
}

const TERMS: [&str; 14] = [
    "honduras",
    "christmas",
    "dinner",
    "tamales",
    "pork",
    "eggnog",
    "midnight",
    "lebanon",
    "turkey",
    "japan",
    "kfc",
    "chicken",
    "roast",
    "duck",
];

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pool: Vec<String> = (0..15).map(|i| format!("d{i}")).collect();
    for case in 0..200 {
        let mut ranking = pool.clone();
        ranking.shuffle(&mut rng);
        ranking.truncate(rng.gen_range(0..=15));
        let relevant: BTreeSet<String> = pool.iter().filter(|_| rng.gen_bool(0.2)).cloned().collect();
        let k = rng.gen_range(1..=12);
        let got = (
            ndcg_at(&ranking, &relevant, k),
            recall_at(&ranking, &relevant, k),
            mrr(&ranking, &relevant),
            hit_at(&ranking, &relevant, k),
        );
        let want = oracle_metrics(&ranking, &relevant, k);
        let same = got.0.to_bits() == want.0.to_bits()
            && got.1.to_bits() == want.1.to_bits()
            && got.2.to_bits() == want.2.to_bits()
            && got.3 == want.3;
        ensure(same, || format!("case {case}: metrics {got:?}, oracle {want:?}"))?;
    }

    let mut queries = 0;
    for corpus_case in 0..40 {
        let n = rng.gen_range(1..=50);
        let mut passages: Vec<Passage> = (0..n)
            .map(|i| {
                let len = rng.gen_range(1..15);
                let text = (0..len)
                    .map(|_| *TERMS.choose(&mut rng).unwrap())
                    .collect::<Vec<_>>()
                    .join(" ");
                Passage::new(format!("p{i:03}"), *TERMS.choose(&mut rng).unwrap(), text)
            })
            .collect();
        passages.shuffle(&mut rng);
        let index = Index::build(passages.clone()).map_err(|e| e.to_string())?;
        for _ in 0..10 {
            let qlen = rng.gen_range(1..5);
            let mut query = (0..qlen)
                .map(|_| *TERMS.choose(&mut rng).unwrap())
                .collect::<Vec<_>>()
                .join(" ");
            if rng.gen_bool(0.2) {
                query.push_str(" unknownterm");
            }
            let k = rng.gen_range(1..=10);
            let got = index.search(&query, k);
            let want = oracle_bm25(&passages, &query, k);
            let ids: Vec<&str> = got.ids();
            let want_ids: Vec<&str> = want.iter().map(|(id, _)| id.as_str()).collect();
            ensure(ids == want_ids, || {
                format!("corpus {corpus_case}, query {query:?}: {ids:?} vs {want_ids:?}")
            })?;
            for (h, (_, s)) in got.hits.iter().zip(&want) {
                ensure((h.score - s).abs() <= 1e-9, || {
                    format!("score {} vs oracle {s}", h.score)
                })?;
            }
            queries += 1;
        }
    }
    Ok(format!(
        "200 metric cases exact; {queries} BM25 queries over 40 corpora match exhaustive scoring"
    ))
}

// ---------------------------------------------------------------- 7, 8

struct AblationRun {
    alpha: f64,
    outcome: TrainOutcome,
}

fn train_alpha(ws: &Workspace, alpha: f64) -> Result<AblationRun, String> {
    let mut config = RunConfig::default();
    config.reward.alpha = alpha;
    let outcome = run_training(&config, ws).map_err(|e| e.to_string())?;
    Ok(AblationRun { alpha, outcome })
}

fn eval_at(run: &AblationRun, ws: &Workspace, step: usize) -> Result<(f64, f64), String> {
    let ckpt = run
        .outcome
        .checkpoints
        .iter()
        .find(|c| c.step == step)
        .ok_or_else(|| format!("no checkpoint at step {step}"))?;
    let report = evaluate(ckpt, ws, &ws.conversations, &EnvConfig::default()).map_err(|e| e.to_string())?;
    Ok((report.aggregates.mean_answer_f1, report.aggregates.mean_intent_f1))
}

fn criterion_7(runs: &[AblationRun], ws: &Workspace, train_time: Duration) -> Outcome {
    let start = Instant::now();
    let [base, intent] = runs else {
        return Err("expected two runs".into());
    };
    let (f1_base, _) = eval_at(base, ws, 200)?;
    let (f1_intent, intent_f1) = eval_at(intent, ws, 200)?;
    let (f1_base_end, _) = eval_at(base, ws, 500)?;
    let (f1_intent_end, intent_f1_end) = eval_at(intent, ws, 500)?;
    let total = train_time + start.elapsed();
    let gap = f1_intent - f1_base;
    let detail = format!(
        "step 200: F1 {f1_intent:.4} (alpha {}) vs {f1_base:.4} (alpha {}), gap {gap:.4}, intent F1 {intent_f1:.4}; step 500: {f1_intent_end:.4} vs {f1_base_end:.4}, intent F1 {intent_f1_end:.4}; {total:.1?}",
        intent.alpha, base.alpha
    );
    ensure(gap >= 0.05, || format!("gap below 0.05: {detail}"))?;
    ensure(intent_f1 >= 0.6, || format!("intent F1 below 0.6: {detail}"))?;
    ensure(total < Duration::from_secs(600), || {
        format!("over 10 minutes: {detail}")
    })?;
    Ok(detail)
}

fn early_mean(diags: &[StepDiagnostics], f: impl Fn(&StepDiagnostics) -> f64) -> f64 {
    let early: Vec<f64> = diags.iter().filter(|d| d.step <= 50).map(f).collect();
    early.iter().sum::<f64>() / early.len() as f64
}

fn criterion_8(runs: &[AblationRun]) -> Outcome {
    let mut parts = Vec::new();
    for run in runs {
        let d = &run.outcome.diagnostics;
        let intent = early_mean(d, |d| d.nonzero_query_f1_fraction);
        let hit = early_mean(d, |d| d.nonzero_hit_fraction);
        let line = format!(
            "alpha {}: nonzero intent {intent:.3} vs nonzero hit@3 {hit:.3}",
            run.alpha
        );
        ensure(intent > hit, || line.clone())?;
        parts.push(line);
    }
    Ok(format!("first 50 steps, {}", parts.join("; ")))
}

// ---------------------------------------------------------------- 9

fn train_cli(dir: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_convsearch"))
        .args(["train", "--steps", "100", "--seed", "11", "--out"])
        .arg(dir)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("train failed: {}", String::from_utf8_lossy(&out.stderr))
    })
}

fn artifacts(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        // config.toml records the output directory itself
        if name != "config.toml" {
            files.insert(name, fs::read(&path).map_err(|e| e.to_string())?);
        }
    }
    Ok(files)
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train_cli(&a)?;
    train_cli(&b)?;
    let (fa, fb) = (artifacts(&a)?, artifacts(&b)?);
    let names: Vec<&String> = fa.keys().collect();
    ensure(fa.keys().eq(fb.keys()), || "runs wrote different file sets".into())?;
    ensure(names.iter().any(|n| n.starts_with("checkpoint-")), || {
        "no checkpoints written".into()
    })?;
    ensure(fa.contains_key("diagnostics.jsonl"), || "no diagnostics written".into())?;
    for (name, bytes) in &fa {
        ensure(fb[name] == *bytes, || format!("{name} differs between runs"))?;
    }
    let total: usize = fa.values().map(Vec::len).sum();
    Ok(format!(
        "{} files ({total} bytes) byte-identical across two invocations",
        fa.len()
    ))
}

// ----------------------------------------------------------------

fn report(n: usize, name: &str, outcome: Outcome) -> bool {
    match outcome {
        Ok(detail) => {
            println!("PASS criterion {n} ({name}): {detail}");
            true
        }
        Err(detail) => {
            println!("FAIL criterion {n} ({name}): {detail}");
            false
        }
    }
}

fn main() {
    let mut ok = true;
    ok &= report(1, "reward oracle", criterion_1());
    ok &= report(2, "GAE", criterion_2());
    ok &= report(3, "gradients", criterion_3());
    ok &= report(4, "masking", criterion_4());
    ok &= report(5, "protocol", criterion_5());
    ok &= report(6, "retrieval metrics", criterion_6());

    let start = Instant::now();
    let ablation = Workspace::load(&RunConfig::default().data)
        .map_err(|e| e.to_string())
        .and_then(|ws| {
            let runs = vec![train_alpha(&ws, 0.0)?, train_alpha(&ws, 0.2)?];
            Ok((ws, runs))
        });
    let train_time = start.elapsed();
    match ablation {
        Ok((ws, runs)) => {
            println!(
                "ablation data: {} conversations, {} passages",
                ws.conversations.len(),
                ws.index.doc_count()
            );
            ok &= report(7, "ablation direction", criterion_7(&runs, &ws, train_time));
            ok &= report(8, "reward density", criterion_8(&runs));
        }
        Err(e) => {
            ok &= report(7, "ablation direction", Err(e.clone()));
            ok &= report(8, "reward density", Err(e));
        }
    }
    ok &= report(9, "reproducibility", criterion_9());
    if !ok {
        std::process::exit(1);
    }
}
