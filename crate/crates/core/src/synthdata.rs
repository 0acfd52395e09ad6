//! Deterministic multi-skill, multi-alphabet corpora.
//!
//! Every example's prompt is a random string over one of two disjoint 16-token
//! alphabets and its completion is a fixed rule applied to the prompt. The
//! alphabet is a surface cue a lexical scorer can latch onto; the rule is the
//! skill.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::math;
use crate::model::Example;
use crate::{Error, Result};

pub const ALPHABET_SIZE: u32 = 16;
/// Ids `0..32` are the two alphabets; these two follow them.
pub const BOS: u32 = 32;
pub const PAD: u32 = 33;
pub const VOCAB_SIZE: usize = 34;

/// Validation ids start here; the pool never reaches it.
pub const VAL_ID_BASE: u64 = 1 << 40;
/// Held-out evaluation ids start here.
pub const TEST_ID_BASE: u64 = 1 << 41;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Skill {
    Copy,
    Reverse,
    SortAsc,
    IncrementMod,
    /// Substitution through the fixed permutation `x -> (5x + 3) mod 16`.
    ConstMap,
}

impl Skill {
    pub const ALL: [Skill; 5] = [
        Skill::Copy,
        Skill::Reverse,
        Skill::SortAsc,
        Skill::IncrementMod,
        Skill::ConstMap,
    ];

    pub fn index(self) -> u32 {
        self as u32
    }

    pub fn name(self) -> &'static str {
        match self {
            Skill::Copy => "copy",
            Skill::Reverse => "reverse",
            Skill::SortAsc => "sort_asc",
            Skill::IncrementMod => "increment_mod",
            Skill::ConstMap => "const_map",
        }
    }

    pub fn parse(s: &str) -> Result<Skill> {
        Skill::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(alloc::format!("unknown skill {s}")))
    }

    /// Applies the rule to a prompt over `alphabet`.
    pub fn apply(self, alphabet: Alphabet, prompt: &[u32]) -> Vec<u32> {
        let base = alphabet.base();
        let local: Vec<u32> = prompt.iter().map(|&t| t - base).collect();
        let out: Vec<u32> = match self {
            Skill::Copy => local,
            Skill::Reverse => local.into_iter().rev().collect(),
            Skill::SortAsc => {
                let mut s = local;
                s.sort_unstable();
                s
            }
            Skill::IncrementMod => local.iter().map(|x| (x + 1) % ALPHABET_SIZE).collect(),
            Skill::ConstMap => local.iter().map(|x| (5 * x + 3) % ALPHABET_SIZE).collect(),
        };
        out.into_iter().map(|x| x + base).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Alphabet {
    A,
    B,
}

impl Alphabet {
    pub fn base(self) -> u32 {
        match self {
            Alphabet::A => 0,
            Alphabet::B => ALPHABET_SIZE,
        }
    }

    pub fn contains(self, token: u32) -> bool {
        (self.base()..self.base() + ALPHABET_SIZE).contains(&token)
    }
}

/// A (skill, alphabet) pair; its label is the subtask id used everywhere else.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Task {
    pub skill: Skill,
    pub alphabet: Alphabet,
}

impl Task {
    pub fn new(skill: Skill, alphabet: Alphabet) -> Self {
        Task { skill, alphabet }
    }

    pub fn label(self) -> u32 {
        self.skill.index() * 2 + matches!(self.alphabet, Alphabet::B) as u32
    }

    pub fn from_label(label: u32) -> Option<Task> {
        let skill = *Skill::ALL.get((label / 2) as usize)?;
        let alphabet = if label % 2 == 0 {
            Alphabet::A
        } else {
            Alphabet::B
        };
        Some(Task { skill, alphabet })
    }

    pub fn name(self) -> alloc::string::String {
        alloc::format!("{}_{:?}", self.skill.name(), self.alphabet)
    }

    pub fn all() -> impl Iterator<Item = Task> {
        Skill::ALL
            .into_iter()
            .flat_map(|s| [Task::new(s, Alphabet::A), Task::new(s, Alphabet::B)])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillSpec {
    pub task: Task,
    pub min_len: usize,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCount {
    pub task: Task,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub groups: Vec<GroupCount>,
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
}

impl PoolConfig {
    /// `per_task` examples for each of the ten (skill, alphabet) pairs.
    pub fn uniform(per_task: usize, seed: u64) -> Self {
        PoolConfig {
            groups: Task::all()
                .map(|task| GroupCount {
                    task,
                    count: per_task,
                })
                .collect(),
            seed,
            min_len: 2,
            max_len: 12,
        }
    }

    pub fn total(&self) -> usize {
        self.groups.iter().map(|g| g.count).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::Empty("pool config"));
        }
        check_lengths(self.min_len, self.max_len)
    }
}

fn check_lengths(min_len: usize, max_len: usize) -> Result<()> {
    if min_len == 0 || min_len > max_len {
        return Err(Error::InvalidConfig(alloc::format!(
            "length range [{min_len}, {max_len}] invalid"
        )));
    }
    Ok(())
}

fn make_example(rng: &mut impl Rng, id: u64, task: Task, len: usize) -> Example {
    let base = task.alphabet.base();
    let prompt: Vec<u32> = (0..len)
        .map(|_| base + rng.random_range(0..ALPHABET_SIZE))
        .collect();
    let completion = task.skill.apply(task.alphabet, &prompt);
    Example::new(id, Some(task.label()), prompt, completion)
}

/// Generates the candidate pool. Lengths cycle through the range within each
/// group (so every length appears once a group has at least that many
/// examples), the whole pool is shuffled, and ids are dense from 0.
pub fn generate_pool(config: &PoolConfig) -> Result<Vec<Example>> {
    config.validate()?;
    let mut rng = math::rng(math::sub_seed(config.seed, 1));
    let span = config.max_len - config.min_len + 1;
    let mut pool = Vec::with_capacity(config.total());
    for g in &config.groups {
        let mut lengths: Vec<usize> = (0..g.count).map(|i| config.min_len + i % span).collect();
        lengths.shuffle(&mut rng);
        for len in lengths {
            pool.push(make_example(&mut rng, 0, g.task, len));
        }
    }
    pool.shuffle(&mut rng);
    for (i, ex) in pool.iter_mut().enumerate() {
        ex.id = i as u64;
    }
    Ok(pool)
}

fn generate_split(
    tasks: &[Task],
    shots: usize,
    seed: u64,
    id_base: u64,
    min_len: usize,
    max_len: usize,
) -> Result<Vec<Vec<Example>>> {
    if shots == 0 {
        return Err(Error::Empty("shots"));
    }
    if tasks.is_empty() {
        return Err(Error::Empty("subtasks"));
    }
    check_lengths(min_len, max_len)?;
    let mut rng = math::rng(seed);
    let mut id = id_base;
    Ok(tasks
        .iter()
        .map(|&task| {
            (0..shots)
                .map(|_| {
                    let len = rng.random_range(min_len..=max_len);
                    id += 1;
                    make_example(&mut rng, id - 1, task, len)
                })
                .collect()
        })
        .collect())
}

/// `shots` fresh validation examples per subtask, grouped by subtask.
pub fn generate_val(
    tasks: &[Task],
    shots: usize,
    seed: u64,
    min_len: usize,
    max_len: usize,
) -> Result<Vec<Vec<Example>>> {
    generate_split(
        tasks,
        shots,
        math::sub_seed(seed, 2),
        VAL_ID_BASE,
        min_len,
        max_len,
    )
}

/// Held-out evaluation examples, disjoint from both pool and validation ids.
pub fn generate_test(
    tasks: &[Task],
    per_task: usize,
    seed: u64,
    min_len: usize,
    max_len: usize,
) -> Result<Vec<Vec<Example>>> {
    generate_split(
        tasks,
        per_task,
        math::sub_seed(seed, 3),
        TEST_ID_BASE,
        min_len,
        max_len,
    )
}

/// Recomputes the completion from the prompt and the example's label.
pub fn check_label(ex: &Example) -> bool {
    let Some(task) = ex.subtask.and_then(Task::from_label) else {
        return false;
    };
    ex.prompt.iter().all(|&t| task.alphabet.contains(t))
        && task.skill.apply(task.alphabet, &ex.prompt) == ex.completion
}
