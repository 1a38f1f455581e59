//! SCAN-style command language and its reference interpreter.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{CondText, Example};
use crate::error::{Error, Result};
use crate::rng;

pub const PRIMITIVES: [&str; 4] = ["walk", "run", "jump", "look"];
pub const DIRECTIONS: [&str; 2] = ["left", "right"];
pub const MODIFIERS: [&str; 2] = ["opposite", "around"];
pub const COUNTERS: [&str; 2] = ["twice", "thrice"];
pub const CONJUNCTIONS: [&str; 2] = ["and", "after"];
pub const ACTIONS: [&str; 6] = ["i_walk", "i_run", "i_jump", "i_look", "i_turn_left", "i_turn_right"];
pub const INSTRUCTION: &str = "generate actions";
pub const MAX_ACTIONS: usize = 48;

fn action_of(prim: &str) -> &'static str {
    match prim {
        "walk" => "i_walk",
        "run" => "i_run",
        "jump" => "i_jump",
        _ => "i_look",
    }
}

fn turn_of(dir: &str) -> &'static str {
    if dir == "left" {
        "i_turn_left"
    } else {
        "i_turn_right"
    }
}

fn grammar_err(token: &str, detail: &str) -> Error {
    Error::Grammar {
        token: token.to_string(),
        detail: detail.to_string(),
    }
}

/// `prim [left|right | opposite d | around d] [twice|thrice]`
fn interpret_phrase(words: &[&str]) -> Result<Vec<&'static str>> {
    let Some((&prim, rest)) = words.split_first() else {
        return Err(grammar_err("<end>", "expected a primitive"));
    };
    if !PRIMITIVES.contains(&prim) {
        return Err(grammar_err(prim, "expected a primitive"));
    }
    let act = action_of(prim);
    let (unit, rest) = match rest {
        [m, d, tail @ ..] if MODIFIERS.contains(m) => {
            if !DIRECTIONS.contains(d) {
                return Err(grammar_err(d, "expected a direction after a modifier"));
            }
            let t = turn_of(d);
            let unit = if *m == "opposite" {
                vec![t, t, act]
            } else {
                [t, act].repeat(4)
            };
            (unit, tail)
        }
        [m] if MODIFIERS.contains(m) => return Err(grammar_err(m, "modifier without a direction")),
        [d, tail @ ..] if DIRECTIONS.contains(d) => (vec![turn_of(d), act], tail),
        _ => (vec![act], rest),
    };
    match rest {
        [] => Ok(unit),
        [c] if *c == "twice" => Ok(unit.repeat(2)),
        [c] if *c == "thrice" => Ok(unit.repeat(3)),
        [t, ..] => Err(grammar_err(t, "unexpected token")),
    }
}

/// Reference interpreter; doubles as the label oracle.
pub fn scan_interpret(command: &[&str]) -> Result<Vec<&'static str>> {
    let conj = command.iter().position(|w| CONJUNCTIONS.contains(w));
    match conj {
        None => interpret_phrase(command),
        Some(i) => {
            let (a, b) = (&command[..i], &command[i + 1..]);
            if let Some(j) = b.iter().find(|w| CONJUNCTIONS.contains(w)) {
                return Err(grammar_err(j, "at most one conjunction"));
            }
            let (x, y) = (interpret_phrase(a)?, interpret_phrase(b)?);
            Ok(if command[i] == "and" {
                [x, y].concat()
            } else {
                [y, x].concat()
            })
        }
    }
}

fn phrases() -> Vec<Vec<&'static str>> {
    let mut units = Vec::new();
    for p in PRIMITIVES {
        units.push(vec![p]);
        for d in DIRECTIONS {
            units.push(vec![p, d]);
        }
        for m in MODIFIERS {
            for d in DIRECTIONS {
                units.push(vec![p, m, d]);
            }
        }
    }
    let mut out = Vec::new();
    for u in units {
        out.push(u.clone());
        for c in COUNTERS {
            let mut w = u.clone();
            w.push(c);
            out.push(w);
        }
    }
    out
}

/// Every command of the language, in a fixed order.
pub fn all_commands() -> Vec<Vec<&'static str>> {
    let ph = phrases();
    let mut out = ph.clone();
    for c in CONJUNCTIONS {
        for a in &ph {
            for b in &ph {
                out.push([a.as_slice(), &[c], b.as_slice()].concat());
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitKind {
    /// The primitive appears in training only in isolation.
    AddPrimitive {
        primitive: String,
    },
    /// Training outputs have at most `max_train_len` actions.
    Length {
        max_train_len: usize,
    },
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub kind: SplitKind,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    /// Drops commands longer than this many actions before splitting;
    /// zero keeps everything.
    pub max_actions: usize,
}

/// Conditions of a command: the instruction, then its conjunction and
/// its distinct directions when present.
pub fn scan_conditions(command: &[&str]) -> Vec<CondText> {
    let mut out = vec![CondText::instruction(INSTRUCTION)];
    if let Some(c) = command.iter().find(|w| CONJUNCTIONS.contains(w)) {
        out.push(CondText::metadata("conjunction", c));
    }
    let mut dirs: Vec<&str> = Vec::new();
    for w in command {
        if DIRECTIONS.contains(w) && !dirs.contains(w) {
            dirs.push(w);
        }
    }
    if !dirs.is_empty() {
        out.push(CondText::metadata("direction", &dirs.join(" ")));
    }
    out
}

fn example(task_id: &str, command: &[&str]) -> Result<Example> {
    Ok(Example {
        task_id: task_id.to_string(),
        src: command.iter().map(|s| s.to_string()).collect(),
        tgt: scan_interpret(command)?.iter().map(|s| s.to_string()).collect(),
        conditions: scan_conditions(command),
    })
}

fn take(pool: &mut Vec<Vec<&'static str>>, n: usize, what: &str) -> Result<Vec<Vec<&'static str>>> {
    if n > pool.len() {
        return Err(Error::Generation(format!(
            "asked for {n} {what} commands, only {} qualify",
            pool.len()
        )));
    }
    Ok(pool.drain(..n).collect())
}

/// Training share of the isolated primitive under `add_primitive`.
pub const ISOLATION_SHARE: f64 = 0.02;

/// Builds `(train, test)` honoring the split rule. Train and test never
/// share a command string; only the isolated primitive may repeat in train.
pub fn gen_scan_split(spec: &SplitSpec) -> Result<(Vec<Example>, Vec<Example>)> {
    let mut all = all_commands();
    all.shuffle(&mut rng::stream(spec.seed, &[0x5c]));
    if spec.max_actions > 0 {
        all.retain(|c| scan_interpret(c).map(|a| a.len() <= spec.max_actions).unwrap_or(false));
    }
    let task = "scan";
    let (train_cmds, test_cmds) = match &spec.kind {
        SplitKind::AddPrimitive { primitive } => {
            let Some(p) = PRIMITIVES.into_iter().find(|&x| x == primitive) else {
                return Err(Error::Config(format!("`{primitive}` is not a primitive")));
            };
            let repeats = ((spec.n_train as f64 * ISOLATION_SHARE).round() as usize).max(1);
            if repeats > spec.n_train {
                return Err(Error::Generation(
                    "training set too small to hold the isolated primitive".into(),
                ));
            }
            let (mut with, mut without): (Vec<_>, Vec<_>) = all.into_iter().partition(|c| c.contains(&p));
            with.retain(|c| c.len() > 1);
            let mut train = vec![vec![p]; repeats];
            train.extend(take(&mut without, spec.n_train - repeats, "training")?);
            (train, take(&mut with, spec.n_test, "test")?)
        }
        SplitKind::Length { max_train_len } => {
            let (mut short, mut long): (Vec<_>, Vec<_>) = all
                .into_iter()
                .partition(|c| scan_interpret(c).map(|a| a.len() <= *max_train_len).unwrap_or(false));
            (
                take(&mut short, spec.n_train, "training")?,
                take(&mut long, spec.n_test, "test")?,
            )
        }
        SplitKind::Random => {
            let train = take(&mut all, spec.n_train, "training")?;
            (train, take(&mut all, spec.n_test, "test")?)
        }
    };
    let train = train_cmds.iter().map(|c| example(task, c)).collect::<Result<_>>()?;
    let test = test_cmds.iter().map(|c| example(task, c)).collect::<Result<_>>()?;
    Ok((train, test))
}
