//! Game of 24 as a stepwise environment: each `combine[a op b]` replaces two
//! numbers by their result, using exact rational arithmetic.

use num_rational::Ratio;
use num_traits::{CheckedAdd, CheckedDiv, CheckedMul, CheckedSub, Zero};
use serde::{Deserialize, Serialize};

use super::{EnvError, EnvObservation, EnvSnapshot, Environment};
use crate::policy::{ActionGrammar, ActionSample, TerminalRule};

pub type Num = Ratio<i64>;

pub const TARGET: i64 = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
}

impl Op {
    pub const ALL: [Op; 4] = [Op::Add, Op::Sub, Op::Mul, Op::Div];

    pub fn symbol(self) -> char {
        match self {
            Op::Add => '+',
            Op::Sub => '-',
            Op::Mul => '*',
            Op::Div => '/',
        }
    }

    fn parse(s: &str) -> Option<Op> {
        match s {
            "+" => Some(Op::Add),
            "-" | "−" => Some(Op::Sub),
            "*" | "×" | "x" => Some(Op::Mul),
            "/" | "÷" => Some(Op::Div),
            _ => None,
        }
    }

    pub fn apply(self, a: Num, b: Num) -> Option<Num> {
        match self {
            Op::Add => a.checked_add(&b),
            Op::Sub => a.checked_sub(&b),
            Op::Mul => a.checked_mul(&b),
            Op::Div if b.is_zero() => None,
            Op::Div => a.checked_div(&b),
        }
    }
}

pub fn format_num(n: &Num) -> String {
    if n.is_integer() {
        n.numer().to_string()
    } else {
        format!("{}/{}", n.numer(), n.denom())
    }
}

fn parse_num(s: &str) -> Option<Num> {
    let s = s.trim();
    match s.split_once('/') {
        Some((a, b)) => {
            let a: i64 = a.trim().parse().ok()?;
            let b: i64 = b.trim().parse().ok()?;
            (b != 0).then(|| Ratio::new(a, b))
        }
        None => s.parse::<i64>().ok().map(Ratio::from_integer),
    }
}

/// One combination `a op b = result`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Step {
    pub a: Num,
    pub op: Op,
    pub b: Num,
    pub result: Num,
}

impl Step {
    pub fn argument(&self) -> String {
        format!("{} {} {}", format_num(&self.a), self.op.symbol(), format_num(&self.b))
    }

    pub fn to_action(&self) -> ActionSample {
        ActionSample::command(crate::policy::ActionKind::EnvAction, "combine", self.argument())
    }
}

/// Parses `a op b`. Operands may be fractions written `p/q`; with fractions
/// the operator must be surrounded by spaces.
pub fn parse_combination(arg: &str) -> Option<(Num, Op, Num)> {
    let tokens: Vec<&str> = arg.split_whitespace().collect();
    if tokens.len() == 3 {
        return Some((parse_num(tokens[0])?, Op::parse(tokens[1])?, parse_num(tokens[2])?));
    }
    let compact: String = arg.split_whitespace().collect();
    // integers only: find the operator after the first digit run
    let start = usize::from(compact.starts_with('-'));
    let pos = compact[start..].find(|c: char| !c.is_ascii_digit())? + start;
    let op_char = compact[pos..].chars().next()?;
    let op = Op::parse(&op_char.to_string())?;
    let a: i64 = compact[..pos].parse().ok()?;
    let b: i64 = compact[pos + op_char.len_utf8()..].parse().ok()?;
    Some((Ratio::from_integer(a), op, Ratio::from_integer(b)))
}

fn remove_pair(nums: &[Num], a: &Num, b: &Num) -> Option<Vec<Num>> {
    let mut rest = nums.to_vec();
    let i = rest.iter().position(|x| x == a)?;
    rest.remove(i);
    let j = rest.iter().position(|x| x == b)?;
    rest.remove(j);
    Some(rest)
}

/// All distinct single combinations available from `nums`.
pub fn legal_steps(nums: &[Num]) -> Vec<Step> {
    let mut out: Vec<Step> = Vec::new();
    for i in 0..nums.len() {
        for j in 0..nums.len() {
            if i == j {
                continue;
            }
            let (a, b) = (nums[i], nums[j]);
            for op in Op::ALL {
                // commutative ops only once per unordered pair
                if matches!(op, Op::Add | Op::Mul) && i > j {
                    continue;
                }
                if let Some(result) = op.apply(a, b) {
                    let step = Step { a, op, b, result };
                    if !out.contains(&step) {
                        out.push(step);
                    }
                }
            }
        }
    }
    out
}

pub fn apply_step(nums: &[Num], step: &Step) -> Option<Vec<Num>> {
    let mut rest = remove_pair(nums, &step.a, &step.b)?;
    rest.push(step.result);
    Some(rest)
}

/// True when some sequence of combinations reduces `nums` to exactly 24.
pub fn is_solvable(nums: &[Num]) -> bool {
    if nums.len() == 1 {
        return nums[0] == Ratio::from_integer(TARGET);
    }
    legal_steps(nums)
        .iter()
        .any(|s| apply_step(nums, s).is_some_and(|rest| is_solvable(&rest)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleResult {
    pub solvable: bool,
    pub solutions: Vec<Vec<Step>>,
}

/// Exhaustive search over every order of combinations and operators.
pub fn game24_oracle(numbers: &[i64]) -> OracleResult {
    let nums: Vec<Num> = numbers.iter().map(|&n| Ratio::from_integer(n)).collect();
    let mut solutions = Vec::new();
    let mut line = Vec::new();
    collect_solutions(&nums, &mut line, &mut solutions);
    OracleResult {
        solvable: !solutions.is_empty(),
        solutions,
    }
}

fn collect_solutions(nums: &[Num], line: &mut Vec<Step>, out: &mut Vec<Vec<Step>>) {
    if nums.len() == 1 {
        if nums[0] == Ratio::from_integer(TARGET) {
            out.push(line.clone());
        }
        return;
    }
    for step in legal_steps(nums) {
        if let Some(rest) = apply_step(nums, &step) {
            line.push(step);
            collect_solutions(&rest, line, out);
            line.pop();
        }
    }
}

pub fn format_numbers(nums: &[Num]) -> String {
    nums.iter().map(format_num).collect::<Vec<_>>().join(" ")
}

/// Reads the live number state out of a prompt: the last `(left: ...)` after
/// the final `Input:` line, or that line's numbers when no step was taken.
pub fn numbers_from_prompt(prompt: &str) -> Option<Vec<Num>> {
    let start = prompt.rfind("Input:")?;
    let tail = &prompt[start..];
    if let Some(pos) = tail.rfind("(left:") {
        let rest = &tail[pos + "(left:".len()..];
        let end = rest.find(')')?;
        return rest[..end].split_whitespace().map(parse_num).collect();
    }
    let line = tail["Input:".len()..].lines().next()?;
    let nums: Option<Vec<Num>> = line.split_whitespace().map(parse_num).collect();
    nums.filter(|v| !v.is_empty())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct State {
    numbers: Vec<(i64, i64)>,
    done: bool,
}

pub struct Game24Env {
    task_id: String,
    start: Vec<Num>,
    numbers: Vec<Num>,
    done: bool,
    grammar: ActionGrammar,
}

impl Game24Env {
    pub fn new(task_id: &str, numbers: &[i64]) -> Self {
        let start: Vec<Num> = numbers.iter().map(|&n| Ratio::from_integer(n)).collect();
        Self {
            task_id: task_id.to_string(),
            numbers: start.clone(),
            start,
            done: false,
            grammar: grammar(),
        }
    }

    pub fn numbers(&self) -> &[Num] {
        &self.numbers
    }
}

pub fn grammar() -> ActionGrammar {
    ActionGrammar::new(vec![ActionGrammar::verb("combine", TerminalRule::Never)])
}

impl Environment for Game24Env {
    fn reset(&mut self) -> EnvObservation {
        self.numbers = self.start.clone();
        self.done = false;
        EnvObservation::ongoing(format!("(left: {})", format_numbers(&self.numbers)))
    }

    fn step(&mut self, action: &ActionSample) -> EnvObservation {
        if action.is_thought() {
            return EnvObservation::ok();
        }
        if self.done || action.verb.as_deref() != Some("combine") {
            return EnvObservation::invalid();
        }
        let Some((a, op, b)) = action.argument.as_deref().and_then(parse_combination) else {
            return EnvObservation::invalid();
        };
        let Some(result) = op.apply(a, b) else {
            return EnvObservation::invalid();
        };
        let Some(mut rest) = remove_pair(&self.numbers, &a, &b) else {
            return EnvObservation::invalid();
        };
        rest.push(result);
        self.numbers = rest;
        let text = format!(
            "{} {} {} = {} (left: {})",
            format_num(&a),
            op.symbol(),
            format_num(&b),
            format_num(&result),
            format_numbers(&self.numbers)
        );
        if self.numbers.len() == 1 {
            self.done = true;
            let hit = self.numbers[0] == Ratio::from_integer(TARGET);
            EnvObservation::terminal(text, if hit { 1.0 } else { 0.0 })
        } else {
            EnvObservation::ongoing(text)
        }
    }

    fn snapshot(&self) -> EnvSnapshot {
        let state = State {
            numbers: self.numbers.iter().map(|n| (*n.numer(), *n.denom())).collect(),
            done: self.done,
        };
        EnvSnapshot::encode(&self.task_id, &state)
    }

    fn restore(&mut self, snap: &EnvSnapshot) -> Result<(), EnvError> {
        let state: State = snap.decode(&self.task_id)?;
        self.numbers = state.numbers.into_iter().map(|(p, q)| Ratio::new(p, q)).collect();
        self.done = state.done;
        Ok(())
    }

    fn grammar(&self) -> &ActionGrammar {
        &self.grammar
    }
}
