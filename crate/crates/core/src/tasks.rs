//! Modular-arithmetic prompts with an exact rule-based verifier.
//!
//! A prompt is a chain such as `3 + 5 * 2`, evaluated strictly left to right
//! modulo `modulus`. A response earns +1 iff the tokens between its first
//! answer marker and the following end-of-sequence spell the residue in
//! decimal.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{self, DomainError, Prompt, SpecialTokens, TokenId, Vocabulary};

pub const DEFAULT_MAX_RESPONSE_LEN: usize = 32;

const ANSWER_MARKER: &str = "=";
const END_OF_SEQUENCE: &str = "<eos>";

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("modulus {0} outside [5, 97]")]
    Modulus(u32),
    #[error("chain length {0} outside [2, 6]")]
    ChainLength(usize),
    #[error("at least one operator is required")]
    NoOperators,
    #[error("invalid task spec {0:?}: {1}")]
    Spec(String, String),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Debug, Error)]
pub enum PromptFileError {
    #[error("{path}: line {line}: parse error: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{path}: line {line}: invalid prompt {id:?}: {reason}")]
    Invalid { path: String, line: usize, id: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    Add,
    Sub,
    Mul,
}

impl Operator {
    pub const ALL: [Operator; 3] = [Operator::Add, Operator::Sub, Operator::Mul];

    pub fn symbol(self) -> &'static str {
        match self {
            Operator::Add => "+",
            Operator::Sub => "-",
            Operator::Mul => "*",
        }
    }

    pub fn apply(self, a: u32, b: u32, modulus: u32) -> u32 {
        let (a, b, m) = (a as u64, b as u64, modulus as u64);
        let r = match self {
            Operator::Add => (a + b) % m,
            Operator::Sub => (a + m - b % m) % m,
            Operator::Mul => (a * b) % m,
        };
        r as u32
    }

    fn from_symbol(c: char) -> Option<Self> {
        match c {
            '+' => Some(Operator::Add),
            '-' => Some(Operator::Sub),
            '*' => Some(Operator::Mul),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArithmeticTask {
    modulus: u32,
    chain_length: usize,
    operators: Vec<Operator>,
}

impl ArithmeticTask {
    pub fn new(modulus: u32, chain_length: usize, operators: &[Operator]) -> Result<Self, TaskError> {
        if !(5..=97).contains(&modulus) {
            return Err(TaskError::Modulus(modulus));
        }
        if !(2..=6).contains(&chain_length) {
            return Err(TaskError::ChainLength(chain_length));
        }
        let mut ops = operators.to_vec();
        ops.sort();
        ops.dedup();
        if ops.is_empty() {
            return Err(TaskError::NoOperators);
        }
        Ok(Self { modulus, chain_length, operators: ops })
    }

    pub fn modulus(&self) -> u32 {
        self.modulus
    }

    pub fn chain_length(&self) -> usize {
        self.chain_length
    }

    pub fn operators(&self) -> &[Operator] {
        &self.operators
    }

    /// Number of distinct digit tokens; residues below 10 only need `0..modulus`.
    fn digit_count(&self) -> u32 {
        self.modulus.min(10)
    }

    /// Digits first (token id == digit), then operators, answer marker, eos.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut tokens: Vec<String> = (0..self.digit_count()).map(|d| d.to_string()).collect();
        tokens.extend(self.operators.iter().map(|op| op.symbol().to_string()));
        let answer_marker = tokens.len() as TokenId;
        tokens.push(ANSWER_MARKER.into());
        tokens.push(END_OF_SEQUENCE.into());
        let special = SpecialTokens { answer_marker, end_of_sequence: answer_marker + 1 };
        Vocabulary::new(tokens, special).expect("task vocabulary is well-formed")
    }

    fn operator_token(&self, op: Operator) -> TokenId {
        let pos = self.operators.iter().position(|&o| o == op).expect("operator in task");
        self.digit_count() + pos as TokenId
    }

    pub fn render_number(&self, n: u32) -> Vec<TokenId> {
        n.to_string().bytes().map(|b| (b - b'0') as TokenId).collect()
    }

    /// Left-to-right evaluation modulo `modulus`.
    pub fn evaluate(&self, operands: &[u32], ops: &[Operator]) -> u32 {
        let mut acc = operands[0] % self.modulus;
        for (op, &x) in ops.iter().zip(&operands[1..]) {
            acc = op.apply(acc, x, self.modulus);
        }
        acc
    }

    fn encode(&self, operands: &[u32], ops: &[Operator]) -> Vec<TokenId> {
        let mut tokens = self.render_number(operands[0]);
        for (op, &x) in ops.iter().zip(&operands[1..]) {
            tokens.push(self.operator_token(*op));
            tokens.extend(self.render_number(x));
        }
        tokens
    }

    /// Deterministic in `(self, n, seed)`.
    pub fn generate_prompts(&self, n: usize, seed: u64) -> Vec<Prompt> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let operands: Vec<u32> =
                    (0..self.chain_length).map(|_| rng.random_range(0..self.modulus)).collect();
                let ops: Vec<Operator> = (1..self.chain_length)
                    .map(|_| self.operators[rng.random_range(0..self.operators.len())])
                    .collect();
                let answer = self.evaluate(&operands, &ops);
                Prompt::new(
                    format!("m{}-s{seed}-{i}", self.modulus),
                    self.encode(&operands, &ops),
                    self.render_number(answer),
                )
                .expect("generated prompt is well-formed")
            })
            .collect()
    }

    /// The response the verifier accepts for `prompt`.
    pub fn reference_response(&self, prompt: &Prompt) -> Vec<TokenId> {
        let special = self.vocabulary().special();
        let mut y = vec![special.answer_marker];
        y.extend(&prompt.ground_truth);
        y.push(special.end_of_sequence);
        y
    }
}

/// `mod:M:L` or `mod:M:L:OPS` where OPS is a string over `+-*` (default `+`).
impl FromStr for ArithmeticTask {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |why: &str| TaskError::Spec(s.to_string(), why.to_string());
        let parts: Vec<&str> = s.split(':').collect();
        if !(3..=4).contains(&parts.len()) || parts[0] != "mod" {
            return Err(bad("expected mod:M:L[:OPS]"));
        }
        let modulus = parts[1].parse().map_err(|_| bad("modulus is not an integer"))?;
        let chain = parts[2].parse().map_err(|_| bad("chain length is not an integer"))?;
        let ops = match parts.get(3) {
            None => vec![Operator::Add],
            Some(sym) => sym
                .chars()
                .map(|c| Operator::from_symbol(c).ok_or_else(|| bad("operators must be from +-*")))
                .collect::<Result<Vec<_>, _>>()?,
        };
        ArithmeticTask::new(modulus, chain, &ops)
    }
}

impl fmt::Display for ArithmeticTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ops: String = self.operators.iter().map(|o| o.symbol()).collect();
        write!(f, "mod:{}:{}:{}", self.modulus, self.chain_length, ops)
    }
}

/// +1 iff the run between the first answer marker and the next
/// end-of-sequence equals the ground truth; -1 otherwise.
pub fn verify(prompt: &Prompt, response: &[TokenId], special: SpecialTokens) -> f64 {
    let Some(start) = response.iter().position(|&t| t == special.answer_marker) else {
        return -1.0;
    };
    let answer = &response[start + 1..];
    match answer.iter().position(|&t| t == special.end_of_sequence) {
        Some(end) if answer[..end] == prompt.ground_truth[..] => 1.0,
        _ => -1.0,
    }
}

pub fn load_prompts(path: &Path) -> Result<Vec<Prompt>, PromptFileError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| PromptFileError::Io { path: display.clone(), source })?;
    let prompts: Vec<Prompt> = domain::read_jsonl(BufReader::new(file)).map_err(|e| match e {
        DomainError::Json { line, source } => {
            PromptFileError::Parse { path: display.clone(), line, message: source.to_string() }
        }
        DomainError::Io(source) => PromptFileError::Io { path: display.clone(), source },
        other => PromptFileError::Parse { path: display.clone(), line: 0, message: other.to_string() },
    })?;
    for (idx, p) in prompts.iter().enumerate() {
        if let Err(e) = p.validate() {
            let reason = match e {
                DomainError::InvalidPrompt(_, reason) => reason,
                other => other.to_string(),
            };
            return Err(PromptFileError::Invalid { path: display, line: idx + 1, id: p.id.clone(), reason });
        }
    }
    Ok(prompts)
}

pub fn save_prompts(path: &Path, prompts: &[Prompt]) -> Result<(), PromptFileError> {
    let display = path.display().to_string();
    let io_err = |source| PromptFileError::Io { path: display.clone(), source };
    let file = File::create(path).map_err(io_err)?;
    let mut writer = BufWriter::new(file);
    domain::write_jsonl(&mut writer, prompts).map_err(|e| match e {
        DomainError::Io(source) => io_err(source),
        other => PromptFileError::Parse { path: display.clone(), line: 0, message: other.to_string() },
    })?;
    std::io::Write::flush(&mut writer).map_err(io_err)
}
