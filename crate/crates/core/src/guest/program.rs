//! Guest workload description and its text format.
//!
//! One op per line. A line may start with `label:`; `#` starts a comment.
//!
//! ```text
//! COMPUTE <n>                         retire n instructions (SI suffixes allowed)
//! COMPUTE_IF_BIT <param> <bit> <n_true> <n_false>
//! IO <queue> <read|write> <bytes> [tag]
//! HALT                                 wait for an interrupt
//! READ_TSC <reg>
//! JUMP <label>
//! JUMP_IF_ZERO <reg> <label>
//! DEC <reg>
//! SET <reg> <value>
//! ```
//!
//! Registers are `r0`..`r7`. `<bit>` is a literal index or a register.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::units::{parse_scaled, SI_SUFFIXES};

pub const REGISTER_COUNT: usize = 8;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Register(u8);

impl Register {
    pub fn new(index: usize) -> Option<Self> {
        (index < REGISTER_COUNT).then_some(Register(index as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Register {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IoDir {
    Read,
    Write,
}

impl fmt::Display for IoDir {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IoDir::Read => "read",
            IoDir::Write => "write",
        })
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum BitIndex {
    Literal(u64),
    Reg(Register),
}

/// A guest operation. Jump targets and queue/param references are already
/// resolved to indices into the program's tables.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GuestOp {
    Compute(u64),
    ComputeIfBit {
        param: usize,
        bit: BitIndex,
        n_true: u64,
        n_false: u64,
    },
    Io {
        queue: usize,
        dir: IoDir,
        size: u64,
        tag: u32,
    },
    Halt,
    ReadTsc(Register),
    Jump(usize),
    JumpIfZero(Register, usize),
    Dec(Register),
    Set(Register, u64),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GuestProgram {
    ops: Vec<GuestOp>,
    labels: BTreeMap<String, usize>,
    queue_names: Vec<String>,
    param_names: Vec<String>,
    params: BTreeMap<String, Arc<[u8]>>,
    /// Source line of each op, for diagnostics.
    lines: Vec<usize>,
    origin: String,
}

impl GuestProgram {
    pub fn parse(source: &str) -> Result<Self> {
        Self::parse_named(source, "<program>")
    }

    /// Parses `source`; `origin` (usually a file path) prefixes error messages.
    pub fn parse_named(source: &str, origin: &str) -> Result<Self> {
        Parser::new(origin).parse(source)
    }

    pub fn ops(&self) -> &[GuestOp] {
        &self.ops
    }

    pub fn labels(&self) -> &BTreeMap<String, usize> {
        &self.labels
    }

    /// Queue names referenced by `IO` ops, indexed by `GuestOp::Io::queue`.
    pub fn queue_names(&self) -> &[String] {
        &self.queue_names
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn origin(&self) -> &str {
        &self.origin
    }

    pub fn source_line(&self, pc: usize) -> Option<usize> {
        self.lines.get(pc).copied()
    }

    pub fn set_param(&mut self, name: impl Into<String>, value: impl Into<Arc<[u8]>>) {
        self.params.insert(name.into(), value.into());
    }

    pub fn params(&self) -> &BTreeMap<String, Arc<[u8]>> {
        &self.params
    }

    /// Value of the param referenced by an op's param index.
    pub fn param_by_index(&self, index: usize) -> Option<&[u8]> {
        let name = self.param_names.get(index)?;
        self.params.get(name).map(|v| &v[..])
    }

    /// Checks that every referenced param has a value.
    pub fn check_params(&self) -> Result<()> {
        for (i, name) in self.param_names.iter().enumerate() {
            if !self.params.contains_key(name) {
                let line = self
                    .ops
                    .iter()
                    .position(|op| matches!(op, GuestOp::ComputeIfBit { param, .. } if *param == i))
                    .and_then(|pc| self.source_line(pc))
                    .unwrap_or(0);
                return Err(Error::Program {
                    origin: self.origin.clone(),
                    line,
                    msg: format!("param {name:?} is referenced but not provided"),
                });
            }
        }
        Ok(())
    }
}

/// Reads bit `index` of `bytes`, most significant bit of each byte first.
pub fn bit_of(bytes: &[u8], index: u64) -> Option<bool> {
    let byte = bytes.get(usize::try_from(index / 8).ok()?)?;
    Some(byte >> (7 - (index % 8)) & 1 == 1)
}

struct Parser<'a> {
    origin: &'a str,
    labels: BTreeMap<String, usize>,
    queue_names: Vec<String>,
    param_names: Vec<String>,
    pending_jumps: Vec<(usize, String, usize)>,
}

impl<'a> Parser<'a> {
    fn new(origin: &'a str) -> Self {
        Parser {
            origin,
            labels: BTreeMap::new(),
            queue_names: Vec::new(),
            param_names: Vec::new(),
            pending_jumps: Vec::new(),
        }
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::Program {
            origin: self.origin.to_string(),
            line,
            msg: msg.into(),
        }
    }

    fn parse(mut self, source: &str) -> Result<GuestProgram> {
        let mut ops = Vec::new();
        let mut lines = Vec::new();
        for (idx, raw) in source.lines().enumerate() {
            let line_no = idx + 1;
            let mut text = raw.split('#').next().unwrap_or("").trim();
            while let Some((label, rest)) = split_label(text) {
                if !is_ident(label) {
                    return Err(self.err(line_no, format!("invalid label {label:?}")));
                }
                if self.labels.insert(label.to_string(), ops.len()).is_some() {
                    return Err(self.err(line_no, format!("duplicate label {label:?}")));
                }
                text = rest.trim();
            }
            if text.is_empty() {
                continue;
            }
            let tokens: Vec<&str> = text.split_whitespace().collect();
            let op = self.parse_op(&tokens, line_no, ops.len())?;
            ops.push(op);
            lines.push(line_no);
        }

        for (pc, label, line) in std::mem::take(&mut self.pending_jumps) {
            let target = *self
                .labels
                .get(&label)
                .ok_or_else(|| self.err(line, format!("unresolved label {label:?}")))?;
            match &mut ops[pc] {
                GuestOp::Jump(t) | GuestOp::JumpIfZero(_, t) => *t = target,
                _ => unreachable!("only jumps are patched"),
            }
        }

        Ok(GuestProgram {
            ops,
            labels: self.labels,
            queue_names: self.queue_names,
            param_names: self.param_names,
            params: BTreeMap::new(),
            lines,
            origin: self.origin.to_string(),
        })
    }

    fn parse_op(&mut self, t: &[&str], line: usize, pc: usize) -> Result<GuestOp> {
        let mnemonic = t[0].to_ascii_uppercase();
        let arity = |n: std::ops::RangeInclusive<usize>| -> Result<()> {
            if n.contains(&(t.len() - 1)) {
                Ok(())
            } else {
                Err(self.err(line, format!("{mnemonic} takes {n:?} operands, got {}", t.len() - 1)))
            }
        };
        let op = match mnemonic.as_str() {
            "COMPUTE" => {
                arity(1..=1)?;
                GuestOp::Compute(self.count(t[1], line)?)
            }
            "COMPUTE_IF_BIT" => {
                arity(4..=4)?;
                let param = intern(&mut self.param_names, t[1]);
                let bit = match self.register(t[2], line) {
                    Ok(r) => BitIndex::Reg(r),
                    Err(_) => BitIndex::Literal(self.count(t[2], line)?),
                };
                GuestOp::ComputeIfBit {
                    param,
                    bit,
                    n_true: self.count(t[3], line)?,
                    n_false: self.count(t[4], line)?,
                }
            }
            "IO" => {
                arity(3..=4)?;
                if !is_ident(t[1]) {
                    return Err(self.err(line, format!("invalid queue name {:?}", t[1])));
                }
                let queue = intern(&mut self.queue_names, t[1]);
                let dir = match t[2].to_ascii_lowercase().as_str() {
                    "read" => IoDir::Read,
                    "write" => IoDir::Write,
                    other => return Err(self.err(line, format!("IO direction must be read or write, got {other:?}"))),
                };
                let size = self.count(t[3], line)?;
                let tag = match t.get(4) {
                    Some(s) => {
                        let v = self.count(s, line)?;
                        u32::try_from(v).map_err(|_| self.err(line, "tag does not fit in 32 bits"))?
                    }
                    None => 0,
                };
                GuestOp::Io { queue, dir, size, tag }
            }
            "HALT" => {
                arity(0..=0)?;
                GuestOp::Halt
            }
            "READ_TSC" => {
                arity(1..=1)?;
                GuestOp::ReadTsc(self.register(t[1], line)?)
            }
            "JUMP" => {
                arity(1..=1)?;
                self.pending_jumps.push((pc, t[1].to_string(), line));
                GuestOp::Jump(usize::MAX)
            }
            "JUMP_IF_ZERO" => {
                arity(2..=2)?;
                let r = self.register(t[1], line)?;
                self.pending_jumps.push((pc, t[2].to_string(), line));
                GuestOp::JumpIfZero(r, usize::MAX)
            }
            "DEC" => {
                arity(1..=1)?;
                GuestOp::Dec(self.register(t[1], line)?)
            }
            "SET" => {
                arity(2..=2)?;
                GuestOp::Set(self.register(t[1], line)?, self.count(t[2], line)?)
            }
            other => return Err(self.err(line, format!("unknown op {other:?}"))),
        };
        Ok(op)
    }

    fn count(&self, s: &str, line: usize) -> Result<u64> {
        parse_scaled(s, SI_SUFFIXES, 1).map_err(|e| self.err(line, e))
    }

    fn register(&self, s: &str, line: usize) -> Result<Register> {
        s.strip_prefix(['r', 'R'])
            .and_then(|n| n.parse::<usize>().ok())
            .and_then(Register::new)
            .ok_or_else(|| self.err(line, format!("expected a register r0..r{}, got {s:?}", REGISTER_COUNT - 1)))
    }
}

fn split_label(text: &str) -> Option<(&str, &str)> {
    let (head, rest) = text.split_once(':')?;
    let head = head.trim();
    (!head.contains(char::is_whitespace)).then_some((head, rest))
}

fn is_ident(s: &str) -> bool {
    !s.is_empty()
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
        && !s.starts_with(|c: char| c.is_ascii_digit())
}

fn intern(table: &mut Vec<String>, name: &str) -> usize {
    match table.iter().position(|n| n == name) {
        Some(i) => i,
        None => {
            table.push(name.to_string());
            table.len() - 1
        }
    }
}
