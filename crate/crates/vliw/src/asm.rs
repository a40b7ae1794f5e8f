//! Line-oriented assembly format and its canonical printer.
//!
//! ```text
//! # comment
//! const 4096 4097 4097 4097 4097 4097 4097 4097 4097
//! bundle:
//!     valu.multiply_add 5000, 5000, 4096, 4104
//!     load.load_offset 5100, 5200, 3
//! bundle:
//! ```
//!
//! `const` lines come first and initialise scratch memory with one to `VLEN`
//! consecutive words. Each `bundle:` opens a new cycle; the instruction lines
//! that follow belong to it. An empty bundle is a stall cycle.

use std::fmt;

use thiserror::Error;

use crate::isa::{Addr, BinOp, Bundle, Engine, Instruction, Word, VLEN};
use crate::machine::{MachineState, MEM_WORDS, SCRATCH_BASE};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

fn err(line: usize, message: impl Into<String>) -> ParseError {
    ParseError {
        line,
        message: message.into(),
    }
}

/// Scratch initialiser: `values` are written starting at `addr`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstInit {
    pub addr: Addr,
    pub values: Vec<Word>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Program {
    pub consts: Vec<ConstInit>,
    pub bundles: Vec<Bundle>,
}

impl Program {
    /// Writes the constant section into `state`.
    pub fn materialize_consts(&self, state: &mut MachineState) {
        let mem = state.memory_mut();
        for c in &self.consts {
            let start = c.addr as usize;
            mem[start..start + c.values.len()].copy_from_slice(&c.values);
        }
    }

    pub fn instruction_count(&self) -> usize {
        self.bundles.iter().map(|b| b.instructions.len()).sum()
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.consts {
            write!(f, "const {}", c.addr)?;
            for v in &c.values {
                write!(f, " {v}")?;
            }
            writeln!(f)?;
        }
        for b in &self.bundles {
            writeln!(f, "bundle:")?;
            for ins in &b.instructions {
                writeln!(f, "    {ins}")?;
            }
        }
        Ok(())
    }
}

fn parse_u32(tok: &str, line: usize, what: &str) -> Result<u32, ParseError> {
    if tok.is_empty() || !tok.bytes().all(|b| b.is_ascii_digit()) {
        return Err(err(line, format!("malformed {what} `{tok}`")));
    }
    tok.parse::<u32>()
        .map_err(|_| err(line, format!("{what} `{tok}` out of range")))
}

fn parse_instruction(text: &str, line: usize) -> Result<Instruction, ParseError> {
    let (mnemonic, rest) = match text.split_once(char::is_whitespace) {
        Some((m, r)) => (m, r.trim()),
        None => (text, ""),
    };
    let (engine_name, opcode) = mnemonic
        .split_once('.')
        .ok_or_else(|| err(line, format!("expected <engine>.<opcode>, got `{mnemonic}`")))?;
    let engine = Engine::parse(engine_name)
        .ok_or_else(|| err(line, format!("unknown engine `{engine_name}`")))?;

    let operands: Vec<u32> = if rest.is_empty() {
        Vec::new()
    } else {
        rest.split(',')
            .map(|t| parse_u32(t.trim(), line, "address"))
            .collect::<Result<_, _>>()?
    };
    let arity = |n: usize| -> Result<(), ParseError> {
        if operands.len() == n {
            Ok(())
        } else {
            Err(err(
                line,
                format!(
                    "{mnemonic} takes {n} operands, got {}",
                    operands.len()
                ),
            ))
        }
    };
    let unknown = || err(line, format!("unknown opcode `{opcode}` for engine {engine}"));

    let ins = match engine {
        Engine::Alu | Engine::Valu => {
            if opcode == "multiply_add" && engine == Engine::Valu {
                arity(4)?;
                Instruction::MultiplyAdd {
                    dest: operands[0],
                    a: operands[1],
                    b: operands[2],
                    c: operands[3],
                }
            } else {
                let op = BinOp::from_symbol(opcode).ok_or_else(unknown)?;
                arity(3)?;
                let (dest, a, b) = (operands[0], operands[1], operands[2]);
                if engine == Engine::Alu {
                    Instruction::Alu { op, dest, a, b }
                } else {
                    Instruction::Valu { op, dest, a, b }
                }
            }
        }
        Engine::Load => match opcode {
            "load" => {
                arity(2)?;
                Instruction::Load {
                    dest: operands[0],
                    addr: operands[1],
                }
            }
            "load_offset" => {
                arity(3)?;
                let lane = operands[2];
                if lane as usize >= VLEN {
                    return Err(err(line, format!("lane {lane} out of range 0..{VLEN}")));
                }
                Instruction::LoadOffset {
                    dest: operands[0],
                    base: operands[1],
                    lane: lane as u8,
                }
            }
            _ => return Err(unknown()),
        },
        Engine::Store => match opcode {
            "store" => {
                arity(2)?;
                Instruction::Store {
                    addr: operands[0],
                    src: operands[1],
                }
            }
            _ => return Err(unknown()),
        },
        Engine::Flow => match opcode {
            "vselect" => {
                arity(4)?;
                Instruction::VSelect {
                    dest: operands[0],
                    cond: operands[1],
                    on_true: operands[2],
                    on_false: operands[3],
                }
            }
            "halt" => {
                arity(0)?;
                Instruction::Halt
            }
            _ => return Err(unknown()),
        },
    };
    Ok(ins)
}

/// Parses program text. Errors carry the 1-based source line.
pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    let mut program = Program::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let code = raw.split('#').next().unwrap_or("").trim();
        if code.is_empty() {
            continue;
        }
        if code == "bundle:" {
            program.bundles.push(Bundle::default());
        } else if let Some(rest) = code.strip_prefix("const").filter(|r| {
            r.starts_with(char::is_whitespace)
        }) {
            if !program.bundles.is_empty() {
                return Err(err(line, "const after the first bundle"));
            }
            let mut toks = rest.split_whitespace();
            let addr = parse_u32(toks.next().unwrap_or(""), line, "address")?;
            let values: Vec<Word> = toks
                .map(|t| parse_u32(t, line, "value"))
                .collect::<Result<_, _>>()?;
            if values.is_empty() || values.len() > VLEN {
                return Err(err(
                    line,
                    format!("const takes 1..={VLEN} values, got {}", values.len()),
                ));
            }
            if addr < SCRATCH_BASE || addr as u64 + values.len() as u64 > MEM_WORDS as u64 {
                return Err(err(
                    line,
                    format!("const address {addr} outside scratch memory"),
                ));
            }
            program.consts.push(ConstInit { addr, values });
        } else {
            let bundle = program
                .bundles
                .last_mut()
                .ok_or_else(|| err(line, "instruction before any `bundle:`"))?;
            bundle.instructions.push(parse_instruction(code, line)?);
        }
    }
    Ok(program)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_vector_xor() {
        let p = parse_program("bundle:\n    valu.^ 5000, 5000, 5008\n").unwrap();
        assert_eq!(
            p.bundles[0].instructions,
            vec![Instruction::Valu {
                op: BinOp::Xor,
                dest: 5000,
                a: 5000,
                b: 5008
            }]
        );
    }

    #[test]
    fn unknown_engine_reports_line() {
        let e = parse_program("bundle:\n  alu.+ 1, 2, 3\n  gpu.add 1, 2, 3\n").unwrap_err();
        assert_eq!(e.line, 3);
        assert!(e.message.contains("unknown engine"));
    }

    #[test]
    fn wrong_arity_and_bad_address() {
        assert_eq!(parse_program("bundle:\nalu.+ 1, 2\n").unwrap_err().line, 2);
        assert_eq!(parse_program("bundle:\nalu.+ 1, x, 2\n").unwrap_err().line, 2);
        assert_eq!(parse_program("bundle:\nalu.% 1, 2, 3\n").unwrap_err().line, 2);
        assert!(parse_program("bundle:\nload.load_offset 1, 2, 8\n").is_err());
        assert!(parse_program("alu.+ 1, 2, 3\n").is_err());
    }

    #[test]
    fn empty_body_is_zero_bundles() {
        let p = parse_program("# nothing here\n\n").unwrap();
        assert!(p.bundles.is_empty());
        let mut st = MachineState::new();
        assert_eq!(crate::machine::execute(&p.bundles, &mut st).unwrap(), 0);
    }

    #[test]
    fn consts_are_scratch_only() {
        assert!(parse_program("const 2310 5\n").is_err());
        assert!(parse_program("const 4096\n").is_err());
        assert!(parse_program("const 4096 1 2 3 4 5 6 7 8 9\n").is_err());
        let p = parse_program("const 4096 1 2 3\nbundle:\n").unwrap();
        let mut st = MachineState::new();
        p.materialize_consts(&mut st);
        assert_eq!(&st.memory()[4096..4099], &[1, 2, 3]);
        assert!(parse_program("bundle:\nconst 4096 1\n").is_err());
    }

    #[test]
    fn canonical_text_round_trips() {
        let text = "const 4096 1 2 3 4 5 6 7 8\nconst 4200 9\nbundle:\n    alu.<< 4300, 4096, 4200\n    valu.multiply_add 4400, 4096, 4096, 4096\n    load.load 4500, 4096\n    load.load_offset 4600, 4096, 7\n    store.store 4096, 4300\n    flow.vselect 4700, 4096, 4400, 4096\nbundle:\nbundle:\n    flow.halt\n";
        let p = parse_program(text).unwrap();
        assert_eq!(p.to_string(), text);
        assert_eq!(parse_program(&p.to_string()).unwrap(), p);
    }
}
