//! Two-pass assembler for the textual toy ISA.
//!
//! ```text
//! .entry f            ; entry label
//! .base 0x1000        ; location counter for following instructions
//! .data 0x4000: 2a 00 ; little-endian bytes
//! f:
//!   mov rax, qword [rsp + rcx*8 - 16]
//!   ret
//! ```

use std::collections::BTreeMap;

use thiserror::Error;

use super::*;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AsmError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: duplicate label `{label}`")]
    DuplicateLabel { line: usize, label: String },
    #[error("line {line}: unresolved label `{label}`")]
    UnresolvedLabel { line: usize, label: String },
    #[error("data byte at {addr:#x} overlaps code")]
    DataCodeOverlap { addr: u64 },
    #[error("line {line}: address {addr:#x} already holds an instruction")]
    DuplicateAddress { line: usize, addr: u64 },
    #[error("program contains no instructions")]
    Empty,
}

fn perr(line: usize, msg: impl Into<String>) -> AsmError {
    AsmError::Parse { line, msg: msg.into() }
}

pub fn parse_int(s: &str) -> Option<i64> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(r) => (true, r.trim()),
        None => (false, s.strip_prefix('+').unwrap_or(s).trim()),
    };
    let mag = if let Some(h) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        u64::from_str_radix(&h.replace('_', ""), 16).ok()?
    } else {
        if body.is_empty() || !body.chars().all(|c| c.is_ascii_digit() || c == '_') {
            return None;
        }
        body.replace('_', "").parse::<u64>().ok()?
    };
    Some(if neg { (mag as i64).wrapping_neg() } else { mag as i64 })
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

struct PendingInstr {
    line: usize,
    address: u64,
    mnemonic: Mnemonic,
    operands: Vec<Operand>,
}

pub fn assemble(source: &str) -> Result<Program, AsmError> {
    let mut pc = DEFAULT_BASE;
    let mut labels: BTreeMap<String, u64> = BTreeMap::new();
    let mut pending: Vec<PendingInstr> = Vec::new();
    let mut data: BTreeMap<u64, u8> = BTreeMap::new();
    let mut entry: Option<(String, usize)> = None;
    let mut used_addrs: BTreeMap<u64, usize> = BTreeMap::new();

    for (idx, raw) in source.lines().enumerate() {
        let line = idx + 1;
        let text = raw.split(';').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        if let Some(rest) = text.strip_prefix(".entry") {
            let name = rest.trim();
            if !is_ident(name) {
                return Err(perr(line, "`.entry` expects a label"));
            }
            entry = Some((name.to_string(), line));
            continue;
        }
        if let Some(rest) = text.strip_prefix(".base") {
            let v = parse_int(rest).ok_or_else(|| perr(line, "`.base` expects an address"))?;
            let v = v as u64;
            if v % INSTR_STRIDE != 0 {
                return Err(perr(line, format!("base {v:#x} is not a multiple of 4")));
            }
            pc = v;
            continue;
        }
        if let Some(rest) = text.strip_prefix(".data") {
            let (addr_s, bytes_s) = rest
                .split_once(':')
                .ok_or_else(|| perr(line, "`.data` expects `<addr>: <bytes>`"))?;
            let addr = parse_int(addr_s).ok_or_else(|| perr(line, "bad `.data` address"))? as u64;
            for (i, tok) in bytes_s.split_whitespace().enumerate() {
                let b = u8::from_str_radix(tok, 16)
                    .map_err(|_| perr(line, format!("bad data byte `{tok}`")))?;
                data.insert(addr + i as u64, b);
            }
            continue;
        }
        if text.starts_with('.') {
            return Err(perr(line, format!("unknown directive `{text}`")));
        }
        let mut body = text;
        if let Some((head, tail)) = text.split_once(':') {
            let head = head.trim();
            if is_ident(head) && !head.contains(' ') {
                if labels.insert(head.to_string(), pc).is_some() {
                    return Err(AsmError::DuplicateLabel { line, label: head.to_string() });
                }
                body = tail.trim();
                if body.is_empty() {
                    continue;
                }
            }
        }
        let (mnemonic, operands) = parse_instruction(body, line)?;
        if used_addrs.insert(pc, line).is_some() {
            return Err(AsmError::DuplicateAddress { line, addr: pc });
        }
        pending.push(PendingInstr { line, address: pc, mnemonic, operands });
        pc += INSTR_STRIDE;
    }

    if pending.is_empty() {
        return Err(AsmError::Empty);
    }

    let mut instructions = BTreeMap::new();
    for p in pending {
        let mut label_targets = Vec::new();
        for op in &p.operands {
            if let Operand::Label(name) = op {
                let addr = *labels.get(name).ok_or_else(|| AsmError::UnresolvedLabel {
                    line: p.line,
                    label: name.clone(),
                })?;
                label_targets.push(addr);
            }
        }
        let mut instr = MachineInstruction {
            address: p.address,
            mnemonic: p.mnemonic,
            operands: p.operands,
            category: InstructionCategory::Normal,
            label_targets,
        };
        instr.category = categorize(&instr);
        instructions.insert(p.address, instr);
    }

    for &a in data.keys() {
        let slot = a - a % INSTR_STRIDE;
        if instructions.contains_key(&slot) {
            return Err(AsmError::DataCodeOverlap { addr: a });
        }
    }

    let entry = match entry {
        Some((name, line)) => *labels
            .get(&name)
            .ok_or(AsmError::UnresolvedLabel { line, label: name })?,
        None => *instructions.keys().next().expect("non-empty"),
    };
    Ok(Program { instructions, data, labels, entry })
}

/// Split on commas that are not inside brackets.
fn split_operands(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '[' => depth += 1,
            ']' => depth -= 1,
            ',' if depth == 0 => {
                out.push(s[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    let last = s[start..].trim();
    if !last.is_empty() || !out.is_empty() {
        out.push(last);
    }
    out
}

enum RawOperand {
    Reg(Reg),
    Imm(i64),
    Mem { size: Option<u8>, m: MemOperand },
    Label(String),
}

fn parse_mem(inner: &str, line: usize) -> Result<MemOperand, AsmError> {
    let mut base = None;
    let mut index = None;
    let mut scale = 1u8;
    let mut disp: i64 = 0;
    // Normalize "a - b" into "a + -b" before splitting terms.
    let norm = inner.replace('-', "+-");
    for term in norm.split('+') {
        let term = term.trim();
        if term.is_empty() {
            continue;
        }
        if let Some((r, s)) = term.split_once('*') {
            let reg = Reg::parse(r.trim())
                .filter(|r| r.width == RegWidth::Q)
                .ok_or_else(|| perr(line, format!("bad index register `{r}`")))?;
            let sc = parse_int(s).ok_or_else(|| perr(line, format!("bad scale `{s}`")))?;
            if ![1, 2, 4, 8].contains(&sc) {
                return Err(perr(line, format!("scale must be 1, 2, 4 or 8, got {sc}")));
            }
            if index.is_some() {
                return Err(perr(line, "memory operand has two index registers"));
            }
            index = Some(reg.gpr);
            scale = sc as u8;
        } else if let Some(reg) = Reg::parse(term) {
            if reg.width != RegWidth::Q {
                return Err(perr(line, "address registers must be 64-bit"));
            }
            if base.is_none() {
                base = Some(reg.gpr);
            } else if index.is_none() {
                index = Some(reg.gpr);
            } else {
                return Err(perr(line, "too many registers in memory operand"));
            }
        } else if let Some(v) = parse_int(term) {
            disp = disp.wrapping_add(v);
        } else {
            return Err(perr(line, format!("bad memory term `{term}`")));
        }
    }
    Ok(MemOperand { base, index, scale, disp, size: 8 })
}

fn parse_operand(s: &str, line: usize) -> Result<RawOperand, AsmError> {
    let s = s.trim();
    let mut size = None;
    let mut rest = s;
    for (kw, sz) in [("byte", 1u8), ("word", 2), ("dword", 4), ("qword", 8)] {
        if let Some(r) = s.strip_prefix(kw) {
            let r = r.trim_start();
            let r = r.strip_prefix("ptr").map(str::trim_start).unwrap_or(r);
            if r.starts_with('[') {
                size = Some(sz);
                rest = r;
                break;
            }
        }
    }
    if let Some(inner) = rest.strip_prefix('[') {
        let inner = inner
            .strip_suffix(']')
            .ok_or_else(|| perr(line, format!("unterminated memory operand `{s}`")))?;
        return Ok(RawOperand::Mem { size, m: parse_mem(inner, line)? });
    }
    if let Some(r) = Reg::parse(rest) {
        return Ok(RawOperand::Reg(r));
    }
    if let Some(v) = parse_int(rest) {
        return Ok(RawOperand::Imm(v));
    }
    if is_ident(rest) {
        return Ok(RawOperand::Label(rest.to_string()));
    }
    Err(perr(line, format!("bad operand `{s}`")))
}

fn parse_instruction(text: &str, line: usize) -> Result<(Mnemonic, Vec<Operand>), AsmError> {
    let (mn, ops) = match text.split_once(char::is_whitespace) {
        Some((m, o)) => (m, o.trim()),
        None => (text, ""),
    };
    let mnemonic = Mnemonic::parse(&mn.to_ascii_lowercase())
        .ok_or_else(|| perr(line, format!("unknown mnemonic `{mn}`")))?;
    let raw: Vec<RawOperand> = split_operands(ops)
        .into_iter()
        .map(|o| parse_operand(o, line))
        .collect::<Result<_, _>>()?;
    if raw.len() != mnemonic.arity() {
        return Err(perr(
            line,
            format!("`{}` takes {} operand(s), got {}", mnemonic.name(), mnemonic.arity(), raw.len()),
        ));
    }
    let operands = resolve_sizes(mnemonic, raw, line)?;
    validate(mnemonic, &operands, line)?;
    Ok((mnemonic, operands))
}

/// Fill in implicit memory access sizes from register operands.
fn resolve_sizes(m: Mnemonic, raw: Vec<RawOperand>, line: usize) -> Result<Vec<Operand>, AsmError> {
    let reg_bytes = raw.iter().find_map(|o| match o {
        RawOperand::Reg(r) if r.width != RegWidth::B => Some((r.width.bits() / 8) as u8),
        _ => None,
    });
    let fixed_q = matches!(
        m,
        Mnemonic::Lea | Mnemonic::Push | Mnemonic::Pop | Mnemonic::Jmp | Mnemonic::Call
    );
    let shift = matches!(m, Mnemonic::Shl | Mnemonic::Shr | Mnemonic::Sar);
    raw.into_iter()
        .map(|o| {
            Ok(match o {
                RawOperand::Reg(r) => Operand::Reg(r),
                RawOperand::Imm(v) => Operand::Imm(v),
                RawOperand::Label(l) => Operand::Label(l),
                RawOperand::Mem { size, mut m } => {
                    m.size = if fixed_q {
                        8
                    } else {
                        match (size, reg_bytes) {
                            (Some(s), Some(r)) if s != r && !shift => {
                                return Err(perr(line, "memory size disagrees with register width"))
                            }
                            (Some(s), _) => s,
                            (None, Some(r)) if !shift => r,
                            _ => 8,
                        }
                    };
                    Operand::Mem(m)
                }
            })
        })
        .collect()
}

fn validate(m: Mnemonic, ops: &[Operand], line: usize) -> Result<(), AsmError> {
    use Mnemonic::*;
    let is_reg = |o: &Operand| matches!(o, Operand::Reg(r) if r.width != RegWidth::B);
    let is_reg64 = |o: &Operand| matches!(o, Operand::Reg(r) if r.width == RegWidth::Q);
    let is_mem = |o: &Operand| matches!(o, Operand::Mem(_));
    let is_imm = |o: &Operand| matches!(o, Operand::Imm(_));
    let is_label = |o: &Operand| matches!(o, Operand::Label(_));
    let rm = |o: &Operand| is_reg(o) || is_mem(o);
    let bad = |why: &str| Err(perr(line, format!("invalid operands for `{}`: {why}", m.name())));
    match m {
        Mov => {
            if !rm(&ops[0]) {
                return bad("destination must be a register or memory");
            }
            if is_mem(&ops[0]) && is_mem(&ops[1]) {
                return bad("memory to memory");
            }
            if !(rm(&ops[1]) || is_imm(&ops[1]) || is_label(&ops[1])) {
                return bad("bad source");
            }
            if let (Operand::Reg(a), Operand::Reg(b)) = (&ops[0], &ops[1]) {
                if a.width != b.width {
                    return bad("register widths differ");
                }
            }
            if is_label(&ops[1]) && !is_reg64(&ops[0]) {
                return bad("label addresses load into 64-bit registers only");
            }
        }
        Lea => {
            if !is_reg(&ops[0]) || !is_mem(&ops[1]) {
                return bad("expects `lea reg, [mem]`");
            }
        }
        Add | Sub | And | Or | Xor | Cmp | Test => {
            if !rm(&ops[0]) {
                return bad("destination must be a register or memory");
            }
            if !(rm(&ops[1]) || is_imm(&ops[1])) || (is_mem(&ops[0]) && is_mem(&ops[1])) {
                return bad("bad source");
            }
            if let (Operand::Reg(a), Operand::Reg(b)) = (&ops[0], &ops[1]) {
                if a.width != b.width {
                    return bad("register widths differ");
                }
            }
        }
        Imul => {
            if !is_reg(&ops[0]) || !(rm(&ops[1]) || is_imm(&ops[1])) {
                return bad("expects `imul reg, reg/mem/imm`");
            }
            if let (Operand::Reg(a), Operand::Reg(b)) = (&ops[0], &ops[1]) {
                if a.width != b.width {
                    return bad("register widths differ");
                }
            }
        }
        Shl | Shr | Sar => {
            if !rm(&ops[0]) {
                return bad("destination must be a register or memory");
            }
            let count_ok = is_imm(&ops[1])
                || matches!(&ops[1], Operand::Reg(r) if r.width == RegWidth::B);
            if !count_ok {
                return bad("count must be an immediate or `cl`");
            }
        }
        Cmov(_) => {
            if !is_reg(&ops[0]) || !rm(&ops[1]) {
                return bad("expects `cmovcc reg, reg/mem`");
            }
            if let (Operand::Reg(a), Operand::Reg(b)) = (&ops[0], &ops[1]) {
                if a.width != b.width {
                    return bad("register widths differ");
                }
            }
        }
        Not | Neg | Inc | Dec => {
            if !rm(&ops[0]) {
                return bad("operand must be a register or memory");
            }
        }
        Push => {
            if !(is_reg64(&ops[0]) || is_imm(&ops[0]) || is_mem(&ops[0]) || is_label(&ops[0])) {
                return bad("push takes a 64-bit register, immediate, memory or label");
            }
        }
        Pop => {
            if !is_reg64(&ops[0]) {
                return bad("pop takes a 64-bit register");
            }
        }
        Jmp | Call => {
            if !(is_label(&ops[0]) || is_reg64(&ops[0]) || is_mem(&ops[0])) {
                return bad("target must be a label, 64-bit register or memory");
            }
        }
        Jcc(_) => {
            if !is_label(&ops[0]) {
                return bad("conditional branches take a label");
            }
        }
        Ret | Nop => {}
    }
    for o in ops {
        if let Operand::Mem(mo) = o {
            if mo.index.is_none() && mo.scale != 1 {
                return bad("scale without index");
            }
        }
        if let Operand::Reg(r) = o {
            if r.width == RegWidth::B && !matches!(m, Shl | Shr | Sar) {
                return bad("`cl` is only valid as a shift count");
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_addresses_from_base() {
        let p = assemble(".entry f\nf:\n  mov rax, 5\n  ret").unwrap();
        assert_eq!(p.entry, 0x1000);
        assert_eq!(p.instructions[&0x1000].mnemonic, Mnemonic::Mov);
        assert_eq!(p.instructions[&0x1004].mnemonic, Mnemonic::Ret);
        assert_eq!(p.instructions.len(), 2);
    }

    #[test]
    fn label_binds_to_following_instruction() {
        let p = assemble("nop\nnop\nL:\n  ret").unwrap();
        assert_eq!(p.labels["L"], 0x1008);
    }

    #[test]
    fn data_is_placed_literally() {
        let p = assemble(".data 0x4000: 2a 00 00 00 00 00 00 00\nret").unwrap();
        assert_eq!(p.data[&0x4000], 0x2a);
        assert_eq!(p.read_data(0x4000, 8), Some(42));
        assert_eq!(p.data_ranges(), vec![(0x4000, 0x4008)]);
    }

    #[test]
    fn decode_errors() {
        let p = assemble(".entry f\n.data 0x4000: 01\nf:\n  mov rax, 5\n  ret").unwrap();
        assert_eq!(p.decode_at(0x1004).unwrap().mnemonic, Mnemonic::Ret);
        assert_eq!(p.decode_at(0x1002), Err(DecodeError::Unmapped(0x1002)));
        assert_eq!(p.decode_at(0x4000), Err(DecodeError::NotCode(0x4000)));
    }

    #[test]
    fn error_paths() {
        assert!(matches!(assemble("nop\n bogus rax"), Err(AsmError::Parse { line: 2, .. })));
        assert!(matches!(
            assemble("L:\nnop\nL:\nret"),
            Err(AsmError::DuplicateLabel { line: 3, .. })
        ));
        assert!(matches!(assemble("jmp nowhere"), Err(AsmError::UnresolvedLabel { .. })));
        assert!(matches!(
            assemble(".data 0x1000: 00\nret"),
            Err(AsmError::DataCodeOverlap { addr: 0x1000 })
        ));
        assert!(matches!(assemble("mov rax"), Err(AsmError::Parse { .. })));
        assert!(matches!(assemble("mov rax, ecx"), Err(AsmError::Parse { .. })));
        assert!(matches!(assemble("mov [rax], [rbx]"), Err(AsmError::Parse { .. })));
        assert!(matches!(assemble(".base 0x1002\nret"), Err(AsmError::Parse { .. })));
        assert!(matches!(assemble("; nothing"), Err(AsmError::Empty)));
    }

    #[test]
    fn memory_operands() {
        let p = assemble("mov eax, [rsp + rcx*4 - 0x10]\nmov byte [rbp-1], 7\nlea rax, [rip_free + 8]");
        assert!(p.is_err());
        let p = assemble("mov eax, [rsp + rcx*4 - 0x10]\nmov byte [rbp-1], 7\nlea rax, [rbx + 8]")
            .unwrap();
        let Operand::Mem(m) = &p.instructions[&0x1000].operands[1] else { panic!() };
        assert_eq!((m.base, m.index, m.scale, m.disp, m.size), (Some(Gpr::Rsp), Some(Gpr::Rcx), 4, -16, 4));
        let Operand::Mem(m) = &p.instructions[&0x1004].operands[0] else { panic!() };
        assert_eq!((m.base, m.disp, m.size), (Some(Gpr::Rbp), -1, 1));
    }

    #[test]
    fn jcc_aliases_and_label_operands() {
        let p = assemble("f:\n jz f\n push f\n mov rax, f\n shl rax, cl\n ret").unwrap();
        let i = &p.instructions[&0x1000];
        assert_eq!(i.mnemonic, Mnemonic::Jcc(Cond::E));
        assert_eq!(i.direct_target(), Some(0x1000));
        assert_eq!(p.instructions[&0x1004].label_targets, vec![0x1000]);
    }
}
