use std::fmt::Write;

use super::*;

fn size_kw(size: u8) -> &'static str {
    match size {
        1 => "byte",
        2 => "word",
        4 => "dword",
        _ => "qword",
    }
}

pub fn format_mem(m: &MemOperand) -> String {
    let mut s = String::from("[");
    let mut first = true;
    if let Some(b) = m.base {
        s.push_str(b.name64());
        first = false;
    }
    if let Some(i) = m.index {
        if !first {
            s.push_str(" + ");
        }
        let _ = write!(s, "{}*{}", i.name64(), m.scale);
        first = false;
    }
    if m.disp != 0 || first {
        if first {
            let _ = write!(s, "{:#x}", m.disp);
        } else if m.disp < 0 {
            let _ = write!(s, " - {:#x}", m.disp.unsigned_abs());
        } else {
            let _ = write!(s, " + {:#x}", m.disp);
        }
    }
    s.push(']');
    s
}

pub fn format_operand(op: &Operand, with_size: bool) -> String {
    match op {
        Operand::Reg(r) => r.to_string(),
        Operand::Imm(v) => {
            if *v < 0 {
                format!("-{:#x}", v.unsigned_abs())
            } else {
                format!("{v:#x}")
            }
        }
        Operand::Mem(m) if with_size => format!("{} {}", size_kw(m.size), format_mem(m)),
        Operand::Mem(m) => format_mem(m),
        Operand::Label(l) => l.clone(),
    }
}

pub fn format_instruction(i: &MachineInstruction) -> String {
    let sized = !matches!(
        i.mnemonic,
        Mnemonic::Lea | Mnemonic::Push | Mnemonic::Pop | Mnemonic::Jmp | Mnemonic::Call
    );
    let ops: Vec<String> = i.operands.iter().map(|o| format_operand(o, sized)).collect();
    if ops.is_empty() {
        i.mnemonic.name()
    } else {
        format!("{} {}", i.mnemonic.name(), ops.join(", "))
    }
}

/// Render a program in the assembler's grammar. Reassembling the output
/// yields an identical [`Program`].
pub fn print_program(p: &Program) -> String {
    let mut out = String::new();
    if let Some(name) = p.label_of(p.entry) {
        let _ = writeln!(out, ".entry {name}");
    }
    for (lo, hi) in p.data_ranges() {
        let mut a = lo;
        while a < hi {
            let end = (a + 16).min(hi);
            let bytes: Vec<String> = (a..end).map(|x| format!("{:02x}", p.data[&x])).collect();
            let _ = writeln!(out, ".data {a:#x}: {}", bytes.join(" "));
            a = end;
        }
    }
    let mut addrs: Vec<u64> = p.instructions.keys().copied().collect();
    addrs.extend(p.labels.values().copied());
    addrs.sort_unstable();
    addrs.dedup();
    let mut pc: Option<u64> = None;
    for a in addrs {
        if pc != Some(a) {
            let _ = writeln!(out, ".base {a:#x}");
        }
        for (name, _) in p.labels.iter().filter(|(_, &la)| la == a) {
            let _ = writeln!(out, "{name}:");
        }
        pc = Some(a);
        if let Some(i) = p.instructions.get(&a) {
            let _ = writeln!(out, "  {}", format_instruction(i));
            pc = Some(a + INSTR_STRIDE);
        }
    }
    out
}
