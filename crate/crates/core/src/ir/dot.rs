//! Graphviz output for IR functions.

use std::fmt::Write;

use super::Function;

pub fn function_dot(f: &Function) -> String {
    let pos: std::collections::HashMap<_, _> = f.layout.iter().enumerate().map(|(i, &b)| (b, i)).collect();
    let mut out = String::new();
    let _ = writeln!(out, "digraph \"{}\" {{", f.name);
    out.push_str("  node [shape=box];\n");
    for (i, &b) in f.layout.iter().enumerate() {
        let label = match f.blocks[b.idx()].addr {
            Some(a) => format!("b{i} {a:#x}"),
            None => format!("b{i}"),
        };
        let _ = writeln!(out, "  b{i} [label=\"{label}\"];");
    }
    for (i, &b) in f.layout.iter().enumerate() {
        for s in f.succs(b) {
            if let Some(j) = pos.get(&s) {
                let _ = writeln!(out, "  b{i} -> b{j};");
            }
        }
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{Cursor, Ty};

    #[test]
    fn diamond_has_four_nodes_and_edges() {
        let mut f = Function::new("d", &[Ty::I1], Ty::Void);
        let c = f.params[0];
        let [a, b, x, d] = [f.add_block(), f.add_block(), f.add_block(), f.add_block()];
        Cursor::new(&mut f, a).condbr(c, b, x);
        Cursor::new(&mut f, b).br(d);
        Cursor::new(&mut f, x).br(d);
        Cursor::new(&mut f, d).ret(None);
        let s = function_dot(&f);
        assert_eq!(s.matches("[label=").count(), 4);
        assert_eq!(s.matches(" -> ").count(), 4);
    }
}
