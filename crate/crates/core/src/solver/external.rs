//! Backend that pipes SMT-LIB2 text to a solver process.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use super::smtlib::{emit_smtlib, parse_reply, var_symbol, Reply};
use super::{Query, SolverBackend, SolverResult, UnknownReason};

#[derive(Clone, Debug)]
pub struct ExternalBackend {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub default_timeout: Duration,
}

impl ExternalBackend {
    /// A z3 reading the query from stdin.
    pub fn z3(program: impl Into<PathBuf>) -> ExternalBackend {
        ExternalBackend { program: program.into(), args: vec!["-in".into()], default_timeout: Duration::from_secs(10) }
    }

    /// Look for `z3` on `PATH`.
    pub fn find_z3() -> Option<ExternalBackend> {
        let path = std::env::var_os("PATH")?;
        std::env::split_paths(&path)
            .map(|d| d.join("z3"))
            .find(|p| is_executable(p))
            .map(ExternalBackend::z3)
    }

    fn run(&self, text: &str, timeout: Duration) -> Result<String, UnknownReason> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| UnknownReason::Backend(format!("cannot start {}: {e}", self.program.display())))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let mut stdout = child.stdout.take().expect("piped stdout");
        let input = text.to_string();
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let _ = stdin.write_all(input.as_bytes());
            drop(stdin);
            let mut out = String::new();
            let r = stdout.read_to_string(&mut out).map(|_| out);
            let _ = tx.send(r);
        });
        match rx.recv_timeout(timeout) {
            Ok(r) => {
                let _ = child.wait();
                r.map_err(|e| UnknownReason::Backend(e.to_string()))
            }
            Err(_) => {
                let _ = child.kill();
                let _ = child.wait();
                Err(UnknownReason::Timeout)
            }
        }
    }
}

fn is_executable(p: &Path) -> bool {
    use std::os::unix::fs::PermissionsExt;
    p.metadata().map(|m| m.is_file() && m.permissions().mode() & 0o111 != 0).unwrap_or(false)
}

impl SolverBackend for ExternalBackend {
    fn name(&self) -> &str {
        "external"
    }

    fn solve(&self, q: &Query) -> SolverResult {
        let text = emit_smtlib(q.expr, q.exclude);
        let out = match self.run(&text, q.timeout.unwrap_or(self.default_timeout)) {
            Ok(o) => o,
            Err(r) => return SolverResult::Unknown(r),
        };
        match parse_reply(&out) {
            Reply::Unsat => SolverResult::Unsat,
            Reply::Unknown(s) => SolverResult::Unknown(UnknownReason::Backend(s)),
            Reply::Sat(pairs) => {
                let get = |sym: &str| pairs.iter().find(|(n, _)| n == sym).map(|p| p.1);
                let Some(value) = get("result") else {
                    return SolverResult::Unknown(UnknownReason::Backend("model lacks result".into()));
                };
                let mut model = Vec::new();
                for (name, _) in q.expr.vars() {
                    match get(&var_symbol(name)) {
                        Some(v) => model.push((name.clone(), v)),
                        None => return SolverResult::Unknown(UnknownReason::Backend(format!("model lacks {name}"))),
                    }
                }
                SolverResult::Sat { model, value }
            }
        }
    }
}
