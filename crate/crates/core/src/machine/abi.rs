//! Calling conventions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Gpr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Abi {
    #[default]
    Win64,
    Sysv64,
}

impl Abi {
    /// Integer argument registers in order.
    pub fn arg_regs(self) -> &'static [Gpr] {
        match self {
            Abi::Win64 => &[Gpr::Rcx, Gpr::Rdx, Gpr::R8, Gpr::R9],
            Abi::Sysv64 => &[Gpr::Rdi, Gpr::Rsi, Gpr::Rdx, Gpr::Rcx, Gpr::R8, Gpr::R9],
        }
    }

    pub fn ret_reg(self) -> Gpr {
        Gpr::Rax
    }

    /// Bytes of caller-reserved home space above the return address.
    pub fn shadow_space(self) -> u64 {
        match self {
            Abi::Win64 => 32,
            Abi::Sysv64 => 0,
        }
    }

    /// Offset of the first stack argument from the return-address slot.
    pub fn stack_arg_offset(self) -> u64 {
        8 + self.shadow_space()
    }

    pub fn name(self) -> &'static str {
        match self {
            Abi::Win64 => "win64",
            Abi::Sysv64 => "sysv64",
        }
    }
}

impl fmt::Display for Abi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Abi {
    type Err = String;

    fn from_str(s: &str) -> Result<Abi, String> {
        match s {
            "win64" => Ok(Abi::Win64),
            "sysv64" => Ok(Abi::Sysv64),
            _ => Err(format!("unknown abi `{s}` (expected win64 or sysv64)")),
        }
    }
}
