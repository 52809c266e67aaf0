//! Execution backend, chosen by the `MCD_BACKEND` environment variable.
//!
//! `reference` (the default) runs everything on the calling thread in a
//! fixed order. `parallel` evaluates batches on the rayon pool; results are
//! identical because evaluation batches are independent, but training always
//! stays sequential.

use crate::error::{McdError, Result};

pub const BACKEND_ENV: &str = "MCD_BACKEND";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Backend {
    #[default]
    Reference,
    Parallel,
}

impl Backend {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "" | "reference" => Ok(Self::Reference),
            "parallel" => Ok(Self::Parallel),
            other => Err(McdError::Config(format!(
                "{BACKEND_ENV}={other:?}: expected \"reference\" or \"parallel\""
            ))),
        }
    }

    pub fn from_env() -> Result<Self> {
        match std::env::var(BACKEND_ENV) {
            Ok(v) => Self::parse(&v),
            Err(_) => Ok(Self::Reference),
        }
    }
}
