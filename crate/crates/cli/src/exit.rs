//! Maps failures to exit codes and a one-line JSON record on stderr.

use mtu_core::Error;
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Config,
    Data,
    Numeric,
}

impl Kind {
    pub fn code(self) -> i32 {
        match self {
            Kind::Config => 2,
            Kind::Data => 3,
            Kind::Numeric => 4,
        }
    }

    fn of_core(e: &Error) -> Self {
        match e {
            Error::Config(_) => Kind::Config,
            Error::NonFinite(_) | Error::Undefined(_) => Kind::Numeric,
            Error::Shape { .. }
            | Error::Data(_)
            | Error::Checkpoint(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Image(_) => Kind::Data,
        }
    }

    /// First classifiable cause in the chain; anything else is a data error.
    pub fn of(err: &anyhow::Error) -> Self {
        for cause in err.chain() {
            if let Some(e) = cause.downcast_ref::<Error>() {
                return Self::of_core(e);
            }
            if cause.downcast_ref::<std::io::Error>().is_some() {
                return Kind::Data;
            }
        }
        Kind::Data
    }
}

#[derive(Serialize)]
struct Report<'a> {
    kind: Kind,
    exit_code: i32,
    message: &'a str,
}

pub fn report(kind: Kind, message: &str) -> i32 {
    let line = serde_json::json!({ "error": Report { kind, exit_code: kind.code(), message } });
    eprintln!("{line}");
    kind.code()
}
