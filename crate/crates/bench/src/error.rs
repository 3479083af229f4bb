use std::fmt;

/// A problem with the configuration or command line rather than with a run.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// 1 when any cause in the chain is a configuration problem, 2 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let is_config = err.chain().any(|e| {
        e.is::<ConfigError>()
            || e.is::<toml::de::Error>()
            || matches!(
                e.downcast_ref::<faithcf::Error>(),
                Some(faithcf::Error::Config(_) | faithcf::Error::Unknown { .. })
            )
    });
    if is_config {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}
