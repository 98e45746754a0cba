use std::fmt;

/// A failed command: a short class name plus a one-line message.
///
/// Printed to stderr as `error[<class>]: <message>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CliError {
    pub class: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(class: &'static str, message: impl Into<String>) -> Self {
        Self {
            class,
            message: message.into(),
        }
    }

    pub fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        Self::new("io", format!("{}: {err}", path.display()))
    }

    /// The single stderr line for this error.
    pub fn line(&self) -> String {
        let flat: Vec<&str> = self.message.split_whitespace().collect();
        format!("error[{}]: {}", self.class, flat.join(" "))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line())
    }
}

impl std::error::Error for CliError {}

impl From<graphprior::Error> for CliError {
    fn from(e: graphprior::Error) -> Self {
        Self::new(e.class(), e.to_string())
    }
}
