use std::path::Path;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("solver error: {0}")]
    Solver(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("sampler error: {0}")]
    Sampler(String),

    #[error("load error: {0}")]
    Load(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("training diverged: {0}")]
    NonFinite(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.display().to_string(), source }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context { context: context.into(), source: Box::new(self) }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Solver(_) => "solver",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Sampler(_) => "sampler",
            Error::Load(_) => "load",
            Error::Format(_) => "format",
            Error::NonFinite(_) => "non_finite",
            Error::Context { source, .. } => source.kind(),
            Error::Io { .. } => "io",
        }
    }

    /// True for errors caused by bad input (configs, files, dataset/shape mismatches) rather
    /// than a failed computation.
    pub fn is_usage(&self) -> bool {
        matches!(self.kind(), "config" | "load" | "io" | "sampler")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_see_through_context() {
        let e = Error::Config("bad".into()).context("run.toml");
        assert_eq!(e.kind(), "config");
        assert!(e.is_usage());
        assert!(!Error::NonFinite("nan".into()).is_usage());
        assert_eq!(e.to_string(), "run.toml: config error: bad");
    }
}
