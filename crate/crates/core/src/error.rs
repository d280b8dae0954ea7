use std::fmt;

/// Every failure the runtime reports.
///
/// The `Display` form is `VARIANT` or `VARIANT: detail`. That string is what the
/// CLI prints on standard error and what served connections put in ERROR frames,
/// so [`UpmError::from_wire`] parses it back.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum UpmError {
    #[error("NOT_INSTALLED: {0}")]
    NotInstalled(String),
    #[error("ALREADY_INSTALLED: {0}")]
    AlreadyInstalled(String),
    #[error("DEVICE_CLOSED")]
    DeviceClosed,
    #[error("INCOMPATIBLE_MODEL: {0}")]
    IncompatibleModel(String),
    #[error("INFEASIBLE_JOB: {0}")]
    InfeasibleJob(String),
    #[error("TIMEOUT")]
    Timeout,
    #[error("PROTOCOL_ERROR: {0}")]
    Protocol(String),
    #[error("BACKEND_FAILURE: {0}")]
    Backend(String),
    #[error("INVALID_MANIFEST: {0}")]
    InvalidManifest(String),
    #[error("INVALID_SPEC: {0}")]
    InvalidSpec(String),
}

pub type Result<T, E = UpmError> = std::result::Result<T, E>;

impl UpmError {
    pub fn protocol(detail: impl fmt::Display) -> Self {
        UpmError::Protocol(detail.to_string())
    }

    pub fn backend(detail: impl fmt::Display) -> Self {
        UpmError::Backend(detail.to_string())
    }

    pub fn invalid_spec(detail: impl fmt::Display) -> Self {
        UpmError::InvalidSpec(detail.to_string())
    }

    /// The upper-case variant name, e.g. `"NOT_INSTALLED"`.
    pub fn variant_name(&self) -> &'static str {
        match self {
            UpmError::NotInstalled(_) => "NOT_INSTALLED",
            UpmError::AlreadyInstalled(_) => "ALREADY_INSTALLED",
            UpmError::DeviceClosed => "DEVICE_CLOSED",
            UpmError::IncompatibleModel(_) => "INCOMPATIBLE_MODEL",
            UpmError::InfeasibleJob(_) => "INFEASIBLE_JOB",
            UpmError::Timeout => "TIMEOUT",
            UpmError::Protocol(_) => "PROTOCOL_ERROR",
            UpmError::Backend(_) => "BACKEND_FAILURE",
            UpmError::InvalidManifest(_) => "INVALID_MANIFEST",
            UpmError::InvalidSpec(_) => "INVALID_SPEC",
        }
    }

    pub fn detail(&self) -> Option<&str> {
        match self {
            UpmError::DeviceClosed | UpmError::Timeout => None,
            UpmError::NotInstalled(d)
            | UpmError::AlreadyInstalled(d)
            | UpmError::IncompatibleModel(d)
            | UpmError::InfeasibleJob(d)
            | UpmError::Protocol(d)
            | UpmError::Backend(d)
            | UpmError::InvalidManifest(d)
            | UpmError::InvalidSpec(d) => Some(d),
        }
    }

    /// Inverse of `Display`. Unknown variant names yield `None`.
    pub fn from_wire(text: &str) -> Option<Self> {
        let (name, detail) = match text.split_once(": ") {
            Some((name, detail)) => (name, detail.to_string()),
            None => (text, String::new()),
        };
        Some(match name {
            "NOT_INSTALLED" => UpmError::NotInstalled(detail),
            "ALREADY_INSTALLED" => UpmError::AlreadyInstalled(detail),
            "DEVICE_CLOSED" => UpmError::DeviceClosed,
            "INCOMPATIBLE_MODEL" => UpmError::IncompatibleModel(detail),
            "INFEASIBLE_JOB" => UpmError::InfeasibleJob(detail),
            "TIMEOUT" => UpmError::Timeout,
            "PROTOCOL_ERROR" => UpmError::Protocol(detail),
            "BACKEND_FAILURE" => UpmError::Backend(detail),
            "INVALID_MANIFEST" => UpmError::InvalidManifest(detail),
            "INVALID_SPEC" => UpmError::InvalidSpec(detail),
            _ => return None,
        })
    }
}
