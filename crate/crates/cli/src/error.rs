use std::path::PathBuf;

/// Exit codes: 0 ok, 2 config, 3 io or malformed data, 4 numeric failure,
/// 5 format version mismatch.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(PathBuf, std::io::Error),
    Core(bevmotion::Error),
}

impl From<bevmotion::Error> for CliError {
    fn from(e: bevmotion::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        use bevmotion::Error as E;
        match self {
            CliError::Config(_) => "config",
            CliError::Io(..) => "io",
            CliError::Core(e) => match e {
                E::InvalidConfig(_) | E::Unsupported(_) | E::EmptyDataset => "config",
                E::Io { .. } | E::Truncated(_) | E::Checksum(_) | E::Format(_) => "io",
                E::Version { .. } => "version",
                E::InvalidPose { .. }
                | E::EmptyInput(_)
                | E::Shape(_)
                | E::SolverFailure(_)
                | E::InvalidCache => "numeric",
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "config" => 2,
            "io" => 3,
            "numeric" => 4,
            _ => 5,
        }
    }

    /// One line: `error code=N kind=K message="..."`.
    pub fn line(&self) -> String {
        let msg = match self {
            CliError::Config(m) => m.clone(),
            CliError::Io(p, e) => format!("{}: {e}", p.display()),
            CliError::Core(e) => e.to_string(),
        };
        format!("error code={} kind={} message={:?}", self.exit_code(), self.kind(), msg.replace('\n', " "))
    }
}
