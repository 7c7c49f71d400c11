use std::fmt;
use std::io::Write;
use std::path::Path;

use vptq::tensor::write_npy;
use vptq::{Error, TensorF32};

/// Failure of a subcommand, carrying its exit status.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
    Partial(Vec<(String, Error)>),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

fn core_exit_code(e: &Error) -> u8 {
    match e {
        Error::Format(_)
        | Error::UnsupportedLayout
        | Error::NonFiniteData(_)
        | Error::CorruptIndices { .. }
        | Error::IndexOverflow(_)
        | Error::CorruptStream(_)
        | Error::CorruptContainer(_) => 3,
        Error::NotPositiveDefinite { .. } | Error::InverseResidual { .. } | Error::InvalidHessian(_) => 4,
        _ => 2,
    }
}

impl CliError {
    /// 2 usage or validation, 3 corrupt data, 4 numeric failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => core_exit_code(e),
            CliError::Partial(errs) => errs.iter().map(|(_, e)| core_exit_code(e)).max().unwrap_or(2),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(Error::InvalidConfig(problems)) => {
                write!(f, "invalid config:")?;
                for p in problems {
                    write!(f, "\n  - {p}")?;
                }
                Ok(())
            }
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Partial(errs) => {
                write!(f, "{} entries failed", errs.len())?;
                for (name, e) in errs {
                    write!(f, "\n  {name}: {e}")?;
                }
                Ok(())
            }
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

/// Writes through a temporary file in the target directory, then renames, so
/// a failed run never leaves a partial file behind.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> CliResult) -> CliResult {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = std::io::BufWriter::new(tmp.as_file_mut());
        fill(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| CliError::Core(Error::Io(e.error)))?;
    Ok(())
}

pub fn write_npy_atomic(path: &Path, t: &TensorF32) -> CliResult {
    write_atomic(path, |w| {
        let mut w = w;
        write_npy(&mut w, t)?;
        Ok(())
    })
}

pub fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> CliResult {
    write_atomic(path, |w| Ok(w.write_all(bytes)?))
}

/// Fixed-order `key=value` block.
#[derive(Default)]
pub struct Block(String);

impl Block {
    pub fn put(&mut self, key: &str, value: impl fmt::Display) -> &mut Self {
        self.0.push_str(&format!("{key}={value}\n"));
        self
    }

    pub fn raw(&mut self, text: &str) -> &mut Self {
        self.0.push_str(text);
        self
    }

    pub fn print(&self) {
        print!("{}", self.0);
    }
}
