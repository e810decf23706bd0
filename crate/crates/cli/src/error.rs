use cq_core::CqError;

/// A failure reported as one `error[CODE]: message` line.
#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    pub fn line(&self) -> String {
        let flat: Vec<&str> = self.message.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        format!("error[{}]: {}", self.code, flat.join(" "))
    }
}

impl From<CqError> for CliError {
    fn from(e: CqError) -> Self {
        Self::new(e.code(), e.to_string())
    }
}

impl From<cq_tensor::TensorError> for CliError {
    fn from(e: cq_tensor::TensorError) -> Self {
        CqError::from(e).into()
    }
}
