use mlta::{ErrorClass, MltaError};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;
pub const EXIT_DATA: u8 = 4;
pub const EXIT_NUMERICAL: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Class {
    Usage,
    Config,
    Data,
    Numerical,
}

#[derive(Debug)]
pub struct CliError {
    pub class: Class,
    pub code: String,
    pub message: String,
}

impl CliError {
    pub fn new(class: Class, code: &str, message: impl Into<String>) -> Self {
        Self {
            class,
            code: code.to_string(),
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(Class::Usage, "cli/usage", message)
    }

    pub fn exit_code(&self) -> u8 {
        match self.class {
            Class::Usage => EXIT_USAGE,
            Class::Config => EXIT_CONFIG,
            Class::Data => EXIT_DATA,
            Class::Numerical => EXIT_NUMERICAL,
        }
    }
}

impl From<MltaError> for CliError {
    fn from(e: MltaError) -> Self {
        let class = match e.class() {
            ErrorClass::Config => Class::Config,
            ErrorClass::Data => Class::Data,
            ErrorClass::Numerical => Class::Numerical,
        };
        Self::new(class, e.code(), e.to_string())
    }
}
