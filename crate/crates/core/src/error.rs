use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("empty object: {0}")]
    EmptyObject(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),
    #[error("no point clouds to pair with {0}")]
    Pairing(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("empty region: {0}")]
    EmptyRegion(String),
    #[error("undefined loss: {0}")]
    UndefinedLoss(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("incompatible: {0}")]
    Compatibility(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
