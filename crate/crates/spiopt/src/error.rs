use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpioptError {
    #[error(transparent)]
    Nn(#[from] spiopt_nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SpioptError>;
