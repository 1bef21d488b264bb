use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("matrix is not positive definite (smallest eigenvalue {min_eig:e}, floor {floor:e})")]
    NotPositiveDefinite { min_eig: f64, floor: f64 },

    #[error("matrix exponential overflows (largest eigenvalue {max_eig:e} exceeds {limit})")]
    Overflow { max_eig: f64, limit: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate calibration: {0}")]
    DegenerateCalibration(String),

    #[error("invalid data at pixel {pixel}: {reason}")]
    InvalidData { pixel: usize, reason: String },

    #[error("denoiser `{name}` violated its contract: {reason}")]
    DenoiserContract { name: String, reason: String },

    #[error("at pixel {pixel}: {source}")]
    AtPixel {
        pixel: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("container format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Attach a pixel index to an error raised by a per-matrix routine.
    pub fn at_pixel(self, pixel: usize) -> Error {
        match self {
            e @ Error::AtPixel { .. } => e,
            e => Error::AtPixel {
                pixel,
                source: Box::new(e),
            },
        }
    }
}
