use thiserror::Error;

/// Errors produced by the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cell ({time}, {pitch}) is outside a {time_steps}x{pitch_count} roll")]
    Bounds {
        time: usize,
        pitch: usize,
        time_steps: usize,
        pitch_count: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("malformed MIDI at byte {offset}: {message}")]
    MidiParse { offset: usize, message: String },
    #[error("target distribution has empty support")]
    EmptySupport,
    #[error("non-finite activation in layer {layer}")]
    Numeric { layer: String },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("no legal edit event: every cell is masked")]
    NoLegalEvent,
    #[error("nothing to {0}")]
    StackEmpty(&'static str),
    #[error("likelihood undefined: input already equals target")]
    UndefinedLikelihood,
    #[error("target is unreachable by note additions alone")]
    Unreachable,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("session {0} not found")]
    NotFound(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
