//! Experiment harness behind the `stimtrain` binary: layered TOML
//! configuration, replayable run directories and the command bodies.

pub mod commands;
pub mod config;
pub mod run;

pub use config::{Config, ConfigError};
pub use run::{Invocation, Manifest, RunDir};

/// Process exit code for an error: 2 configuration or validation, 3 I/O,
/// corrupted or incompatible input, 4 numeric failure, 1 anything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    use stimtrain::Error as E;
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Validation(_) | E::Parse { .. } | E::Capacity(_) => 2,
                E::Io { .. } | E::Corruption { .. } | E::Incompatible { .. } | E::Input(_) => 3,
                E::Numeric(_) | E::Diverged(_) => 4,
                E::Dimension(_) | E::State(_) => 1,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 3;
        }
    }
    1
}
