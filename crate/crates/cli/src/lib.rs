//! Command-line pipeline over the alignment-adapter toolkit: synthetic data,
//! teacher pretraining, student derivation, two-phase alignment,
//! fine-tuning, evaluation and reporting, all keyed by a TOML run config.

pub mod commands;
pub mod config;

use alad::Error;

/// Process exit status for an error family.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Input(_) | Error::Checkpoint(_) | Error::Dimension(_) | Error::Io(_) | Error::Json(_) => 3,
        Error::Dependency(_) => 4,
        Error::Divergence(_) | Error::UndefinedLoss(_) => 5,
        Error::FrozenViolation(_) => 6,
        Error::Contract(_) | Error::StaleGradient(_) | Error::Report(_) => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct_per_family() {
        let codes = [
            exit_code(&Error::Config(String::new())),
            exit_code(&Error::Data(String::new())),
            exit_code(&Error::Dependency(String::new())),
            exit_code(&Error::Divergence(String::new())),
            exit_code(&Error::FrozenViolation(String::new())),
            exit_code(&Error::Contract(String::new())),
        ];
        assert_eq!(codes, [2, 3, 4, 5, 6, 1]);
        assert_eq!(exit_code(&Error::UndefinedLoss(String::new())), 5);
    }
}
