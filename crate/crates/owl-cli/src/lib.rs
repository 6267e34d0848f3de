//! Library surface of the `owl` binary: configuration, shared pipeline
//! drivers, and the subcommand implementations. The integration and
//! acceptance tests drive the pipeline through this crate.

pub mod commands;
pub mod config;
pub mod io_util;
pub mod pipeline;

use anyhow::Result;

/// Exit codes: 0 success, 1 usage or general failure, 2 fingerprint or
/// integrity mismatch, 3 numeric failure.
pub fn classify_error(err: &anyhow::Error) -> i32 {
    use owl_core::calibrate::CalibrateError;
    use owl_core::decode::DecodeError;
    use owl_core::microlm::ModelError;
    use owl_core::tensorcore::TensorError;

    fn numeric_tensor(e: &TensorError) -> bool {
        matches!(e, TensorError::NonFinite { .. })
    }
    fn numeric_model(e: &ModelError) -> bool {
        matches!(e, ModelError::NanLoss { .. })
            || matches!(e, ModelError::Tensor(t) if numeric_tensor(t))
    }
    fn classify_decode(e: &DecodeError) -> Option<i32> {
        match e {
            DecodeError::FingerprintMismatch { .. } => Some(2),
            DecodeError::Model(m) if numeric_model(m) => Some(3),
            DecodeError::Tensor(t) if numeric_tensor(t) => Some(3),
            _ => None,
        }
    }

    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<DecodeError>() {
            if let Some(code) = classify_decode(e) {
                return code;
            }
        }
        if let Some(e) = cause.downcast_ref::<CalibrateError>() {
            match e {
                CalibrateError::ModelFingerprintMismatch { .. } => return 2,
                CalibrateError::Decode(d) => {
                    if let Some(code) = classify_decode(d) {
                        return code;
                    }
                }
                CalibrateError::Tensor(t) if numeric_tensor(t) => return 3,
                _ => {}
            }
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            if numeric_model(e) {
                return 3;
            }
        }
        if let Some(e) = cause.downcast_ref::<TensorError>() {
            if numeric_tensor(e) {
                return 3;
            }
        }
    }
    1
}

/// Caps the global worker pool from the `OWL_THREADS` environment
/// variable. A no-op when unset, unparsable, or already initialized.
pub fn init_thread_pool() -> Result<()> {
    if let Ok(value) = std::env::var("OWL_THREADS") {
        if let Ok(n) = value.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
    Ok(())
}
