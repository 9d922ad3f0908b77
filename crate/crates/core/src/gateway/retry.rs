use std::time::Duration;

use rand::Rng;

/// Upper bound of the delay before retry `attempt` (0-based): `base * 2^attempt`.
pub fn backoff_ceiling(base_secs: f64, attempt: u32) -> Duration {
    let secs = base_secs * 2f64.powi(attempt.min(30) as i32);
    Duration::from_secs_f64(secs.min(300.0))
}

/// Full jitter: uniform in `[0, ceiling]`.
pub fn backoff_delay<R: Rng + ?Sized>(base_secs: f64, attempt: u32, rng: &mut R) -> Duration {
    backoff_ceiling(base_secs, attempt).mul_f64(rng.random::<f64>())
}
