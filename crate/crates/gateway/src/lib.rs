//! WebSocket gateway through which one remote operator watches the online
//! run and takes over the robot.
//!
//! The interaction loop never waits on the network: control state is a
//! single latest-value slot, and so is the outgoing frame, so a slow
//! console just misses frames.

pub mod protocol;
mod server;

use std::sync::Mutex;
use std::time::{Duration, Instant};

pub use server::{Gateway, GatewayConfig, GatewayStats, RemoteIntervener};

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("png encoding failed: {0}")]
    Png(#[from] image::ImageError),
    #[error("images with {0} channels cannot be streamed")]
    Channels(usize),
    #[error("malformed message: {0}")]
    Malformed(String),
}

/// Time source for action staleness, replaceable in tests.
pub trait Clock: Send + Sync {
    /// Time since an arbitrary fixed origin.
    fn now(&self) -> Duration;
}

#[derive(Debug)]
pub struct SystemClock(Instant);

impl Default for SystemClock {
    fn default() -> Self {
        Self(Instant::now())
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.0.elapsed()
    }
}

/// Advances only when told to.
#[derive(Debug, Default)]
pub struct ManualClock(Mutex<Duration>);

impl ManualClock {
    pub fn advance(&self, by: Duration) {
        *self.0.lock().unwrap() += by;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        *self.0.lock().unwrap()
    }
}
