//! Real-time session server for driving the ego by hand while the advisory
//! runs live.

pub mod protocol;
pub mod server;
pub mod session;

pub use server::{router, serve, AppState};
pub use session::{Pedal, Session, SessionError};
