//! Deterministic discrete-event core.
//!
//! Events are ordered by `(timestamp, seq)`, where `seq` is assigned at
//! scheduling time, so simultaneous events run in FIFO order. The clock is an
//! integer nanosecond counter; floating-point costs are converted with
//! [`SimDuration::from_micros`] at this boundary only.

mod engine;
mod event;
mod time;
mod trace;

pub use engine::{Engine, EventId, Handler, Handlers, Scheduler, SimError};
pub use event::{EventKind, EventPayload, SimEvent};
pub use time::{SimDuration, SimTime};
pub use trace::{EventTrace, TraceError, TraceRecord};
