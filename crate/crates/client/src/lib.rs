//! HTTP transport for envelopes and typed clients for each service.

mod clients;
mod sink;
mod transport;

pub use clients::*;
pub use sink::{CollectingSink, MessageSink, NullSink};
pub use transport::{check_reply, endpoint, HttpTransport, Instrumented, SentRecord, Transport};
