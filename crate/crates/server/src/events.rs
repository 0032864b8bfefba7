//! Per-session fan-out of engine events to SSE subscribers.
//!
//! Each session gets a bounded broadcast channel. A subscriber that falls
//! more than [`STREAM_CAPACITY`] events behind loses the oldest ones and is
//! sent a `Gap` event; it can reconnect with `Last-Event-ID` to replay the
//! missed range from the session log.

use std::collections::HashMap;

use core_engine::session::EventSink;
use core_engine::SessionEvent;
use parking_lot::Mutex;
use tokio::sync::broadcast;

pub const STREAM_CAPACITY: usize = 256;

#[derive(Default)]
pub struct Broadcaster {
    channels: Mutex<HashMap<String, broadcast::Sender<SessionEvent>>>,
}

impl Broadcaster {
    pub fn subscribe(&self, session_id: &str) -> broadcast::Receiver<SessionEvent> {
        self.channels
            .lock()
            .entry(session_id.to_string())
            .or_insert_with(|| broadcast::channel(STREAM_CAPACITY).0)
            .subscribe()
    }
}

impl EventSink for Broadcaster {
    fn publish(&self, session_id: &str, events: &[SessionEvent]) {
        let channels = self.channels.lock();
        if let Some(tx) = channels.get(session_id) {
            for e in events {
                // No receivers is fine: the session log keeps every event.
                let _ = tx.send(e.clone());
            }
        }
    }
}
