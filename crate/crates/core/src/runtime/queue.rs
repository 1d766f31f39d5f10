use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crossbeam_channel::{bounded, Receiver, SendTimeoutError, Sender, TrySendError};
use serde::{Deserialize, Serialize};

/// What a full queue does with a new message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverflowPolicy {
    /// Discard the oldest queued message; the producer never waits.
    DropOldest,
    /// Wait for space. Only for offline replay where nothing may be lost.
    Block,
}

/// Shared count of messages discarded by a drop-oldest queue.
#[derive(Debug, Clone, Default)]
pub struct DropCounter(Arc<AtomicU64>);

impl DropCounter {
    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    fn incr(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone)]
pub struct QueueSender<T> {
    tx: Sender<T>,
    // Lets the producer evict from the head of its own queue.
    evict: Receiver<T>,
    policy: OverflowPolicy,
    dropped: DropCounter,
    stop: Arc<AtomicBool>,
}

/// Bounded single-consumer queue with the given overflow policy. `stop`
/// releases a producer blocked on a full queue.
pub fn queue<T>(capacity: usize, policy: OverflowPolicy, stop: Arc<AtomicBool>) -> (QueueSender<T>, Receiver<T>, DropCounter) {
    let (tx, rx) = bounded(capacity.max(1));
    let dropped = DropCounter::default();
    (QueueSender { tx, evict: rx.clone(), policy, dropped: dropped.clone(), stop }, rx, dropped)
}

impl<T> QueueSender<T> {
    /// Enqueue `msg`. Returns false if the pipeline is stopping and the
    /// message could not be delivered.
    pub fn send(&self, mut msg: T) -> bool {
        match self.policy {
            OverflowPolicy::DropOldest => loop {
                match self.tx.try_send(msg) {
                    Ok(()) => return true,
                    Err(TrySendError::Full(m)) => {
                        if self.evict.try_recv().is_ok() {
                            self.dropped.incr();
                        }
                        msg = m;
                    }
                    Err(TrySendError::Disconnected(_)) => return false,
                }
            },
            OverflowPolicy::Block => loop {
                match self.tx.send_timeout(msg, Duration::from_millis(20)) {
                    Ok(()) => return true,
                    Err(SendTimeoutError::Timeout(m)) => {
                        if self.stop.load(Ordering::Relaxed) {
                            return false;
                        }
                        msg = m;
                    }
                    Err(SendTimeoutError::Disconnected(_)) => return false,
                }
            },
        }
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.get()
    }
}
