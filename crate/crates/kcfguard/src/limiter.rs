//! In-flight cap with FIFO admission, and the on-disk replay store.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::{Condvar, Mutex};

use kcfguard_core::gateway::MockReplayBackend;
use kcfguard_core::{CompletionBackend, CompletionRequest, GatewayError};

use crate::io::{write_text, IoError};

struct Tickets {
    next: u64,
    serving: u64,
    in_flight: usize,
}

/// Wraps a backend so at most `max_in_flight` completions run at once.
/// Waiters are admitted in arrival order.
pub struct LimitedBackend<B> {
    inner: B,
    max_in_flight: usize,
    state: Mutex<Tickets>,
    ready: Condvar,
}

impl<B: CompletionBackend> LimitedBackend<B> {
    pub fn new(inner: B, max_in_flight: usize) -> Self {
        LimitedBackend {
            inner,
            max_in_flight: max_in_flight.max(1),
            state: Mutex::new(Tickets {
                next: 0,
                serving: 0,
                in_flight: 0,
            }),
            ready: Condvar::new(),
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    fn acquire(&self) {
        let mut s = self.state.lock().unwrap_or_else(|p| p.into_inner());
        let ticket = s.next;
        s.next += 1;
        while s.serving != ticket || s.in_flight >= self.max_in_flight {
            s = self.ready.wait(s).unwrap_or_else(|p| p.into_inner());
        }
        s.serving += 1;
        s.in_flight += 1;
        self.ready.notify_all();
    }

    fn release(&self) {
        let mut s = self.state.lock().unwrap_or_else(|p| p.into_inner());
        s.in_flight -= 1;
        self.ready.notify_all();
    }
}

impl<B: CompletionBackend> CompletionBackend for LimitedBackend<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn is_remote(&self) -> bool {
        self.inner.is_remote()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        self.acquire();
        let out = self.inner.complete(request);
        self.release();
        out
    }
}

/// Loads `<hash>.txt` files from a replay directory.
pub fn load_replay_dir(dir: &Path) -> Result<MockReplayBackend, IoError> {
    let mut entries = BTreeMap::new();
    let listing = fs::read_dir(dir).map_err(|source| IoError::Read {
        path: dir.to_path_buf(),
        source,
    })?;
    for entry in listing.flatten() {
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("txt") {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let text = crate::io::read_text(&path)?;
        entries.insert(stem.to_string(), text);
    }
    Ok(MockReplayBackend::new(entries))
}

pub fn record_replay(
    dir: &Path,
    request: &CompletionRequest,
    completion: &str,
) -> Result<(), IoError> {
    write_text(
        &dir.join(format!("{}.txt", request.replay_key())),
        completion,
    )
}
