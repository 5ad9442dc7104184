//! Producer/consumer mapper: the caller's thread validates and enqueues
//! packets, a dedicated thread owns the [`MapperState`] and runs windows.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use log::warn;

use super::{ingest, process_pending, KeyframePacket, MapperState, PipelineError};
use crate::depth_codec::Decoder;
use crate::optimizer::OptimizerConfig;

pub struct MapperService;

pub struct MapperHandle {
    tx: Option<Sender<KeyframePacket>>,
    thread: Option<JoinHandle<(MapperState, Vec<String>)>>,
    solving: Arc<AtomicBool>,
    completed: Arc<AtomicUsize>,
}

impl MapperService {
    pub fn spawn(decoder: Decoder, config: OptimizerConfig, window_size: usize) -> MapperHandle {
        let (tx, rx) = mpsc::channel();
        let solving = Arc::new(AtomicBool::new(false));
        let completed = Arc::new(AtomicUsize::new(0));
        let (s, c) = (Arc::clone(&solving), Arc::clone(&completed));
        let thread = thread::Builder::new()
            .name("codemap-mapper".into())
            .spawn(move || consume(rx, MapperState::with_window_size(window_size), decoder, config, s, c))
            .expect("spawn mapper thread");
        MapperHandle { tx: Some(tx), thread: Some(thread), solving, completed }
    }
}

fn consume(
    rx: Receiver<KeyframePacket>,
    mut state: MapperState,
    decoder: Decoder,
    config: OptimizerConfig,
    solving: Arc<AtomicBool>,
    completed: Arc<AtomicUsize>,
) -> (MapperState, Vec<String>) {
    let mut errors = Vec::new();
    let handle = |p: KeyframePacket, state: &mut MapperState, errors: &mut Vec<String>| {
        if let Err(e) = ingest(p, state) {
            warn!("{e}");
            errors.push(e.to_string());
        }
    };
    while let Ok(p) = rx.recv() {
        handle(p, &mut state, &mut errors);
        // Fold in everything already queued so only the newest window runs.
        loop {
            match rx.try_recv() {
                Ok(p) => handle(p, &mut state, &mut errors),
                Err(TryRecvError::Empty | TryRecvError::Disconnected) => break,
            }
        }
        solving.store(true, Ordering::SeqCst);
        if let Err(e) = process_pending(&mut state, &decoder, &config) {
            warn!("window failed: {e}");
            errors.push(e.to_string());
        }
        solving.store(false, Ordering::SeqCst);
        completed.fetch_add(1, Ordering::SeqCst);
    }
    (state, errors)
}

impl MapperHandle {
    /// Validates and enqueues a packet; never waits for the mapper.
    pub fn ingest(&self, packet: KeyframePacket) -> Result<(), PipelineError> {
        packet.validate()?;
        self.tx.as_ref().ok_or(PipelineError::Disconnected)?.send(packet).map_err(|_| PipelineError::Disconnected)
    }

    pub fn is_solving(&self) -> bool {
        self.solving.load(Ordering::SeqCst)
    }

    /// Consumer iterations finished so far.
    pub fn batches_completed(&self) -> usize {
        self.completed.load(Ordering::SeqCst)
    }

    /// Closes the queue, lets the mapper finish, and returns its state with
    /// any per-packet or per-window errors it logged.
    pub fn finish(mut self) -> Result<(MapperState, Vec<String>), PipelineError> {
        drop(self.tx.take());
        self.thread.take().expect("joined once").join().map_err(|_| PipelineError::Disconnected)
    }
}

impl Drop for MapperHandle {
    fn drop(&mut self) {
        drop(self.tx.take());
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
