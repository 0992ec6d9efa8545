//! In-process ranks exchanging tagged messages over ordered channels.
//!
//! Every rank runs the same async code. In threaded mode each rank owns an
//! OS thread and a receive blocks; in round-robin mode all ranks are polled
//! from one thread and a receive that finds nothing yields.

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, VecDeque};
use std::future::{poll_fn, Future};
use std::pin::pin;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender, TryRecvError};
use std::sync::Arc;
use std::task::{Context, Poll, Waker};

use serde::{Deserialize, Serialize};

use super::RuntimeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    /// One OS thread per rank.
    #[default]
    Threaded,
    /// All ranks polled in turn from the calling thread.
    RoundRobin,
}

/// Identifies one message: the plan step, a sub-operation within the step
/// and a sequence number within the sub-operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tag {
    pub step: u32,
    pub sub: u32,
    pub seq: u64,
}

impl Tag {
    pub fn new(step: usize, sub: u32, seq: u64) -> Tag {
        Tag { step: step as u32, sub, seq }
    }
}

enum Envelope {
    Data { src: usize, tag: Tag, payload: Vec<f32> },
    Abort,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    /// Bytes this rank sent inside its process group.
    pub comm_bytes: u64,
    /// Bytes this rank sent to another process group.
    pub p2p_bytes: u64,
    /// Modeled memory traffic (loads plus stores) in bytes.
    pub memory_bytes: u64,
}

pub struct RankCtx {
    pub rank: usize,
    pub world: usize,
    peers: Vec<Sender<Envelope>>,
    rx: Receiver<Envelope>,
    stash: RefCell<HashMap<(usize, Tag), VecDeque<Vec<f32>>>>,
    blocking: bool,
    aborted: Cell<bool>,
    sent: Arc<AtomicU64>,
    pub counters: RefCell<Counters>,
}

impl RankCtx {
    /// Sends `payload` to `dst`. Never blocks.
    pub fn send(&self, dst: usize, tag: Tag, payload: Vec<f32>) {
        // A closed receiver means the peer already failed; its error wins.
        let _ = self.peers[dst].send(Envelope::Data { src: self.rank, tag, payload });
        self.sent.fetch_add(1, Ordering::SeqCst);
    }

    pub fn add_comm(&self, bytes: u64) {
        self.counters.borrow_mut().comm_bytes += bytes;
    }

    pub fn add_p2p(&self, bytes: u64) {
        self.counters.borrow_mut().p2p_bytes += bytes;
    }

    pub fn add_memory(&self, bytes: u64) {
        self.counters.borrow_mut().memory_bytes += bytes;
    }

    fn accept(&self, env: Envelope) {
        match env {
            Envelope::Data { src, tag, payload } => {
                self.stash.borrow_mut().entry((src, tag)).or_default().push_back(payload);
            }
            Envelope::Abort => self.aborted.set(true),
        }
    }

    fn take(&self, src: usize, tag: Tag) -> Option<Vec<f32>> {
        let mut stash = self.stash.borrow_mut();
        let q = stash.get_mut(&(src, tag))?;
        let m = q.pop_front();
        if q.is_empty() {
            stash.remove(&(src, tag));
        }
        m
    }

    fn poll_recv(&self, src: usize, tag: Tag) -> Poll<Result<Vec<f32>, RuntimeError>> {
        loop {
            if let Some(m) = self.take(src, tag) {
                return Poll::Ready(Ok(m));
            }
            if self.aborted.get() {
                return Poll::Ready(Err(RuntimeError::Aborted));
            }
            let env = if self.blocking {
                match self.rx.recv() {
                    Ok(e) => e,
                    Err(_) => return Poll::Ready(Err(RuntimeError::Aborted)),
                }
            } else {
                match self.rx.try_recv() {
                    Ok(e) => e,
                    Err(TryRecvError::Empty) => return Poll::Pending,
                    Err(TryRecvError::Disconnected) => return Poll::Ready(Err(RuntimeError::Aborted)),
                }
            };
            self.accept(env);
        }
    }

    /// Receives the next message from `src` carrying `tag`.
    pub async fn recv(&self, src: usize, tag: Tag) -> Result<Vec<f32>, RuntimeError> {
        poll_fn(|_| self.poll_recv(src, tag)).await
    }

    fn abort_peers(&self) {
        for (r, p) in self.peers.iter().enumerate() {
            if r != self.rank {
                let _ = p.send(Envelope::Abort);
            }
        }
    }
}

fn make_ranks(world: usize, blocking: bool) -> Vec<RankCtx> {
    let (txs, rxs): (Vec<_>, Vec<_>) = (0..world).map(|_| channel()).unzip();
    let sent = Arc::new(AtomicU64::new(0));
    rxs.into_iter()
        .enumerate()
        .map(|(rank, rx)| RankCtx {
            rank,
            world,
            peers: txs.clone(),
            rx,
            stash: RefCell::new(HashMap::new()),
            blocking,
            aborted: Cell::new(false),
            sent: sent.clone(),
            counters: RefCell::new(Counters::default()),
        })
        .collect()
}

fn block_on<F: Future>(f: F) -> F::Output {
    let mut f = pin!(f);
    let mut cx = Context::from_waker(Waker::noop());
    loop {
        if let Poll::Ready(v) = f.as_mut().poll(&mut cx) {
            return v;
        }
        std::thread::yield_now();
    }
}

/// Runs `body` once per rank and returns each rank's result and counters.
/// The first failing rank's error (lowest rank) is returned; an abort seen
/// by the other ranks is not reported in its place.
pub fn run_ranks<T, F>(world: usize, mode: ExecMode, body: F) -> Result<Vec<(T, Counters)>, RuntimeError>
where
    T: Send,
    F: AsyncFn(&RankCtx) -> Result<T, RuntimeError> + Sync,
{
    let results: Vec<(Result<T, RuntimeError>, Counters)> = match mode {
        ExecMode::Threaded => {
            let ranks = make_ranks(world, true);
            std::thread::scope(|s| {
                let handles: Vec<_> = ranks
                    .into_iter()
                    .map(|ctx| {
                        let body = &body;
                        s.spawn(move || {
                            let r = block_on(body(&ctx));
                            if r.is_err() {
                                ctx.abort_peers();
                            }
                            (r, ctx.counters.take())
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("rank worker panicked")).collect()
            })
        }
        ExecMode::RoundRobin => {
            let ranks = make_ranks(world, false);
            let sent = ranks.first().map(|r| r.sent.clone());
            let mut futs: Vec<_> = ranks.iter().map(|ctx| Some(Box::pin(body(ctx)))).collect();
            let mut out: Vec<Option<Result<T, RuntimeError>>> = (0..world).map(|_| None).collect();
            let mut cx = Context::from_waker(Waker::noop());
            loop {
                let before = sent.as_ref().map_or(0, |s| s.load(Ordering::SeqCst));
                let mut finished = false;
                for (i, slot) in futs.iter_mut().enumerate() {
                    if let Some(f) = slot {
                        if let Poll::Ready(r) = f.as_mut().poll(&mut cx) {
                            if r.is_err() {
                                ranks[i].abort_peers();
                            }
                            out[i] = Some(r);
                            *slot = None;
                            finished = true;
                        }
                    }
                }
                if futs.iter().all(Option::is_none) {
                    break;
                }
                let after = sent.as_ref().map_or(0, |s| s.load(Ordering::SeqCst));
                if !finished && after == before {
                    return Err(RuntimeError::Deadlock);
                }
            }
            drop(futs);
            out.into_iter().zip(&ranks).map(|(r, ctx)| (r.expect("every rank finished"), ctx.counters.take())).collect()
        }
    };
    let mut first_err = None;
    let mut ok = Vec::with_capacity(world);
    for (r, c) in results {
        match r {
            Ok(v) => ok.push((v, c)),
            Err(RuntimeError::Aborted) => {}
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    if ok.len() != world {
        return Err(RuntimeError::Aborted);
    }
    Ok(ok)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_pass_in_both_modes() {
        for mode in [ExecMode::Threaded, ExecMode::RoundRobin] {
            let out = run_ranks(4, mode, async |ctx: &RankCtx| {
                let next = (ctx.rank + 1) % ctx.world;
                let prev = (ctx.rank + ctx.world - 1) % ctx.world;
                ctx.send(next, Tag::new(0, 0, 0), vec![ctx.rank as f32]);
                let got = ctx.recv(prev, Tag::new(0, 0, 0)).await?;
                Ok(got[0])
            })
            .unwrap();
            let vals: Vec<f32> = out.into_iter().map(|(v, _)| v).collect();
            assert_eq!(vals, vec![3.0, 0.0, 1.0, 2.0]);
        }
    }

    #[test]
    fn round_robin_detects_deadlock() {
        let r = run_ranks(2, ExecMode::RoundRobin, async |ctx: &RankCtx| {
            ctx.recv(1 - ctx.rank, Tag::new(0, 0, 0)).await?;
            Ok(())
        });
        assert!(matches!(r, Err(RuntimeError::Deadlock)));
    }

    #[test]
    fn failure_aborts_peers() {
        let r = run_ranks(3, ExecMode::Threaded, async |ctx: &RankCtx| {
            if ctx.rank == 1 {
                return Err(RuntimeError::Step { step: 0, message: "boom".into() });
            }
            ctx.recv(1, Tag::new(0, 0, 0)).await?;
            Ok(())
        });
        assert!(matches!(r, Err(RuntimeError::Step { .. })));
    }
}
