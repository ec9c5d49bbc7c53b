//! Threaded chunk server with an optional token-bucket rate limit.

use std::io::{BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::store::ChunkStore;
use super::wire::{write_head, Status, WireRequest, WireResponse};
use crate::error::{Error, Result};
use crate::fetchsim::MB_PER_S_PER_GBPS;

/// Refill period of the rate limiter.
pub const RATE_TICK: Duration = Duration::from_millis(10);
const READ_TIMEOUT: Duration = Duration::from_secs(10);

/// Link rate shared by all connections; `None` is unlimited. Adjustable while serving.
#[derive(Debug, Clone, Default)]
pub struct RateLimit(Arc<AtomicU64>);

impl RateLimit {
    pub fn new(gbps: Option<f64>) -> Result<Self> {
        let r = RateLimit::default();
        r.set(gbps)?;
        Ok(r)
    }

    pub fn set(&self, gbps: Option<f64>) -> Result<()> {
        if let Some(g) = gbps {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::invalid(format!("rate limit must be positive, got {g}")));
            }
        }
        self.0.store(gbps.unwrap_or(0.0).to_bits(), Ordering::Relaxed);
        Ok(())
    }

    pub fn get(&self) -> Option<f64> {
        let g = f64::from_bits(self.0.load(Ordering::Relaxed));
        (g > 0.0).then_some(g)
    }
}

/// Writes `data` at no more than the current rate, in 10 ms token refills.
fn send_paced<W: Write>(w: &mut W, data: &[u8], rate: &RateLimit) -> std::io::Result<()> {
    let mut sent = 0;
    let mut tokens = 0.0;
    let mut last = Instant::now();
    while sent < data.len() {
        let Some(gbps) = rate.get() else {
            return w.write_all(&data[sent..]);
        };
        let per_tick = gbps * MB_PER_S_PER_GBPS * 1e6 * RATE_TICK.as_secs_f64();
        let ticks = (last.elapsed().as_nanos() / RATE_TICK.as_nanos()) as u32;
        if ticks > 0 {
            tokens = (tokens + ticks as f64 * per_tick).min(per_tick);
            last += RATE_TICK * ticks;
        }
        if tokens < 1.0 {
            std::thread::sleep((last + RATE_TICK).saturating_duration_since(Instant::now()));
            continue;
        }
        let n = (tokens as usize).min(data.len() - sent);
        w.write_all(&data[sent..sent + n])?;
        sent += n;
        tokens -= n as f64;
    }
    Ok(())
}

fn handle(stream: TcpStream, store: &ChunkStore, rate: &RateLimit) -> Result<()> {
    stream.set_read_timeout(Some(READ_TIMEOUT))?;
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut w = stream;
    let req = match WireRequest::read_from(&mut reader) {
        Ok(r) => r,
        Err(e) => {
            w.write_all(&WireResponse::error(Status::ProtocolError, &e.to_string()).to_bytes())?;
            return Ok(());
        }
    };
    match store.read_payload(&req.cache_id, req.chunk_index, req.resolution) {
        Ok((header, payload)) => {
            write_head(&mut w, Status::Ok, &serde_json::to_vec(&header)?, payload.len() as u64)?;
            send_paced(&mut w, &payload, rate)?;
        }
        Err(e @ Error::NotFound(_)) => w.write_all(&WireResponse::error(Status::NotFound, &e.to_string()).to_bytes())?,
        Err(e) => w.write_all(&WireResponse::error(Status::InternalError, &e.to_string()).to_bytes())?,
    }
    w.flush()?;
    Ok(())
}

/// A running server. Dropping it stops accepting connections.
#[derive(Debug)]
pub struct ServerHandle {
    addr: SocketAddr,
    rate: RateLimit,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn rate_limit(&self) -> &RateLimit {
        &self.rate
    }

    /// Blocks until the server stops.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.stop_now();
        }
    }
}

/// Serves `store` on `addr`, one thread per connection.
pub fn serve(store: ChunkStore, addr: impl ToSocketAddrs, rate_gbps: Option<f64>) -> Result<ServerHandle> {
    let rate = RateLimit::new(rate_gbps)?;
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let store = Arc::new(store);
    let thread = {
        let (stop, rate) = (stop.clone(), rate.clone());
        std::thread::spawn(move || {
            for conn in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let (store, rate) = (store.clone(), rate.clone());
                std::thread::spawn(move || {
                    let _ = handle(stream, &store, &rate);
                });
            }
        })
    };
    Ok(ServerHandle {
        addr: local,
        rate,
        stop,
        thread: Some(thread),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pacing_holds_the_rate() {
        // 0.01 Gbps = 12.5 KB per tick; 250 KB takes 20 ticks.
        let rate = RateLimit::new(Some(0.01)).unwrap();
        let data = vec![7u8; 250_000];
        let mut sink = Vec::new();
        let t = Instant::now();
        send_paced(&mut sink, &data, &rate).unwrap();
        let dt = t.elapsed().as_secs_f64();
        assert_eq!(sink, data);
        assert!((0.2..0.3).contains(&dt), "{dt}");
        assert!(RateLimit::new(Some(-1.0)).is_err());
        assert_eq!(RateLimit::new(None).unwrap().get(), None);
    }
}
