//! Message delivery between the edge and cloud actors.
//!
//! [`SimChannel`] is the deterministic duplex link used by the simulator;
//! [`FramedStream`] carries the same frames over a TCP connection with a
//! 4-byte little-endian length prefix.

use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RandomStream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    /// Half of the round-trip time; includes (de)serialization overhead.
    pub one_way_latency_ms: f64,
    /// Link rate; `None` models an unconstrained link.
    #[serde(default)]
    pub bandwidth_bytes_per_ms: Option<f64>,
    #[serde(default)]
    pub jitter_std_ms: f64,
}

impl ChannelConfig {
    pub fn ideal(one_way_latency_ms: f64) -> Self {
        Self { one_way_latency_ms, bandwidth_bytes_per_ms: None, jitter_std_ms: 0.0 }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.one_way_latency_ms >= 0.0) || !self.one_way_latency_ms.is_finite() {
            return Err(format!("one_way_latency_ms {} must be >= 0", self.one_way_latency_ms));
        }
        if let Some(bw) = self.bandwidth_bytes_per_ms {
            if !(bw > 0.0) {
                return Err(format!("bandwidth_bytes_per_ms {bw} must be > 0"));
            }
        }
        if !(self.jitter_std_ms >= 0.0) || !self.jitter_std_ms.is_finite() {
            return Err(format!("jitter_std_ms {} must be >= 0", self.jitter_std_ms));
        }
        Ok(())
    }

    /// Serialization delay of `bytes` on this link.
    pub fn transmission_ms(&self, bytes: usize) -> f64 {
        self.bandwidth_bytes_per_ms.map_or(0.0, |bw| bytes as f64 / bw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Uplink,
    Downlink,
}

impl Direction {
    fn idx(self) -> usize {
        match self {
            Direction::Uplink => 0,
            Direction::Downlink => 1,
        }
    }
}

/// Simulated duplex link: fixed latency, finite bandwidth, seeded jitter,
/// FIFO per direction.
#[derive(Debug, Clone)]
pub struct SimChannel {
    config: ChannelConfig,
    jitter: RandomStream,
    last_send: [f64; 2],
    last_arrival: [f64; 2],
}

impl SimChannel {
    pub fn new(config: ChannelConfig, jitter: RandomStream) -> Self {
        Self { config, jitter, last_send: [f64::NEG_INFINITY; 2], last_arrival: [f64::NEG_INFINITY; 2] }
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.config
    }

    /// Schedules delivery of `size` bytes sent at `now`; returns the arrival
    /// time. The sender never blocks.
    pub fn send(&mut self, direction: Direction, size: usize, now: f64) -> f64 {
        let d = direction.idx();
        debug_assert!(now >= self.last_send[d], "sends must be issued in time order");
        self.last_send[d] = now;
        let jitter = if self.config.jitter_std_ms > 0.0 {
            (self.jitter.draw_standard_normal() * self.config.jitter_std_ms).max(0.0)
        } else {
            0.0
        };
        let raw = now + self.config.one_way_latency_ms + self.config.transmission_ms(size) + jitter;
        let arrival = raw.max(now).max(self.last_arrival[d]);
        self.last_arrival[d] = arrival;
        arrival
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("connection refused by {0}")]
    ConnectionRefused(String),
    #[error("peer closed the connection")]
    PeerClosed,
    #[error("frame of {0} bytes exceeds the transport limit")]
    FrameTooLarge(usize),
    #[error("transport I/O: {0}")]
    Io(#[from] io::Error),
}

pub const MAX_FRAME_BYTES: usize = 1 << 20;

/// Length-prefixed frames over a reliable ordered byte stream.
#[derive(Debug)]
pub struct FramedStream {
    stream: TcpStream,
}

impl FramedStream {
    pub fn new(stream: TcpStream) -> Self {
        let _ = stream.set_nodelay(true);
        Self { stream }
    }

    pub fn connect(addr: impl ToSocketAddrs + std::fmt::Debug) -> Result<Self, TransportError> {
        let label = format!("{addr:?}");
        match TcpStream::connect(addr) {
            Ok(s) => Ok(Self::new(s)),
            Err(e) if e.kind() == io::ErrorKind::ConnectionRefused => Err(TransportError::ConnectionRefused(label)),
            Err(e) => Err(e.into()),
        }
    }

    pub fn accept(listener: &TcpListener) -> Result<Self, TransportError> {
        let (s, _) = listener.accept()?;
        Ok(Self::new(s))
    }

    pub fn try_clone(&self) -> Result<Self, TransportError> {
        Ok(Self { stream: self.stream.try_clone()? })
    }

    pub fn write_frame(&mut self, bytes: &[u8]) -> Result<(), TransportError> {
        if bytes.len() > MAX_FRAME_BYTES {
            return Err(TransportError::FrameTooLarge(bytes.len()));
        }
        let mut buf = Vec::with_capacity(4 + bytes.len());
        buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(bytes);
        self.stream.write_all(&buf).map_err(map_closed)
    }

    /// Next frame, or `None` on a clean end-of-stream at a frame boundary.
    pub fn read_frame(&mut self) -> Result<Option<Vec<u8>>, TransportError> {
        let mut len = [0u8; 4];
        let mut got = 0;
        while got < 4 {
            match self.stream.read(&mut len[got..]) {
                Ok(0) if got == 0 => return Ok(None),
                Ok(0) => return Err(TransportError::PeerClosed),
                Ok(n) => got += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(map_closed(e)),
            }
        }
        let n = u32::from_le_bytes(len) as usize;
        if n > MAX_FRAME_BYTES {
            return Err(TransportError::FrameTooLarge(n));
        }
        let mut buf = vec![0u8; n];
        self.stream.read_exact(&mut buf).map_err(map_closed)?;
        Ok(Some(buf))
    }

    /// Signals end-of-stream to the peer.
    pub fn finish(&self) -> Result<(), TransportError> {
        self.stream.shutdown(Shutdown::Write).map_err(map_closed)
    }
}

fn map_closed(e: io::Error) -> TransportError {
    match e.kind() {
        io::ErrorKind::UnexpectedEof
        | io::ErrorKind::ConnectionReset
        | io::ErrorKind::ConnectionAborted
        | io::ErrorKind::BrokenPipe => TransportError::PeerClosed,
        _ => TransportError::Io(e),
    }
}
