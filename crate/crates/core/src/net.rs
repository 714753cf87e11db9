//! Injectable network layer.
//!
//! Every socket the process opens (the HTTP listener, the connection to an
//! external inference runtime) is created through a [`NetworkLayer`]. The
//! production [`SystemNetwork`] refuses outbound connections to anything
//! but loopback; [`RecordingNetwork`] additionally logs every attempt so
//! tests can assert that nothing left the machine.

use std::fmt::Debug;
use std::io;
use std::net::{IpAddr, Ipv6Addr, SocketAddr, TcpListener, TcpStream};
use std::sync::Mutex;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::Serialize;

pub trait NetworkLayer: Send + Sync + Debug {
    fn connect(&self, addr: SocketAddr, timeout: Duration) -> io::Result<TcpStream>;
    fn bind(&self, addr: SocketAddr) -> io::Result<TcpListener>;
}

/// Loopback plus IPv4-mapped loopback (`::ffff:127.0.0.1`).
pub fn is_loopback(ip: IpAddr) -> bool {
    match ip {
        IpAddr::V4(v4) => v4.is_loopback(),
        IpAddr::V6(v6) => v6.is_loopback() || v6.to_ipv4_mapped().is_some_and(|v4| v4.is_loopback()),
    }
}

/// RFC 1918 / unique-local / link-local addresses, or loopback.
pub fn is_private_or_loopback(ip: IpAddr) -> bool {
    if is_loopback(ip) {
        return true;
    }
    match ip {
        IpAddr::V4(v4) => v4.is_private() || v4.is_link_local(),
        IpAddr::V6(v6) => is_unique_local(v6) || is_unicast_link_local(v6),
    }
}

fn is_unique_local(v6: Ipv6Addr) -> bool {
    (v6.segments()[0] & 0xfe00) == 0xfc00
}

fn is_unicast_link_local(v6: Ipv6Addr) -> bool {
    (v6.segments()[0] & 0xffc0) == 0xfe80
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemNetwork;

impl NetworkLayer for SystemNetwork {
    fn connect(&self, addr: SocketAddr, timeout: Duration) -> io::Result<TcpStream> {
        if !is_loopback(addr.ip()) {
            return Err(io::Error::new(
                io::ErrorKind::PermissionDenied,
                format!("offline mode: refusing outbound connection to {addr}"),
            ));
        }
        TcpStream::connect_timeout(&addr, timeout)
    }

    fn bind(&self, addr: SocketAddr) -> io::Result<TcpListener> {
        TcpListener::bind(addr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AttemptKind {
    Connect,
    Bind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConnectionAttempt {
    pub kind: AttemptKind,
    pub addr: SocketAddr,
    pub at: DateTime<Utc>,
}

/// Wraps another layer and records every connect/bind before delegating.
#[derive(Debug)]
pub struct RecordingNetwork<N: NetworkLayer = SystemNetwork> {
    inner: N,
    attempts: Mutex<Vec<ConnectionAttempt>>,
}

impl Default for RecordingNetwork<SystemNetwork> {
    fn default() -> Self {
        Self::new(SystemNetwork)
    }
}

impl<N: NetworkLayer> RecordingNetwork<N> {
    pub fn new(inner: N) -> Self {
        Self {
            inner,
            attempts: Mutex::new(Vec::new()),
        }
    }

    pub fn attempts(&self) -> Vec<ConnectionAttempt> {
        self.attempts.lock().expect("recorder poisoned").clone()
    }

    /// Outbound connects to non-loopback addresses.
    pub fn non_loopback_attempts(&self) -> Vec<ConnectionAttempt> {
        self.attempts()
            .into_iter()
            .filter(|a| a.kind == AttemptKind::Connect && !is_loopback(a.addr.ip()))
            .collect()
    }

    fn note(&self, kind: AttemptKind, addr: SocketAddr) {
        self.attempts.lock().expect("recorder poisoned").push(ConnectionAttempt {
            kind,
            addr,
            at: Utc::now(),
        });
    }
}

impl<N: NetworkLayer> NetworkLayer for RecordingNetwork<N> {
    fn connect(&self, addr: SocketAddr, timeout: Duration) -> io::Result<TcpStream> {
        self.note(AttemptKind::Connect, addr);
        self.inner.connect(addr, timeout)
    }

    fn bind(&self, addr: SocketAddr) -> io::Result<TcpListener> {
        self.note(AttemptKind::Bind, addr);
        self.inner.bind(addr)
    }
}
