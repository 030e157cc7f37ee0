//! A framed, mutually authenticated connection over TLS.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rustls::{ClientConfig, ClientConnection, ServerConfig, ServerConnection, StreamOwned};
use tracing::debug;

use crate::tls::{self, Credentials, TlsError};
use crate::wire::{error_code, Frame, FrameBuffer, WireError};
use crate::{HEARTBEAT_INTERVAL, MISSED_HEARTBEATS};

const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum PeerRole {
    Publisher = 1,
    Consumer = 2,
    /// A cart's control link to the server.
    Cart = 3,
    Server = 4,
    Broker = 5,
}

impl PeerRole {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => PeerRole::Publisher,
            2 => PeerRole::Consumer,
            3 => PeerRole::Cart,
            4 => PeerRole::Server,
            5 => PeerRole::Broker,
            _ => return None,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConnError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("tls: {0}")]
    Tls(#[from] rustls::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Identity(#[from] TlsError),
    #[error("connection closed by peer")]
    Closed,
    #[error("peer missed {MISSED_HEARTBEATS} heartbeats")]
    PeerDead,
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error("peer reported error {code}: {message}")]
    Remote { code: u16, message: String },
}

enum Tls {
    Client(Box<StreamOwned<ClientConnection, TcpStream>>),
    Server(Box<StreamOwned<ServerConnection, TcpStream>>),
}

impl Tls {
    fn sock(&self) -> &TcpStream {
        match self {
            Tls::Client(s) => &s.sock,
            Tls::Server(s) => &s.sock,
        }
    }
}

impl Read for Tls {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        match self {
            Tls::Client(s) => s.read(buf),
            Tls::Server(s) => s.read(buf),
        }
    }
}

impl Write for Tls {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        match self {
            Tls::Client(s) => s.write(buf),
            Tls::Server(s) => s.write(buf),
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        match self {
            Tls::Client(s) => s.flush(),
            Tls::Server(s) => s.flush(),
        }
    }
}

pub struct Conn {
    tls: Tls,
    buf: FrameBuffer,
    last_rx: Instant,
    last_tx: Instant,
    peer: String,
    peer_role: PeerRole,
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut)
}

impl Conn {
    /// Connects to `addr`, verifies the server is `server_identity`, and
    /// announces our own identity and role.
    pub fn connect(
        addr: SocketAddr,
        creds: &Credentials,
        client_cfg: Arc<ClientConfig>,
        server_identity: &str,
        role: PeerRole,
    ) -> Result<Conn, ConnError> {
        let sock = TcpStream::connect_timeout(&addr, HANDSHAKE_TIMEOUT)?;
        sock.set_nodelay(true)?;
        sock.set_read_timeout(Some(HANDSHAKE_TIMEOUT))?;
        sock.set_write_timeout(Some(HANDSHAKE_TIMEOUT))?;
        let session = ClientConnection::new(client_cfg, tls::server_name(server_identity)?)?;
        let mut stream = StreamOwned::new(session, sock);
        while stream.conn.is_handshaking() {
            stream
                .conn
                .complete_io(&mut stream.sock)
                .map_err(|e| ConnError::Handshake(e.to_string()))?;
        }
        let mut conn = Conn {
            tls: Tls::Client(Box::new(stream)),
            buf: FrameBuffer::default(),
            last_rx: Instant::now(),
            last_tx: Instant::now(),
            peer: server_identity.to_owned(),
            peer_role: PeerRole::Server,
        };
        conn.send(&Frame::Hello {
            role: role as u8,
            identity: creds.identity.clone(),
        })?;
        match conn.recv(HANDSHAKE_TIMEOUT)? {
            Frame::Hello { role, .. } => {
                conn.peer_role = PeerRole::from_u8(role).unwrap_or(PeerRole::Server);
                Ok(conn)
            }
            Frame::Error { code, message } => Err(ConnError::Remote { code, message }),
            other => Err(ConnError::Handshake(format!("expected HELLO, got {}", other.name()))),
        }
    }

    /// Completes the server side of the handshake on an accepted socket and
    /// authenticates the identity the client announces.
    pub fn accept(
        sock: TcpStream,
        server_cfg: Arc<ServerConfig>,
        own_identity: &str,
        own_role: PeerRole,
    ) -> Result<Conn, ConnError> {
        sock.set_nodelay(true)?;
        sock.set_read_timeout(Some(HANDSHAKE_TIMEOUT))?;
        sock.set_write_timeout(Some(HANDSHAKE_TIMEOUT))?;
        let session = ServerConnection::new(server_cfg)?;
        let mut stream = StreamOwned::new(session, sock);
        while stream.conn.is_handshaking() {
            stream
                .conn
                .complete_io(&mut stream.sock)
                .map_err(|e| ConnError::Handshake(e.to_string()))?;
        }
        let peer_cert = stream
            .conn
            .peer_certificates()
            .and_then(|c| c.first())
            .cloned()
            .ok_or_else(|| ConnError::Handshake("client presented no certificate".into()))?;
        let mut conn = Conn {
            tls: Tls::Server(Box::new(stream)),
            buf: FrameBuffer::default(),
            last_rx: Instant::now(),
            last_tx: Instant::now(),
            peer: String::new(),
            peer_role: PeerRole::Publisher,
        };
        let (role, identity) = match conn.recv(HANDSHAKE_TIMEOUT)? {
            Frame::Hello { role, identity } => (role, identity),
            other => {
                return Err(ConnError::Handshake(format!(
                    "expected HELLO, got {}",
                    other.name()
                )))
            }
        };
        let Some(role) = PeerRole::from_u8(role) else {
            let _ = conn.send(&Frame::Error {
                code: error_code::BAD_FRAME,
                message: format!("unknown role {role}"),
            });
            return Err(ConnError::Handshake(format!("unknown role {role}")));
        };
        if let Err(e) = tls::verify_identity(&peer_cert, &identity) {
            let _ = conn.send(&Frame::Error {
                code: error_code::IDENTITY,
                message: e.to_string(),
            });
            return Err(e.into());
        }
        conn.peer = identity;
        conn.peer_role = role;
        conn.send(&Frame::Hello {
            role: own_role as u8,
            identity: own_identity.to_owned(),
        })?;
        debug!(peer = %conn.peer, ?role, "peer authenticated");
        Ok(conn)
    }

    pub fn peer(&self) -> &str {
        &self.peer
    }

    pub fn peer_role(&self) -> PeerRole {
        self.peer_role
    }

    pub fn send(&mut self, frame: &Frame) -> Result<(), ConnError> {
        self.tls.write_all(&frame.encode())?;
        self.tls.flush()?;
        self.last_tx = Instant::now();
        Ok(())
    }

    /// Waits up to `wait` for a frame; `Ok(None)` on timeout.
    pub fn poll(&mut self, wait: Duration) -> Result<Option<Frame>, ConnError> {
        if let Some(f) = self.buf.next_frame()? {
            self.last_rx = Instant::now();
            return Ok(Some(f));
        }
        self.tls
            .sock()
            .set_read_timeout(Some(wait.max(Duration::from_millis(1))))?;
        let mut chunk = [0u8; 16 * 1024];
        match self.tls.read(&mut chunk) {
            Ok(0) => Err(ConnError::Closed),
            Ok(n) => {
                self.buf.extend(&chunk[..n]);
                let f = self.buf.next_frame()?;
                if f.is_some() {
                    self.last_rx = Instant::now();
                }
                Ok(f)
            }
            Err(e) if is_timeout(&e) => Ok(None),
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Err(ConnError::Closed),
            Err(e) => Err(e.into()),
        }
    }

    /// Blocks until a non-heartbeat frame arrives or `timeout` passes.
    pub fn recv(&mut self, timeout: Duration) -> Result<Frame, ConnError> {
        let deadline = Instant::now() + timeout;
        loop {
            let now = Instant::now();
            if now >= deadline {
                return Err(ConnError::Io(io::Error::new(
                    io::ErrorKind::TimedOut,
                    "timed out waiting for frame",
                )));
            }
            match self.poll(deadline - now)? {
                Some(Frame::Heartbeat) => continue,
                Some(f) => return Ok(f),
                None => continue,
            }
        }
    }

    /// Sends a heartbeat when one is due and fails if the peer has gone quiet.
    pub fn maintain(&mut self) -> Result<(), ConnError> {
        if self.last_tx.elapsed() >= HEARTBEAT_INTERVAL {
            self.send(&Frame::Heartbeat)?;
        }
        if self.last_rx.elapsed() > HEARTBEAT_INTERVAL * MISSED_HEARTBEATS {
            return Err(ConnError::PeerDead);
        }
        Ok(())
    }

    pub fn shutdown(&mut self) {
        let _ = self.tls.sock().shutdown(std::net::Shutdown::Both);
    }
}
