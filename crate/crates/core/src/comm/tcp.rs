//! TCP transport with a full mesh of connections.
//!
//! Every rank listens on its own address. During rendezvous a rank dials all
//! higher ranks and accepts one connection from each lower rank; the dialing
//! side announces itself with a barrier frame carrying `[world_size]`. Each
//! connection gets a reader thread that decodes frames into a channel, so
//! sends never wait on the peer draining its socket.

use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use super::frame::{Frame, MsgType};
use super::transport::{Transport, DEFAULT_RECV_TIMEOUT};
use crate::error::{Error, Result};

const HELLO_TAG: u32 = u32::MAX;
const RETRY_INTERVAL: Duration = Duration::from_millis(20);
const CONNECT_TIMEOUT: Duration = Duration::from_millis(500);

struct Peer {
    writer: TcpStream,
    inbox: Receiver<Result<Frame>>,
}

pub struct TcpTransport {
    rank: usize,
    world: usize,
    peers: Vec<Option<Peer>>,
    addrs: Vec<SocketAddr>,
    timeout: Duration,
}

/// Parses a host file: one `host:port` per line, line index = rank. Blank
/// lines and `#` comments are skipped.
pub fn parse_hostfile(text: &str) -> Result<Vec<SocketAddr>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.to_socket_addrs()
                .map_err(|e| Error::InvalidArgument(format!("bad host entry {l:?}: {e}")))?
                .next()
                .ok_or_else(|| Error::InvalidArgument(format!("host entry {l:?} did not resolve")))
        })
        .collect()
}

impl std::fmt::Debug for TcpTransport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TcpTransport")
            .field("rank", &self.rank)
            .field("addrs", &self.addrs)
            .finish()
    }
}

impl TcpTransport {
    /// Binds `addrs[rank]` and completes the rendezvous.
    pub fn connect(rank: usize, addrs: &[SocketAddr], timeout: Duration) -> Result<Self> {
        let addr = *addrs.get(rank).ok_or_else(|| {
            Error::InvalidArgument(format!("rank {rank} has no entry among {} hosts", addrs.len()))
        })?;
        let listener = TcpListener::bind(addr)
            .map_err(|e| Error::Transport(format!("rank {rank} cannot listen on {addr}: {e}")))?;
        Self::from_listener(rank, listener, addrs, timeout)
    }

    /// Rendezvous over an already-bound listener (lets callers bind port 0
    /// first and publish the resolved addresses).
    pub fn from_listener(
        rank: usize,
        listener: TcpListener,
        addrs: &[SocketAddr],
        timeout: Duration,
    ) -> Result<Self> {
        let world = addrs.len();
        if rank >= world {
            return Err(Error::InvalidArgument(format!("rank {rank} outside world of {world}")));
        }
        let deadline = Instant::now() + timeout;
        let mut streams: Vec<Option<TcpStream>> = (0..world).map(|_| None).collect();

        // Accept from lower ranks on a helper thread while dialing higher ones.
        let expected_lower = rank;
        let acceptor = thread::spawn(move || accept_lower(listener, rank, world, expected_lower, deadline));

        for (peer, &peer_addr) in addrs.iter().enumerate().skip(rank + 1) {
            let stream = dial(peer, peer_addr, deadline)?;
            let mut s = stream.try_clone()?;
            Frame::with_u64s(MsgType::Barrier, rank as u32, HELLO_TAG, &[world as u64]).write_to(&mut s)?;
            streams[peer] = Some(stream);
        }

        let accepted = acceptor
            .join()
            .map_err(|_| Error::Transport("rendezvous acceptor panicked".into()))??;
        for (peer, stream) in accepted {
            streams[peer] = Some(stream);
        }

        let mut peers = Vec::with_capacity(world);
        for (peer, stream) in streams.into_iter().enumerate() {
            peers.push(match stream {
                None => None,
                Some(stream) => {
                    stream.set_nodelay(true)?;
                    let mut reader = stream.try_clone()?;
                    let (tx, rx) = channel();
                    thread::Builder::new()
                        .name(format!("fmoe-r{rank}-from-{peer}"))
                        .spawn(move || loop {
                            match Frame::read_from(&mut reader) {
                                Ok(Some(f)) => {
                                    if tx.send(Ok(f)).is_err() {
                                        break;
                                    }
                                }
                                Ok(None) => break,
                                Err(e) => {
                                    let _ = tx.send(Err(e));
                                    break;
                                }
                            }
                        })?;
                    Some(Peer {
                        writer: stream,
                        inbox: rx,
                    })
                }
            });
        }
        Ok(TcpTransport {
            rank,
            world,
            peers,
            addrs: addrs.to_vec(),
            timeout: DEFAULT_RECV_TIMEOUT,
        })
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    fn peer(&mut self, peer: usize) -> Result<&mut Peer> {
        let (rank, world) = (self.rank, self.world);
        self.peers
            .get_mut(peer)
            .and_then(Option::as_mut)
            .ok_or_else(|| Error::InvalidArgument(format!("rank {rank} cannot address peer {peer} in a world of {world}")))
    }
}

fn dial(peer: usize, addr: SocketAddr, deadline: Instant) -> Result<TcpStream> {
    loop {
        match TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT) {
            Ok(s) => return Ok(s),
            Err(e) => {
                if Instant::now() >= deadline {
                    return Err(Error::Transport(format!(
                        "rank {peer} at {addr} unreachable: {e}"
                    )));
                }
                thread::sleep(RETRY_INTERVAL);
            }
        }
    }
}

fn accept_lower(
    listener: TcpListener,
    rank: usize,
    world: usize,
    expected: usize,
    deadline: Instant,
) -> Result<Vec<(usize, TcpStream)>> {
    listener.set_nonblocking(true)?;
    let mut got: Vec<(usize, TcpStream)> = Vec::with_capacity(expected);
    while got.len() < expected {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                let remaining = deadline.saturating_duration_since(Instant::now());
                stream.set_read_timeout(Some(remaining.max(Duration::from_millis(100))))?;
                let mut s = stream.try_clone()?;
                let hello = Frame::read_from(&mut s)?
                    .ok_or_else(|| Error::Protocol("peer closed during rendezvous".into()))?;
                stream.set_read_timeout(None)?;
                let peer = hello.src_rank as usize;
                if hello.msg_type != MsgType::Barrier || hello.tag != HELLO_TAG {
                    return Err(Error::Protocol(format!("unexpected rendezvous frame from rank {peer}")));
                }
                if hello.payload_u64s()? != [world as u64] {
                    return Err(Error::Protocol(format!(
                        "rank {peer} disagrees on the world size (ours is {world})"
                    )));
                }
                if peer >= rank || got.iter().any(|(p, _)| *p == peer) {
                    return Err(Error::Protocol(format!("unexpected connection from rank {peer}")));
                }
                got.push((peer, stream));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    let missing: Vec<usize> = (0..rank).filter(|p| got.iter().all(|(q, _)| q != p)).collect();
                    return Err(Error::Transport(format!(
                        "rank {rank} never heard from rank(s) {missing:?}"
                    )));
                }
                thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(got)
}

impl Transport for TcpTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn world_size(&self) -> usize {
        self.world
    }

    fn send(&mut self, peer: usize, frame: Frame) -> Result<()> {
        let addr = self.addrs[peer.min(self.world - 1)];
        let p = self.peer(peer)?;
        frame
            .write_to(&mut p.writer)
            .map_err(|e| Error::Transport(format!("send to rank {peer} at {addr} failed: {e}")))
    }

    fn recv(&mut self, peer: usize) -> Result<Frame> {
        let timeout = self.timeout;
        let p = self.peer(peer)?;
        match p.inbox.recv_timeout(timeout) {
            Ok(r) => r,
            Err(RecvTimeoutError::Timeout) => Err(Error::Transport(format!(
                "timed out after {timeout:?} waiting for rank {peer}"
            ))),
            Err(RecvTimeoutError::Disconnected) => {
                Err(Error::Transport(format!("connection to rank {peer} closed")))
            }
        }
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        for p in self.peers.iter().flatten() {
            let _ = p.writer.shutdown(std::net::Shutdown::Both);
        }
    }
}

/// Binds `world` listeners on loopback port 0 and connects them, one thread
/// per rank. Returned endpoints are indexed by rank.
pub fn loopback_world(world: usize, timeout: Duration) -> Result<Vec<TcpTransport>> {
    let listeners: Vec<TcpListener> = (0..world)
        .map(|_| TcpListener::bind("127.0.0.1:0"))
        .collect::<std::io::Result<_>>()?;
    let addrs: Vec<SocketAddr> = listeners
        .iter()
        .map(TcpListener::local_addr)
        .collect::<std::io::Result<_>>()?;
    let handles: Vec<_> = listeners
        .into_iter()
        .enumerate()
        .map(|(rank, l)| {
            let addrs = addrs.clone();
            thread::spawn(move || TcpTransport::from_listener(rank, l, &addrs, timeout))
        })
        .collect();
    handles
        .into_iter()
        .map(|h| {
            h.join()
                .map_err(|_| Error::Transport("rendezvous thread panicked".into()))?
        })
        .collect()
}
