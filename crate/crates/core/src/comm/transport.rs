use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use super::frame::Frame;
use crate::error::{Error, Result};

/// Point-to-point frame delivery between the ranks of a fixed world.
///
/// Frames between an ordered pair of ranks arrive in send order. `send` must
/// not block on the receiver draining its side, so a collective can post all
/// of its sends before its receives. Self-sends are never issued.
pub trait Transport: Send {
    fn rank(&self) -> usize;
    fn world_size(&self) -> usize;
    fn send(&mut self, peer: usize, frame: Frame) -> Result<()>;
    fn recv(&mut self, peer: usize) -> Result<Frame>;
}

pub const DEFAULT_RECV_TIMEOUT: Duration = Duration::from_secs(120);

fn check_peer(rank: usize, world: usize, peer: usize) -> Result<()> {
    if peer >= world || peer == rank {
        return Err(Error::InvalidArgument(format!(
            "rank {rank} cannot address peer {peer} in a world of {world}"
        )));
    }
    Ok(())
}

/// Ranks as threads of one process, connected by unbounded channels.
pub struct InProcessTransport {
    rank: usize,
    world: usize,
    to_peer: Vec<Option<Sender<Frame>>>,
    from_peer: Vec<Option<Receiver<Frame>>>,
    timeout: Duration,
}

impl InProcessTransport {
    /// One connected endpoint per rank, index = rank.
    pub fn create_world(world: usize) -> Vec<InProcessTransport> {
        let mut senders: Vec<Vec<Option<Sender<Frame>>>> =
            (0..world).map(|_| (0..world).map(|_| None).collect()).collect();
        let mut receivers: Vec<Vec<Option<Receiver<Frame>>>> =
            (0..world).map(|_| (0..world).map(|_| None).collect()).collect();
        for src in 0..world {
            for dst in 0..world {
                if src != dst {
                    let (tx, rx) = channel();
                    senders[src][dst] = Some(tx);
                    receivers[dst][src] = Some(rx);
                }
            }
        }
        senders
            .into_iter()
            .zip(receivers)
            .enumerate()
            .map(|(rank, (to_peer, from_peer))| InProcessTransport {
                rank,
                world,
                to_peer,
                from_peer,
                timeout: DEFAULT_RECV_TIMEOUT,
            })
            .collect()
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }
}

impl Transport for InProcessTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn world_size(&self) -> usize {
        self.world
    }

    fn send(&mut self, peer: usize, frame: Frame) -> Result<()> {
        check_peer(self.rank, self.world, peer)?;
        self.to_peer[peer]
            .as_ref()
            .expect("channel to every other rank")
            .send(frame)
            .map_err(|_| Error::Transport(format!("rank {peer} has left the world")))
    }

    fn recv(&mut self, peer: usize) -> Result<Frame> {
        check_peer(self.rank, self.world, peer)?;
        let rx = self.from_peer[peer].as_ref().expect("channel from every other rank");
        rx.recv_timeout(self.timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => Error::Transport(format!(
                "timed out after {:?} waiting for rank {peer}",
                self.timeout
            )),
            RecvTimeoutError::Disconnected => {
                Error::Transport(format!("rank {peer} has left the world"))
            }
        })
    }
}
