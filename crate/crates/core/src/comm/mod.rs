//! Collectives for expert parallelism over a [`Transport`].
//!
//! Global expert `e` lives on worker `e / n_local` in local slot
//! `e % n_local`. An exchange happens in two phases: workers first trade
//! per-expert row counts ([`Communicator::exchange_counts`]), which sizes every
//! receive buffer, then move the rows themselves
//! ([`Communicator::all_to_all_rows`]). The resulting [`ExchangePlan`] is
//! reused unchanged for the reverse routing of expert outputs and for both
//! directions of the backward pass.
//!
//! Every collective is SPMD: all ranks call the same collectives in the same
//! order. Each call stamps its frames with the next sequence number, so a
//! rank that diverges is reported as a protocol error instead of silently
//! mixing data from different phases.

pub mod frame;
pub mod tcp;
pub mod transport;

use std::hash::{Hash, Hasher};

use crate::dispatch::BlockLayout;
use crate::error::{Error, Result};
use crate::tensor::Matrix;
use frame::{Frame, MsgType};
pub use tcp::{loopback_world, parse_hostfile, TcpTransport};
pub use transport::{InProcessTransport, Transport};

/// Row counts of one exchange, as seen from one worker.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExchangePlan {
    rank: usize,
    world: usize,
    n_local: usize,
    /// `[dest * n_local + local_expert]`: rows this worker sends.
    send_counts: Vec<usize>,
    /// `[src * n_local + local_expert]`: rows this worker receives.
    recv_counts: Vec<usize>,
}

impl ExchangePlan {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn world_size(&self) -> usize {
        self.world
    }

    pub fn local_experts(&self) -> usize {
        self.n_local
    }

    pub fn send_counts(&self) -> &[usize] {
        &self.send_counts
    }

    pub fn recv_counts(&self) -> &[usize] {
        &self.recv_counts
    }

    pub fn send_count(&self, dest: usize, local_expert: usize) -> usize {
        self.send_counts[dest * self.n_local + local_expert]
    }

    pub fn recv_count(&self, src: usize, local_expert: usize) -> usize {
        self.recv_counts[src * self.n_local + local_expert]
    }

    pub fn send_total(&self) -> usize {
        self.send_counts.iter().sum()
    }

    pub fn recv_total(&self) -> usize {
        self.recv_counts.iter().sum()
    }

    pub fn rows_to(&self, dest: usize) -> usize {
        self.send_counts[dest * self.n_local..(dest + 1) * self.n_local].iter().sum()
    }

    pub fn rows_from(&self, src: usize) -> usize {
        self.recv_counts[src * self.n_local..(src + 1) * self.n_local].iter().sum()
    }

    /// Blocks of the received matrix, one per local expert.
    pub fn expert_layout(&self) -> BlockLayout {
        BlockLayout::from_counts(
            (0..self.n_local)
                .map(|e| (0..self.world).map(|s| self.recv_count(s, e)).sum())
                .collect(),
        )
    }

    /// First row of `(src, local_expert)`'s rows in the received matrix,
    /// which is ordered by local expert, then source rank.
    fn recv_block_start(&self, layout: &BlockLayout, src: usize, local_expert: usize) -> usize {
        layout.offsets()[local_expert] + (0..src).map(|s| self.recv_count(s, local_expert)).sum::<usize>()
    }

    fn send_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        (0..self.world)
            .map(|d| {
                let start = acc;
                acc += self.rows_to(d);
                start
            })
            .collect()
    }
}

pub struct Communicator {
    transport: Box<dyn Transport>,
    seq: u32,
}

impl std::fmt::Debug for Communicator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Communicator")
            .field("rank", &self.rank())
            .field("world", &self.world_size())
            .field("seq", &self.seq)
            .finish()
    }
}

fn rows_payload(m: &Matrix, start: usize, end: usize) -> Vec<u8> {
    m.data()[start * m.cols()..end * m.cols()]
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect()
}

impl Communicator {
    pub fn new<T: Transport + 'static>(transport: T) -> Self {
        Communicator {
            transport: Box::new(transport),
            seq: 0,
        }
    }

    pub fn rank(&self) -> usize {
        self.transport.rank()
    }

    pub fn world_size(&self) -> usize {
        self.transport.world_size()
    }

    fn next_tag(&mut self) -> u32 {
        let t = self.seq;
        self.seq = self.seq.wrapping_add(1);
        t
    }

    fn send(&mut self, peer: usize, msg_type: MsgType, tag: u32, payload: Vec<u8>) -> Result<()> {
        let frame = Frame::new(msg_type, self.rank() as u32, tag, payload);
        self.transport.send(peer, frame)
    }

    fn recv(&mut self, peer: usize, msg_type: MsgType, tag: u32) -> Result<Frame> {
        let f = self.transport.recv(peer)?;
        if f.src_rank as usize != peer || f.msg_type != msg_type || f.tag != tag {
            return Err(Error::Protocol(format!(
                "rank {} expected {msg_type:?}#{tag} from rank {peer}, got {:?}#{} from rank {}",
                self.rank(),
                f.msg_type,
                f.tag,
                f.src_rank
            )));
        }
        Ok(f)
    }

    // Pairwise schedule: at step s, send to r+s and receive from r-s.
    fn peers_at(&self, step: usize) -> (usize, usize) {
        let (r, w) = (self.rank(), self.world_size());
        ((r + step) % w, (r + w - step) % w)
    }

    /// Rank 0 collects one value from everyone, and everyone learns whether
    /// all values were equal.
    fn gather_compare(&mut self, value: u64, msg_type: MsgType) -> Result<bool> {
        let tag = self.next_tag();
        let world = self.world_size();
        if world == 1 {
            return Ok(true);
        }
        if self.rank() == 0 {
            let mut same = true;
            for peer in 1..world {
                let v = self.recv(peer, msg_type, tag)?.payload_u64s()?;
                same &= v == [value];
            }
            for peer in 1..world {
                self.send(peer, msg_type, tag, (same as u64).to_le_bytes().to_vec())?;
            }
            Ok(same)
        } else {
            self.send(0, msg_type, tag, value.to_le_bytes().to_vec())?;
            let reply = self.recv(0, msg_type, tag)?.payload_u64s()?;
            Ok(reply == [1])
        }
    }

    pub fn barrier(&mut self) -> Result<()> {
        self.gather_compare(0, MsgType::Barrier).map(|_| ())
    }

    /// Fails on every rank unless all ranks pass the same `fingerprint`.
    pub fn agree(&mut self, fingerprint: u64) -> Result<()> {
        if self.gather_compare(fingerprint, MsgType::Barrier)? {
            Ok(())
        } else {
            Err(Error::Protocol(format!(
                "ranks disagree on collective arguments (rank {} fingerprint {fingerprint:#x})",
                self.rank()
            )))
        }
    }

    /// Hash helper for [`Communicator::agree`].
    pub fn fingerprint<H: Hash>(value: &H) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        value.hash(&mut h);
        h.finish()
    }

    /// First exchange phase: trades per-expert row counts.
    ///
    /// `local_counts[e]` is the number of rows this worker routes to global
    /// expert `e`; its length must be `world_size * n_local`.
    pub fn exchange_counts(&mut self, local_counts: &[usize]) -> Result<ExchangePlan> {
        let world = self.world_size();
        let rank = self.rank();
        if local_counts.is_empty() || !local_counts.len().is_multiple_of(world) {
            return Err(Error::InvalidArgument(format!(
                "{} expert counts cannot be split over {world} workers",
                local_counts.len()
            )));
        }
        let n_local = local_counts.len() / world;
        let tag = self.next_tag();
        let mut recv_counts = vec![0usize; world * n_local];
        recv_counts[rank * n_local..(rank + 1) * n_local]
            .copy_from_slice(&local_counts[rank * n_local..(rank + 1) * n_local]);
        for step in 1..world {
            let (to, from) = self.peers_at(step);
            let counts: Vec<u64> = local_counts[to * n_local..(to + 1) * n_local]
                .iter()
                .map(|&c| c as u64)
                .collect();
            self.transport
                .send(to, Frame::with_u64s(MsgType::Counts, rank as u32, tag, &counts))?;
            let got = self.recv(from, MsgType::Counts, tag)?.payload_u64s()?;
            if got.len() != n_local {
                return Err(Error::Protocol(format!(
                    "rank {from} reported {} local experts, expected {n_local}",
                    got.len()
                )));
            }
            for (dst, v) in recv_counts[from * n_local..(from + 1) * n_local].iter_mut().zip(got) {
                *dst = v as usize;
            }
        }
        Ok(ExchangePlan {
            rank,
            world,
            n_local,
            send_counts: local_counts.to_vec(),
            recv_counts,
        })
    }

    /// Second exchange phase: routes rows to the workers owning their experts.
    ///
    /// `xs` is grouped by destination worker, then destination local expert
    /// (the scatter order). The result is grouped by local expert, then
    /// source rank, then the source's order, so each local expert gets one
    /// contiguous block ([`ExchangePlan::expert_layout`]).
    pub fn all_to_all_rows(&mut self, xs: &Matrix, plan: &ExchangePlan) -> Result<Matrix> {
        self.check_plan(plan)?;
        if xs.rows() != plan.send_total() {
            return Err(Error::Protocol(format!(
                "{} rows to send, plan expects {}",
                xs.rows(),
                plan.send_total()
            )));
        }
        let d = xs.cols();
        let tag = self.next_tag();
        let layout = plan.expert_layout();
        let send_off = plan.send_offsets();
        let mut out = Matrix::zeros(plan.recv_total(), d);
        let n_local = plan.n_local;

        let place = |out: &mut Matrix, src: usize, values: &[f64]| {
            let mut cursor = 0;
            for e in 0..n_local {
                let rows = plan.recv_count(src, e);
                let start = plan.recv_block_start(&layout, src, e);
                out.data_mut()[start * d..(start + rows) * d]
                    .copy_from_slice(&values[cursor * d..(cursor + rows) * d]);
                cursor += rows;
            }
        };

        let me = self.rank();
        let own = &xs.data()[send_off[me] * d..(send_off[me] + plan.rows_to(me)) * d];
        place(&mut out, me, own);
        for step in 1..self.world_size() {
            let (to, from) = self.peers_at(step);
            let payload = rows_payload(xs, send_off[to], send_off[to] + plan.rows_to(to));
            self.send(to, MsgType::Data, tag, payload)?;
            let values = self.recv(from, MsgType::Data, tag)?.payload_f64s()?;
            if values.len() != plan.rows_from(from) * d {
                return Err(Error::Protocol(format!(
                    "rank {from} sent {} values, plan expects {} rows of {d}",
                    values.len(),
                    plan.rows_from(from)
                )));
            }
            place(&mut out, from, &values);
        }
        Ok(out)
    }

    /// Exact inverse routing of [`Communicator::all_to_all_rows`] with the
    /// same plan: rows return to their source worker in their original order.
    pub fn all_to_all_rows_reverse(&mut self, ys: &Matrix, plan: &ExchangePlan) -> Result<Matrix> {
        self.check_plan(plan)?;
        if ys.rows() != plan.recv_total() {
            return Err(Error::Protocol(format!(
                "{} rows to return, plan expects {}",
                ys.rows(),
                plan.recv_total()
            )));
        }
        let d = ys.cols();
        let tag = self.next_tag();
        let layout = plan.expert_layout();
        let send_off = plan.send_offsets();
        let n_local = plan.n_local;
        let collect_for = |src: usize| -> Vec<f64> {
            let mut v = Vec::with_capacity(plan.rows_from(src) * d);
            for e in 0..n_local {
                let start = plan.recv_block_start(&layout, src, e);
                v.extend_from_slice(&ys.data()[start * d..(start + plan.recv_count(src, e)) * d]);
            }
            v
        };
        let mut out = Matrix::zeros(plan.send_total(), d);
        let me = self.rank();
        let own = collect_for(me);
        out.data_mut()[send_off[me] * d..send_off[me] * d + own.len()].copy_from_slice(&own);
        for step in 1..self.world_size() {
            let (to, from) = self.peers_at(step);
            let payload = collect_for(to).iter().flat_map(|v| v.to_le_bytes()).collect();
            self.send(to, MsgType::Data, tag, payload)?;
            let values = self.recv(from, MsgType::Data, tag)?.payload_f64s()?;
            if values.len() != plan.rows_to(from) * d {
                return Err(Error::Protocol(format!(
                    "rank {from} returned {} values, plan expects {} rows of {d}",
                    values.len(),
                    plan.rows_to(from)
                )));
            }
            out.data_mut()[send_off[from] * d..send_off[from] * d + values.len()].copy_from_slice(&values);
        }
        Ok(out)
    }

    fn check_plan(&self, plan: &ExchangePlan) -> Result<()> {
        if plan.rank != self.rank() || plan.world != self.world_size() {
            return Err(Error::InvalidArgument(format!(
                "plan for rank {}/{} used on rank {}/{}",
                plan.rank,
                plan.world,
                self.rank(),
                self.world_size()
            )));
        }
        Ok(())
    }

    /// Elementwise sum over the ranks in `group`, delivered to every member.
    ///
    /// The lowest rank gathers, sums in ascending rank order and broadcasts,
    /// so all members hold bit-identical results. Members whose shapes differ
    /// all fail with a protocol error.
    pub fn allreduce_sum(&mut self, m: &Matrix, group: &[usize]) -> Result<Matrix> {
        let me = self.rank();
        let mut members = group.to_vec();
        members.sort_unstable();
        members.dedup();
        if members.len() != group.len() || !members.contains(&me) || members.iter().any(|&r| r >= self.world_size()) {
            return Err(Error::InvalidArgument(format!(
                "rank {me} cannot reduce over group {group:?}"
            )));
        }
        let tag = self.next_tag();
        if members.len() == 1 {
            return Ok(m.clone());
        }
        let root = members[0];
        let shape = [m.rows() as u64, m.cols() as u64];
        if me == root {
            let mut acc = m.clone();
            let mut consistent = true;
            for &peer in &members[1..] {
                let peer_shape = self.recv(peer, MsgType::Counts, tag)?.payload_u64s()?;
                let values = self.recv(peer, MsgType::AllReduce, tag)?.payload_f64s()?;
                if peer_shape != shape || values.len() != m.data().len() {
                    consistent = false;
                    continue;
                }
                for (a, v) in acc.data_mut().iter_mut().zip(&values) {
                    *a += v;
                }
            }
            // An inconsistent group gets an empty result frame, which every
            // member rejects.
            let reply: Vec<f64> = if consistent { acc.data().to_vec() } else { Vec::new() };
            for &peer in &members[1..] {
                self.transport
                    .send(peer, Frame::with_f64s(MsgType::AllReduce, me as u32, tag, &reply))?;
            }
            if !consistent {
                return Err(Error::Protocol(format!("allreduce group {members:?} disagrees on shape")));
            }
            Ok(acc)
        } else {
            self.transport
                .send(root, Frame::with_u64s(MsgType::Counts, me as u32, tag, &shape))?;
            self.transport
                .send(root, Frame::with_f64s(MsgType::AllReduce, me as u32, tag, m.data()))?;
            let values = self.recv(root, MsgType::AllReduce, tag)?.payload_f64s()?;
            if values.len() != m.data().len() || (values.is_empty() && !m.data().is_empty()) {
                return Err(Error::Protocol(format!("allreduce group {members:?} disagrees on shape")));
            }
            Matrix::from_vec(m.rows(), m.cols(), values)
        }
    }
}

/// Which transport [`run_world`] wires the ranks together with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransportKind {
    InProcess,
    /// Full TCP mesh over 127.0.0.1.
    TcpLoopback,
}

/// Runs `f` once per rank on its own thread, SPMD style, and returns the
/// per-rank results indexed by rank. The first error (lowest rank) wins.
pub fn run_world<T, F>(world: usize, kind: TransportKind, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(Communicator) -> Result<T> + Sync,
{
    let comms: Vec<Communicator> = match kind {
        TransportKind::InProcess => InProcessTransport::create_world(world)
            .into_iter()
            .map(Communicator::new)
            .collect(),
        TransportKind::TcpLoopback => loopback_world(world, std::time::Duration::from_secs(30))?
            .into_iter()
            .map(Communicator::new)
            .collect(),
    };
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = comms
            .into_iter()
            .map(|c| scope.spawn(move || f(c)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Transport("rank thread panicked".into()))))
            .collect()
    })
}
