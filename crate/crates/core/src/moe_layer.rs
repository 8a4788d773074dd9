//! The full MoE layer: gate, dispatch, optional cross-worker exchange,
//! batched experts, reverse exchange and the weighted combine.
//!
//! Global expert `e` lives on worker `e / n_e_local` in slot `e % n_e_local`.
//! Each worker owns a local batch; the gate runs locally on it and only the
//! expert inputs and outputs cross workers.

use std::io::{Read, Write};
use std::path::Path;

use crate::comm::{Communicator, ExchangePlan};
use crate::dispatch::{build_plan, gather_combine, gather_combine_backward, scatter, scatter_backward, DispatchPlan};
use crate::error::{Error, Result};
use crate::expert::{
    expert_backward, expert_forward, multi_expert_backward, multi_expert_forward, Execution, ExpertGrads,
    ExpertParams, ForwardCache, EXPERT_TENSOR_NAMES,
};
use crate::gate::{gate_backward, gate_forward, GateOutput, GateParams};
use crate::param_sync::{sgd_step, sync_gradients, ProcessTopology, TaggedGrad};
use crate::rng;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MoEConfig {
    /// Samples per worker.
    pub n_b: usize,
    pub d_m: usize,
    pub d_h: usize,
    pub k: usize,
    /// Experts hosted by each worker.
    pub n_e_local: usize,
    pub world_size: usize,
    pub seed: u64,
}

impl MoEConfig {
    pub fn e_total(&self) -> usize {
        self.n_e_local * self.world_size
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_b", self.n_b),
            ("d_m", self.d_m),
            ("d_h", self.d_h),
            ("n_e_local", self.n_e_local),
            ("world_size", self.world_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
        }
        if self.k == 0 || self.k > self.e_total() {
            return Err(Error::InvalidArgument(format!(
                "k = {} must lie in 1..={} (total experts)",
                self.k,
                self.e_total()
            )));
        }
        Ok(())
    }

    /// The one-worker configuration holding every expert and the
    /// concatenation of all workers' batches.
    pub fn single_worker(&self) -> MoEConfig {
        MoEConfig {
            n_b: self.n_b * self.world_size,
            n_e_local: self.e_total(),
            world_size: 1,
            ..*self
        }
    }

    /// Checkpoint header values, in field order with `E_total` before `seed`.
    fn fields(&self) -> [u64; 8] {
        [
            self.n_b as u64,
            self.d_m as u64,
            self.d_h as u64,
            self.k as u64,
            self.n_e_local as u64,
            self.world_size as u64,
            self.e_total() as u64,
            self.seed,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoELayerState {
    pub gate: GateParams,
    /// Local experts; slot `j` holds global expert `rank * n_e_local + j`.
    pub experts: Vec<ExpertParams>,
    pub config: MoEConfig,
    pub topology: ProcessTopology,
    pub rank: usize,
    pub execution: Execution,
    /// Test hook: corrupts one entry of every dispatch plan.
    #[doc(hidden)]
    pub inject_fault: bool,
}

impl MoELayerState {
    /// Seeded initialization. Every parameter draws from its own stream, so
    /// an expert's weights depend only on the seed and its global index.
    pub fn init(config: MoEConfig, rank: usize) -> Result<Self> {
        config.validate()?;
        let gate = GateParams::init(&mut rng::stream(config.seed, rng::GATE_STREAM), config.d_m, config.e_total());
        let experts = (0..config.n_e_local)
            .map(|j| {
                let e = rank * config.n_e_local + j;
                ExpertParams::init(&mut rng::expert_stream(config.seed, e), config.d_m, config.d_h)
            })
            .collect();
        Self::from_parts(config, rank, gate, experts)
    }

    pub fn from_parts(config: MoEConfig, rank: usize, gate: GateParams, experts: Vec<ExpertParams>) -> Result<Self> {
        config.validate()?;
        if rank >= config.world_size {
            return Err(Error::InvalidArgument(format!(
                "rank {rank} outside world of {}",
                config.world_size
            )));
        }
        if gate.w_g.shape() != (config.d_m, config.e_total()) {
            return Err(Error::shape(
                "MoELayerState",
                format!("gate {:?}, expected {:?}", gate.w_g.shape(), (config.d_m, config.e_total())),
            ));
        }
        if experts.len() != config.n_e_local {
            return Err(Error::shape(
                "MoELayerState",
                format!("{} local experts, expected {}", experts.len(), config.n_e_local),
            ));
        }
        if let Some(bad) = experts.iter().find(|e| (e.d_m(), e.d_h()) != (config.d_m, config.d_h)) {
            return Err(Error::shape(
                "MoELayerState",
                format!("expert is {}x{}, expected {}x{}", bad.d_m(), bad.d_h(), config.d_m, config.d_h),
            ));
        }
        Ok(MoELayerState {
            gate,
            experts,
            config,
            topology: ProcessTopology::expert_parallel(config.world_size)?,
            rank,
            execution: Execution::default(),
            inject_fault: false,
        })
    }

    pub fn global_expert(&self, local: usize) -> usize {
        self.rank * self.config.n_e_local + local
    }

    pub fn is_single_worker(&self) -> bool {
        self.config.world_size == 1
    }
}

/// Gradients of the layer parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub gate: Matrix,
    pub experts: Vec<ExpertGrads>,
}

impl LayerGrads {
    pub fn zeros_like(state: &MoELayerState) -> Self {
        LayerGrads {
            gate: Matrix::zeros(state.gate.w_g.rows(), state.gate.w_g.cols()),
            experts: state.experts.iter().map(ExpertGrads::zeros_like).collect(),
        }
    }

    /// Every tensor with its sync tag. Expert names use the local slot, which
    /// is the same on every rank.
    pub fn tagged(&mut self) -> Vec<TaggedGrad<'_>> {
        let mut out = vec![TaggedGrad::new("gate.w_g", GateParams::TAG, &mut self.gate)];
        for (j, g) in self.experts.iter_mut().enumerate() {
            for (name, m) in EXPERT_TENSOR_NAMES.iter().zip(g.tensors_mut()) {
                out.push(TaggedGrad::new(format!("expert{j}.{name}"), ExpertParams::TAG, m));
            }
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.gate.is_zero() && self.experts.iter().all(ExpertGrads::is_zero)
    }
}

/// Everything [`backward`] needs from the matching [`forward`].
#[derive(Clone, Debug)]
pub struct LayerCache {
    x: Matrix,
    gate: GateOutput,
    plan: DispatchPlan,
    exchange: Option<ExchangePlan>,
    expert_caches: Vec<ForwardCache>,
    /// Expert outputs back in scatter order, one row per (sample, slot).
    ys: Matrix,
}

impl LayerCache {
    pub fn gate_output(&self) -> &GateOutput {
        &self.gate
    }

    pub fn plan(&self) -> &DispatchPlan {
        &self.plan
    }

    pub fn exchange_plan(&self) -> Option<&ExchangePlan> {
        self.exchange.as_ref()
    }
}

fn check_comm(state: &MoELayerState, comm: &Option<&mut Communicator>) -> Result<()> {
    match comm {
        None if !state.is_single_worker() => Err(Error::InvalidArgument(format!(
            "a world of {} needs a communicator",
            state.config.world_size
        ))),
        Some(c) if c.world_size() != state.config.world_size || c.rank() != state.rank => {
            Err(Error::InvalidArgument(format!(
                "state for rank {}/{} used with communicator rank {}/{}",
                state.rank,
                state.config.world_size,
                c.rank(),
                c.world_size()
            )))
        }
        _ => Ok(()),
    }
}

fn check_input(op: &'static str, x: &Matrix, state: &MoELayerState) -> Result<()> {
    if x.cols() != state.config.d_m {
        return Err(Error::shape(
            op,
            format!("input has {} features, layer expects {}", x.cols(), state.config.d_m),
        ));
    }
    Ok(())
}

/// Batched forward over this worker's batch `x`. In a multi-worker world all
/// ranks call this collectively.
pub fn forward(x: &Matrix, state: &MoELayerState, comm: Option<&mut Communicator>) -> Result<(Matrix, LayerCache)> {
    check_comm(state, &comm)?;
    check_input("forward", x, state)?;
    let gate = gate_forward(x, &state.gate, state.config.k)?;
    let mut plan = build_plan(&gate.topk_indices, state.config.e_total())?;
    if state.inject_fault {
        plan.inject_fault();
    }
    let xs = scatter(x, &plan)?;

    let (ys, exchange, expert_caches) = match comm {
        None => {
            let (ys, caches) = multi_expert_forward(&xs, plan.blocks(), &state.experts, state.execution)?;
            (ys, None, caches)
        }
        Some(c) => {
            let ex = c.exchange_counts(plan.counts())?;
            let recv = c.all_to_all_rows(&xs, &ex)?;
            let (out, caches) = multi_expert_forward(&recv, &ex.expert_layout(), &state.experts, state.execution)?;
            let ys = c.all_to_all_rows_reverse(&out, &ex)?;
            (ys, Some(ex), caches)
        }
    };
    let y = gather_combine(&ys, &plan, &gate.topk_scores)?;
    Ok((
        y,
        LayerCache {
            x: x.clone(),
            gate,
            plan,
            exchange,
            expert_caches,
            ys,
        },
    ))
}

/// Gradient of [`forward`]. Returns `(d_x, grads)` where the gate gradient
/// covers this worker's samples only and each expert gradient covers every
/// sample routed to it from any worker.
pub fn backward(
    d_y: &Matrix,
    cache: &LayerCache,
    state: &MoELayerState,
    comm: Option<&mut Communicator>,
) -> Result<(Matrix, LayerGrads)> {
    check_comm(state, &comm)?;
    if d_y.shape() != (cache.x.rows(), state.config.d_m) {
        return Err(Error::shape(
            "backward",
            format!("upstream {:?}, forward output was {:?}", d_y.shape(), (cache.x.rows(), state.config.d_m)),
        ));
    }
    let (d_ys, d_topk) = gather_combine_backward(d_y, &cache.ys, &cache.plan, &cache.gate.topk_scores)?;
    let (d_xs, expert_grads) = match (comm, &cache.exchange) {
        (None, None) => multi_expert_backward(&d_ys, &cache.expert_caches, &state.experts, state.execution)?,
        (Some(c), Some(ex)) => {
            let d_out = c.all_to_all_rows(&d_ys, ex)?;
            let (d_recv, grads) = multi_expert_backward(&d_out, &cache.expert_caches, &state.experts, state.execution)?;
            (c.all_to_all_rows_reverse(&d_recv, ex)?, grads)
        }
        _ => {
            return Err(Error::InvalidArgument(
                "backward must use the same communicator mode as forward".into(),
            ))
        }
    };
    let mut d_x = scatter_backward(&d_xs, &cache.plan)?;
    let (d_w_g, d_x_gate) = gate_backward(&cache.x, &state.gate, &cache.gate, &d_topk)?;
    d_x.add_assign(&d_x_gate)?;
    Ok((
        d_x,
        LayerGrads {
            gate: d_w_g,
            experts: expert_grads,
        },
    ))
}

fn require_all_local(op: &'static str, state: &MoELayerState) -> Result<()> {
    if !state.is_single_worker() {
        return Err(Error::InvalidArgument(format!("{op} needs every expert on one worker")));
    }
    Ok(())
}

/// Reference per-sample loop: score the sample, pick its top-k experts and
/// sum their score-weighted outputs. No batching across samples.
pub fn naive_forward(x: &Matrix, state: &MoELayerState) -> Result<Matrix> {
    require_all_local("naive_forward", state)?;
    check_input("naive_forward", x, state)?;
    let mut y = Matrix::zeros(x.rows(), state.config.d_m);
    for i in 0..x.rows() {
        let xi = x.slice_rows(i, i + 1)?;
        let g = gate_forward(&xi, &state.gate, state.config.k)?;
        let acc = y.row_mut(i);
        for j in 0..state.config.k {
            let e = g.topk_indices.get(0, j);
            let w = g.topk_scores.get(0, j);
            let (out, _) = expert_forward(&xi, &state.experts[e])?;
            for (a, v) in acc.iter_mut().zip(out.data()) {
                *a += w * v;
            }
        }
    }
    Ok(y)
}

/// Per-sample forward and backward, the unbatched counterpart of
/// [`forward`] followed by [`backward`]. Returns `(y, d_x, grads)`.
pub fn naive_forward_backward(x: &Matrix, d_y: &Matrix, state: &MoELayerState) -> Result<(Matrix, Matrix, LayerGrads)> {
    require_all_local("naive_forward_backward", state)?;
    check_input("naive_forward_backward", x, state)?;
    if d_y.shape() != x.shape() {
        return Err(Error::shape(
            "naive_forward_backward",
            format!("upstream {:?}, input {:?}", d_y.shape(), x.shape()),
        ));
    }
    let k = state.config.k;
    let mut y = Matrix::zeros(x.rows(), state.config.d_m);
    let mut d_x = Matrix::zeros(x.rows(), state.config.d_m);
    let mut grads = LayerGrads::zeros_like(state);
    for i in 0..x.rows() {
        let xi = x.slice_rows(i, i + 1)?;
        let dyi = d_y.slice_rows(i, i + 1)?;
        let g = gate_forward(&xi, &state.gate, k)?;
        let mut d_topk = Matrix::zeros(1, k);
        let mut dxi = Matrix::zeros(1, state.config.d_m);
        for j in 0..k {
            let e = g.topk_indices.get(0, j);
            let w = g.topk_scores.get(0, j);
            let (out, cache) = expert_forward(&xi, &state.experts[e])?;
            for (a, v) in y.row_mut(i).iter_mut().zip(out.data()) {
                *a += w * v;
            }
            d_topk.set(0, j, dyi.dot(&out)?);
            let (dx_e, ge) = expert_backward(&dyi.scale(w), &cache, &state.experts[e])?;
            dxi.add_assign(&dx_e)?;
            for (acc, part) in grads.experts[e].tensors_mut().into_iter().zip(ge.tensors()) {
                acc.add_assign(part)?;
            }
        }
        let (dwg, dx_gate) = gate_backward(&xi, &state.gate, &g, &d_topk)?;
        grads.gate.add_assign(&dwg)?;
        dxi.add_assign(&dx_gate)?;
        d_x.row_mut(i).copy_from_slice(dxi.data());
    }
    Ok((y, d_x, grads))
}

/// One SGD step on the mean-squared error against `target`.
///
/// Each worker's loss is the mean over its own batch, so the world-averaged
/// gate gradient is the gradient of the mean over the global batch. Expert
/// gradients already sum contributions from every worker and are divided by
/// the world size to match. Returns the global mean loss before the update.
pub fn train_step(
    x: &Matrix,
    target: &Matrix,
    state: &mut MoELayerState,
    lr: f64,
    mut comm: Option<&mut Communicator>,
) -> Result<f64> {
    let (y, cache) = forward(x, state, comm.as_deref_mut())?;
    if target.shape() != y.shape() {
        return Err(Error::shape(
            "train_step",
            format!("target {:?}, output {:?}", target.shape(), y.shape()),
        ));
    }
    let diff = y.sub(target)?;
    let n = diff.data().len() as f64;
    let local_loss = diff.dot(&diff)? / n;
    let d_y = diff.scale(2.0 / n);
    let (_, mut grads) = backward(&d_y, &cache, state, comm.as_deref_mut())?;

    let world = state.config.world_size;
    let loss = match comm {
        None => local_loss,
        Some(c) => {
            if world > 1 {
                let inv = 1.0 / world as f64;
                for g in &mut grads.experts {
                    *g = g.scale(inv);
                }
            }
            let topology = state.topology;
            sync_gradients(&mut grads.tagged(), &topology, c)?;
            let all: Vec<usize> = (0..world).collect();
            c.allreduce_sum(&Matrix::filled(1, 1, local_loss), &all)?.get(0, 0) / world as f64
        }
    };

    sgd_step(&mut state.gate.w_g, &grads.gate, lr)?;
    for (p, g) in state.experts.iter_mut().zip(&grads.experts) {
        for (pm, gm) in p.tensors_mut().into_iter().zip(g.tensors()) {
            sgd_step(pm, gm, lr)?;
        }
    }
    Ok(loss)
}

/// Seeded synthetic regression data for worker `rank`: inputs and targets of
/// `n_b` rows each, the targets a fixed random linear map of the inputs.
/// Worker batches are disjoint slices of the batch the single-worker
/// configuration would see.
pub fn synthetic_task(config: &MoEConfig, rank: usize) -> Result<(Matrix, Matrix)> {
    let global = config.n_b * config.world_size;
    let mut r = rng::data_stream(config.seed, 0);
    let x = Matrix::random_uniform(&mut r, global, config.d_m, -1.0, 1.0);
    let bound = 1.0 / (config.d_m as f64).sqrt();
    let teacher = Matrix::random_uniform(&mut r, config.d_m, config.d_m, -bound, bound);
    let t = crate::tensor::matmul(&x, &teacher)?;
    let (a, b) = (rank * config.n_b, (rank + 1) * config.n_b);
    Ok((x.slice_rows(a, b)?, t.slice_rows(a, b)?))
}

pub const CHECKPOINT_MAGIC: [u8; 10] = *b"FMOE-CKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// The whole model: gate plus every expert in global-index order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: MoEConfig,
    pub gate: GateParams,
    pub experts: Vec<ExpertParams>,
}

fn write_matrix<W: Write>(w: &mut W, m: &Matrix) -> Result<()> {
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    w.write_all(&(m.cols() as u64).to_le_bytes())?;
    for v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

fn read_matrix<R: Read>(r: &mut R, expect: (usize, usize)) -> Result<Matrix> {
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    if (rows, cols) != expect {
        return Err(Error::Checkpoint(format!("tensor is {rows}x{cols}, expected {}x{}", expect.0, expect.1)));
    }
    let mut bytes = vec![0u8; rows * cols * 8];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Checkpoint(format!("truncated tensor data: {e}")))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

impl Checkpoint {
    /// Snapshot of a state that hosts every expert.
    pub fn from_state(state: &MoELayerState) -> Result<Self> {
        require_all_local("Checkpoint::from_state", state)?;
        Ok(Checkpoint {
            config: state.config,
            gate: state.gate.clone(),
            experts: state.experts.clone(),
        })
    }

    /// Assembles a checkpoint from every rank's state, given in rank order.
    pub fn from_shards(states: &[MoELayerState]) -> Result<Self> {
        let first = states
            .first()
            .ok_or_else(|| Error::InvalidArgument("no shards".into()))?;
        if states.len() != first.config.world_size
            || states.iter().enumerate().any(|(r, s)| s.rank != r || s.config != first.config)
        {
            return Err(Error::InvalidArgument("shards must be one state per rank, in rank order".into()));
        }
        Ok(Checkpoint {
            config: first.config,
            gate: first.gate.clone(),
            experts: states.iter().flat_map(|s| s.experts.iter().cloned()).collect(),
        })
    }

    /// The state of `rank`, holding its slice of the experts.
    pub fn shard(&self, rank: usize) -> Result<MoELayerState> {
        let n = self.config.n_e_local;
        let experts = self
            .experts
            .get(rank * n..(rank + 1) * n)
            .ok_or_else(|| Error::InvalidArgument(format!("no shard for rank {rank}")))?
            .to_vec();
        MoELayerState::from_parts(self.config, rank, self.gate.clone(), experts)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for f in self.config.fields() {
            w.write_all(&f.to_le_bytes())?;
        }
        write_matrix(w, &self.gate.w_g)?;
        for e in &self.experts {
            for m in e.tensors() {
                write_matrix(w, m)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 10];
        r.read_exact(&mut magic)
            .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut v = [0u8; 4];
        r.read_exact(&mut v)
            .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
        let version = u32::from_le_bytes(v);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut f = [0u64; 8];
        for slot in &mut f {
            *slot = read_u64(r)?;
        }
        let config = MoEConfig {
            n_b: f[0] as usize,
            d_m: f[1] as usize,
            d_h: f[2] as usize,
            k: f[3] as usize,
            n_e_local: f[4] as usize,
            world_size: f[5] as usize,
            seed: f[7],
        };
        config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
        if f[6] != config.e_total() as u64 {
            return Err(Error::Checkpoint(format!(
                "expert total {} disagrees with {} x {}",
                f[6], config.n_e_local, config.world_size
            )));
        }
        let (d_m, d_h) = (config.d_m, config.d_h);
        let gate = GateParams::new(read_matrix(r, (d_m, config.e_total()))?);
        let experts = (0..config.e_total())
            .map(|_| {
                ExpertParams::new(
                    read_matrix(r, (d_m, d_h))?,
                    read_matrix(r, (1, d_h))?,
                    read_matrix(r, (d_h, d_m))?,
                    read_matrix(r, (1, d_m))?,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Checkpoint { config, gate, experts })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }
}
