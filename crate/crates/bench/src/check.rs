//! Cross-module invariant suite behind `fmoe check`.

use std::time::Instant;

use rand::Rng;

use fmoe::comm::frame::{Frame, MsgType};
use fmoe::comm::{run_world, TransportKind};
use fmoe::dispatch::{build_plan, scatter};
use fmoe::expert::{multi_expert_backward, multi_expert_forward, Execution, ExpertParams};
use fmoe::gate::gate_forward;
use fmoe::moe_layer::{backward, forward, naive_forward, Checkpoint, MoEConfig, MoELayerState};
use fmoe::param_sync::{sync_gradients, ParamTag, ProcessTopology, TaggedGrad};
use fmoe::{rng, IndexMatrix, Matrix};

use crate::train::ToyRun;

type Outcome = std::result::Result<String, String>;

#[derive(Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub outcome: Outcome,
    pub seconds: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.outcome.is_ok()
    }

    pub fn report_line(&self) -> String {
        match &self.outcome {
            Ok(detail) => format!("ok    {:<24} {detail} ({:.2}s)", self.name, self.seconds),
            Err(why) => format!("FAIL  {:<24} {why}", self.name),
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CheckOptions {
    pub seed: u64,
    /// Corrupt every dispatch plan, to prove the suite notices.
    pub inject_fault: bool,
}

fn ensure(cond: bool, why: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(why())
    }
}

fn core<T>(r: fmoe::Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn random_config<R: Rng>(r: &mut R, world: usize, seed: u64) -> MoEConfig {
    let n_e_local = r.gen_range(1..=(8 / world).max(1));
    let e_total = n_e_local * world;
    MoEConfig {
        n_b: r.gen_range(1..=64 / world),
        d_m: r.gen_range(1..=32),
        d_h: r.gen_range(1..=32),
        k: r.gen_range(1..=e_total.min(2)),
        n_e_local,
        world_size: world,
        seed,
    }
}

fn oracle_equivalence(opts: CheckOptions) -> Outcome {
    let mut r = rng::data_stream(opts.seed, 10);
    let mut worst = 0.0f64;
    let trials = 24;
    for trial in 0..trials {
        let world = [1, 2, 4][trial % 3];
        let c = random_config(&mut r, world, opts.seed + trial as u64);
        let single = core(MoELayerState::init(c.single_worker(), 0))?;
        let x = Matrix::random_uniform(&mut rng::data_stream(c.seed, 0), c.n_b * world, c.d_m, -1.0, 1.0);
        let expect = core(naive_forward(&x, &single))?;
        let parts = core(run_world(world, TransportKind::InProcess, |mut comm| {
            let mut state = MoELayerState::init(c, comm.rank())?;
            state.inject_fault = opts.inject_fault;
            let local = x.slice_rows(comm.rank() * c.n_b, (comm.rank() + 1) * c.n_b)?;
            let comm = if world == 1 { None } else { Some(&mut comm) };
            Ok(forward(&local, &state, comm)?.0)
        }))?;
        let y = core(Matrix::vstack(c.d_m, &parts))?;
        let err = core(y.max_abs_diff(&expect))?;
        worst = worst.max(err);
        ensure(err <= 1e-10, || format!("trial {trial} ({c:?}): max error {err:e} > 1e-10"))?;
    }
    Ok(format!("{trials} configs, max error {worst:.1e}"))
}

fn gradient_check(opts: CheckOptions) -> Outcome {
    let c = MoEConfig {
        n_b: 4,
        d_m: 3,
        d_h: 5,
        k: 2,
        n_e_local: 4,
        world_size: 1,
        seed: opts.seed,
    };
    let mut state = core(MoELayerState::init(c, 0))?;
    state.inject_fault = opts.inject_fault;
    state.gate.w_g = state.gate.w_g.scale(10.0);
    for e in &mut state.experts {
        e.w1 = e.w1.scale(5.0);
        e.w2 = e.w2.scale(5.0);
    }
    let x = Matrix::random_uniform(&mut rng::data_stream(opts.seed, 20), 4, 3, -1.0, 1.0);
    let coeff = Matrix::random_uniform(&mut rng::data_stream(opts.seed, 21), 4, 3, -1.0, 1.0);
    let (_, cache) = core(forward(&x, &state, None))?;
    let (d_x, grads) = core(backward(&coeff, &cache, &state, None))?;

    let h = 1e-6;
    let loss = |x: &Matrix, s: &MoELayerState| -> fmoe::Result<f64> { forward(x, s, None)?.0.dot(&coeff) };
    let mut worst = 0.0f64;
    let mut compare = |name: &str, analytic: &[f64], numeric: &[f64]| -> std::result::Result<(), String> {
        let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().chain(numeric).map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let rel = diff / scale;
        worst = worst.max(rel);
        ensure(rel <= 1e-4, || format!("{name}: relative error {rel:e} > 1e-4"))
    };

    let mut num = Vec::new();
    for i in 0..x.data().len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        num.push((core(loss(&xp, &state))? - core(loss(&xm, &state))?) / (2.0 * h));
    }
    compare("d_x", d_x.data(), &num)?;

    let mut num = Vec::new();
    for i in 0..state.gate.w_g.data().len() {
        let mut sp = state.clone();
        sp.gate.w_g.data_mut()[i] += h;
        let mut sm = state.clone();
        sm.gate.w_g.data_mut()[i] -= h;
        num.push((core(loss(&x, &sp))? - core(loss(&x, &sm))?) / (2.0 * h));
    }
    compare("d_w_g", grads.gate.data(), &num)?;

    for e in 0..4 {
        let mut num = Vec::new();
        for i in 0..state.experts[e].w1.data().len() {
            let mut sp = state.clone();
            sp.experts[e].w1.data_mut()[i] += h;
            let mut sm = state.clone();
            sm.experts[e].w1.data_mut()[i] -= h;
            num.push((core(loss(&x, &sp))? - core(loss(&x, &sm))?) / (2.0 * h));
        }
        compare(&format!("expert {e} d_w1"), grads.experts[e].w1.data(), &num)?;
    }
    Ok(format!("max relative error {worst:.1e}"))
}

fn random_topk<R: Rng>(r: &mut R, n_b: usize, k: usize, e: usize) -> IndexMatrix {
    let mut data = Vec::with_capacity(n_b * k);
    for _ in 0..n_b {
        let mut row: Vec<usize> = Vec::with_capacity(k);
        while row.len() < k {
            let c = r.gen_range(0..e);
            if !row.contains(&c) {
                row.push(c);
            }
        }
        data.extend(row);
    }
    IndexMatrix::from_vec(n_b, k, data).expect("n_b * k entries")
}

fn count_transpose(opts: CheckOptions) -> Outcome {
    let mut r = rng::data_stream(opts.seed, 30);
    let trials = 200;
    for trial in 0..trials {
        let world = r.gen_range(1..=4);
        let n_local = r.gen_range(1..=3);
        let e = world * n_local;
        let k = r.gen_range(1..=e.min(2));
        let n_b = r.gen_range(0..=40);
        let plans: Vec<_> = (0..world).map(|_| build_plan(&random_topk(&mut r, n_b, k, e), e)).collect::<fmoe::Result<_>>().map_err(|e| e.to_string())?;
        for p in &plans {
            let total: usize = p.counts().iter().sum();
            ensure(total == n_b * k, || format!("trial {trial}: counts sum to {total}, expected {}", n_b * k))?;
        }
        let exchanged = core(run_world(world, TransportKind::InProcess, |mut comm| {
            comm.exchange_counts(plans[comm.rank()].counts())
        }))?;
        for (w, ex) in exchanged.iter().enumerate() {
            for (src, p) in plans.iter().enumerate() {
                for j in 0..n_local {
                    let (got, want) = (ex.recv_count(src, j), p.counts()[w * n_local + j]);
                    ensure(got == want, || {
                        format!("trial {trial}: worker {w} got {got} rows of expert {j} from {src}, sender planned {want}")
                    })?;
                }
            }
        }
    }
    Ok(format!("{trials} random assignments"))
}

fn scatter_layout(opts: CheckOptions) -> Outcome {
    let mut r = rng::data_stream(opts.seed, 40);
    for trial in 0..50 {
        let (n_b, e, d) = (r.gen_range(1..=32), r.gen_range(1..=8), r.gen_range(1..=6));
        let k = r.gen_range(1..=e.min(2));
        let x = Matrix::random_uniform(&mut r, n_b, d, -1.0, 1.0);
        let idx = random_topk(&mut r, n_b, k, e);
        let mut plan = core(build_plan(&idx, e))?;
        if opts.inject_fault {
            plan.inject_fault();
        }
        let xs = core(scatter(&x, &plan))?;
        for expert in 0..e {
            for pos in plan.blocks().range(expert) {
                let (src, slot) = (plan.expanded_src_row()[pos], plan.expanded_slot()[pos]);
                ensure(slot < k && idx.get(src, slot) == expert, || {
                    format!("trial {trial}: position {pos} in block {expert} came from ({src}, {slot})")
                })?;
                ensure(xs.row(pos) == x.row(src), || format!("trial {trial}: row {pos} is not a copy of sample {src}"))?;
            }
        }
    }
    Ok("50 plans".into())
}

fn all_to_all_round_trip(opts: CheckOptions) -> Outcome {
    for kind in [TransportKind::InProcess, TransportKind::TcpLoopback] {
        for world in [1, 2, 3, 4] {
            let ok = core(run_world(world, kind, |mut comm| {
                let mut r = rng::data_stream(opts.seed, 50 + comm.rank() as u64);
                let counts: Vec<usize> = (0..2 * world).map(|_| r.gen_range(0..6)).collect();
                let x = Matrix::random_uniform(&mut r, counts.iter().sum(), 5, -1.0, 1.0);
                let plan = comm.exchange_counts(&counts)?;
                let there = comm.all_to_all_rows(&x, &plan)?;
                Ok(comm.all_to_all_rows_reverse(&there, &plan)?.bit_eq(&x))
            }))?;
            ensure(ok.iter().all(|&b| b), || format!("{kind:?} world {world}: rows changed"))?;
        }
    }
    Ok("in-process and tcp, worlds 1-4, bitwise".into())
}

fn frame_round_trip(opts: CheckOptions) -> Outcome {
    let mut r = rng::data_stream(opts.seed, 60);
    for i in 0..100u32 {
        let values: Vec<f64> = (0..r.gen_range(0..32)).map(|_| r.gen_range(-1e6..1e6)).collect();
        let f = Frame::with_f64s(MsgType::Data, i, i.wrapping_mul(7), &values);
        let bytes = f.encode();
        let (back, used) = core(Frame::decode(&bytes))?;
        ensure(used == bytes.len() && back == f && back.encode() == bytes, || format!("frame {i} changed"))?;
    }
    Ok("100 frames".into())
}

fn checkpoint_round_trip(opts: CheckOptions) -> Outcome {
    let c = MoEConfig {
        n_b: 8,
        d_m: 6,
        d_h: 10,
        k: 2,
        n_e_local: 3,
        world_size: 1,
        seed: opts.seed,
    };
    let ckpt = core(Checkpoint::from_state(&core(MoELayerState::init(c, 0))?))?;
    let mut bytes = Vec::new();
    core(ckpt.write_to(&mut bytes))?;
    let back = core(Checkpoint::read_from(&mut bytes.as_slice()))?;
    ensure(back == ckpt, || "checkpoint changed on reload".into())?;
    Ok(format!("{} bytes", bytes.len()))
}

fn parallel_determinism(opts: CheckOptions) -> Outcome {
    let mut r = rng::data_stream(opts.seed, 70);
    for trial in 0..20 {
        let n_e = r.gen_range(1..=6);
        let (d_m, d_h) = (r.gen_range(1..=16), r.gen_range(1..=16));
        let experts: Vec<ExpertParams> = (0..n_e).map(|_| ExpertParams::init(&mut r, d_m, d_h)).collect();
        let counts: Vec<usize> = (0..n_e).map(|_| r.gen_range(0..20)).collect();
        let layout = fmoe::dispatch::BlockLayout::from_counts(counts);
        let xs = Matrix::random_uniform(&mut r, layout.total(), d_m, -1.0, 1.0);
        let (ys, cs) = core(multi_expert_forward(&xs, &layout, &experts, Execution::Sequential))?;
        let (yc, cc) = core(multi_expert_forward(&xs, &layout, &experts, Execution::Concurrent))?;
        let (ds, gs) = core(multi_expert_backward(&ys, &cs, &experts, Execution::Sequential))?;
        let (dc, gc) = core(multi_expert_backward(&yc, &cc, &experts, Execution::Concurrent))?;
        let same = ys.bit_eq(&yc) && ds.bit_eq(&dc) && gs.iter().zip(&gc).all(|(a, b)| a.bit_eq(b));
        ensure(same, || format!("trial {trial}: concurrent result differs"))?;
    }
    Ok("20 runs, bitwise".into())
}

fn sync_tags(opts: CheckOptions) -> Outcome {
    let input = |rank: usize, which: u64| Matrix::random_uniform(&mut rng::data_stream(opts.seed, 80 + 10 * rank as u64 + which), 3, 4, -1.0, 1.0);
    let out = core(run_world(4, TransportKind::InProcess, |mut comm| {
        let rank = comm.rank();
        let (mut w, mut dp, mut own) = (input(rank, 0), input(rank, 1), input(rank, 2));
        let topo = ProcessTopology::new(4, 2)?;
        sync_gradients(
            &mut [
                TaggedGrad::new("w", ParamTag::World, &mut w),
                TaggedGrad::new("dp", ParamTag::DataParallel, &mut dp),
                TaggedGrad::new("own", ParamTag::NoSync, &mut own),
            ],
            &topo,
            &mut comm,
        )?;
        Ok((w, dp, own))
    }))?;
    for (rank, (w, dp, own)) in out.iter().enumerate() {
        ensure(w.bit_eq(&out[0].0), || format!("world-tagged grad differs on rank {rank}"))?;
        ensure(own.bit_eq(&input(rank, 2)), || format!("unsynced grad changed on rank {rank}"))?;
        let partner = (rank + 2) % 4;
        let mut mean = input(rank.min(partner), 1);
        core(mean.add_assign(&input(rank.max(partner), 1)))?;
        let expect = core(Matrix::from_vec(3, 4, mean.data().iter().map(|v| v / 2.0).collect()))?;
        ensure(dp.bit_eq(&expect), || format!("data-parallel grad on rank {rank} is not the pair mean"))?;
    }
    Ok("world 4, model-parallel groups of 2".into())
}

fn distributed_training(opts: CheckOptions) -> Outcome {
    let base = ToyRun {
        n_b: 32,
        d_m: 8,
        d_h: 16,
        n_e: 4,
        steps: 5,
        seed: opts.seed,
        ..ToyRun::default()
    };
    let reference = base.run_local(TransportKind::InProcess).map_err(|e| e.to_string())?;
    for kind in [TransportKind::InProcess, TransportKind::TcpLoopback] {
        let run = ToyRun { world: 2, ..base.clone() };
        let losses = run.run_local(kind).map_err(|e| e.to_string())?;
        let worst = losses.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(worst <= 1e-8, || format!("{kind:?}: world 2 loss deviates by {worst:e}"))?;
    }
    Ok("world 2 matches world 1 over 5 steps".into())
}

fn gate_selection(opts: CheckOptions) -> Outcome {
    let mut r = rng::data_stream(opts.seed, 90);
    let x = Matrix::random_uniform(&mut r, 16, 5, -1.0, 1.0);
    let w = Matrix::random_uniform(&mut r, 5, 6, -2.0, 2.0);
    let g = core(gate_forward(&x, &fmoe::gate::GateParams::new(w), 3))?;
    for i in 0..16 {
        let row = g.scores.row(i);
        let sum: f64 = row.iter().sum();
        ensure((sum - 1.0).abs() < 1e-12, || format!("row {i} scores sum to {sum}"))?;
        let mut sorted = row.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        for (j, &best) in sorted.iter().take(3).enumerate() {
            ensure(g.topk_scores.get(i, j) == best, || format!("row {i} slot {j} is not the {j}-th best score"))?;
        }
    }
    Ok("16 rows".into())
}

type CheckFn = fn(CheckOptions) -> Outcome;

const CHECKS: [(&str, CheckFn); 11] = [
    ("gate-selection", gate_selection),
    ("scatter-layout", scatter_layout),
    ("count-transpose", count_transpose),
    ("all-to-all-round-trip", all_to_all_round_trip),
    ("frame-round-trip", frame_round_trip),
    ("checkpoint-round-trip", checkpoint_round_trip),
    ("oracle-equivalence", oracle_equivalence),
    ("gradient-check", gradient_check),
    ("parallel-determinism", parallel_determinism),
    ("sync-tags", sync_tags),
    ("distributed-training", distributed_training),
];

pub fn run_checks(opts: CheckOptions) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|&(name, f)| {
            let t = Instant::now();
            let outcome = f(opts);
            CheckResult {
                name,
                outcome,
                seconds: t.elapsed().as_secs_f64(),
            }
        })
        .collect()
}
