//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::time::{Duration, Instant};

use rand::Rng;

use fmoe::comm::frame::{Frame, MsgType};
use fmoe::comm::{run_world, Communicator, TransportKind};
use fmoe::dispatch::{build_plan, gather_combine, gather_combine_backward, scatter, scatter_backward, BlockLayout};
use fmoe::expert::{expert_backward, expert_forward, multi_expert_backward, multi_expert_forward, Execution, ExpertParams};
use fmoe::gate::{gate_backward, gate_forward, GateParams};
use fmoe::moe_layer::{backward, forward, naive_forward, synthetic_task, train_step, MoEConfig, MoELayerState};
use fmoe::param_sync::{sync_gradients, ParamTag, ProcessTopology, TaggedGrad};
use fmoe::{rng, IndexMatrix, Matrix};
use fmoe_bench::gemm::time_gemm;
use fmoe_bench::local::{time_case, LocalCase, Pass, Path};
use fmoe_bench::train::{smoothed, ToyRun};

const SEED: u64 = 2021;

const ORACLE_CONFIGS: usize = 120;
const ORACLE_TOL: f64 = 1e-10;
const ORACLE_BUDGET: Duration = Duration::from_secs(60);

const FD_STEP: f64 = 1e-6;
const FD_LAYER_INSTANCES: usize = 24;
const FD_LAYER_TOL: f64 = 1e-4;
const FD_MODULE_INSTANCES: usize = 10;
const FD_MODULE_TOL: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-6;

const DIST_FORWARD_TOL: f64 = 1e-10;
const DIST_STEPS: usize = 10;
const DIST_TRAJ_TOL: f64 = 1e-8;

const ASSIGNMENTS: usize = 1000;

const GEMM_SPEEDUP: f64 = 5.0;
const MOE_SPEEDUP: f64 = 3.0;

const DETERMINISM_RUNS: usize = 100;

const TOY_STEPS: usize = 50;
const TOY_DECAY: f64 = 0.9;
const TOY_FROM_STEP: usize = 5;
const TOY_WORLD_TOL: f64 = 1e-8;

const KINDS: [TransportKind; 2] = [TransportKind::InProcess, TransportKind::TcpLoopback];

type Outcome = Result<String, String>;

fn ensure(cond: bool, why: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(why())
    }
}

fn ok<T>(r: fmoe::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(REL_FLOOR)
}

/// Central differences of `f` with respect to every entry of `m`.
fn numeric_grad(m: &Matrix, mut f: impl FnMut(&Matrix) -> fmoe::Result<f64>) -> Result<Vec<f64>, String> {
    let mut out = Vec::with_capacity(m.data().len());
    for i in 0..m.data().len() {
        let mut p = m.clone();
        p.data_mut()[i] += FD_STEP;
        let fp = ok(f(&p))?;
        p.data_mut()[i] -= 2.0 * FD_STEP;
        let fm = ok(f(&p))?;
        out.push((fp - fm) / (2.0 * FD_STEP));
    }
    Ok(out)
}

/// Larger than default init so routing differs between samples.
fn spread(mut s: MoELayerState, gate: f64, experts: f64) -> MoELayerState {
    s.gate.w_g = s.gate.w_g.scale(gate);
    for e in &mut s.experts {
        for m in e.tensors_mut() {
            *m = m.scale(experts);
        }
    }
    s
}

fn local_rows(m: &Matrix, n_b: usize, rank: usize) -> fmoe::Result<Matrix> {
    m.slice_rows(rank * n_b, (rank + 1) * n_b)
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
    IndexMatrix::from_vec(n_b, k, data).unwrap()
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut r = rng::data_stream(SEED, 100);
    let mut worst = 0.0f64;
    for trial in 0..ORACLE_CONFIGS {
        let world = [1, 2, 4][trial % 3];
        let n_e_local = r.gen_range(1..=8 / world);
        let k = r.gen_range(1..=(n_e_local * world).min(2));
        let c = MoEConfig {
            n_b: r.gen_range(1..=64 / world),
            d_m: r.gen_range(1..=32),
            d_h: r.gen_range(1..=32),
            k,
            n_e_local,
            world_size: world,
            seed: SEED + trial as u64,
        };
        let gate_scale = if trial % 2 == 0 { 1.0 } else { 20.0 };
        let single = spread(ok(MoELayerState::init(c.single_worker(), 0))?, gate_scale, 3.0);
        let x = Matrix::random_uniform(&mut r, c.n_b * world, c.d_m, -1.0, 1.0);
        let expect = ok(naive_forward(&x, &single))?;
        let parts = ok(run_world(world, TransportKind::InProcess, |mut comm: Communicator| {
            let rank = comm.rank();
            let state = spread(MoELayerState::init(c, rank)?, gate_scale, 3.0);
            let comm = (world > 1).then_some(&mut comm);
            Ok(forward(&local_rows(&x, c.n_b, rank)?, &state, comm)?.0)
        }))?;
        let y = ok(Matrix::vstack(c.d_m, &parts))?;
        let err = ok(y.max_abs_diff(&expect))?;
        worst = worst.max(err);
        ensure(err <= ORACLE_TOL, || format!("config {trial} {c:?}: max error {err:e}"))?;
    }
    let took = start.elapsed();
    ensure(took < ORACLE_BUDGET, || format!("took {took:?}"))?;
    Ok(format!(
        "{ORACLE_CONFIGS} configs over worlds 1/2/4, max error {worst:.1e} <= {ORACLE_TOL:e}, {:.2}s",
        took.as_secs_f64()
    ))
}

fn layer_gradient_instance(trial: usize) -> Result<f64, String> {
    let mut r = rng::data_stream(SEED, 200 + trial as u64);
    let n_e = r.gen_range(1..=4);
    let c = MoEConfig {
        n_b: r.gen_range(1..=5),
        d_m: r.gen_range(1..=4),
        d_h: r.gen_range(1..=5),
        k: r.gen_range(1..=n_e.min(2)),
        n_e_local: n_e,
        world_size: 1,
        seed: SEED + trial as u64,
    };
    let state = spread(ok(MoELayerState::init(c, 0))?, 10.0, 5.0);
    let x = Matrix::random_uniform(&mut r, c.n_b, c.d_m, -1.0, 1.0);
    let coeff = Matrix::random_uniform(&mut r, c.n_b, c.d_m, -1.0, 1.0);
    let (_, cache) = ok(forward(&x, &state, None))?;
    let (d_x, grads) = ok(backward(&coeff, &cache, &state, None))?;
    let loss = |x: &Matrix, s: &MoELayerState| -> fmoe::Result<f64> { forward(x, s, None)?.0.dot(&coeff) };

    let mut worst = 0.0f64;
    let mut check = |what: String, analytic: &[f64], numeric: &[f64]| {
        let e = rel_err(analytic, numeric);
        worst = worst.max(e);
        ensure(e <= FD_LAYER_TOL, || format!("instance {trial} {c:?} {what}: relative error {e:e}"))
    };
    check("d_x".into(), d_x.data(), &numeric_grad(&x, |xp| loss(xp, &state))?)?;
    let num = numeric_grad(&state.gate.w_g, |w| {
        let mut s = state.clone();
        s.gate.w_g = w.clone();
        loss(&x, &s)
    })?;
    check("d_w_g".into(), grads.gate.data(), &num)?;
    for e in 0..n_e {
        for t in 0..4 {
            let num = numeric_grad(state.experts[e].tensors()[t], |m| {
                let mut s = state.clone();
                *s.experts[e].tensors_mut()[t] = m.clone();
                loss(&x, &s)
            })?;
            check(format!("expert {e} tensor {t}"), grads.experts[e].tensors()[t].data(), &num)?;
        }
    }
    Ok(worst)
}

fn gate_instance<R: Rng>(r: &mut R) -> Result<f64, String> {
    let (n_b, d_m, e) = (r.gen_range(1..=6), r.gen_range(1..=5), r.gen_range(1..=6));
    let k = r.gen_range(1..=e.min(2));
    let x = Matrix::random_uniform(r, n_b, d_m, -1.0, 1.0);
    let params = GateParams::new(Matrix::random_uniform(r, d_m, e, -2.0, 2.0));
    let coeff = Matrix::random_uniform(r, n_b, k, -1.0, 1.0);
    let out = ok(gate_forward(&x, &params, k))?;
    let (d_w, d_x) = ok(gate_backward(&x, &params, &out, &coeff))?;
    let f = |x: &Matrix, p: &GateParams| -> fmoe::Result<f64> { gate_forward(x, p, k)?.topk_scores.dot(&coeff) };
    let nw = numeric_grad(&params.w_g, |w| f(&x, &GateParams::new(w.clone())))?;
    let nx = numeric_grad(&x, |xp| f(xp, &params))?;
    Ok(rel_err(d_w.data(), &nw).max(rel_err(d_x.data(), &nx)))
}

fn expert_instance<R: Rng>(r: &mut R) -> Result<f64, String> {
    let (rows, d_m, d_h) = (r.gen_range(1..=6), r.gen_range(1..=5), r.gen_range(1..=6));
    let mut params = ExpertParams::init(r, d_m, d_h);
    for m in params.tensors_mut() {
        *m = m.scale(10.0);
    }
    let x = Matrix::random_uniform(r, rows, d_m, -1.0, 1.0);
    let coeff = Matrix::random_uniform(r, rows, d_m, -1.0, 1.0);
    let (_, cache) = ok(expert_forward(&x, &params))?;
    let (d_x, grads) = ok(expert_backward(&coeff, &cache, &params))?;
    let f = |x: &Matrix, p: &ExpertParams| -> fmoe::Result<f64> { expert_forward(x, p)?.0.dot(&coeff) };
    let mut worst = rel_err(d_x.data(), &numeric_grad(&x, |xp| f(xp, &params))?);
    for t in 0..4 {
        let num = numeric_grad(params.tensors()[t], |m| {
            let mut p = params.clone();
            *p.tensors_mut()[t] = m.clone();
            f(&x, &p)
        })?;
        worst = worst.max(rel_err(grads.tensors()[t].data(), &num));
    }
    Ok(worst)
}

fn dispatch_instance<R: Rng>(r: &mut R) -> Result<f64, String> {
    let (n_b, e, d) = (r.gen_range(1..=8), r.gen_range(1..=5), r.gen_range(1..=4));
    let k = r.gen_range(1..=e.min(2));
    let plan = ok(build_plan(&random_topk(r, n_b, k, e), e))?;
    let x = Matrix::random_uniform(r, n_b, d, -1.0, 1.0);
    let ys = Matrix::random_uniform(r, n_b * k, d, -1.0, 1.0);
    let scores = Matrix::random_uniform(r, n_b, k, 0.0, 1.0);
    let c_scatter = Matrix::random_uniform(r, n_b * k, d, -1.0, 1.0);
    let c_gather = Matrix::random_uniform(r, n_b, d, -1.0, 1.0);

    let d_x = ok(scatter_backward(&c_scatter, &plan))?;
    let nx = numeric_grad(&x, |xp| scatter(xp, &plan)?.dot(&c_scatter))?;
    let (d_ys, d_scores) = ok(gather_combine_backward(&c_gather, &ys, &plan, &scores))?;
    let nys = numeric_grad(&ys, |m| gather_combine(m, &plan, &scores)?.dot(&c_gather))?;
    let ns = numeric_grad(&scores, |s| gather_combine(&ys, &plan, s)?.dot(&c_gather))?;
    Ok(rel_err(d_x.data(), &nx)
        .max(rel_err(d_ys.data(), &nys))
        .max(rel_err(d_scores.data(), &ns)))
}

fn gradient_correctness() -> Outcome {
    let mut layer_worst = 0.0f64;
    for trial in 0..FD_LAYER_INSTANCES {
        layer_worst = layer_worst.max(layer_gradient_instance(trial)?);
    }
    let mut r = rng::data_stream(SEED, 300);
    let mut module_worst = [0.0f64; 3];
    for i in 0..FD_MODULE_INSTANCES {
        let errs = [gate_instance(&mut r)?, expert_instance(&mut r)?, dispatch_instance(&mut r)?];
        for ((name, e), w) in ["gate", "expert", "dispatch"].iter().zip(errs).zip(&mut module_worst) {
            ensure(e <= FD_MODULE_TOL, || format!("{name} instance {i}: relative error {e:e}"))?;
            *w = w.max(e);
        }
    }
    Ok(format!(
        "{FD_LAYER_INSTANCES} layers, worst {layer_worst:.1e} <= {FD_LAYER_TOL:e}; gate {:.1e}, expert {:.1e}, dispatch {:.1e} <= {FD_MODULE_TOL:e}",
        module_worst[0], module_worst[1], module_worst[2]
    ))
}

fn distributed_consistency() -> Outcome {
    let mut worst_fwd = 0.0f64;
    let mut worst_traj = 0.0f64;
    for kind in KINDS {
        for world in [2, 4] {
            let c = MoEConfig {
                n_b: 12,
                d_m: 10,
                d_h: 16,
                k: 2,
                n_e_local: 2,
                world_size: world,
                seed: SEED + world as u64,
            };
            let tag = format!("{kind:?} world {world}");
            let single = c.single_worker();
            let s_state = spread(ok(MoELayerState::init(single, 0))?, 10.0, 3.0);
            let x = Matrix::random_uniform(&mut rng::data_stream(c.seed, 1), single.n_b, c.d_m, -1.0, 1.0);
            let (y1, _) = ok(forward(&x, &s_state, None))?;
            let parts = ok(run_world(world, kind, |mut comm: Communicator| {
                let rank = comm.rank();
                let state = spread(MoELayerState::init(c, rank)?, 10.0, 3.0);
                Ok(forward(&local_rows(&x, c.n_b, rank)?, &state, Some(&mut comm))?.0)
            }))?;
            let err = ok(ok(Matrix::vstack(c.d_m, &parts))?.max_abs_diff(&y1))?;
            worst_fwd = worst_fwd.max(err);
            ensure(err <= DIST_FORWARD_TOL, || format!("{tag}: forward error {err:e}"))?;

            let lr = 0.05;
            let (gx, gt) = ok(synthetic_task(&single, 0))?;
            let mut s_state = ok(MoELayerState::init(single, 0))?;
            let reference = (0..DIST_STEPS)
                .map(|_| train_step(&gx, &gt, &mut s_state, lr, None))
                .collect::<fmoe::Result<Vec<f64>>>();
            let reference = ok(reference)?;
            let out = ok(run_world(world, kind, |mut comm: Communicator| {
                let rank = comm.rank();
                let (xl, tl) = synthetic_task(&c, rank)?;
                let mut state = MoELayerState::init(c, rank)?;
                let losses = (0..DIST_STEPS)
                    .map(|_| train_step(&xl, &tl, &mut state, lr, Some(&mut comm)))
                    .collect::<fmoe::Result<Vec<f64>>>()?;
                Ok((losses, state))
            }))?;
            for (rank, (losses, state)) in out.iter().enumerate() {
                for (step, (a, b)) in losses.iter().zip(&reference).enumerate() {
                    let e = (a - b).abs();
                    worst_traj = worst_traj.max(e);
                    ensure(e <= DIST_TRAJ_TOL, || format!("{tag} rank {rank} step {step}: loss off by {e:e}"))?;
                }
                let e = ok(state.gate.w_g.max_abs_diff(&s_state.gate.w_g))?;
                worst_traj = worst_traj.max(e);
                ensure(e <= DIST_TRAJ_TOL, || format!("{tag} rank {rank}: gate weights off by {e:e}"))?;
                for (j, ex) in state.experts.iter().enumerate() {
                    let reference = &s_state.experts[state.global_expert(j)];
                    for (a, b) in ex.tensors().iter().zip(reference.tensors()) {
                        let e = ok(a.max_abs_diff(b))?;
                        worst_traj = worst_traj.max(e);
                        ensure(e <= DIST_TRAJ_TOL, || format!("{tag} rank {rank} expert {j}: weights off by {e:e}"))?;
                    }
                }
            }
        }
    }
    Ok(format!(
        "worlds 2/4 over in-process and tcp: forward {worst_fwd:.1e} <= {DIST_FORWARD_TOL:e}, {DIST_STEPS}-step trajectory {worst_traj:.1e} <= {DIST_TRAJ_TOL:e}"
    ))
}

fn frames_over_socket(r: &mut impl Rng) -> Result<usize, String> {
    let specials = [0.0, -0.0, f64::MIN_POSITIVE / 4.0, f64::INFINITY, f64::NEG_INFINITY, f64::from_bits(0x7ff8_dead_beef_0001), f64::MAX];
    let mut frames: Vec<Frame> = vec![
        Frame::with_f64s(MsgType::Data, 0, 0, &specials),
        Frame::with_u64s(MsgType::Counts, 3, u32::MAX, &[0, 1, u64::MAX]),
        Frame::new(MsgType::Data, 1, 2, Vec::new()),
    ];
    for i in 0..200u32 {
        let values: Vec<f64> = (0..r.gen_range(0..300)).map(|_| f64::from_bits(r.gen())).collect();
        frames.push(Frame::with_f64s(MsgType::Data, i % 7, i, &values));
    }
    for f in &frames {
        let bytes = f.encode();
        let (back, used) = ok(Frame::decode(&bytes))?;
        ensure(used == bytes.len() && back.encode() == bytes, || "frame changed on decode".into())?;
    }

    let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let addr = listener.local_addr().map_err(|e| e.to_string())?;
    let sent: Vec<Vec<u8>> = frames.iter().map(Frame::encode).collect();
    let writer = std::thread::spawn(move || -> fmoe::Result<()> {
        let mut s = TcpStream::connect(addr)?;
        for f in &frames {
            f.write_to(&mut s)?;
        }
        s.flush()?;
        Ok(())
    });
    let (mut stream, _) = listener.accept().map_err(|e| e.to_string())?;
    let mut received = Vec::new();
    while let Some(f) = ok(Frame::read_from(&mut stream))? {
        received.push(f.encode());
    }
    writer.join().map_err(|_| "writer panicked".to_string())?.map_err(|e| e.to_string())?;
    ensure(received == sent, || format!("{} frames sent, {} received or bytes differ", sent.len(), received.len()))?;
    Ok(sent.len())
}

fn protocol_invariants() -> Outcome {
    let mut r = rng::data_stream(SEED, 400);
    for trial in 0..ASSIGNMENTS {
        let world = r.gen_range(1..=4);
        let n_local = r.gen_range(1..=3);
        let e = world * n_local;
        let k = r.gen_range(1..=e.min(2));
        let n_b = r.gen_range(0..=40);
        let plans = (0..world)
            .map(|_| build_plan(&random_topk(&mut r, n_b, k, e), e))
            .collect::<fmoe::Result<Vec<_>>>();
        let plans = ok(plans)?;
        for p in &plans {
            let total: usize = p.counts().iter().sum();
            ensure(total == n_b * k, || format!("assignment {trial}: counts sum to {total}, expected {}", n_b * k))?;
        }
        let exchanged = ok(run_world(world, TransportKind::InProcess, |mut comm: Communicator| {
            comm.exchange_counts(plans[comm.rank()].counts())
        }))?;
        for (w, ex) in exchanged.iter().enumerate() {
            for (src, p) in plans.iter().enumerate() {
                for j in 0..n_local {
                    let (got, want) = (ex.recv_count(src, j), p.counts()[w * n_local + j]);
                    ensure(got == want, || format!("assignment {trial}: worker {w} expert {j} from {src}: {got} != {want}"))?;
                }
            }
        }
    }

    for kind in KINDS {
        for world in 1..=4 {
            let same = ok(run_world(world, kind, |mut comm: Communicator| {
                let mut r = rng::data_stream(SEED, 500 + comm.rank() as u64);
                let counts: Vec<usize> = (0..2 * world).map(|_| r.gen_range(0..9)).collect();
                let bits: Vec<u64> = (0..counts.iter().sum::<usize>() * 6).map(|_| r.gen()).collect();
                let x = Matrix::from_vec(bits.len() / 6, 6, bits.into_iter().map(f64::from_bits).collect())?;
                let plan = comm.exchange_counts(&counts)?;
                let there = comm.all_to_all_rows(&x, &plan)?;
                Ok(comm.all_to_all_rows_reverse(&there, &plan)?.bit_eq(&x))
            }))?;
            ensure(same.iter().all(|&b| b), || format!("{kind:?} world {world}: round trip changed bits"))?;
        }
    }

    let frames = frames_over_socket(&mut r)?;
    Ok(format!(
        "{ASSIGNMENTS} assignments transpose and conserve n_b*k; all-to-all round trip bitwise on worlds 1-4 x 2 transports; {frames} frames bit-exact over a loopback socket"
    ))
}

fn sync_tag_semantics() -> Outcome {
    let input = |rank: usize, which: u64| Matrix::random_uniform(&mut rng::data_stream(SEED, 600 + 10 * rank as u64 + which), 4, 5, -1e3, 1e3);
    let mean = |ranks: &[usize], which: u64| -> Matrix {
        let mut s = input(ranks[0], which);
        for &r in &ranks[1..] {
            s.add_assign(&input(r, which)).unwrap();
        }
        Matrix::from_vec(4, 5, s.data().iter().map(|v| v / ranks.len() as f64).collect()).unwrap()
    };
    let world_mean = mean(&[0, 1, 2, 3], 0);
    for kind in KINDS {
        let out = ok(run_world(4, kind, |mut comm: Communicator| {
            let rank = comm.rank();
            let topo = ProcessTopology::new(4, 2)?;
            let (mut w, mut dp, mut own) = (input(rank, 0), input(rank, 1), input(rank, 2));
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
        // Model-parallel blocks {0,1} and {2,3}; data-parallel groups {0,2} and {1,3}.
        let dp_groups = [[0, 2], [1, 3], [0, 2], [1, 3]];
        for (rank, (w, dp, own)) in out.iter().enumerate() {
            ensure(w.bit_eq(&out[0].0) && w.bit_eq(&world_mean), || format!("{kind:?} rank {rank}: world-tagged grad"))?;
            ensure(own.bit_eq(&input(rank, 2)), || format!("{kind:?} rank {rank}: unsynced grad changed"))?;
            ensure(dp.bit_eq(&mean(&dp_groups[rank], 1)), || format!("{kind:?} rank {rank}: data-parallel grad"))?;
        }
    }
    Ok("world 4, mp 2 over both transports: world grads equal the 4-way mean, dp grads the {0,2}/{1,3} means, untagged untouched".into())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median over interleaved pairs of `slow / fast`, so both sides of each
/// ratio see the same machine load.
fn paired_ratio(
    pairs: usize,
    mut slow: impl FnMut() -> Result<f64, String>,
    mut fast: impl FnMut() -> Result<f64, String>,
) -> Result<f64, String> {
    let mut ratios = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        ratios.push(slow()? / fast()?);
    }
    Ok(median(ratios))
}

fn performance_trend() -> Outcome {
    let (d_m, d_h) = (256, 1024);
    let per_row = |n_b: usize| -> Result<f64, String> {
        let t = time_gemm(n_b, d_m, d_h, 1, 1, SEED).map_err(|e| e.to_string())?;
        Ok(t.median_ms() / n_b as f64)
    };
    let gemm_ratio = paired_ratio(15, || per_row(1), || per_row(4096))?;

    let case = LocalCase {
        n_b: 1024,
        d_m: 256,
        d_h: 1024,
        k: 2,
        n_e: 4,
        seed: SEED,
    };
    let time = |path: Path| -> Result<f64, String> {
        let t = time_case(&case, path, Pass::Forward, 1, 1).map_err(|e| e.to_string())?;
        Ok(t.median_ms())
    };
    let moe_ratio = paired_ratio(7, || time(Path::Naive), || time(Path::Batched))?;
    ensure(gemm_ratio >= GEMM_SPEEDUP, || format!("gemm batch 4096 only {gemm_ratio:.2}x batch 1"))?;
    ensure(moe_ratio >= MOE_SPEEDUP, || format!("batched forward only {moe_ratio:.2}x naive"))?;
    Ok(format!(
        "gemm throughput 4096 vs 1: {gemm_ratio:.1}x >= {GEMM_SPEEDUP}x; batched forward vs naive: {moe_ratio:.1}x >= {MOE_SPEEDUP}x (median of paired runs)"
    ))
}

fn parallel_determinism() -> Outcome {
    let mut r = rng::data_stream(SEED, 700);
    for run in 0..DETERMINISM_RUNS {
        let n_e = r.gen_range(1..=8);
        let (d_m, d_h) = (r.gen_range(1..=32), r.gen_range(1..=32));
        let experts: Vec<ExpertParams> = (0..n_e).map(|_| ExpertParams::init(&mut r, d_m, d_h)).collect();
        let layout = BlockLayout::from_counts((0..n_e).map(|_| r.gen_range(0..40)).collect());
        let xs = Matrix::random_uniform(&mut r, layout.total(), d_m, -1.0, 1.0);
        let d_ys = Matrix::random_uniform(&mut r, layout.total(), d_m, -1.0, 1.0);
        let (ys, cs) = ok(multi_expert_forward(&xs, &layout, &experts, Execution::Sequential))?;
        let (yc, cc) = ok(multi_expert_forward(&xs, &layout, &experts, Execution::Concurrent))?;
        let (ds, gs) = ok(multi_expert_backward(&d_ys, &cs, &experts, Execution::Sequential))?;
        let (dc, gc) = ok(multi_expert_backward(&d_ys, &cc, &experts, Execution::Concurrent))?;
        let same = ys.bit_eq(&yc) && ds.bit_eq(&dc) && gs.iter().zip(&gc).all(|(a, b)| a.bit_eq(b));
        ensure(same, || format!("run {run}: expert results differ"))?;

        let c = MoEConfig {
            n_b: r.gen_range(1..=48),
            d_m,
            d_h,
            k: r.gen_range(1..=n_e.min(2)),
            n_e_local: n_e,
            world_size: 1,
            seed: SEED + run as u64,
        };
        let mut state = spread(ok(MoELayerState::init(c, 0))?, 10.0, 1.0);
        let x = Matrix::random_uniform(&mut r, c.n_b, d_m, -1.0, 1.0);
        let d_y = Matrix::random_uniform(&mut r, c.n_b, d_m, -1.0, 1.0);
        let mut results = Vec::new();
        for exec in [Execution::Sequential, Execution::Concurrent] {
            state.execution = exec;
            let (y, cache) = ok(forward(&x, &state, None))?;
            let (d_x, g) = ok(backward(&d_y, &cache, &state, None))?;
            results.push((y, d_x, g));
        }
        let (a, b) = (&results[0], &results[1]);
        let same = a.0.bit_eq(&b.0)
            && a.1.bit_eq(&b.1)
            && a.2.gate.bit_eq(&b.2.gate)
            && a.2.experts.iter().zip(&b.2.experts).all(|(p, q)| p.bit_eq(q));
        ensure(same, || format!("run {run}: layer results differ"))?;
    }
    Ok(format!("{DETERMINISM_RUNS} randomized runs, expert pool and full layer, bit-equal"))
}

fn toy_convergence() -> Outcome {
    let run = ToyRun {
        steps: TOY_STEPS,
        ..ToyRun::default()
    };
    let one = run.run_local(TransportKind::InProcess).map_err(|e| e.to_string())?;
    ensure(one.len() == TOY_STEPS, || format!("{} losses", one.len()))?;
    let ema = smoothed(&one, TOY_DECAY);
    for t in TOY_FROM_STEP..TOY_STEPS {
        ensure(ema[t] < ema[t - 1], || format!("smoothed loss rose at step {t}: {:e} -> {:e}", ema[t - 1], ema[t]))?;
    }
    let mut worst = 0.0f64;
    for kind in KINDS {
        let two = ToyRun { world: 2, ..run.clone() }.run_local(kind).map_err(|e| e.to_string())?;
        for (step, (a, b)) in two.iter().zip(&one).enumerate() {
            let e = (a - b).abs();
            worst = worst.max(e);
            ensure(e <= TOY_WORLD_TOL, || format!("{kind:?} world 2 step {step}: off by {e:e}"))?;
        }
    }
    Ok(format!(
        "loss {:.4e} -> {:.4e}, smoothed strictly decreasing from step {TOY_FROM_STEP}; world 2 within {worst:.1e} <= {TOY_WORLD_TOL:e}",
        one[0],
        one[TOY_STEPS - 1]
    ))
}

type Criterion = (&'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 8] = [
    ("oracle-equivalence", oracle_equivalence),
    ("gradient-correctness", gradient_correctness),
    ("distributed-consistency", distributed_consistency),
    ("protocol-invariants", protocol_invariants),
    ("sync-tag-semantics", sync_tag_semantics),
    ("performance-trend", performance_trend),
    ("parallel-determinism", parallel_determinism),
    ("toy-convergence", toy_convergence),
];

fn main() {
    let mut failed = 0;
    for (i, (name, f)) in CRITERIA.iter().enumerate() {
        let t = Instant::now();
        let outcome = f();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {}. {name}: {detail} [{secs:.2}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {}. {name}: {why} [{secs:.2}s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", CRITERIA.len() - failed, CRITERIA.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
