//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line to
//! stderr (uncaptured) and then asserts.

use std::io::Write;

use deot::analysis::{
    bound_curve, decompose_errors, mismatch_bound_check, sketch_error_trials, SketchSpec,
};
use deot::eot::{sinkhorn_oracle, DualProblem, KernelBlocks, SinkhornConfig};
use deot::experiment::{
    domain_adapt, generate_pair, generate_synthetic, median, run_experiment, run_variant,
    Component, Covariance, DatasetSpec, ExperimentConfig, ProtocolSpec, Sweep,
};
use deot::measures::{CostSpec, DiscreteMeasure, SampleSet};
use deot::mrbcd::{assembly_scalars, curvature_step, KernelSource, Mrbcd, SolverConfig};
use deot::netsim::{
    shards_from_measures, sim_rng, storage_protocol, AgentPartition, Phase, ProtocolKind,
    ProtocolMatrix, SimRng, StorageMode,
};
use deot::sketch::{distributed_sketch, draw_shared_randomness};
use ndarray::{Array1, Array2};
use rand::Rng;

fn report(id: u32, name: &str, pass: bool, detail: String) {
    let line = format!(
        "{} criterion {id:>2} ({name}): {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(pass, "{line}");
}

fn gaussian(n: usize, mean: [f64; 2], var: f64) -> DatasetSpec {
    DatasetSpec::Gaussian {
        n,
        mean: mean.to_vec(),
        covariance: Covariance::Isotropic(var),
    }
}

/// `k` isotropic components evenly spaced on the unit circle, shifted along x.
fn ring(n: usize, k: usize, sd: f64, shift: f64) -> DatasetSpec {
    DatasetSpec::Gmm {
        n,
        components: (0..k)
            .map(|c| {
                let a = c as f64 * std::f64::consts::TAU / k as f64;
                Component {
                    mean: vec![a.cos() + shift, a.sin()],
                    covariance: Covariance::Isotropic(sd * sd),
                    weight: 1.0,
                }
            })
            .collect(),
    }
}

fn random_measure<R: Rng>(rng: &mut R, n: usize, offset: f64) -> DiscreteMeasure {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| vec![offset + rng.random::<f64>(), rng.random::<f64>()])
        .collect();
    DiscreteMeasure::uniform(SampleSet::from_rows(&rows, None).unwrap())
}

fn random_partition<R: Rng>(
    rng: &mut R,
    i: usize,
    j: usize,
    max_size: usize,
    offset: f64,
) -> AgentPartition {
    let mut side = |k: usize, shift: f64| -> Vec<DiscreteMeasure> {
        (0..k)
            .map(|_| {
                let n = rng.random_range(1..=max_size);
                random_measure(rng, n, shift)
            })
            .collect()
    };
    let (src, tgt) = (side(i, 0.0), side(j, offset));
    AgentPartition::new(shards_from_measures(src), shards_from_measures(tgt)).unwrap()
}

fn random_protocol<R: Rng>(rng: &mut R, i: usize, j: usize) -> ProtocolMatrix {
    let raw = Array2::from_shape_fn((i, j), |_| {
        if rng.random::<f64>() < 0.2 {
            0.0
        } else {
            rng.random::<f64>() + 0.05
        }
    });
    let raw = if raw.sum() == 0.0 {
        Array2::ones((i, j))
    } else {
        raw
    };
    ProtocolMatrix::normalized(raw).unwrap()
}

#[test]
fn criterion_01_oracle_equivalence() {
    let config = ExperimentConfig::default();
    let variant = config.variants().remove(0);
    let spec = config.spec().unwrap();
    let rel: Vec<f64> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..5u64)
            .map(|seed| {
                let (config, variant) = (&config, &variant);
                s.spawn(move || {
                    let (mu, gamma) = generate_pair(config, seed).unwrap();
                    let w = sinkhorn_oracle(&mu, &gamma, &spec, &config.oracle)
                        .unwrap()
                        .dual_value;
                    let (out, _) = run_variant(config, &mu, &gamma, w, variant, seed).unwrap();
                    (out.distance - w).abs() / w.abs()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let ok = rel.iter().filter(|&&r| r <= 0.02).count();
    let shown: Vec<String> = rel.iter().map(|r| format!("{:.2}%", 100.0 * r)).collect();
    report(
        1,
        "oracle equivalence",
        ok >= 4,
        format!("relative errors {shown:?}, {ok}/5 within 2%"),
    );
}

#[test]
fn criterion_02_analytic_single_atoms() {
    let cfg = SinkhornConfig::default();
    let atom = |x: f64, y: f64| {
        DiscreteMeasure::uniform(SampleSet::from_rows(&[vec![x, y]], None).unwrap())
    };
    let mut worst_pair: f64 = 0.0;
    let mut worst_same: f64 = 0.0;
    for (k, eps) in [0.05, 0.1, 0.5, 1.0, 2.0].into_iter().enumerate() {
        let spec = CostSpec::squared_euclidean(eps).unwrap();
        let (x, y) = (atom(k as f64 * 0.3, -1.0), atom(1.0, 0.5 * k as f64));
        let c = (k as f64 * 0.3 - 1.0).powi(2) + (-1.0 - 0.5 * k as f64).powi(2);
        let w = sinkhorn_oracle(&x, &y, &spec, &cfg).unwrap().dual_value;
        worst_pair = worst_pair.max((w - (c - eps)).abs());
        // The decentralized problem on one agent pair has the same optimum.
        let part = AgentPartition::new(
            shards_from_measures(vec![x.clone()]),
            shards_from_measures(vec![y]),
        )
        .unwrap();
        let p = DualProblem::new(
            KernelBlocks::exact(&part, &spec).unwrap(),
            ProtocolMatrix::uniform(1, 1).unwrap(),
            eps,
        )
        .unwrap();
        worst_pair =
            worst_pair.max((p.solve_reference(&cfg).unwrap().1.dual_value - (c - eps)).abs());
        let same = sinkhorn_oracle(&x, &x, &spec, &cfg).unwrap().dual_value;
        worst_same = worst_same.max((same + eps).abs());
    }
    report(
        2,
        "analytic EOT",
        worst_pair <= 1e-9 && worst_same <= 1e-12,
        format!("max |W - (c - eps)| = {worst_pair:.1e}, max |W(x, x) + eps| = {worst_same:.1e}"),
    );
}

#[test]
fn criterion_03_gradient_check() {
    let mut rng = sim_rng(303);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (i, j) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let part = random_partition(&mut rng, i, j, 20 / i.max(j), 0.3);
        let eps = 0.1 + rng.random::<f64>();
        let spec = CostSpec::squared_euclidean(eps).unwrap();
        let problem = DualProblem::new(
            KernelBlocks::exact(&part, &spec).unwrap(),
            random_protocol(&mut rng, i, j),
            eps,
        )
        .unwrap();
        let perturb = |sizes: Vec<usize>, rng: &mut SimRng| -> Vec<Array1<f64>> {
            sizes
                .into_iter()
                .map(|n| Array1::from_shape_fn(n, |_| (rng.random::<f64>() - 0.5) * eps))
                .collect()
        };
        let u = perturb(problem.source_sizes(), &mut rng);
        let v = perturb(problem.target_sizes(), &mut rng);
        let (gu, gv) = problem.full_gradient(&u, &v).unwrap();
        let h = 1e-5;
        let mut fd_err = 0.0;
        let mut norm = 0.0;
        for a in 0..i {
            for n in 0..u[a].len() {
                let (mut up, mut dn) = (u.clone(), u.clone());
                up[a][n] += h;
                dn[a][n] -= h;
                let fd = (problem.objective(&up, &v).unwrap()
                    - problem.objective(&dn, &v).unwrap())
                    / (2.0 * h);
                fd_err += (fd - gu[a][n]).powi(2);
                norm += gu[a][n].powi(2);
            }
        }
        for b in 0..j {
            for m in 0..v[b].len() {
                let (mut up, mut dn) = (v.clone(), v.clone());
                up[b][m] += h;
                dn[b][m] -= h;
                let fd = (problem.objective(&u, &up).unwrap()
                    - problem.objective(&u, &dn).unwrap())
                    / (2.0 * h);
                fd_err += (fd - gv[b][m]).powi(2);
                norm += gv[b][m].powi(2);
            }
        }
        worst = worst.max((fd_err / norm.max(1e-300)).sqrt());
    }
    report(
        3,
        "gradient check",
        worst <= 1e-5,
        format!("worst relative error {worst:.2e} over 20 instances"),
    );
}

#[test]
fn criterion_04_rbcd_reduction() {
    let mut rng = sim_rng(404);
    let mut worst: f64 = 0.0;
    for trial in 0..10 {
        let k = 1 + trial % 3;
        let part = random_partition(&mut rng, k, k, 5, 0.5);
        let spec = CostSpec::squared_euclidean(0.3).unwrap();
        let problem = DualProblem::new(
            KernelBlocks::exact(&part, &spec).unwrap(),
            ProtocolMatrix::uniform(k, k).unwrap(),
            0.3,
        )
        .unwrap();
        let mut state = problem.zero_state();
        for b in state.u_blocks.iter_mut().chain(state.v_blocks.iter_mut()) {
            b.mapv_inplace(|_| rng.random::<f64>() * 0.2 - 0.1);
        }
        let cfg = SolverConfig {
            epsilon: 0.3,
            eta0: 0.7,
            batch: k,
            seed: trial as u64,
            ..Default::default()
        };
        let mut solver = Mrbcd::new(&problem, cfg).unwrap().with_state(state.clone());
        let info = solver.step().unwrap();
        let (gu, gv) = problem
            .full_gradient(&state.u_blocks, &state.v_blocks)
            .unwrap();
        let (i, j) = info.pair;
        let expect_u = &state.u_blocks[i] + &(&gu[i] * 0.7);
        let expect_v = &state.v_blocks[j] + &(&gv[j] * 0.7);
        let got = solver.state();
        for (a, b) in got.u_blocks[i]
            .iter()
            .zip(expect_u.iter())
            .chain(got.v_blocks[j].iter().zip(expect_v.iter()))
        {
            worst = worst.max((a - b).abs());
        }
    }
    report(
        4,
        "RBCD reduction",
        worst <= 1e-12,
        format!("max deviation from exact block step {worst:.1e}"),
    );
}

#[test]
fn criterion_05_protocol_mismatch_bound() {
    let cfg = SinkhornConfig {
        max_iter: 100_000,
        tol: 1e-12,
        check_every: 10,
    };
    let eps = 0.1;
    let spec = CostSpec::squared_euclidean(eps).unwrap();
    let mut rng = sim_rng(505);
    let mut failures = Vec::new();
    let mut checks = 0;
    let mut worst_ratio: f64 = 0.0;
    for instance in 0..10 {
        // Targets sit at least one unit to the right, so every cost is >= 2 eps.
        let n = 2 + instance % 3;
        let src = (0..2).map(|_| random_measure(&mut rng, n, 0.0)).collect();
        let tgt = (0..2).map(|_| random_measure(&mut rng, n, 2.0)).collect();
        let part =
            AgentPartition::new(shards_from_measures(src), shards_from_measures(tgt)).unwrap();
        let pq = storage_protocol(&part.source_mass(), &part.target_mass()).unwrap();
        let diag = Array2::from_diag(&Array1::from(vec![0.5, 0.5]));
        for sigma in [0.0, 0.3, 1.0] {
            // p = q = (1/2, 1/2), so mixing toward the diagonal by lambda gives sigma = lambda.
            let e = ProtocolMatrix::new(pq.values() * (1.0 - sigma) + &diag * sigma).unwrap();
            let c = mismatch_bound_check(&part, &e, &spec, &cfg).unwrap();
            checks += 1;
            assert!((c.sigma - sigma).abs() < 1e-12);
            if c.tau * c.sigma > 0.0 {
                worst_ratio = worst_ratio.max(c.lhs / (c.tau * c.sigma));
            }
            if !c.holds {
                failures.push(format!("instance {instance} sigma {sigma}: {c:?}"));
            }
        }
    }
    report(
        5,
        "mismatch bound",
        failures.is_empty(),
        format!("{checks} checks, worst lhs/(tau sigma) = {worst_ratio:.3}, failures {failures:?}"),
    );
}

#[test]
fn criterion_06_sketch_error_trend() {
    let mu = generate_synthetic(&gaussian(200, [0.5, 0.5], 0.25), 61).unwrap();
    let gamma = generate_synthetic(&gaussian(200, [1.0, 1.5], 0.25), 62).unwrap();
    let part = AgentPartition::scatter_both(&mu, &gamma, 2, 2, StorageMode::Iid, 63).unwrap();
    let spec = CostSpec::squared_euclidean(1.0).unwrap();
    let seeds: Vec<u64> = (0..10).collect();
    let rows = sketch_error_trials(&part, &spec, &[100, 1000, 10_000], &seeds, 0.1).unwrap();
    let med = |p: usize| {
        median(
            &rows
                .iter()
                .filter(|r| r.projections == p)
                .map(|r| r.frobenius)
                .collect::<Vec<_>>(),
        )
        .unwrap()
    };
    let (m1, m2, m3) = (med(100), med(1000), med(10_000));
    let (lo, hi) = (10f64.sqrt() / 2.0, 2.0 * 10f64.sqrt());
    let (r1, r2) = (m1 / m2, m2 / m3);
    let big: Vec<_> = rows.iter().filter(|r| r.projections >= 1000).collect();
    let within = big.iter().filter(|r| r.frobenius <= r.bound).count() as f64 / big.len() as f64;
    let pass =
        m1 > m2 && m2 > m3 && (lo..=hi).contains(&r1) && (lo..=hi).contains(&r2) && within >= 0.9;
    report(
        6,
        "sketch error trend",
        pass,
        format!(
            "medians {m1:.3} > {m2:.3} > {m3:.4}, ratios {r1:.2}, {r2:.2}; {:.0}% within bound",
            100.0 * within
        ),
    );
}

#[test]
fn criterion_07_rate_shape() {
    let mu = generate_synthetic(&gaussian(200, [0.0, 0.0], 0.25), 71).unwrap();
    let gamma = generate_synthetic(&gaussian(200, [1.0, 1.0], 0.25), 72).unwrap();
    let part = AgentPartition::scatter_both(&mu, &gamma, 10, 10, StorageMode::Iid, 73).unwrap();
    let e = storage_protocol(&part.source_mass(), &part.target_mass()).unwrap();
    let spec = CostSpec::squared_euclidean(0.1).unwrap();
    let problem =
        DualProblem::new(KernelBlocks::exact(&part, &spec).unwrap(), e.clone(), 0.1).unwrap();
    let solver = SolverConfig {
        epsilon: 0.1,
        eta0: 3.0 * curvature_step(&problem, 5),
        batch: 5,
        ..Default::default()
    };
    let grid: Vec<u64> = (0..=16)
        .map(|k| (100.0 * 50f64.powf(k as f64 / 16.0)).round() as u64)
        .collect();
    let rows = bound_curve(
        &part,
        &e,
        &spec,
        &solver,
        &grid,
        &[None],
        &[0, 1, 2, 3, 4],
        0.1,
        &SinkhornConfig::default(),
    )
    .unwrap();
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| ((r.t as f64).ln(), r.measured.ln()))
        .collect();
    let n = pts.len() as f64;
    let (mx, my) = (
        pts.iter().map(|p| p.0).sum::<f64>() / n,
        pts.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    report(
        7,
        "rate shape",
        (-0.8..=-0.3).contains(&slope),
        format!(
            "log-log slope {slope:.3} (gap {:.3e} at t={} to {:.3e} at t={})",
            rows[0].measured,
            rows[0].t,
            rows.last().unwrap().measured,
            rows.last().unwrap().t
        ),
    );
}

#[test]
fn criterion_08_communication_accounting() {
    let mut rng = sim_rng(808);
    let part = random_partition(&mut rng, 3, 4, 6, 0.5);
    let (i, j) = (part.n_sources(), part.n_targets());
    let spec = CostSpec::squared_euclidean(0.5).unwrap();
    let p = 37;
    let rand = draw_shared_randomness(9, p, part.dim()).unwrap();
    let (kernel, sketch_ledger) = distributed_sketch(&part, &rand, &spec, false).unwrap();
    let expect_bits: u64 = part
        .source_sizes()
        .iter()
        .map(|&n| (j * n * p) as u64)
        .sum::<u64>()
        + part
            .target_sizes()
            .iter()
            .map(|&m| (i * m * p) as u64)
            .sum::<u64>();
    let bits = sketch_ledger.phase_totals(Phase::KernelSketch).bits;

    let problem = DualProblem::new(kernel, ProtocolMatrix::uniform(i, j).unwrap(), 0.5).unwrap();
    let cfg = SolverConfig {
        epsilon: 0.5,
        eta0: 1.0,
        iterations: 200,
        batch: 2,
        ..Default::default()
    };
    let mut solver = Mrbcd::new(&problem, cfg.clone()).unwrap();
    let mut per_step_ok = true;
    let mut before = 0;
    for _ in 0..200 {
        let info = solver.step().unwrap();
        let expect: u64 = info
            .targets
            .iter()
            .map(|&t| part.target_sizes()[t] as u64)
            .sum::<u64>()
            + info
                .sources
                .iter()
                .map(|&s| part.source_sizes()[s] as u64)
                .sum::<u64>();
        let now = solver.ledger().phase_totals(Phase::DualUpdate).scalars;
        per_step_ok &= now - before == expect;
        before = now;
    }
    let out = Mrbcd::new(&problem, cfg).unwrap().run(None).unwrap();
    let assembly = out.ledger.phase_totals(Phase::Assembly).scalars;
    let pass = bits == expect_bits && per_step_ok && assembly == assembly_scalars(i, j);
    report(
        8,
        "communication accounting",
        pass,
        format!(
            "sketch bits {bits} (closed form {expect_bits}), per-iteration scalars exact: {per_step_ok}, assembly {assembly} (closed form {})",
            assembly_scalars(i, j)
        ),
    );
}

/// Five-component GMM pair, one component per agent under non-i.i.d. storage.
fn gmm_setup(dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        source: ring(250, 5, 0.2, 0.0),
        target: ring(250, 5, 0.2, 0.5),
        source_agents: 5,
        target_agents: 5,
        seeds: (0..5).collect(),
        output: dir.to_path_buf(),
        eta_scale: Some(2.5),
        ..Default::default()
    };
    cfg.solver.iterations = 5000;
    cfg.solver.record_every = 500;
    cfg.solver.trace_objective = false;
    cfg
}

#[test]
fn criterion_09_non_iid_degradation() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = gmm_setup(dir.path());
    cfg.sweep = Some(Sweep::Storage(vec![StorageMode::Iid, StorageMode::NonIid]));
    cfg.solver.batch = 2;
    let l2 = run_experiment(&cfg).unwrap();
    cfg.solver.batch = 5;
    cfg.sweep = Some(Sweep::Storage(vec![StorageMode::NonIid]));
    let l5 = run_experiment(&cfg).unwrap();
    let (iid2, non2, non5) = (
        l2.median_gap("iid").unwrap(),
        l2.median_gap("noniid").unwrap(),
        l5.median_gap("noniid").unwrap(),
    );
    report(
        9,
        "non-i.i.d. degradation",
        non2 > iid2 && non5 < non2,
        format!(
            "median gap L=2 i.i.d. {iid2:.4}, L=2 non-i.i.d. {non2:.4}, L=5 non-i.i.d. {non5:.4}"
        ),
    );
}

#[test]
fn criterion_10_protocol_degradation() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = gmm_setup(dir.path());
    cfg.storage = StorageMode::NonIid;
    cfg.eta_scale = Some(1.5);
    cfg.solver.batch = 2;
    cfg.solver.clamp_batch = true;
    let kinds = [
        ProtocolKind::Ideal,
        ProtocolKind::Sparse,
        ProtocolKind::SparseAsymmetric,
    ];
    cfg.sweep = Some(Sweep::Protocol(
        kinds
            .iter()
            .map(|&kind| ProtocolSpec {
                kind,
                sparsity: 0.5,
            })
            .collect(),
    ));
    let s = run_experiment(&cfg).unwrap();
    let (ideal, sparse, asym) = (
        s.median_gap("ideal").unwrap(),
        s.median_gap("sparse").unwrap(),
        s.median_gap("sparseasymmetric").unwrap(),
    );
    report(
        10,
        "protocol degradation",
        ideal <= sparse && sparse <= asym,
        format!("median gap ideal {ideal:.4} <= sparse {sparse:.4} <= sparse-asymmetric {asym:.4}"),
    );
}

#[test]
fn criterion_11_error_decomposition() {
    let oracle = SinkhornConfig {
        max_iter: 50_000,
        tol: 1e-11,
        check_every: 10,
    };
    let mut rng = sim_rng(1111);
    let mut violations = 0;
    let mut worst_slack = f64::NEG_INFINITY;
    for k in 0..20 {
        let (i, j) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let offset = rng.random::<f64>();
        let part = random_partition(&mut rng, i, j, 5, offset);
        let eps = 0.2 + rng.random::<f64>();
        let spec = CostSpec::squared_euclidean(eps).unwrap();
        let e = random_protocol(&mut rng, i, j);
        let solver = SolverConfig {
            epsilon: eps,
            eta0: 1.0,
            iterations: 300,
            batch: 1,
            seed: k,
            clamp_batch: true,
            trace_objective: false,
            record_every: 300,
            ..Default::default()
        };
        let sketch = SketchSpec {
            projections: rng.random_range(16..256),
            normalized: false,
            seed: k,
        };
        let d = decompose_errors(&part, &e, &spec, Some(sketch), &solver, &oracle).unwrap();
        let slack = d.e_all - (d.e_model + d.e_kernel + d.e_algorithm);
        worst_slack = worst_slack.max(slack);
        if !d.triangle_holds(1e-9) {
            violations += 1;
        }
    }

    // Isolation: each error source switched on alone.
    let part = random_partition(&mut rng, 2, 2, 4, 0.7);
    let spec = CostSpec::squared_euclidean(0.5).unwrap();
    let pq = storage_protocol(&part.source_mass(), &part.target_mass()).unwrap();
    let skew = ProtocolMatrix::new(ndarray::array![[0.45, 0.05], [0.05, 0.45]]).unwrap();
    let base = SolverConfig {
        epsilon: 0.5,
        batch: 2,
        trace_objective: false,
        record_every: 1,
        ..Default::default()
    };
    let converged = SolverConfig {
        eta0: 2.0
            * curvature_step(
                &DualProblem::new(KernelBlocks::exact(&part, &spec).unwrap(), pq.clone(), 0.5)
                    .unwrap(),
                2,
            ),
        iterations: 20_000,
        record_every: 20_000,
        ..base.clone()
    };
    let short = SolverConfig {
        eta0: 0.1,
        iterations: 5,
        record_every: 5,
        ..base
    };
    let sk = Some(SketchSpec {
        projections: 64,
        normalized: false,
        seed: 1,
    });
    let tol = 1e-8;
    let none = decompose_errors(&part, &pq, &spec, None, &converged, &oracle).unwrap();
    let model = decompose_errors(&part, &skew, &spec, None, &converged, &oracle).unwrap();
    let kernel = decompose_errors(&part, &pq, &spec, sk, &converged, &oracle).unwrap();
    let algo = decompose_errors(&part, &pq, &spec, None, &short, &oracle).unwrap();
    let isolated = none.e_model < tol
        && none.e_kernel == 0.0
        && none.e_algorithm < 1e-3
        && model.e_kernel == 0.0
        && model.e_model > 1e-3
        && kernel.e_model < tol
        && kernel.e_kernel > 1e-3
        && algo.e_model < tol
        && algo.e_kernel == 0.0
        && algo.e_algorithm > 1e-2;
    report(
        11,
        "error decomposition",
        violations == 0 && isolated,
        format!(
            "{violations}/20 triangle violations (max e_all - sum {worst_slack:.2e}); isolation {isolated}: \
             model-only e_model {:.2e}, kernel-only e_kernel {:.2e}, algorithm-only e_algorithm {:.2e}",
            model.e_model, kernel.e_kernel, algo.e_algorithm
        ),
    );
}

#[test]
fn criterion_12_domain_adaptation() {
    let blobs = |dx: f64| DatasetSpec::Gmm {
        n: 200,
        components: [0.0, 2.0]
            .iter()
            .map(|&x| Component {
                mean: vec![x + dx, 0.0],
                covariance: Covariance::Isotropic(0.09),
                weight: 1.0,
            })
            .collect(),
    };
    let mut cfg = ExperimentConfig {
        source: blobs(0.0),
        target: blobs(1.2),
        source_agents: 2,
        target_agents: 2,
        eta_scale: Some(2.0),
        ..Default::default()
    };
    cfg.solver.batch = 2;
    cfg.solver.iterations = 10_000;
    cfg.solver.trace_objective = false;
    cfg.solver.record_every = 10_000;
    let mut approx = cfg.clone();
    approx.solver.kernel_source = KernelSource::Approximated {
        projections: (200f64.ln().ceil()) as usize,
        normalized: false,
    };
    let results: Vec<(f64, f64, f64)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..5u64)
            .map(|seed| {
                let (cfg, approx) = (&cfg, &approx);
                s.spawn(move || {
                    let (mu, gamma) = generate_pair(cfg, seed).unwrap();
                    let ex = domain_adapt(mu.samples(), gamma.samples(), cfg, seed).unwrap();
                    let ap = domain_adapt(mu.samples(), gamma.samples(), approx, seed).unwrap();
                    (ex.source_only_accuracy, ex.accuracy, ap.accuracy)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let col = |k: usize| {
        median(
            &results
                .iter()
                .map(|r| [r.0, r.1, r.2][k])
                .collect::<Vec<_>>(),
        )
        .unwrap()
    };
    let (base, exact, appr) = (col(0), col(1), col(2));
    report(
        12,
        "domain adaptation",
        exact > base && exact >= appr,
        format!("median accuracy source-only {base:.3}, exact kernel {exact:.3}, approximate kernel {appr:.3}"),
    );
}
