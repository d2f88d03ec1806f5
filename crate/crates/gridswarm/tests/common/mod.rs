//! Shared oracles for the integration tests.
//!
//! Everything here recomputes physics from raw line data through a
//! different formulation than the code under test: a Newton-Raphson solver
//! in polar nodal coordinates (admittance matrix, no tree structure), a
//! central-difference sensitivity oracle, and brute-force path walks over
//! the raw segment list. Agreement between these and the branch-flow
//! machinery is evidence, not circularity.
#![allow(dead_code)]

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use gridswarm::feeder::{LineSegment, RadialNetwork};
use gridswarm::powerflow::{solve, SolveOptions};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Absolute path of a bundled asset (`feeders/...` or `scenarios/...`).
pub fn asset(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(rel)
}

/// Full AC power flow by Newton-Raphson on the polar nodal equations.
///
/// Bus 0 is the slack at magnitude `v0`, angle zero; every other bus is PQ
/// with net consumption `injections[b]` (the same convention the crate
/// uses). Returns the voltage magnitudes, or `None` if the iteration fails
/// to reach `tol` on the worst power mismatch.
pub fn newton_polar(
    bus_count: usize,
    lines: &[LineSegment],
    v0: f64,
    injections: &[(f64, f64)],
    tol: f64,
    max_iter: usize,
) -> Option<Vec<f64>> {
    let n = bus_count;
    assert!(n >= 2 && injections.len() == n);

    // Nodal admittance from the line list alone.
    let mut g = vec![vec![0.0; n]; n];
    let mut b = vec![vec![0.0; n]; n];
    for l in lines {
        let d = l.r * l.r + l.x * l.x;
        let (gl, bl) = (l.r / d, -l.x / d);
        g[l.from][l.from] += gl;
        b[l.from][l.from] += bl;
        g[l.to][l.to] += gl;
        b[l.to][l.to] += bl;
        g[l.from][l.to] -= gl;
        b[l.from][l.to] -= bl;
        g[l.to][l.from] -= gl;
        b[l.to][l.from] -= bl;
    }
    // Specified nodal injections, generation-positive.
    let p_spec: Vec<f64> = injections.iter().map(|&(p, _)| -p).collect();
    let q_spec: Vec<f64> = injections.iter().map(|&(_, q)| -q).collect();

    let mut vm = vec![v0; n];
    let mut th = vec![0.0f64; n];
    let m = n - 1;
    for _ in 0..max_iter {
        let mut p_cal = vec![0.0; n];
        let mut q_cal = vec![0.0; n];
        for i in 0..n {
            for k in 0..n {
                if g[i][k] == 0.0 && b[i][k] == 0.0 {
                    continue;
                }
                let (s, c) = (th[i] - th[k]).sin_cos();
                p_cal[i] += vm[i] * vm[k] * (g[i][k] * c + b[i][k] * s);
                q_cal[i] += vm[i] * vm[k] * (g[i][k] * s - b[i][k] * c);
            }
        }
        let mut mis = DVector::<f64>::zeros(2 * m);
        let mut worst = 0.0f64;
        for i in 1..n {
            let dp = p_spec[i] - p_cal[i];
            let dq = q_spec[i] - q_cal[i];
            mis[i - 1] = dp;
            mis[m + i - 1] = dq;
            worst = worst.max(dp.abs()).max(dq.abs());
        }
        if worst < tol {
            return Some(vm);
        }
        let mut jac = DMatrix::<f64>::zeros(2 * m, 2 * m);
        for i in 1..n {
            let ri = i - 1;
            for k in 1..n {
                let ck = k - 1;
                if i == k {
                    jac[(ri, ck)] = -q_cal[i] - b[i][i] * vm[i] * vm[i];
                    jac[(ri, m + ck)] = p_cal[i] / vm[i] + g[i][i] * vm[i];
                    jac[(m + ri, ck)] = p_cal[i] - g[i][i] * vm[i] * vm[i];
                    jac[(m + ri, m + ck)] = q_cal[i] / vm[i] - b[i][i] * vm[i];
                } else {
                    if g[i][k] == 0.0 && b[i][k] == 0.0 {
                        continue;
                    }
                    let (s, c) = (th[i] - th[k]).sin_cos();
                    jac[(ri, ck)] = vm[i] * vm[k] * (g[i][k] * s - b[i][k] * c);
                    jac[(ri, m + ck)] = vm[i] * (g[i][k] * c + b[i][k] * s);
                    jac[(m + ri, ck)] = -vm[i] * vm[k] * (g[i][k] * c + b[i][k] * s);
                    jac[(m + ri, m + ck)] = vm[i] * (g[i][k] * s - b[i][k] * c);
                }
            }
        }
        let dx = jac.lu().solve(&mis)?;
        for i in 1..n {
            th[i] += dx[i - 1];
            vm[i] += dx[m + i - 1];
        }
    }
    None
}

/// Voltage solution at tight tolerance; panics if the sweep fails.
pub fn tight_solve_v(network: &RadialNetwork, injections: &[(f64, f64)]) -> Vec<f64> {
    let sol = solve(network, injections, SolveOptions { tol: 1e-13, max_iter: 400 })
        .expect("oracle operating point must solve");
    assert!(sol.converged, "oracle operating point must converge");
    sol.v
}

/// Central-difference voltage sensitivities to the power *generated* at
/// `j`: one `(dV/dP_j, dV/dQ_j)` pair of columns over all buses. Generation
/// lowers the consumed injection, hence the sign flip.
pub fn fd_columns(
    network: &RadialNetwork,
    injections: &[(f64, f64)],
    j: usize,
    h: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = network.bus_count();
    let col = |up: &[f64], dn: &[f64]| -> Vec<f64> {
        (0..n).map(|k| (up[k] - dn[k]) / (2.0 * h)).collect()
    };
    let mut pert = injections.to_vec();

    pert[j].0 = injections[j].0 - h;
    let vp_up = tight_solve_v(network, &pert);
    pert[j].0 = injections[j].0 + h;
    let vp_dn = tight_solve_v(network, &pert);
    pert[j].0 = injections[j].0;

    pert[j].1 = injections[j].1 - h;
    let vq_up = tight_solve_v(network, &pert);
    pert[j].1 = injections[j].1 + h;
    let vq_dn = tight_solve_v(network, &pert);

    (col(&vp_up, &vp_dn), col(&vq_up, &vq_dn))
}

/// The segment list of a built network, for feeding the nodal oracle.
pub fn lines_of(network: &RadialNetwork) -> Vec<LineSegment> {
    (1..network.bus_count())
        .map(|b| LineSegment {
            from: network.parent(b).expect("non-head bus"),
            to: b,
            r: network.segment_r(b),
            x: network.segment_x(b),
        })
        .collect()
}

/// Worst per-entry disagreement between an analytic sensitivity pair and
/// central finite differences, normalized by `max(|fd entry|, floor)` where
/// the floor is `1e-3` of the largest finite-difference magnitude (entries
/// below it sit at the differencing noise level).
pub fn worst_relative_fd_error(
    network: &RadialNetwork,
    injections: &[(f64, f64)],
    analytic: &gridswarm::sensitivity::SensitivityMatrices,
    h: f64,
) -> f64 {
    let n = network.bus_count();
    let mut fd_scale = 0.0f64;
    let mut cols = Vec::with_capacity(n);
    cols.push((vec![0.0; n], vec![0.0; n]));
    for j in 1..n {
        let (cp, cq) = fd_columns(network, injections, j, h);
        for k in 0..n {
            fd_scale = fd_scale.max(cp[k].abs()).max(cq[k].abs());
        }
        cols.push((cp, cq));
    }
    let floor = 1e-3 * fd_scale;
    let mut worst = 0.0f64;
    for (j, (cp, cq)) in cols.iter().enumerate().skip(1) {
        for k in 1..n {
            let ep = (analytic.dv_dp[k][j] - cp[k]).abs() / cp[k].abs().max(floor);
            let eq = (analytic.dv_dq[k][j] - cq[k]).abs() / cq[k].abs().max(floor);
            worst = worst.max(ep).max(eq);
        }
    }
    worst
}

/// Random recursive tree: bus `b`'s parent is uniform over `0..b`.
pub fn random_tree<R: Rng>(rng: &mut R, bus_count: usize) -> Vec<LineSegment> {
    (1..bus_count)
        .map(|to| LineSegment {
            from: rng.gen_range(0..to),
            to,
            r: rng.gen_range(0.004..0.03),
            x: rng.gen_range(0.004..0.03),
        })
        .collect()
}

/// Mixed random consumption and generation, moderate per-unit scale.
pub fn random_injections<R: Rng>(rng: &mut R, bus_count: usize) -> Vec<(f64, f64)> {
    let mut inj = vec![(0.0, 0.0); bus_count];
    for slot in inj.iter_mut().skip(1) {
        let p = rng.gen_range(-0.03..0.05);
        let q = p * rng.gen_range(0.1..0.4);
        *slot = (p, q);
    }
    inj
}

/// Head-to-`bus` path edges `(downstream bus, r, x)` walked over the raw
/// segment list, independent of the built network's tables.
pub fn brute_path_edges(lines: &[LineSegment], mut bus: usize) -> Vec<(usize, f64, f64)> {
    let parent: HashMap<usize, (usize, f64, f64)> =
        lines.iter().map(|l| (l.to, (l.from, l.r, l.x))).collect();
    let mut out = Vec::new();
    while bus != 0 {
        let &(p, r, x) = parent.get(&bus).expect("every non-head bus has an upstream segment");
        out.push((bus, r, x));
        bus = p;
    }
    out
}

/// Summed `(r, x)` of the edges shared by the head paths of `a` and `b`.
pub fn brute_common_path(lines: &[LineSegment], a: usize, b: usize) -> (f64, f64) {
    let on_b: std::collections::HashSet<usize> =
        brute_path_edges(lines, b).into_iter().map(|(t, _, _)| t).collect();
    brute_path_edges(lines, a)
        .into_iter()
        .filter(|(t, _, _)| on_b.contains(t))
        .fold((0.0, 0.0), |(ar, ax), (_, r, x)| (ar + r, ax + x))
}
