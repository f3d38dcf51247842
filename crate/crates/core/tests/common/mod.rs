#![allow(dead_code)]

use mgda::data::{collect, default_legs, CollectConfig, OfflineDataset};
use mgda::env::{MazeKind, MazeSpec};
use mgda::numerics::{GradientTape, Matrix, Mlp};

pub fn spec(name: &str, kind: MazeKind) -> MazeSpec {
    MazeSpec::bundled(name, kind).unwrap()
}

pub fn small_dataset(name: &str, kind: MazeKind, n_traj: usize, seed: u64) -> OfflineDataset {
    let spec = spec(name, kind);
    let legs = default_legs(&spec).unwrap();
    collect(
        &spec,
        &legs,
        &CollectConfig {
            n_traj,
            seed,
            ..Default::default()
        },
    )
    .unwrap()
}

/// Number of scalar parameters, in `GradientTape::flatten` order.
pub fn n_params(net: &Mlp) -> usize {
    net.weights()
        .iter()
        .zip(net.biases())
        .map(|(w, b)| w.data.len() + b.len())
        .sum()
}

/// Adds `h` to parameter `idx`, counted in `GradientTape::flatten` order.
pub fn nudge(net: &mut Mlp, mut idx: usize, h: f64) {
    for l in 0..net.num_layers() {
        let nw = net.weights()[l].data.len();
        if idx < nw {
            net.weights_mut()[l].data[idx] += h;
            return;
        }
        idx -= nw;
        let nb = net.biases()[l].len();
        if idx < nb {
            net.biases_mut()[l][idx] += h;
            return;
        }
        idx -= nb;
    }
    panic!("parameter index out of range");
}

/// Central-difference gradient of `loss` over every network parameter.
pub fn fd_gradient(net: &Mlp, h: f64, loss: impl Fn(&Mlp) -> f64) -> Vec<f64> {
    let mut probe = net.clone();
    (0..n_params(net))
        .map(|k| {
            nudge(&mut probe, k, h);
            let up = loss(&probe);
            nudge(&mut probe, k, -2.0 * h);
            let down = loss(&probe);
            nudge(&mut probe, k, h);
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `|a - b| / max(|a|, |b|, floor)`, the error measure used by the gradient
/// checks.
pub fn rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(floor)
}

pub fn tape_rel_error(tape: &GradientTape, fd: &[f64]) -> f64 {
    rel_error(&tape.flatten(), fd, 1e-8)
}

/// Singular values by one-sided Jacobi rotations, largest first.
pub fn jacobi_singular_values(m: &Matrix) -> Vec<f64> {
    // Work on columns of the taller orientation.
    let (rows, cols, get): (usize, usize, Box<dyn Fn(usize, usize) -> f64>) = if m.rows >= m.cols {
        (m.rows, m.cols, Box::new(|r, c| m.get(r, c)))
    } else {
        (m.cols, m.rows, Box::new(|r, c| m.get(c, r)))
    };
    let mut a: Vec<Vec<f64>> = (0..cols).map(|c| (0..rows).map(|r| get(r, c)).collect()).collect();
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha: f64 = a[p].iter().map(|x| x * x).sum();
                let beta: f64 = a[q].iter().map(|x| x * x).sum();
                let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..rows {
                    let (x, y) = (a[p][r], a[q][r]);
                    a[p][r] = c * x - s * y;
                    a[q][r] = s * x + c * y;
                }
            }
        }
        if off < 1e-14 {
            break;
        }
    }
    let mut sv: Vec<f64> = a.iter().map(|col| norm(col)).collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
    sv
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix { rows, cols, data }
}
