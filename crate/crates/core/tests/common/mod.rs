//! Helpers and independent oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng;

use targetflow::chemmetrics::{check_valence, ValenceTable};
use targetflow::molio::{GraphConfig, GraphShape, MolGraph};
use targetflow::sampler::validity_correction;

/// Structurally well-formed graph with `1..=max_atoms` atoms in random slots
/// and random bonds of any order; usually over valence and often
/// disconnected.
pub fn random_graph<R: Rng + ?Sized>(
    shape: GraphShape,
    max_atoms: usize,
    density: f64,
    rng: &mut R,
) -> MolGraph {
    let mut g = MolGraph::empty(shape);
    let n_atoms = rng.random_range(1..=max_atoms.min(shape.n));
    let mut slots: Vec<usize> = (0..shape.n).collect();
    for i in 0..n_atoms {
        let j = rng.random_range(i..shape.n);
        slots.swap(i, j);
    }
    for &s in &slots[..n_atoms] {
        g.set_atom(s, Some(rng.random_range(0..shape.k)));
    }
    for a in 0..n_atoms {
        for b in a + 1..n_atoms {
            if rng.random::<f64>() < density {
                g.set_bond(slots[a], slots[b], Some(rng.random_range(0..shape.c)));
            }
        }
    }
    g
}

/// Connected, valence-feasible graph: a random tree with a few extra bonds,
/// repaired by the correction routine and re-drawn until it passes.
pub fn random_valid_graph<R: Rng + ?Sized>(
    cfg: &GraphConfig,
    max_atoms: usize,
    rng: &mut R,
) -> MolGraph {
    let table = ValenceTable::from_vocab(&cfg.vocab);
    let shape = cfg.shape();
    loop {
        let n = rng.random_range(1..=max_atoms.min(shape.n));
        let mut g = MolGraph::empty(shape);
        for i in 0..n {
            g.set_atom(i, Some(rng.random_range(0..shape.k)));
        }
        for i in 1..n {
            let j = rng.random_range(0..i);
            let ch = if rng.random::<f64>() < 0.7 {
                0
            } else {
                rng.random_range(0..shape.c)
            };
            g.set_bond(i, j, Some(ch));
        }
        for _ in 0..rng.random_range(0..3) {
            let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
            if i != j && g.bond(i, j).is_none() {
                g.set_bond(i, j, Some(0));
            }
        }
        let g = validity_correction(&g, &table);
        if check_valence(&g, &table) {
            // random slot order so writers cannot rely on atoms being packed
            let mut perm: Vec<usize> = (0..shape.n).collect();
            for i in (1..shape.n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            return g.permuted(&perm);
        }
    }
}

/// Dense Jacobian of `f` at `x` by central differences.
pub fn numeric_jacobian(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> DMatrix<f64> {
    let m = f(x).len();
    let mut jac = DMatrix::zeros(m, x.len());
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        xp[j] = x[j] + h;
        let up = f(&xp);
        xp[j] = x[j] - h;
        let down = f(&xp);
        xp[j] = x[j];
        for i in 0..m {
            jac[(i, j)] = (up[i] - down[i]) / (2.0 * h);
        }
    }
    jac
}

/// `log|det J|` from the LU factors.
pub fn log_abs_det(j: &DMatrix<f64>) -> f64 {
    let lu = j.clone().lu();
    let u = lu.u();
    (0..u.nrows()).map(|i| u[(i, i)].abs().ln()).sum()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Brute-force canonical code: the lexicographically smallest
/// (atom codes, upper-triangle bond codes) over all slot permutations of the
/// occupied atoms.
pub fn brute_canonical(g: &MolGraph) -> Vec<u32> {
    let atoms: Vec<usize> = g.occupied().collect();
    let n = atoms.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best: Option<Vec<u32>> = None;
    loop {
        let mut code = Vec::with_capacity(n + n * n / 2);
        for &p in &perm {
            code.push(g.atom(atoms[p]).unwrap() as u32);
        }
        for a in 0..n {
            for b in a + 1..n {
                code.push(
                    g.bond(atoms[perm[a]], atoms[perm[b]])
                        .map_or(0, |c| c as u32 + 1),
                );
            }
        }
        if best.as_ref().is_none_or(|b| code < *b) {
            best = Some(code);
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    best.unwrap_or_default()
}

fn next_permutation(p: &mut [usize]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let mut i = p.len() - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = p.len() - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}
