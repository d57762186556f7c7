//! SI-SDR, permutation-invariant assignment and the training losses.

use itertools::Itertools;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};

/// Power-ratio floor; `10 log10(1e-8) = -80 dB`.
pub const SI_SDR_EPS: f64 = 1e-8;
/// SI-SDR values are clamped to `±SI_SDR_LIMIT` dB.
pub const SI_SDR_LIMIT: f64 = 80.0;
/// Largest speaker count solved by exhaustive search.
pub const BRUTE_FORCE_MAX: usize = 5;

const DB: f64 = 10.0 / std::f64::consts::LN_10;

/// SI-SDR in dB and its gradient with respect to the estimate.
///
/// Both signals are mean-subtracted. The target is the projection of the
/// estimate onto the reference; the ratio of target to residual power is
/// floored at `SI_SDR_EPS` and the result clamped to `±80 dB`. The gradient
/// is zero wherever the clamp or a degenerate case decides the value.
fn si_sdr_with_grad(reference: &[f64], estimate: &[f64], want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let t = reference.len() as f64;
    let my = reference.iter().sum::<f64>() / t;
    let me = estimate.iter().sum::<f64>() / t;
    let y: Vec<f64> = reference.iter().map(|v| v - my).collect();
    let e: Vec<f64> = estimate.iter().map(|v| v - me).collect();
    let a: f64 = y.iter().map(|v| v * v).sum();
    let flat = |v: f64| (v, want_grad.then(|| vec![0.0; reference.len()]));
    if a == 0.0 {
        return flat(-SI_SDR_LIMIT);
    }
    let c: f64 = y.iter().zip(&e).map(|(p, q)| p * q).sum();
    let alpha = c / a;
    let noise: Vec<f64> = e.iter().zip(&y).map(|(q, p)| q - alpha * p).collect();
    let p_target = alpha * alpha * a;
    let p_noise: f64 = noise.iter().map(|v| v * v).sum();
    if p_target == 0.0 {
        return flat(-SI_SDR_LIMIT);
    }
    if p_noise == 0.0 {
        return flat(SI_SDR_LIMIT);
    }
    let ratio = p_target / p_noise;
    let value = DB * ratio.ln();
    if ratio <= SI_SDR_EPS || value <= -SI_SDR_LIMIT {
        return flat(-SI_SDR_LIMIT);
    }
    if value >= SI_SDR_LIMIT {
        return flat(SI_SDR_LIMIT);
    }
    // d/de' of 10 log10(c^2 / a) - 10 log10 ||n||^2; both terms are already
    // zero-mean, so the mean subtraction leaves them unchanged.
    let grad = want_grad.then(|| {
        y.iter()
            .zip(&noise)
            .map(|(yy, nn)| DB * (2.0 * yy / c - 2.0 * nn / p_noise))
            .collect()
    });
    (value, grad)
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("signal lengths differ: {a} vs {b}")));
    }
    if a == 0 {
        return Err(Error::Shape("signals are empty".into()));
    }
    Ok(())
}

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossy()).collect()
}

/// Scale-invariant signal-to-distortion ratio in dB.
pub fn si_sdr<T: Real>(reference: &[T], estimate: &[T]) -> Result<f64> {
    check_lengths(reference.len(), estimate.len())?;
    Ok(si_sdr_with_grad(&to_f64(reference), &to_f64(estimate), false).0)
}

/// Best reference-to-estimate assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct PitAssignment {
    /// `permutation[c]` is the estimate matched to reference `c`.
    pub permutation: Vec<usize>,
    /// Mean SI-SDR of the matched pairs, dB.
    pub score: f64,
}

fn assignment_score(matrix: &[Vec<f64>], perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(r, &e)| matrix[r][e]).sum::<f64>() / perm.len() as f64
}

/// Exhaustive search over all `C!` permutations of a `C x C` score matrix
/// (`matrix[r][e]` scores reference `r` against estimate `e`). The first
/// maximum in lexicographic order wins.
pub fn brute_force_assignment(matrix: &[Vec<f64>]) -> PitAssignment {
    let c = matrix.len();
    let mut best = PitAssignment {
        permutation: (0..c).collect(),
        score: f64::NEG_INFINITY,
    };
    for perm in (0..c).permutations(c) {
        let score = assignment_score(matrix, &perm);
        if score > best.score {
            best = PitAssignment {
                permutation: perm,
                score,
            };
        }
    }
    best
}

/// Maximum-score assignment by the Hungarian method with row and column
/// potentials, `O(C^3)`.
pub fn hungarian_assignment(matrix: &[Vec<f64>]) -> PitAssignment {
    let n = matrix.len();
    // minimize cost = -score; 1-based arrays with a virtual column 0
    let cost = |i: usize, j: usize| -matrix[i - 1][j - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut permutation = vec![0; n];
    for j in 1..=n {
        permutation[row_of[j] - 1] = j - 1;
    }
    let score = assignment_score(matrix, &permutation);
    PitAssignment { permutation, score }
}

fn solve(matrix: &[Vec<f64>]) -> PitAssignment {
    if matrix.len() <= BRUTE_FORCE_MAX {
        brute_force_assignment(matrix)
    } else {
        hungarian_assignment(matrix)
    }
}

/// Pairwise SI-SDR, `matrix[r][e]`.
pub fn si_sdr_matrix<S: AsRef<[f64]>>(references: &[S], estimates: &[S]) -> Result<Vec<Vec<f64>>> {
    if references.len() != estimates.len() || references.is_empty() {
        return Err(Error::Shape(format!(
            "PIT needs equal, non-zero counts: {} references vs {} estimates",
            references.len(),
            estimates.len()
        )));
    }
    references
        .iter()
        .map(|r| {
            estimates
                .iter()
                .map(|e| {
                    check_lengths(r.as_ref().len(), e.as_ref().len())?;
                    Ok(si_sdr_with_grad(r.as_ref(), e.as_ref(), false).0)
                })
                .collect()
        })
        .collect()
}

/// Utterance-level PIT: the permutation maximizing mean SI-SDR.
pub fn pit_assign<S: AsRef<[f64]>>(references: &[S], estimates: &[S]) -> Result<PitAssignment> {
    Ok(solve(&si_sdr_matrix(references, estimates)?))
}

/// `-(1/N) sum_n pit_score_n`, with the permutation solved per scale.
pub fn recon_loss<S: AsRef<[f64]>>(per_scale: &[Vec<S>], references: &[S]) -> Result<f64> {
    if per_scale.is_empty() {
        return Err(Error::Shape("reconstruction loss needs at least one scale".into()));
    }
    let mut total = 0.0;
    for scale in per_scale {
        total += pit_assign(references, scale)?.score;
    }
    Ok(-total / per_scale.len() as f64)
}

/// Unweighted sum of the two training terms.
pub fn total_loss(recon: f64, attractor: f64) -> f64 {
    recon + attractor
}

/// PIT-SI-SDR loss of one scale, recorded on the graph.
///
/// `estimates: [B, C, T]`, `references: [B, C, T]`. The value is the
/// negative mean (over batch and speakers) SI-SDR under each item's best
/// permutation; its gradient flows into the matched estimates only.
pub fn pit_loss_var<T: Real>(g: &mut Graph<T>, estimates: Var, references: &Tensor<T>) -> Result<Var> {
    let es = g.shape(estimates).to_vec();
    if es.len() != 3 || es != references.shape() {
        return Err(Error::Shape(format!(
            "estimates {es:?} and references {:?} must both be [B, C, T]",
            references.shape()
        )));
    }
    let (b, c, t) = (es[0], es[1], es[2]);
    let est = to_f64(g.value(estimates).data());
    let refs = to_f64(references.data());
    let pairs = (b * c) as f64;
    let mut value = 0.0;
    let mut grad = vec![T::zero(); b * c * t];
    for bi in 0..b {
        let sig = |data: &[f64], k: usize| data[(bi * c + k) * t..(bi * c + k + 1) * t].to_vec();
        let r: Vec<Vec<f64>> = (0..c).map(|k| sig(&refs, k)).collect();
        let e: Vec<Vec<f64>> = (0..c).map(|k| sig(&est, k)).collect();
        let assignment = solve(&si_sdr_matrix(&r, &e)?);
        for (ri, &ei) in assignment.permutation.iter().enumerate() {
            let (v, gr) = si_sdr_with_grad(&r[ri], &e[ei], true);
            value -= v / pairs;
            let dst = &mut grad[(bi * c + ei) * t..(bi * c + ei + 1) * t];
            for (d, gv) in dst.iter_mut().zip(gr.unwrap()) {
                *d = T::c(-gv / pairs);
            }
        }
    }
    g.scalar_fn(estimates, T::c(value), grad)
}

/// Mean over scales of [`pit_loss_var`].
pub fn recon_loss_var<T: Real>(g: &mut Graph<T>, per_scale: &[Var], references: &Tensor<T>) -> Result<Var> {
    if per_scale.is_empty() {
        return Err(Error::Shape("reconstruction loss needs at least one scale".into()));
    }
    let mut acc = pit_loss_var(g, per_scale[0], references)?;
    for &s in &per_scale[1..] {
        let l = pit_loss_var(g, s, references)?;
        acc = g.add(acc, l)?;
    }
    Ok(g.scale(acc, T::c(1.0 / per_scale.len() as f64)))
}
