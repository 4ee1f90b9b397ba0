//! Informationally complete POVM machinery.
//!
//! A fixed four-outcome qubit frame maps density matrices to outcome
//! probability distributions and back.  The master equation becomes a
//! linear flow on probabilities, generated by real blocks that touch at
//! most two sites at a time, and observables are recovered either
//! exactly from outcome marginals or statistically from sampled outcome
//! strings through the dual frame.

use ndarray::Array2;
use rand::Rng;
use thiserror::Error;

use crate::ed::{self, DenseState};
use crate::linalg;
use crate::model::LindbladTermSet;
use crate::series::{EngineTag, ObservablePoint, ObservableSeries, RunMeta, TimeGrid};
use crate::C64;

/// Dense probability vectors over 4^n outcomes stay affordable up to
/// this many emitters; the exact POVM flow is an oracle, not a scaling
/// engine.
pub const POVM_DENSE_GUARD: usize = 7;

/// Allowed drift of the total probability during exact integration.
const NORMALIZATION_DRIFT_TOL: f64 = 1e-8;

/// Probabilities may dip this far below zero from integrator roundoff
/// before the run is flagged.
const QUASI_NEGATIVE_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PovmError {
    #[error("dense POVM machinery is limited to {max} emitters, got {n}")]
    GuardExceeded { n: usize, max: usize },
    #[error("distribution has {got} entries but {n} emitters need {expected}")]
    LengthMismatch { n: usize, got: usize, expected: usize },
    #[error("probabilities sum to {sum} instead of 1")]
    NotNormalized { sum: f64 },
    #[error("total probability drifted by {drift:.3e} during integration")]
    NormalizationDrift { drift: f64 },
    #[error("observable estimation needs at least one sample")]
    NoSamples,
    #[error("sample {index} has length {got}, expected {expected}")]
    SampleLength { index: usize, got: usize, expected: usize },
    #[error("sample {index} contains outcome digit {digit}, outcomes are 0..=3")]
    SampleDigit { index: usize, digit: u8 },
    #[error("state has {got} emitters but the frame map was asked for {expected}")]
    StateMismatch { got: usize, expected: usize },
}

/// The four frame elements and their duals.
///
/// The elements are thirds of projectors onto the spin-up eigenvectors
/// of the three Pauli axes plus the remainder that completes them to the
/// identity.  The duals come from inverting the Gram matrix, so
/// `tr(element(a) * dual(b))` is exactly the Kronecker delta and every
/// dual has unit trace.
#[derive(Debug, Clone)]
pub struct Pauli4Frame {
    elements: [Array2<C64>; 4],
    duals: [Array2<C64>; 4],
}

impl Pauli4Frame {
    pub fn element(&self, a: usize) -> &Array2<C64> {
        &self.elements[a]
    }

    pub fn dual(&self, b: usize) -> &Array2<C64> {
        &self.duals[b]
    }

    /// Gram matrix of the frame elements.
    pub fn gram(&self) -> [[f64; 4]; 4] {
        let mut t = [[0.0; 4]; 4];
        for a in 0..4 {
            for b in 0..4 {
                t[a][b] = trace2(&linalg::matmul(&self.elements[a], &self.elements[b])).re;
            }
        }
        t
    }
}

fn trace2(m: &Array2<C64>) -> C64 {
    (0..m.dim().0).map(|i| m[[i, i]]).sum()
}

/// Gauss-Jordan inverse with partial pivoting; `None` when singular.
fn invert4(t: &[[f64; 4]; 4]) -> Option<[[f64; 4]; 4]> {
    let mut a = *t;
    let mut inv = [[0.0; 4]; 4];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for col in 0..4 {
        let pivot_row = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot_row][col].abs() < 1e-14 {
            return None;
        }
        a.swap(col, pivot_row);
        inv.swap(col, pivot_row);
        let pivot = a[col][col];
        for k in 0..4 {
            a[col][k] /= pivot;
            inv[col][k] /= pivot;
        }
        for row in 0..4 {
            if row == col {
                continue;
            }
            let factor = a[row][col];
            if factor == 0.0 {
                continue;
            }
            for k in 0..4 {
                a[row][k] -= factor * a[col][k];
                inv[row][k] -= factor * inv[col][k];
            }
        }
    }
    Some(inv)
}

/// Builds the frame and its dual.
///
/// The element traces are (1/3, 1/3, 1/3, 1) and the local outcome
/// probabilities of the maximally mixed state are (1/6, 1/6, 1/6, 1/2).
pub fn build_frames() -> Pauli4Frame {
    let zero = C64::new(0.0, 0.0);
    let third = C64::new(1.0 / 3.0, 0.0);
    let sixth = C64::new(1.0 / 6.0, 0.0);
    let i = C64::new(0.0, 1.0);

    // Projectors onto the +1 eigenvectors of sigma^z, sigma^x, sigma^y
    // in the (down, up) basis, each scaled by 1/3.
    let m0 = Array2::from_shape_vec((2, 2), vec![zero, zero, zero, third]).unwrap();
    let m1 = Array2::from_shape_vec((2, 2), vec![sixth, sixth, sixth, sixth]).unwrap();
    let m2 = Array2::from_shape_vec((2, 2), vec![sixth, -i * sixth, i * sixth, sixth]).unwrap();
    let mut m3 = Array2::<C64>::eye(2);
    m3 -= &m0;
    m3 -= &m1;
    m3 -= &m2;
    let elements = [m0, m1, m2, m3];

    let mut gram = [[0.0; 4]; 4];
    for a in 0..4 {
        for b in 0..4 {
            gram[a][b] = trace2(&linalg::matmul(&elements[a], &elements[b])).re;
        }
    }
    let inv = invert4(&gram).expect("the Pauli-4 Gram matrix is invertible");
    let duals = std::array::from_fn(|b| {
        let mut n = Array2::<C64>::zeros((2, 2));
        for (a, element) in elements.iter().enumerate() {
            n.scaled_add(C64::new(inv[b][a], 0.0), element);
        }
        n
    });
    Pauli4Frame { elements, duals }
}

/// Dense outcome-probability vector over 4^n outcome strings, indexed
/// with site 0 as the most significant base-four digit.
#[derive(Debug, Clone)]
pub struct PovmDistribution {
    pub n: usize,
    pub probs: Vec<f64>,
}

impl PovmDistribution {
    pub fn validate(&self) -> Result<(), PovmError> {
        let expected = 1usize << (2 * self.n);
        if self.probs.len() != expected {
            return Err(PovmError::LengthMismatch { n: self.n, got: self.probs.len(), expected });
        }
        let sum: f64 = self.probs.iter().sum();
        if (sum - 1.0).abs() > 1e-10 {
            return Err(PovmError::NotNormalized { sum });
        }
        Ok(())
    }

    /// Most negative entry; zero for a proper distribution.
    pub fn negativity(&self) -> f64 {
        self.probs.iter().cloned().fold(0.0, f64::min)
    }
}

fn check_guard(n: usize) -> Result<(), PovmError> {
    if n == 0 || n > POVM_DENSE_GUARD {
        return Err(PovmError::GuardExceeded { n, max: POVM_DENSE_GUARD });
    }
    Ok(())
}

/// Maps a density matrix to its outcome distribution, contracting one
/// site at a time: p(a) = tr(rho * prod_j element(a_j)).
pub fn rho_to_probs(state: &DenseState, frame: &Pauli4Frame) -> Result<PovmDistribution, PovmError> {
    let n = state.n;
    check_guard(n)?;
    let dim = 1usize << n;
    if state.matrix.dim() != (dim, dim) {
        return Err(PovmError::StateMismatch { got: state.matrix.dim().0, expected: dim });
    }
    // work[a_prefix, k_rest, b_rest]: outcome digits already contracted
    // for the leading sites, matrix indices remaining for the rest.
    let mut work: Vec<C64> = state.matrix.iter().copied().collect();
    for j in 0..n {
        let prefix = 1usize << (2 * j);
        let cur = 1usize << (n - j);
        let half = cur / 2;
        let mut next = vec![C64::new(0.0, 0.0); prefix * 4 * half * half];
        for a in 0..prefix {
            for (d, element) in frame.elements.iter().enumerate() {
                for kj in 0..2 {
                    for bj in 0..2 {
                        // tr(rho M) pairs rho[k, b] with M[b, k].
                        let coeff = element[[bj, kj]];
                        if coeff == C64::new(0.0, 0.0) {
                            continue;
                        }
                        for kr in 0..half {
                            for br in 0..half {
                                let src = a * cur * cur + (kj * half + kr) * cur + (bj * half + br);
                                let dst = (a * 4 + d) * half * half + kr * half + br;
                                next[dst] += coeff * work[src];
                            }
                        }
                    }
                }
            }
        }
        work = next;
    }
    let probs = work.iter().map(|z| z.re).collect();
    Ok(PovmDistribution { n, probs })
}

/// Reconstructs the density matrix from an outcome distribution through
/// the dual frame: rho = sum_a p(a) * prod_j dual(a_j).
pub fn probs_to_rho(dist: &PovmDistribution, frame: &Pauli4Frame) -> Result<DenseState, PovmError> {
    let n = dist.n;
    check_guard(n)?;
    let expected = 1usize << (2 * n);
    if dist.probs.len() != expected {
        return Err(PovmError::LengthMismatch { n, got: dist.probs.len(), expected });
    }
    let mut work: Vec<C64> = dist.probs.iter().map(|&p| C64::new(p, 0.0)).collect();
    for j in (0..n).rev() {
        let prefix = 1usize << (2 * j);
        let half = 1usize << (n - j - 1);
        let cur = half * 2;
        let mut next = vec![C64::new(0.0, 0.0); prefix * cur * cur];
        for a in 0..prefix {
            for (d, dual) in frame.duals.iter().enumerate() {
                for kj in 0..2 {
                    for bj in 0..2 {
                        let coeff = dual[[kj, bj]];
                        if coeff == C64::new(0.0, 0.0) {
                            continue;
                        }
                        for kr in 0..half {
                            for br in 0..half {
                                let src = (a * 4 + d) * half * half + kr * half + br;
                                let dst = a * cur * cur + (kj * half + kr) * cur + (bj * half + br);
                                next[dst] += coeff * work[src];
                            }
                        }
                    }
                }
            }
        }
        work = next;
    }
    let dim = 1usize << n;
    let matrix = Array2::from_shape_vec((dim, dim), work).expect("dimensions agree");
    Ok(DenseState { n, matrix })
}

/// Probability-space generator of the master equation.
///
/// One real 4x4 block per site carries the drive and the local decay;
/// one real 16x16 block per unordered site pair carries the coherent
/// pair coupling together with both dissipative cross terms of that
/// pair, so every block preserves Hermiticity on its own and the block
/// count stays at n + n(n-1)/2.
#[derive(Debug, Clone)]
pub struct PovmGenerator {
    pub n: usize,
    phases: Vec<f64>,
    frame: Pauli4Frame,
    config_hash: u64,
    site_blocks: Vec<Array2<f64>>,
    pair_blocks: Vec<(usize, usize, Array2<f64>)>,
}

impl PovmGenerator {
    pub fn frame(&self) -> &Pauli4Frame {
        &self.frame
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    pub fn site_block(&self, j: usize) -> &Array2<f64> {
        &self.site_blocks[j]
    }

    pub fn pair_blocks(&self) -> &[(usize, usize, Array2<f64>)] {
        &self.pair_blocks
    }

    pub fn block_count(&self) -> usize {
        self.site_blocks.len() + self.pair_blocks.len()
    }

    /// Fingerprint of the physical configuration the generator was
    /// built from; stamped into run metadata.
    pub fn config_hash(&self) -> u64 {
        self.config_hash
    }
}

fn single_site_ops() -> (Array2<C64>, Array2<C64>, Array2<C64>, Array2<C64>) {
    let zero = C64::new(0.0, 0.0);
    let one = C64::new(1.0, 0.0);
    let sm = Array2::from_shape_vec((2, 2), vec![zero, one, zero, zero]).unwrap();
    let sp = Array2::from_shape_vec((2, 2), vec![zero, zero, one, zero]).unwrap();
    let sx = Array2::from_shape_vec((2, 2), vec![zero, one, one, zero]).unwrap();
    let num = linalg::matmul(&sp, &sm);
    (sm, sp, sx, num)
}

/// tr(M_a S[N^b]) for the single-site superoperator combining the drive
/// commutator and the local decay channel.
fn site_block(frame: &Pauli4Frame, omega: f64, decay_rate: f64) -> Array2<f64> {
    let (sm, sp, sx, num) = single_site_ops();
    let mut block = Array2::zeros((4, 4));
    for b in 0..4 {
        let x = frame.dual(b);
        let mut s = Array2::<C64>::zeros((2, 2));
        if omega != 0.0 {
            let comm = &linalg::matmul(&sx, x) - &linalg::matmul(x, &sx);
            s.scaled_add(C64::new(0.0, -omega), &comm);
        }
        if decay_rate != 0.0 {
            let sandwich = linalg::matmul(&linalg::matmul(&sm, x), &sp);
            let anti = &linalg::matmul(&num, x) + &linalg::matmul(x, &num);
            let mut d = sandwich;
            d.scaled_add(C64::new(-0.5, 0.0), &anti);
            s.scaled_add(C64::new(decay_rate, 0.0), &d);
        }
        for a in 0..4 {
            let v = trace2(&linalg::matmul(frame.element(a), &s));
            debug_assert!(v.im.abs() < 1e-10, "site block entries must be real");
            block[[a, b]] = v.re;
        }
    }
    block
}

/// tr((M_a x M_a') S[N^b x N^b']) for the full two-site superoperator of
/// one unordered pair: the coherent coupling in both directions plus
/// both dissipative cross terms.  `coupling` is the coherent amplitude
/// from the first to the second factor and `cross` is the summed
/// dissipative weight in that same direction; the reversed direction
/// enters through the complex conjugates.
fn pair_block(frame: &Pauli4Frame, coupling: C64, cross: C64) -> Array2<f64> {
    let (sm, sp, _, _) = single_site_ops();
    let id2 = Array2::<C64>::eye(2);
    let hop = ed::kron(&sp, &sm);
    let hop_rev = ed::kron(&sm, &sp);
    let sm_second = ed::kron(&id2, &sm);
    let sp_first = ed::kron(&sp, &id2);
    let sm_first = ed::kron(&sm, &id2);
    let sp_second = ed::kron(&id2, &sp);

    let mut block = Array2::zeros((16, 16));
    for bj in 0..4 {
        for bl in 0..4 {
            let x = ed::kron(frame.dual(bj), frame.dual(bl));
            let mut s = Array2::<C64>::zeros((4, 4));
            // -i J [h, X] - i conj(J) [h^dag, X]
            let comm = &linalg::matmul(&hop, &x) - &linalg::matmul(&x, &hop);
            s.scaled_add(C64::new(0.0, -1.0) * coupling, &comm);
            let comm_rev = &linalg::matmul(&hop_rev, &x) - &linalg::matmul(&x, &hop_rev);
            s.scaled_add(C64::new(0.0, -1.0) * coupling.conj(), &comm_rev);
            // w (sigma_2^- X sigma_1^+ - {h, X}/2) plus the conjugate
            // direction.
            let sandwich = linalg::matmul(&linalg::matmul(&sm_second, &x), &sp_first);
            let anti = &linalg::matmul(&hop, &x) + &linalg::matmul(&x, &hop);
            s.scaled_add(cross, &sandwich);
            s.scaled_add(cross * -0.5, &anti);
            let sandwich_rev = linalg::matmul(&linalg::matmul(&sm_first, &x), &sp_second);
            let anti_rev = &linalg::matmul(&hop_rev, &x) + &linalg::matmul(&x, &hop_rev);
            s.scaled_add(cross.conj(), &sandwich_rev);
            s.scaled_add(cross.conj() * -0.5, &anti_rev);

            for aj in 0..4 {
                for al in 0..4 {
                    let m = ed::kron(frame.element(aj), frame.element(al));
                    let v = trace2(&linalg::matmul(&m, &s));
                    debug_assert!(v.im.abs() < 1e-10, "pair block entries must be real");
                    block[[4 * aj + al, 4 * bj + bl]] = v.re;
                }
            }
        }
    }
    block
}

/// Maps every Liouvillian term into its outcome-space block.
pub fn build_generator_blocks(terms: &LindbladTermSet, frame: &Pauli4Frame) -> PovmGenerator {
    let n = terms.n;
    let site_blocks = (0..n)
        .map(|j| {
            let decay: f64 = terms
                .collective_jumps
                .iter()
                .map(|(rate, v)| rate * v[j].norm_sqr())
                .sum();
            site_block(frame, terms.drive_amplitude, decay)
        })
        .collect();
    let mut pair_blocks = Vec::new();
    for j in 0..n {
        for l in (j + 1)..n {
            let coupling = terms.coherent_pair_couplings[[j, l]];
            let cross: C64 = terms
                .collective_jumps
                .iter()
                .map(|(rate, v)| C64::new(*rate, 0.0) * v[j].conj() * v[l])
                .sum();
            if coupling.norm() == 0.0 && cross.norm() == 0.0 {
                continue;
            }
            pair_blocks.push((j, l, pair_block(frame, coupling, cross)));
        }
    }
    PovmGenerator {
        n,
        phases: terms.phases.clone(),
        frame: frame.clone(),
        config_hash: terms.fingerprint(),
        site_blocks,
        pair_blocks,
    }
}

/// Applies the generator to a probability vector: out = A p.
pub fn apply_generator(gen: &PovmGenerator, p: &[f64], out: &mut [f64]) {
    let n = gen.n;
    let len = 1usize << (2 * n);
    assert_eq!(p.len(), len);
    assert_eq!(out.len(), len);
    out.fill(0.0);
    for (j, block) in gen.site_blocks.iter().enumerate() {
        let stride = 1usize << (2 * (n - 1 - j));
        let outer_count = 1usize << (2 * j);
        for outer in 0..outer_count {
            let base_outer = outer * 4 * stride;
            for inner in 0..stride {
                let base = base_outer + inner;
                for dp in 0..4 {
                    let mut acc = 0.0;
                    for d in 0..4 {
                        acc += block[[dp, d]] * p[base + d * stride];
                    }
                    out[base + dp * stride] += acc;
                }
            }
        }
    }
    for (j, l, block) in &gen.pair_blocks {
        let sj = 1usize << (2 * (n - 1 - j));
        let sl = 1usize << (2 * (n - 1 - l));
        for idx in 0..len {
            let aj = (idx / sj) % 4;
            let al = (idx / sl) % 4;
            let base = idx - aj * sj - al * sl;
            let row = 4 * aj + al;
            let mut acc = 0.0;
            for bj in 0..4 {
                for bl in 0..4 {
                    acc += block[[row, 4 * bj + bl]] * p[base + bj * sj + bl * sl];
                }
            }
            out[idx] += acc;
        }
    }
}

/// Dense matrix of the assembled generator; for cross-checks on small
/// systems.
pub fn dense_generator_matrix(gen: &PovmGenerator) -> Array2<f64> {
    assert!(gen.n <= 4, "dense generator assembly is limited to small systems");
    let len = 1usize << (2 * gen.n);
    let mut a = Array2::zeros((len, len));
    let mut unit = vec![0.0; len];
    let mut col = vec![0.0; len];
    for b in 0..len {
        unit[b] = 1.0;
        apply_generator(gen, &unit, &mut col);
        for r in 0..len {
            a[[r, b]] = col[r];
        }
        unit[b] = 0.0;
    }
    a
}

/// Per-dual traces of the operators entering the observables.
struct DualFactors {
    z: [f64; 4],
    raise: [C64; 4],
    excited: [f64; 4],
}

fn dual_factors(frame: &Pauli4Frame) -> DualFactors {
    let (_, sp, _, num) = single_site_ops();
    let mut z = [0.0; 4];
    let mut raise = [C64::new(0.0, 0.0); 4];
    let mut excited = [0.0; 4];
    let sz = {
        let mut m = Array2::<C64>::zeros((2, 2));
        m[[0, 0]] = C64::new(-1.0, 0.0);
        m[[1, 1]] = C64::new(1.0, 0.0);
        m
    };
    for d in 0..4 {
        z[d] = trace2(&linalg::matmul(&sz, frame.dual(d))).re;
        raise[d] = trace2(&linalg::matmul(&sp, frame.dual(d)));
        excited[d] = trace2(&linalg::matmul(&num, frame.dual(d))).re;
    }
    DualFactors { z, raise, excited }
}

/// Exact observables from one- and two-site outcome marginals.
fn measure_distribution(dist: &PovmDistribution, frame: &Pauli4Frame, phases: &[f64]) -> ObservablePoint {
    let n = dist.n;
    let factors = dual_factors(frame);
    let len = dist.probs.len();
    let mut singles = vec![[0.0f64; 4]; n];
    let mut pairs = vec![[0.0f64; 16]; n * n];
    for idx in 0..len {
        let p = dist.probs[idx];
        if p == 0.0 {
            continue;
        }
        let mut digits = [0usize; POVM_DENSE_GUARD];
        let mut rest = idx;
        for j in (0..n).rev() {
            digits[j] = rest % 4;
            rest /= 4;
        }
        for j in 0..n {
            singles[j][digits[j]] += p;
            for l in (j + 1)..n {
                pairs[j * n + l][4 * digits[j] + digits[l]] += p;
            }
        }
    }

    let z_locals: Vec<f64> = (0..n)
        .map(|j| (0..4).map(|d| singles[j][d] * factors.z[d]).sum())
        .collect();
    let z_sum: f64 = z_locals.iter().sum();
    let norm: f64 = dist.probs.iter().sum();

    let mut zz_sum = 0.0;
    let mut ir_pairs = 0.0;
    for j in 0..n {
        for l in (j + 1)..n {
            let q = &pairs[j * n + l];
            let mut zz = 0.0;
            let mut pm = C64::new(0.0, 0.0);
            for d in 0..4 {
                for e in 0..4 {
                    let w = q[4 * d + e];
                    if w == 0.0 {
                        continue;
                    }
                    zz += w * factors.z[d] * factors.z[e];
                    // <sigma_j^+ sigma_l^->: raising factor at j, its
                    // conjugate (the lowering trace) at l.
                    pm += w * factors.raise[d] * factors.raise[e].conj();
                }
            }
            zz_sum += zz;
            let delta = phases[l] - phases[j];
            ir_pairs += 2.0 * (C64::from_polar(1.0, delta) * pm).re;
        }
    }
    let excited: f64 = (0..n)
        .map(|j| (0..4).map(|d| singles[j][d] * factors.excited[d]).sum::<f64>())
        .sum();

    let nf = n as f64;
    let z = z_sum / nf;
    // The diagonal of the double sum contributes the identity once per
    // site, estimated by the total probability mass.
    let fz2 = (2.0 * zz_sum + nf * norm - z_sum * z_sum) / nf;
    let ir = (excited + ir_pairs) / nf;
    ObservablePoint::exact(z, fz2, ir)
}

/// Integrates the probability flow dp/dt = A p with classical RK4 and
/// records observables at every grid point.
///
/// The generator conserves total probability exactly, so the sum is
/// monitored rather than renormalized; drift beyond the tolerance aborts
/// the run.  Transient negative entries beyond the quasi-probability
/// tolerance are reported as a warning on the series.
pub fn evolve_povm_exact(
    gen: &PovmGenerator,
    p0: &PovmDistribution,
    grid: &TimeGrid,
) -> Result<ObservableSeries, PovmError> {
    check_guard(gen.n)?;
    if p0.n != gen.n {
        return Err(PovmError::StateMismatch { got: p0.n, expected: gen.n });
    }
    p0.validate()?;

    let len = p0.probs.len();
    let mut p = p0.probs.clone();
    let mut k1 = vec![0.0; len];
    let mut k2 = vec![0.0; len];
    let mut k3 = vec![0.0; len];
    let mut k4 = vec![0.0; len];
    let mut stage = vec![0.0; len];

    let mut series = ObservableSeries::new(
        EngineTag::PovmExact,
        RunMeta::new(grid.dt, gen.config_hash),
    );
    let dist0 = PovmDistribution { n: gen.n, probs: p.clone() };
    series.push(0.0, measure_distribution(&dist0, &gen.frame, &gen.phases));

    let dt = grid.dt;
    let mut most_negative = 0.0f64;
    for step in 1..=grid.steps() {
        apply_generator(gen, &p, &mut k1);
        for i in 0..len {
            stage[i] = p[i] + 0.5 * dt * k1[i];
        }
        apply_generator(gen, &stage, &mut k2);
        for i in 0..len {
            stage[i] = p[i] + 0.5 * dt * k2[i];
        }
        apply_generator(gen, &stage, &mut k3);
        for i in 0..len {
            stage[i] = p[i] + dt * k3[i];
        }
        apply_generator(gen, &stage, &mut k4);
        for i in 0..len {
            p[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }

        let sum: f64 = p.iter().sum();
        let drift = (sum - 1.0).abs();
        if drift > NORMALIZATION_DRIFT_TOL {
            return Err(PovmError::NormalizationDrift { drift });
        }
        most_negative = most_negative.min(p.iter().cloned().fold(0.0, f64::min));

        let dist = PovmDistribution { n: gen.n, probs: p.clone() };
        series.push(step as f64 * dt, measure_distribution(&dist, &gen.frame, &gen.phases));
    }
    if most_negative < -QUASI_NEGATIVE_TOL {
        series
            .meta
            .warnings
            .push(format!("quasi-probability dip to {most_negative:.3e} during integration"));
    }
    Ok(series)
}

/// Draws outcome strings from a dense distribution by inverting the
/// cumulative distribution; tiny negative entries are clipped to zero.
pub fn sample_outcomes<R: Rng>(
    dist: &PovmDistribution,
    count: usize,
    rng: &mut R,
) -> Vec<Vec<u8>> {
    let clipped: Vec<f64> = dist.probs.iter().map(|&p| p.max(0.0)).collect();
    let mut cdf = Vec::with_capacity(clipped.len());
    let mut acc = 0.0;
    for p in &clipped {
        acc += p;
        cdf.push(acc);
    }
    let total = acc;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let u: f64 = rng.gen::<f64>() * total;
        let idx = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        let mut digits = vec![0u8; dist.n];
        let mut rest = idx;
        for j in (0..dist.n).rev() {
            digits[j] = (rest % 4) as u8;
            rest /= 4;
        }
        samples.push(digits);
    }
    samples
}

/// Sample-mean observable estimates with standard errors.
///
/// Every product operator is estimated per sample as the product of
/// single-site dual traces.  The magnetization covariance combines the
/// first and second sample moments, so its standard error comes from
/// the delta method on that pair of means.
pub fn estimate_observables(
    samples: &[Vec<u8>],
    frame: &Pauli4Frame,
    phases: &[f64],
) -> Result<ObservablePoint, PovmError> {
    if samples.is_empty() {
        return Err(PovmError::NoSamples);
    }
    let n = phases.len();
    let factors = dual_factors(frame);
    let count = samples.len();

    let mut l_vals = Vec::with_capacity(count);
    let mut s2_vals = Vec::with_capacity(count);
    let mut ir_vals = Vec::with_capacity(count);
    for (index, sample) in samples.iter().enumerate() {
        if sample.len() != n {
            return Err(PovmError::SampleLength { index, got: sample.len(), expected: n });
        }
        let mut l = 0.0;
        let mut sq = 0.0;
        let mut excited = 0.0;
        for &d in sample {
            if d > 3 {
                return Err(PovmError::SampleDigit { index, digit: d });
            }
            let t = factors.z[d as usize];
            l += t;
            sq += t * t;
            excited += factors.excited[d as usize];
        }
        let mut ir_cross = 0.0;
        for j in 0..n {
            let tj = factors.raise[samples[index][j] as usize];
            for lsite in (j + 1)..n {
                let tl = factors.raise[samples[index][lsite] as usize];
                let delta = phases[lsite] - phases[j];
                ir_cross += 2.0 * (C64::from_polar(1.0, delta) * tj * tl.conj()).re;
            }
        }
        // Second moment of the total magnetization: cross products of
        // local factors plus one identity per diagonal term.
        l_vals.push(l);
        s2_vals.push(l * l - sq + n as f64);
        ir_vals.push((excited + ir_cross) / n as f64);
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let m_l = mean(&l_vals);
    let m_s2 = mean(&s2_vals);
    let m_ir = mean(&ir_vals);

    let var = |v: &[f64], m: f64| {
        if v.len() < 2 {
            return 0.0;
        }
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
    };
    let cov = |a: &[f64], ma: f64, b: &[f64], mb: f64| {
        if a.len() < 2 {
            return 0.0;
        }
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - ma) * (y - mb))
            .sum::<f64>()
            / (a.len() - 1) as f64
    };

    let nf = n as f64;
    let cf = count as f64;
    let z = m_l / nf;
    let z_err = (var(&l_vals, m_l) / cf).sqrt() / nf;
    let fz2 = (m_s2 - m_l * m_l) / nf;
    // Delta method for g(m_l, m_s2) = (m_s2 - m_l^2) / n.
    let g_l = -2.0 * m_l / nf;
    let g_s2 = 1.0 / nf;
    let fz2_var = (g_l * g_l * var(&l_vals, m_l)
        + g_s2 * g_s2 * var(&s2_vals, m_s2)
        + 2.0 * g_l * g_s2 * cov(&l_vals, m_l, &s2_vals, m_s2))
        / cf;
    let fz2_err = fz2_var.max(0.0).sqrt();
    let ir = m_ir;
    let ir_err = (var(&ir_vals, m_ir) / cf).sqrt();

    Ok(ObservablePoint {
        z,
        fz2,
        ir,
        z_err,
        fz2_err,
        ir_err,
    })
}
