//! Tensor-network engine for the vectorized master equation.
//!
//! The density matrix is stored as a matrix-product state over fused
//! ket/bra site indices (physical dimension four per emitter, fused as
//! `a = 2*ket + bra`).  One time step applies a first-order propagator
//! `1 + dt*L` written as a matrix-product operator with bond dimension
//! ten, then compresses the state back down with a two-pass SVD sweep
//! and renormalizes the trace.
//!
//! The propagator MPO is exact at first order: pair couplings between
//! arbitrarily distant emitters factorize into site-local phases, so a
//! ten-state transition table captures the full Liouvillian without any
//! range cutoff.  Agreement with the dense superoperator is therefore a
//! strict equality check, not a Trotter approximation.

use ndarray::{Array1, Array2, Array3, Array4};
use thiserror::Error;

use crate::ed;
use crate::linalg::{self, LinalgError};
use crate::model::LindbladTermSet;
use crate::series::{EngineTag, ObservablePoint, ObservableSeries, RunMeta, TimeGrid};
use crate::C64;

/// Singular values below this fraction of the largest one at a bond are
/// treated as numerical zeros and dropped during the rank-collapse pass.
const ZERO_REL: f64 = 1e-14;

/// A trace magnitude below this bound after a step means the state has
/// collapsed numerically and renormalization would amplify noise.
const TRACE_COLLAPSE_TOL: f64 = 1e-12;

/// Tolerance used to check that a term set has the two-channel waveguide
/// structure (unit-modulus jump vectors, matching pair couplings).
const STRUCTURE_TOL: f64 = 1e-9;

/// Errors from MPO construction and time stepping.
#[derive(Debug, Error)]
pub enum TnError {
    /// The step size must be finite and nonnegative; zero yields the
    /// identity propagator.
    #[error("time step must be finite and nonnegative, got {dt}")]
    BadStep { dt: f64 },
    /// The truncation policy must keep at least one singular value.
    #[error("truncation policy requires chi_tr >= 1 and a finite nonnegative cutoff")]
    BadPolicy,
    /// The propagator automaton requires exactly two collective jump
    /// channels with counter-propagating unit-modulus mode vectors and
    /// pair couplings generated by those same channels.
    #[error("term set lacks the two-channel waveguide structure: {reason}")]
    UnsupportedTerms { reason: String },
    /// The state trace fell below the renormalization threshold.
    #[error("state trace magnitude {magnitude:.3e} collapsed below {TRACE_COLLAPSE_TOL:.0e}")]
    NumericalCollapse { magnitude: f64 },
    /// Operator entanglement needs at least one internal bond.
    #[error("operator entanglement requires at least two emitters, got {n}")]
    TooFewSites { n: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Bond-truncation policy for the compression sweep.
///
/// `chi_tr` caps the number of singular values kept at any bond and
/// `cutoff` drops singular values below `cutoff` times the largest one
/// at that bond.  Equal singular values at the cap boundary are resolved
/// by keeping the first ones in the descending order returned by the
/// factorization, which makes truncation deterministic.
#[derive(Debug, Clone, Copy)]
pub struct TruncationPolicy {
    pub chi_tr: usize,
    pub cutoff: f64,
}

impl TruncationPolicy {
    pub fn new(chi_tr: usize, cutoff: f64) -> Result<Self, TnError> {
        let policy = Self { chi_tr, cutoff };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<(), TnError> {
        if self.chi_tr == 0 || !self.cutoff.is_finite() || self.cutoff < 0.0 {
            return Err(TnError::BadPolicy);
        }
        Ok(())
    }
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        Self { chi_tr: 256, cutoff: 1e-12 }
    }
}

/// Matrix-product form of a vectorized density matrix.
///
/// Site tensors are indexed `[left bond, fused physical (dim 4), right
/// bond]` with dangling boundary bonds of dimension one.  Away from
/// `center` the tensors are kept isometric (left-isometric before the
/// center, right-isometric after it); the center tensor carries the
/// overall scale.  `discarded_weight` accumulates the relative Schmidt
/// weight dropped by every truncation since construction.
#[derive(Debug, Clone)]
pub struct VectorizedMPS {
    n: usize,
    tensors: Vec<Array3<C64>>,
    center: usize,
    discarded_weight: f64,
}

impl VectorizedMPS {
    /// Builds a product state from one fused four-component vector per
    /// site.  Each local vector is scaled to unit norm so the gauge
    /// conditions hold; the overall scale moves into the center tensor.
    pub fn product_state(locals: &[[C64; 4]]) -> Self {
        assert!(!locals.is_empty(), "product state needs at least one site");
        let mut tensors = Vec::with_capacity(locals.len());
        let mut scale = C64::new(1.0, 0.0);
        for local in locals {
            let norm = local.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            assert!(norm > 0.0, "product state factors must be nonzero");
            let mut t = Array3::zeros((1, 4, 1));
            for (a, z) in local.iter().enumerate() {
                t[[0, a, 0]] = z / norm;
            }
            tensors.push(t);
            scale *= norm;
        }
        let mut mps = Self { n: locals.len(), tensors, center: 0, discarded_weight: 0.0 };
        mps.tensors[0].mapv_inplace(|z| z * scale);
        mps
    }

    /// Vectorized all-up initial state: every emitter excited, so each
    /// site holds the fused vector of the pure local projector onto the
    /// excited level.
    pub fn vectorized_all_up(n: usize) -> Self {
        let zero = C64::new(0.0, 0.0);
        let one = C64::new(1.0, 0.0);
        Self::product_state(&vec![[zero, zero, zero, one]; n])
    }

    pub fn num_sites(&self) -> usize {
        self.n
    }

    pub fn center(&self) -> usize {
        self.center
    }

    pub fn discarded_weight(&self) -> f64 {
        self.discarded_weight
    }

    /// Internal bond dimensions, one entry per bond between adjacent
    /// sites; empty for a single emitter.
    pub fn bond_dims(&self) -> Vec<usize> {
        self.tensors.iter().take(self.n - 1).map(|t| t.dim().2).collect()
    }

    pub fn max_bond_dim(&self) -> usize {
        self.bond_dims().into_iter().max().unwrap_or(1)
    }

    /// Contracts the state to the dense fused vector of length `4^n`.
    /// Intended for cross-checks on small systems.
    pub fn to_dense_vec(&self) -> Array1<C64> {
        assert!(self.n <= 10, "dense contraction is limited to small systems");
        // running[p, r]: contraction of the first sites, p enumerating
        // their fused indices with site 0 slowest.
        let mut running = Array2::from_elem((1, 1), C64::new(1.0, 0.0));
        for t in &self.tensors {
            let (l, _, r) = t.dim();
            let p = running.dim().0;
            let mut next = Array2::zeros((p * 4, r));
            for pp in 0..p {
                for a in 0..4 {
                    for rr in 0..r {
                        let mut acc = C64::new(0.0, 0.0);
                        for ll in 0..l {
                            acc += running[[pp, ll]] * t[[ll, a, rr]];
                        }
                        next[[pp * 4 + a, rr]] = acc;
                    }
                }
            }
            running = next;
        }
        running.column(0).to_owned()
    }

    /// Inner product `<self|other>` with the left argument conjugated.
    pub fn overlap(&self, other: &VectorizedMPS) -> C64 {
        assert_eq!(self.n, other.n, "overlap requires equal site counts");
        let mut env = Array2::from_elem((1, 1), C64::new(1.0, 0.0));
        for (ta, tb) in self.tensors.iter().zip(&other.tensors) {
            let (la, _, ra) = ta.dim();
            let (lb, _, rb) = tb.dim();
            let mut next = Array2::zeros((ra, rb));
            for a in 0..4 {
                // half[ra, lb] = sum_la conj(ta[la, a, ra]) env[la, lb]
                let mut half = Array2::zeros((ra, lb));
                for rra in 0..ra {
                    for llb in 0..lb {
                        let mut acc = C64::new(0.0, 0.0);
                        for lla in 0..la {
                            acc += ta[[lla, a, rra]].conj() * env[[lla, llb]];
                        }
                        half[[rra, llb]] = acc;
                    }
                }
                for rra in 0..ra {
                    for rrb in 0..rb {
                        let mut acc = C64::new(0.0, 0.0);
                        for llb in 0..lb {
                            acc += half[[rra, llb]] * tb[[llb, a, rrb]];
                        }
                        next[[rra, rrb]] += acc;
                    }
                }
            }
            env = next;
        }
        env[[0, 0]]
    }

    pub fn norm(&self) -> f64 {
        self.overlap(self).re.max(0.0).sqrt()
    }

    /// Maximum deviation from the isometry conditions that define the
    /// canonical gauge around the current center.
    pub fn gauge_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, t) in self.tensors.iter().enumerate() {
            let (l, _, r) = t.dim();
            if i < self.center {
                // Left isometry: sum over (left, phys) of conjugate pairs
                // must give the identity on the right bond.
                for r1 in 0..r {
                    for r2 in 0..r {
                        let mut acc = C64::new(0.0, 0.0);
                        for ll in 0..l {
                            for a in 0..4 {
                                acc += t[[ll, a, r1]].conj() * t[[ll, a, r2]];
                            }
                        }
                        let target = if r1 == r2 { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) };
                        worst = worst.max((acc - target).norm());
                    }
                }
            } else if i > self.center {
                // Right isometry: sum over (phys, right) gives the
                // identity on the left bond.
                for l1 in 0..l {
                    for l2 in 0..l {
                        let mut acc = C64::new(0.0, 0.0);
                        for a in 0..4 {
                            for rr in 0..r {
                                acc += t[[l1, a, rr]] * t[[l2, a, rr]].conj();
                            }
                        }
                        let target = if l1 == l2 { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) };
                        worst = worst.max((acc - target).norm());
                    }
                }
            }
        }
        worst
    }
}

/// First-order propagator `1 + dt*L` in matrix-product form.
///
/// Site tensors are indexed `[left bond, fused row, fused column, right
/// bond]`.  Every internal bond has dimension ten independent of the
/// emitter count: the automaton needs one passive state, eight states
/// tracking an open pair coupling (four operator choices times two
/// propagation phases), and one final state.
#[derive(Debug, Clone)]
pub struct PropagatorMPO {
    n: usize,
    tensors: Vec<Array4<C64>>,
    dt: f64,
}

impl PropagatorMPO {
    pub fn num_sites(&self) -> usize {
        self.n
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Internal bond dimensions, one per bond between adjacent sites.
    pub fn bond_dims(&self) -> Vec<usize> {
        self.tensors.iter().take(self.n - 1).map(|t| t.dim().3).collect()
    }

    pub fn site_tensor(&self, i: usize) -> &Array4<C64> {
        &self.tensors[i]
    }

    /// Contracts the MPO to its dense `4^n x 4^n` matrix.  Intended for
    /// cross-checks on small systems.
    pub fn to_dense(&self) -> Array2<C64> {
        assert!(self.n <= 5, "dense MPO contraction is limited to small systems");
        // One accumulated operator block per automaton state on the
        // current bond; the left boundary starts in the single passive
        // state carried by the first tensor's unit left bond.
        let mut blocks = vec![Array2::from_elem((1, 1), C64::new(1.0, 0.0))];
        for t in &self.tensors {
            let (wl, _, _, wr) = t.dim();
            debug_assert_eq!(wl, blocks.len());
            let dim = blocks[0].dim().0 * 4;
            let mut next = vec![Array2::<C64>::zeros((dim, dim)); wr];
            for (s, block) in blocks.iter().enumerate() {
                for (sp, target) in next.iter_mut().enumerate() {
                    let mut local = Array2::zeros((4, 4));
                    let mut nonzero = false;
                    for o in 0..4 {
                        for i in 0..4 {
                            let z = t[[s, o, i, sp]];
                            if z != C64::new(0.0, 0.0) {
                                nonzero = true;
                            }
                            local[[o, i]] = z;
                        }
                    }
                    if nonzero {
                        *target += &ed::kron(block, &local);
                    }
                }
            }
            blocks = next;
        }
        blocks.pop().expect("right boundary leaves one block")
    }
}

/// Diagnostics and observables from a full tensor-network run.
#[derive(Debug, Clone)]
pub struct TnRun {
    pub series: ObservableSeries,
    /// Operator entanglement entropy at the middle bond, one value per
    /// time sample.
    pub entanglement: Vec<f64>,
    /// Largest bond dimension of the state, one value per time sample.
    pub max_bond: Vec<usize>,
    /// Peak of `entanglement` over the run.
    pub e_max: f64,
    /// Total relative Schmidt weight discarded by truncation.
    pub discarded_weight: f64,
}

// Indices of the four fused single-site superoperator factors: apply a
// lowering or raising operator on the ket side, or multiply by one from
// the right on the bra side.
const OP_AM: usize = 0;
const OP_AP: usize = 1;
const OP_BM: usize = 2;
const OP_BP: usize = 3;

/// Fused single-site matrix of `rho -> X rho Y`, namely `X kron Y^T`
/// on the fused index `a = 2*ket + bra`.
fn fused_superop(x: &Array2<C64>, y: &Array2<C64>) -> Array2<C64> {
    let mut out = Array2::zeros((4, 4));
    for kp in 0..2 {
        for bp in 0..2 {
            for k in 0..2 {
                for b in 0..2 {
                    // Transposing the right factor converts right
                    // multiplication into a matrix acting on the bra index.
                    out[[2 * kp + bp, 2 * k + b]] = x[[kp, k]] * y[[b, bp]];
                }
            }
        }
    }
    out
}

fn pauli_ops() -> (Array2<C64>, Array2<C64>, Array2<C64>, Array2<C64>) {
    let zero = C64::new(0.0, 0.0);
    let one = C64::new(1.0, 0.0);
    let sm = Array2::from_shape_vec((2, 2), vec![zero, one, zero, zero]).unwrap();
    let sp = Array2::from_shape_vec((2, 2), vec![zero, zero, one, zero]).unwrap();
    let sx = Array2::from_shape_vec((2, 2), vec![zero, one, one, zero]).unwrap();
    let id = Array2::eye(2);
    (sm, sp, sx, id)
}

/// The four fused pair-coupling factors: ket lowering, ket raising, and
/// their bra-side counterparts (right multiplication by the adjoint
/// operators).
fn pair_ops() -> [Array2<C64>; 4] {
    let (sm, sp, _, id) = pauli_ops();
    [
        fused_superop(&sm, &id), // OP_AM: rho -> sigma^- rho
        fused_superop(&sp, &id), // OP_AP: rho -> sigma^+ rho
        fused_superop(&id, &sp), // OP_BM: rho -> rho sigma^+
        fused_superop(&id, &sm), // OP_BP: rho -> rho sigma^-
    ]
}

/// Single-site part of the Liouvillian in fused form: the local drive
/// plus the self-terms of both collective decay channels.
fn local_liouvillian(omega: f64, gamma_total: f64) -> Array2<C64> {
    let (sm, sp, sx, id) = pauli_ops();
    let num = linalg::matmul(&sp, &sm);
    let mut l = Array2::<C64>::zeros((4, 4));
    let minus_i = C64::new(0.0, -1.0);
    l += &(&(&fused_superop(&sx, &id) - &fused_superop(&id, &sx)) * (minus_i * omega));
    let mut decay = fused_superop(&sm, &sp);
    decay -= &(&fused_superop(&num, &id) * C64::new(0.5, 0.0));
    decay -= &(&fused_superop(&id, &num) * C64::new(0.5, 0.0));
    l += &(&decay * C64::new(gamma_total, 0.0));
    l
}

/// Extracts the two channel rates from a term set, verifying that the
/// jump vectors are the counter-propagating phase vectors of the stored
/// mode phases and that the pair couplings are exactly the ones those
/// channels generate.  Returns `(gamma_l, gamma_r)`.
fn waveguide_rates(terms: &LindbladTermSet) -> Result<(f64, f64), TnError> {
    let unsupported = |reason: &str| TnError::UnsupportedTerms { reason: reason.to_string() };
    if terms.collective_jumps.len() != 2 {
        return Err(unsupported("expected exactly two collective jump channels"));
    }
    let matches_direction = |v: &[C64], sign: f64| -> bool {
        v.iter().zip(&terms.phases).all(|(z, nu)| {
            let expect = C64::from_polar(1.0, sign * nu);
            (z - expect).norm() < STRUCTURE_TOL
        })
    };
    let mut gamma_l = None;
    let mut gamma_r = None;
    for (rate, v) in &terms.collective_jumps {
        if v.len() != terms.n {
            return Err(unsupported("jump vector length does not match the emitter count"));
        }
        if matches_direction(v, -1.0) && gamma_l.is_none() {
            gamma_l = Some(*rate);
        } else if matches_direction(v, 1.0) && gamma_r.is_none() {
            gamma_r = Some(*rate);
        } else {
            return Err(unsupported("jump vectors are not unit-modulus counter-propagating modes"));
        }
    }
    let (gl, gr) = match (gamma_l, gamma_r) {
        (Some(gl), Some(gr)) => (gl, gr),
        _ => return Err(unsupported("missing a left- or right-propagating channel")),
    };
    // The coherent pair couplings must be the ones generated by these
    // two channels; anything else cannot be factorized by the automaton.
    let scale = (gl + gr).max(1.0);
    for j in 0..terms.n {
        for l in (j + 1)..terms.n {
            let delta = terms.phases[l] - terms.phases[j];
            let i = C64::new(0.0, 1.0);
            let expect = -i * 0.5 * gl * (i * delta).exp() + i * 0.5 * gr * (-i * delta).exp();
            if (terms.coherent_pair_couplings[[j, l]] - expect).norm() > STRUCTURE_TOL * scale {
                return Err(unsupported("pair couplings do not match the two-channel form"));
            }
        }
        if terms.coherent_pair_couplings[[j, j]].norm() > STRUCTURE_TOL {
            return Err(unsupported("pair couplings must have a zero diagonal"));
        }
    }
    Ok((gl, gr))
}

/// Builds the first-order propagator `1 + dt*L` as an MPO with bond
/// dimension ten at every internal bond.
///
/// Zero `dt` is allowed and produces the exact identity.  Commensurate
/// mode phases make every middle-site tensor identical because all
/// site-local phase factors reduce to one.
pub fn build_propagator_mpo(terms: &LindbladTermSet, dt: f64) -> Result<PropagatorMPO, TnError> {
    if !dt.is_finite() || dt < 0.0 {
        return Err(TnError::BadStep { dt });
    }
    let (gl, gr) = waveguide_rates(terms)?;
    let n = terms.n;
    let ops = pair_ops();
    let l_loc = local_liouvillian(terms.drive_amplitude, gl + gr);
    let sqdt = dt.sqrt();

    // Automaton states: 0 passive, 1..=8 an open pair coupling, 9 done.
    // Each open state remembers the operator applied at the opening site
    // and the sign of the phase it picked up there; the closing site
    // applies the partner operator with the opposite phase sign and the
    // channel rates.
    let openings: [(usize, f64); 8] = [
        (OP_AM, -1.0),
        (OP_AM, 1.0),
        (OP_AP, 1.0),
        (OP_AP, -1.0),
        (OP_BP, -1.0),
        (OP_BP, 1.0),
        (OP_BM, 1.0),
        (OP_BM, -1.0),
    ];
    let half_sum = -(gl + gr) / 2.0;
    let closings: [Vec<(f64, usize, f64)>; 8] = [
        vec![(half_sum, OP_AP, 1.0), (gl, OP_BM, 1.0)],
        vec![((gl - gr) / 2.0, OP_AP, -1.0), (gr, OP_BM, -1.0)],
        vec![((gr - gl) / 2.0, OP_AM, -1.0)],
        vec![(half_sum, OP_AM, 1.0)],
        vec![((gr - gl) / 2.0, OP_BM, 1.0)],
        vec![(half_sum, OP_BM, -1.0)],
        vec![(half_sum, OP_BP, -1.0), (gl, OP_AM, -1.0)],
        vec![(gr, OP_AM, 1.0), ((gl - gr) / 2.0, OP_BP, 1.0)],
    ];

    let mut tensors = Vec::with_capacity(n);
    for (site, &nu) in terms.phases.iter().enumerate() {
        let mut w = Array4::<C64>::zeros((10, 4, 4, 10));
        let set = |w: &mut Array4<C64>, s: usize, sp: usize, m: &Array2<C64>, coeff: C64| {
            for o in 0..4 {
                for i in 0..4 {
                    w[[s, o, i, sp]] += coeff * m[[o, i]];
                }
            }
        };
        let eye = Array2::<C64>::eye(4);
        for s in 0..10 {
            set(&mut w, s, s, &eye, C64::new(1.0, 0.0));
        }
        set(&mut w, 0, 9, &l_loc, C64::new(dt, 0.0));
        for (state, &(op, sign)) in openings.iter().enumerate() {
            let phase = C64::from_polar(sqdt, sign * nu);
            set(&mut w, 0, state + 1, &ops[op], phase);
        }
        for (state, closing) in closings.iter().enumerate() {
            for &(coeff, op, sign) in closing {
                let z = C64::from_polar(sqdt, sign * nu) * coeff;
                set(&mut w, state + 1, 9, &ops[op], z);
            }
        }

        // Boundary sites contract the automaton onto its start state on
        // the left and onto "passive or done" on the right, which yields
        // exactly 1 + dt*L.
        let keep_left = if site == 0 { 1 } else { 10 };
        let keep_right = if site == n - 1 { 1 } else { 10 };
        let mut t = Array4::<C64>::zeros((keep_left, 4, 4, keep_right));
        for s in 0..keep_left.max(1) {
            for o in 0..4 {
                for i in 0..4 {
                    if site == n - 1 {
                        t[[s, o, i, 0]] = w[[s, o, i, 0]] + w[[s, o, i, 9]];
                    } else {
                        for sp in 0..10 {
                            t[[s, o, i, sp]] = w[[s, o, i, sp]];
                        }
                    }
                }
            }
        }
        tensors.push(t);
    }
    Ok(PropagatorMPO { n, tensors, dt })
}

/// Applies the MPO to the state exactly, inflating every internal bond
/// by the MPO bond dimension.  No compression or renormalization.
pub fn apply_propagator(mps: &VectorizedMPS, mpo: &PropagatorMPO) -> VectorizedMPS {
    assert_eq!(mps.n, mpo.n, "state and propagator must have equal site counts");
    let mut tensors = Vec::with_capacity(mps.n);
    for (t, w) in mps.tensors.iter().zip(&mpo.tensors) {
        let (l, _, r) = t.dim();
        let (wl, _, _, wr) = w.dim();
        let mut nt = Array3::zeros((wl * l, 4, wr * r));
        for s in 0..wl {
            for sp in 0..wr {
                for o in 0..4 {
                    for i in 0..4 {
                        let coeff = w[[s, o, i, sp]];
                        if coeff == C64::new(0.0, 0.0) {
                            continue;
                        }
                        for ll in 0..l {
                            for rr in 0..r {
                                nt[[s * l + ll, o, sp * r + rr]] += coeff * t[[ll, i, rr]];
                            }
                        }
                    }
                }
            }
        }
        tensors.push(nt);
    }
    VectorizedMPS { n: mps.n, tensors, center: 0, discarded_weight: mps.discarded_weight }
}

/// Contracts one tensor's right bond with a carry matrix: `T[l,a,r'] C[r',r]`.
fn absorb_right(t: &Array3<C64>, carry: &Array2<C64>) -> Array3<C64> {
    let (l, _, r) = t.dim();
    let k = carry.dim().1;
    debug_assert_eq!(carry.dim().0, r);
    let flat = t.clone().into_shape((l * 4, r)).expect("site tensor is contiguous");
    let prod = linalg::matmul(&flat, carry);
    prod.into_shape((l, 4, k)).expect("shape preserved")
}

/// Contracts one tensor's left bond with a carry matrix: `C[l,l'] T[l',a,r]`.
fn absorb_left(carry: &Array2<C64>, t: &Array3<C64>) -> Array3<C64> {
    let (l, _, r) = t.dim();
    let k = carry.dim().0;
    debug_assert_eq!(carry.dim().1, l);
    let flat = t.clone().into_shape((l, 4 * r)).expect("site tensor is contiguous");
    let prod = linalg::matmul(carry, &flat);
    prod.into_shape((k, 4, r)).expect("shape preserved")
}

/// Number of singular values to keep under a policy; always at least one.
fn kept_rank(s: &Array1<f64>, chi: usize, rel_cutoff: f64) -> usize {
    let top = s.get(0).copied().unwrap_or(0.0);
    if top <= 0.0 {
        return 1;
    }
    let mut k = s.iter().take_while(|&&x| x > rel_cutoff * top).count();
    k = k.clamp(1, chi.min(s.len()));
    k
}

/// Relative weight of the dropped tail of a singular-value spectrum.
fn dropped_weight(s: &Array1<f64>, k: usize) -> f64 {
    let total: f64 = s.iter().map(|x| x * x).sum();
    if total <= 0.0 {
        return 0.0;
    }
    let dropped: f64 = s.iter().skip(k).map(|x| x * x).sum();
    dropped / total
}

impl VectorizedMPS {
    /// Right-to-left sweep that makes every site except the first
    /// right-isometric while dropping numerically zero singular values.
    /// Leaves the center at site zero.
    fn collapse_rank(&mut self) -> Result<(), TnError> {
        for i in (1..self.n).rev() {
            let t = std::mem::replace(&mut self.tensors[i], Array3::zeros((0, 0, 0)));
            let (l, _, r) = t.dim();
            let flat = t.into_shape((l, 4 * r)).expect("site tensor is contiguous");
            let (u, s, vh) = linalg::svd(&flat)?;
            let k = kept_rank(&s, usize::MAX, ZERO_REL);
            self.discarded_weight += dropped_weight(&s, k);
            let kept = vh.slice(ndarray::s![..k, ..]).to_owned();
            self.tensors[i] = kept.into_shape((k, 4, r)).expect("shape preserved");
            let mut carry = Array2::zeros((l, k));
            for row in 0..l {
                for col in 0..k {
                    carry[[row, col]] = u[[row, col]] * s[col];
                }
            }
            self.tensors[i - 1] = absorb_right(&self.tensors[i - 1], &carry);
        }
        self.center = 0;
        Ok(())
    }

    /// Left-to-right sweep that truncates every bond to the policy and
    /// leaves the center at the last site.  Requires the state to be
    /// right-canonical (center at site zero) so the singular values at
    /// each bond are the Schmidt coefficients there.  Returns the kept
    /// spectrum at `capture_bond` when requested.
    fn truncate_sweep(
        &mut self,
        policy: &TruncationPolicy,
        capture_bond: Option<usize>,
    ) -> Result<Option<Vec<f64>>, TnError> {
        debug_assert_eq!(self.center, 0, "truncation sweep starts from a right-canonical state");
        let mut captured = None;
        for i in 0..self.n.saturating_sub(1) {
            let t = std::mem::replace(&mut self.tensors[i], Array3::zeros((0, 0, 0)));
            let (l, _, r) = t.dim();
            let flat = t.into_shape((l * 4, r)).expect("site tensor is contiguous");
            let (u, s, vh) = linalg::svd(&flat)?;
            let k = kept_rank(&s, policy.chi_tr, policy.cutoff);
            self.discarded_weight += dropped_weight(&s, k);
            if capture_bond == Some(i) {
                captured = Some(s.iter().take(k).copied().collect());
            }
            let kept_u = u.slice(ndarray::s![.., ..k]).to_owned();
            self.tensors[i] = kept_u.into_shape((l, 4, k)).expect("shape preserved");
            let mut carry = Array2::zeros((k, r));
            for row in 0..k {
                for col in 0..r {
                    carry[[row, col]] = s[row] * vh[[row, col]];
                }
            }
            self.tensors[i + 1] = absorb_left(&carry, &self.tensors[i + 1]);
        }
        self.center = self.n - 1;
        Ok(captured)
    }
}

/// Trace of the vectorized state: each fused site index is contracted
/// with the trace covector `(1, 0, 0, 1)`.
pub fn trace_vectorized(mps: &VectorizedMPS) -> C64 {
    let mut v = Array1::from_elem(1, C64::new(1.0, 0.0));
    for t in &mps.tensors {
        let (l, _, r) = t.dim();
        let mut next = Array1::zeros(r);
        for rr in 0..r {
            let mut acc = C64::new(0.0, 0.0);
            for ll in 0..l {
                acc += v[ll] * (t[[ll, 0, rr]] + t[[ll, 3, rr]]);
            }
            next[rr] = acc;
        }
        v = next;
    }
    v[0]
}

/// Shannon entropy (base two) of a normalized Schmidt spectrum.
fn schmidt_entropy(spectrum: &[f64]) -> f64 {
    let total: f64 = spectrum.iter().map(|s| s * s).sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut e = 0.0;
    for s in spectrum {
        let p = s * s / total;
        if p > 0.0 {
            e -= p * p.log2();
        }
    }
    e.max(0.0)
}

/// Zero-indexed bond of the middle cut: the cut after the first
/// `floor(n/2)` sites.
fn middle_bond(n: usize) -> usize {
    n / 2 - 1
}

/// Operator entanglement entropy of the vectorized state across the
/// middle cut: the base-two entropy of the squared, normalized Schmidt
/// spectrum there.  Zero for any product state and invariant under
/// rescaling of the state.
pub fn operator_entanglement(mps: &VectorizedMPS) -> Result<f64, TnError> {
    if mps.n < 2 {
        return Err(TnError::TooFewSites { n: mps.n });
    }
    let mut work = mps.clone();
    work.collapse_rank()?;
    let keep_all = TruncationPolicy { chi_tr: usize::MAX, cutoff: 0.0 };
    let spectrum = work.truncate_sweep(&keep_all, Some(middle_bond(mps.n)))?;
    Ok(schmidt_entropy(&spectrum.expect("middle bond exists for n >= 2")))
}

/// One propagator application followed by compression and trace
/// renormalization.  Returns the kept Schmidt spectrum at the middle
/// bond (empty for a single emitter); later truncations to the right of
/// that bond perturb it by at most the discarded weight.
fn step_in_place(
    mps: &mut VectorizedMPS,
    mpo: &PropagatorMPO,
    policy: &TruncationPolicy,
) -> Result<Vec<f64>, TnError> {
    policy.validate()?;
    *mps = apply_propagator(mps, mpo);
    mps.collapse_rank()?;
    let capture = if mps.n >= 2 { Some(middle_bond(mps.n)) } else { None };
    let spectrum = mps.truncate_sweep(policy, capture)?;
    let trace = trace_vectorized(mps);
    if trace.norm() < TRACE_COLLAPSE_TOL {
        return Err(TnError::NumericalCollapse { magnitude: trace.norm() });
    }
    let inv = C64::new(1.0, 0.0) / trace;
    let center = mps.center;
    mps.tensors[center].mapv_inplace(|z| z * inv);
    Ok(spectrum.unwrap_or_default())
}

/// Advances the state by one time step: exact MPO application, rank
/// collapse, policy truncation, then trace renormalization so the
/// result has unit trace exactly.
pub fn step_tn(
    mps: &VectorizedMPS,
    mpo: &PropagatorMPO,
    policy: &TruncationPolicy,
) -> Result<VectorizedMPS, TnError> {
    let mut next = mps.clone();
    step_in_place(&mut next, mpo, policy)?;
    Ok(next)
}

/// Per-site covector measuring `tr(X |k><b|) = X[b, k]` on the fused index.
fn measure_covector(x: &Array2<C64>) -> [C64; 4] {
    let mut w = [C64::new(0.0, 0.0); 4];
    for k in 0..2 {
        for b in 0..2 {
            w[2 * k + b] = x[[b, k]];
        }
    }
    w
}

/// Transfer matrix of one site against a measurement covector.
fn covector_transfer(t: &Array3<C64>, w: &[C64; 4]) -> Array2<C64> {
    let (l, _, r) = t.dim();
    let mut e = Array2::zeros((l, r));
    for (a, &wa) in w.iter().enumerate() {
        if wa == C64::new(0.0, 0.0) {
            continue;
        }
        for ll in 0..l {
            for rr in 0..r {
                e[[ll, rr]] += wa * t[[ll, a, rr]];
            }
        }
    }
    e
}

fn row_times(v: &Array1<C64>, m: &Array2<C64>) -> Array1<C64> {
    let (l, r) = m.dim();
    debug_assert_eq!(v.len(), l);
    let mut out = Array1::zeros(r);
    for rr in 0..r {
        let mut acc = C64::new(0.0, 0.0);
        for ll in 0..l {
            acc += v[ll] * m[[ll, rr]];
        }
        out[rr] = acc;
    }
    out
}

fn times_col(m: &Array2<C64>, v: &Array1<C64>) -> Array1<C64> {
    let (l, r) = m.dim();
    debug_assert_eq!(v.len(), r);
    let mut out = Array1::zeros(l);
    for ll in 0..l {
        let mut acc = C64::new(0.0, 0.0);
        for rr in 0..r {
            acc += m[[ll, rr]] * v[rr];
        }
        out[ll] = acc;
    }
    out
}

fn dot(a: &Array1<C64>, b: &Array1<C64>) -> C64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = C64::new(0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Mean magnetization, magnetization covariance density, and normalized
/// right-moving output intensity of the vectorized state.
///
/// Expectation values are single-layer contractions of the state with
/// per-site measurement covectors, normalized by the trace, so the
/// result does not depend on the overall scale of the state.
pub fn measure_tn(mps: &VectorizedMPS, phases: &[f64]) -> ObservablePoint {
    let n = mps.n;
    assert_eq!(phases.len(), n, "one mode phase per emitter");
    let (sm, sp, _, id) = pauli_ops();
    let sz = {
        let mut z = Array2::<C64>::zeros((2, 2));
        z[[0, 0]] = C64::new(-1.0, 0.0);
        z[[1, 1]] = C64::new(1.0, 0.0);
        z
    };
    let num = linalg::matmul(&sp, &sm);
    let w_id = measure_covector(&id);
    let w_z = measure_covector(&sz);
    let w_p = measure_covector(&sp);
    let w_m = measure_covector(&sm);
    let w_n = measure_covector(&num);

    let e_id: Vec<Array2<C64>> = mps.tensors.iter().map(|t| covector_transfer(t, &w_id)).collect();
    let e_z: Vec<Array2<C64>> = mps.tensors.iter().map(|t| covector_transfer(t, &w_z)).collect();
    let e_p: Vec<Array2<C64>> = mps.tensors.iter().map(|t| covector_transfer(t, &w_p)).collect();
    let e_m: Vec<Array2<C64>> = mps.tensors.iter().map(|t| covector_transfer(t, &w_m)).collect();
    let e_n: Vec<Array2<C64>> = mps.tensors.iter().map(|t| covector_transfer(t, &w_n)).collect();

    // prefix[j] contracts sites before j with identity covectors,
    // suffix[j] contracts sites from j on.
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(Array1::from_elem(1, C64::new(1.0, 0.0)));
    for j in 0..n {
        let next = row_times(&prefix[j], &e_id[j]);
        prefix.push(next);
    }
    let mut suffix = vec![Array1::from_elem(1, C64::new(1.0, 0.0)); n + 1];
    for j in (0..n).rev() {
        suffix[j] = times_col(&e_id[j], &suffix[j + 1]);
    }
    let trace = prefix[n][0];

    let single = |e: &Array2<C64>, j: usize| -> C64 {
        dot(&row_times(&prefix[j], e), &suffix[j + 1]) / trace
    };

    let z_locals: Vec<C64> = (0..n).map(|j| single(&e_z[j], j)).collect();
    let z_sum: C64 = z_locals.iter().sum();

    let mut zz_sum = C64::new(0.0, 0.0);
    let mut ir_pairs = C64::new(0.0, 0.0);
    for s1 in 0..n {
        let mut u_z = row_times(&prefix[s1], &e_z[s1]);
        let mut u_p = row_times(&prefix[s1], &e_p[s1]);
        let mut u_m = row_times(&prefix[s1], &e_m[s1]);
        for s2 in (s1 + 1)..n {
            zz_sum += dot(&row_times(&u_z, &e_z[s2]), &suffix[s2 + 1]) / trace;
            // <sigma_{s1}^+ sigma_{s2}^-> and <sigma_{s2}^+ sigma_{s1}^->
            let pm = dot(&row_times(&u_p, &e_m[s2]), &suffix[s2 + 1]) / trace;
            let mp = dot(&row_times(&u_m, &e_p[s2]), &suffix[s2 + 1]) / trace;
            let delta = phases[s2] - phases[s1];
            ir_pairs += C64::from_polar(1.0, delta) * pm + C64::from_polar(1.0, -delta) * mp;
            if s2 + 1 < n {
                u_z = row_times(&u_z, &e_id[s2]);
                u_p = row_times(&u_p, &e_id[s2]);
                u_m = row_times(&u_m, &e_id[s2]);
            }
        }
    }
    let excited: C64 = (0..n).map(|j| single(&e_n[j], j)).sum();

    let nf = n as f64;
    let z = z_sum.re / nf;
    // The double sum over site pairs includes the diagonal, where the
    // squared magnetization operator is the identity.
    let fz2 = (2.0 * zz_sum.re + nf - z_sum.re * z_sum.re) / nf;
    let ir = (excited.re + ir_pairs.re) / nf;
    ObservablePoint::exact(z, fz2, ir)
}

/// Full tensor-network evolution from the all-up state on a uniform
/// grid.  Records observables, the middle-bond operator entanglement,
/// and the largest bond dimension at every sample including the initial
/// one.
pub fn evolve_tn(
    terms: &LindbladTermSet,
    policy: &TruncationPolicy,
    grid: &TimeGrid,
) -> Result<TnRun, TnError> {
    policy.validate()?;
    let mpo = build_propagator_mpo(terms, grid.dt)?;
    let mut mps = VectorizedMPS::vectorized_all_up(terms.n);
    let steps = grid.steps();

    let meta = RunMeta::new(grid.dt, terms.fingerprint());
    let mut series = ObservableSeries::new(EngineTag::Tn, meta);
    let mut entanglement = Vec::with_capacity(steps + 1);
    let mut max_bond = Vec::with_capacity(steps + 1);

    series.push(0.0, measure_tn(&mps, &terms.phases));
    entanglement.push(0.0);
    max_bond.push(mps.max_bond_dim());

    for step in 1..=steps {
        let spectrum = step_in_place(&mut mps, &mpo, policy)?;
        series.push(step as f64 * grid.dt, measure_tn(&mps, &terms.phases));
        entanglement.push(schmidt_entropy(&spectrum));
        max_bond.push(mps.max_bond_dim());
    }

    let e_max = entanglement.iter().cloned().fold(0.0, f64::max);
    Ok(TnRun {
        series,
        entanglement,
        max_bond,
        e_max,
        discarded_weight: mps.discarded_weight,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ed::{self, dense_liouvillian_matrix, initial_state, unvectorize_density, vectorize_density};
    use crate::model::{build_lindblad_terms, SpacingSpec, SystemConfig};
    use approx::assert_abs_diff_eq;
    use ndarray::{Array1, Array2};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn commensurate(n: usize, omega: f64) -> LindbladTermSet {
        let config =
            SystemConfig::new(n, 1.0, 1.0, omega, &SpacingSpec::Commensurate).unwrap();
        build_lindblad_terms(&config).unwrap()
    }

    fn chiral_incommensurate(n: usize, omega: f64) -> LindbladTermSet {
        let gap = std::f64::consts::PI / 3.0_f64.sqrt();
        let phases: Vec<f64> = (0..n).map(|j| gap * j as f64).collect();
        let config =
            SystemConfig::new(n, 0.5, 1.0, omega, &SpacingSpec::Explicit { phases }).unwrap();
        build_lindblad_terms(&config).unwrap()
    }

    fn max_abs_diff(a: &Array2<C64>, b: &Array2<C64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    fn dense_first_order(terms: &LindbladTermSet, dt: f64) -> Array2<C64> {
        let l = dense_liouvillian_matrix(terms).unwrap();
        let dim = l.dim().0;
        let mut prop = Array2::<C64>::eye(dim);
        prop.scaled_add(C64::new(dt, 0.0), &l);
        prop
    }

    #[test]
    fn propagator_bond_dimension_is_ten_everywhere() {
        for n in [2, 3, 5, 8] {
            let terms = chiral_incommensurate(n, 0.4);
            let mpo = build_propagator_mpo(&terms, 1e-3).unwrap();
            let bonds = mpo.bond_dims();
            assert_eq!(bonds.len(), n - 1);
            assert!(bonds.iter().all(|&b| b == 10), "internal bonds must be ten, got {bonds:?}");
        }
    }

    #[test]
    fn propagator_matches_dense_first_order_generator() {
        let dt = 1e-3;
        for n in [1usize, 2, 3] {
            for terms in [commensurate(n, 0.8), chiral_incommensurate(n, 0.6)] {
                let mpo = build_propagator_mpo(&terms, dt).unwrap();
                let dense = mpo.to_dense();
                let expect = dense_first_order(&terms, dt);
                let diff = max_abs_diff(&dense, &expect);
                assert!(diff < 1e-12, "n={n}: propagator deviates by {diff:.3e}");
            }
        }
    }

    #[test]
    fn propagator_action_matches_dense_on_random_states() {
        let dt = 2e-3;
        let mut rng = ChaCha8Rng::from_seed([7; 32]);
        for n in [2usize, 3] {
            let terms = chiral_incommensurate(n, 0.3);
            let mpo = build_propagator_mpo(&terms, dt).unwrap();
            let expect = dense_first_order(&terms, dt);
            for _ in 0..10 {
                let locals: Vec<[C64; 4]> = (0..n)
                    .map(|_| {
                        let mut v = [C64::new(0.0, 0.0); 4];
                        for z in &mut v {
                            *z = C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
                        }
                        v
                    })
                    .collect();
                let mps = VectorizedMPS::product_state(&locals);
                let vec_in = mps.to_dense_vec();
                let vec_out = apply_propagator(&mps, &mpo).to_dense_vec();
                let mut want = Array1::<C64>::zeros(vec_in.len());
                for r in 0..vec_in.len() {
                    let mut acc = C64::new(0.0, 0.0);
                    for c in 0..vec_in.len() {
                        acc += expect[[r, c]] * vec_in[c];
                    }
                    want[r] = acc;
                }
                let diff = vec_out
                    .iter()
                    .zip(want.iter())
                    .map(|(a, b)| (a - b).norm())
                    .fold(0.0, f64::max);
                assert!(diff < 1e-12, "n={n}: MPO action deviates by {diff:.3e}");
            }
        }
    }

    #[test]
    fn commensurate_propagator_tensors_are_site_independent() {
        let terms = commensurate(5, 0.7);
        let mpo = build_propagator_mpo(&terms, 1e-3).unwrap();
        for i in 2..4 {
            let diff = mpo
                .site_tensor(i)
                .iter()
                .zip(mpo.site_tensor(1).iter())
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12, "middle tensors differ at site {i} by {diff:.3e}");
        }
    }

    #[test]
    fn zero_step_propagator_is_the_identity() {
        let terms = chiral_incommensurate(3, 0.9);
        let mpo = build_propagator_mpo(&terms, 0.0).unwrap();
        let dense = mpo.to_dense();
        let diff = max_abs_diff(&dense, &Array2::eye(64));
        assert!(diff < 1e-15, "zero-dt propagator deviates from identity by {diff:.3e}");

        let mps = VectorizedMPS::vectorized_all_up(3);
        let policy = TruncationPolicy::default();
        let stepped = step_tn(&mps, &mpo, &policy).unwrap();
        let fidelity = stepped.overlap(&mps).norm() / (stepped.norm() * mps.norm());
        assert!((fidelity - 1.0).abs() < 1e-12, "fidelity {fidelity} after identity step");
    }

    #[test]
    fn zero_step_keeps_a_product_state_at_bond_one() {
        let terms = commensurate(4, 0.0);
        let mpo = build_propagator_mpo(&terms, 0.0).unwrap();
        let policy = TruncationPolicy::new(1, 1e-12).unwrap();
        let mps = VectorizedMPS::vectorized_all_up(4);
        let stepped = step_tn(&mps, &mpo, &policy).unwrap();
        assert_eq!(stepped.bond_dims(), vec![1, 1, 1]);
        let fidelity = stepped.overlap(&mps).norm() / (stepped.norm() * mps.norm());
        assert!((fidelity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_invalid_policies_and_steps() {
        assert!(matches!(TruncationPolicy::new(0, 1e-12), Err(TnError::BadPolicy)));
        assert!(matches!(TruncationPolicy::new(4, -1.0), Err(TnError::BadPolicy)));
        let terms = commensurate(2, 0.0);
        assert!(matches!(
            build_propagator_mpo(&terms, -1e-3),
            Err(TnError::BadStep { .. })
        ));
    }

    #[test]
    fn rejects_term_sets_without_waveguide_structure() {
        let mut terms = commensurate(3, 0.2);
        terms.coherent_pair_couplings[[0, 2]] += C64::new(0.1, 0.0);
        assert!(matches!(
            build_propagator_mpo(&terms, 1e-3),
            Err(TnError::UnsupportedTerms { .. })
        ));

        let mut terms = commensurate(3, 0.2);
        terms.collective_jumps.pop();
        assert!(matches!(
            build_propagator_mpo(&terms, 1e-3),
            Err(TnError::UnsupportedTerms { .. })
        ));
    }

    #[test]
    fn trace_is_preserved_by_propagation_before_renormalization() {
        let terms = chiral_incommensurate(4, 0.5);
        let mpo = build_propagator_mpo(&terms, 1e-3).unwrap();
        let mps = VectorizedMPS::vectorized_all_up(4);
        assert_abs_diff_eq!(trace_vectorized(&mps).re, 1.0, epsilon = 1e-14);
        // The propagator is trace preserving because the generator is
        // traceless, so even the unnormalized image stays at unit trace.
        let applied = apply_propagator(&mps, &mpo);
        assert!((trace_vectorized(&applied) - C64::new(1.0, 0.0)).norm() < 1e-5);
    }

    #[test]
    fn single_step_matches_dense_euler_update() {
        let n = 3;
        let terms = commensurate(n, 0.6);
        let dt = 1e-3;
        let mpo = build_propagator_mpo(&terms, dt).unwrap();
        let policy = TruncationPolicy::new(4096, 0.0).unwrap();
        let stepped = step_tn(&VectorizedMPS::vectorized_all_up(n), &mpo, &policy).unwrap();
        let got = unvectorize_density(&stepped.to_dense_vec(), n);

        let rho = initial_state(n).unwrap();
        let deriv = ed::apply_liouvillian(&terms, &rho).unwrap();
        let mut want = rho.matrix.clone();
        want.scaled_add(C64::new(dt, 0.0), &deriv.matrix);
        let trace: C64 = (0..want.dim().0).map(|i| want[[i, i]]).sum();
        want.mapv_inplace(|z| z / trace);

        let diff = max_abs_diff(&got, &want);
        assert!(diff < 1e-12, "one step deviates from the Euler update by {diff:.3e}");
    }

    #[test]
    fn untruncated_trajectory_matches_dense_euler_trajectory() {
        let n = 3;
        let terms = chiral_incommensurate(n, 0.4);
        let dt = 1e-3;
        let steps = 50;
        let mpo = build_propagator_mpo(&terms, dt).unwrap();
        let policy = TruncationPolicy::new(4096, 0.0).unwrap();

        let mut mps = VectorizedMPS::vectorized_all_up(n);
        let prop = dense_first_order(&terms, dt);
        let mut vec_state = vectorize_density(&initial_state(n).unwrap().matrix, n);
        for _ in 0..steps {
            mps = step_tn(&mps, &mpo, &policy).unwrap();
            let mut next = Array1::<C64>::zeros(vec_state.len());
            for r in 0..vec_state.len() {
                let mut acc = C64::new(0.0, 0.0);
                for c in 0..vec_state.len() {
                    acc += prop[[r, c]] * vec_state[c];
                }
                next[r] = acc;
            }
            // Match the engine's per-step trace renormalization.
            let trace: C64 = (0..1 << n).map(|k| next[ed::fuse_index(k, k, n)]).sum();
            next.mapv_inplace(|z| z / trace);
            vec_state = next;
        }
        let got = mps.to_dense_vec();
        let diff = got
            .iter()
            .zip(vec_state.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(diff < 1e-10, "trajectories diverge by {diff:.3e}");
        assert!(mps.gauge_defect() < 1e-10, "gauge defect {:.3e}", mps.gauge_defect());
    }

    #[test]
    fn operator_entanglement_reference_values() {
        let product = VectorizedMPS::vectorized_all_up(4);
        assert_abs_diff_eq!(operator_entanglement(&product).unwrap(), 0.0, epsilon = 1e-12);

        // Two equally weighted orthogonal Schmidt pairs give entropy one.
        let c = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        let mut t0 = Array3::<C64>::zeros((1, 4, 2));
        t0[[0, 0, 0]] = C64::new(1.0, 0.0);
        t0[[0, 3, 1]] = C64::new(1.0, 0.0);
        let mut t1 = Array3::<C64>::zeros((2, 4, 1));
        t1[[0, 3, 0]] = c;
        t1[[1, 0, 0]] = c;
        let pair = VectorizedMPS { n: 2, tensors: vec![t0, t1], center: 0, discarded_weight: 0.0 };
        assert_abs_diff_eq!(operator_entanglement(&pair).unwrap(), 1.0, epsilon = 1e-12);

        assert!(matches!(
            operator_entanglement(&VectorizedMPS::vectorized_all_up(1)),
            Err(TnError::TooFewSites { n: 1 })
        ));
    }

    #[test]
    fn entanglement_is_invariant_under_state_rescaling() {
        let terms = commensurate(4, 0.0);
        let mpo = build_propagator_mpo(&terms, 1e-2).unwrap();
        let policy = TruncationPolicy::default();
        let mut mps = VectorizedMPS::vectorized_all_up(4);
        for _ in 0..20 {
            mps = step_tn(&mps, &mpo, &policy).unwrap();
        }
        let e = operator_entanglement(&mps).unwrap();
        let center = mps.center;
        mps.tensors[center].mapv_inplace(|z| z * C64::new(17.0, 3.0));
        let e_scaled = operator_entanglement(&mps).unwrap();
        assert_abs_diff_eq!(e, e_scaled, epsilon = 1e-12);
        assert!(e > 1e-3, "twenty decay steps must generate some entanglement");
    }

    #[test]
    fn truncation_cap_is_respected_and_weight_accumulates() {
        let terms = chiral_incommensurate(4, 1.0);
        let grid = TimeGrid::new(0.3, 1e-2).unwrap();
        let run = evolve_tn(&terms, &TruncationPolicy::new(2, 1e-12).unwrap(), &grid).unwrap();
        assert!(run.max_bond.iter().all(|&b| b <= 2));
        assert!(run.discarded_weight > 0.0, "hard cap must discard weight");
        run.series.validate().unwrap();
    }

    #[test]
    fn evolution_matches_exact_engine_for_small_chains() {
        let n = 4;
        let terms = commensurate(n, 0.0);
        let grid = TimeGrid::new(2.0, 1e-3).unwrap();
        let run = evolve_tn(&terms, &TruncationPolicy::new(64, 1e-12).unwrap(), &grid).unwrap();
        let exact = ed::evolve_ed(&terms, &initial_state(n).unwrap(), &grid).unwrap();
        assert_eq!(run.series.times, exact.times);
        for (name, got, want) in [
            ("z", run.series.column(crate::series::Observable::Z), exact.column(crate::series::Observable::Z)),
            ("fz2", run.series.column(crate::series::Observable::Fz2), exact.column(crate::series::Observable::Fz2)),
            ("ir", run.series.column(crate::series::Observable::Ir), exact.column(crate::series::Observable::Ir)),
        ] {
            let worst = got
                .iter()
                .zip(want.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(worst < 5e-3, "{name} deviates from the exact engine by {worst:.3e}");
        }
    }

    #[test]
    fn entanglement_barrier_rises_then_falls() {
        let n = 4;
        let terms = commensurate(n, 0.0);
        let grid = TimeGrid::new(5.0, 2e-3).unwrap();
        let run = evolve_tn(&terms, &TruncationPolicy::new(256, 1e-12).unwrap(), &grid).unwrap();
        assert!(run.e_max > 0.2, "peak entanglement {:.3} should be visible", run.e_max);
        let last = *run.entanglement.last().unwrap();
        assert!(last < 0.05, "entanglement {last:.3} should collapse near the steady state");
        let peak_index = run
            .entanglement
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert!(peak_index > 0 && peak_index < run.entanglement.len() - 1);
    }

    #[test]
    fn measurements_on_reference_product_states() {
        let mps = VectorizedMPS::vectorized_all_up(3);
        let phases = [0.0, 1.3, 2.9];
        let point = measure_tn(&mps, &phases);
        assert_abs_diff_eq!(point.z, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(point.fz2, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(point.ir, 1.0, epsilon = 1e-12);

        // Maximally mixed state: no magnetization, unit covariance
        // density from the diagonal, only self-intensity remains.
        let half = C64::new(0.5, 0.0);
        let zero = C64::new(0.0, 0.0);
        let mixed = VectorizedMPS::product_state(&[[half, zero, zero, half]; 3]);
        let point = measure_tn(&mixed, &phases);
        assert_abs_diff_eq!(point.z, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(point.fz2, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(point.ir, 0.5, epsilon = 1e-12);
    }
}
