//! Exact reference engines: full-Hilbert-space Lindblad integration, a
//! collective-spin ladder integrator, and observable evaluation.
//!
//! Basis conventions, used consistently across the crate: each emitter is a
//! qubit with basis (|0⟩, |1⟩) = (down, up), σ^z = diag(−1, +1), and
//! σ^- = [[0, 1], [0, 0]] maps up to down. Computational-basis index bits are
//! site-major with site 0 in the most significant position, so emitter j of n
//! owns bit `n−1−j`.
//!
//! The evolution loop never materializes the 4^n × 4^n superoperator; the
//! derivative is assembled from sparse one-sided products with the effective
//! non-Hermitian matrix A = H − (i/2) Σ_α γ_α c_α†c_α and with the jump
//! operators. The explicit superoperator exists only as the n ≤ 4 oracle
//! used to validate the other engines.

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::linalg;
use crate::model::{LindbladTermSet, ModelError, SystemConfig};
use crate::series::{EngineTag, ObservablePoint, ObservableSeries, RunMeta, TimeGrid};
use crate::C64;

/// Largest emitter count the dense engine accepts by default.
pub const DEFAULT_DENSE_GUARD: usize = 12;

/// Largest emitter count for which the explicit superoperator is built.
pub const SUPEROPERATOR_GUARD: usize = 4;

/// Positivity slack: diagnostics fire when an eigenvalue witness drops below
/// −1e−6 during evolution.
const POSITIVITY_TOL: f64 = 1e-6;

/// Trace drift beyond this before renormalization is reported in metadata.
const TRACE_DRIFT_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum EdError {
    #[error("emitter count must be at least 1")]
    NoEmitters,
    #[error("state dimension {got} does not match {expected} for {n} emitters")]
    DimensionMismatch { n: usize, got: usize, expected: usize },
    #[error("{n} emitters exceed the dense guard of {guard}")]
    GuardExceeded { n: usize, guard: usize },
    #[error("explicit superoperator is limited to {max} emitters, got {n}")]
    SuperoperatorTooLarge { n: usize, max: usize },
    #[error("collective-spin integration requires equal phases modulo 2π and equal rates")]
    NotCollective,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Tuning knobs for the dense engine.
#[derive(Debug, Clone)]
pub struct EdOptions {
    /// Emitter-count ceiling for dense evolution.
    pub dense_guard: usize,
}

impl Default for EdOptions {
    fn default() -> Self {
        EdOptions { dense_guard: DEFAULT_DENSE_GUARD }
    }
}

/// Full density matrix of n emitters.
///
/// Physical states are Hermitian with unit trace and eigenvalues bounded
/// below by a small negative numerical slack; derivatives returned by
/// [`apply_liouvillian`] reuse the container without those invariants.
#[derive(Debug, Clone)]
pub struct DenseState {
    pub n: usize,
    pub matrix: Array2<C64>,
}

impl DenseState {
    pub fn new(n: usize, matrix: Array2<C64>) -> Result<Self, EdError> {
        let dim = 1usize << n;
        if matrix.dim() != (dim, dim) {
            return Err(EdError::DimensionMismatch { n, got: matrix.dim().0, expected: dim });
        }
        Ok(DenseState { n, matrix })
    }

    /// Product state with every emitter excited.
    pub fn all_up(n: usize) -> Self {
        let dim = 1usize << n;
        let mut matrix = Array2::zeros((dim, dim));
        matrix[[dim - 1, dim - 1]] = C64::new(1.0, 0.0);
        DenseState { n, matrix }
    }

    /// Product state with every emitter in the ground state.
    pub fn all_down(n: usize) -> Self {
        let dim = 1usize << n;
        let mut matrix = Array2::zeros((dim, dim));
        matrix[[0, 0]] = C64::new(1.0, 0.0);
        DenseState { n, matrix }
    }

    /// Maximally mixed state 1/2^n.
    pub fn maximally_mixed(n: usize) -> Self {
        let dim = 1usize << n;
        let matrix = Array2::from_diag_elem(dim, C64::new(1.0 / dim as f64, 0.0));
        DenseState { n, matrix }
    }

    pub fn dim(&self) -> usize {
        1usize << self.n
    }

    pub fn trace(&self) -> C64 {
        self.matrix.diag().sum()
    }
}

/// All-spin-up initial state ρ_0 = ⊗_j |1⟩⟨1|.
pub fn initial_state(n: usize) -> Result<DenseState, EdError> {
    if n < 1 {
        return Err(EdError::NoEmitters);
    }
    if n > DEFAULT_DENSE_GUARD {
        return Err(EdError::GuardExceeded { n, guard: DEFAULT_DENSE_GUARD });
    }
    Ok(DenseState::all_up(n))
}

/// Observables of a dense state: mean magnetization Z = (1/n) Σ_j ⟨σ_j^z⟩,
/// total-magnetization fluctuations Fz2 = (1/n) Σ_{jℓ} (⟨σ_j^z σ_ℓ^z⟩ −
/// ⟨σ_j^z⟩⟨σ_ℓ^z⟩) with the diagonal included, and the right-moving
/// intensity IR = ⟨c_R† c_R⟩/n with c_R = Σ_j e^{+iν_j} σ_j^-.
pub fn measure_dense(state: &DenseState, phases: &[f64]) -> ObservablePoint {
    let rho = state.matrix.as_standard_layout();
    measure_flat(rho.as_slice().unwrap(), state.n, phases)
}

fn measure_flat(rho: &[C64], n: usize, phases: &[f64]) -> ObservablePoint {
    let dim = 1usize << n;
    let nf = n as f64;

    // Z and Fz2 reduce to moments of the total magnetization S = Σ_j σ_j^z,
    // which is diagonal: S|i⟩ = (2·popcount(i) − n)|i⟩.
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for i in 0..dim {
        let p = rho[i * dim + i].re;
        let s = 2.0 * f64::from(i.count_ones()) - nf;
        s1 += p * s;
        s2 += p * s * s;
    }
    let z = s1 / nf;
    let fz2 = (s2 - s1 * s1) / nf;

    // IR = (1/n) Σ_{jℓ} e^{i(ν_ℓ−ν_j)} tr(ρ σ_j^+ σ_ℓ^-); each trace visits
    // the matrix entries connecting |…1_ℓ…0_j…⟩ to |…0_ℓ…1_j…⟩.
    let mut ir_acc = C64::new(0.0, 0.0);
    for j in 0..n {
        let mask_j = 1usize << (n - 1 - j);
        for l in 0..n {
            if j == l {
                let mut pop = 0.0;
                for i in 0..dim {
                    if i & mask_j != 0 {
                        pop += rho[i * dim + i].re;
                    }
                }
                ir_acc += C64::new(pop, 0.0);
            } else {
                let mask_l = 1usize << (n - 1 - l);
                let phase = C64::from_polar(1.0, phases[l] - phases[j]);
                let mut acc = C64::new(0.0, 0.0);
                for i in 0..dim {
                    if i & mask_l != 0 && i & mask_j == 0 {
                        let ip = i - mask_l + mask_j;
                        acc += rho[i * dim + ip];
                    }
                }
                ir_acc += phase * acc;
            }
        }
    }
    ObservablePoint::exact(z, fz2, ir_acc.re / nf)
}

/// Compressed sparse rows over the 2^n-dimensional Hilbert space.
struct Csr {
    dim: usize,
    indptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<C64>,
}

impl Csr {
    fn from_triplets(dim: usize, mut trips: Vec<(u32, u32, C64)>) -> Self {
        trips.sort_unstable_by_key(|&(r, c, _)| (u64::from(r) << 32) | u64::from(c));
        let mut indptr = vec![0usize; dim + 1];
        let mut cols: Vec<u32> = Vec::with_capacity(trips.len());
        let mut vals: Vec<C64> = Vec::with_capacity(trips.len());
        let mut prev: Option<(u32, u32)> = None;
        for (r, c, v) in trips {
            if prev == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                indptr[r as usize + 1] += 1;
                prev = Some((r, c));
            }
        }
        for r in 0..dim {
            indptr[r + 1] += indptr[r];
        }
        Csr { dim, indptr, cols, vals }
    }

    /// y = self · x with x, y row-major dim × dim; y is overwritten.
    fn mul_dense_into(&self, x: &[C64], y: &mut [C64]) {
        let dim = self.dim;
        y.fill(C64::new(0.0, 0.0));
        for r in 0..dim {
            let yr = &mut y[r * dim..(r + 1) * dim];
            for s in self.indptr[r]..self.indptr[r + 1] {
                let c = self.cols[s] as usize;
                let v = self.vals[s];
                let xr = &x[c * dim..(c + 1) * dim];
                for (yy, xx) in yr.iter_mut().zip(xr) {
                    *yy += v * *xx;
                }
            }
        }
    }
}

/// out = x†, both row-major dim × dim.
fn dagger_into(x: &[C64], dim: usize, out: &mut [C64]) {
    for r in 0..dim {
        for c in 0..dim {
            out[c * dim + r] = x[r * dim + c].conj();
        }
    }
}

struct Workspace {
    t1: Vec<C64>,
    t2: Vec<C64>,
    t3: Vec<C64>,
}

impl Workspace {
    fn new(sz: usize) -> Self {
        let zero = C64::new(0.0, 0.0);
        Workspace { t1: vec![zero; sz], t2: vec![zero; sz], t3: vec![zero; sz] }
    }
}

/// Sparse factors of the Liouvillian: the effective non-Hermitian matrix
/// A = H − (i/2) Σ_α γ_α c_α†c_α and the jump operators.
struct LiouvillianOps {
    dim: usize,
    a: Csr,
    jumps: Vec<(f64, Csr)>,
}

impl LiouvillianOps {
    fn new(terms: &LindbladTermSet) -> Self {
        let n = terms.n;
        let dim = 1usize << n;
        let i = C64::new(0.0, 1.0);

        // Effective pair matrix K_{jℓ} = J_{jℓ} − (i/2) Σ_α γ_α v̄_j v_ℓ;
        // K multiplies σ_j^+ σ_ℓ^- (number operator on the diagonal).
        let mut k_mat = terms.coherent_pair_couplings.clone();
        for (rate, v) in &terms.collective_jumps {
            for j in 0..n {
                for l in 0..n {
                    k_mat[[j, l]] -= i * 0.5 * *rate * v[j].conj() * v[l];
                }
            }
        }

        let mut trips: Vec<(u32, u32, C64)> = Vec::new();
        if terms.drive_amplitude != 0.0 {
            let omega = C64::new(terms.drive_amplitude, 0.0);
            for j in 0..n {
                let mask = 1u32 << (n - 1 - j);
                for idx in 0..dim as u32 {
                    trips.push((idx ^ mask, idx, omega));
                }
            }
        }
        for j in 0..n {
            let mask_j = 1u32 << (n - 1 - j);
            for l in 0..n {
                let coeff = k_mat[[j, l]];
                if coeff == C64::new(0.0, 0.0) {
                    continue;
                }
                if j == l {
                    for idx in 0..dim as u32 {
                        if idx & mask_j != 0 {
                            trips.push((idx, idx, coeff));
                        }
                    }
                } else {
                    let mask_l = 1u32 << (n - 1 - l);
                    for idx in 0..dim as u32 {
                        if idx & mask_l != 0 && idx & mask_j == 0 {
                            trips.push((idx - mask_l + mask_j, idx, coeff));
                        }
                    }
                }
            }
        }
        let a = Csr::from_triplets(dim, trips);

        let jumps = terms
            .collective_jumps
            .iter()
            .filter(|(rate, _)| *rate > 0.0)
            .map(|(rate, v)| {
                let mut jt: Vec<(u32, u32, C64)> = Vec::new();
                for (l, amp) in v.iter().enumerate() {
                    let mask = 1u32 << (n - 1 - l);
                    for idx in 0..dim as u32 {
                        if idx & mask != 0 {
                            jt.push((idx - mask, idx, *amp));
                        }
                    }
                }
                (*rate, Csr::from_triplets(dim, jt))
            })
            .collect();

        LiouvillianOps { dim, a, jumps }
    }

    /// out = −i(Aρ − ρA†) + Σ_α γ_α c_α ρ c_α†.
    ///
    /// With `hermitian_input` the ρA† product is read off the Aρ product,
    /// halving the work; the general path stays complex-linear in ρ.
    fn apply_into(&self, rho: &[C64], hermitian_input: bool, out: &mut [C64], ws: &mut Workspace) {
        let dim = self.dim;
        let i = C64::new(0.0, 1.0);

        self.a.mul_dense_into(rho, &mut ws.t1);
        if !hermitian_input {
            dagger_into(rho, dim, &mut ws.t2);
            self.a.mul_dense_into(&ws.t2, &mut ws.t3);
        }
        // ρA† = (Aρ†)†, and Aρ† = Aρ for Hermitian input.
        let src: &[C64] = if hermitian_input { &ws.t1 } else { &ws.t3 };
        for r in 0..dim {
            for c in 0..dim {
                out[r * dim + c] = -i * ws.t1[r * dim + c] + i * src[c * dim + r].conj();
            }
        }

        for (rate, cj) in &self.jumps {
            cj.mul_dense_into(rho, &mut ws.t1);
            dagger_into(&ws.t1, dim, &mut ws.t2);
            cj.mul_dense_into(&ws.t2, &mut ws.t3);
            // t3 = c ρ† c†, so t3† = c ρ c† for any input.
            let rate = C64::new(*rate, 0.0);
            for r in 0..dim {
                for c in 0..dim {
                    out[r * dim + c] += rate * ws.t3[c * dim + r].conj();
                }
            }
        }
    }
}

/// Lindblad derivative dρ/dt = −i[H + H_diss, ρ] + Σ_α γ_α (c_α ρ c_α† −
/// ½{c_α†c_α, ρ}). The result is traceless and maps Hermitian input to
/// Hermitian output; it is not a normalized state.
pub fn apply_liouvillian(terms: &LindbladTermSet, state: &DenseState) -> Result<DenseState, EdError> {
    if terms.n > DEFAULT_DENSE_GUARD {
        return Err(EdError::GuardExceeded { n: terms.n, guard: DEFAULT_DENSE_GUARD });
    }
    let dim = 1usize << terms.n;
    if state.n != terms.n || state.matrix.dim() != (dim, dim) {
        return Err(EdError::DimensionMismatch {
            n: terms.n,
            got: state.matrix.dim().0,
            expected: dim,
        });
    }
    let ops = LiouvillianOps::new(terms);
    let rho_arr = state.matrix.as_standard_layout();
    let rho = rho_arr.as_slice().unwrap();
    let mut out = vec![C64::new(0.0, 0.0); dim * dim];
    let mut ws = Workspace::new(dim * dim);
    ops.apply_into(rho, false, &mut out, &mut ws);
    Ok(DenseState { n: terms.n, matrix: Array2::from_shape_vec((dim, dim), out).unwrap() })
}

struct Rk4Buffers {
    k: Vec<C64>,
    stage: Vec<C64>,
    acc: Vec<C64>,
    ws: Workspace,
}

impl Rk4Buffers {
    fn new(sz: usize) -> Self {
        let zero = C64::new(0.0, 0.0);
        Rk4Buffers {
            k: vec![zero; sz],
            stage: vec![zero; sz],
            acc: vec![zero; sz],
            ws: Workspace::new(sz),
        }
    }
}

/// One classical fourth-order Runge–Kutta step, Hermitian input assumed.
fn rk4_step(ops: &LiouvillianOps, rho: &mut [C64], dt: f64, bufs: &mut Rk4Buffers) {
    let sz = rho.len();
    ops.apply_into(rho, true, &mut bufs.k, &mut bufs.ws);
    for idx in 0..sz {
        bufs.acc[idx] = rho[idx] + (dt / 6.0) * bufs.k[idx];
        bufs.stage[idx] = rho[idx] + (dt / 2.0) * bufs.k[idx];
    }
    ops.apply_into(&bufs.stage, true, &mut bufs.k, &mut bufs.ws);
    for idx in 0..sz {
        bufs.acc[idx] += (dt / 3.0) * bufs.k[idx];
        bufs.stage[idx] = rho[idx] + (dt / 2.0) * bufs.k[idx];
    }
    ops.apply_into(&bufs.stage, true, &mut bufs.k, &mut bufs.ws);
    for idx in 0..sz {
        bufs.acc[idx] += (dt / 3.0) * bufs.k[idx];
        bufs.stage[idx] = rho[idx] + dt * bufs.k[idx];
    }
    ops.apply_into(&bufs.stage, true, &mut bufs.k, &mut bufs.ws);
    for idx in 0..sz {
        rho[idx] = bufs.acc[idx] + (dt / 6.0) * bufs.k[idx];
    }
}

/// Integrate the master equation with RK4 and report observables on every
/// step, t = 0 included. The state is renormalized to unit trace after each
/// step; trace drift beyond 1e−8 and positivity violations beyond 1e−6 are
/// reported as metadata warnings, not failures.
pub fn evolve_ed(
    terms: &LindbladTermSet,
    state0: &DenseState,
    grid: &TimeGrid,
) -> Result<ObservableSeries, EdError> {
    evolve_ed_with(terms, state0, grid, &EdOptions::default())
}

/// [`evolve_ed`] with an explicit dense-size guard.
pub fn evolve_ed_with(
    terms: &LindbladTermSet,
    state0: &DenseState,
    grid: &TimeGrid,
    options: &EdOptions,
) -> Result<ObservableSeries, EdError> {
    let n = terms.n;
    if n > options.dense_guard {
        return Err(EdError::GuardExceeded { n, guard: options.dense_guard });
    }
    let dim = 1usize << n;
    if state0.n != n || state0.matrix.dim() != (dim, dim) {
        return Err(EdError::DimensionMismatch {
            n,
            got: state0.matrix.dim().0,
            expected: dim,
        });
    }

    let ops = LiouvillianOps::new(terms);
    let mut rho: Vec<C64> = state0.matrix.iter().copied().collect();
    let mut bufs = Rk4Buffers::new(dim * dim);
    let dt = grid.dt;
    let steps = grid.steps();
    let audit_every = (steps / 64).max(1);

    let mut series = ObservableSeries::new(
        EngineTag::Ed,
        RunMeta::new(dt, terms.fingerprint()),
    );
    series.push(0.0, measure_flat(&rho, n, &terms.phases));

    let mut max_drift = 0.0f64;
    let mut positivity_violated = false;
    for step in 1..=steps {
        rk4_step(&ops, &mut rho, dt, &mut bufs);
        let mut tr = 0.0;
        for i in 0..dim {
            tr += rho[i * dim + i].re;
        }
        max_drift = max_drift.max((tr - 1.0).abs());
        let scale = C64::new(1.0 / tr, 0.0);
        for x in rho.iter_mut() {
            *x *= scale;
        }
        if step % audit_every == 0 || step == steps {
            positivity_violated |= !positivity_witness(&rho, dim);
        }
        series.push(step as f64 * dt, measure_flat(&rho, n, &terms.phases));
    }

    if max_drift > TRACE_DRIFT_TOL {
        series
            .meta
            .warnings
            .push(format!("trace drift {max_drift:.3e} before renormalization"));
    }
    if positivity_violated {
        series
            .meta
            .warnings
            .push(format!("positivity violation beyond {POSITIVITY_TOL:.0e}"));
    }
    Ok(series)
}

/// True when the state passes the affordable positivity check: a Cholesky
/// certificate for small systems, a diagonal witness for large ones.
fn positivity_witness(rho: &[C64], dim: usize) -> bool {
    if dim <= 128 {
        let m = Array2::from_shape_vec((dim, dim), rho.to_vec()).unwrap();
        linalg::is_positive_semidefinite(&m, POSITIVITY_TOL)
    } else {
        (0..dim).all(|i| rho[i * dim + i].re >= -POSITIVITY_TOL)
    }
}

/// Fused vectorization index: per site the ket bit k and bra bit b combine
/// into a = 2k + b, and sites are stacked site-major (site 0 slowest).
pub(crate) fn fuse_index(ket: usize, bra: usize, n: usize) -> usize {
    let mut out = 0usize;
    for j in 0..n {
        let kj = (ket >> (n - 1 - j)) & 1;
        let bj = (bra >> (n - 1 - j)) & 1;
        out = out * 4 + 2 * kj + bj;
    }
    out
}

/// vec(ρ) under the fused per-site convention of [`dense_liouvillian_matrix`].
pub fn vectorize_density(rho: &Array2<C64>, n: usize) -> Array1<C64> {
    let dim = 1usize << n;
    assert_eq!(rho.dim(), (dim, dim), "density matrix dimension mismatch");
    let mut v = Array1::zeros(dim * dim);
    for k in 0..dim {
        for b in 0..dim {
            v[fuse_index(k, b, n)] = rho[[k, b]];
        }
    }
    v
}

/// Inverse of [`vectorize_density`].
pub fn unvectorize_density(v: &Array1<C64>, n: usize) -> Array2<C64> {
    let dim = 1usize << n;
    assert_eq!(v.len(), dim * dim, "vector length mismatch");
    let mut rho = Array2::zeros((dim, dim));
    for k in 0..dim {
        for b in 0..dim {
            rho[[k, b]] = v[fuse_index(k, b, n)];
        }
    }
    rho
}

pub(crate) fn kron(a: &Array2<C64>, b: &Array2<C64>) -> Array2<C64> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    let mut out = Array2::zeros((ar * br, ac * bc));
    for i in 0..ar {
        for j in 0..ac {
            for p in 0..br {
                for q in 0..bc {
                    out[[i * br + p, j * bc + q]] = a[[i, j]] * b[[p, q]];
                }
            }
        }
    }
    out
}

/// ⊗_{j<n} F_j with F_j taken from `factors` or the 2×2 identity.
fn site_kron(n: usize, factors: &[(usize, &Array2<C64>)]) -> Array2<C64> {
    let id2 = Array2::from_diag_elem(2, C64::new(1.0, 0.0));
    let mut out = Array2::from_elem((1, 1), C64::new(1.0, 0.0));
    for j in 0..n {
        let factor = factors
            .iter()
            .find(|(site, _)| *site == j)
            .map(|(_, f)| *f)
            .unwrap_or(&id2);
        out = kron(&out, factor);
    }
    out
}

/// Superoperator for left multiplication, vec(Mρ) = lift · vec(ρ).
fn lift_left(m: &Array2<C64>, n: usize) -> Array2<C64> {
    let dim = 1usize << n;
    let mut out = Array2::zeros((dim * dim, dim * dim));
    for k in 0..dim {
        for kp in 0..dim {
            if m[[k, kp]] == C64::new(0.0, 0.0) {
                continue;
            }
            for b in 0..dim {
                out[[fuse_index(k, b, n), fuse_index(kp, b, n)]] += m[[k, kp]];
            }
        }
    }
    out
}

/// Superoperator for right multiplication, vec(ρM) = lift · vec(ρ).
fn lift_right(m: &Array2<C64>, n: usize) -> Array2<C64> {
    let dim = 1usize << n;
    let mut out = Array2::zeros((dim * dim, dim * dim));
    for bp in 0..dim {
        for b in 0..dim {
            if m[[bp, b]] == C64::new(0.0, 0.0) {
                continue;
            }
            for k in 0..dim {
                out[[fuse_index(k, b, n), fuse_index(k, bp, n)]] += m[[bp, b]];
            }
        }
    }
    out
}

/// Explicit 4^n × 4^n matrix L with vec(dρ/dt) = L·vec(ρ) under the fused
/// per-site convention. Built from Kronecker lifts, independently of the
/// sparse application path, and limited to n ≤ 4.
pub fn dense_liouvillian_matrix(terms: &LindbladTermSet) -> Result<Array2<C64>, EdError> {
    let n = terms.n;
    if n > SUPEROPERATOR_GUARD {
        return Err(EdError::SuperoperatorTooLarge { n, max: SUPEROPERATOR_GUARD });
    }
    let dim = 1usize << n;
    let sdim = dim * dim;
    let i = C64::new(0.0, 1.0);

    let sx = ndarray::array![
        [C64::new(0.0, 0.0), C64::new(1.0, 0.0)],
        [C64::new(1.0, 0.0), C64::new(0.0, 0.0)]
    ];
    let sminus = ndarray::array![
        [C64::new(0.0, 0.0), C64::new(1.0, 0.0)],
        [C64::new(0.0, 0.0), C64::new(0.0, 0.0)]
    ];
    let splus = ndarray::array![
        [C64::new(0.0, 0.0), C64::new(0.0, 0.0)],
        [C64::new(1.0, 0.0), C64::new(0.0, 0.0)]
    ];

    let mut h: Array2<C64> = Array2::zeros((dim, dim));
    if terms.drive_amplitude != 0.0 {
        for j in 0..n {
            h = h + site_kron(n, &[(j, &sx)]) * C64::new(terms.drive_amplitude, 0.0);
        }
    }
    for j in 0..n {
        for l in 0..n {
            if j == l {
                continue;
            }
            let coeff = terms.coherent_pair_couplings[[j, l]];
            if coeff == C64::new(0.0, 0.0) {
                continue;
            }
            h = h + site_kron(n, &[(j, &splus), (l, &sminus)]) * coeff;
        }
    }

    let mut lmat: Array2<C64> = (lift_left(&h, n) - lift_right(&h, n)) * (-i);
    for (rate, v) in &terms.collective_jumps {
        if *rate == 0.0 {
            continue;
        }
        let mut c: Array2<C64> = Array2::zeros((dim, dim));
        for (l, amp) in v.iter().enumerate() {
            c = c + site_kron(n, &[(l, &sminus)]) * *amp;
        }
        let c_dag = c.t().mapv(|x| x.conj());
        let cdc = linalg::matmul(&c_dag, &c);
        let sandwich = linalg::matmul(&lift_left(&c, n), &lift_right(&c_dag, n));
        let anti = (lift_left(&cdc, n) + lift_right(&cdc, n)) * C64::new(0.5, 0.0);
        lmat = lmat + (sandwich - anti) * C64::new(*rate, 0.0);
    }
    debug_assert_eq!(lmat.dim(), (sdim, sdim));
    Ok(lmat)
}

/// Collective-spin state on the |J = n/2, m⟩ ladder; row p holds m = p − n/2.
#[derive(Debug, Clone)]
pub struct DickeState {
    pub n: usize,
    pub matrix: Array2<C64>,
}

impl DickeState {
    /// Fully excited ladder top m = +n/2.
    pub fn all_up(n: usize) -> Self {
        let mut matrix = Array2::zeros((n + 1, n + 1));
        matrix[[n, n]] = C64::new(1.0, 0.0);
        DickeState { n, matrix }
    }

    pub fn trace(&self) -> C64 {
        self.matrix.diag().sum()
    }
}

/// Observables of a ladder state. S⁺S⁻ is diagonal with eigenvalue
/// (J+m)(J−m+1), so every observable is a diagonal scan.
pub fn measure_dicke(state: &DickeState) -> ObservablePoint {
    let n = state.n;
    let j = n as f64 / 2.0;
    let nf = n as f64;
    let mut sz1 = 0.0;
    let mut sz2 = 0.0;
    let mut irs = 0.0;
    for p in 0..=n {
        let m = p as f64 - j;
        let w = state.matrix[[p, p]].re;
        sz1 += w * m;
        sz2 += w * m * m;
        irs += w * (j + m) * (j - m + 1.0);
    }
    ObservablePoint::exact(2.0 * sz1 / nf, 4.0 * (sz2 - sz1 * sz1) / nf, irs / nf)
}

/// Integrate the permutation-symmetric master equation
/// dρ/dt = −i[2Ω S_x, ρ] + 2γ (S⁻ρS⁺ − ½{S⁺S⁻, ρ}) on the (n+1)-dim ladder.
/// Requires commensurate phases and balanced rates.
pub fn evolve_dicke(config: &SystemConfig, grid: &TimeGrid) -> Result<ObservableSeries, EdError> {
    config.validate()?;
    let n = config.n;
    let two_pi = 2.0 * std::f64::consts::PI;
    let commensurate = config
        .phases
        .iter()
        .all(|nu| {
            let d = nu - config.phases[0];
            (d - two_pi * (d / two_pi).round()).abs() < 1e-9
        });
    let balanced = (config.gamma_big_l - config.gamma_big_r).abs()
        <= 1e-12 * config.gamma_big_l.abs().max(config.gamma_big_r.abs()).max(1.0);
    if !commensurate || !balanced {
        return Err(EdError::NotCollective);
    }
    let gamma = 0.5 * (config.gamma_l() + config.gamma_r());

    let j = n as f64 / 2.0;
    let mut sminus: Array2<C64> = Array2::zeros((n + 1, n + 1));
    for p in 1..=n {
        let m = p as f64 - j;
        sminus[[p - 1, p]] = C64::new(((j + m) * (j - m + 1.0)).sqrt(), 0.0);
    }
    let splus = sminus.t().mapv(|x| x.conj());
    // 2Ω S_x = Ω (S⁺ + S⁻).
    let h = (&splus + &sminus) * C64::new(config.omega, 0.0);
    let spsm = linalg::matmul(&splus, &sminus);
    let i = C64::new(0.0, 1.0);
    let deriv = |rho: &Array2<C64>| -> Array2<C64> {
        let comm = linalg::matmul(&h, rho) - linalg::matmul(rho, &h);
        let jump = linalg::matmul(&sminus, &linalg::matmul(rho, &splus));
        let anti = linalg::matmul(&spsm, rho) + linalg::matmul(rho, &spsm);
        comm * (-i) + (jump - anti * C64::new(0.5, 0.0)) * C64::new(2.0 * gamma, 0.0)
    };

    let mut rho = DickeState::all_up(n).matrix;
    let dt = grid.dt;
    let steps = grid.steps();
    let audit_every = (steps / 64).max(1);
    let mut series = ObservableSeries::new(
        EngineTag::Dicke,
        RunMeta::new(dt, config.fingerprint()),
    );
    series.push(0.0, measure_dicke(&DickeState { n, matrix: rho.clone() }));

    let mut max_drift = 0.0f64;
    let mut positivity_violated = false;
    for step in 1..=steps {
        let k1 = deriv(&rho);
        let k2 = deriv(&(&rho + &(&k1 * C64::new(dt / 2.0, 0.0))));
        let k3 = deriv(&(&rho + &(&k2 * C64::new(dt / 2.0, 0.0))));
        let k4 = deriv(&(&rho + &(&k3 * C64::new(dt, 0.0))));
        let incr = (k1 + k2 * C64::new(2.0, 0.0) + k3 * C64::new(2.0, 0.0) + k4)
            * C64::new(dt / 6.0, 0.0);
        rho = &rho + &incr;
        let tr = rho.diag().sum().re;
        max_drift = max_drift.max((tr - 1.0).abs());
        rho *= C64::new(1.0 / tr, 0.0);
        if step.is_multiple_of(audit_every) || step == steps {
            positivity_violated |= !linalg::is_positive_semidefinite(&rho, POSITIVITY_TOL);
        }
        series.push(
            step as f64 * dt,
            measure_dicke(&DickeState { n, matrix: rho.clone() }),
        );
    }

    if max_drift > TRACE_DRIFT_TOL {
        series
            .meta
            .warnings
            .push(format!("trace drift {max_drift:.3e} before renormalization"));
    }
    if positivity_violated {
        series
            .meta
            .warnings
            .push(format!("positivity violation beyond {POSITIVITY_TOL:.0e}"));
    }
    Ok(series)
}
