//! Post-processing: time-averaged deviation metrics, engine cost models,
//! Savitzky-Golay smoothing, peak extraction, quadratic fits in the
//! emitter-spacing parameter, and the perturbative peak prediction.

use thiserror::Error;

use crate::series::{Observable, ObservableSeries};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("series is empty")]
    Empty,
    #[error("series cover [{lo:.6}, {hi:.6}] and cannot be compared over [0, {t_final:.6}]")]
    NoOverlap { lo: f64, hi: f64, t_final: f64 },
    #[error("window {window} and order {order} do not define a smoothing filter")]
    BadFilter { window: usize, order: usize },
    #[error("fit needs at least 3 points, got {got}")]
    TooFewPoints { got: usize },
    #[error("design matrix is degenerate; the fit has no unique solution")]
    DegenerateFit,
}

/// One engine run summarized by its resource cost and its deviation
/// metric against the reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergencePoint {
    pub cost: f64,
    pub metric: f64,
}

/// Plateau of the deviation metric over the largest costs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plateau {
    /// Mean metric over the plateau region.
    pub value: f64,
    /// Smallest cost from which every metric stays within the plateau
    /// tolerance.
    pub sufficient_cost: f64,
}

/// Deviation metrics of one observable across a ladder of resource
/// costs, with plateau detection over the largest costs.
#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub observable: Observable,
    /// Identity of the reference series (exact engine or the largest
    /// resource run).
    pub reference: String,
    /// Sorted by ascending cost.
    pub points: Vec<ConvergencePoint>,
    pub plateau: Option<Plateau>,
}

/// Relative agreement of the two most expensive runs that counts as a
/// plateau.
pub const PLATEAU_REL_TOL: f64 = 0.2;

/// Assembles a report and detects a plateau: the metrics at the two
/// largest costs must agree within [`PLATEAU_REL_TOL`] relative; the
/// plateau value is their mean and the sufficient cost is the smallest
/// cost from which every metric stays within that tolerance of the mean.
pub fn convergence_report(
    observable: Observable,
    reference: impl Into<String>,
    mut points: Vec<ConvergencePoint>,
) -> ConvergenceReport {
    points.sort_by(|a, b| a.cost.total_cmp(&b.cost));
    let plateau = if points.len() >= 2 {
        let last = points[points.len() - 1].metric;
        let prev = points[points.len() - 2].metric;
        let scale = last.abs().max(prev.abs()).max(f64::MIN_POSITIVE);
        if (last - prev).abs() <= PLATEAU_REL_TOL * scale {
            let value = 0.5 * (last + prev);
            let tol = PLATEAU_REL_TOL * value.abs().max(f64::MIN_POSITIVE);
            let mut start = points.len() - 2;
            while start > 0 && (points[start - 1].metric - value).abs() <= tol {
                start -= 1;
            }
            Some(Plateau { value, sufficient_cost: points[start].cost })
        } else {
            None
        }
    } else {
        None
    };
    ConvergenceReport { observable, reference: reference.into(), points, plateau }
}

/// Peak-versus-spacing scan: measured peaks, their quadratic fit, and
/// the perturbative prediction evaluated on the same spacings.
#[derive(Debug, Clone)]
pub struct PeakScan {
    /// (epsilon, peak value), distinct nonnegative epsilons.
    pub points: Vec<(f64, f64)>,
    /// (c2, c0) of peak = c2 (100 epsilon)^2 + c0, when the fit exists.
    pub fit: Option<(f64, f64)>,
    /// (epsilon, predicted peak) from the perturbative formula.
    pub prediction: Vec<(f64, f64)>,
}

impl PeakScan {
    /// Builds the scan from measured peaks; the prediction uses the
    /// measured commensurate peak as its anchor.
    pub fn new(points: Vec<(f64, f64)>, n: usize) -> Result<Self, AnalysisError> {
        if points.is_empty() {
            return Err(AnalysisError::Empty);
        }
        for (i, (eps, _)) in points.iter().enumerate() {
            if *eps < 0.0 {
                return Err(AnalysisError::DegenerateFit);
            }
            if points[..i].iter().any(|(e, _)| e == eps) {
                return Err(AnalysisError::DegenerateFit);
            }
        }
        let fit = quadratic_fit(&points).ok();
        let ir0 = points
            .iter()
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|&(_, v)| v)
            .unwrap();
        let prediction = points
            .iter()
            .map(|&(eps, _)| (eps, perturbative_peak(n, eps, ir0)))
            .collect();
        Ok(PeakScan { points, fit, prediction })
    }
}

fn interpolate(times: &[f64], values: &[f64], t: f64) -> f64 {
    match times.binary_search_by(|x| x.total_cmp(&t)) {
        Ok(i) => values[i],
        Err(i) => {
            if i == 0 {
                values[0]
            } else if i == times.len() {
                values[times.len() - 1]
            } else {
                let (t0, t1) = (times[i - 1], times[i]);
                let w = (t - t0) / (t1 - t0);
                values[i - 1] * (1.0 - w) + values[i] * w
            }
        }
    }
}

/// Time-averaged squared deviation (1/T) integral of (value - ref)^2
/// over [0, T], trapezoidal on the primary grid with the reference
/// linearly resampled onto it.
pub fn convergence_metric(
    times: &[f64],
    values: &[f64],
    ref_times: &[f64],
    ref_values: &[f64],
    t_final: f64,
) -> Result<f64, AnalysisError> {
    if times.is_empty() || ref_times.is_empty() {
        return Err(AnalysisError::Empty);
    }
    assert_eq!(times.len(), values.len());
    assert_eq!(ref_times.len(), ref_values.len());
    let slack = 1e-9 * t_final.max(1.0);
    let lo = times[0].max(ref_times[0]);
    let hi = times[times.len() - 1].min(ref_times[ref_times.len() - 1]);
    // `t_final` must be a positive finite number; NaN fails the guard.
    if t_final.is_nan() || t_final <= 0.0 || lo > slack || hi < t_final - slack {
        return Err(AnalysisError::NoOverlap { lo, hi, t_final });
    }

    // Evaluation grid: the primary grid clipped to [0, T], with T
    // appended when the grid extends past it.
    let mut grid: Vec<f64> = times.iter().copied().filter(|&t| t >= 0.0 && t <= t_final).collect();
    if let Some(&last) = grid.last() {
        if last < t_final - slack {
            grid.push(t_final);
        }
    } else {
        return Err(AnalysisError::NoOverlap { lo, hi, t_final });
    }

    let sq_dev = |t: f64| {
        let v = interpolate(times, values, t);
        let r = interpolate(ref_times, ref_values, t);
        (v - r) * (v - r)
    };
    let mut integral = 0.0;
    for w in grid.windows(2) {
        integral += 0.5 * (w[1] - w[0]) * (sq_dev(w[0]) + sq_dev(w[1]));
    }
    Ok(integral / t_final)
}

/// Convenience wrapper comparing one observable column of two series.
pub fn series_convergence_metric(
    series: &ObservableSeries,
    reference: &ObservableSeries,
    obs: Observable,
    t_final: f64,
) -> Result<f64, AnalysisError> {
    convergence_metric(
        &series.times,
        &series.column(obs),
        &reference.times,
        &reference.column(obs),
        t_final,
    )
}

/// Engine whose leading cost is modeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostKind {
    /// Matrix-product engine: cost n chi^3.
    Tn,
    /// Autoregressive-network engine: cost n^4 d_h + n^3 d_h^2.
    Nqs,
}

/// Leading computational cost of one engine configuration; `resource`
/// is the bond dimension or the hidden dimension.
pub fn cost_model(kind: CostKind, n: usize, resource: usize) -> f64 {
    let n = n as u64;
    let r = resource as u64;
    let cost = match kind {
        CostKind::Tn => n * r * r * r,
        CostKind::Nqs => n * n * n * n * r + n * n * n * r * r,
    };
    cost as f64
}

/// Result of smoothing, with the filter parameters actually used after
/// any auto-reduction for short inputs.
#[derive(Debug, Clone)]
pub struct Smoothed {
    pub values: Vec<f64>,
    pub window: usize,
    pub order: usize,
}

/// Center-point least-squares kernel over the symmetric window.
fn savgol_kernel(window: usize, order: usize) -> Vec<f64> {
    let m = (window / 2) as i64;
    let cols = order + 1;
    // Normal matrix G[p][q] = sum_i i^(p+q); right side picks the
    // constant coefficient of the local fit.
    let mut g = vec![vec![0.0; cols]; cols];
    for p in 0..cols {
        for q in 0..cols {
            let mut s = 0.0;
            for i in -m..=m {
                s += (i as f64).powi((p + q) as i32);
            }
            g[p][q] = s;
        }
    }
    // Solve G c = e_0 by Gauss elimination with partial pivoting.
    let mut rhs = vec![0.0; cols];
    rhs[0] = 1.0;
    for col in 0..cols {
        let pivot = (col..cols)
            .max_by(|&a, &b| g[a][col].abs().total_cmp(&g[b][col].abs()))
            .unwrap();
        g.swap(col, pivot);
        rhs.swap(col, pivot);
        let d = g[col][col];
        for k in 0..cols {
            g[col][k] /= d;
        }
        rhs[col] /= d;
        for row in 0..cols {
            if row != col && g[row][col] != 0.0 {
                let f = g[row][col];
                for k in 0..cols {
                    g[row][k] -= f * g[col][k];
                }
                rhs[row] -= f * rhs[col];
            }
        }
    }
    // Kernel value at offset i: sum_p c_p i^p.
    (-m..=m)
        .map(|i| (0..cols).map(|p| rhs[p] * (i as f64).powi(p as i32)).sum())
        .collect()
}

/// Savitzky-Golay smoothing with mirror padding.
///
/// The window must be odd and larger than the order.  Inputs shorter
/// than the window reduce it to the largest valid odd size (and the
/// order below it); the parameters actually used are returned.
pub fn savgol(values: &[f64], window: usize, order: usize) -> Result<Smoothed, AnalysisError> {
    if values.is_empty() {
        return Err(AnalysisError::Empty);
    }
    if window.is_multiple_of(2) || order >= window {
        return Err(AnalysisError::BadFilter { window, order });
    }
    let len = values.len();
    let mut window = window;
    let mut order = order;
    if window > len {
        window = if len.is_multiple_of(2) { len - 1 } else { len };
        if order >= window {
            order = window - 1;
        }
    }
    if window <= 1 {
        return Ok(Smoothed { values: values.to_vec(), window: 1, order: 0 });
    }

    let kernel = savgol_kernel(window, order);
    let m = window / 2;
    // Mirror padding about the edge samples, excluding the edge itself.
    let pick = |idx: i64| -> f64 {
        let last = (len - 1) as i64;
        let mut i = idx;
        if i < 0 {
            i = -i;
        }
        if i > last {
            i = 2 * last - i;
        }
        values[i.clamp(0, last) as usize]
    };
    let smoothed = (0..len)
        .map(|c| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, &h)| h * pick(c as i64 + k as i64 - m as i64))
                .sum()
        })
        .collect();
    Ok(Smoothed { values: smoothed, window, order })
}

/// Smooths the three observable columns of a series in place of the raw
/// values; standard errors are carried through unchanged.  A reduced
/// window is recorded as a warning on the returned series.
pub fn smooth_series(
    series: &ObservableSeries,
    window: usize,
    order: usize,
) -> Result<ObservableSeries, AnalysisError> {
    let mut out = series.clone();
    let mut effective = (window, order);
    for obs in Observable::all() {
        let smoothed = savgol(&series.column(obs), window, order)?;
        effective = (smoothed.window, smoothed.order);
        for (point, value) in out.points.iter_mut().zip(smoothed.values) {
            match obs {
                Observable::Z => point.z = value,
                Observable::Fz2 => point.fz2 = value,
                Observable::Ir => point.ir = value,
            }
        }
    }
    if effective != (window, order) {
        out.meta.warnings.push(format!(
            "smoothing window reduced to {} (order {}) for a series of {} samples",
            effective.0,
            effective.1,
            series.times.len()
        ));
    }
    Ok(out)
}

/// Maximum of the series and the time where it is attained.
pub fn peak_intensity(times: &[f64], values: &[f64]) -> Result<(f64, f64), AnalysisError> {
    if times.is_empty() || times.len() != values.len() {
        return Err(AnalysisError::Empty);
    }
    let mut best = 0;
    for i in 1..values.len() {
        if values[i] > values[best] {
            best = i;
        }
    }
    Ok((values[best], times[best]))
}

/// Least squares of peak = c2 x^2 + c0 with x = 100 epsilon; returns
/// (c2, c0).
pub fn quadratic_fit(points: &[(f64, f64)]) -> Result<(f64, f64), AnalysisError> {
    if points.len() < 3 {
        return Err(AnalysisError::TooFewPoints { got: points.len() });
    }
    let mut s4 = 0.0;
    let mut s2 = 0.0;
    let mut b2 = 0.0;
    let mut b0 = 0.0;
    let s0 = points.len() as f64;
    for &(eps, y) in points {
        let x2 = (100.0 * eps) * (100.0 * eps);
        s4 += x2 * x2;
        s2 += x2;
        b2 += x2 * y;
        b0 += y;
    }
    let det = s4 * s0 - s2 * s2;
    if det.abs() <= 1e-12 * (s4 * s0).max(s2 * s2).max(1.0) {
        return Err(AnalysisError::DegenerateFit);
    }
    let c2 = (b2 * s0 - s2 * b0) / det;
    let c0 = (s4 * b0 - s2 * b2) / det;
    Ok((c2, c0))
}

/// Second-order prediction of the peak intensity at emitter spacing
/// detuning epsilon, anchored to the measured commensurate peak.
pub fn perturbative_peak(n: usize, epsilon: f64, ir0: f64) -> f64 {
    let nn = (n * (n + 1)) as f64;
    ir0 - epsilon * epsilon * std::f64::consts::PI * std::f64::consts::PI * ((ir0 - 0.5) / 3.0) * nn
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ed::{evolve_ed, initial_state};
    use crate::model::{build_lindblad_terms, SpacingSpec, SystemConfig};
    use crate::series::TimeGrid;
    use crate::tn::{evolve_tn, TruncationPolicy};
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn metric_vanishes_on_identical_series_and_squares_offsets() {
        let times: Vec<f64> = (0..101).map(|k| k as f64 * 0.01).collect();
        let values: Vec<f64> = times.iter().map(|t| (3.0 * t).sin()).collect();
        let zero = convergence_metric(&times, &values, &times, &values, 1.0).unwrap();
        assert_abs_diff_eq!(zero, 0.0, epsilon = 1e-15);

        let shifted: Vec<f64> = values.iter().map(|v| v + 0.25).collect();
        let metric = convergence_metric(&times, &shifted, &times, &values, 1.0).unwrap();
        assert_abs_diff_eq!(metric, 0.25 * 0.25, epsilon = 1e-12);

        // Tripling the deviation multiplies the metric by nine.
        let tripled: Vec<f64> = values.iter().map(|v| v + 0.75).collect();
        let metric9 = convergence_metric(&times, &tripled, &times, &values, 1.0).unwrap();
        assert_abs_diff_eq!(metric9 / metric, 9.0, epsilon = 1e-10);
    }

    #[test]
    fn metric_resamples_mismatched_grids() {
        let fine: Vec<f64> = (0..201).map(|k| k as f64 * 0.005).collect();
        let coarse: Vec<f64> = (0..11).map(|k| k as f64 * 0.1).collect();
        // Both series are linear in t, so linear resampling is exact.
        let series: Vec<f64> = fine.iter().map(|t| 2.0 * t + 1.0).collect();
        let reference: Vec<f64> = coarse.iter().map(|t| 2.0 * t).collect();
        let metric = convergence_metric(&fine, &series, &coarse, &reference, 1.0).unwrap();
        assert_abs_diff_eq!(metric, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn metric_rejects_missing_overlap() {
        let times: Vec<f64> = (0..10).map(|k| k as f64 * 0.01).collect();
        let values = vec![0.0; 10];
        assert!(matches!(
            convergence_metric(&times, &values, &times, &values, 5.0),
            Err(AnalysisError::NoOverlap { .. })
        ));
    }

    #[test]
    fn truncation_ladder_converges_toward_exact_reference() {
        let config = SystemConfig::new(3, 1.0, 1.0, 0.0, &SpacingSpec::Commensurate).unwrap();
        let terms = build_lindblad_terms(&config).unwrap();
        let grid = TimeGrid::new(2.0, 1e-3).unwrap();
        let exact = evolve_ed(&terms, &initial_state(3).unwrap(), &grid).unwrap();
        // Bond 4 is exact for three sites, so the ladder tops out there.
        let mut metrics = Vec::new();
        for chi in [1usize, 2, 4] {
            let run = evolve_tn(&terms, &TruncationPolicy::new(chi, 0.0).unwrap(), &grid).unwrap();
            let m = series_convergence_metric(&run.series, &exact, Observable::Z, 2.0).unwrap();
            assert!(m >= 0.0);
            metrics.push(m);
        }
        assert!(
            metrics[0] > metrics[1] && metrics[1] > metrics[2],
            "metrics should fall with bond dimension: {metrics:?}"
        );
    }

    #[test]
    fn cost_models_match_closed_forms() {
        assert_eq!(cost_model(CostKind::Tn, 20, 64), 5_242_880.0);
        assert_eq!(cost_model(CostKind::Nqs, 12, 8), 276_480.0);
        assert_eq!(cost_model(CostKind::Tn, 1, 1), 1.0);
    }

    #[test]
    fn smoothing_preserves_constants_and_interior_cubics() {
        let constant = vec![0.7; 400];
        let out = savgol(&constant, 201, 3).unwrap();
        assert_eq!(out.window, 201);
        for v in &out.values {
            assert_abs_diff_eq!(*v, 0.7, epsilon = 1e-12);
        }

        let cubic: Vec<f64> = (0..400)
            .map(|k| {
                let t = k as f64 / 400.0;
                0.3 - 1.2 * t + 0.8 * t * t + 2.0 * t * t * t
            })
            .collect();
        let out = savgol(&cubic, 201, 3).unwrap();
        for k in 100..300 {
            assert!(
                (out.values[k] - cubic[k]).abs() < 1e-10,
                "interior sample {k} deviates by {:.3e}",
                (out.values[k] - cubic[k]).abs()
            );
        }
    }

    #[test]
    fn smoothing_suppresses_white_noise() {
        let mut rng = ChaCha8Rng::from_seed([5; 32]);
        let noisy: Vec<f64> = (0..2000)
            .map(|_| {
                // Sum of 12 uniforms: variance 1, mean 0, nearly normal.
                let g: f64 = (0..12).map(|_| rng.gen::<f64>() - 0.5).sum();
                1.0 + 0.1 * g
            })
            .collect();
        let out = savgol(&noisy, 201, 3).unwrap();
        let std = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
        };
        let before = std(&noisy);
        let after = std(&out.values);
        assert!(
            after * 5.0 < before,
            "noise std only fell from {before:.4} to {after:.4}"
        );
    }

    #[test]
    fn short_series_reduce_the_window() {
        let short: Vec<f64> = (0..20).map(|k| k as f64).collect();
        let out = savgol(&short, 201, 3).unwrap();
        assert_eq!(out.window, 19);
        assert_eq!(out.order, 3);
        assert_eq!(out.values.len(), 20);

        assert!(matches!(
            savgol(&short, 200, 3),
            Err(AnalysisError::BadFilter { .. })
        ));
        assert!(matches!(
            savgol(&short, 5, 5),
            Err(AnalysisError::BadFilter { .. })
        ));
    }

    #[test]
    fn peak_extraction_matches_grid_maximum() {
        let times: Vec<f64> = (0..500).map(|k| k as f64 * 0.01).collect();
        let values: Vec<f64> = times.iter().map(|t| t * (-t).exp()).collect();
        let (peak, at) = peak_intensity(&times, &values).unwrap();
        let brute = values.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(peak, brute);
        assert_abs_diff_eq!(at, 1.0, epsilon = 0.01 + 1e-12);

        // Monotone decay peaks at the first sample.
        let decay: Vec<f64> = times.iter().map(|t| (-2.0 * t).exp()).collect();
        let (_, at) = peak_intensity(&times, &decay).unwrap();
        assert_eq!(at, 0.0);
    }

    #[test]
    fn quadratic_fit_recovers_exact_parabolas() {
        let grid = [0.0, 0.0025, 0.005, 0.0075, 0.01];
        let points: Vec<(f64, f64)> = grid
            .iter()
            .map(|&eps| {
                let x = 100.0 * eps;
                (eps, -0.302 * x * x + 3.377)
            })
            .collect();
        let (c2, c0) = quadratic_fit(&points).unwrap();
        assert_abs_diff_eq!(c2, -0.302, epsilon = 1e-10);
        assert_abs_diff_eq!(c0, 3.377, epsilon = 1e-10);

        let flat: Vec<(f64, f64)> = grid.iter().map(|&eps| (eps, 1.5)).collect();
        let (c2, c0) = quadratic_fit(&flat).unwrap();
        assert_abs_diff_eq!(c2, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c0, 1.5, epsilon = 1e-12);

        let degenerate = vec![(0.0, 3.3), (0.0, 3.4), (0.0, 3.5)];
        assert!(matches!(
            quadratic_fit(&degenerate),
            Err(AnalysisError::DegenerateFit)
        ));
        assert!(matches!(
            quadratic_fit(&points[..2]),
            Err(AnalysisError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn perturbative_prediction_evaluates_the_closed_form() {
        assert_eq!(perturbative_peak(16, 0.0, 3.377), 3.377);

        let predicted = perturbative_peak(16, 0.01, 3.377);
        let drop = 3.377 - predicted;
        assert!((drop - 0.257).abs() < 1e-3, "drop was {drop:.4}");
        assert!((predicted - 3.120).abs() < 1e-3);

        // Small-spacing agreement with the quadratic fit through the
        // same constants.
        for &eps in &[0.0025, 0.005, 0.0075, 0.01] {
            let x = 100.0 * eps;
            let fit = -0.302 * x * x + 3.377;
            let pert = perturbative_peak(16, eps, 3.377);
            assert!(
                (pert - fit).abs() / fit.abs() < 0.1,
                "eps={eps}: prediction {pert:.4} vs fit {fit:.4}"
            );
        }
    }

    #[test]
    fn plateau_detection_over_cost_ladders() {
        let points = vec![
            ConvergencePoint { cost: 1.0, metric: 1.0 },
            ConvergencePoint { cost: 2.0, metric: 0.5 },
            ConvergencePoint { cost: 3.0, metric: 0.11 },
            ConvergencePoint { cost: 4.0, metric: 0.1 },
        ];
        let report = convergence_report(Observable::Z, "exact", points);
        let plateau = report.plateau.expect("plateau should be detected");
        assert_abs_diff_eq!(plateau.value, 0.105, epsilon = 1e-12);
        assert_eq!(plateau.sufficient_cost, 3.0);
        for p in &report.points {
            if p.cost >= plateau.sufficient_cost {
                assert!((p.metric - plateau.value).abs() <= PLATEAU_REL_TOL * plateau.value);
            }
        }

        let falling = vec![
            ConvergencePoint { cost: 1.0, metric: 1.0 },
            ConvergencePoint { cost: 2.0, metric: 0.5 },
            ConvergencePoint { cost: 3.0, metric: 0.2 },
            ConvergencePoint { cost: 4.0, metric: 0.05 },
        ];
        assert!(convergence_report(Observable::Z, "exact", falling).plateau.is_none());
    }

    #[test]
    fn peak_scan_validates_and_predicts() {
        let points = vec![(0.0, 3.377), (0.005, 3.31), (0.01, 3.12)];
        let scan = PeakScan::new(points, 16).unwrap();
        assert!(scan.fit.is_some());
        assert_eq!(scan.prediction[0], (0.0, 3.377));

        assert!(PeakScan::new(vec![(0.0, 1.0), (0.0, 2.0), (0.01, 3.0)], 4).is_err());
        assert!(PeakScan::new(vec![(-0.1, 1.0), (0.0, 2.0), (0.01, 3.0)], 4).is_err());
    }
}
