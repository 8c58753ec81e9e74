//! Euler-Maruyama simulation of dX = A·v(X)dt + √κ dB on the unit torus,
//! the ε-torus, and the lifted plane.
//!
//! Simulation always advances unwrapped plane coordinates; torus views are
//! exact folds of the plane state (bit-identical for power-of-two 1/ε), which
//! keeps lifted and wrapped runs consistent and makes lattice symmetries of
//! the drift usable by the coupling construction.

use crate::flowfield::{cell_phase, FlowParams, TAU};
use crate::rng::RngStream;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SdeError {
    #[error("time cap {t_max} exceeded before the stop predicate fired")]
    CapExceeded { t_max: f64 },
    #[error("step policy requires positive amplitude; supply dt explicitly for A = 0")]
    AmplitudeZero,
    #[error("step policy invalid: {0}")]
    BadPolicy(String),
    #[error("1/eps = {0} is not a positive integer")]
    BadEpsilon(f64),
}

/// Unbounded plane coordinates (lifted process).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanePoint {
    pub x1: f64,
    pub x2: f64,
}

impl PlanePoint {
    pub fn new(x1: f64, x2: f64) -> Self {
        PlanePoint { x1, x2 }
    }

    /// Fold onto the torus of the given period.
    pub fn to_torus(self, period: f64) -> TorusPoint {
        TorusPoint::new(self.x1, self.x2, period)
    }
}

/// A point reduced into [0, period)². `period` is 1 for the unit torus and
/// ε for the cell torus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TorusPoint {
    pub x1: f64,
    pub x2: f64,
    pub period: f64,
}

impl TorusPoint {
    pub fn new(x1: f64, x2: f64, period: f64) -> Self {
        let inv = 1.0 / period;
        TorusPoint {
            x1: period * cell_phase(x1, inv),
            x2: period * cell_phase(x2, inv),
            period,
        }
    }

    pub fn unit(x1: f64, x2: f64) -> Self {
        Self::new(x1, x2, 1.0)
    }

    pub fn to_plane(self) -> PlanePoint {
        PlanePoint { x1: self.x1, x2: self.x2 }
    }
}

/// Reduce a unit-torus point onto the ε-torus.
pub fn project_cell(x: TorusPoint, eps: f64) -> Result<TorusPoint, SdeError> {
    let m = (1.0 / eps).round();
    if !(eps > 0.0) || m < 1.0 || ((1.0 / eps) - m).abs() > 1e-9 * m {
        return Err(SdeError::BadEpsilon(1.0 / eps));
    }
    Ok(TorusPoint::new(x.x1, x.x2, eps))
}

/// Orthogonal transform applied to the partner's noise within a coupled pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseTransform {
    Identity,
    /// Partner consumes its own independent draw.
    Independent,
    /// (g₁, g₂) ↦ (-g₁, g₂)
    MirrorX,
    /// (g₁, g₂) ↦ (g₁, -g₂)
    MirrorY,
    /// I - 2n̂n̂ᵀ for a unit normal n̂.
    Reflection { nhat: [f64; 2] },
}

impl NoiseTransform {
    pub fn reflection(nhat: [f64; 2]) -> Self {
        NoiseTransform::Reflection { nhat }
    }

    /// The 2×2 matrix of the transform (`Independent` acts as identity on
    /// the partner's own draw).
    pub fn matrix(&self) -> [[f64; 2]; 2] {
        match self {
            NoiseTransform::Identity | NoiseTransform::Independent => [[1.0, 0.0], [0.0, 1.0]],
            NoiseTransform::MirrorX => [[-1.0, 0.0], [0.0, 1.0]],
            NoiseTransform::MirrorY => [[1.0, 0.0], [0.0, -1.0]],
            NoiseTransform::Reflection { nhat } => {
                let [n1, n2] = *nhat;
                [
                    [1.0 - 2.0 * n1 * n1, -2.0 * n1 * n2],
                    [-2.0 * n1 * n2, 1.0 - 2.0 * n2 * n2],
                ]
            }
        }
    }

    /// Apply to a Gaussian pair. Axis mirrors are exact sign flips.
    #[inline]
    pub fn apply(&self, g: [f64; 2]) -> [f64; 2] {
        match self {
            NoiseTransform::Identity | NoiseTransform::Independent => g,
            NoiseTransform::MirrorX => [-g[0], g[1]],
            NoiseTransform::MirrorY => [g[0], -g[1]],
            NoiseTransform::Reflection { nhat } => {
                let d = nhat[0] * g[0] + nhat[1] * g[1];
                [g[0] - 2.0 * d * nhat[0], g[1] - 2.0 * d * nhat[1]]
            }
        }
    }
}

/// Time-step policy.
///
/// `resolving` is the conservative default: both the drift displacement and
/// the noise standard deviation per step stay below `safety` times the
/// boundary-layer width εδ. `coarse_mc` is the long-horizon Monte Carlo
/// policy used by the sweeps: it resolves the cell geometry, keeps the
/// per-step stream-value noise below `0.35δ`, and bounds the spurious
/// Euler drift of H below half the per-step noise in H; event-time
/// convergence under refinement is covered by the step-refinement tests.
#[derive(Debug, Clone, Copy)]
pub struct StepPolicy {
    pub dt: f64,
    pub safety: f64,
    pub bridge_correction: bool,
    pub t_max: f64,
}

/// safety·min(ε²δ/(2π·A·g_max), ε²/A): drift and diffusion both resolve εδ.
pub fn default_dt(params: &FlowParams) -> Result<f64, SdeError> {
    default_dt_with_safety(params, 0.05)
}

fn default_dt_with_safety(params: &FlowParams, safety: f64) -> Result<f64, SdeError> {
    if params.amplitude <= 0.0 {
        return Err(SdeError::AmplitudeZero);
    }
    if !(safety > 0.0) {
        return Err(SdeError::BadPolicy(format!("safety must be positive, got {safety}")));
    }
    let eps = params.epsilon;
    let a = params.amplitude;
    let delta = params.delta().expect("amplitude > 0");
    let adv = eps * eps * delta / (TAU * a * params.profile.g_max());
    let dif = eps * eps / a;
    Ok(safety * adv.min(dif))
}

impl StepPolicy {
    /// Default cap: 50·(ε²/κ + 1/√(κA)).
    pub fn default_t_max(params: &FlowParams) -> f64 {
        let diff = params.epsilon * params.epsilon / params.kappa;
        let adv = if params.amplitude > 0.0 {
            1.0 / (params.kappa * params.amplitude).sqrt()
        } else {
            0.0
        };
        50.0 * (diff + adv)
    }

    pub fn resolving(params: &FlowParams, safety: f64) -> Result<Self, SdeError> {
        Ok(StepPolicy {
            dt: default_dt_with_safety(params, safety)?,
            safety,
            bridge_correction: false,
            t_max: Self::default_t_max(params),
        })
    }

    pub fn default_for(params: &FlowParams) -> Result<Self, SdeError> {
        Self::resolving(params, 0.05)
    }

    /// Monte Carlo policy for long-horizon sweeps.
    pub fn coarse_mc(params: &FlowParams) -> Result<Self, SdeError> {
        if params.amplitude <= 0.0 {
            return Err(SdeError::AmplitudeZero);
        }
        let eps = params.epsilon;
        let a = params.amplitude;
        let gmax = params.profile.g_max();
        let four_pi2 = TAU * TAU / 2.0 * 2.0; // 4π²
        // drift displacement <= 0.1 ε/(2π) per step
        let cell = 0.1 * eps * eps / (four_pi2 * a * gmax);
        // per-step noise in H <= 0.35 δ
        let s_h = 0.35 / TAU;
        let noise = s_h * s_h * eps * eps / a;
        // spurious Euler H-drift <= half the per-step H-noise
        let q_curv = 6.0;
        let hfid = (params.kappa.sqrt() * eps * eps / (four_pi2 * a * a * q_curv)).powf(2.0 / 3.0);
        Ok(StepPolicy {
            dt: cell.min(noise).min(hfid),
            safety: 0.05,
            bridge_correction: false,
            t_max: Self::default_t_max(params),
        })
    }

    /// Explicit step size (required for the drift-free case).
    pub fn explicit(dt: f64, t_max: f64) -> Result<Self, SdeError> {
        if !(dt > 0.0) || !(t_max > 0.0) {
            return Err(SdeError::BadPolicy(format!("dt = {dt}, t_max = {t_max}")));
        }
        Ok(StepPolicy { dt, safety: 0.05, bridge_correction: false, t_max })
    }

    pub fn with_t_max(mut self, t_max: f64) -> Self {
        self.t_max = t_max;
        self
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn with_bridge_correction(mut self, on: bool) -> Self {
        self.bridge_correction = on;
        self
    }
}

/// One Euler-Maruyama step of the plane process with a transformed Gaussian
/// pair: x ← x + A·v(x)·dt + √(κ·dt)·(T·gauss).
#[inline]
pub fn advance_plane(
    x: PlanePoint,
    dt: f64,
    gauss: [f64; 2],
    transform: &NoiseTransform,
    params: &FlowParams,
) -> PlanePoint {
    let u = params.velocity(x.x1, x.x2);
    let g = transform.apply(gauss);
    let s = (params.kappa * dt).sqrt();
    PlanePoint { x1: x.x1 + u[0] * dt + s * g[0], x2: x.x2 + u[1] * dt + s * g[1] }
}

/// Same step with wrapping into the fundamental domain.
#[inline]
pub fn advance_torus(
    x: TorusPoint,
    dt: f64,
    gauss: [f64; 2],
    transform: &NoiseTransform,
    params: &FlowParams,
) -> TorusPoint {
    let p = advance_plane(x.to_plane(), dt, gauss, transform, params);
    TorusPoint::new(p.x1, p.x2, x.period)
}

/// One integration step as seen by event detectors.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub t_prev: f64,
    pub dt: f64,
    pub prev: PlanePoint,
    pub next: PlanePoint,
}

/// Where and when a stop predicate fired.
#[derive(Debug, Clone, Copy)]
pub struct StopRecord {
    pub time: f64,
    pub state: PlanePoint,
    pub steps: u64,
}

/// Drive the plane process until the predicate returns a refined stop
/// (time, state), or fail with `CapExceeded` at `policy.t_max`.
pub fn simulate_until<F>(
    x0: PlanePoint,
    policy: &StepPolicy,
    params: &FlowParams,
    rng: &mut RngStream,
    mut stop: F,
) -> Result<StopRecord, SdeError>
where
    F: FnMut(&StepRecord) -> Option<(f64, PlanePoint)>,
{
    let mut t = 0.0f64;
    let mut x = x0;
    let mut steps = 0u64;
    // `stop` sees a zero-length segment first so "already stopped" starts win
    let first = StepRecord { t_prev: 0.0, dt: 0.0, prev: x0, next: x0 };
    if let Some((time, state)) = stop(&first) {
        return Ok(StopRecord { time, state, steps: 0 });
    }
    while t < policy.t_max {
        let g = rng.normal_pair();
        let next = advance_plane(x, policy.dt, g, &NoiseTransform::Identity, params);
        let rec = StepRecord { t_prev: t, dt: policy.dt, prev: x, next };
        steps += 1;
        if let Some((time, state)) = stop(&rec) {
            return Ok(StopRecord { time, state, steps });
        }
        x = next;
        t += policy.dt;
    }
    Err(SdeError::CapExceeded { t_max: policy.t_max })
}

/// A recorded path, subsampled by `stride` steps.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub points: Vec<PlanePoint>,
}

pub fn simulate_path(
    x0: PlanePoint,
    policy: &StepPolicy,
    params: &FlowParams,
    rng: &mut RngStream,
    t_end: f64,
    stride: usize,
) -> Trajectory {
    let stride = stride.max(1);
    let mut t = 0.0f64;
    let mut x = x0;
    let mut times = vec![0.0];
    let mut points = vec![x0];
    let mut k = 0usize;
    while t < t_end {
        let g = rng.normal_pair();
        x = advance_plane(x, policy.dt, g, &NoiseTransform::Identity, params);
        t += policy.dt;
        k += 1;
        if k % stride == 0 {
            times.push(t);
            points.push(x);
        }
    }
    Trajectory { times, points }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(eps: f64, amp: f64, kappa: f64) -> FlowParams {
        FlowParams::new(eps, amp, kappa).unwrap()
    }

    #[test]
    fn project_cell_examples() {
        let p = TorusPoint::unit(0.75, 0.25);
        let q = project_cell(p, 0.5).unwrap();
        assert!((q.x1 - 0.25).abs() < 1e-15 && (q.x2 - 0.25).abs() < 1e-15);
        let z = project_cell(TorusPoint::unit(0.0, 0.0), 0.25).unwrap();
        assert_eq!((z.x1, z.x2), (0.0, 0.0));
        let w = project_cell(TorusPoint::unit(0.3, 0.9), 0.25).unwrap();
        assert!((w.x1 - 0.05).abs() < 1e-15 && (w.x2 - 0.15).abs() < 1e-14);
        assert!(project_cell(p, 0.3).is_err());
    }

    #[test]
    fn advance_trivial_cases() {
        let p = params(0.25, 0.0, 1e-12);
        // noiseless, driftless: fixed (kappa must be positive, so use gauss = 0)
        let x = PlanePoint::new(0.3, 0.4);
        let y = advance_plane(x, 1e-3, [0.0, 0.0], &NoiseTransform::Identity, &p);
        assert_eq!(x, y);
        // stagnation point fixed under pure drift
        let p2 = params(0.25, 10.0, 1e-12);
        let z = advance_plane(PlanePoint::new(0.0, 0.0), 1e-3, [0.0, 0.0], &NoiseTransform::Identity, &p2);
        assert_eq!(z, PlanePoint::new(0.0, 0.0));
    }

    #[test]
    fn drift_conserves_stream_value_order_dt2() {
        // pure drift: per-step H error shrinks ~dt²; compare one macro-step
        // against many sub-steps over the same horizon
        let p = params(0.25, 4.0, 1e-9);
        let x0 = PlanePoint::new(0.031, 0.012);
        let h0 = p.stream_value(x0.x1, x0.x2);
        let horizon = 1e-3;
        let mut errs = Vec::new();
        for &nsub in &[8usize, 16, 32, 64] {
            let dt = horizon / nsub as f64;
            let mut x = x0;
            for _ in 0..nsub {
                x = advance_plane(x, dt, [0.0, 0.0], &NoiseTransform::Identity, &p);
            }
            errs.push((p.stream_value(x.x1, x.x2) - h0).abs());
        }
        // halving dt should cut the accumulated error by about 2 (order dt²
        // local, dt global over fixed horizon)
        for w in errs.windows(2) {
            assert!(w[1] < 0.7 * w[0], "{errs:?}");
        }
    }

    #[test]
    fn default_dt_formula() {
        let p = params(1.0 / 16.0, 8.0, 1e-3);
        let dt = default_dt(&p).unwrap();
        let eps = p.epsilon;
        let delta = p.delta().unwrap();
        let adv = eps * eps * delta / (TAU * 8.0 * p.profile.g_max());
        let dif = eps * eps / 8.0;
        assert!((dt - 0.05 * adv.min(dif)).abs() < 1e-18);
        assert!((dif - 4.88e-4).abs() < 1e-5); // diffusive ceiling
        // doubling A at most halves dt
        let p2 = params(1.0 / 16.0, 16.0, 1e-3);
        assert!(default_dt(&p2).unwrap() <= 0.5 * dt * 1.0000001);
        // A = 0 and safety = 0 rejected
        assert!(default_dt(&params(0.25, 0.0, 0.01)).is_err());
        assert!(StepPolicy::resolving(&p, 0.0).is_err());
    }

    #[test]
    fn simulate_until_time_stop() {
        let p = params(0.25, 1.0, 0.01);
        let policy = StepPolicy::explicit(1e-3, 10.0).unwrap();
        let mut rng = RngStream::new(1, 0);
        let rec = simulate_until(PlanePoint::new(0.1, 0.1), &policy, &p, &mut rng, |s| {
            if s.t_prev + s.dt >= 1.0 {
                Some((s.t_prev + s.dt, s.next))
            } else {
                None
            }
        })
        .unwrap();
        assert_eq!(rec.steps, 1000);
    }

    #[test]
    fn simulate_until_cap() {
        let p = params(0.25, 1.0, 0.01);
        let policy = StepPolicy::explicit(1e-3, 0.1).unwrap();
        let mut rng = RngStream::new(1, 0);
        let err = simulate_until(PlanePoint::new(0.1, 0.1), &policy, &p, &mut rng, |_| None);
        assert!(matches!(err, Err(SdeError::CapExceeded { .. })));
    }

    #[test]
    fn crossing_stop_always_fires() {
        // torus line {x1 = 0.5} is hit a.s.: all of 300 runs stop
        let p = params(0.25, 2.0, 0.01);
        let policy = StepPolicy::coarse_mc(&p).unwrap().with_t_max(200.0);
        for k in 0..300 {
            let mut rng = RngStream::new(99, k);
            let rec = simulate_until(PlanePoint::new(0.49, 0.2), &policy, &p, &mut rng, |s| {
                let crossed = (s.prev.x1 - 0.5).floor() != (s.next.x1 - 0.5).floor();
                if crossed && s.dt > 0.0 {
                    Some((s.t_prev + s.dt, s.next))
                } else {
                    None
                }
            });
            assert!(rec.is_ok(), "stream {k}: {rec:?}");
        }
    }

    #[test]
    fn lift_consistency() {
        // same stream on the torus (wrap each step) and on the plane
        // (fold at the end) agree at every step
        let p = params(0.125, 50.0, 0.01);
        let policy = StepPolicy::coarse_mc(&p).unwrap();
        let mut rng_a = RngStream::new(5, 11);
        let mut rng_b = RngStream::new(5, 11);
        let mut plane = PlanePoint::new(0.73, 0.22);
        let mut torus = TorusPoint::unit(0.73, 0.22);
        for _ in 0..20_000 {
            let ga = rng_a.normal_pair();
            let gb = rng_b.normal_pair();
            assert_eq!(ga, gb);
            plane = advance_plane(plane, policy.dt, ga, &NoiseTransform::Identity, &p);
            torus = advance_torus(torus, policy.dt, gb, &NoiseTransform::Identity, &p);
            let folded = plane.to_torus(1.0);
            assert!(
                (folded.x1 - torus.x1).abs() <= 1e-12 && (folded.x2 - torus.x2).abs() <= 1e-12,
                "lift mismatch"
            );
        }
    }

    #[test]
    fn strong_order_one_additive_noise() {
        // fixed Brownian path; error vs half-step reference decays ~ dt.
        // the horizon is kept short so hyperbolic stretching does not
        // saturate the comparison, and errors are averaged over paths.
        let p = params(0.25, 2.0, 0.01);
        let t_end = 1e-3;
        let finest = 1024usize;
        let mut err = [0.0f64; 3]; // gaps 8->4, 4->2, 2->1
        let n_paths = 32;
        for path in 0..n_paths {
            let mut rng = RngStream::new(17, path);
            let fine: Vec<[f64; 2]> = (0..finest).map(|_| rng.normal_pair()).collect();
            let run = |levels: usize| -> PlanePoint {
                let steps = finest / levels;
                let dt = t_end / steps as f64;
                // start inside the active band (H small), where the drift acts
                let mut x = PlanePoint::new(0.01, 0.12);
                for i in 0..steps {
                    let mut g = [0.0, 0.0];
                    for z in &fine[i * levels..(i + 1) * levels] {
                        g[0] += z[0];
                        g[1] += z[1];
                    }
                    let norm = (levels as f64).sqrt();
                    x = advance_plane(
                        x,
                        dt,
                        [g[0] / norm, g[1] / norm],
                        &NoiseTransform::Identity,
                        &p,
                    );
                }
                x
            };
            let xs: Vec<PlanePoint> = [8usize, 4, 2, 1].iter().map(|&l| run(l)).collect();
            for k in 0..3 {
                err[k] += ((xs[k].x1 - xs[k + 1].x1).powi(2)
                    + (xs[k].x2 - xs[k + 1].x2).powi(2))
                .sqrt()
                    / n_paths as f64;
            }
        }
        // least-squares slope of ln(err) against ln(dt)
        let ys: Vec<f64> = err.iter().map(|e| e.ln()).collect();
        let xbar = 1.0f64;
        let ybar = ys.iter().sum::<f64>() / 3.0;
        let num: f64 = (0..3).map(|k| (k as f64 - xbar) * (ys[k] - ybar)).sum();
        let den: f64 = (0..3).map(|k| (k as f64 - xbar).powi(2)).sum();
        let slope = -(num / den) / std::f64::consts::LN_2;
        assert!((slope - 1.0).abs() <= 0.2, "strong order slope {slope}, errs {err:?}");
    }

    #[test]
    fn transforms_orthogonal() {
        let cases = [
            NoiseTransform::Identity,
            NoiseTransform::MirrorX,
            NoiseTransform::MirrorY,
            NoiseTransform::reflection([1.0, 0.0]),
            NoiseTransform::reflection([0.6, 0.8]),
        ];
        for t in cases {
            let m = t.matrix();
            for i in 0..2 {
                for j in 0..2 {
                    let dot = m[i][0] * m[j][0] + m[i][1] * m[j][1];
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - expect).abs() < 1e-14);
                }
            }
        }
    }
}
