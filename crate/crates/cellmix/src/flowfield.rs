//! Cellular velocity field on the torus.
//!
//! The stream function is `H(x) = sin(2πx₁/ε)·sin(2πx₂/ε)` and the flow is
//! `u = A·∇⊥(ξH)` where `ξ` is a smooth cutoff in the stream value: `ξ = 1`
//! where `|H| ≤ 1/4` and `ξ = 0` where `|H| ≥ 1/2`. Differentiating through
//! the stream value gives the closed form used everywhere in this crate,
//!
//! ```text
//! u(x) = A · g(H(x)) · ∇⊥H(x),      g(h) = ζ(h) + h·ζ'(h),
//! ```
//!
//! which is divergence free identically, supported on the band
//! `|H| < cutoff_outer`, and inherits the lattice symmetries of `H`.
//!
//! Trigonometric evaluation goes through an exact fold into the periodic cell
//! followed by quadrant reduction, so the symmetry identities
//! (`v₁(-x₁,x₂) = -v₁(x₁,x₂)` etc.) hold bitwise when `1/ε` is a power of
//! two. The coupling construction relies on this.

use thiserror::Error;

pub const TAU: f64 = std::f64::consts::TAU;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("1/epsilon = {0} is not a positive integer")]
    EpsilonNotUnitFraction(f64),
    #[error("kappa must be positive, got {0}")]
    NonPositiveKappa(f64),
    #[error("amplitude must be nonnegative, got {0}")]
    NegativeAmplitude(f64),
    #[error("cutoff levels must satisfy 0 < inner < outer <= 1, got ({0}, {1})")]
    BadCutoffLevels(f64, f64),
    #[error("grid size {0} is not a power of two >= 16")]
    BadGrid(usize),
}

/// Quintic smoothstep `S(t) = 6t⁵ - 15t⁴ + 10t³`, clamped outside `[0,1]`.
#[inline]
pub fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * t * (10.0 + t * (6.0 * t - 15.0))
}

/// Derivative of the clamped quintic smoothstep, `S'(t) = 30t²(1-t)²`.
#[inline]
pub fn smoothstep_deriv(t: f64) -> f64 {
    if !(0.0..=1.0).contains(&t) {
        return 0.0;
    }
    let w = t * (1.0 - t);
    30.0 * w * w
}

/// Even C² cutoff profile in the stream value.
///
/// `zeta(h) = 1` for `|h| <= inner`, `0` for `|h| >= outer`, and the quintic
/// smoothstep of `(outer - |h|)/(outer - inner)` in between.
#[derive(Debug, Clone, Copy)]
pub struct CutoffProfile {
    pub inner: f64,
    pub outer: f64,
    /// max over h of |g(h)|, g = ζ + hζ'; set numerically at construction.
    g_max: f64,
}

impl CutoffProfile {
    pub fn new(inner: f64, outer: f64) -> Result<Self, FlowError> {
        if !(inner > 0.0 && inner < outer && outer <= 1.0) {
            return Err(FlowError::BadCutoffLevels(inner, outer));
        }
        let mut p = CutoffProfile { inner, outer, g_max: 1.0 };
        p.g_max = p.compute_g_max();
        Ok(p)
    }

    pub fn default_paper() -> Self {
        Self::new(0.25, 0.5).expect("default cutoff levels are valid")
    }

    #[inline]
    fn band_t(&self, a: f64) -> f64 {
        (self.outer - a) / (self.outer - self.inner)
    }

    /// ζ(h); even in h.
    #[inline]
    pub fn zeta(&self, h: f64) -> f64 {
        let a = h.abs();
        if a <= self.inner {
            1.0
        } else if a >= self.outer {
            0.0
        } else {
            smoothstep(self.band_t(a))
        }
    }

    /// ζ'(h); odd in h.
    #[inline]
    pub fn zeta_prime(&self, h: f64) -> f64 {
        let a = h.abs();
        if a <= self.inner || a >= self.outer {
            0.0
        } else {
            let d = -smoothstep_deriv(self.band_t(a)) / (self.outer - self.inner);
            if h < 0.0 {
                -d
            } else {
                d
            }
        }
    }

    /// Chain-rule factor `g(h) = ζ(h) + h·ζ'(h)`, computed from `|h|` only so
    /// evenness is exact in floating point.
    #[inline]
    pub fn chain_factor(&self, h: f64) -> f64 {
        let a = h.abs();
        if a <= self.inner {
            1.0
        } else if a >= self.outer {
            0.0
        } else {
            let t = self.band_t(a);
            smoothstep(t) - a * smoothstep_deriv(t) / (self.outer - self.inner)
        }
    }

    /// max |g| over the band (g = 1 inside the inner plateau).
    pub fn g_max(&self) -> f64 {
        self.g_max
    }

    fn compute_g_max(&self) -> f64 {
        // coarse scan + golden-section refinement on |g| over [inner, outer]
        let n = 4096;
        let mut best = 1.0f64;
        let mut best_a = self.inner;
        for i in 0..=n {
            let a = self.inner + (self.outer - self.inner) * i as f64 / n as f64;
            let v = self.chain_factor(a).abs();
            if v > best {
                best = v;
                best_a = a;
            }
        }
        let h = (self.outer - self.inner) / n as f64;
        let (mut lo, mut hi) = (best_a - h, best_a + h);
        let phi = 0.5 * (3.0 - 5.0f64.sqrt());
        for _ in 0..80 {
            let a = lo + phi * (hi - lo);
            let b = hi - phi * (hi - lo);
            if self.chain_factor(a).abs() > self.chain_factor(b).abs() {
                hi = b;
            } else {
                lo = a;
            }
        }
        best.max(self.chain_factor(0.5 * (lo + hi)).abs())
    }
}

/// Parameter triple (ε, A, κ) with derived quantities.
#[derive(Debug, Clone, Copy)]
pub struct FlowParams {
    pub epsilon: f64,
    pub amplitude: f64,
    pub kappa: f64,
    /// 1/ε as an exact integer-valued float.
    pub inv_epsilon: f64,
    pub profile: CutoffProfile,
}

impl FlowParams {
    pub fn new(epsilon: f64, amplitude: f64, kappa: f64) -> Result<Self, FlowError> {
        Self::with_cutoff(epsilon, amplitude, kappa, CutoffProfile::default_paper())
    }

    pub fn with_cutoff(
        epsilon: f64,
        amplitude: f64,
        kappa: f64,
        profile: CutoffProfile,
    ) -> Result<Self, FlowError> {
        if !(epsilon > 0.0) {
            return Err(FlowError::EpsilonNotUnitFraction(f64::NAN));
        }
        let m = (1.0 / epsilon).round();
        if m < 1.0 || ((1.0 / epsilon) - m).abs() > 1e-9 * m {
            return Err(FlowError::EpsilonNotUnitFraction(1.0 / epsilon));
        }
        if !(kappa > 0.0) {
            return Err(FlowError::NonPositiveKappa(kappa));
        }
        if !(amplitude >= 0.0) {
            return Err(FlowError::NegativeAmplitude(amplitude));
        }
        Ok(FlowParams { epsilon, amplitude, kappa, inv_epsilon: m, profile })
    }

    /// Level-set width δ = √(κ/A); defined only for positive amplitude.
    pub fn delta(&self) -> Option<f64> {
        if self.amplitude > 0.0 {
            Some((self.kappa / self.amplitude).sqrt())
        } else {
            None
        }
    }

    /// Upper bound on |u|: A·(2π/ε)·max|g|.
    pub fn speed_bound(&self) -> f64 {
        self.amplitude * TAU * self.inv_epsilon * self.profile.g_max()
    }

    /// H(x) = sin(2πx₁/ε)·sin(2πx₂/ε); accepts unwrapped coordinates.
    #[inline]
    pub fn stream_value(&self, x1: f64, x2: f64) -> f64 {
        let (s1, _) = sincos_cell(cell_phase(x1, self.inv_epsilon));
        let (s2, _) = sincos_cell(cell_phase(x2, self.inv_epsilon));
        s1 * s2
    }

    /// ξ(h) through the configured profile.
    #[inline]
    pub fn cutoff(&self, h: f64) -> f64 {
        self.profile.zeta(h)
    }

    /// Full pointwise evaluation: stream value, cell phases, and velocity.
    #[inline]
    pub fn sample(&self, x1: f64, x2: f64) -> FieldSample {
        let (s1, c1) = sincos_cell(cell_phase(x1, self.inv_epsilon));
        let (s2, c2) = sincos_cell(cell_phase(x2, self.inv_epsilon));
        let h = s1 * s2;
        let scale = TAU * self.inv_epsilon;
        let dh1 = scale * (c1 * s2);
        let dh2 = scale * (s1 * c2);
        let ag = self.amplitude * self.profile.chain_factor(h);
        FieldSample { h, s1, c1, s2, c2, dh1, dh2, u1: -ag * dh2, u2: ag * dh1 }
    }

    /// u(x) = A·g(H)·∇⊥H.
    #[inline]
    pub fn velocity(&self, x1: f64, x2: f64) -> [f64; 2] {
        let s = self.sample(x1, x2);
        [s.u1, s.u2]
    }
}

/// Pointwise field data shared by the SDE stepper and the event detectors.
#[derive(Debug, Clone, Copy)]
pub struct FieldSample {
    pub h: f64,
    pub s1: f64,
    pub c1: f64,
    pub s2: f64,
    pub c2: f64,
    pub dh1: f64,
    pub dh2: f64,
    pub u1: f64,
    pub u2: f64,
}

/// Fold a coordinate to the cell phase r = frac(x/ε) ∈ [0,1).
///
/// Exact (no rounding) when 1/ε is a power of two and |x/ε| < 2⁵².
#[inline]
pub fn cell_phase(x: f64, inv_eps: f64) -> f64 {
    let u = x * inv_eps;
    let r = u - u.floor();
    // frac can return 1.0 for tiny negative u
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// (sin, cos) of 2πr for r ∈ [0,1), quadrant-reduced so that the reflection
/// r ↦ 1-r flips the sine sign exactly and the half-period shift r ↦ r+1/2
/// negates both outputs exactly.
#[inline]
pub fn sincos_cell(r: f64) -> (f64, f64) {
    if r < 0.25 {
        (TAU * r).sin_cos()
    } else if r < 0.5 {
        let (s, c) = (TAU * (0.5 - r)).sin_cos();
        (s, -c)
    } else if r < 0.75 {
        let (s, c) = (TAU * (r - 0.5)).sin_cos();
        (-s, -c)
    } else {
        let (s, c) = (TAU * (1.0 - r)).sin_cos();
        (-s, c)
    }
}

/// Grid diagnostics for the velocity field.
#[derive(Debug, Clone)]
pub struct FieldDiagnostics {
    /// max over the grid of the pointwise divergence residual of the
    /// closed-form derivatives (zero analytically).
    pub max_div_residual: f64,
    /// max |div u| from spectral differentiation of the sampled field;
    /// dominated by band-limitation of the C² cutoff, reported for reference.
    pub max_div_spectral: f64,
    /// residuals of the six lattice symmetries, in the order
    /// v₁(-x₁,x₂)+v₁, v₂(-x₁,x₂)-v₂, v₁(x₁,-x₂)-v₁, v₂(x₁,-x₂)+v₂,
    /// v(x+ε/2·e₁)+v, v(x+ε/2·e₂)+v.
    pub sym_residuals: [f64; 6],
    pub max_speed: f64,
    pub grid_n: usize,
}

/// Evaluate the field on a `grid_n`² grid and check exactness properties.
pub fn field_diagnostics(params: &FlowParams, grid_n: usize) -> Result<FieldDiagnostics, FlowError> {
    if grid_n < 16 || !grid_n.is_power_of_two() {
        return Err(FlowError::BadGrid(grid_n));
    }
    let n = grid_n;
    let hstep = 1.0 / n as f64;
    let mut u1 = vec![0.0f64; n * n];
    let mut u2 = vec![0.0f64; n * n];
    let mut max_speed = 0.0f64;
    let mut max_div = 0.0f64;
    let a = params.amplitude;
    let scale = TAU * params.inv_epsilon;
    for i in 0..n {
        for j in 0..n {
            let x1 = i as f64 * hstep;
            let x2 = j as f64 * hstep;
            let s = params.sample(x1, x2);
            u1[i * n + j] = s.u1;
            u2[i * n + j] = s.u2;
            max_speed = max_speed.max((s.u1 * s.u1 + s.u2 * s.u2).sqrt());
            // independent closed forms for ∂₁u₁ and ∂₂u₂:
            //   ∂₁u₁ = -A(g'(H)·H₁H₂ + g(H)·H₁₂)
            //   ∂₂u₂ =  A(g'(H)·H₂H₁ + g(H)·H₁₂)
            let gp = chain_factor_prime(&params.profile, s.h);
            let gh = params.profile.chain_factor(s.h);
            let d2h12 = scale * scale * (s.c1 * s.c2);
            let d1u1 = -a * (gp * s.dh1 * s.dh2 + gh * d2h12);
            let d2u2 = a * (gp * s.dh2 * s.dh1 + gh * d2h12);
            max_div = max_div.max((d1u1 + d2u2).abs());
        }
    }
    let max_div_spectral = spectral_divergence_max(&u1, &u2, n);
    let sym_residuals = symmetry_residuals(params, n);
    Ok(FieldDiagnostics {
        max_div_residual: max_div,
        max_div_spectral,
        sym_residuals,
        max_speed,
        grid_n: n,
    })
}

/// g'(h) = 2ζ'(h) + h·ζ''(h).
fn chain_factor_prime(p: &CutoffProfile, h: f64) -> f64 {
    let a = h.abs();
    if a <= p.inner || a >= p.outer {
        return 0.0;
    }
    let w = p.outer - p.inner;
    let t = (p.outer - a) / w;
    // S''(t) = 60 t (2t-1)(t-1)
    let s2 = 60.0 * t * (2.0 * t - 1.0) * (t - 1.0);
    let d = -smoothstep_deriv(t) / w * 2.0 + a * s2 / (w * w);
    if h < 0.0 {
        -d
    } else {
        d
    }
}

fn symmetry_residuals(params: &FlowParams, n: usize) -> [f64; 6] {
    let hstep = 1.0 / n as f64;
    let half = params.epsilon / 2.0;
    let mut res = [0.0f64; 6];
    for i in 0..n {
        for j in 0..n {
            let x1 = i as f64 * hstep;
            let x2 = j as f64 * hstep;
            let v = params.velocity(x1, x2);
            let vm1 = params.velocity(-x1, x2);
            let vm2 = params.velocity(x1, -x2);
            let vs1 = params.velocity(x1 + half, x2);
            let vs2 = params.velocity(x1, x2 + half);
            res[0] = res[0].max((vm1[0] + v[0]).abs());
            res[1] = res[1].max((vm1[1] - v[1]).abs());
            res[2] = res[2].max((vm2[0] - v[0]).abs());
            res[3] = res[3].max((vm2[1] + v[1]).abs());
            res[4] = res[4].max((vs1[0] + v[0]).abs().max((vs1[1] + v[1]).abs()));
            res[5] = res[5].max((vs2[0] + v[0]).abs().max((vs2[1] + v[1]).abs()));
        }
    }
    res
}

fn spectral_divergence_max(u1: &[f64], u2: &[f64], n: usize) -> f64 {
    use num_complex::Complex64;
    use rustfft::FftPlanner;
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let to_c = |v: &[f64]| -> Vec<Complex64> { v.iter().map(|&x| Complex64::new(x, 0.0)).collect() };
    let mut a = to_c(u1);
    let mut b = to_c(u2);
    fft2(&mut a, n, fwd.as_ref());
    fft2(&mut b, n, fwd.as_ref());
    let mut div = vec![Complex64::new(0.0, 0.0); n * n];
    for i in 0..n {
        let k1 = freq(i, n);
        for j in 0..n {
            let k2 = freq(j, n);
            let idx = i * n + j;
            div[idx] =
                Complex64::new(0.0, TAU * k1) * a[idx] + Complex64::new(0.0, TAU * k2) * b[idx];
        }
    }
    fft2(&mut div, n, inv.as_ref());
    let norm = 1.0 / (n * n) as f64;
    div.iter().map(|z| (z * norm).norm()).fold(0.0, f64::max)
}

#[inline]
pub(crate) fn freq(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// In-place 2-D FFT by rows then columns (unnormalized).
pub(crate) fn fft2(data: &mut [num_complex::Complex64], n: usize, plan: &dyn rustfft::Fft<f64>) {
    use num_complex::Complex64;
    for row in data.chunks_exact_mut(n) {
        plan.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); n];
    for j in 0..n {
        for i in 0..n {
            col[i] = data[i * n + j];
        }
        plan.process(&mut col);
        for i in 0..n {
            data[i * n + j] = col[i];
        }
    }
}
