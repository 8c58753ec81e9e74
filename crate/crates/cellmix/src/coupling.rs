//! Four-stage coupling of two copies of the diffusion.
//!
//! Stage 1 couples the projections on the ε-torus: run the pair
//! independently until both sit in the drift-free core region U′ of the same
//! reflected cell copy, then reflect the partner's noise across the
//! perpendicular bisector until the separation coordinate changes sign.
//! Stage 2 drives both synchronously until the first coordinate reaches the
//! (ε/2)-lattice; stage 3 mirrors the partner's first noise coordinate until
//! both land on the same vertical line; stages 4-5 repeat in the horizontal
//! direction, completing the coupling.
//!
//! Within synchronous and mirror stages the partner is carried through the
//! exact symmetry identity it satisfies (an ε-lattice offset, or reflection
//! about a lattice bisector): the flow-field evaluator makes these
//! identities bitwise for power-of-two 1/ε, so the separation coordinate is
//! exact and no closeness tolerance enters coupling detection. The
//! `DesyncDetected` checks re-derive the partner's ε-torus position every
//! step and fail hard if the identities drift.

use crate::flowfield::FlowParams;
use crate::rng::RngStream;
use crate::sde::{advance_plane, NoiseTransform, PlanePoint, SdeError, StepPolicy, StepRecord};
use crate::stopping::{detect_line_hit, StoppingError};
use thiserror::Error;

pub const GLUE_TOL: f64 = 1e-8;
const DESYNC_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CouplingError {
    #[error("time cap {t_max} exceeded during {stage:?}")]
    CapExceeded { t_max: f64, stage: Stage },
    #[error("degenerate pair: |y - y~| below 1e-14")]
    DegeneratePair,
    #[error("pair desynchronised in {stage:?}: defect {defect:.3e} exceeds tolerance")]
    DesyncDetected { stage: Stage, defect: f64 },
    #[error("stage precondition violated: {0}")]
    PreconditionViolated(String),
    #[error("invalid cell regions: {0}")]
    RegionInvalid(String),
    #[error(transparent)]
    Stopping(#[from] StoppingError),
    #[error(transparent)]
    Sde(#[from] SdeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Projection,
    SyncVertical,
    MirrorVertical,
    SyncHorizontal,
    MirrorHorizontal,
}

/// Membership geometry for the stage-1 regions Q = [0, ε/2]²,
/// U = Q ∩ {H > cutoff_outer}, U′ = Q ∩ {H > h₀}, together with their
/// translates in the opposite cell family.
#[derive(Debug, Clone, Copy)]
pub struct CellRegions {
    pub h0: f64,
    pub u_level: f64,
}

/// Which reflected copy of the core a point sits in: the sign of
/// sin(2πx₁/ε) (both sines share it wherever H > 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoreComponent {
    Positive,
    Negative,
}

impl CellRegions {
    pub fn new(params: &FlowParams, h0: f64) -> Result<Self, CouplingError> {
        if !(h0 > 0.75 && h0 < 1.0) {
            return Err(CouplingError::RegionInvalid(format!(
                "h0 = {h0} outside (3/4, 1)"
            )));
        }
        let u_level = params.profile.outer;
        if h0 <= u_level {
            return Err(CouplingError::RegionInvalid(format!(
                "h0 = {h0} must exceed the cutoff outer level {u_level}"
            )));
        }
        let r = CellRegions { h0, u_level };
        r.validate_inscribed_squares()?;
        Ok(r)
    }

    pub fn default_for(params: &FlowParams) -> Result<Self, CouplingError> {
        Self::new(params, 0.9)
    }

    /// U′ membership, with the component tag; `h` and `s1` come from a field
    /// sample at the point.
    #[inline]
    pub fn core_component(&self, h: f64, s1: f64) -> Option<CoreComponent> {
        if h > self.h0 {
            Some(if s1 > 0.0 { CoreComponent::Positive } else { CoreComponent::Negative })
        } else {
            None
        }
    }

    /// U membership (drift-free plateau).
    #[inline]
    pub fn in_u(&self, h: f64) -> bool {
        h > self.u_level
    }

    /// For every pair y, ỹ ∈ U′ the square centered at y with side |y - ỹ|
    /// and sides parallel to the perpendicular bisector must lie in U. U is
    /// a superlevel set of exp(log cos + log cos) in cell units, hence
    /// convex, so checking the four corners suffices.
    fn validate_inscribed_squares(&self) -> Result<(), CouplingError> {
        // normalized quarter cell: coordinates a = 2πx/ε - π/2 ∈ (-π/2, π/2),
        // H = cos(a₁)cos(a₂)
        let hval = |a: [f64; 2]| a[0].cos() * a[1].cos();
        let n = 96;
        let mut pts: Vec<[f64; 2]> = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let a = [
                    (i as f64 + 0.5) / n as f64 * std::f64::consts::PI - std::f64::consts::FRAC_PI_2,
                    (j as f64 + 0.5) / n as f64 * std::f64::consts::PI - std::f64::consts::FRAC_PI_2,
                ];
                if hval(a) > self.h0 {
                    pts.push(a);
                }
            }
        }
        if pts.is_empty() {
            return Err(CouplingError::RegionInvalid(format!("U' empty at h0 = {}", self.h0)));
        }
        for (i, &y) in pts.iter().enumerate() {
            for &z in pts.iter().skip(i + 1) {
                let d = [z[0] - y[0], z[1] - y[1]];
                let r = (d[0] * d[0] + d[1] * d[1]).sqrt() / 2.0;
                if r == 0.0 {
                    continue;
                }
                let nh = [d[0] / (2.0 * r), d[1] / (2.0 * r)];
                let np = [-nh[1], nh[0]];
                for (s, t) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                    let corner = [
                        y[0] + r * (s * nh[0] + t * np[0]),
                        y[1] + r * (s * nh[1] + t * np[1]),
                    ];
                    if corner[0].abs() >= std::f64::consts::FRAC_PI_2
                        || corner[1].abs() >= std::f64::consts::FRAC_PI_2
                        || hval(corner) <= self.u_level
                    {
                        return Err(CouplingError::RegionInvalid(format!(
                            "inscribed square escapes U for h0 = {}",
                            self.h0
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Reflection about the line perpendicular to y - ỹ (shortest ε-torus
/// displacement): I - 2n̂n̂ᵀ.
pub fn reflection_transform(
    y: PlanePoint,
    y_tilde: PlanePoint,
    eps: f64,
) -> Result<NoiseTransform, CouplingError> {
    let (d, _) = torus_displacement(y_tilde, y, eps); // d = y - ỹ shortest
    let norm = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if norm < 1e-14 {
        return Err(CouplingError::DegeneratePair);
    }
    Ok(NoiseTransform::reflection([d[0] / norm, d[1] / norm]))
}

/// Shortest representative of (to - from) mod ε and the ε-lattice part, so
/// that to - from = d + lattice exactly.
fn torus_displacement(from: PlanePoint, to: PlanePoint, eps: f64) -> ([f64; 2], [f64; 2]) {
    let raw = [to.x1 - from.x1, to.x2 - from.x2];
    let mut d = [0.0; 2];
    let mut lat = [0.0; 2];
    for k in 0..2 {
        let n = (raw[k] / eps).round();
        lat[k] = n * eps;
        d[k] = raw[k] - lat[k];
    }
    (d, lat)
}

/// Snap an offset to the ε-lattice; error if it is not one.
fn snap_eps_offset(
    raw: [f64; 2],
    eps: f64,
    stage: Stage,
) -> Result<[f64; 2], CouplingError> {
    let mut off = [0.0; 2];
    for k in 0..2 {
        let n = (raw[k] / eps).round();
        let resid = (raw[k] - n * eps).abs();
        if resid > GLUE_TOL * eps {
            return Err(CouplingError::DesyncDetected { stage, defect: resid / eps });
        }
        off[k] = n * eps;
    }
    Ok(off)
}

/// Distance of a cell phase difference to the nearest integer, in absolute
/// (unit-torus) units scaled back by ε.
#[inline]
fn phase_defect(a: f64, b: f64, eps: f64) -> f64 {
    let d = a - b;
    (d - d.round()).abs() * eps
}

/// Result of one coupling stage.
#[derive(Debug, Clone, Copy)]
pub struct StageOutcome {
    pub duration: f64,
    pub x: PlanePoint,
    pub x_tilde: PlanePoint,
    /// worst violation of the stage's preserved relation along the path.
    pub max_defect: f64,
}

/// Stage-1 result carries the retry count.
#[derive(Debug, Clone, Copy)]
pub struct Stage1Outcome {
    pub duration: f64,
    pub attempts: u32,
    pub x: PlanePoint,
    pub x_tilde: PlanePoint,
}

fn sample_parts(params: &FlowParams, x: PlanePoint) -> (f64, f64) {
    let s = params.sample(x.x1, x.x2);
    (s.h, s.s1)
}

/// Stage 1: couple the ε-torus projections.
pub fn stage1_couple_projections(
    x0: PlanePoint,
    x0_tilde: PlanePoint,
    params: &FlowParams,
    regions: &CellRegions,
    policy: &StepPolicy,
    rng: &mut RngStream,
) -> Result<Stage1Outcome, CouplingError> {
    let eps = params.epsilon;
    let mut x = x0;
    let mut partner = x0_tilde;
    let mut t = 0.0f64;
    let mut attempts = 0u32;
    let dt = policy.dt;
    let sd = (params.kappa * dt).sqrt();

    // already coincident projections glue immediately
    {
        let (d, lat) = torus_displacement(x, partner, eps);
        if d[0].abs().max(d[1].abs()) < 1e-14 {
            let glued = PlanePoint::new(x.x1 + lat[0], x.x2 + lat[1]);
            return Ok(Stage1Outcome { duration: 0.0, attempts: 0, x, x_tilde: glued });
        }
    }

    loop {
        // phase (a): independent evolution until both projections sit in U'
        // of the same reflected copy
        loop {
            let (h1, s1) = sample_parts(params, x);
            let (h2, s2) = sample_parts(params, partner);
            match (regions.core_component(h1, s1), regions.core_component(h2, s2)) {
                (Some(a), Some(b)) if a == b => break,
                _ => {}
            }
            if t >= policy.t_max {
                return Err(CouplingError::CapExceeded {
                    t_max: policy.t_max,
                    stage: Stage::Projection,
                });
            }
            let g1 = rng.normal_pair();
            let g2 = rng.normal_pair();
            x = advance_plane(x, dt, g1, &NoiseTransform::Identity, params);
            partner = advance_plane(partner, dt, g2, &NoiseTransform::Independent, params);
            t += dt;
        }
        attempts += 1;

        // phase (b): reflection coupling inside the drift-free core
        let (d, lat) = torus_displacement(x, partner, eps);
        let mut s = (d[0] * d[0] + d[1] * d[1]).sqrt();
        if s < 1e-14 {
            let glued = PlanePoint::new(x.x1 + lat[0], x.x2 + lat[1]);
            return Ok(Stage1Outcome { duration: t, attempts, x, x_tilde: glued });
        }
        let mhat = [d[0] / s, d[1] / s];
        loop {
            if t >= policy.t_max {
                return Err(CouplingError::CapExceeded {
                    t_max: policy.t_max,
                    stage: Stage::Projection,
                });
            }
            let g = rng.normal_pair();
            let x_next = advance_plane(x, dt, g, &NoiseTransform::Identity, params);
            let s_next = s - 2.0 * sd * (mhat[0] * g[0] + mhat[1] * g[1]);
            if s_next <= 0.0 {
                // separation coordinate changed sign: coupled within the step
                let frac = if s_next < s { s / (s - s_next) } else { 1.0 };
                let xs = PlanePoint::new(
                    x.x1 + frac * (x_next.x1 - x.x1),
                    x.x2 + frac * (x_next.x2 - x.x2),
                );
                t += frac * dt;
                let glued = PlanePoint::new(xs.x1 + lat[0], xs.x2 + lat[1]);
                return Ok(Stage1Outcome { duration: t, attempts, x: xs, x_tilde: glued });
            }
            let partner_next = PlanePoint::new(
                x_next.x1 + s_next * mhat[0] + lat[0],
                x_next.x2 + s_next * mhat[1] + lat[1],
            );
            x = x_next;
            s = s_next;
            t += dt;
            let (hx, sx) = sample_parts(params, x);
            let (hp, sp) = sample_parts(params, partner_next);
            let same_copy = (sx > 0.0) == (sp > 0.0);
            if !(regions.in_u(hx) && regions.in_u(hp) && same_copy) {
                // left the core: back to independent evolution
                partner = partner_next;
                break;
            }
        }
    }
}

/// Stages 2 and 4: synchronous evolution until coordinate `axis` of X lies
/// on the (ε/2)-lattice. The partner stays an exact ε-lattice translate.
pub fn stage2_sync_to_lattice(
    x0: PlanePoint,
    x0_tilde: PlanePoint,
    axis: usize,
    params: &FlowParams,
    policy: &StepPolicy,
    rng: &mut RngStream,
) -> Result<StageOutcome, CouplingError> {
    let eps = params.epsilon;
    let stage = if axis == 1 { Stage::SyncVertical } else { Stage::SyncHorizontal };
    let raw = [x0_tilde.x1 - x0.x1, x0_tilde.x2 - x0.x2];
    let off = snap_eps_offset(raw, eps, stage)?;
    let half = eps / 2.0;
    let mut x = x0;
    let mut t = 0.0f64;
    let mut max_defect = 0.0f64;
    let dt = policy.dt;

    let on_lattice = |w: f64| -> bool { w == (w / half).round() * half };
    let coord = |p: &PlanePoint| if axis == 1 { p.x1 } else { p.x2 };
    if on_lattice(coord(&x)) {
        let xt = PlanePoint::new(x.x1 + off[0], x.x2 + off[1]);
        return Ok(StageOutcome { duration: 0.0, x, x_tilde: xt, max_defect: 0.0 });
    }
    loop {
        if t >= policy.t_max {
            return Err(CouplingError::CapExceeded { t_max: policy.t_max, stage });
        }
        let g = rng.normal_pair();
        let next = advance_plane(x, dt, g, &NoiseTransform::Identity, params);
        let seg = StepRecord { t_prev: t, dt, prev: x, next };
        // synchronous identity: projections agree exactly (offset is lattice)
        let defect = phase_defect(
            crate::flowfield::cell_phase(next.x1 + off[0], params.inv_epsilon),
            crate::flowfield::cell_phase(next.x1, params.inv_epsilon),
            eps,
        )
        .max(phase_defect(
            crate::flowfield::cell_phase(next.x2 + off[1], params.inv_epsilon),
            crate::flowfield::cell_phase(next.x2, params.inv_epsilon),
            eps,
        ));
        max_defect = max_defect.max(defect);
        if defect > DESYNC_TOL * eps {
            return Err(CouplingError::DesyncDetected { stage, defect: defect / eps });
        }
        if let Some(ev) = detect_line_hit(&seg, half, axis)? {
            let mut xe = ev.location;
            // place the hit coordinate exactly on the lattice
            if axis == 1 {
                xe.x1 = ev.index as f64 * half;
            } else {
                xe.x2 = ev.index as f64 * half;
            }
            let xt = PlanePoint::new(xe.x1 + off[0], xe.x2 + off[1]);
            return Ok(StageOutcome { duration: ev.time, x: xe, x_tilde: xt, max_defect });
        }
        x = next;
        t += dt;
    }
}

/// Stages 3 and 5: mirror coupling of coordinate `axis` until X and X̃ lie
/// on the same lattice line. The partner is the exact reflection of X about
/// the bisector `a` (a multiple of ε/2), shifted by the untouched lattice
/// offset in the other coordinate.
pub fn stage3_mirror_to_bisector(
    x0: PlanePoint,
    x0_tilde: PlanePoint,
    axis: usize,
    params: &FlowParams,
    policy: &StepPolicy,
    rng: &mut RngStream,
) -> Result<StageOutcome, CouplingError> {
    let eps = params.epsilon;
    let stage = if axis == 1 { Stage::MirrorVertical } else { Stage::MirrorHorizontal };
    let raw = [x0_tilde.x1 - x0.x1, x0_tilde.x2 - x0.x2];
    let off = snap_eps_offset(raw, eps, stage)?;
    let half = eps / 2.0;

    // the driven coordinate must start on the (ε/2)-lattice
    let mut x = x0;
    let snap = |w: f64| -> Result<f64, CouplingError> {
        let k = (w / half).round();
        if (w - k * half).abs() > 1e-9 * eps {
            return Err(CouplingError::PreconditionViolated(format!(
                "axis-{axis} coordinate {w} not on the eps/2 lattice"
            )));
        }
        Ok(k * half)
    };
    let (off_axis, off_other) = if axis == 1 { (off[0], off[1]) } else { (off[1], off[0]) };
    if axis == 1 {
        x.x1 = snap(x.x1)?;
    } else {
        x.x2 = snap(x.x2)?;
    }
    if off_axis == 0.0 {
        let xt = if axis == 1 {
            PlanePoint::new(x.x1, x.x2 + off_other)
        } else {
            PlanePoint::new(x.x1 + off_other, x.x2)
        };
        return Ok(StageOutcome { duration: 0.0, x, x_tilde: xt, max_defect: 0.0 });
    }
    // bisector: a = x_axis + off_axis/2, a multiple of ε/2; the lifted
    // target set is {a + k, k ∈ ℤ}. The driven copy consumes the raw draw;
    // the partner, reflected about a, is exactly the trajectory the mirror
    // transform (-g₁, g₂) resp. (g₁, -g₂) would produce.
    let a = if axis == 1 { x.x1 + off_axis / 2.0 } else { x.x2 + off_axis / 2.0 };

    let mut t = 0.0f64;
    let mut max_defect = 0.0f64;
    let dt = policy.dt;
    let inv = params.inv_epsilon;
    loop {
        if t >= policy.t_max {
            return Err(CouplingError::CapExceeded { t_max: policy.t_max, stage });
        }
        let g = rng.normal_pair();
        let next = advance_plane(x, dt, g, &NoiseTransform::Identity, params);
        // preserved relations: axis phases anti-aligned, other phases equal
        let (axis_next, other_next) =
            if axis == 1 { (next.x1, next.x2) } else { (next.x2, next.x1) };
        let pa = crate::flowfield::cell_phase(axis_next, inv);
        let pat = crate::flowfield::cell_phase(2.0 * a - axis_next, inv);
        let sum = pa + pat;
        let defect_axis = (sum - sum.round()).abs() * eps;
        let defect_other = phase_defect(
            crate::flowfield::cell_phase(other_next + off_other, inv),
            crate::flowfield::cell_phase(other_next, inv),
            eps,
        );
        let defect = defect_axis.max(defect_other);
        max_defect = max_defect.max(defect);
        if defect > DESYNC_TOL * eps {
            return Err(CouplingError::DesyncDetected { stage, defect: defect / eps });
        }
        // crossing of the lifted bisector family {a + k}
        let (cp, cn) = if axis == 1 { (x.x1, next.x1) } else { (x.x2, next.x2) };
        let seg = StepRecord { t_prev: t, dt, prev: x, next };
        if let Some(ev) = crate::stopping::detect_coord_hit(
            &seg,
            cp,
            cn,
            1.0,
            a,
            if axis == 1 {
                crate::stopping::CrossingKind::VerticalLine
            } else {
                crate::stopping::CrossingKind::HorizontalLine
            },
        )? {
            let k = ev.index as f64;
            let mut xe = ev.location;
            let (xt, xe_fixed) = if axis == 1 {
                xe.x1 = a + k;
                (PlanePoint::new(xe.x1 - 2.0 * k, xe.x2 + off_other), xe)
            } else {
                xe.x2 = a + k;
                (PlanePoint::new(xe.x1 + off_other, xe.x2 - 2.0 * k), xe)
            };
            return Ok(StageOutcome { duration: ev.time, x: xe_fixed, x_tilde: xt, max_defect });
        }
        x = next;
        t += dt;
    }
}

/// Durations of the five stages, in order.
#[derive(Debug, Clone, Copy, Default)]
pub struct StageDurations {
    pub stage1: f64,
    pub stage2v: f64,
    pub stage3v: f64,
    pub stage2h: f64,
    pub stage3h: f64,
}

impl StageDurations {
    pub fn total(&self) -> f64 {
        self.stage1 + self.stage2v + self.stage3v + self.stage2h + self.stage3h
    }
}

/// One paired run: per-stage durations and the coupling time.
#[derive(Debug, Clone)]
pub struct CouplingOutcome {
    pub durations: StageDurations,
    pub stage1_attempts: u32,
    pub tau_cpl: f64,
    pub success: bool,
    pub failed_stage: Option<Stage>,
    /// unit-torus pair state at the completion of each stage.
    pub glue_positions: Vec<(PlanePoint, PlanePoint)>,
    pub max_defect: f64,
}

/// Execute stage1 → sync/mirror (vertical) → sync/mirror (horizontal).
pub fn run_full_coupling(
    x0: PlanePoint,
    x0_tilde: PlanePoint,
    params: &FlowParams,
    regions: &CellRegions,
    policy: &StepPolicy,
    rng: &mut RngStream,
) -> Result<CouplingOutcome, CouplingError> {
    let mut out = CouplingOutcome {
        durations: StageDurations::default(),
        stage1_attempts: 0,
        tau_cpl: 0.0,
        success: false,
        failed_stage: None,
        glue_positions: Vec::new(),
        max_defect: 0.0,
    };
    if x0 == x0_tilde {
        out.success = true;
        out.glue_positions.push((fold_unit(x0), fold_unit(x0)));
        return Ok(out);
    }
    macro_rules! run_stage {
        ($call:expr, $slot:ident, $stage:expr) => {
            match $call {
                Ok(res) => res,
                Err(CouplingError::CapExceeded { .. }) => {
                    out.failed_stage = Some($stage);
                    out.tau_cpl = f64::NAN;
                    return Ok(out);
                }
                Err(e) => return Err(e),
            }
        };
    }
    let s1 = run_stage!(
        stage1_couple_projections(x0, x0_tilde, params, regions, policy, rng),
        stage1,
        Stage::Projection
    );
    out.durations.stage1 = s1.duration;
    out.stage1_attempts = s1.attempts;
    out.glue_positions.push((fold_unit(s1.x), fold_unit(s1.x_tilde)));

    let s2v = run_stage!(
        stage2_sync_to_lattice(s1.x, s1.x_tilde, 1, params, policy, rng),
        stage2v,
        Stage::SyncVertical
    );
    out.durations.stage2v = s2v.duration;
    out.max_defect = out.max_defect.max(s2v.max_defect);
    out.glue_positions.push((fold_unit(s2v.x), fold_unit(s2v.x_tilde)));

    let s3v = run_stage!(
        stage3_mirror_to_bisector(s2v.x, s2v.x_tilde, 1, params, policy, rng),
        stage3v,
        Stage::MirrorVertical
    );
    out.durations.stage3v = s3v.duration;
    out.max_defect = out.max_defect.max(s3v.max_defect);
    out.glue_positions.push((fold_unit(s3v.x), fold_unit(s3v.x_tilde)));

    let s2h = run_stage!(
        stage2_sync_to_lattice(s3v.x, s3v.x_tilde, 2, params, policy, rng),
        stage2h,
        Stage::SyncHorizontal
    );
    out.durations.stage2h = s2h.duration;
    out.max_defect = out.max_defect.max(s2h.max_defect);
    out.glue_positions.push((fold_unit(s2h.x), fold_unit(s2h.x_tilde)));

    let s3h = run_stage!(
        stage3_mirror_to_bisector(s2h.x, s2h.x_tilde, 2, params, policy, rng),
        stage3h,
        Stage::MirrorHorizontal
    );
    out.durations.stage3h = s3h.duration;
    out.max_defect = out.max_defect.max(s3h.max_defect);

    // full glue: both torus states coincide
    let fx = fold_unit(s3h.x);
    out.glue_positions.push((fx, fx));
    out.tau_cpl = out.durations.total();
    out.success = true;
    Ok(out)
}

fn fold_unit(p: PlanePoint) -> PlanePoint {
    let t = p.to_torus(1.0);
    PlanePoint::new(t.x1, t.x2)
}

/// Starting-pair laws for coupling-time estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairDistribution {
    /// both endpoints uniform on the unit torus
    UniformUniform,
    /// 4×4 stratified grid of bases with cycling antipodal / half-shift /
    /// corner-adjacent partners (the sup over starting pairs is what the
    /// mixing bound needs)
    WorstCaseGrid,
}

/// Summary statistics of τ_cpl over independent pairs.
#[derive(Debug, Clone)]
pub struct TauCplStats {
    pub mean: f64,
    pub median: f64,
    pub upper_quartile: f64,
    pub se: f64,
    pub n_success: usize,
    pub n_failures: usize,
    pub samples: Vec<CouplingOutcome>,
}

pub fn starting_pair(
    dist: PairDistribution,
    index: u64,
    eps: f64,
    rng: &mut RngStream,
) -> (PlanePoint, PlanePoint) {
    match dist {
        PairDistribution::UniformUniform => {
            let x = PlanePoint::new(rng.uniform(), rng.uniform());
            let y = PlanePoint::new(rng.uniform(), rng.uniform());
            (x, y)
        }
        PairDistribution::WorstCaseGrid => {
            let k = (index % 16) as usize;
            let (i, j) = (k % 4, k / 4);
            let base = PlanePoint::new((i as f64 + 0.5) / 4.0, (j as f64 + 0.5) / 4.0);
            let shifts = [
                [0.5, 0.5],
                [0.5, 0.0],
                [0.0, 0.5],
                [eps / 2.0, eps / 2.0],
            ];
            let s = shifts[(i + j) % 4];
            (base, PlanePoint::new(base.x1 + s[0], base.x2 + s[1]))
        }
    }
}

pub fn estimate_tau_cpl(
    params: &FlowParams,
    n_samples: usize,
    dist: PairDistribution,
    policy: &StepPolicy,
    seed: u64,
) -> Result<TauCplStats, CouplingError> {
    use rayon::prelude::*;
    if n_samples < 30 {
        return Err(CouplingError::PreconditionViolated(format!(
            "n_samples = {n_samples} < 30"
        )));
    }
    let regions = CellRegions::default_for(params)?;
    let runs: Result<Vec<CouplingOutcome>, CouplingError> = (0..n_samples as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = RngStream::new(seed, k);
            let (x, y) = starting_pair(dist, k, params.epsilon, &mut rng);
            run_full_coupling(x, y, params, &regions, policy, &mut rng)
        })
        .collect();
    let samples = runs?;
    let mut taus: Vec<f64> =
        samples.iter().filter(|o| o.success).map(|o| o.tau_cpl).collect();
    let n_failures = samples.len() - taus.len();
    taus.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = taus.len();
    let mean = if n > 0 { taus.iter().sum::<f64>() / n as f64 } else { f64::NAN };
    let var = if n > 1 {
        taus.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (n as f64 - 1.0)
    } else {
        f64::NAN
    };
    let quantile = |q: f64| -> f64 {
        if n == 0 {
            return f64::NAN;
        }
        let pos = q * (n as f64 - 1.0);
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let w = pos - lo as f64;
        taus[lo] * (1.0 - w) + taus[hi] * w
    };
    Ok(TauCplStats {
        mean,
        median: quantile(0.5),
        upper_quartile: quantile(0.75),
        se: (var / n.max(1) as f64).sqrt(),
        n_success: n,
        n_failures,
        samples,
    })
}
