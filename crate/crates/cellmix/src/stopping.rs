//! Hitting-time detection: lattice-line hits, stream-level hits, the
//! boundary-layer clock (σₙ exits from {|H| < δ}, τₙ returns to {H = 0}),
//! the axis-filtered subsequences τₙⁱ, and the diagonal-return clock τ̌ₙ.
//!
//! Detectors are streaming folds over one trajectory: they consume
//! `StepRecord`s in order and emit refined `CrossingEvent`s. Refinement is
//! linear interpolation for lattice lines and bisection of H along the
//! linearly interpolated segment for level sets.

use crate::flowfield::FlowParams;
use crate::rng::RngStream;
use crate::sde::{PlanePoint, StepRecord};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoppingError {
    #[error("step of size {step:.3e} exceeds half the line spacing {spacing:.3e}")]
    StepTooLarge { step: f64, spacing: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossingKind {
    VerticalLine,
    HorizontalLine,
    LevelUp,
    LevelDown,
    Separatrix,
    Diagonal,
}

/// A refined event: `time` lies inside the step where the sign change was
/// seen and `location` satisfies the defining equation to the refinement
/// tolerance.
#[derive(Debug, Clone, Copy)]
pub struct CrossingEvent {
    pub time: f64,
    pub location: PlanePoint,
    pub kind: CrossingKind,
    /// lattice-line or level index (line multiple for line hits).
    pub index: i64,
}

pub const LEVEL_TOL: f64 = 1e-10;

/// Detect a crossing of the lattice `{w = k·spacing}` by the chosen
/// coordinate within one step. At most one line per step is allowed; the
/// policy must guarantee it.
pub fn detect_line_hit(
    seg: &StepRecord,
    spacing: f64,
    axis: usize,
) -> Result<Option<CrossingEvent>, StoppingError> {
    let (wp, wn) = match axis {
        1 => (seg.prev.x1, seg.next.x1),
        _ => (seg.prev.x2, seg.next.x2),
    };
    detect_coord_hit(seg, wp, wn, spacing, 0.0, line_kind(axis))
}

fn line_kind(axis: usize) -> CrossingKind {
    if axis == 1 {
        CrossingKind::VerticalLine
    } else {
        CrossingKind::HorizontalLine
    }
}

/// Shared scalar-coordinate lattice detector; `w = coord - offset`.
pub(crate) fn detect_coord_hit(
    seg: &StepRecord,
    coord_prev: f64,
    coord_next: f64,
    spacing: f64,
    offset: f64,
    kind: CrossingKind,
) -> Result<Option<CrossingEvent>, StoppingError> {
    let wp = coord_prev - offset;
    let wn = coord_next - offset;
    let step = (wn - wp).abs();
    if step >= 0.5 * spacing {
        return Err(StoppingError::StepTooLarge { step, spacing });
    }
    let kp = (wp / spacing).floor();
    // exactly on a line at the start
    if wp == kp * spacing {
        return Ok(Some(CrossingEvent {
            time: seg.t_prev,
            location: seg.prev,
            kind,
            index: kp as i64,
        }));
    }
    let kn = (wn / spacing).floor();
    if kp == kn && wn != kn * spacing {
        return Ok(None);
    }
    // the single line crossed or touched: moving up it is kn·spacing (the
    // floor jumped to it), moving down it is kp·spacing
    let line_val = if wn >= wp { spacing * kn } else { spacing * kp };
    let s = ((line_val - wp) / (wn - wp)).clamp(0.0, 1.0);
    let time = seg.t_prev + s * seg.dt;
    let mut loc = interpolate(seg, s);
    match kind {
        CrossingKind::VerticalLine => loc.x1 = line_val + offset,
        CrossingKind::HorizontalLine => loc.x2 = line_val + offset,
        _ => {}
    }
    Ok(Some(CrossingEvent {
        time,
        location: loc,
        kind,
        index: (line_val / spacing).round() as i64,
    }))
}

#[inline]
fn interpolate(seg: &StepRecord, s: f64) -> PlanePoint {
    PlanePoint {
        x1: seg.prev.x1 + s * (seg.next.x1 - seg.prev.x1),
        x2: seg.prev.x2 + s * (seg.next.x2 - seg.prev.x2),
    }
}

/// Detect a crossing of the level set `{H = c}` within one step, refined by
/// bisection of H along the interpolated segment (≤ 40 iterations, |H - c|
/// ≤ 1e-10). With `bridge` set, a non-crossing segment is accepted with the
/// Brownian-bridge first-passage probability in the linearized level
/// coordinate.
pub fn detect_level_hit(
    seg: &StepRecord,
    level: f64,
    params: &FlowParams,
    bridge: Option<&mut RngStream>,
) -> Option<CrossingEvent> {
    let hp = params.stream_value(seg.prev.x1, seg.prev.x2) - level;
    if hp == 0.0 {
        return Some(CrossingEvent {
            time: seg.t_prev,
            location: seg.prev,
            kind: level_kind(0.0, level),
            index: 0,
        });
    }
    let hn = params.stream_value(seg.next.x1, seg.next.x2) - level;
    if hp * hn > 0.0 {
        if let Some(rng) = bridge {
            if seg.dt > 0.0 {
                let s = params.sample(seg.prev.x1, seg.prev.x2);
                let grad2 = s.dh1 * s.dh1 + s.dh2 * s.dh2;
                if grad2 > 0.0 {
                    let p = (-2.0 * hp.abs() * hn.abs() / (params.kappa * grad2 * seg.dt)).exp();
                    if rng.uniform() < p {
                        let s_hit = hp.abs() / (hp.abs() + hn.abs());
                        return Some(CrossingEvent {
                            time: seg.t_prev + s_hit * seg.dt,
                            location: interpolate(seg, s_hit),
                            kind: level_kind(hp, level),
                            index: 0,
                        });
                    }
                }
            }
        }
        return None;
    }
    // bisection on the interpolated segment
    let f = |s: f64| {
        let q = interpolate(seg, s);
        params.stream_value(q.x1, q.x2) - level
    };
    let (mut lo, mut hi, mut flo) = (0.0f64, 1.0f64, hp);
    let mut mid = 0.5;
    for _ in 0..40 {
        mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm.abs() <= LEVEL_TOL {
            break;
        }
        if flo * fm <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
            flo = fm;
        }
    }
    Some(CrossingEvent {
        time: seg.t_prev + mid * seg.dt,
        location: interpolate(seg, mid),
        kind: level_kind(hp, level),
        index: 0,
    })
}

fn level_kind(hp: f64, level: f64) -> CrossingKind {
    if level == 0.0 {
        CrossingKind::Separatrix
    } else if hp < 0.0 {
        CrossingKind::LevelUp
    } else {
        CrossingKind::LevelDown
    }
}

/// Ordered event sequences of the boundary-layer clock.
#[derive(Debug, Clone, Default)]
pub struct StoppingClock {
    /// first hit of the separatrix (the paper's τ₀), reported separately.
    pub tau0: Option<CrossingEvent>,
    /// exits from B_δ = {|H| < δ}: σ₁, σ₂, …
    pub sigma_seq: Vec<CrossingEvent>,
    /// returns to {H = 0}: τ₁, τ₂, …
    pub tau_seq: Vec<CrossingEvent>,
    /// returns to {H = 0} after a diagonal crossing: τ̌₁, τ̌₂, …
    pub tau_check_seq: Vec<CrossingEvent>,
}

impl StoppingClock {
    /// Subsequence of separatrix returns whose coordinate `axis` lies on the
    /// (ε/2)-lattice; corner ties belong to both subsequences.
    pub fn axis_filtered_returns(&self, axis: usize, eps: f64) -> Vec<CrossingEvent> {
        let tol = 1e-8 * eps;
        let half = eps / 2.0;
        self.tau_seq
            .iter()
            .filter(|e| {
                let w = if axis == 1 { e.location.x1 } else { e.location.x2 };
                let d = (w / half - (w / half).round()).abs() * half;
                d <= tol
            })
            .copied()
            .collect()
    }

    pub fn interlacing_holds(&self) -> bool {
        let n = self.sigma_seq.len().min(self.tau_seq.len());
        for i in 0..n {
            if self.sigma_seq[i].time > self.tau_seq[i].time {
                return false;
            }
            if i + 1 < self.sigma_seq.len() && self.tau_seq[i].time > self.sigma_seq[i + 1].time {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum LayerPhase {
    /// before τ₀
    SeekingSeparatrix,
    /// after a τ event, waiting for |H| to reach δ
    InsideLayer,
    /// after a σ event, waiting for H = 0
    OutsideLayer,
}

/// Streaming fold producing σₙ/τₙ (and τ₀) from a trajectory.
#[derive(Debug, Clone)]
pub struct BoundaryLayerClock {
    params: FlowParams,
    delta: f64,
    phase: LayerPhase,
    pub clock: StoppingClock,
}

impl BoundaryLayerClock {
    pub fn new(params: &FlowParams) -> Self {
        let delta = params.delta().unwrap_or(f64::INFINITY);
        BoundaryLayerClock {
            params: *params,
            delta,
            phase: LayerPhase::SeekingSeparatrix,
            clock: StoppingClock::default(),
        }
    }

    /// Events appended during this step, if any.
    pub fn push(&mut self, seg: &StepRecord) {
        // a single step may contain a σ event followed by nothing else, or a
        // τ event; the step policy keeps |ΔH| well under δ so one event per
        // step suffices.
        match self.phase {
            LayerPhase::SeekingSeparatrix => {
                if let Some(ev) = detect_level_hit(seg, 0.0, &self.params, None) {
                    self.clock.tau0 = Some(ev);
                    self.phase = LayerPhase::InsideLayer;
                }
            }
            LayerPhase::InsideLayer => {
                if let Some(ev) = self.detect_layer_exit(seg) {
                    self.clock.sigma_seq.push(ev);
                    self.phase = LayerPhase::OutsideLayer;
                }
            }
            LayerPhase::OutsideLayer => {
                if let Some(mut ev) = detect_level_hit(seg, 0.0, &self.params, None) {
                    ev.kind = CrossingKind::Separatrix;
                    self.clock.tau_seq.push(ev);
                    self.phase = LayerPhase::InsideLayer;
                }
            }
        }
    }

    fn detect_layer_exit(&self, seg: &StepRecord) -> Option<CrossingEvent> {
        let up = detect_level_hit(seg, self.delta, &self.params, None);
        let down = detect_level_hit(seg, -self.delta, &self.params, None);
        match (up, down) {
            (Some(a), Some(b)) => Some(if a.time <= b.time { a } else { b }),
            (Some(a), None) => Some(a),
            (None, Some(b)) => Some(b),
            (None, None) => None,
        }
    }
}

/// Streaming fold producing the diagonal-return clock τ̌ₙ: the first return
/// to {H = 0} after a crossing of a cell diagonal (the lines
/// x₂ = ±x₁ + (ε/2)ℤ) following τ̌ₙ₋₁.
#[derive(Debug, Clone)]
pub struct DiagonalReturnClock {
    params: FlowParams,
    armed: bool,
    pub events: Vec<CrossingEvent>,
}

impl DiagonalReturnClock {
    pub fn new(params: &FlowParams) -> Self {
        DiagonalReturnClock { params: *params, armed: false, events: Vec::new() }
    }

    pub fn push(&mut self, seg: &StepRecord) -> Result<(), StoppingError> {
        if !self.armed {
            let half = self.params.epsilon / 2.0;
            let plus = detect_coord_hit(
                seg,
                seg.prev.x2 - seg.prev.x1,
                seg.next.x2 - seg.next.x1,
                half,
                0.0,
                CrossingKind::Diagonal,
            )?;
            let minus = detect_coord_hit(
                seg,
                seg.prev.x2 + seg.prev.x1,
                seg.next.x2 + seg.next.x1,
                half,
                0.0,
                CrossingKind::Diagonal,
            )?;
            if plus.is_some() || minus.is_some() {
                self.armed = true;
            }
            // a diagonal touch and a separatrix return cannot share a step
            // under the policy bounds, so no same-step return check is done.
            return Ok(());
        }
        if let Some(mut ev) = detect_level_hit(seg, 0.0, &self.params, None) {
            ev.kind = CrossingKind::Separatrix;
            self.events.push(ev);
            self.armed = false;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::StepRecord;

    fn seg(t: f64, dt: f64, a: [f64; 2], b: [f64; 2]) -> StepRecord {
        StepRecord {
            t_prev: t,
            dt,
            prev: PlanePoint::new(a[0], a[1]),
            next: PlanePoint::new(b[0], b[1]),
        }
    }

    #[test]
    fn line_hit_examples() {
        // starts on the line
        let s = seg(2.0, 1e-3, [0.25, 0.1], [0.26, 0.1]);
        let ev = detect_line_hit(&s, 0.25, 1).unwrap().unwrap();
        assert_eq!(ev.time, 2.0);
        assert_eq!(ev.index, 1);
        // interpolated crossing
        let s = seg(0.0, 1e-3, [0.24, 0.1], [0.26, 0.1]);
        let ev = detect_line_hit(&s, 0.25, 1).unwrap().unwrap();
        assert!((ev.time - 5e-4).abs() < 1e-12);
        assert_eq!(ev.location.x1, 0.25);
        // strictly inside one cell
        let s = seg(0.0, 1e-3, [0.26, 0.1], [0.27, 0.1]);
        assert!(detect_line_hit(&s, 0.25, 1).unwrap().is_none());
        // downward crossing
        let s = seg(0.0, 1e-3, [0.26, 0.1], [0.24, 0.1]);
        let ev = detect_line_hit(&s, 0.25, 1).unwrap().unwrap();
        assert_eq!(ev.location.x1, 0.25);
        assert_eq!(ev.index, 1);
        // negative coordinates
        let s = seg(0.0, 1e-3, [-0.01, 0.1], [0.01, 0.1]);
        let ev = detect_line_hit(&s, 0.25, 1).unwrap().unwrap();
        assert_eq!(ev.location.x1, 0.0);
        assert_eq!(ev.index, 0);
        // oversized step is a hard error
        let s = seg(0.0, 1e-3, [0.1, 0.1], [0.3, 0.1]);
        assert!(detect_line_hit(&s, 0.25, 1).is_err());
    }

    #[test]
    fn level_hit_examples() {
        let p = FlowParams::new(0.25, 1.0, 0.01).unwrap();
        // pick points with H below/above c = 0 across a vertical line
        let a = [0.245, 0.1];
        let b = [0.255, 0.1];
        let ha = p.stream_value(a[0], a[1]);
        let hb = p.stream_value(b[0], b[1]);
        assert!(ha * hb < 0.0);
        let s = seg(0.0, 1e-3, a, b);
        let ev = detect_level_hit(&s, 0.0, &p, None).unwrap();
        assert!(p.stream_value(ev.location.x1, ev.location.x2).abs() <= 1e-8);
        assert!(ev.time > 0.0 && ev.time < 1e-3);
        // starts exactly on the level
        let s = seg(1.0, 1e-3, [0.25, 0.1], [0.26, 0.1]);
        let ev = detect_level_hit(&s, 0.0, &p, None).unwrap();
        assert_eq!(ev.time, 1.0);
        // no sign change, no bridge
        let s = seg(0.0, 1e-3, [0.26, 0.1], [0.27, 0.1]);
        assert!(detect_level_hit(&s, 0.0, &p, None).is_none());
    }

    #[test]
    fn synthetic_layer_clock() {
        // drive the clock with a synthetic path moving straight across the
        // band: x1(t) from 0.24 to 0.30 at fixed x2 in a cell (eps = 1, so
        // H = sin(2πx1)sin(2πx2))
        let p = FlowParams::new(1.0, 4.0, 1.0).unwrap(); // delta = 0.5
        let delta = p.delta().unwrap();
        assert_eq!(delta, 0.5);
        let mut clock = BoundaryLayerClock::new(&p);
        // path: x2 = 0.25 fixed so H = sin(2πx1); x1 ramps 0 → 0.5 (H: 0 → 1 → 0)
        let n = 4000;
        let mut prev = [0.0, 0.25];
        for i in 1..=n {
            let x1 = 0.5 * i as f64 / n as f64;
            let s = seg((i - 1) as f64 * 1e-3, 1e-3, prev, [x1, 0.25]);
            clock.push(&s);
            prev = [x1, 0.25];
        }
        // tau0 at t = 0 (starts on the separatrix), one sigma where
        // sin(2πx1) = 0.5 (x1 = 1/12), one tau at x1 = 1/2
        assert!(clock.clock.tau0.is_some());
        assert_eq!(clock.clock.sigma_seq.len(), 1);
        assert_eq!(clock.clock.tau_seq.len(), 1);
        let sig = &clock.clock.sigma_seq[0];
        let expect_t = (1.0 / 12.0) / 0.5 * 4.0; // x1 = t·0.5/4 ⇒ t = x1·8
        assert!((sig.time - expect_t).abs() < 5e-3, "{} vs {}", sig.time, expect_t);
        let tau = &clock.clock.tau_seq[0];
        assert!((tau.time - 4.0).abs() < 5e-3);
        assert!(clock.clock.interlacing_holds());
        let h_at_sigma = p.stream_value(sig.location.x1, sig.location.x2);
        assert!((h_at_sigma.abs() - delta).abs() <= 1e-8);
        let h_at_tau = p.stream_value(tau.location.x1, tau.location.x2);
        assert!(h_at_tau.abs() <= 1e-8);
    }

    #[test]
    fn axis_filter_tie_rule() {
        let p = FlowParams::new(0.25, 1.0, 0.01).unwrap();
        let mk = |x1: f64, x2: f64| CrossingEvent {
            time: 0.0,
            location: PlanePoint::new(x1, x2),
            kind: CrossingKind::Separatrix,
            index: 0,
        };
        let clock = StoppingClock {
            tau0: None,
            sigma_seq: vec![],
            // on a vertical line, on a horizontal line, on a corner
            tau_seq: vec![mk(0.125, 0.07), mk(0.08, 0.25), mk(0.125, 0.375)],
            tau_check_seq: vec![],
        };
        let v = clock.axis_filtered_returns(1, p.epsilon);
        let h = clock.axis_filtered_returns(2, p.epsilon);
        assert_eq!(v.len(), 2);
        assert_eq!(h.len(), 2);
        assert!(v.len() + h.len() >= clock.tau_seq.len());
    }

    #[test]
    fn diagonal_clock_synthetic() {
        // circular-ish path around a cell center: crosses a diagonal, then
        // returns to the separatrix
        let p = FlowParams::new(1.0, 4.0, 1.0).unwrap();
        let mut clock = DiagonalReturnClock::new(&p);
        // square cell [0, 0.5]²: start near the bottom edge inside, move to
        // the main diagonal, then back to the bottom edge (H = 0 at x2 = 0)
        let path = [
            [0.3, 0.02],
            [0.3, 0.1],
            [0.28, 0.2],
            [0.25, 0.25], // on the diagonal x2 = x1
            [0.22, 0.18],
            [0.2, 0.05],
            [0.18, -0.01], // crosses x2 = 0: separatrix
            [0.18, -0.05],
        ];
        for w in path.windows(2) {
            clock.push(&seg(0.0, 1e-3, w[0], w[1])).unwrap();
        }
        assert_eq!(clock.events.len(), 1);
        let ev = clock.events[0];
        assert!(p.stream_value(ev.location.x1, ev.location.x2).abs() <= 1e-8);
        // a path that returns to H=0 without a diagonal crossing produces none
        let mut clock2 = DiagonalReturnClock::new(&p);
        let path2 = [[0.3, 0.02], [0.32, 0.08], [0.3, 0.01], [0.31, -0.02]];
        for w in path2.windows(2) {
            clock2.push(&seg(0.0, 1e-3, w[0], w[1])).unwrap();
        }
        assert!(clock2.events.is_empty());
    }
}
