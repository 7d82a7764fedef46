//! Closed-circuit geometry in Frenet coordinates.
//!
//! A track is an ordered list of straight, arc and chicane segments with
//! piecewise-constant curvature, per-segment half-widths and inclination.
//! Chicanes are expanded internally into two equal-length opposite arcs so
//! every lookup reduces to a flat list of constant-curvature pieces.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("lateral offset {e_y} out of range for curvature {kappa}")]
    LateralOutOfRange { e_y: f64, kappa: f64 },
    #[error("track generation failed after {retries} retries: {reason}")]
    GenerationFailed { retries: u32, reason: String },
    #[error("invalid track: {0}")]
    Invalid(String),
}

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut w = a.rem_euclid(two_pi);
    if w > std::f64::consts::PI {
        w -= two_pi;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Straight,
    Arc,
    /// One curvature magnitude applied as +kappa then -kappa over two equal halves.
    Chicane,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackSegment {
    pub kind: SegmentKind,
    /// Arc length of the segment in meters, > 0.
    pub length: f64,
    /// Signed curvature in 1/m; zero for straights, the stored magnitude for chicanes.
    pub curvature: f64,
    /// Left half-width override for this segment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_l: Option<f64>,
    /// Right half-width override (negative) for this segment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_r: Option<f64>,
    /// Road inclination in radians.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub incline: f64,
}

fn is_zero(x: &f64) -> bool {
    *x == 0.0
}

impl TrackSegment {
    pub fn straight(length: f64) -> Self {
        Self { kind: SegmentKind::Straight, length, curvature: 0.0, w_l: None, w_r: None, incline: 0.0 }
    }

    pub fn arc(length: f64, curvature: f64) -> Self {
        Self { kind: SegmentKind::Arc, length, curvature, w_l: None, w_r: None, incline: 0.0 }
    }

    pub fn chicane(length: f64, curvature_magnitude: f64) -> Self {
        Self { kind: SegmentKind::Chicane, length, curvature: curvature_magnitude, w_l: None, w_r: None, incline: 0.0 }
    }
}

/// One constant-curvature piece of the expanded track, with its start pose cached.
#[derive(Debug, Clone)]
struct ArcPiece {
    start_s: f64,
    #[allow(dead_code)] // retained for debug dumps; lookups use start_s deltas
    length: f64,
    curvature: f64,
    w_l: f64,
    w_r: f64,
    incline: f64,
    x0: f64,
    y0: f64,
    heading0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartesianPose {
    pub x: f64,
    pub y: f64,
    /// Wrapped to (-pi, pi].
    pub heading: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Track {
    pub segments: Vec<TrackSegment>,
    /// Default left half-width in meters, > 0.
    pub w_l: f64,
    /// Default right half-width in meters, < 0.
    pub w_r: f64,
    pub closed: bool,
    #[serde(skip)]
    total_length: f64,
    #[serde(skip)]
    pieces: Vec<ArcPiece>,
}

impl<'de> Deserialize<'de> for Track {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            segments: Vec<TrackSegment>,
            w_l: f64,
            w_r: f64,
            closed: bool,
        }
        let raw = Raw::deserialize(d)?;
        Track::new(raw.segments, raw.w_l, raw.w_r, raw.closed).map_err(serde::de::Error::custom)
    }
}

impl Track {
    pub fn new(segments: Vec<TrackSegment>, w_l: f64, w_r: f64, closed: bool) -> Result<Self, TrackError> {
        if segments.is_empty() {
            return Err(TrackError::Invalid("track has no segments".into()));
        }
        if !(w_l > 0.0) || !(w_r < 0.0) {
            return Err(TrackError::Invalid(format!("half-widths must satisfy w_l > 0 > w_r, got ({w_l}, {w_r})")));
        }
        let mut pieces = Vec::new();
        let mut s = 0.0;
        let mut x = 0.0;
        let mut y = 0.0;
        let mut heading = 0.0;
        for seg in &segments {
            if !(seg.length > 0.0) {
                return Err(TrackError::Invalid(format!("segment length must be > 0, got {}", seg.length)));
            }
            let seg_wl = seg.w_l.unwrap_or(w_l);
            let seg_wr = seg.w_r.unwrap_or(w_r);
            if !(seg_wl > 0.0) || !(seg_wr < 0.0) {
                return Err(TrackError::Invalid("segment half-widths must satisfy w_l > 0 > w_r".into()));
            }
            let sub: Vec<(f64, f64)> = match seg.kind {
                SegmentKind::Straight => vec![(seg.length, 0.0)],
                SegmentKind::Arc => vec![(seg.length, seg.curvature)],
                SegmentKind::Chicane => {
                    let mag = seg.curvature.abs();
                    vec![(seg.length / 2.0, mag), (seg.length / 2.0, -mag)]
                }
            };
            for (len, kappa) in sub {
                let max_w = seg_wl.max(seg_wr.abs());
                if kappa.abs() * max_w >= 1.0 {
                    return Err(TrackError::Invalid(format!(
                        "curvature {kappa} self-intersects the inner boundary for half-width {max_w}"
                    )));
                }
                pieces.push(ArcPiece {
                    start_s: s,
                    length: len,
                    curvature: kappa,
                    w_l: seg_wl,
                    w_r: seg_wr,
                    incline: seg.incline,
                    x0: x,
                    y0: y,
                    heading0: heading,
                });
                let (nx, ny, nh) = advance(x, y, heading, kappa, len);
                x = nx;
                y = ny;
                heading = nh;
                s += len;
            }
        }
        if closed {
            let turns = heading / (2.0 * std::f64::consts::PI);
            if (turns - turns.round()).abs() > 1e-6 {
                return Err(TrackError::Invalid(format!(
                    "closed track accumulates {heading} rad over one lap, not a multiple of 2*pi"
                )));
            }
        }
        Ok(Self { segments, w_l, w_r, closed, total_length: s, pieces })
    }

    pub fn total_length(&self) -> f64 {
        self.total_length
    }

    /// Wrap s into [0, L) for closed tracks; clamp into [0, L) for open ones.
    pub fn wrap_s(&self, s: f64) -> f64 {
        if self.closed {
            s.rem_euclid(self.total_length)
        } else {
            s.clamp(0.0, self.total_length - 1e-12).max(0.0)
        }
    }

    /// Index of the piece containing wrapped s; boundary resolves to the piece
    /// that begins at s (half-open intervals).
    fn piece_at(&self, s: f64) -> &ArcPiece {
        let s = self.wrap_s(s);
        // binary search over start_s
        let mut lo = 0usize;
        let mut hi = self.pieces.len();
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.pieces[mid].start_s <= s {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        &self.pieces[lo]
    }

    pub fn curvature_at(&self, s: f64) -> f64 {
        self.piece_at(s).curvature
    }

    pub fn width_at(&self, s: f64) -> (f64, f64) {
        let p = self.piece_at(s);
        (p.w_l, p.w_r)
    }

    pub fn incline_at(&self, s: f64) -> f64 {
        self.piece_at(s).incline
    }

    pub fn frenet_to_cartesian(&self, s: f64, e_y: f64, e_psi: f64) -> Result<CartesianPose, TrackError> {
        let sw = self.wrap_s(s);
        let p = self.piece_at(sw);
        if p.curvature != 0.0 && e_y.abs() >= 1.0 / p.curvature.abs() {
            return Err(TrackError::LateralOutOfRange { e_y, kappa: p.curvature });
        }
        let u = sw - p.start_s;
        let (bx, by, bh) = advance(p.x0, p.y0, p.heading0, p.curvature, u);
        Ok(CartesianPose {
            x: bx - e_y * bh.sin(),
            y: by + e_y * bh.cos(),
            heading: wrap_angle(bh + e_psi),
        })
    }

    /// Invariant sweep used by generation and tests: widths, curvature bound,
    /// heading closure.
    pub fn check_invariants(&self) -> Result<(), TrackError> {
        for p in &self.pieces {
            if !(p.w_l > 0.0 && p.w_r < 0.0) {
                return Err(TrackError::Invalid("half-width signs".into()));
            }
            if p.curvature.abs() * p.w_l.max(p.w_r.abs()) >= 1.0 {
                return Err(TrackError::Invalid("curvature/width bound".into()));
            }
        }
        let sum: f64 = self.segments.iter().map(|s| s.length).sum();
        if (sum - self.total_length).abs() > 1e-9 * sum.max(1.0) {
            return Err(TrackError::Invalid("length bookkeeping".into()));
        }
        Ok(())
    }
}

/// Move along a constant-curvature piece by arc length u.
fn advance(x: f64, y: f64, heading: f64, kappa: f64, u: f64) -> (f64, f64, f64) {
    if kappa == 0.0 {
        (x + u * heading.cos(), y + u * heading.sin(), heading)
    } else {
        let h = heading + kappa * u;
        (
            x + (h.sin() - heading.sin()) / kappa,
            y - (h.cos() - heading.cos()) / kappa,
            h,
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RandomTrackSpec {
    pub n_segments: usize,
    pub length_min: f64,
    pub length_max: f64,
    /// Curvature magnitude range for arcs and chicanes; a zero-width range at 0
    /// degenerates to an all-straight track.
    pub curvature_min: f64,
    pub curvature_max: f64,
    pub w_l: f64,
    pub w_r: f64,
    pub closed: bool,
    pub max_retries: u32,
}

impl Default for RandomTrackSpec {
    fn default() -> Self {
        Self {
            n_segments: 8,
            length_min: 10.0,
            length_max: 40.0,
            curvature_min: 0.02,
            curvature_max: 0.08,
            w_l: 1.5,
            w_r: -1.5,
            closed: true,
            max_retries: 50,
        }
    }
}

/// Deterministic random track from straight, curved and chicane stretches.
///
/// For closed tracks a closing arc is appended so the accumulated heading
/// reaches an integer multiple of 2*pi; the circuit is then traversed through
/// the wrap s = L -> s = 0.
pub fn random_track(seed: u64, spec: &RandomTrackSpec) -> Result<Track, TrackError> {
    if !(spec.length_min > 0.0 && spec.length_max >= spec.length_min) {
        return Err(TrackError::Invalid("empty length range".into()));
    }
    if spec.curvature_min < 0.0 || spec.curvature_max < spec.curvature_min {
        return Err(TrackError::Invalid("empty curvature range".into()));
    }
    let max_w = spec.w_l.max(spec.w_r.abs());
    if spec.curvature_max * max_w >= 1.0 {
        return Err(TrackError::Invalid("curvature range violates width invariant".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _attempt in 0..=spec.max_retries {
        let mut segments = Vec::with_capacity(spec.n_segments + 1);
        let mut heading = 0.0f64;
        for _ in 0..spec.n_segments {
            let len = rng.gen_range(spec.length_min..=spec.length_max);
            let kappa = if spec.curvature_max > 0.0 {
                rng.gen_range(spec.curvature_min..=spec.curvature_max)
            } else {
                0.0
            };
            let kind = match rng.gen_range(0..3u32) {
                0 => SegmentKind::Straight,
                1 => SegmentKind::Arc,
                _ => SegmentKind::Chicane,
            };
            let seg = match kind {
                SegmentKind::Straight => TrackSegment::straight(len),
                SegmentKind::Chicane if kappa > 0.0 => TrackSegment::chicane(len, kappa),
                SegmentKind::Arc if kappa > 0.0 => {
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    TrackSegment::arc(len, sign * kappa)
                }
                _ => TrackSegment::straight(len),
            };
            heading += match seg.kind {
                SegmentKind::Arc => seg.curvature * seg.length,
                _ => 0.0,
            };
            segments.push(seg);
        }
        if spec.closed {
            let two_pi = 2.0 * std::f64::consts::PI;
            let mut m = (heading / two_pi).round();
            if (two_pi * m - heading).abs() < 1e-12 && m == 0.0 {
                m = 1.0;
            }
            let mut turn = two_pi * m - heading;
            if turn.abs() < 1e-12 {
                // already closed in heading
            } else {
                if turn.abs() > two_pi {
                    // keep the closing arc short: fold to the nearest full turn
                    turn -= two_pi * (turn / two_pi).trunc();
                    if turn.abs() < 1e-9 {
                        turn = two_pi;
                    }
                }
                let kappa_cap = spec.curvature_max.max(0.05).min(0.999 / max_w);
                let len = (turn.abs() / kappa_cap).max(spec.length_min);
                let kappa = turn / len;
                if kappa.abs() * max_w >= 1.0 {
                    continue; // retry with fresh segments
                }
                segments.push(TrackSegment::arc(len, kappa));
            }
        }
        match Track::new(segments, spec.w_l, spec.w_r, spec.closed) {
            Ok(t) => {
                t.check_invariants()?;
                return Ok(t);
            }
            Err(_) => continue,
        }
    }
    Err(TrackError::GenerationFailed {
        retries: spec.max_retries,
        reason: "closing arc violated the curvature invariant on every attempt".into(),
    })
}
