//! SE(2) reference frames, relative descriptors and Fourier features.
//!
//! Every scene element carries its own local frame; interactions are
//! described purely by [`RelDescriptor`]s, so anything built on top is
//! invariant to global rigid motions.

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("non-finite angle {0}")]
    NonFinite(f64),
}

/// Wraps an angle into `(-pi, pi]`, rejecting non-finite input.
pub fn wrap_angle<T: Scalar>(theta: T) -> Result<T, GeometryError> {
    if !theta.is_finite() {
        return Err(GeometryError::NonFinite(theta.f64()));
    }
    Ok(wrap(theta))
}

/// Infallible variant of [`wrap_angle`]; non-finite input is returned as-is.
#[inline]
pub fn wrap<T: Scalar>(theta: T) -> T {
    if !theta.is_finite() {
        return theta;
    }
    let two_pi = T::PI() + T::PI();
    let mut r = theta % two_pi;
    if r < T::zero() {
        r += two_pi;
    }
    // r in [0, 2pi)
    if r > T::PI() {
        r -= two_pi;
    }
    r
}

/// Angles this close above `-pi` count as `pi` in [`wrap_relative`].
pub const ANGLE_TIE: f64 = 1e-9;

/// [`wrap`] for relative angles fed to the network: results within
/// [`ANGLE_TIE`] of `-pi` are snapped to `pi`, so a target straight behind
/// reads the same after a rigid motion of the scene.
#[inline]
pub fn wrap_relative<T: Scalar>(theta: T) -> T {
    let r = wrap(theta);
    if r < -T::PI() + T::of(ANGLE_TIE) {
        T::PI()
    } else {
        r
    }
}

/// A local reference frame: origin, orientation and time index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceFrame<T> {
    pub x: T,
    pub y: T,
    pub theta: T,
    pub t: i64,
}

impl<T: Scalar> ReferenceFrame<T> {
    pub fn new(x: T, y: T, theta: T, t: i64) -> Self {
        Self {
            x,
            y,
            theta: wrap(theta),
            t,
        }
    }

    pub fn identity() -> Self {
        Self::new(T::zero(), T::zero(), T::zero(), 0)
    }

    /// Expresses a global pose in this frame.
    #[inline]
    pub fn to_local(&self, p: Pose<T>) -> Pose<T> {
        let (s, c) = self.theta.sin_cos();
        let dx = p.x - self.x;
        let dy = p.y - self.y;
        Pose {
            x: c * dx + s * dy,
            y: -s * dx + c * dy,
            heading: wrap(p.heading - self.theta),
        }
    }

    /// Maps a pose expressed in this frame back to global coordinates.
    #[inline]
    pub fn to_global(&self, p: Pose<T>) -> Pose<T> {
        let (s, c) = self.theta.sin_cos();
        Pose {
            x: self.x + c * p.x - s * p.y,
            y: self.y + s * p.x + c * p.y,
            heading: wrap(p.heading + self.theta),
        }
    }

    /// Rotates a local displacement into global axes.
    #[inline]
    pub fn rotate_to_global(&self, dx: T, dy: T) -> (T, T) {
        let (s, c) = self.theta.sin_cos();
        (c * dx - s * dy, s * dx + c * dy)
    }

    pub fn pose(&self) -> Pose<T> {
        Pose {
            x: self.x,
            y: self.y,
            heading: self.theta,
        }
    }

    pub fn cast<U: Scalar>(&self) -> ReferenceFrame<U> {
        ReferenceFrame {
            x: U::of(self.x.f64()),
            y: U::of(self.y.f64()),
            theta: U::of(self.theta.f64()),
            t: self.t,
        }
    }
}

/// Position plus heading.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose<T> {
    pub x: T,
    pub y: T,
    pub heading: T,
}

impl<T: Scalar> Pose<T> {
    pub fn new(x: T, y: T, heading: T) -> Self {
        Self { x, y, heading }
    }

    pub fn frame(&self, t: i64) -> ReferenceFrame<T> {
        ReferenceFrame::new(self.x, self.y, self.heading, t)
    }

    pub fn dist(&self, other: &Pose<T>) -> T {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Relation of a target frame as seen from a source frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelDescriptor<T> {
    pub distance: T,
    pub direction: T,
    pub rel_orientation: T,
    pub dt: i64,
}

impl<T: Scalar> RelDescriptor<T> {
    /// `[distance, direction, rel_orientation]`.
    pub fn spatial(&self) -> [T; 3] {
        [self.distance, self.direction, self.rel_orientation]
    }

    /// `[distance, direction, rel_orientation, dt]`.
    pub fn with_time(&self) -> [T; 4] {
        [
            self.distance,
            self.direction,
            self.rel_orientation,
            T::of(self.dt as f64),
        ]
    }
}

/// Offsets shorter than this (meters) have no defined bearing.
pub const MIN_OFFSET: f64 = 1e-6;

/// Distance, bearing and relative orientation of `dst` seen from `src`.
///
/// Coincident origins, and origins closer than [`MIN_OFFSET`], give
/// direction 0. Angles go through [`wrap_relative`].
pub fn relative_descriptor<T: Scalar>(
    src: &ReferenceFrame<T>,
    dst: &ReferenceFrame<T>,
) -> RelDescriptor<T> {
    let dx = dst.x - src.x;
    let dy = dst.y - src.y;
    let distance = dx.hypot(dy);
    let direction = if distance < T::of(MIN_OFFSET) {
        T::zero()
    } else {
        wrap_relative(dy.atan2(dx) - src.theta)
    };
    RelDescriptor {
        distance,
        direction,
        rel_orientation: wrap_relative(dst.theta - src.theta),
        dt: dst.t - src.t,
    }
}

/// Rigid transform of global poses into `frame`.
pub fn transform_to_frame<T: Scalar>(points: &[Pose<T>], frame: &ReferenceFrame<T>) -> Vec<Pose<T>> {
    points.iter().map(|p| frame.to_local(*p)).collect()
}

/// Inverse of [`transform_to_frame`].
pub fn transform_from_frame<T: Scalar>(
    points: &[Pose<T>],
    frame: &ReferenceFrame<T>,
) -> Vec<Pose<T>> {
    points.iter().map(|p| frame.to_global(*p)).collect()
}

/// A global rigid motion `p -> R(angle) p + (tx, ty)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Se2<T> {
    pub angle: T,
    pub tx: T,
    pub ty: T,
}

impl<T: Scalar> Se2<T> {
    pub fn new(angle: T, tx: T, ty: T) -> Self {
        Self { angle, tx, ty }
    }

    pub fn apply_xy(&self, x: T, y: T) -> (T, T) {
        let (s, c) = self.angle.sin_cos();
        (c * x - s * y + self.tx, s * x + c * y + self.ty)
    }

    pub fn apply_pose(&self, p: Pose<T>) -> Pose<T> {
        let (x, y) = self.apply_xy(p.x, p.y);
        Pose {
            x,
            y,
            heading: wrap(p.heading + self.angle),
        }
    }

    pub fn apply_frame(&self, f: &ReferenceFrame<T>) -> ReferenceFrame<T> {
        let (x, y) = self.apply_xy(f.x, f.y);
        ReferenceFrame::new(x, y, f.theta + self.angle, f.t)
    }
}

/// Fixed frequency bands for Fourier features.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierBands<T> {
    pub freqs: Vec<T>,
    pub include_raw: bool,
}

impl<T: Scalar> FourierBands<T> {
    /// `count` log-spaced frequencies spanning `[lo, hi]` cycles per unit.
    pub fn log_spaced(count: usize, lo: f64, hi: f64, include_raw: bool) -> Self {
        let freqs = if count == 1 {
            vec![T::of(lo)]
        } else {
            let (a, b) = (lo.ln(), hi.ln());
            (0..count)
                .map(|i| T::of((a + (b - a) * i as f64 / (count - 1) as f64).exp()))
                .collect()
        };
        Self { freqs, include_raw }
    }

    /// The shared default: 64 bands in `[1/64, 8]`, raw input appended.
    pub fn standard() -> Self {
        Self::log_spaced(64, 1.0 / 64.0, 8.0, true)
    }

    /// Output width for a `d`-dimensional input.
    pub fn output_dim(&self, d: usize) -> usize {
        2 * d * self.freqs.len() + if self.include_raw { d } else { 0 }
    }

    pub fn cast<U: Scalar>(&self) -> FourierBands<U> {
        FourierBands {
            freqs: self.freqs.iter().map(|f| U::of(f.f64())).collect(),
            include_raw: self.include_raw,
        }
    }
}

/// Writes Fourier features of `x` into `out`.
///
/// Layout is component-major, then frequency, sine before cosine; the raw
/// components follow when `include_raw` is set.
pub fn fourier_features_into<T: Scalar>(x: &[T], bands: &FourierBands<T>, out: &mut Vec<T>) {
    let tau = T::PI() + T::PI();
    for &xi in x {
        for &f in &bands.freqs {
            let (s, c) = (tau * f * xi).sin_cos();
            out.push(s);
            out.push(c);
        }
    }
    if bands.include_raw {
        out.extend_from_slice(x);
    }
}

pub fn fourier_features<T: Scalar>(x: &[T], bands: &FourierBands<T>) -> Vec<T> {
    let mut out = Vec::with_capacity(bands.output_dim(x.len()));
    fourier_features_into(x, bands, &mut out);
    out
}

/// Closest point on a polyline's segment chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosestPoint<T> {
    pub x: T,
    pub y: T,
    /// Tangent direction of the containing segment.
    pub tangent: T,
    pub distance: T,
    pub segment: usize,
}

/// Projects `(px, py)` onto the polyline `points` (at least two points).
pub fn closest_point_on_polyline<T: Scalar>(px: T, py: T, points: &[[T; 2]]) -> ClosestPoint<T> {
    assert!(points.len() >= 2, "polyline needs at least two points");
    let mut best: Option<ClosestPoint<T>> = None;
    for (i, w) in points.windows(2).enumerate() {
        let [ax, ay] = w[0];
        let [bx, by] = w[1];
        let (vx, vy) = (bx - ax, by - ay);
        let len2 = vx * vx + vy * vy;
        let u = if len2 > T::zero() {
            (((px - ax) * vx + (py - ay) * vy) / len2)
                .max(T::zero())
                .min(T::one())
        } else {
            T::zero()
        };
        let (cx, cy) = (ax + u * vx, ay + u * vy);
        let d = (px - cx).hypot(py - cy);
        if best.map_or(true, |b| d < b.distance) {
            best = Some(ClosestPoint {
                x: cx,
                y: cy,
                tangent: vy.atan2(vx),
                distance: d,
                segment: i,
            });
        }
    }
    best.expect("non-empty polyline")
}

/// Descriptor from `agent_frame` to the closest point of `points`, the target
/// orientation being the local tangent.
pub fn closest_point_descriptor<T: Scalar>(
    agent_frame: &ReferenceFrame<T>,
    points: &[[T; 2]],
) -> RelDescriptor<T> {
    let cp = closest_point_on_polyline(agent_frame.x, agent_frame.y, points);
    let target = ReferenceFrame::new(cp.x, cp.y, cp.tangent, agent_frame.t);
    relative_descriptor(agent_frame, &target)
}

/// Frame of a polyline: first point, first-segment tangent.
pub fn polyline_frame<T: Scalar>(points: &[[T; 2]]) -> ReferenceFrame<T> {
    let [x0, y0] = points[0];
    let [x1, y1] = points[1];
    ReferenceFrame::new(x0, y0, (y1 - y0).atan2(x1 - x0), 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn ang_close(a: f64, b: f64, tol: f64) -> bool {
        wrap(a - b).abs() < tol
    }

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap_angle(0.0f64).unwrap(), 0.0);
        assert_eq!(wrap_angle(2.0 * PI).unwrap(), 0.0);
        assert!((wrap_angle(-1.5 * PI).unwrap() - PI / 2.0).abs() < 1e-15);
        assert_eq!(wrap_angle(PI).unwrap(), PI);
        assert!((wrap_angle(-PI).unwrap() - PI).abs() < 1e-15);
        assert!(wrap_angle(f64::NAN).is_err());
        assert!(wrap_angle(f64::INFINITY).is_err());
    }

    #[test]
    fn descriptor_identity_and_analytic() {
        let a = ReferenceFrame::new(3.0, -2.0, 0.7, 5);
        let d = relative_descriptor(&a, &a);
        assert_eq!(d, RelDescriptor { distance: 0.0, direction: 0.0, rel_orientation: 0.0, dt: 0 });

        let src = ReferenceFrame::new(0.0, 0.0, 0.0, 0);
        let dst = ReferenceFrame::new(1.0, 1.0, PI / 2.0, 0);
        let d = relative_descriptor(&src, &dst);
        assert!((d.distance - 2f64.sqrt()).abs() < 1e-15);
        assert!((d.direction - PI / 4.0).abs() < 1e-15);
        assert!((d.rel_orientation - PI / 2.0).abs() < 1e-15);
        assert_eq!(d.dt, 0);

        let near = ReferenceFrame::new(3.0 + 1e-12, -2.0 - 1e-12, 0.7, 5);
        assert_eq!(relative_descriptor(&a, &near).direction, 0.0);
        let behind = ReferenceFrame::new(-1.0, 0.0, 0.0, 0);
        let o = ReferenceFrame::new(0.0, 0.0, 0.0, 0);
        let o_turned = ReferenceFrame::new(0.0, 0.0, 1e-13, 0);
        assert_eq!(relative_descriptor(&o, &behind).direction, PI);
        assert!((relative_descriptor(&o_turned, &behind).direction - PI).abs() < 1e-12);
        let o_back = ReferenceFrame::new(0.0, 0.0, -1e-13, 0);
        assert!((relative_descriptor(&o_back, &behind).direction - PI).abs() < 1e-12);
        assert_eq!(wrap_relative(-PI + 2.0 * ANGLE_TIE), -PI + 2.0 * ANGLE_TIE);
        let far = ReferenceFrame::new(3.0, -2.0 + 2.0 * MIN_OFFSET, 0.7, 5);
        assert!((relative_descriptor(&a, &far).direction - wrap(PI / 2.0 - 0.7)).abs() < 1e-9);
    }

    #[test]
    fn transform_examples() {
        let pts = vec![Pose::new(1.0, 2.0, 0.3), Pose::new(-4.0, 0.5, -2.0)];
        let id = ReferenceFrame::identity();
        assert_eq!(transform_to_frame(&pts, &id), pts);
        let f = ReferenceFrame::new(1.0, 2.0, 1.0, 0);
        let local = f.to_local(Pose::new(1.0, 2.0, 0.3));
        assert_eq!((local.x, local.y), (0.0, 0.0));
        assert!((local.heading - wrap(0.3f64 - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn fourier_examples() {
        let bands = FourierBands::<f64> { freqs: vec![1.0, 2.0], include_raw: false };
        let out = fourier_features(&[1.0], &bands);
        let expect = [0.0, 1.0, 0.0, 1.0];
        for (o, e) in out.iter().zip(expect) {
            assert!((o - e).abs() < 1e-12);
        }
        let std = FourierBands::<f64>::standard();
        let z = fourier_features(&[0.0, 0.0, 0.0], &std);
        assert_eq!(z.len(), std.output_dim(3));
        for c in 0..3 {
            for j in 0..64 {
                assert_eq!(z[c * 128 + 2 * j], 0.0);
                assert_eq!(z[c * 128 + 2 * j + 1], 1.0);
            }
        }
        assert_eq!(&z[384..], &[0.0, 0.0, 0.0]);
        assert!((std.freqs[0] - 1.0 / 64.0).abs() < 1e-15);
        assert!((std.freqs[63] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn fourier_matches_per_element_oracle() {
        let bands = FourierBands::<f64>::log_spaced(5, 0.1, 3.0, true);
        let x = [0.37, -1.9];
        let out = fourier_features(&x, &bands);
        let mut k = 0;
        for xi in x {
            for f in &bands.freqs {
                assert_eq!(out[k], (2.0 * PI * f * xi).sin());
                assert_eq!(out[k + 1], (2.0 * PI * f * xi).cos());
                k += 2;
            }
        }
        assert_eq!(&out[k..], &x);
    }

    #[test]
    fn closest_point_examples() {
        let seg = [[-1.0, 0.0], [1.0, 0.0]];
        let f = ReferenceFrame::new(0.0, 1.0, 0.0, 0);
        let cp = closest_point_on_polyline(0.0, 1.0, &seg);
        assert_eq!((cp.x, cp.y, cp.tangent, cp.distance), (0.0, 0.0, 0.0, 1.0));
        let d = closest_point_descriptor(&f, &seg);
        assert_eq!(d.distance, 1.0);
        let on = ReferenceFrame::new(0.5, 0.0, 0.2, 0);
        assert_eq!(closest_point_descriptor(&on, &seg).distance, 0.0);
    }

    #[test]
    fn closest_point_matches_dense_sampling() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let pts: Vec<[f64; 2]> = (0..4)
                .map(|_| [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)])
                .collect();
            let (px, py) = (rng.random_range(-12.0..12.0), rng.random_range(-12.0..12.0));
            let mut best = f64::INFINITY;
            for w in pts.windows(2) {
                let n = 10_000;
                for i in 0..=n {
                    let u = i as f64 / n as f64;
                    let x = w[0][0] + u * (w[1][0] - w[0][0]);
                    let y = w[0][1] + u * (w[1][1] - w[0][1]);
                    best = best.min((x - px).hypot(y - py));
                }
            }
            let cp = closest_point_on_polyline(px, py, &pts);
            assert!((cp.distance - best).abs() < 1e-4, "{} vs {}", cp.distance, best);
            for p in &pts {
                assert!(cp.distance <= (p[0] - px).hypot(p[1] - py) + 1e-12);
            }
        }
    }

    fn frame_strategy() -> impl Strategy<Value = ReferenceFrame<f64>> {
        (-100.0..100.0f64, -100.0..100.0f64, -PI..PI, -20i64..20)
            .prop_map(|(x, y, th, t)| ReferenceFrame::new(x, y, th, t))
    }

    proptest! {
        #[test]
        fn wrap_is_modular(theta in -1e4..1e4f64) {
            let w = wrap(theta);
            prop_assert!(w > -PI && w <= PI);
            let k = ((theta - w) / (2.0 * PI)).round();
            prop_assert!((theta - w - k * 2.0 * PI).abs() < 1e-9);
        }

        #[test]
        fn descriptor_is_se2_invariant(a in frame_strategy(), b in frame_strategy(),
                                       ang in -PI..PI, tx in -500.0..500.0f64, ty in -500.0..500.0f64) {
            let g = Se2::new(ang, tx, ty);
            let d0 = relative_descriptor(&a, &b);
            let d1 = relative_descriptor(&g.apply_frame(&a), &g.apply_frame(&b));
            prop_assert!((d0.distance - d1.distance).abs() < 1e-9);
            prop_assert!(ang_close(d0.direction, d1.direction, 1e-9));
            prop_assert!(ang_close(d0.rel_orientation, d1.rel_orientation, 1e-9));
            prop_assert_eq!(d0.dt, d1.dt);
        }

        #[test]
        fn frame_roundtrip(f in frame_strategy(), x in -200.0..200.0f64, y in -200.0..200.0f64, h in -PI..PI) {
            let p = Pose::new(x, y, h);
            let back = transform_from_frame(&transform_to_frame(&[p], &f), &f)[0];
            prop_assert!((back.x - x).abs() < 1e-9 && (back.y - y).abs() < 1e-9);
            prop_assert!(ang_close(back.heading, h, 1e-9));
        }

        #[test]
        fn fourier_bounded(x in proptest::collection::vec(-50.0..50.0f64, 1..5)) {
            let bands = FourierBands::<f64>::standard();
            let out = fourier_features(&x, &bands);
            let n = 2 * x.len() * 64;
            prop_assert!(out[..n].iter().all(|v| v.abs() <= 1.0));
        }
    }
}
