//! Cone-beam acquisition geometry.
//!
//! Frame convention: at angle 0 the source sits at `(-sid, 0, 0)`, the
//! detector plane at `x = sdd - sid` with the detector centered on the
//! rotation axis (z). Rotation is about z. Pixel centers are offset from the
//! detector center by `(col - (cols-1)/2) * pitch` along the rotated y axis
//! and `(row - (rows-1)/2) * pitch` along z.
//!
//! All operations here are pure functions of immutable inputs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    #[inline]
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    #[inline]
    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    #[inline]
    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        Vec3::new(self.x / n, self.y / n, self.z / n)
    }

    /// Rotation about the z axis by `angle` radians (counter-clockwise
    /// looking down +z).
    #[inline]
    pub fn rotate_z(self, angle: f64) -> Vec3 {
        let (s, c) = angle.sin_cos();
        Vec3::new(c * self.x - s * self.y, s * self.x + c * self.y, self.z)
    }

    #[inline]
    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    #[inline]
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    #[inline]
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Mul<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Axis-aligned box in world millimetres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Aabb> {
        if !(min.x < max.x && min.y < max.y && min.z < max.z) {
            return Err(Error::Config(format!(
                "bbox must have positive extent on all axes, got min {min:?} max {max:?}"
            )));
        }
        Ok(Aabb { min, max })
    }

    /// Cube of side `side` centered at the origin.
    pub fn centered_cube(side: f64) -> Result<Aabb> {
        let h = side / 2.0;
        Aabb::new(Vec3::new(-h, -h, -h), Vec3::new(h, h, h))
    }

    #[inline]
    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    #[inline]
    pub fn contains(&self, p: Vec3, tol: f64) -> bool {
        p.x >= self.min.x - tol
            && p.x <= self.max.x + tol
            && p.y >= self.min.y - tol
            && p.y <= self.max.y + tol
            && p.z >= self.min.z - tol
            && p.z <= self.max.z + tol
    }

    /// Normalize a world point to [0,1]^3 box coordinates.
    #[inline]
    pub fn normalize(&self, p: Vec3) -> [f64; 3] {
        let e = self.extent();
        [
            (p.x - self.min.x) / e.x,
            (p.y - self.min.y) / e.y,
            (p.z - self.min.z) / e.z,
        ]
    }

    pub fn approx_eq(&self, other: &Aabb, tol: f64) -> bool {
        (self.min - other.min).norm() <= tol && (self.max - other.max).norm() <= tol
    }
}

/// Source/detector configuration for a circular cone-beam orbit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeBeamGeometry {
    /// Source-to-isocenter distance, mm.
    pub sid: f64,
    /// Source-to-detector distance, mm.
    pub sdd: f64,
    pub det_rows: usize,
    pub det_cols: usize,
    /// Detector pixel pitch, mm per pixel.
    pub det_pitch: f64,
    /// Rotation angles, radians, strictly increasing.
    pub angles: Vec<f64>,
    /// Reconstruction bounding box; rays are clipped against it.
    pub bbox: Aabb,
}

impl ConeBeamGeometry {
    pub fn new(
        sid: f64,
        sdd: f64,
        det_rows: usize,
        det_cols: usize,
        det_pitch: f64,
        angles: Vec<f64>,
        bbox: Aabb,
    ) -> Result<ConeBeamGeometry> {
        if !(sdd > sid && sid > 0.0) {
            return Err(Error::Config(format!(
                "need sdd > sid > 0, got sid {sid} sdd {sdd}"
            )));
        }
        if det_rows < 1 || det_cols < 1 {
            return Err(Error::Config("detector needs at least 1x1 pixels".into()));
        }
        if det_pitch <= 0.0 {
            return Err(Error::Config(format!("det_pitch must be > 0, got {det_pitch}")));
        }
        if angles.is_empty() {
            return Err(Error::Config("need at least one angle".into()));
        }
        if angles.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("angles must be strictly increasing".into()));
        }
        // The box must sit strictly inside the source orbit and strictly in
        // front of the detector plane for every angle; the worst case over
        // angles is the largest xy-radius over the box corners.
        let r_xy = [
            (bbox.min.x, bbox.min.y),
            (bbox.min.x, bbox.max.y),
            (bbox.max.x, bbox.min.y),
            (bbox.max.x, bbox.max.y),
        ]
        .iter()
        .map(|&(x, y)| (x * x + y * y).sqrt())
        .fold(0.0, f64::max);
        if r_xy >= sid {
            return Err(Error::Config(format!(
                "bbox xy-radius {r_xy:.3} reaches the source orbit (sid {sid})"
            )));
        }
        if r_xy >= sdd - sid {
            return Err(Error::Config(format!(
                "bbox xy-radius {r_xy:.3} reaches the detector plane (sdd-sid {})",
                sdd - sid
            )));
        }
        Ok(ConeBeamGeometry {
            sid,
            sdd,
            det_rows,
            det_cols,
            det_pitch,
            angles,
            bbox,
        })
    }

    /// `n_angles` equally spaced over `[0, arc)` (end-exclusive).
    #[allow(clippy::too_many_arguments)]
    pub fn with_uniform_angles(
        sid: f64,
        sdd: f64,
        det_rows: usize,
        det_cols: usize,
        det_pitch: f64,
        n_angles: usize,
        arc_radians: f64,
        bbox: Aabb,
    ) -> Result<ConeBeamGeometry> {
        if n_angles == 0 || arc_radians <= 0.0 {
            return Err(Error::Config("need n_angles >= 1 and a positive arc".into()));
        }
        let step = arc_radians / n_angles as f64;
        let angles = (0..n_angles).map(|i| i as f64 * step).collect();
        ConeBeamGeometry::new(sid, sdd, det_rows, det_cols, det_pitch, angles, bbox)
    }

    #[inline]
    pub fn n_projections(&self) -> usize {
        self.angles.len()
    }

    #[inline]
    pub fn pixels_per_projection(&self) -> usize {
        self.det_rows * self.det_cols
    }

    #[inline]
    pub fn n_pixels(&self) -> usize {
        self.n_projections() * self.pixels_per_projection()
    }

    /// Linear pixel index, angle-major then row-major.
    #[inline]
    pub fn pixel_index(&self, angle: usize, row: usize, col: usize) -> usize {
        (angle * self.det_rows + row) * self.det_cols + col
    }

    /// Inverse of [`pixel_index`](Self::pixel_index).
    #[inline]
    pub fn pixel_coords(&self, index: usize) -> (usize, usize, usize) {
        let col = index % self.det_cols;
        let rest = index / self.det_cols;
        (rest / self.det_rows, rest % self.det_rows, col)
    }

    pub fn source_position(&self, angle_index: usize) -> Result<Vec3> {
        let a = self.angle(angle_index)?;
        Ok(Vec3::new(-self.sid, 0.0, 0.0).rotate_z(a))
    }

    pub fn pixel_center(&self, angle_index: usize, row: usize, col: usize) -> Result<Vec3> {
        let a = self.angle(angle_index)?;
        if row >= self.det_rows || col >= self.det_cols {
            return Err(Error::IndexOutOfBounds(format!(
                "pixel ({row},{col}) outside {}x{} detector",
                self.det_rows, self.det_cols
            )));
        }
        let u = (col as f64 - (self.det_cols as f64 - 1.0) / 2.0) * self.det_pitch;
        let v = (row as f64 - (self.det_rows as f64 - 1.0) / 2.0) * self.det_pitch;
        Ok(Vec3::new(self.sdd - self.sid, u, v).rotate_z(a))
    }

    fn angle(&self, angle_index: usize) -> Result<f64> {
        self.angles.get(angle_index).copied().ok_or_else(|| {
            Error::IndexOutOfBounds(format!(
                "angle index {angle_index} outside {} projections",
                self.angles.len()
            ))
        })
    }
}

/// Source-to-pixel ray with its bbox clip interval.
#[derive(Clone, Copy, Debug)]
pub struct Ray {
    /// Source position, mm.
    pub origin: Vec3,
    /// Unit direction.
    pub dir: Vec3,
    /// `(t_entry, t_exit)` along `dir`, mm; `None` if the ray misses the box.
    pub clip: Option<(f64, f64)>,
}

impl Ray {
    #[inline]
    pub fn point_at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

/// Sample positions and step lengths along one ray.
///
/// Constant-speed parameterization: every step equals `(t_exit - t_entry)/n`.
#[derive(Clone, Debug)]
pub struct RaySampleSet {
    pub positions: Vec<Vec3>,
    pub steps: Vec<f64>,
}

impl RaySampleSet {
    #[inline]
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Slab-method intersection of a ray with an axis-aligned box.
///
/// Returns the parameter interval where `origin + t*dir` is inside `bbox`,
/// with the entry clamped to `t >= 0` (no samples behind the source), or
/// `None` when the intersection is empty.
pub fn intersect_aabb(origin: Vec3, dir: Vec3, bbox: &Aabb) -> Result<Option<(f64, f64)>> {
    let n = dir.norm();
    if n == 0.0 {
        return Err(Error::Config("ray direction has zero length".into()));
    }
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("ray direction must be unit length, |d| = {n}")));
    }
    let mut t0 = 0.0_f64;
    let mut t1 = f64::INFINITY;
    let o = origin.to_array();
    let d = dir.to_array();
    let lo = bbox.min.to_array();
    let hi = bbox.max.to_array();
    for axis in 0..3 {
        if d[axis] == 0.0 {
            if o[axis] < lo[axis] || o[axis] > hi[axis] {
                return Ok(None);
            }
            continue;
        }
        let inv = 1.0 / d[axis];
        let (ta, tb) = ((lo[axis] - o[axis]) * inv, (hi[axis] - o[axis]) * inv);
        let (near, far) = if ta <= tb { (ta, tb) } else { (tb, ta) };
        t0 = t0.max(near);
        t1 = t1.min(far);
        if t0 > t1 {
            return Ok(None);
        }
    }
    Ok(Some((t0, t1)))
}

/// Construct the ray from the source through the center of pixel
/// `(row, col)` at `angle_index`, clipped against the geometry's bbox.
pub fn ray_for_pixel(
    geom: &ConeBeamGeometry,
    angle_index: usize,
    row: usize,
    col: usize,
) -> Result<Ray> {
    let origin = geom.source_position(angle_index)?;
    let pixel = geom.pixel_center(angle_index, row, col)?;
    let dir = (pixel - origin).normalized();
    let clip = intersect_aabb(origin, dir, &geom.bbox)?;
    Ok(Ray { origin, dir, clip })
}

/// Partition the clip interval into `n` equal cells and sample one point per
/// cell: the midpoint when `jitter` is `None`, a uniform position within the
/// cell otherwise.
pub fn sample_ray(ray: &Ray, n: usize, mut jitter: Option<&mut ChaCha8Rng>) -> Result<RaySampleSet> {
    let (t0, t1) = ray
        .clip
        .ok_or_else(|| Error::Data("cannot sample a ray that misses the bbox".into()))?;
    if n == 0 {
        return Err(Error::Config("sample count must be >= 1".into()));
    }
    let dt = (t1 - t0) / n as f64;
    let mut positions = Vec::with_capacity(n);
    for c in 0..n {
        let offset = match jitter.as_deref_mut() {
            Some(rng) => rng.gen::<f64>(),
            None => 0.5,
        };
        let t = t0 + (c as f64 + offset) * dt;
        positions.push(ray.point_at(t));
    }
    Ok(RaySampleSet {
        positions,
        steps: vec![dt; n],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use approx::assert_relative_eq;

    fn test_geom() -> ConeBeamGeometry {
        ConeBeamGeometry::with_uniform_angles(
            500.0,
            1000.0,
            9,
            9,
            4.0,
            8,
            std::f64::consts::PI * 2.0,
            Aabb::centered_cube(128.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn central_ray_at_angle_zero_points_along_x() {
        let g = test_geom();
        let ray = ray_for_pixel(&g, 0, 4, 4).unwrap();
        assert_relative_eq!(ray.dir.x, 1.0, epsilon = 1e-12);
        assert_relative_eq!(ray.dir.y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(ray.dir.z, 0.0, epsilon = 1e-12);
        assert_relative_eq!(ray.origin.x, -500.0, epsilon = 1e-12);
    }

    #[test]
    fn central_ray_at_half_rotation_points_back() {
        let mut g = test_geom();
        g.angles = vec![0.0, std::f64::consts::PI];
        let ray = ray_for_pixel(&g, 1, 4, 4).unwrap();
        assert_relative_eq!(ray.dir.x, -1.0, epsilon = 1e-12);
        assert!(ray.dir.y.abs() < 1e-12 && ray.dir.z.abs() < 1e-12);
    }

    // Independent geometric derivation: one pitch to the side on the detector,
    // the un-normalized direction is (sdd, pitch, 0); derive the unit vector
    // from the right-triangle hypotenuse rather than through Vec3 math.
    #[test]
    fn offset_pixel_direction_matches_hand_trigonometry() {
        let g = test_geom();
        let ray = ray_for_pixel(&g, 0, 4, 5).unwrap();
        let hyp = (g.sdd * g.sdd + g.det_pitch * g.det_pitch).sqrt();
        assert_relative_eq!(ray.dir.x, g.sdd / hyp, epsilon = 1e-12);
        assert_relative_eq!(ray.dir.y, g.det_pitch / hyp, epsilon = 1e-12);
        assert_relative_eq!(ray.dir.z, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn every_ray_passes_through_its_pixel_center() {
        let g = test_geom();
        for a in 0..g.n_projections() {
            for row in [0, 4, 8] {
                for col in [0, 3, 8] {
                    let ray = ray_for_pixel(&g, a, row, col).unwrap();
                    let pixel = g.pixel_center(a, row, col).unwrap();
                    let t_pix = (pixel - ray.origin).norm();
                    assert!((ray.point_at(t_pix) - pixel).norm() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn ray_construction_is_rotation_equivariant() {
        let g = test_geom();
        let alpha = g.angles[3];
        let base = ray_for_pixel(&g, 0, 2, 7).unwrap();
        let rotated = ray_for_pixel(&g, 3, 2, 7).unwrap();
        assert!((base.origin.rotate_z(alpha) - rotated.origin).norm() < 1e-9);
        assert!((base.dir.rotate_z(alpha) - rotated.dir).norm() < 1e-12);
    }

    #[test]
    fn index_out_of_bounds_is_an_error() {
        let g = test_geom();
        assert!(ray_for_pixel(&g, 99, 0, 0).is_err());
        assert!(ray_for_pixel(&g, 0, 9, 0).is_err());
        assert!(ray_for_pixel(&g, 0, 0, 9).is_err());
    }

    #[test]
    fn axis_aligned_chord_equals_cube_side() {
        let b = Aabb::centered_cube(50.0).unwrap();
        let (t0, t1) = intersect_aabb(Vec3::new(-100.0, 3.0, -7.0), Vec3::new(1.0, 0.0, 0.0), &b)
            .unwrap()
            .unwrap();
        assert_relative_eq!(t1 - t0, 50.0, epsilon = 1e-9);
    }

    #[test]
    fn parallel_ray_outside_misses() {
        let b = Aabb::centered_cube(50.0).unwrap();
        let hit = intersect_aabb(Vec3::new(-100.0, 60.0, 0.0), Vec3::new(1.0, 0.0, 0.0), &b).unwrap();
        assert!(hit.is_none());
    }

    // Closed form: the main diagonal of the unit cube has length sqrt(3).
    #[test]
    fn unit_cube_diagonal_chord() {
        let b = Aabb::new(Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0)).unwrap();
        let dir = Vec3::new(1.0, 1.0, 1.0).normalized();
        let (t0, t1) = intersect_aabb(Vec3::new(-1.0, -1.0, -1.0), dir, &b)
            .unwrap()
            .unwrap();
        assert_relative_eq!(t1 - t0, 3.0_f64.sqrt(), epsilon = 1e-6);
    }

    #[test]
    fn entry_clamped_to_nonnegative() {
        // Origin inside the box: the slab interval starts behind the source.
        let b = Aabb::centered_cube(50.0).unwrap();
        let (t0, t1) = intersect_aabb(Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0), &b)
            .unwrap()
            .unwrap();
        assert_eq!(t0, 0.0);
        assert_relative_eq!(t1, 25.0, epsilon = 1e-9);
    }

    #[test]
    fn direction_flip_reflects_interval() {
        let b = Aabb::centered_cube(40.0).unwrap();
        let o = Vec3::new(-90.0, 5.0, 5.0);
        let d = Vec3::new(1.0, 0.1, 0.05).normalized();
        let (t0, t1) = intersect_aabb(o, d, &b).unwrap().unwrap();
        // Start from the far side, looking back.
        let o2 = o + d * 200.0;
        let d2 = d * -1.0;
        let (s0, s1) = intersect_aabb(o2, d2, &b).unwrap().unwrap();
        assert_relative_eq!(s0, 200.0 - t1, epsilon = 1e-9);
        assert_relative_eq!(s1, 200.0 - t0, epsilon = 1e-9);
    }

    #[test]
    fn zero_direction_is_an_error() {
        let b = Aabb::centered_cube(40.0).unwrap();
        assert!(intersect_aabb(Vec3::ZERO, Vec3::ZERO, &b).is_err());
    }

    #[test]
    fn single_sample_sits_at_midpoint() {
        let g = test_geom();
        let ray = ray_for_pixel(&g, 0, 4, 4).unwrap();
        let (t0, t1) = ray.clip.unwrap();
        let s = sample_ray(&ray, 1, None).unwrap();
        assert_eq!(s.len(), 1);
        assert_relative_eq!(s.steps[0], t1 - t0, epsilon = 1e-12);
        assert!((s.positions[0] - ray.point_at((t0 + t1) / 2.0)).norm() < 1e-9);
    }

    #[test]
    fn steps_sum_to_clip_interval() {
        let g = test_geom();
        let ray = ray_for_pixel(&g, 2, 1, 6).unwrap();
        let (t0, t1) = ray.clip.unwrap();
        for n in [1, 7, 300] {
            let s = sample_ray(&ray, n, None).unwrap();
            let total: f64 = s.steps.iter().sum();
            assert_relative_eq!(total, t1 - t0, max_relative = 1e-4);
            assert!(s.steps.iter().all(|&dt| dt > 0.0));
            assert!(s.positions.iter().all(|&p| g.bbox.contains(p, 1e-9)));
        }
    }

    // Analytic integral of a constant field: sum mu0 * dr = mu0 * chord.
    #[test]
    fn constant_field_quadrature() {
        let g = test_geom();
        let ray = ray_for_pixel(&g, 0, 4, 4).unwrap();
        let (t0, t1) = ray.clip.unwrap();
        let mu0 = 0.02;
        let s = sample_ray(&ray, 300, None).unwrap();
        let integral: f64 = s.steps.iter().map(|&dt| mu0 * dt).sum();
        assert_relative_eq!(integral, mu0 * (t1 - t0), max_relative = 1e-5);
    }

    #[test]
    fn jittered_sampling_is_reproducible() {
        let g = test_geom();
        let ray = ray_for_pixel(&g, 1, 3, 3).unwrap();
        let mut r1 = stream(7, &[1]);
        let mut r2 = stream(7, &[1]);
        let a = sample_ray(&ray, 64, Some(&mut r1)).unwrap();
        let b = sample_ray(&ray, 64, Some(&mut r2)).unwrap();
        for (pa, pb) in a.positions.iter().zip(&b.positions) {
            assert_eq!(pa, pb);
        }
        // And every jittered point stays inside its cell.
        let (t0, _) = ray.clip.unwrap();
        for (c, p) in a.positions.iter().enumerate() {
            let t = (*p - ray.origin).dot(ray.dir);
            let lo = t0 + c as f64 * a.steps[0];
            assert!(t >= lo - 1e-9 && t <= lo + a.steps[0] + 1e-9);
        }
    }

    #[test]
    fn sample_errors() {
        let g = test_geom();
        let ray = ray_for_pixel(&g, 0, 4, 4).unwrap();
        assert!(sample_ray(&ray, 0, None).is_err());
        let miss = Ray { origin: ray.origin, dir: ray.dir, clip: None };
        assert!(sample_ray(&miss, 8, None).is_err());
    }

    #[test]
    fn geometry_validation() {
        let b = Aabb::centered_cube(128.0).unwrap();
        // sdd <= sid
        assert!(ConeBeamGeometry::new(500.0, 400.0, 8, 8, 4.0, vec![0.0], b).is_err());
        // non-increasing angles
        assert!(ConeBeamGeometry::new(500.0, 1000.0, 8, 8, 4.0, vec![0.2, 0.1], b).is_err());
        // box reaching the orbit
        let big = Aabb::centered_cube(1200.0).unwrap();
        assert!(ConeBeamGeometry::new(500.0, 1000.0, 8, 8, 4.0, vec![0.0], big).is_err());
    }
}
