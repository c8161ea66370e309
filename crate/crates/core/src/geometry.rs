//! Frames, poses and the BEV grid: synchronization, cropping, voxelization
//! and pillarization.
//!
//! Grid indices are `(i, j, k)` with `i` along y (rows), `j` along x
//! (columns) and `k` along z. Binning is half-open, `[min, max)`, so every
//! in-range point lands in exactly one cell.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rigid transform `p ↦ R·p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub const fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    /// Rotation by `yaw` radians about +z followed by translation `t`.
    pub fn from_yaw_translation(yaw: f64, t: [f64; 3]) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation: t,
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    /// Applies only the rotation (for displacement vectors).
    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }

    pub fn determinant(&self) -> f64 {
        let r = &self.rotation;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    /// Checks that the rotation is orthonormal with determinant 1 (±1e-6).
    pub fn validate(&self) -> Result<()> {
        let det = self.determinant();
        let finite = self.rotation.iter().flatten().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite());
        if !finite || (det - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidPose { det });
        }
        let r = &self.rotation;
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = (0..3).map(|k| r[a][k] * r[b][k]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 {
                    return Err(Error::InvalidPose { det });
                }
            }
        }
        Ok(())
    }

    /// Inverse of a rigid transform (`Rᵀ`, `−Rᵀt`). Assumes a valid rotation.
    pub fn inverse(&self) -> Self {
        let r = &self.rotation;
        let mut rt = [[0.0; 3]; 3];
        for (a, row) in rt.iter_mut().enumerate() {
            for (b, v) in row.iter_mut().enumerate() {
                *v = r[b][a];
            }
        }
        let t = &self.translation;
        let mut nt = [0.0; 3];
        for (a, v) in nt.iter_mut().enumerate() {
            *v = -(rt[a][0] * t[0] + rt[a][1] * t[1] + rt[a][2] * t[2]);
        }
        Self {
            rotation: rt,
            translation: nt,
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let a = &self.rotation;
        let b = &other.rotation;
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        Self {
            rotation: r,
            translation: self.apply(other.translation),
        }
    }

    /// Row-major rotation followed by translation; the on-disk pose layout.
    pub fn to_array(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for i in 0..3 {
            out[i * 3..i * 3 + 3].copy_from_slice(&self.rotation[i]);
        }
        out[9..].copy_from_slice(&self.translation);
        out
    }

    pub fn from_array(a: &[f64; 12]) -> Self {
        let mut rotation = [[0.0; 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            row.copy_from_slice(&a[i * 3..i * 3 + 3]);
        }
        Self {
            rotation,
            translation: [a[9], a[10], a[11]],
        }
    }
}

/// One timestamped sweep, points in the sensor frame, `pose` maps sensor to world.
#[derive(Clone, Debug, PartialEq)]
pub struct PointFrame {
    pub points: Vec<[f64; 3]>,
    pub timestamp: f64,
    pub pose: RigidTransform,
}

impl PointFrame {
    pub fn new(points: Vec<[f64; 3]>, timestamp: f64, pose: RigidTransform) -> Self {
        Self {
            points,
            timestamp,
            pose,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Copy of this frame keeping only the points at `indices`.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            timestamp: self.timestamp,
            pose: self.pose,
        }
    }
}

/// Metric extents and cell sizes of the voxel grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub cell_x: f64,
    pub cell_y: f64,
    pub cell_z: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::desk()
    }
}

fn cells_along(range: (f64, f64), cell: f64) -> usize {
    // Tolerate representation error in exact multiples (16 / 0.25 etc).
    ((range.1 - range.0) / cell - 1e-9).ceil().max(0.0) as usize
}

fn bin(v: f64, range: (f64, f64), cell: f64, n: usize) -> Option<usize> {
    if !(v >= range.0 && v < range.1) {
        return None;
    }
    let idx = ((v - range.0) / cell).floor() as usize;
    Some(idx.min(n - 1))
}

impl GridSpec {
    /// Desk-scale grid: 16 m × 16 m × 5 m with 0.25 × 0.25 × 0.4 m cells.
    pub fn desk() -> Self {
        Self {
            x_range: (-8.0, 8.0),
            y_range: (-8.0, 8.0),
            z_range: (-3.0, 2.0),
            cell_x: 0.25,
            cell_y: 0.25,
            cell_z: 0.4,
        }
    }

    /// Full 64 m × 64 m range with the same cells (256 × 256 × 13).
    pub fn full_range() -> Self {
        Self {
            x_range: (-32.0, 32.0),
            y_range: (-32.0, 32.0),
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [self.x_range, self.y_range, self.z_range];
        let cells = [self.cell_x, self.cell_y, self.cell_z];
        for (r, c) in ranges.iter().zip(cells) {
            if !(r.0.is_finite() && r.1.is_finite() && r.1 > r.0) {
                return Err(Error::InvalidConfig(format!("empty grid range {r:?}")));
            }
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::InvalidConfig(format!("cell size {c} must be positive")));
            }
        }
        let (h, w, c) = self.dims();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidConfig("grid has a zero dimension".into()));
        }
        Ok(())
    }

    /// `(H, W, C)`: rows along y, columns along x, layers along z.
    pub fn dims(&self) -> (usize, usize, usize) {
        (
            cells_along(self.y_range, self.cell_y),
            cells_along(self.x_range, self.cell_x),
            cells_along(self.z_range, self.cell_z),
        )
    }

    pub fn bev_dims(&self) -> (usize, usize) {
        let (h, w, _) = self.dims();
        (h, w)
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let inside = |v: f64, r: (f64, f64)| v >= r.0 && v < r.1;
        inside(p[0], self.x_range) && inside(p[1], self.y_range) && inside(p[2], self.z_range)
    }

    /// BEV cell `(i, j)` of an `(x, y)` location.
    pub fn bev_cell(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let (h, w, _) = self.dims();
        Some((
            bin(y, self.y_range, self.cell_y, h)?,
            bin(x, self.x_range, self.cell_x, w)?,
        ))
    }

    pub fn voxel(&self, p: [f64; 3]) -> Option<(usize, usize, usize)> {
        let (_, _, c) = self.dims();
        let (i, j) = self.bev_cell(p[0], p[1])?;
        Some((i, j, bin(p[2], self.z_range, self.cell_z, c)?))
    }

    /// Metric `(x, y)` of the center of BEV cell `(i, j)`.
    pub fn center(&self, i: usize, j: usize) -> [f64; 2] {
        [
            self.x_range.0 + (j as f64 + 0.5) * self.cell_x,
            self.y_range.0 + (i as f64 + 0.5) * self.cell_y,
        ]
    }
}

/// Binary `H × W × C` occupancy.
#[derive(Clone, Debug, PartialEq)]
pub struct BevVoxelGrid {
    pub occupancy: Array3<bool>,
    pub spec: GridSpec,
}

impl BevVoxelGrid {
    pub fn count(&self) -> usize {
        self.occupancy.iter().filter(|&&v| v).count()
    }
}

/// Occupied BEV cells, listed in row-major order with their metric centers.
#[derive(Clone, Debug, PartialEq)]
pub struct PillarSet {
    pub occupancy: Array2<bool>,
    pub cells: Vec<(usize, usize)>,
    pub centers: Vec<[f64; 2]>,
    pub spec: GridSpec,
}

impl PillarSet {
    /// Builds the set from a BEV occupancy map.
    pub fn from_occupancy(occupancy: Array2<bool>, spec: GridSpec) -> Self {
        let mut cells = Vec::new();
        let mut centers = Vec::new();
        for ((i, j), &on) in occupancy.indexed_iter() {
            if on {
                cells.push((i, j));
                centers.push(spec.center(i, j));
            }
        }
        Self {
            occupancy,
            cells,
            centers,
            spec,
        }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Position of `(i, j)` in `cells`, if occupied.
    pub fn index_of(&self, cell: (usize, usize)) -> Option<usize> {
        self.cells.binary_search(&cell).ok()
    }
}

/// Re-expresses `frame` in the sensor frame of `target_pose`.
pub fn sync_to_frame(frame: &PointFrame, target_pose: &RigidTransform) -> Result<PointFrame> {
    frame.pose.validate()?;
    target_pose.validate()?;
    let to_target = target_pose.inverse().compose(&frame.pose);
    Ok(PointFrame {
        points: frame.points.iter().map(|&p| to_target.apply(p)).collect(),
        timestamp: frame.timestamp,
        pose: *target_pose,
    })
}

/// Keeps the points inside the grid's half-open ranges, in order.
pub fn crop(frame: &PointFrame, spec: &GridSpec) -> PointFrame {
    PointFrame {
        points: frame
            .points
            .iter()
            .copied()
            .filter(|&p| spec.contains(p))
            .collect(),
        timestamp: frame.timestamp,
        pose: frame.pose,
    }
}

/// Marks every voxel hit by at least one point. Out-of-range points are ignored.
pub fn voxelize(frame: &PointFrame, spec: &GridSpec) -> BevVoxelGrid {
    let (h, w, c) = spec.dims();
    let mut occupancy = Array3::from_elem((h, w, c), false);
    for &p in &frame.points {
        if let Some(v) = spec.voxel(p) {
            occupancy[v] = true;
        }
    }
    BevVoxelGrid {
        occupancy,
        spec: *spec,
    }
}

/// OR-reduces the voxel columns into pillars.
pub fn pillarize(grid: &BevVoxelGrid) -> PillarSet {
    let (h, w, _) = grid.occupancy.dim();
    let mut occ = Array2::from_elem((h, w), false);
    for ((i, j, _), &on) in grid.occupancy.indexed_iter() {
        if on {
            occ[(i, j)] = true;
        }
    }
    PillarSet::from_occupancy(occ, grid.spec)
}

/// Crop, voxelize and pillarize in one pass.
pub fn pillars_of(frame: &PointFrame, spec: &GridSpec) -> PillarSet {
    let (h, w) = spec.bev_dims();
    let mut occ = Array2::from_elem((h, w), false);
    for &p in &frame.points {
        if let Some((i, j, _)) = spec.voxel(p) {
            occ[(i, j)] = true;
        }
    }
    PillarSet::from_occupancy(occ, *spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn frame(points: Vec<[f64; 3]>, pose: RigidTransform) -> PointFrame {
        PointFrame::new(points, 0.0, pose)
    }

    #[test]
    fn sync_identity_is_noop() {
        let f = frame(vec![[1.0, 2.0, 3.0]], RigidTransform::identity());
        let out = sync_to_frame(&f, &RigidTransform::identity()).unwrap();
        assert_eq!(out.points, vec![[1.0, 2.0, 3.0]]);
    }

    #[test]
    fn sync_pure_translation() {
        let f = frame(vec![[0.0; 3]], RigidTransform::from_translation([1.0, 0.0, 0.0]));
        let out = sync_to_frame(&f, &RigidTransform::identity()).unwrap();
        assert_eq!(out.points, vec![[1.0, 0.0, 0.0]]);
        assert_eq!(out.pose, RigidTransform::identity());
    }

    #[test]
    fn sync_axis_rotation() {
        let pose = RigidTransform::from_yaw_translation(std::f64::consts::FRAC_PI_2, [0.0; 3]);
        let f = frame(vec![[1.0, 0.0, 0.0]], pose);
        let out = sync_to_frame(&f, &RigidTransform::identity()).unwrap();
        assert_abs_diff_eq!(out.points[0][0], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(out.points[0][1], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(out.points[0][2], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn sync_rejects_scaled_rotation() {
        let mut pose = RigidTransform::identity();
        pose.rotation[0][0] = 1.1;
        let f = frame(vec![[0.0; 3]], pose);
        assert!(matches!(
            sync_to_frame(&f, &RigidTransform::identity()),
            Err(Error::InvalidPose { .. })
        ));
        let f = frame(vec![[0.0; 3]], RigidTransform::identity());
        assert!(sync_to_frame(&f, &pose).is_err());
    }

    #[test]
    fn crop_half_open() {
        let spec = GridSpec::full_range();
        let f = frame(
            vec![[0.0, 0.0, 0.0], [33.0, 0.0, 0.0], [0.0, 0.0, 2.0], [-32.0, -32.0, -3.0]],
            RigidTransform::identity(),
        );
        let out = crop(&f, &spec);
        assert_eq!(out.points, vec![[0.0, 0.0, 0.0], [-32.0, -32.0, -3.0]]);
    }

    #[test]
    fn desk_dims() {
        assert_eq!(GridSpec::desk().dims(), (64, 64, 13));
        assert_eq!(GridSpec::full_range().dims(), (256, 256, 13));
        GridSpec::desk().validate().unwrap();
        let mut bad = GridSpec::desk();
        bad.cell_z = 0.0;
        assert!(bad.validate().is_err());
        bad = GridSpec::desk();
        bad.x_range = (1.0, 1.0);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn voxelize_single_and_duplicate() {
        let spec = GridSpec::desk();
        let c = spec.center(10, 20);
        let z = -3.0 + 0.4 * 5.5;
        let g = voxelize(&frame(vec![[c[0], c[1], z]], RigidTransform::identity()), &spec);
        assert_eq!(g.count(), 1);
        assert!(g.occupancy[(10, 20, 5)]);
        let g2 = voxelize(
            &frame(
                vec![[c[0], c[1], z], [c[0] + 0.05, c[1] - 0.05, z + 0.1]],
                RigidTransform::identity(),
            ),
            &spec,
        );
        assert_eq!(g2.count(), 1);
    }

    #[test]
    fn pillarize_cases() {
        let spec = GridSpec::desk();
        let empty = voxelize(&frame(vec![], RigidTransform::identity()), &spec);
        assert!(pillarize(&empty).is_empty());

        let c = spec.center(3, 4);
        let column: Vec<_> = (0..13).map(|k| [c[0], c[1], -3.0 + 0.4 * (k as f64 + 0.25)]).collect();
        let g = voxelize(&frame(column, RigidTransform::identity()), &spec);
        assert_eq!(g.count(), 13);
        let p = pillarize(&g);
        assert_eq!(p.cells, vec![(3, 4)]);
        assert_eq!(p.centers, vec![c]);
    }

    fn arb_point() -> impl Strategy<Value = [f64; 3]> {
        (-9.0..9.0f64, -9.0..9.0f64, -3.5..2.5f64).prop_map(|(x, y, z)| [x, y, z])
    }

    proptest! {
        #[test]
        fn sync_round_trips(
            pts in prop::collection::vec(arb_point(), 1..20),
            yaw_a in -3.0..3.0f64, yaw_b in -3.0..3.0f64,
            ta in prop::array::uniform3(-50.0..50.0f64),
            tb in prop::array::uniform3(-50.0..50.0f64),
        ) {
            let f = frame(pts.clone(), RigidTransform::from_yaw_translation(yaw_a, ta));
            let p = RigidTransform::from_yaw_translation(yaw_b, tb);
            let back = sync_to_frame(&sync_to_frame(&f, &p).unwrap(), &f.pose).unwrap();
            for (a, b) in pts.iter().zip(&back.points) {
                for k in 0..3 {
                    prop_assert!((a[k] - b[k]).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn pillars_ignore_height_and_order(
            mut pts in prop::collection::vec(arb_point(), 0..60),
            seed in any::<u64>(),
        ) {
            let spec = GridSpec::desk();
            let pillars = pillarize(&voxelize(&crop(&frame(pts.clone(), RigidTransform::identity()), &spec), &spec));
            let flat: Vec<_> = pts
                .iter()
                .filter(|p| spec.contains(**p))
                .map(|p| [p[0], p[1], spec.z_range.0])
                .collect();
            let flat_pillars = pillarize(&voxelize(&frame(flat, RigidTransform::identity()), &spec));
            prop_assert_eq!(&pillars.occupancy, &flat_pillars.occupancy);

            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let count = voxelize(&frame(pts.clone(), RigidTransform::identity()), &spec).count();
            pts.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let shuffled = voxelize(&frame(pts.clone(), RigidTransform::identity()), &spec);
            prop_assert_eq!(shuffled.count(), count);
            prop_assert_eq!(&pillars_of(&frame(pts, RigidTransform::identity()), &spec), &pillars);
        }
    }
}
