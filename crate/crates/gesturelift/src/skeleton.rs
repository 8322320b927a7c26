//! Kinematic model and conversions between raw joint coordinates, the
//! directional-vector pose representation, and 2D projections.
//!
//! A pose is stored as one unit vector per bone (parent joint to child
//! joint), centered on the root. This makes poses invariant to global
//! translation and to bone lengths. A "2D" pose is the same sequence with
//! the depth component (index 2) dropped and no renormalization, so 2D
//! vector norms may be anywhere in [0, 1].

use thiserror::Error;

/// Tolerance for the unit-norm invariant of 3D directional vectors.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Errors produced by skeleton conversions.
#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error("bone {bone} has length {length:.3e} below minimum in frame {frame}")]
    ZeroBoneLength { frame: usize, bone: usize, length: f64 },
    #[error("expected dims={expected}, got dims={got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("invalid pose data: {0}")]
    InvalidData(String),
}

/// Tree of joints. Exactly one root; every other joint has one parent.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTopology {
    parent_of: Vec<Option<usize>>,
    root_index: usize,
    /// Child joint index of each bone, in joint-index order.
    bone_children: Vec<usize>,
}

impl SkeletonTopology {
    /// Builds a topology from a parent table. `parent_of[j]` is `None`
    /// exactly for the root joint.
    pub fn new(parent_of: Vec<Option<usize>>) -> Result<Self, SkeletonError> {
        let n = parent_of.len();
        if n < 2 {
            return Err(SkeletonError::InvalidTopology(
                "need at least two joints".into(),
            ));
        }
        let roots: Vec<usize> = (0..n).filter(|&j| parent_of[j].is_none()).collect();
        if roots.len() != 1 {
            return Err(SkeletonError::InvalidTopology(format!(
                "expected exactly one root, found {}",
                roots.len()
            )));
        }
        let root_index = roots[0];
        // Every joint must reach the root without cycles.
        for start in 0..n {
            let mut j = start;
            let mut hops = 0;
            while let Some(p) = parent_of[j] {
                if p >= n {
                    return Err(SkeletonError::InvalidTopology(format!(
                        "joint {j} has out-of-range parent {p}"
                    )));
                }
                j = p;
                hops += 1;
                if hops > n {
                    return Err(SkeletonError::InvalidTopology(format!(
                        "cycle detected through joint {start}"
                    )));
                }
            }
            if j != root_index {
                return Err(SkeletonError::InvalidTopology(format!(
                    "joint {start} does not reach the root"
                )));
            }
        }
        let bone_children = (0..n).filter(|&j| j != root_index).collect();
        Ok(Self { parent_of, root_index, bone_children })
    }

    /// Default upper-body topology: root/pelvis, spine, neck, head and
    /// shoulder-elbow-wrist chains for both arms. 10 joints, 9 bones.
    pub fn default_upper_body() -> Self {
        // 0 root, 1 spine, 2 neck, 3 head,
        // 4 l_shoulder, 5 l_elbow, 6 l_wrist,
        // 7 r_shoulder, 8 r_elbow, 9 r_wrist
        let parents = vec![
            None,
            Some(0),
            Some(1),
            Some(2),
            Some(2),
            Some(4),
            Some(5),
            Some(2),
            Some(7),
            Some(8),
        ];
        Self::new(parents).expect("default topology is a valid tree")
    }

    pub fn joint_count(&self) -> usize {
        self.parent_of.len()
    }

    pub fn bone_count(&self) -> usize {
        self.parent_of.len() - 1
    }

    pub fn root_index(&self) -> usize {
        self.root_index
    }

    pub fn parent_of(&self, joint: usize) -> Option<usize> {
        self.parent_of[joint]
    }

    /// Bones as (child joint, parent joint), in bone-index order.
    pub fn bones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bone_children
            .iter()
            .map(move |&c| (c, self.parent_of[c].expect("non-root joint has parent")))
    }

    /// Joint indices ordered so every parent precedes its children.
    pub fn topological_order(&self) -> Vec<usize> {
        let n = self.joint_count();
        let mut order = Vec::with_capacity(n);
        let mut placed = vec![false; n];
        order.push(self.root_index);
        placed[self.root_index] = true;
        while order.len() < n {
            for j in 0..n {
                if placed[j] {
                    continue;
                }
                if let Some(p) = self.parent_of[j] {
                    if placed[p] {
                        order.push(j);
                        placed[j] = true;
                    }
                }
            }
        }
        order
    }
}

/// Fixed-length sequence of poses in directional-vector form.
///
/// Data layout is frame-major: `data[frame][bone][dim]` flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    frames: usize,
    bone_count: usize,
    dims: usize,
    fps: f64,
    data: Vec<f64>,
}

impl PoseSequence {
    /// Paper-scale default sequence length.
    pub const DEFAULT_FRAMES: usize = 34;
    /// Paper-scale default frame rate.
    pub const DEFAULT_FPS: f64 = 15.0;

    pub fn new(
        frames: usize,
        bone_count: usize,
        dims: usize,
        fps: f64,
        data: Vec<f64>,
    ) -> Result<Self, SkeletonError> {
        if dims != 2 && dims != 3 {
            return Err(SkeletonError::InvalidData(format!("dims must be 2 or 3, got {dims}")));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(SkeletonError::InvalidData(format!("fps must be positive, got {fps}")));
        }
        if data.len() != frames * bone_count * dims {
            return Err(SkeletonError::InvalidData(format!(
                "data length {} does not match {frames}x{bone_count}x{dims}",
                data.len()
            )));
        }
        Ok(Self { frames, bone_count, dims, fps, data })
    }

    pub fn zeros(frames: usize, bone_count: usize, dims: usize, fps: f64) -> Self {
        Self::new(frames, bone_count, dims, fps, vec![0.0; frames * bone_count * dims])
            .expect("zeros construction is valid")
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bone_count(&self) -> usize {
        self.bone_count
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn duration_seconds(&self) -> f64 {
        self.frames as f64 / self.fps
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Directional vector of `bone` at `frame`.
    pub fn vector(&self, frame: usize, bone: usize) -> &[f64] {
        let start = (frame * self.bone_count + bone) * self.dims;
        &self.data[start..start + self.dims]
    }

    pub fn vector_mut(&mut self, frame: usize, bone: usize) -> &mut [f64] {
        let start = (frame * self.bone_count + bone) * self.dims;
        &mut self.data[start..start + self.dims]
    }

    /// Checks the directional-representation invariant: for 3D every vector
    /// has unit norm within [`UNIT_NORM_TOL`]; for 2D every norm is at most
    /// `1 + UNIT_NORM_TOL`.
    pub fn is_directional(&self) -> bool {
        for f in 0..self.frames {
            for b in 0..self.bone_count {
                let n = norm(self.vector(f, b));
                let ok = if self.dims == 3 {
                    (n - 1.0).abs() <= UNIT_NORM_TOL
                } else {
                    n <= 1.0 + UNIT_NORM_TOL
                };
                if !ok {
                    return false;
                }
            }
        }
        true
    }

    /// Rescales every vector to unit length. Vectors with norm below
    /// `1e-12` are left untouched.
    pub fn renormalize(&mut self) {
        let dims = self.dims;
        for chunk in self.data.chunks_mut(dims) {
            let n = norm(chunk);
            if n > 1e-12 {
                for v in chunk.iter_mut() {
                    *v /= n;
                }
            }
        }
    }
}

/// Sequence of absolute joint positions, in arbitrary length units.
///
/// Layout is frame-major: `data[frame][joint][xyz]` flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct RawJointSequence {
    frames: usize,
    joint_count: usize,
    fps: f64,
    data: Vec<f64>,
}

impl RawJointSequence {
    pub fn new(
        frames: usize,
        joint_count: usize,
        fps: f64,
        data: Vec<f64>,
    ) -> Result<Self, SkeletonError> {
        if data.len() != frames * joint_count * 3 {
            return Err(SkeletonError::InvalidData(format!(
                "data length {} does not match {frames}x{joint_count}x3",
                data.len()
            )));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(SkeletonError::InvalidData(format!("fps must be positive, got {fps}")));
        }
        Ok(Self { frames, joint_count, fps, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn position(&self, frame: usize, joint: usize) -> &[f64] {
        let start = (frame * self.joint_count + joint) * 3;
        &self.data[start..start + 3]
    }

    pub fn position_mut(&mut self, frame: usize, joint: usize) -> &mut [f64] {
        let start = (frame * self.joint_count + joint) * 3;
        &mut self.data[start..start + 3]
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Converts absolute joint positions to unit directional bone vectors.
///
/// Fails with [`SkeletonError::ZeroBoneLength`] if any bone is shorter than
/// `1e-12` in any frame. The result is independent of global translation
/// and uniform scaling of the input.
pub fn to_directional(
    raw: &RawJointSequence,
    topo: &SkeletonTopology,
) -> Result<PoseSequence, SkeletonError> {
    if raw.joint_count() != topo.joint_count() {
        return Err(SkeletonError::InvalidData(format!(
            "raw has {} joints, topology has {}",
            raw.joint_count(),
            topo.joint_count()
        )));
    }
    let mut out = PoseSequence::zeros(raw.frames(), topo.bone_count(), 3, raw.fps());
    for f in 0..raw.frames() {
        for (b, (child, parent)) in topo.bones().enumerate() {
            let c = raw.position(f, child);
            let p = raw.position(f, parent);
            let d = [c[0] - p[0], c[1] - p[1], c[2] - p[2]];
            let len = norm(&d);
            if len < 1e-12 {
                return Err(SkeletonError::ZeroBoneLength { frame: f, bone: b, length: len });
            }
            let v = out.vector_mut(f, b);
            v[0] = d[0] / len;
            v[1] = d[1] / len;
            v[2] = d[2] / len;
        }
    }
    Ok(out)
}

/// Reconstructs absolute joint positions from directional vectors, with the
/// root at the origin and the given bone lengths.
pub fn from_directional(
    seq: &PoseSequence,
    topo: &SkeletonTopology,
    bone_lengths: &[f64],
) -> Result<RawJointSequence, SkeletonError> {
    if seq.dims() != 3 {
        return Err(SkeletonError::DimensionMismatch { expected: 3, got: seq.dims() });
    }
    if seq.bone_count() != topo.bone_count() {
        return Err(SkeletonError::InvalidData(format!(
            "sequence has {} bones, topology has {}",
            seq.bone_count(),
            topo.bone_count()
        )));
    }
    if bone_lengths.len() != topo.bone_count() {
        return Err(SkeletonError::InvalidData(format!(
            "got {} bone lengths for {} bones",
            bone_lengths.len(),
            topo.bone_count()
        )));
    }
    for (b, &len) in bone_lengths.iter().enumerate() {
        if !(len.is_finite() && len > 0.0) {
            return Err(SkeletonError::ZeroBoneLength { frame: 0, bone: b, length: len });
        }
    }
    // bone index of each non-root joint
    let mut bone_of_joint = vec![usize::MAX; topo.joint_count()];
    for (b, (child, _)) in topo.bones().enumerate() {
        bone_of_joint[child] = b;
    }
    let order = topo.topological_order();
    let mut raw = RawJointSequence::new(
        seq.frames(),
        topo.joint_count(),
        seq.fps(),
        vec![0.0; seq.frames() * topo.joint_count() * 3],
    )?;
    for f in 0..seq.frames() {
        for &j in &order {
            if j == topo.root_index() {
                continue;
            }
            let p = topo.parent_of(j).expect("non-root joint has parent");
            let b = bone_of_joint[j];
            let dir = seq.vector(f, b);
            let parent_pos = {
                let pp = raw.position(f, p);
                [pp[0], pp[1], pp[2]]
            };
            let len = bone_lengths[b];
            let pos = raw.position_mut(f, j);
            pos[0] = parent_pos[0] + len * dir[0];
            pos[1] = parent_pos[1] + len * dir[1];
            pos[2] = parent_pos[2] + len * dir[2];
        }
    }
    Ok(raw)
}

/// Drops the depth component (index 2) of every vector. No renormalization,
/// so a pure-depth vector projects to the zero vector.
pub fn project_2d(seq: &PoseSequence) -> Result<PoseSequence, SkeletonError> {
    if seq.dims() != 3 {
        return Err(SkeletonError::DimensionMismatch { expected: 3, got: seq.dims() });
    }
    let mut out = PoseSequence::zeros(seq.frames(), seq.bone_count(), 2, seq.fps());
    for f in 0..seq.frames() {
        for b in 0..seq.bone_count() {
            let src = seq.vector(f, b);
            let dst = out.vector_mut(f, b);
            dst[0] = src[0];
            dst[1] = src[1];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain_topology(joints: usize) -> SkeletonTopology {
        let parents = (0..joints)
            .map(|j| if j == 0 { None } else { Some(j - 1) })
            .collect();
        SkeletonTopology::new(parents).unwrap()
    }

    fn random_raw(joints: usize, frames: usize, seed: u64) -> RawJointSequence {
        // Joint positions sampled so that no two connected joints coincide.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![0.0; frames * joints * 3];
        for f in 0..frames {
            for j in 0..joints {
                for d in 0..3 {
                    data[(f * joints + j) * 3 + d] =
                        (j as f64 + 1.0) * 0.7 + rng.gen_range(-0.3..0.3) + d as f64 * 0.11;
                }
            }
        }
        RawJointSequence::new(frames, joints, 15.0, data).unwrap()
    }

    #[test]
    fn default_topology_has_ten_joints_nine_bones() {
        let topo = SkeletonTopology::default_upper_body();
        assert_eq!(topo.joint_count(), 10);
        assert_eq!(topo.bone_count(), 9);
        assert_eq!(topo.root_index(), 0);
    }

    #[test]
    fn topology_rejects_cycles_and_multi_roots() {
        // two roots
        assert!(SkeletonTopology::new(vec![None, None, Some(0)]).is_err());
        // cycle: 1 -> 2 -> 1
        assert!(SkeletonTopology::new(vec![None, Some(2), Some(1)]).is_err());
        // no root
        assert!(SkeletonTopology::new(vec![Some(1), Some(0)]).is_err());
    }

    #[test]
    fn collinear_chain_gives_unit_x_vectors() {
        let topo = chain_topology(4);
        let mut data = vec![0.0; 2 * 4 * 3];
        for f in 0..2 {
            for j in 0..4 {
                data[(f * 4 + j) * 3] = j as f64; // unit spacing along +x
            }
        }
        let raw = RawJointSequence::new(2, 4, 15.0, data).unwrap();
        let seq = to_directional(&raw, &topo).unwrap();
        for f in 0..2 {
            for b in 0..3 {
                assert_eq!(seq.vector(f, b), &[1.0, 0.0, 0.0]);
            }
        }
    }

    #[test]
    fn scaling_raw_does_not_change_directions() {
        let topo = chain_topology(5);
        let raw = random_raw(5, 3, 42);
        let mut scaled = raw.clone();
        for f in 0..3 {
            for j in 0..5 {
                for v in scaled.position_mut(f, j) {
                    *v *= 2.0;
                }
            }
        }
        let a = to_directional(&raw, &topo).unwrap();
        let b = to_directional(&scaled, &topo).unwrap();
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn directions_match_per_bone_oracle() {
        // Independent oracle: recompute (child - parent) / norm per frame.
        let topo = SkeletonTopology::default_upper_body();
        let raw = random_raw(10, 6, 7);
        let seq = to_directional(&raw, &topo).unwrap();
        for f in 0..6 {
            for (b, (child, parent)) in topo.bones().enumerate() {
                let c = raw.position(f, child);
                let p = raw.position(f, parent);
                let d = [c[0] - p[0], c[1] - p[1], c[2] - p[2]];
                let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                for k in 0..3 {
                    assert!((seq.vector(f, b)[k] - d[k] / n).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn zero_bone_length_is_rejected() {
        let topo = chain_topology(3);
        // all joints coincide
        let raw = RawJointSequence::new(1, 3, 15.0, vec![1.0; 9]).unwrap();
        match to_directional(&raw, &topo) {
            Err(SkeletonError::ZeroBoneLength { .. }) => {}
            other => panic!("expected ZeroBoneLength, got {other:?}"),
        }
    }

    #[test]
    fn from_directional_vertical_chain() {
        let topo = chain_topology(4);
        let mut seq = PoseSequence::zeros(2, 3, 3, 15.0);
        for f in 0..2 {
            for b in 0..3 {
                seq.vector_mut(f, b)[1] = 1.0; // all (0,1,0)
            }
        }
        let raw = from_directional(&seq, &topo, &[1.0, 1.0, 1.0]).unwrap();
        for f in 0..2 {
            for j in 0..4 {
                assert_eq!(raw.position(f, j), &[0.0, j as f64, 0.0]);
            }
        }
    }

    #[test]
    fn from_directional_rejects_bad_inputs() {
        let topo = chain_topology(3);
        let seq2d = PoseSequence::zeros(1, 2, 2, 15.0);
        assert!(matches!(
            from_directional(&seq2d, &topo, &[1.0, 1.0]),
            Err(SkeletonError::DimensionMismatch { .. })
        ));
        let seq3d = PoseSequence::zeros(1, 2, 3, 15.0);
        assert!(matches!(
            from_directional(&seq3d, &topo, &[1.0, 0.0]),
            Err(SkeletonError::ZeroBoneLength { .. })
        ));
    }

    #[test]
    fn round_trip_is_identity_on_directional_sequences() {
        let topo = SkeletonTopology::default_upper_body();
        let raw = random_raw(10, 8, 99);
        let seq = to_directional(&raw, &topo).unwrap();
        let lengths: Vec<f64> = (0..9).map(|b| 0.5 + 0.1 * b as f64).collect();
        let rebuilt = from_directional(&seq, &topo, &lengths).unwrap();
        let seq2 = to_directional(&rebuilt, &topo).unwrap();
        for (a, b) in seq.data().iter().zip(seq2.data().iter()) {
            assert!((a - b).abs() < 1e-9, "round trip deviates: {a} vs {b}");
        }
    }

    #[test]
    fn project_preserves_xy_and_handles_pure_depth() {
        let mut seq = PoseSequence::zeros(1, 2, 3, 15.0);
        seq.vector_mut(0, 0).copy_from_slice(&[0.6, 0.8, 0.0]);
        seq.vector_mut(0, 1).copy_from_slice(&[0.0, 0.0, 1.0]);
        let flat = project_2d(&seq).unwrap();
        assert_eq!(flat.vector(0, 0), &[0.6, 0.8]);
        let n0 = (0.6f64 * 0.6 + 0.8 * 0.8).sqrt();
        assert!((n0 - 1.0).abs() < 1e-12);
        assert_eq!(flat.vector(0, 1), &[0.0, 0.0]);
        assert!(matches!(
            project_2d(&flat),
            Err(SkeletonError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn projection_norms_bounded_by_one_on_unit_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seq = PoseSequence::zeros(20, 9, 3, 15.0);
        for f in 0..20 {
            for b in 0..9 {
                let v: [f64; 3] = [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-9);
                seq.vector_mut(f, b).copy_from_slice(&[v[0] / n, v[1] / n, v[2] / n]);
            }
        }
        assert!(seq.is_directional());
        let flat = project_2d(&seq).unwrap();
        for f in 0..20 {
            for b in 0..9 {
                let p = flat.vector(f, b);
                let n2 = (p[0] * p[0] + p[1] * p[1]).sqrt();
                assert!(n2 <= 1.0 + 1e-12);
                let z = seq.vector(f, b)[2];
                if z == 0.0 {
                    assert!((n2 - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn translation_invariance(seed in 0u64..1000, dx in -5.0f64..5.0, dy in -5.0f64..5.0, dz in -5.0f64..5.0) {
            let topo = chain_topology(4);
            let raw = random_raw(4, 3, seed);
            let mut shifted = raw.clone();
            for f in 0..3 {
                for j in 0..4 {
                    let p = shifted.position_mut(f, j);
                    p[0] += dx;
                    p[1] += dy;
                    p[2] += dz;
                }
            }
            let a = to_directional(&raw, &topo).unwrap();
            let b = to_directional(&shifted, &topo).unwrap();
            for (x, y) in a.data().iter().zip(b.data().iter()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn scale_invariance(seed in 0u64..1000, s in 0.01f64..100.0) {
            let topo = chain_topology(4);
            let raw = random_raw(4, 2, seed);
            let mut scaled = raw.clone();
            for f in 0..2 {
                for j in 0..4 {
                    for v in scaled.position_mut(f, j) {
                        *v *= s;
                    }
                }
            }
            let a = to_directional(&raw, &topo).unwrap();
            let b = to_directional(&scaled, &topo).unwrap();
            for (x, y) in a.data().iter().zip(b.data().iter()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn projection_never_increases_norm(seed in 0u64..1000) {
            let topo = chain_topology(5);
            let raw = random_raw(5, 4, seed);
            let seq = to_directional(&raw, &topo).unwrap();
            let flat = project_2d(&seq).unwrap();
            for f in 0..4 {
                for b in 0..4 {
                    let v3 = seq.vector(f, b);
                    let v2 = flat.vector(f, b);
                    let n3 = (v3[0]*v3[0] + v3[1]*v3[1] + v3[2]*v3[2]).sqrt();
                    let n2 = (v2[0]*v2[0] + v2[1]*v2[1]).sqrt();
                    prop_assert!(n2 <= n3 + 1e-12);
                }
            }
        }
    }
}
