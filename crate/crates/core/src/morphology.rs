//! Module geometry, attachment ports, kinematic-tree construction, random
//! morphology sampling, and connected-cluster queries.
//!
//! A robot is a tree of identical two-link modules. Each module has a base
//! link carrying the hinge servo and a swing link; modules dock at discrete
//! ports with one of four roll orientations about the port normal.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;

use crate::math::{vec3, Quat, Transform, Vec3};
use crate::rng;

/// Which link of a module owns an attachment port.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum OwnerLink {
    Base,
    Swing,
}

/// A docking location on a module. The port frame's +z axis is the outward
/// normal; mating ports meet normal-to-normal.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttachmentPort {
    pub owner_link: OwnerLink,
    pub frame: Transform,
}

/// Geometry and actuation parameters shared by every module instance.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModuleSpec {
    /// Half extents of the base link box, metres.
    pub base_link_half_extents: Vec3,
    /// Half extents of the swing link box, metres.
    pub swing_link_half_extents: Vec3,
    /// Mass of each link, kg.
    pub link_mass: f64,
    /// Hinge axis in the base-link frame (unit).
    pub hinge_axis: Vec3,
    /// Symmetric joint limit, radians.
    pub joint_limit: f64,
    pub port_list: Vec<AttachmentPort>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MorphologyError {
    InvalidSpec(&'static str),
    /// 100 consecutive samples interpenetrated; the module geometry is
    /// degenerate for this port layout.
    GenerationFailure,
    NotATree,
    PortConflict,
    MaskLengthMismatch,
}

impl fmt::Display for MorphologyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MorphologyError::InvalidSpec(msg) => write!(f, "invalid module spec: {msg}"),
            MorphologyError::GenerationFailure => {
                write!(f, "morphology generation failed: 100 consecutive samples interpenetrate")
            }
            MorphologyError::NotATree => write!(f, "attachments do not form a tree"),
            MorphologyError::PortConflict => write!(f, "a port is used by more than one attachment"),
            MorphologyError::MaskLengthMismatch => write!(f, "connectivity mask length mismatch"),
        }
    }
}

impl ModuleSpec {
    pub fn validate(&self) -> Result<(), MorphologyError> {
        let he = [
            self.base_link_half_extents,
            self.swing_link_half_extents,
        ];
        if he.iter().any(|h| h.x <= 0.0 || h.y <= 0.0 || h.z <= 0.0) {
            return Err(MorphologyError::InvalidSpec("half extents must be positive"));
        }
        if self.link_mass <= 0.0 {
            return Err(MorphologyError::InvalidSpec("link mass must be positive"));
        }
        if libm::fabs(self.hinge_axis.norm() - 1.0) > 1e-9 {
            return Err(MorphologyError::InvalidSpec("hinge axis must be unit"));
        }
        if !(self.joint_limit > 0.0 && self.joint_limit <= core::f64::consts::PI) {
            return Err(MorphologyError::InvalidSpec("joint limit must be in (0, pi]"));
        }
        for p in &self.port_list {
            if libm::fabs(p.frame.rotation.norm() - 1.0) > 1e-9 {
                return Err(MorphologyError::InvalidSpec("port orientation must be unit"));
            }
        }
        Ok(())
    }

    /// Hinge anchor point in the base-link frame (centre of the hinge face).
    pub fn hinge_anchor(&self) -> Vec3 {
        vec3(self.base_link_half_extents.x, 0.0, 0.0)
    }

    /// Swing-link centre offset from the hinge anchor at zero joint angle,
    /// in the base-link frame. The swing link hangs so both link undersides
    /// are flush, letting a module rest flat on the ground.
    pub fn swing_offset(&self) -> Vec3 {
        vec3(
            self.swing_link_half_extents.x,
            0.0,
            -(self.base_link_half_extents.z - self.swing_link_half_extents.z),
        )
    }

    /// Pose of the swing link relative to the base link at a joint angle.
    pub fn swing_in_base(&self, angle: f64) -> Transform {
        let rot = Quat::from_axis_angle(self.hinge_axis, angle);
        Transform::new(rot, self.hinge_anchor() + rot.rotate(self.swing_offset()))
    }
}

impl Default for ModuleSpec {
    /// Desk-scale proxy geometry, comparable to small hobby-servo modules.
    /// The hinge face is +x of the base link; the swing link extends along +x.
    fn default() -> Self {
        let base = vec3(0.05, 0.03, 0.03);
        let swing = vec3(0.06, 0.025, 0.025);
        let face_port = |owner, normal: Vec3, offset: Vec3| AttachmentPort {
            owner_link: owner,
            frame: Transform::new(rotation_z_to(normal), offset),
        };
        // 5 ports on the base link (every face except the +x hinge face),
        // 1 port on the swing-link tip.
        let port_list = vec![
            face_port(OwnerLink::Base, -Vec3::X, vec3(-base.x, 0.0, 0.0)),
            face_port(OwnerLink::Base, Vec3::Y, vec3(0.0, base.y, 0.0)),
            face_port(OwnerLink::Base, -Vec3::Y, vec3(0.0, -base.y, 0.0)),
            face_port(OwnerLink::Base, Vec3::Z, vec3(0.0, 0.0, base.z)),
            face_port(OwnerLink::Base, -Vec3::Z, vec3(0.0, 0.0, -base.z)),
            face_port(OwnerLink::Swing, Vec3::X, vec3(swing.x, 0.0, 0.0)),
        ];
        ModuleSpec {
            base_link_half_extents: base,
            swing_link_half_extents: swing,
            link_mass: 0.25,
            hinge_axis: Vec3::Y,
            joint_limit: core::f64::consts::FRAC_PI_2,
            port_list,
        }
    }
}

/// Shortest rotation taking +z to the given unit direction.
fn rotation_z_to(dir: Vec3) -> Quat {
    let z = Vec3::Z;
    let d = z.dot(dir);
    if d > 1.0 - 1e-12 {
        return Quat::IDENTITY;
    }
    if d < -1.0 + 1e-12 {
        return Quat::from_axis_angle(Vec3::X, core::f64::consts::PI);
    }
    let axis = z.cross(dir);
    Quat::from_axis_angle(axis, libm::acos(d)).normalized()
}

/// One docked connection between two modules. `roll` is the discrete
/// orientation about the shared port normal, in quarter turns (0..4).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Attachment {
    pub parent_module: usize,
    pub parent_port: usize,
    pub child_module: usize,
    pub child_port: usize,
    pub roll: u8,
}

/// A tree of modules. Index 0 is the root; attachment order is fixed at
/// construction and indexes the [`ConnectivityMask`].
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Morphology {
    pub modules: Vec<ModuleSpec>,
    pub attachments: Vec<Attachment>,
}

/// Which attachments are still welded; one bool per attachment.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConnectivityMask {
    pub active: Vec<bool>,
}

impl ConnectivityMask {
    pub fn all_active(n_attachments: usize) -> Self {
        ConnectivityMask {
            active: vec![true; n_attachments],
        }
    }

    pub fn n_active(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }
}

/// World pose of both links of every module.
#[derive(Debug, Clone)]
pub struct RestPose {
    /// `(base, swing)` transform per module.
    pub links: Vec<(Transform, Transform)>,
}

pub const N_MAX: usize = 4;

impl Morphology {
    pub fn n_modules(&self) -> usize {
        self.modules.len()
    }

    pub fn n_attachments(&self) -> usize {
        self.attachments.len()
    }

    pub fn spec(&self) -> &ModuleSpec {
        &self.modules[0]
    }

    pub fn validate(&self) -> Result<(), MorphologyError> {
        for m in &self.modules {
            m.validate()?;
        }
        let n = self.n_modules();
        if self.attachments.len() != n - 1 {
            return Err(MorphologyError::NotATree);
        }
        // Union-find connectivity check; n-1 edges + connected => tree.
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for a in &self.attachments {
            if a.parent_module >= n || a.child_module >= n {
                return Err(MorphologyError::NotATree);
            }
            let (ra, rb) = (find(&mut parent, a.parent_module), find(&mut parent, a.child_module));
            if ra == rb {
                return Err(MorphologyError::NotATree);
            }
            parent[ra] = rb;
        }
        // Each (module, port) used at most once.
        let mut used: Vec<(usize, usize)> = Vec::new();
        for a in &self.attachments {
            for key in [(a.parent_module, a.parent_port), (a.child_module, a.child_port)] {
                if used.contains(&key) {
                    return Err(MorphologyError::PortConflict);
                }
                used.push(key);
            }
        }
        Ok(())
    }

    /// Link poses at zero joint angles with the root base link at identity.
    pub fn rest_pose(&self) -> RestPose {
        let n = self.n_modules();
        let mut links: Vec<Option<(Transform, Transform)>> = vec![None; n];
        let root_base = Transform::IDENTITY;
        links[0] = Some((root_base, root_base.compose(&self.modules[0].swing_in_base(0.0))));
        // Attachments were built parent-before-child, so one pass resolves
        // the tree in order.
        let mut remaining: Vec<&Attachment> = self.attachments.iter().collect();
        while !remaining.is_empty() {
            let before = remaining.len();
            remaining.retain(|a| {
                let Some((parent_base, parent_swing)) = links[a.parent_module] else {
                    return true;
                };
                let spec_p = &self.modules[a.parent_module];
                let spec_c = &self.modules[a.child_module];
                let port_p = &spec_p.port_list[a.parent_port];
                let port_c = &spec_c.port_list[a.child_port];
                let owner = match port_p.owner_link {
                    OwnerLink::Base => parent_base,
                    OwnerLink::Swing => parent_swing,
                };
                let child_base = child_base_from_port(owner, port_p, port_c, a.roll, spec_c);
                let child_swing = child_base.compose(&spec_c.swing_in_base(0.0));
                links[a.child_module] = Some((child_base, child_swing));
                false
            });
            debug_assert!(remaining.len() < before, "attachment tree is not resolvable");
            if remaining.len() == before {
                break;
            }
        }
        RestPose {
            links: links.into_iter().map(|l| l.expect("tree resolved")).collect(),
        }
    }

    /// World frame of the shared docking interface for an attachment,
    /// anchored on the parent side, in a given pose.
    pub fn attachment_frame(&self, pose: &RestPose, idx: usize) -> Transform {
        let a = &self.attachments[idx];
        let port = &self.modules[a.parent_module].port_list[a.parent_port];
        let (base, swing) = pose.links[a.parent_module];
        let owner = match port.owner_link {
            OwnerLink::Base => base,
            OwnerLink::Swing => swing,
        };
        owner.compose(&port.frame)
    }
}

/// Pose of the child base link given the world frame of the parent's port
/// owner link. Ports mate face-to-face: the child port normal opposes the
/// parent port normal, rolled in quarter turns about it.
fn child_base_from_port(
    owner_world: Transform,
    parent_port: &AttachmentPort,
    child_port: &AttachmentPort,
    roll: u8,
    child_spec: &ModuleSpec,
) -> Transform {
    let port_world = owner_world.compose(&parent_port.frame);
    let mate = Transform::new(
        Quat::from_axis_angle(Vec3::Z, roll as f64 * core::f64::consts::FRAC_PI_2)
            .mul_quat(Quat::from_axis_angle(Vec3::X, core::f64::consts::PI)),
        Vec3::ZERO,
    );
    let child_port_world = port_world.compose(&mate);
    let child_link_from_port = match child_port.owner_link {
        OwnerLink::Base => child_port.frame.inverse(),
        OwnerLink::Swing => {
            // The port lives on the swing link; position the base link so the
            // swing link (at zero angle) carries the mated port.
            child_spec
                .swing_in_base(0.0)
                .compose(&child_port.frame)
                .inverse()
        }
    };
    child_port_world.compose(&child_link_from_port)
}

/// Ports of a module not consumed by any attachment.
pub fn free_ports(m: &Morphology, module_index: usize) -> Vec<usize> {
    (0..m.modules[module_index].port_list.len())
        .filter(|p| {
            !m.attachments.iter().any(|a| {
                (a.parent_module == module_index && a.parent_port == *p)
                    || (a.child_module == module_index && a.child_port == *p)
            })
        })
        .collect()
}

/// Vertex set of the largest connected component of the attachment graph
/// restricted to active edges. Ties prefer the component containing the
/// lowest module index.
pub fn largest_connected_cluster(m: &Morphology, mask: &ConnectivityMask) -> Vec<usize> {
    assert_eq!(mask.active.len(), m.n_attachments(), "mask length mismatch");
    let n = m.n_modules();
    let mut comp = vec![usize::MAX; n];
    let mut n_comp = 0;
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = n_comp;
        n_comp += 1;
        let mut stack = vec![start];
        comp[start] = id;
        while let Some(v) = stack.pop() {
            for (e, a) in m.attachments.iter().enumerate() {
                if !mask.active[e] {
                    continue;
                }
                let other = if a.parent_module == v {
                    a.child_module
                } else if a.child_module == v {
                    a.parent_module
                } else {
                    continue;
                };
                if comp[other] == usize::MAX {
                    comp[other] = id;
                    stack.push(other);
                }
            }
        }
    }
    // Component ids are assigned in increasing order of their lowest vertex,
    // so a strict size comparison implements the tie-break.
    let mut sizes = vec![0usize; n_comp];
    for &c in &comp {
        sizes[c] += 1;
    }
    let mut best = 0;
    for c in 1..n_comp {
        if sizes[c] > sizes[best] {
            best = c;
        }
    }
    (0..n).filter(|&v| comp[v] == best).collect()
}

/// Morphology restricted to the largest active cluster, with modules
/// reindexed in ascending original order. Returns the reduced tree and the
/// original index of each kept module. Because children always carry higher
/// indices than their parents, the subtree root maps to new index 0.
pub fn reduced_morphology(m: &Morphology, mask: &ConnectivityMask) -> (Morphology, Vec<usize>) {
    let keep = largest_connected_cluster(m, mask);
    let mut new_index = vec![usize::MAX; m.n_modules()];
    for (ni, &oi) in keep.iter().enumerate() {
        new_index[oi] = ni;
    }
    let modules = keep.iter().map(|&i| m.modules[i].clone()).collect();
    let attachments = m
        .attachments
        .iter()
        .enumerate()
        .filter(|(e, a)| {
            mask.active[*e]
                && new_index[a.parent_module] != usize::MAX
                && new_index[a.child_module] != usize::MAX
        })
        .map(|(_, a)| Attachment {
            parent_module: new_index[a.parent_module],
            parent_port: a.parent_port,
            child_module: new_index[a.child_module],
            child_port: a.child_port,
            roll: a.roll,
        })
        .collect();
    let reduced = Morphology {
        modules,
        attachments,
    };
    debug_assert!(reduced.validate().is_ok());
    (reduced, keep)
}

/// Sample a random tree morphology with the default module spec.
///
/// Each new module attaches to a uniformly random free port of a uniformly
/// random existing module, via a uniformly random port of its own, with a
/// uniformly random quarter-turn roll about the port normal. Samples whose
/// rest pose interpenetrates are rejected and redrawn, up to 100 times.
pub fn sample_morphology(rng_seed: u64, n_modules: usize) -> Result<Morphology, MorphologyError> {
    sample_morphology_with_spec(rng_seed, n_modules, &ModuleSpec::default())
}

pub fn sample_morphology_with_spec(
    rng_seed: u64,
    n_modules: usize,
    spec: &ModuleSpec,
) -> Result<Morphology, MorphologyError> {
    assert!((2..=N_MAX).contains(&n_modules), "n_modules out of range");
    spec.validate()?;
    let mut r = rng::stream(rng_seed);
    for _attempt in 0..100 {
        let m = sample_candidate(&mut r, n_modules, spec);
        if let Some(m) = m {
            if !rest_pose_interpenetrates(&m) {
                debug_assert!(m.validate().is_ok());
                return Ok(m);
            }
        }
    }
    Err(MorphologyError::GenerationFailure)
}

fn sample_candidate(r: &mut rng::Stream, n_modules: usize, spec: &ModuleSpec) -> Option<Morphology> {
    let mut m = Morphology {
        modules: vec![spec.clone()],
        attachments: Vec::new(),
    };
    for child in 1..n_modules {
        // Collect (module, port) pairs that are still free.
        let mut open: Vec<(usize, usize)> = Vec::new();
        for module in 0..m.n_modules() {
            for p in free_ports(&m, module) {
                open.push((module, p));
            }
        }
        if open.is_empty() {
            return None;
        }
        // Uniform over existing modules first, then over that module's free
        // ports, matching the sampling contract.
        let with_free: Vec<usize> = (0..m.n_modules())
            .filter(|&i| open.iter().any(|(mi, _)| *mi == i))
            .collect();
        let parent = with_free[r.gen_range(0..with_free.len())];
        let parent_ports: Vec<usize> = open
            .iter()
            .filter(|(mi, _)| *mi == parent)
            .map(|(_, p)| *p)
            .collect();
        let parent_port = parent_ports[r.gen_range(0..parent_ports.len())];
        let child_port = r.gen_range(0..spec.port_list.len());
        let roll = r.gen_range(0..4u8);
        m.modules.push(spec.clone());
        m.attachments.push(Attachment {
            parent_module: parent,
            parent_port,
            child_module: child,
            child_port,
            roll,
        });
    }
    Some(m)
}

/// Rejection check: any two links that are not directly connected (same
/// module's base/swing, or the welded pair of an attachment) must not
/// overlap in the zero-angle rest pose.
fn rest_pose_interpenetrates(m: &Morphology) -> bool {
    let pose = m.rest_pose();
    let n = m.n_modules();
    // Flatten to (module, is_swing, transform, half_extents).
    let mut links = Vec::with_capacity(2 * n);
    for (i, (base, swing)) in pose.links.iter().enumerate() {
        links.push((i, false, *base, m.modules[i].base_link_half_extents));
        links.push((i, true, *swing, m.modules[i].swing_link_half_extents));
    }
    let touching = |a: usize, b: usize| -> bool {
        let (ma, sa, ..) = links[a];
        let (mb, sb, ..) = links[b];
        if ma == mb {
            return true; // base and swing of one module share the hinge
        }
        m.attachments.iter().any(|att| {
            let port = &m.modules[att.parent_module].port_list[att.parent_port];
            let cport = &m.modules[att.child_module].port_list[att.child_port];
            let parent_is_swing = port.owner_link == OwnerLink::Swing;
            let child_is_swing = cport.owner_link == OwnerLink::Swing;
            (att.parent_module == ma
                && sa == parent_is_swing
                && att.child_module == mb
                && sb == child_is_swing)
                || (att.parent_module == mb
                    && sb == parent_is_swing
                    && att.child_module == ma
                    && sa == child_is_swing)
        })
    };
    for a in 0..links.len() {
        for b in (a + 1)..links.len() {
            if touching(a, b) {
                continue;
            }
            if obb_overlap(&links[a].2, links[a].3, &links[b].2, links[b].3) {
                return true;
            }
        }
    }
    false
}

/// Separating-axis test for two oriented boxes, shrunk by a small margin so
/// exactly-touching faces do not count as interpenetration.
fn obb_overlap(ta: &Transform, ha: Vec3, tb: &Transform, hb: Vec3) -> bool {
    const MARGIN: f64 = 1e-6;
    let ra = ta.rotation.to_mat3();
    let rb = tb.rotation.to_mat3();
    let d = tb.translation - ta.translation;
    let axes_a = [ra.col(0), ra.col(1), ra.col(2)];
    let axes_b = [rb.col(0), rb.col(1), rb.col(2)];
    let ha_arr = [ha.x - MARGIN, ha.y - MARGIN, ha.z - MARGIN];
    let hb_arr = [hb.x - MARGIN, hb.y - MARGIN, hb.z - MARGIN];
    let mut axes: Vec<Vec3> = Vec::with_capacity(15);
    axes.extend_from_slice(&axes_a);
    axes.extend_from_slice(&axes_b);
    for i in 0..3 {
        for j in 0..3 {
            let c = axes_a[i].cross(axes_b[j]);
            if c.norm_squared() > 1e-12 {
                axes.push(c.normalized());
            }
        }
    }
    for axis in axes {
        let proj_a: f64 = (0..3).map(|i| ha_arr[i] * libm::fabs(axes_a[i].dot(axis))).sum();
        let proj_b: f64 = (0..3).map(|i| hb_arr[i] * libm::fabs(axes_b[i].dot(axis))).sum();
        if libm::fabs(d.dot(axis)) >= proj_a + proj_b {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_module_chain_has_single_edge() {
        let m = sample_morphology(7, 2).unwrap();
        assert_eq!(m.n_modules(), 2);
        assert_eq!(m.n_attachments(), 1);
        m.validate().unwrap();
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_morphology(1234, 4).unwrap();
        let b = sample_morphology(1234, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampled_morphologies_are_trees() {
        for seed in 0..200 {
            let m = sample_morphology(seed, 4).unwrap();
            m.validate().unwrap();
        }
    }

    /// Brute-force shape tally: over many seeds both path-shaped trees
    /// (max degree 2) and star-shaped trees (a degree-3 vertex) occur.
    #[test]
    fn shape_distribution_has_paths_and_stars() {
        let mut paths = 0;
        let mut stars = 0;
        for seed in 0..1000 {
            let m = sample_morphology(seed, 4).unwrap();
            let mut degree = [0usize; 4];
            for a in &m.attachments {
                degree[a.parent_module] += 1;
                degree[a.child_module] += 1;
            }
            let max_deg = *degree.iter().max().unwrap();
            if max_deg == 2 {
                paths += 1;
            } else if max_deg == 3 {
                stars += 1;
            }
        }
        assert!(paths > 0, "no path-shaped trees in 1000 samples");
        assert!(stars > 0, "no star-shaped trees in 1000 samples");
    }

    fn chain4() -> Morphology {
        // 0-1-2-3 chain through the swing-tip port into the -x base port.
        let spec = ModuleSpec::default();
        let mut m = Morphology {
            modules: vec![spec.clone()],
            attachments: Vec::new(),
        };
        for child in 1..4 {
            m.modules.push(spec.clone());
            m.attachments.push(Attachment {
                parent_module: child - 1,
                parent_port: 5,
                child_module: child,
                child_port: 0,
                roll: 0,
            });
        }
        m.validate().unwrap();
        m
    }

    fn star4() -> Morphology {
        let spec = ModuleSpec::default();
        let mut m = Morphology {
            modules: vec![spec.clone()],
            attachments: Vec::new(),
        };
        for (child, port) in [(1usize, 1usize), (2, 2), (3, 3)] {
            m.modules.push(spec.clone());
            m.attachments.push(Attachment {
                parent_module: 0,
                parent_port: port,
                child_module: child,
                child_port: 0,
                roll: 0,
            });
        }
        m.validate().unwrap();
        m
    }

    #[test]
    fn cluster_all_active_returns_everything() {
        let m = chain4();
        let mask = ConnectivityMask::all_active(3);
        assert_eq!(largest_connected_cluster(&m, &mask), vec![0, 1, 2, 3]);
    }

    #[test]
    fn cluster_tie_breaks_to_lowest_index() {
        let m = chain4();
        let mask = ConnectivityMask {
            active: vec![true, false, true],
        };
        assert_eq!(largest_connected_cluster(&m, &mask), vec![0, 1]);
    }

    #[test]
    fn cluster_star_with_cut_leaf() {
        let m = star4();
        let mask = ConnectivityMask {
            active: vec![true, true, false],
        };
        assert_eq!(largest_connected_cluster(&m, &mask), vec![0, 1, 2]);
    }

    #[test]
    fn free_ports_excludes_consumed() {
        let m = chain4();
        // Module 0: swing tip (5) consumed as parent.
        assert_eq!(free_ports(&m, 0), vec![0, 1, 2, 3, 4]);
        // Module 1: port 0 consumed as child, port 5 as parent.
        assert_eq!(free_ports(&m, 1), vec![1, 2, 3, 4]);
        // Module 3: only child port 0 consumed.
        assert_eq!(free_ports(&m, 3), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn star_root_free_base_ports() {
        let m = star4();
        // Root consumed base ports 1,2,3; free: 0, 4 (base) and 5 (swing tip).
        assert_eq!(free_ports(&m, 0), vec![0, 4, 5]);
    }

    #[test]
    fn removing_one_edge_splits_into_two_components() {
        for seed in 0..50 {
            let m = sample_morphology(seed, 4).unwrap();
            for cut in 0..m.n_attachments() {
                let mut mask = ConnectivityMask::all_active(m.n_attachments());
                mask.active[cut] = false;
                let big = largest_connected_cluster(&m, &mask);
                assert!(!big.is_empty() && big.len() < 4);
            }
        }
    }

    #[test]
    fn reduced_morphology_reindexes_cluster() {
        let m = chain4();
        // Cut the last weld: keep modules 0,1,2.
        let mask = ConnectivityMask {
            active: vec![true, true, false],
        };
        let (r, orig) = reduced_morphology(&m, &mask);
        assert_eq!(orig, vec![0, 1, 2]);
        assert_eq!(r.n_modules(), 3);
        assert_eq!(r.n_attachments(), 2);
        r.validate().unwrap();
        // Cut the first weld: keep 1,2,3, which reindex to 0,1,2.
        let mask = ConnectivityMask {
            active: vec![false, true, true],
        };
        let (r, orig) = reduced_morphology(&m, &mask);
        assert_eq!(orig, vec![1, 2, 3]);
        assert_eq!(r.attachments[0].parent_module, 0);
        assert_eq!(r.attachments[0].child_module, 1);
        r.validate().unwrap();
        r.rest_pose();
    }

    #[test]
    fn rest_pose_welded_frames_coincide() {
        for seed in [3u64, 17, 99] {
            let m = sample_morphology(seed, 4).unwrap();
            let pose = m.rest_pose();
            for (idx, a) in m.attachments.iter().enumerate() {
                let pf = m.attachment_frame(&pose, idx);
                // Child port frame in world, mated orientation.
                let cspec = &m.modules[a.child_module];
                let cport = &cspec.port_list[a.child_port];
                let (cb, cs) = pose.links[a.child_module];
                let owner = match cport.owner_link {
                    OwnerLink::Base => cb,
                    OwnerLink::Swing => cs,
                };
                let cw = owner.compose(&cport.frame);
                let gap = (cw.translation - pf.translation).norm();
                assert!(gap < 1e-9, "seed {seed} attachment {idx} gap {gap}");
            }
        }
    }
}
