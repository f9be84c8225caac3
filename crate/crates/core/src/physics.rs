//! Maximal-coordinate rigid-body simulation with an iterative impulse
//! (projected Gauss–Seidel) solver.
//!
//! Each module contributes two box-shaped rigid bodies joined by a hinge with
//! an implicit position-servo; module attachments are weld constraints that
//! measure their angular reaction impulse and deactivate permanently when the
//! bending component exceeds a per-episode threshold. Ground contact uses
//! impulse-based Coulomb friction against a flat plane, semi-implicit Euler
//! integration, and Baumgarte stabilization on all equality constraints.

use alloc::vec::Vec;

use rand::Rng;

use crate::math::{vec2, vec3, Mat3, Quat, Transform, Vec2, Vec3};
use crate::morphology::{ConnectivityMask, Morphology, OwnerLink};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RigidBodyState {
    pub position: Vec3,
    pub orientation: Quat,
    pub linear_velocity: Vec3,
    /// World-frame angular velocity, rad/s.
    pub angular_velocity: Vec3,
    pub mass: f64,
    /// Body-frame inertia tensor.
    pub inertia: Mat3,
    /// Static fixture body: infinite effective mass, never integrated.
    pub frozen: bool,
    /// Persistent externally applied world-frame force, N (test fixtures).
    pub ext_force: Vec3,
    /// Persistent externally applied world-frame torque, N·m (test fixtures).
    pub ext_torque: Vec3,
}

/// The §6 detachment rule: bending magnitude sqrt(τ_x² + τ_y²) against the
/// threshold, with the twist component τ_z deliberately ignored.
pub fn weld_should_detach(reaction_torque: Vec3, tau_detach: f64) -> bool {
    let bend = libm::sqrt(
        reaction_torque.x * reaction_torque.x + reaction_torque.y * reaction_torque.y,
    );
    bend > tau_detach
}

impl RigidBodyState {
    fn inv_mass(&self) -> f64 {
        if self.frozen {
            0.0
        } else {
            1.0 / self.mass
        }
    }

    fn inv_inertia_world(&self) -> Mat3 {
        if self.frozen {
            return Mat3::diagonal(crate::math::vec3(0.0, 0.0, 0.0));
        }
        let r = self.orientation.to_mat3();
        r.mul_mat(&self.inertia.inverse()).mul_mat(&r.transpose())
    }

    fn velocity_at(&self, point: Vec3) -> Vec3 {
        self.linear_velocity + self.angular_velocity.cross(point - self.position)
    }

    fn transform(&self) -> Transform {
        Transform::new(self.orientation, self.position)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WeldConstraint {
    pub body_a: usize,
    pub body_b: usize,
    /// Attachment frame in body_a coordinates.
    pub frame_a: Transform,
    /// Attachment frame in body_b coordinates.
    pub frame_b: Transform,
    pub active: bool,
    /// Bending-torque detachment threshold, N·m.
    pub tau_detach: f64,
    /// Most recent constraint torque in the weld's local frame
    /// (z = docking normal, so x/y are the bending directions).
    pub last_reaction_torque: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HingeJoint {
    pub angle: f64,
    pub velocity: f64,
    /// Desired joint position, rad.
    pub target: f64,
    pub kp: f64,
    pub kd: f64,
    pub max_torque: f64,
    base_body: usize,
    swing_body: usize,
    anchor_base: Vec3,
    anchor_swing: Vec3,
    axis_base: Vec3,
    limit: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SimParams {
    pub physics_dt: f64,
    pub control_dt: f64,
    pub gravity: Vec3,
    pub ground_friction: f64,
    pub solver_iterations: usize,
    /// Baumgarte factor for joint and weld constraints.
    pub joint_beta: f64,
    /// Baumgarte factor for contact penetration correction.
    pub contact_beta: f64,
    /// Allowed penetration before the contact bias engages, metres.
    pub contact_slop: f64,
    /// Servo proportional gain, N·m/rad.
    pub servo_kp: f64,
    /// Servo derivative gain, N·m·s/rad.
    pub servo_kd: f64,
    /// Servo torque clamp, N·m.
    pub max_torque: f64,
    /// Detachment threshold range sampled per weld at spawn, N·m.
    pub tau_detach_range: (f64, f64),
    /// Episode abort speed, m/s.
    pub abort_speed: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            physics_dt: 0.005,
            control_dt: 0.05,
            gravity: vec3(0.0, 0.0, -9.81),
            ground_friction: 0.8,
            solver_iterations: 20,
            joint_beta: 0.2,
            contact_beta: 0.2,
            contact_slop: 1e-3,
            servo_kp: 8.0,
            servo_kd: 0.4,
            max_torque: 6.0,
            tau_detach_range: (20.0, 25.0),
            abort_speed: 100.0,
        }
    }
}

/// 8-dimensional per-module proprioceptive state.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModuleState {
    /// World gravity direction in the base-link frame (unit).
    pub gravity: Vec3,
    /// Base-link angular velocity in the base-link frame, rad/s.
    pub angular_velocity: Vec3,
    pub cos_joint_angle: f64,
    pub joint_velocity: f64,
}

impl ModuleState {
    pub fn to_array(&self) -> [f64; 8] {
        [
            self.gravity.x,
            self.gravity.y,
            self.gravity.z,
            self.angular_velocity.x,
            self.angular_velocity.y,
            self.angular_velocity.z,
            self.cos_joint_angle,
            self.joint_velocity,
        ]
    }

    pub fn from_array(a: [f64; 8]) -> Self {
        ModuleState {
            gravity: vec3(a[0], a[1], a[2]),
            angular_velocity: vec3(a[3], a[4], a[5]),
            cos_joint_angle: a[6],
            joint_velocity: a[7],
        }
    }
}

/// Result of one control step.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub module_states: Vec<ModuleState>,
    pub mask: ConnectivityMask,
    /// Planar position of each module's base link.
    pub module_positions: Vec<Vec2>,
    /// Mean planar position of the largest connected cluster.
    pub cluster_position: Vec2,
    /// Instability abort flag; once set the episode is failed.
    pub failed: bool,
}

#[derive(Debug, Clone)]
pub struct SimWorld {
    pub morphology: Morphology,
    pub bodies: Vec<RigidBodyState>,
    pub hinges: Vec<HingeJoint>,
    pub welds: Vec<WeldConstraint>,
    pub time: f64,
    pub params: SimParams,
    failed: bool,
}

fn box_inertia(mass: f64, h: Vec3) -> Mat3 {
    // Solid box with half extents h.
    let k = mass / 3.0;
    Mat3::diagonal(vec3(
        k * (h.y * h.y + h.z * h.z),
        k * (h.x * h.x + h.z * h.z),
        k * (h.x * h.x + h.y * h.y),
    ))
}

fn box_corners(h: Vec3) -> [Vec3; 8] {
    [
        vec3(h.x, h.y, h.z),
        vec3(h.x, h.y, -h.z),
        vec3(h.x, -h.y, h.z),
        vec3(h.x, -h.y, -h.z),
        vec3(-h.x, h.y, h.z),
        vec3(-h.x, h.y, -h.z),
        vec3(-h.x, -h.y, h.z),
        vec3(-h.x, -h.y, -h.z),
    ]
}

/// Spawn a morphology in its rest pose, lowest point 1 mm above ground, with
/// per-weld detachment thresholds drawn from the seeded stream. With
/// `breakable` false every threshold is infinite and no detachment can occur.
pub fn spawn(m: &Morphology, seed: u64, breakable: bool) -> SimWorld {
    spawn_with_params(m, seed, breakable, SimParams::default())
}

pub fn spawn_with_params(m: &Morphology, seed: u64, breakable: bool, params: SimParams) -> SimWorld {
    debug_assert!(m.validate().is_ok());
    let pose = m.rest_pose();
    // Lowest corner over all links decides the spawn height.
    let mut min_z = f64::INFINITY;
    for (i, (base, swing)) in pose.links.iter().enumerate() {
        let spec = &m.modules[i];
        for (t, h) in [
            (base, spec.base_link_half_extents),
            (swing, spec.swing_link_half_extents),
        ] {
            for c in box_corners(h) {
                min_z = min_z.min(t.apply(c).z);
            }
        }
    }
    let lift = vec3(0.0, 0.0, 1e-3 - min_z);

    let mut bodies = Vec::with_capacity(2 * m.n_modules());
    let mut hinges = Vec::with_capacity(m.n_modules());
    for (i, (base, swing)) in pose.links.iter().enumerate() {
        let spec = &m.modules[i];
        bodies.push(RigidBodyState {
            position: base.translation + lift,
            orientation: base.rotation,
            linear_velocity: Vec3::ZERO,
            angular_velocity: Vec3::ZERO,
            mass: spec.link_mass,
            inertia: box_inertia(spec.link_mass, spec.base_link_half_extents),
            frozen: false,
            ext_force: Vec3::ZERO,
            ext_torque: Vec3::ZERO,
        });
        bodies.push(RigidBodyState {
            position: swing.translation + lift,
            orientation: swing.rotation,
            linear_velocity: Vec3::ZERO,
            angular_velocity: Vec3::ZERO,
            mass: spec.link_mass,
            inertia: box_inertia(spec.link_mass, spec.swing_link_half_extents),
            frozen: false,
            ext_force: Vec3::ZERO,
            ext_torque: Vec3::ZERO,
        });
        hinges.push(HingeJoint {
            angle: 0.0,
            velocity: 0.0,
            target: 0.0,
            kp: params.servo_kp,
            kd: params.servo_kd,
            max_torque: params.max_torque,
            base_body: 2 * i,
            swing_body: 2 * i + 1,
            anchor_base: spec.hinge_anchor(),
            anchor_swing: -spec.swing_offset(),
            axis_base: spec.hinge_axis,
            limit: spec.joint_limit,
        });
    }

    let mut stream = rng::stream(seed);
    let mut welds = Vec::with_capacity(m.n_attachments());
    for (idx, a) in m.attachments.iter().enumerate() {
        let weld_world = m.attachment_frame(&pose, idx);
        let weld_world = Transform::new(weld_world.rotation, weld_world.translation + lift);
        let parent_port = &m.modules[a.parent_module].port_list[a.parent_port];
        let body_a = match parent_port.owner_link {
            OwnerLink::Base => 2 * a.parent_module,
            OwnerLink::Swing => 2 * a.parent_module + 1,
        };
        let child_port = &m.modules[a.child_module].port_list[a.child_port];
        let body_b = match child_port.owner_link {
            OwnerLink::Base => 2 * a.child_module,
            OwnerLink::Swing => 2 * a.child_module + 1,
        };
        let frame_a = bodies[body_a].transform().inverse().compose(&weld_world);
        let frame_b = bodies[body_b].transform().inverse().compose(&weld_world);
        let (lo, hi) = params.tau_detach_range;
        let tau_detach = if breakable {
            stream.gen_range(lo..hi)
        } else {
            f64::INFINITY
        };
        welds.push(WeldConstraint {
            body_a,
            body_b,
            frame_a,
            frame_b,
            active: true,
            tau_detach,
            last_reaction_torque: Vec3::ZERO,
        });
    }

    SimWorld {
        morphology: m.clone(),
        bodies,
        hinges,
        welds,
        time: 0.0,
        params,
        failed: false,
    }
}

// Solver row caches, rebuilt every substep.

struct PointRow {
    a: usize,
    b: usize,
    ra: Vec3,
    rb: Vec3,
    k_inv: Mat3,
    bias: Vec3,
    impulse: Vec3,
}

struct AngularBlockRow {
    a: usize,
    b: usize,
    k_inv: Mat3,
    bias: Vec3,
    impulse: Vec3,
    /// Index into `welds` for reaction-torque readout.
    weld: usize,
}

struct AxisRow {
    a: usize,
    b: usize,
    axis: Vec3,
    m_eff_inv: f64,
    bias: f64,
    /// Soft-constraint feedback term (zero for rigid rows).
    gamma: f64,
    lo: f64,
    hi: f64,
    impulse: f64,
}

struct ContactRow {
    body: usize,
    r: Vec3,
    normal_mass: f64,
    bias: f64,
    normal_impulse: f64,
    t1_mass: f64,
    t2_mass: f64,
    t1_impulse: f64,
    t2_impulse: f64,
}

impl SimWorld {
    pub fn n_modules(&self) -> usize {
        self.morphology.n_modules()
    }

    pub fn failed(&self) -> bool {
        self.failed
    }

    pub fn mask(&self) -> ConnectivityMask {
        ConnectivityMask {
            active: self.welds.iter().map(|w| w.active).collect(),
        }
    }

    /// Mean planar position of the base links in the largest connected
    /// cluster.
    pub fn cluster_position(&self) -> Vec2 {
        let mask = self.mask();
        let cluster = crate::morphology::largest_connected_cluster(&self.morphology, &mask);
        let mut sum = Vec2::ZERO;
        for &i in &cluster {
            let p = self.bodies[2 * i].position;
            sum += vec2(p.x, p.y);
        }
        sum / cluster.len() as f64
    }

    pub fn module_positions(&self) -> Vec<Vec2> {
        (0..self.n_modules())
            .map(|i| {
                let p = self.bodies[2 * i].position;
                vec2(p.x, p.y)
            })
            .collect()
    }

    /// Per-module proprioceptive token.
    pub fn module_states(&self) -> Vec<ModuleState> {
        let g_dir = self.params.gravity.normalized();
        (0..self.n_modules())
            .map(|i| {
                let base = &self.bodies[2 * i];
                let h = &self.hinges[i];
                ModuleState {
                    gravity: base.orientation.rotate_inv(g_dir),
                    angular_velocity: base.orientation.rotate_inv(base.angular_velocity),
                    cos_joint_angle: libm::cos(h.angle),
                    joint_velocity: h.velocity,
                }
            })
            .collect()
    }

    /// Flat expert observation: connectivity mask (n-1), root projected
    /// gravity (3), root angular velocity (3), joint angles (n), joint
    /// velocities (n), previous action (n). 21 numbers for n = 4.
    pub fn expert_observation(&self, prev_action: &[f64]) -> Vec<f64> {
        let n = self.n_modules();
        assert_eq!(prev_action.len(), n);
        let mut obs = Vec::with_capacity(3 * n + 6 + (n - 1));
        for w in &self.welds {
            obs.push(if w.active { 1.0 } else { 0.0 });
        }
        let root = &self.bodies[0];
        let g = root.orientation.rotate_inv(self.params.gravity.normalized());
        obs.extend_from_slice(&[g.x, g.y, g.z]);
        let av = root.orientation.rotate_inv(root.angular_velocity);
        obs.extend_from_slice(&[av.x, av.y, av.z]);
        for h in &self.hinges {
            obs.push(h.angle);
        }
        for h in &self.hinges {
            obs.push(h.velocity);
        }
        obs.extend_from_slice(prev_action);
        obs
    }

    /// Advance the world by one control step. Targets are clamped to the
    /// joint limit; the report carries the post-step proprioception,
    /// connectivity, and planar positions.
    pub fn step_control(&mut self, action: &[f64]) -> StepReport {
        assert_eq!(action.len(), self.n_modules(), "action length mismatch");
        let limit = self.morphology.spec().joint_limit;
        for (h, &a) in self.hinges.iter_mut().zip(action) {
            let a = if a.is_finite() { a } else { 0.0 };
            h.target = a.clamp(-limit, limit);
        }
        let substeps =
            libm::round(self.params.control_dt / self.params.physics_dt) as usize;
        if !self.failed {
            for _ in 0..substeps {
                self.substep();
                if self.failed {
                    break;
                }
            }
        }
        self.time += self.params.control_dt;
        StepReport {
            module_states: self.module_states(),
            mask: self.mask(),
            module_positions: self.module_positions(),
            cluster_position: self.cluster_position(),
            failed: self.failed,
        }
    }

    fn substep(&mut self) {
        let dt = self.params.physics_dt;
        let p = self.params.clone();

        for b in &mut self.bodies {
            if !b.frozen {
                b.linear_velocity += (p.gravity + b.ext_force * b.inv_mass()) * dt;
                b.angular_velocity += b.inv_inertia_world().mul_vec(b.ext_torque) * dt;
            }
        }

        // Build rows from start-of-substep positions.
        let mut point_rows: Vec<PointRow> = Vec::new();
        let mut ang_rows: Vec<AngularBlockRow> = Vec::new();
        let mut axis_rows: Vec<AxisRow> = Vec::new();
        let mut contacts: Vec<ContactRow> = Vec::new();

        for (wi, w) in self.welds.iter().enumerate() {
            if !w.active {
                continue;
            }
            let (ba, bb) = (&self.bodies[w.body_a], &self.bodies[w.body_b]);
            if ba.frozen && bb.frozen {
                continue;
            }
            let fa = ba.transform().compose(&w.frame_a);
            let fb = bb.transform().compose(&w.frame_b);
            let ra = fa.translation - ba.position;
            let rb = fb.translation - bb.position;
            let k = inv_mass_matrix(ba, bb, ra, rb);
            point_rows.push(PointRow {
                a: w.body_a,
                b: w.body_b,
                ra,
                rb,
                k_inv: k.inverse(),
                bias: (fb.translation - fa.translation) * (p.joint_beta / dt),
                impulse: Vec3::ZERO,
            });
            let k_ang = ba.inv_inertia_world() + bb.inv_inertia_world();
            ang_rows.push(AngularBlockRow {
                a: w.body_a,
                b: w.body_b,
                k_inv: k_ang.inverse(),
                bias: fa.rotation.rotation_to(fb.rotation) * (p.joint_beta / dt),
                impulse: Vec3::ZERO,
                weld: wi,
            });
        }

        for h in &self.hinges {
            let (ba, bb) = (&self.bodies[h.base_body], &self.bodies[h.swing_body]);
            if ba.frozen && bb.frozen {
                continue;
            }
            let pa = ba.transform().apply(h.anchor_base);
            let pb = bb.transform().apply(h.anchor_swing);
            let ra = pa - ba.position;
            let rb = pb - bb.position;
            let k = inv_mass_matrix(ba, bb, ra, rb);
            point_rows.push(PointRow {
                a: h.base_body,
                b: h.swing_body,
                ra,
                rb,
                k_inv: k.inverse(),
                bias: (pb - pa) * (p.joint_beta / dt),
                impulse: Vec3::ZERO,
            });

            let axis_world = ba.orientation.rotate(h.axis_base);
            let expected = ba
                .orientation
                .mul_quat(Quat::from_axis_angle(h.axis_base, h.angle))
                .normalized();
            let tilt = expected.rotation_to(bb.orientation);
            let k_sum = ba.inv_inertia_world() + bb.inv_inertia_world();
            let u = axis_world.any_orthogonal();
            let v = axis_world.cross(u).normalized();
            for dir in [u, v] {
                axis_rows.push(AxisRow {
                    a: h.base_body,
                    b: h.swing_body,
                    axis: dir,
                    m_eff_inv: dir.dot(k_sum.mul_vec(dir)),
                    bias: tilt.dot(dir) * (p.joint_beta / dt),
                    gamma: 0.0,
                    lo: f64::NEG_INFINITY,
                    hi: f64::INFINITY,
                    impulse: 0.0,
                });
            }

            // Implicit position servo: spring kp, damper kd, torque clamp.
            let denom = h.kd + dt * h.kp;
            if denom > 0.0 {
                let gamma = 1.0 / (dt * denom);
                let beta_soft = dt * h.kp / denom;
                axis_rows.push(AxisRow {
                    a: h.base_body,
                    b: h.swing_body,
                    axis: axis_world,
                    m_eff_inv: axis_world.dot(k_sum.mul_vec(axis_world)),
                    bias: (h.angle - h.target) * (beta_soft / dt),
                    gamma,
                    lo: -h.max_torque * dt,
                    hi: h.max_torque * dt,
                    impulse: 0.0,
                });
            }

            // Joint limit, unilateral.
            if h.angle > h.limit {
                axis_rows.push(AxisRow {
                    a: h.base_body,
                    b: h.swing_body,
                    axis: axis_world,
                    m_eff_inv: axis_world.dot(k_sum.mul_vec(axis_world)),
                    bias: (h.angle - h.limit) * (p.joint_beta / dt),
                    gamma: 0.0,
                    lo: f64::NEG_INFINITY,
                    hi: 0.0,
                    impulse: 0.0,
                });
            } else if h.angle < -h.limit {
                axis_rows.push(AxisRow {
                    a: h.base_body,
                    b: h.swing_body,
                    axis: axis_world,
                    m_eff_inv: axis_world.dot(k_sum.mul_vec(axis_world)),
                    bias: (h.angle + h.limit) * (p.joint_beta / dt),
                    gamma: 0.0,
                    lo: 0.0,
                    hi: f64::INFINITY,
                    impulse: 0.0,
                });
            }
        }

        // Ground contacts: box corners at or below the plane.
        for (bi, b) in self.bodies.iter().enumerate() {
            if b.frozen {
                continue;
            }
            let module = bi / 2;
            let spec = &self.morphology.modules[module];
            let h = if bi % 2 == 0 {
                spec.base_link_half_extents
            } else {
                spec.swing_link_half_extents
            };
            let inv_i = b.inv_inertia_world();
            let inv_m = b.inv_mass();
            for c in box_corners(h) {
                let world = b.transform().apply(c);
                if world.z > 0.0 {
                    continue;
                }
                let r = world - b.position;
                let n = Vec3::Z;
                let t1 = Vec3::X;
                let t2 = Vec3::Y;
                let m_along = |d: Vec3| {
                    let rc = r.cross(d);
                    1.0 / (inv_m + rc.dot(inv_i.mul_vec(rc)))
                };
                let depth = -world.z;
                contacts.push(ContactRow {
                    body: bi,
                    r,
                    normal_mass: m_along(n),
                    bias: (depth - p.contact_slop).max(0.0) * (p.contact_beta / dt),
                    normal_impulse: 0.0,
                    t1_mass: m_along(t1),
                    t2_mass: m_along(t2),
                    t1_impulse: 0.0,
                    t2_impulse: 0.0,
                });
            }
        }

        // Projected Gauss–Seidel over all rows.
        for _ in 0..p.solver_iterations {
            for row in &mut point_rows {
                let (ba, bb) = two_bodies(&mut self.bodies, row.a, row.b);
                let vel = bb.velocity_at(bb.position + row.rb)
                    - ba.velocity_at(ba.position + row.ra);
                let d_impulse = row.k_inv.mul_vec(-(vel + row.bias));
                row.impulse += d_impulse;
                apply_point_impulse(ba, row.ra, -d_impulse);
                apply_point_impulse(bb, row.rb, d_impulse);
            }
            for row in &mut ang_rows {
                let (ba, bb) = two_bodies(&mut self.bodies, row.a, row.b);
                let vel = bb.angular_velocity - ba.angular_velocity;
                let d_impulse = row.k_inv.mul_vec(-(vel + row.bias));
                row.impulse += d_impulse;
                ba.angular_velocity -= ba.inv_inertia_world().mul_vec(d_impulse);
                bb.angular_velocity += bb.inv_inertia_world().mul_vec(d_impulse);
            }
            for row in &mut axis_rows {
                let (ba, bb) = two_bodies(&mut self.bodies, row.a, row.b);
                let vel = (bb.angular_velocity - ba.angular_velocity).dot(row.axis);
                let denom = row.m_eff_inv + row.gamma;
                let mut d = -(vel + row.bias + row.gamma * row.impulse) / denom;
                let new_total = (row.impulse + d).clamp(row.lo, row.hi);
                d = new_total - row.impulse;
                row.impulse = new_total;
                let imp = row.axis * d;
                ba.angular_velocity -= ba.inv_inertia_world().mul_vec(imp);
                bb.angular_velocity += bb.inv_inertia_world().mul_vec(imp);
            }
            for row in &mut contacts {
                let b = &mut self.bodies[row.body];
                let point = b.position + row.r;
                // Normal: drive separating velocity to the Baumgarte target.
                let vn = b.velocity_at(point).z;
                let mut d = row.normal_mass * (row.bias - vn);
                let new_total = (row.normal_impulse + d).max(0.0);
                d = new_total - row.normal_impulse;
                row.normal_impulse = new_total;
                apply_point_impulse(b, row.r, Vec3::Z * d);
                // Friction box-clamped by the current normal impulse.
                let max_f = p.ground_friction * row.normal_impulse;
                let vt = b.velocity_at(point);
                let mut d1 = -row.t1_mass * vt.x;
                let new1 = (row.t1_impulse + d1).clamp(-max_f, max_f);
                d1 = new1 - row.t1_impulse;
                row.t1_impulse = new1;
                apply_point_impulse(b, row.r, Vec3::X * d1);
                let vt = b.velocity_at(point);
                let mut d2 = -row.t2_mass * vt.y;
                let new2 = (row.t2_impulse + d2).clamp(-max_f, max_f);
                d2 = new2 - row.t2_impulse;
                row.t2_impulse = new2;
                apply_point_impulse(b, row.r, Vec3::Y * d2);
            }
        }

        // Integrate.
        for b in &mut self.bodies {
            if b.frozen {
                continue;
            }
            b.position += b.linear_velocity * dt;
            b.orientation = b.orientation.integrate(b.angular_velocity, dt);
        }

        // Refresh hinge angle/velocity from body states.
        for h in &mut self.hinges {
            let ba = &self.bodies[h.base_body];
            let bb = &self.bodies[h.swing_body];
            let mut rel = ba.orientation.conjugate().mul_quat(bb.orientation);
            if rel.w < 0.0 {
                rel = Quat::new(-rel.w, -rel.x, -rel.y, -rel.z);
            }
            let axis_comp = vec3(rel.x, rel.y, rel.z).dot(h.axis_base);
            h.angle = 2.0 * libm::atan2(axis_comp, rel.w);
            let axis_world = ba.orientation.rotate(h.axis_base);
            h.velocity = (bb.angular_velocity - ba.angular_velocity).dot(axis_world);
        }

        // Weld reaction torque readout and the detachment rule: bending
        // magnitude only, twist (local z) deliberately excluded.
        for row in &ang_rows {
            let w = &mut self.welds[row.weld];
            let fa_rot = self.bodies[w.body_a]
                .orientation
                .mul_quat(w.frame_a.rotation);
            let tau_local = fa_rot.rotate_inv(row.impulse / dt);
            w.last_reaction_torque = tau_local;
            let bending = libm::sqrt(tau_local.x * tau_local.x + tau_local.y * tau_local.y);
            if bending > w.tau_detach {
                w.active = false;
            }
        }

        // Instability abort.
        for b in &self.bodies {
            if !b.position.is_finite()
                || !b.linear_velocity.is_finite()
                || !b.orientation.is_finite()
                || b.linear_velocity.norm() > p.abort_speed
                || b.angular_velocity.norm() > 20.0 * p.abort_speed
            {
                self.failed = true;
            }
        }
    }

    /// Total mechanical energy (kinetic + gravitational potential).
    pub fn mechanical_energy(&self) -> f64 {
        let g = -self.params.gravity.z;
        self.bodies
            .iter()
            .map(|b| {
                let i_world = b
                    .orientation
                    .to_mat3()
                    .mul_mat(&b.inertia)
                    .mul_mat(&b.orientation.to_mat3().transpose());
                0.5 * b.mass * b.linear_velocity.norm_squared()
                    + 0.5 * b.angular_velocity.dot(i_world.mul_vec(b.angular_velocity))
                    + b.mass * g * b.position.z
            })
            .sum()
    }

    /// Lowest corner of any link, metres above ground (negative = penetration).
    pub fn lowest_point(&self) -> f64 {
        let mut min_z = f64::INFINITY;
        for (bi, b) in self.bodies.iter().enumerate() {
            let spec = &self.morphology.modules[bi / 2];
            let h = if bi % 2 == 0 {
                spec.base_link_half_extents
            } else {
                spec.swing_link_half_extents
            };
            for c in box_corners(h) {
                min_z = min_z.min(b.transform().apply(c).z);
            }
        }
        min_z
    }
}

fn two_bodies(bodies: &mut [RigidBodyState], a: usize, b: usize) -> (&mut RigidBodyState, &mut RigidBodyState) {
    debug_assert!(a != b);
    if a < b {
        let (left, right) = bodies.split_at_mut(b);
        (&mut left[a], &mut right[0])
    } else {
        let (left, right) = bodies.split_at_mut(a);
        let (bb, ba) = (&mut left[b], &mut right[0]);
        (ba, bb)
    }
}

fn apply_point_impulse(b: &mut RigidBodyState, r: Vec3, impulse: Vec3) {
    b.linear_velocity += impulse * b.inv_mass();
    b.angular_velocity += b.inv_inertia_world().mul_vec(r.cross(impulse));
}

/// K matrix for a point-to-point constraint between two dynamic bodies.
fn inv_mass_matrix(ba: &RigidBodyState, bb: &RigidBodyState, ra: Vec3, rb: Vec3) -> Mat3 {
    let m = Mat3::IDENTITY * (ba.inv_mass() + bb.inv_mass());
    m + skew_t(ra, ba.inv_inertia_world()) + skew_t(rb, bb.inv_inertia_world())
}

/// `-[r]x * I_inv * [r]x` term of the constraint mass matrix.
fn skew_t(r: Vec3, inv_i: Mat3) -> Mat3 {
    let rx = skew(r);
    let neg = rx.mul_mat(&inv_i).mul_mat(&rx);
    neg * -1.0
}

fn skew(v: Vec3) -> Mat3 {
    Mat3::from_rows(
        vec3(0.0, -v.z, v.y),
        vec3(v.z, 0.0, -v.x),
        vec3(-v.y, v.x, 0.0),
    )
}
