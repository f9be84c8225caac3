//! Temporary lever diagnostics. Will be removed.
use molt_core::math::{vec3, Vec3};
use molt_core::morphology::{Attachment, ModuleSpec, Morphology};
use molt_core::physics::{spawn_with_params, SimParams};

fn main() {
    let spec = ModuleSpec::default();
    let m = Morphology {
        modules: vec![spec.clone(), spec],
        attachments: vec![Attachment {
            parent_module: 0,
            parent_port: 5,
            child_module: 1,
            child_port: 1,
            roll: 0,
        }],
    };
    for (lx, ly) in [(15.0, 20.0), (20.0, 15.0), (0.0, 25.0)] {
        let load = 1.0;
        let mut sim = SimParams::default();
        sim.gravity = Vec3::ZERO;
        sim.solver_iterations = 200;
        let mut w = spawn_with_params(&m, 0, true, sim);
        w.welds[0].tau_detach = f64::INFINITY;
        w.bodies[0].frozen = true;
        w.bodies[1].frozen = true;
        let rot = w.bodies[w.welds[0].body_a]
            .orientation
            .mul_quat(w.welds[0].frame_a.rotation);
        let world = rot.rotate(vec3(lx, ly, 0.0));
        let mut max_bend = 0.0f64;
        for k in 0..60 {
            let frac = ((k + 1) as f64 / 10.0).min(1.0);
            w.bodies[2].ext_torque = world * frac;
            w.step_control(&[0.0, 0.0]);
            let t = w.welds[0].last_reaction_torque;
            let bend = (t.x * t.x + t.y * t.y).sqrt();
            if k >= 10 {
                max_bend = max_bend.max(bend);
            }
            if k % 20 == 19 {
                println!(
                    "load ({lx},{ly}) step {k:3} bend {bend:7.3} tz {:7.3} childpos {:?}",
                    t.z, w.bodies[2].position
                );
            }
        }
        println!("load ({lx},{ly}) max steady bending {max_bend:.3}");
    }
}
