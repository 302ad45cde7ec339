//! Built-in scene templates.
//!
//! The seed only perturbs object placement and albedo slightly, so every seed
//! gives a scene of the same character.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scene::{Aabb, Agent, AgentPose, CameraRig, DynamicPrimitive, Scene, Shape, StaticPrimitive};

pub const TEMPLATES: [&str; 3] = ["static-room", "moving-box", "two-agent-intersection"];

const SOLID: f64 = 40.0;
const SKY: [f64; 3] = [0.62, 0.78, 0.95];

pub fn template(name: &str, seed: u64) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = match name {
        "static-room" => room(name, &mut rng, false),
        "moving-box" => room(name, &mut rng, true),
        "two-agent-intersection" => intersection(&mut rng),
        _ => {
            return Err(Error::Config(format!(
                "unknown template {name:?}; expected one of {}",
                TEMPLATES.join(", ")
            )))
        }
    };
    scene.validate()?;
    Ok(scene)
}

fn jitter(rng: &mut ChaCha8Rng, v: [f64; 3], amount: f64) -> [f64; 3] {
    v.map(|x| x + rng.random_range(-amount..=amount))
}

fn tint(rng: &mut ChaCha8Rng, c: [f64; 3]) -> [f64; 3] {
    c.map(|x| (x + rng.random_range(-0.02..=0.02)).clamp(0.0, 1.0))
}

fn cuboid(center: [f64; 3], half: [f64; 3], albedo: [f64; 3]) -> StaticPrimitive {
    StaticPrimitive {
        shape: Shape::Box { half_extents: half },
        center,
        density: SOLID,
        albedo,
    }
}

fn ball(center: [f64; 3], radius: f64, albedo: [f64; 3]) -> StaticPrimitive {
    StaticPrimitive {
        shape: Shape::Sphere { radius },
        center,
        density: SOLID,
        albedo,
    }
}

fn ground(albedo: [f64; 3]) -> StaticPrimitive {
    StaticPrimitive {
        shape: Shape::GroundPlane,
        center: [0.0; 3],
        density: SOLID,
        albedo,
    }
}

fn rig(id: &str, yaw_deg: f64, pitch_deg: f64, focal: f64, size: usize) -> CameraRig {
    CameraRig {
        id: id.into(),
        yaw_deg,
        pitch_deg,
        offset: [0.0, 0.0, 1.4],
        focal,
        width: size,
        height: size,
    }
}

fn room(name: &str, rng: &mut ChaCha8Rng, moving: bool) -> Scene {
    let timestamps: Vec<i64> = (0..5).collect();
    let mut statics = vec![
        ground([0.46, 0.42, 0.36]),
        cuboid([5.6, 0.0, 1.5], [0.2, 5.8, 1.5], tint(rng, [0.78, 0.34, 0.3])),
        cuboid([-5.6, 0.0, 1.5], [0.2, 5.8, 1.5], tint(rng, [0.34, 0.66, 0.4])),
        cuboid([0.0, 5.6, 1.5], [5.4, 0.2, 1.5], tint(rng, [0.3, 0.42, 0.78])),
        cuboid([0.0, -5.6, 1.5], [5.4, 0.2, 1.5], tint(rng, [0.82, 0.72, 0.3])),
        cuboid(jitter(rng, [1.8, 1.6, 0.5], 0.1), [0.5; 3], tint(rng, [0.92, 0.56, 0.2])),
        ball(jitter(rng, [-1.6, 1.8, 0.6], 0.1), 0.6, tint(rng, [0.56, 0.3, 0.72])),
        cuboid(jitter(rng, [0.2, 3.2, 0.75], 0.1), [0.4, 0.4, 0.75], tint(rng, [0.2, 0.7, 0.74])),
        ball(jitter(rng, [-3.0, -0.4, 0.4], 0.1), 0.4, tint(rng, [0.9, 0.9, 0.86])),
    ];
    let mut dynamics = Vec::new();
    if moving {
        let y = rng.random_range(-0.1..=0.1);
        dynamics.push(DynamicPrimitive {
            shape: Shape::Box { half_extents: [0.45; 3] },
            density: SOLID,
            albedo: tint(rng, [0.86, 0.14, 0.16]),
            trajectory: timestamps.iter().map(|&t| [-1.0 + 0.5 * t as f64, y, 0.45]).collect(),
        });
    } else {
        statics.push(cuboid(jitter(rng, [0.0, 0.2, 0.45], 0.1), [0.45; 3], tint(rng, [0.86, 0.14, 0.16])));
    }
    let cameras = vec![rig("left", 25.0, 12.0, 32.0, 64), rig("right", -25.0, 12.0, 32.0, 64)];
    let agents = vec![
        Agent {
            id: "a".into(),
            poses: timestamps
                .iter()
                .map(|&t| AgentPose {
                    position: [-3.4 + 0.3 * t as f64, -3.8, 0.0],
                    yaw_deg: 62.0 - 3.0 * t as f64,
                })
                .collect(),
            cameras: cameras.clone(),
        },
        Agent {
            id: "b".into(),
            poses: timestamps
                .iter()
                .map(|&t| AgentPose {
                    position: [3.4 - 0.3 * t as f64, -3.8, 0.0],
                    yaw_deg: 118.0 + 3.0 * t as f64,
                })
                .collect(),
            cameras,
        },
    ];
    Scene {
        name: name.into(),
        bounds: Aabb {
            min: [-6.0, -6.0, -0.5],
            max: [6.0, 6.0, 4.0],
        },
        background: SKY,
        timestamps,
        static_primitives: statics,
        dynamic_primitives: dynamics,
        agents,
    }
}

fn intersection(rng: &mut ChaCha8Rng) -> Scene {
    let timestamps: Vec<i64> = (0..5).collect();
    let statics = vec![
        ground([0.32, 0.32, 0.34]),
        cuboid([8.0, 8.0, 2.0], [3.5, 3.5, 2.0], tint(rng, [0.82, 0.46, 0.34])),
        cuboid([-8.0, 8.0, 2.0], [3.5, 3.5, 2.0], tint(rng, [0.42, 0.62, 0.82])),
        cuboid([-8.0, -8.0, 2.0], [3.5, 3.5, 2.0], tint(rng, [0.86, 0.82, 0.5])),
        cuboid([8.0, -8.0, 2.0], [3.5, 3.5, 2.0], tint(rng, [0.5, 0.78, 0.5])),
        cuboid(jitter(rng, [3.2, 3.0, 1.0], 0.1), [1.6, 0.9, 1.0], tint(rng, [0.92, 0.92, 0.9])),
    ];
    let lane = rng.random_range(-0.1..=0.1);
    let dynamics = vec![
        DynamicPrimitive {
            shape: Shape::Box {
                half_extents: [1.2, 0.7, 0.6],
            },
            density: SOLID,
            albedo: tint(rng, [0.86, 0.14, 0.16]),
            trajectory: timestamps.iter().map(|&t| [-5.0 + 1.5 * t as f64, -1.8 + lane, 0.6]).collect(),
        },
        DynamicPrimitive {
            shape: Shape::Box {
                half_extents: [0.7, 1.2, 0.6],
            },
            density: SOLID,
            albedo: tint(rng, [0.9, 0.44, 0.86]),
            trajectory: timestamps.iter().map(|&t| [1.8 - lane, 5.0 - 1.5 * t as f64, 0.6]).collect(),
        },
    ];
    let cameras = vec![
        rig("front", 0.0, 10.0, 32.0, 64),
        rig("left", 90.0, 10.0, 32.0, 64),
        rig("rear", 180.0, 10.0, 32.0, 64),
        rig("right", -90.0, 10.0, 32.0, 64),
    ];
    let agents = vec![
        Agent {
            id: "a".into(),
            poses: timestamps
                .iter()
                .map(|&t| AgentPose {
                    position: [-7.0 + 0.5 * t as f64, 1.6, 0.0],
                    yaw_deg: 0.0,
                })
                .collect(),
            cameras: cameras.clone(),
        },
        Agent {
            id: "b".into(),
            poses: timestamps
                .iter()
                .map(|&t| AgentPose {
                    position: [-1.6, -7.0 + 0.5 * t as f64, 0.0],
                    yaw_deg: 90.0,
                })
                .collect(),
            cameras,
        },
    ];
    Scene {
        name: "two-agent-intersection".into(),
        bounds: Aabb {
            min: [-12.0, -12.0, -0.5],
            max: [12.0, 12.0, 6.0],
        },
        background: SKY,
        timestamps,
        static_primitives: statics,
        dynamic_primitives: dynamics,
        agents,
    }
}
