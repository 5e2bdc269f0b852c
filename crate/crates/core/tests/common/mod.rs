#![allow(dead_code)]

use forcegain_core::datagen::{build_dataset, Dataset, Trajectory};
use forcegain_core::dynamics::{Pose, Twist, Vector, Wrench};
use forcegain_core::seqmodel::{Backbone, ModelConfig};
use forcegain_core::{rng_from_seed, Rng};
use rand::Rng as _;

pub const DOF: usize = 3;

pub fn tiny_config(window: usize, width: usize, backbone: Backbone) -> ModelConfig {
    ModelConfig { window, embed_width: width, backbone, hidden: vec![width], ..ModelConfig::default() }
}

fn vec3(rng: &mut Rng, scale: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| scale[i] * rng.random_range(-1.0..1.0))
}

/// Random trajectory with plausible magnitudes. `rule` may overwrite any
/// step's fields from the already sampled ones (`t`, trajectory so far).
pub fn random_trajectory(rng: &mut Rng, len: usize, rule: &dyn Fn(&mut Trajectory, usize)) -> Trajectory {
    let mut traj = Trajectory::default();
    for _ in 0..len {
        traj.x.push(Pose::from_slice(&vec3(rng, [0.004, 0.01, 0.02])).unwrap());
        traj.v.push(Twist::from_slice(&vec3(rng, [0.02, 0.02, 0.1])).unwrap());
        traj.f.push(Wrench::from_slice(&vec3(rng, [5.0, 20.0, 0.1])).unwrap());
        traj.dx.push(Pose::from_slice(&vec3(rng, [0.0015, 0.0015, 0.015])).unwrap());
        let k = [0, 1, 2].map(|_| rng.random_range(10.0..1000.0));
        traj.k.push(Vector::from_slice(&k).unwrap());
        traj.r.push(-rng.random_range(0.0..0.02));
    }
    for t in 0..len {
        rule(&mut traj, t);
    }
    traj
}

pub fn random_dataset(seed: u64, n: usize, len: usize, rule: &dyn Fn(&mut Trajectory, usize)) -> Dataset {
    let mut rng = rng_from_seed(seed);
    let trajs = (0..n).map(|_| random_trajectory(&mut rng, len, rule)).collect();
    build_dataset(trajs).unwrap().dataset
}

pub fn no_rule(_: &mut Trajectory, _: usize) {}
