use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::NetworkGraph;
use super::layer::LayerKind;
use crate::scalar::Scalar;
use crate::seed::derive;

/// Fan-in scaled uniform init: weights `U(−√(3/fan_in), √(3/fan_in))`, zero
/// bias, identity batch norm. Each parameter draws from its own stream keyed
/// by its position, so init is independent of which other layers exist.
pub fn init_fan_in_uniform<T: Scalar>(net: &mut NetworkGraph<T>, seed: u64) {
    init_layers(net, seed, 0..net.len());
}

pub fn init_layers<T: Scalar>(net: &mut NetworkGraph<T>, seed: u64, range: std::ops::Range<usize>) {
    let plans: Vec<(String, LayerKind)> = net.layers()[range]
        .iter()
        .map(|l| (l.name.clone(), l.kind.clone()))
        .collect();
    for (name, kind) in plans {
        let layer_seed = derive(seed, &[name_hash(&name)]);
        match kind {
            LayerKind::Dense { inputs, .. } => fill_uniform(net, &format!("{name}/kernel"), inputs, layer_seed),
            LayerKind::Conv2d {
                in_channels, kernel, ..
            } => fill_uniform(net, &format!("{name}/kernel"), in_channels * kernel * kernel, layer_seed),
            LayerKind::BatchNormFrozen { .. } => {
                for (role, v) in [("gamma", 1.0), ("moving_variance", 1.0)] {
                    if let Some(d) = net.param_data_mut(&format!("{name}/{role}")) {
                        d.iter_mut().for_each(|x| *x = T::lit(v));
                    }
                }
            }
            _ => {}
        }
    }
}

fn fill_uniform<T: Scalar>(net: &mut NetworkGraph<T>, param: &str, fan_in: usize, seed: u64) {
    let limit = (3.0 / fan_in.max(1) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if let Some(d) = net.param_data_mut(param) {
        for x in d.iter_mut() {
            *x = T::lit(rng.gen_range(-limit..limit));
        }
    }
}

/// FNV-1a, stable across platforms and releases.
pub(crate) fn name_hash(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
