//! MC-dropout sampling on the penultimate activation.
//!
//! Each sample re-runs only the last layer (the residual pass); masking and
//! rescaling of the dropped activation are uncounted, while the residual
//! pass is charged to the `dropout_forward` phase with the exact arithmetic
//! recipe certified by the cost model.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv::{Activation, ConvHead, ConvLayer, FeatureMap};
use crate::error::{Error, Result};
use crate::flops::{FlopLedger, Phase};

/// Stateless seed stream: sample `i` draws from `split_seed(seed, i)`.
pub fn split_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Residual pass of the last layer over an explicitly zero-padded input, so
/// every output entry performs exactly `k_in (2s+1)^2` multiplications.
///
/// The counted recipe is: one multiply per kernel tap, one add per
/// accumulation with the very first accumulation of the pass an assignment,
/// and one add per bias, i.e. `2 n_T k_in (2s+1)^2 - 1 + n_T` FLOP.
pub fn counted_residual_pass(
    layer: &ConvLayer,
    input: &FeatureMap,
    ledger: &mut FlopLedger,
) -> FeatureMap {
    let (h, w) = (input.height, input.width);
    let s = layer.extent;
    let wlen = 2 * s + 1;
    // materialized zero padding; copies are free
    let (ph, pw) = (h + 2 * s, w + 2 * s);
    let mut padded = vec![0.0; layer.k_in * ph * pw];
    for c in 0..layer.k_in {
        for row in 0..h {
            for col in 0..w {
                padded[(c * ph + row + s) * pw + col + s] = input.get(c, row, col);
            }
        }
    }
    let mut out = FeatureMap::zeros(layer.k_out, h, w);
    let mut flops = 0u64;
    let mut first_of_pass = true;
    for d in 0..layer.k_out {
        for row in 0..h {
            for col in 0..w {
                let mut acc = 0.0;
                for c in 0..layer.k_in {
                    for orow in 0..wlen {
                        for ocol in 0..wlen {
                            let o = orow * wlen + ocol;
                            let v = layer.kernels[layer.kidx(c, d, o)]
                                * padded[(c * ph + row + orow) * pw + col + ocol];
                            flops += 1;
                            if first_of_pass {
                                acc = v;
                                first_of_pass = false;
                            } else {
                                acc += v;
                                flops += 1;
                            }
                        }
                    }
                }
                acc += layer.bias[d];
                flops += 1;
                let activated = match layer.activation {
                    Activation::Identity => acc,
                    act => {
                        if acc < 0.0 {
                            flops += 1;
                        }
                        act.apply(acc)
                    }
                };
                out.set(d, row, col, activated);
            }
        }
    }
    ledger.add_flops(Phase::DropoutForward, flops);
    out
}

/// Draw `n_samples` dropout samples of the final feature map, with inverted
/// dropout (kept entries scaled by `1/(1-rate)`) applied to the penultimate
/// activation. Bit-reproducible under `seed`; sample `i` owns the RNG
/// stream derived from `(seed, i)`.
pub fn mc_dropout_samples(
    conv: &ConvHead,
    phi_prev: &FeatureMap,
    rate: f64,
    n_samples: usize,
    seed: u64,
    ledger: &mut FlopLedger,
) -> Result<Vec<FeatureMap>> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::validation(format!("dropout rate {rate} outside (0,1)")));
    }
    if n_samples == 0 {
        return Err(Error::validation("need at least one dropout sample"));
    }
    let last = conv
        .layers
        .last()
        .ok_or_else(|| Error::validation("conv head needs at least one layer"))?;
    if phi_prev.channels != last.k_in {
        return Err(Error::validation(format!(
            "penultimate activation has {} channels, last layer expects {}",
            phi_prev.channels, last.k_in
        )));
    }
    let scale = 1.0 / (1.0 - rate);
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, i as u64));
        let mut dropped = phi_prev.clone();
        for v in &mut dropped.values {
            if rng.random_range(0.0..1.0) < rate {
                *v = 0.0;
            } else {
                *v *= scale;
            }
        }
        samples.push(counted_residual_pass(last, &dropped, ledger));
    }
    Ok(samples)
}

/// Per-component sample mean and population standard deviation across the
/// dropout samples of one anchor's raw output vector.
pub fn per_anchor_sample_stats(
    samples: &[Vec<f64>], // one raw vector per sample
) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len();
    let dim = samples.first().map(|s| s.len()).unwrap_or(0);
    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut std = vec![0.0; dim];
    for s in samples {
        for ((sd, v), m) in std.iter_mut().zip(s).zip(&mean) {
            let d = v - m;
            *sd += d * d;
        }
    }
    for sd in &mut std {
        *sd = (*sd / n as f64).sqrt();
    }
    (mean, std)
}
