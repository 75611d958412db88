use serde::{Deserialize, Serialize};

/// Frequency counts for the sinusoidal input encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub num_frequencies_position: usize,
    pub num_frequencies_direction: usize,
    pub num_frequencies_time: usize,
    pub include_identity: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            num_frequencies_position: 6,
            num_frequencies_direction: 2,
            num_frequencies_time: 4,
            include_identity: true,
        }
    }
}

/// Width of the encoding of an `n`-vector.
pub fn encoded_len(n: usize, frequencies: usize, identity: bool) -> usize {
    n * (usize::from(identity) + 2 * frequencies)
}

/// Encode `value` as `[x, sin(x), cos(x), sin(2x), cos(2x), ...]`, grouped by
/// block: identity components first, then for each octave the sines of all
/// components followed by their cosines.
pub fn encode(value: &[f64], frequencies: usize, identity: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_len(value.len(), frequencies, identity));
    encode_into(value, frequencies, identity, &mut out);
    out
}

pub(crate) fn encode_into(value: &[f64], frequencies: usize, identity: bool, out: &mut Vec<f64>) {
    if identity {
        out.extend_from_slice(value);
    }
    let mut scale = 1.0;
    for _ in 0..frequencies {
        out.extend(value.iter().map(|v| (scale * v).sin()));
        out.extend(value.iter().map(|v| (scale * v).cos()));
        scale *= 2.0;
    }
}

/// Chain a gradient on the encoded features back to the raw value.
///
/// `features` is the encoding produced by [`encode`] for the same value.
pub(crate) fn encode_backward(features: &[f64], grad: &[f64], n: usize, frequencies: usize, identity: bool, out: &mut [f64]) {
    let mut off = 0;
    if identity {
        for a in 0..n {
            out[a] += grad[a];
        }
        off = n;
    }
    let mut scale = 1.0;
    for _ in 0..frequencies {
        for a in 0..n {
            let s = features[off + a];
            let c = features[off + n + a];
            out[a] += scale * (c * grad[off + a] - s * grad[off + n + a]);
        }
        off += 2 * n;
        scale *= 2.0;
    }
}
