//! Sign-random-projection (SimHash) codes over flattened model parameters.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::model::ModelParams;
use crate::rng::{stream, Stream};

/// Fixed-length bit vector. Bit 0 is the most significant bit of the first word.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LshCode {
    len: usize,
    words: Vec<u64>,
}

impl LshCode {
    pub fn zeros(len: usize) -> Self {
        Self { len, words: vec![0; len.div_ceil(64)] }
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut code = Self::zeros(bits.len());
        for (k, &b) in bits.iter().enumerate() {
            code.set(k, b);
        }
        code
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bit(&self, k: usize) -> bool {
        assert!(k < self.len, "bit {k} out of range for {}-bit code", self.len);
        (self.words[k / 64] >> (63 - k % 64)) & 1 == 1
    }

    pub fn set(&mut self, k: usize, value: bool) {
        assert!(k < self.len, "bit {k} out of range for {}-bit code", self.len);
        let mask = 1u64 << (63 - k % 64);
        if value {
            self.words[k / 64] |= mask;
        } else {
            self.words[k / 64] &= !mask;
        }
    }

    /// Lowercase hex, most significant bit first, zero-padded to a whole nibble.
    pub fn to_hex(&self) -> String {
        let nibbles = self.len.div_ceil(4);
        let mut s = String::with_capacity(nibbles);
        for n in 0..nibbles {
            let word = self.words[n / 16];
            let v = (word >> (60 - 4 * (n % 16))) & 0xf;
            s.push(char::from_digit(v as u32, 16).expect("nibble"));
        }
        s
    }

    /// Parses [`LshCode::to_hex`] output for a code of `len` bits.
    pub fn from_hex(hex: &str, len: usize) -> Result<Self> {
        if hex.len() != len.div_ceil(4) {
            return Err(invalid(format!("{}-bit code needs {} hex digits, got {}", len, len.div_ceil(4), hex.len())));
        }
        let mut code = Self::zeros(len);
        for (n, ch) in hex.chars().enumerate() {
            let v = ch
                .to_digit(16)
                .filter(|_| !ch.is_ascii_uppercase())
                .ok_or_else(|| invalid(format!("invalid hex digit {ch:?}")))? as u64;
            code.words[n / 16] |= v << (60 - 4 * (n % 16));
        }
        // padding bits must be zero
        for k in len..len.div_ceil(4) * 4 {
            if (code.words[k / 64] >> (63 - k % 64)) & 1 == 1 {
                return Err(invalid("non-zero padding bits in hex code"));
            }
        }
        Ok(code)
    }
}

impl fmt::Display for LshCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for LshCode {
    type Err = Error;

    /// Infers the length as four bits per hex digit.
    fn from_str(s: &str) -> Result<Self> {
        Self::from_hex(s, s.len() * 4)
    }
}

/// Number of differing bits.
pub fn hamming(a: &LshCode, b: &LshCode) -> Result<u32> {
    if a.len != b.len {
        return Err(invalid(format!("code lengths differ: {} vs {}", a.len, b.len)));
    }
    Ok(a.words.iter().zip(&b.words).map(|(x, y)| (x ^ y).count_ones()).sum())
}

/// Public random hyperplanes shared by every client.
#[derive(Debug, Clone, PartialEq)]
pub struct LshBasis {
    hyperplanes: Vec<Vec<f64>>,
    seed: u64,
}

impl LshBasis {
    pub fn bits(&self) -> usize {
        self.hyperplanes.len()
    }

    pub fn dim(&self) -> usize {
        self.hyperplanes.first().map_or(0, Vec::len)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn hyperplanes(&self) -> &[Vec<f64>] {
        &self.hyperplanes
    }

    /// Signs of the projections of an already-flattened vector.
    pub fn encode_flat(&self, flat: &[f64]) -> Result<LshCode> {
        if flat.len() != self.dim() {
            return Err(invalid(format!(
                "vector dimension {} does not match basis dimension {}",
                flat.len(),
                self.dim()
            )));
        }
        let mut code = LshCode::zeros(self.bits());
        for (k, h) in self.hyperplanes.iter().enumerate() {
            let dot: f64 = h.iter().zip(flat).map(|(a, b)| a * b).sum();
            code.set(k, dot >= 0.0);
        }
        Ok(code)
    }
}

/// Draws `bits` Gaussian directions of dimension `param_dim`, normalized to unit length.
pub fn make_basis(param_dim: usize, bits: usize, network_seed: u64) -> Result<LshBasis> {
    if bits == 0 || param_dim == 0 {
        return Err(invalid("basis needs at least one bit and one dimension"));
    }
    let mut rng = stream(network_seed, Stream::LshBasis, 0);
    let hyperplanes = (0..bits)
        .map(|_| {
            let mut v: Vec<f64> = (0..param_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in &mut v {
                *x /= norm;
            }
            v
        })
        .collect();
    Ok(LshBasis { hyperplanes, seed: network_seed })
}

/// Code of `params` flattened row-major weights first, then bias.
pub fn encode(params: &ModelParams, basis: &LshBasis) -> Result<LshCode> {
    basis.encode_flat(&params.flatten())
}
