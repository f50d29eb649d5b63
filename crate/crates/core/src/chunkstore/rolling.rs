//! Polynomial rolling hash over a fixed-size byte window.
//!
//! The hash of a window `B_1..B_n` is `sum(B_x * p^(n-x)) mod M`. Sliding the
//! window by one byte is `H' = H*p + incoming - outgoing*p^n (mod M)`, so
//! every position of a stream can be hashed in constant time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The Mersenne prime 2^61 - 1.
pub const MERSENNE_61: u64 = (1 << 61) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RollingHashParams {
    /// Window length `n` in bytes.
    pub window_len: usize,
    /// Polynomial base `p`.
    pub multiplier: u64,
    /// Prime modulus `M`.
    pub modulus: u64,
    /// `k`; the expected chunk size is `2^k` bytes.
    pub boundary_bits: u32,
    /// Value the low `k` bits of the hash must equal to declare a boundary.
    pub threshold: u64,
    pub min_chunk: usize,
    pub max_chunk: usize,
}

impl Default for RollingHashParams {
    fn default() -> Self {
        RollingHashParams {
            window_len: 48,
            multiplier: 1_000_003,
            modulus: MERSENNE_61,
            boundary_bits: 12,
            threshold: (1 << 12) - 1,
            min_chunk: 1024,
            max_chunk: 64 * 1024,
        }
    }
}

impl RollingHashParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.window_len == 0 {
            return bad("window_len must be at least 1".into());
        }
        if self.multiplier == 0 || self.multiplier >= self.modulus {
            return bad(format!(
                "multiplier {} must lie in (0, modulus {})",
                self.multiplier, self.modulus
            ));
        }
        if !is_prime(self.modulus) {
            return bad(format!("modulus {} is not prime", self.modulus));
        }
        if !(1..30).contains(&self.boundary_bits) {
            return bad(format!("boundary_bits {} outside [1, 30)", self.boundary_bits));
        }
        if self.threshold > self.mask() {
            return bad(format!(
                "threshold {} does not fit in {} bits",
                self.threshold, self.boundary_bits
            ));
        }
        let avg = self.average_chunk();
        if !(self.min_chunk < avg && avg < self.max_chunk) {
            return bad(format!(
                "chunk bounds must satisfy min {} < 2^k {} < max {}",
                self.min_chunk, avg, self.max_chunk
            ));
        }
        Ok(())
    }

    pub fn mask(&self) -> u64 {
        (1u64 << self.boundary_bits) - 1
    }

    pub fn average_chunk(&self) -> usize {
        1usize << self.boundary_bits
    }

    pub(crate) fn arith(&self) -> ModArith {
        ModArith::new(self.modulus)
    }
}

/// Modular arithmetic with a fast path for the Mersenne modulus.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ModArith {
    m: u64,
    mersenne: bool,
}

impl ModArith {
    pub(crate) fn new(m: u64) -> Self {
        ModArith {
            m,
            mersenne: m == MERSENNE_61,
        }
    }

    #[inline]
    pub(crate) fn mul(self, a: u64, b: u64) -> u64 {
        let wide = a as u128 * b as u128;
        if self.mersenne {
            // a, b < 2^61 so wide < 2^122; fold the high bits twice.
            let folded = (wide as u64 & MERSENNE_61) + (wide >> 61) as u64;
            let folded = (folded & MERSENNE_61) + (folded >> 61);
            if folded >= MERSENNE_61 {
                folded - MERSENNE_61
            } else {
                folded
            }
        } else {
            (wide % self.m as u128) as u64
        }
    }

    #[inline]
    pub(crate) fn add(self, a: u64, b: u64) -> u64 {
        let s = a as u128 + b as u128;
        (if s >= self.m as u128 { s - self.m as u128 } else { s }) as u64
    }

    #[inline]
    pub(crate) fn sub(self, a: u64, b: u64) -> u64 {
        if a >= b {
            a - b
        } else {
            (a as u128 + self.m as u128 - b as u128) as u64
        }
    }

    pub(crate) fn reduce(self, a: u64) -> u64 {
        a % self.m
    }

    pub(crate) fn pow(self, mut base: u64, mut exp: u64) -> u64 {
        let mut acc = 1 % self.m;
        base = self.reduce(base);
        while exp > 0 {
            if exp & 1 == 1 {
                acc = self.mul(acc, base);
            }
            base = self.mul(base, base);
            exp >>= 1;
        }
        acc
    }
}

/// Hash of a whole window evaluated directly (Horner form).
pub fn direct_hash(window: &[u8], params: &RollingHashParams) -> Result<u64> {
    if window.len() != params.window_len {
        return Err(Error::InvalidArgument(format!(
            "window has {} bytes, expected {}",
            window.len(),
            params.window_len
        )));
    }
    let ar = params.arith();
    let p = ar.reduce(params.multiplier);
    Ok(window
        .iter()
        .fold(0u64, |h, &b| ar.add(ar.mul(h, p), ar.reduce(b as u64))))
}

/// Slides a window hash by one byte. Computes `p^n` on every call; use
/// [`RollingHasher`] when rolling over a stream.
pub fn roll_hash(prev: u64, incoming: u8, outgoing: u8, params: &RollingHashParams) -> u64 {
    RollingHasher::new(params).roll(prev, incoming, outgoing)
}

/// Rolling hash with the term each outgoing byte removes, `b * p^n mod M`,
/// precomputed.
#[derive(Debug, Clone, Copy)]
pub struct RollingHasher {
    ar: ModArith,
    p: u64,
    drop: [u64; 256],
}

impl RollingHasher {
    pub fn new(params: &RollingHashParams) -> Self {
        let ar = params.arith();
        let p = ar.reduce(params.multiplier);
        let p_pow_n = ar.pow(p, params.window_len as u64);
        let mut drop = [0u64; 256];
        for (b, d) in drop.iter_mut().enumerate() {
            *d = ar.mul(ar.reduce(b as u64), p_pow_n);
        }
        RollingHasher { ar, p, drop }
    }

    /// Appends a byte without removing one; used while the window fills.
    #[inline]
    pub fn push(&self, prev: u64, incoming: u8) -> u64 {
        self.ar.add(self.ar.mul(prev, self.p), self.reduce_byte(incoming))
    }

    #[inline]
    pub fn roll(&self, prev: u64, incoming: u8, outgoing: u8) -> u64 {
        let shifted = self.push(prev, incoming);
        self.ar.sub(shifted, self.drop[outgoing as usize])
    }

    #[inline]
    fn reduce_byte(&self, b: u8) -> u64 {
        if self.ar.m > 255 {
            b as u64
        } else {
            b as u64 % self.ar.m
        }
    }

}

/// Deterministic Miller-Rabin, exact for all 64-bit integers.
pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    const BASES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    for &b in &BASES {
        if n % b == 0 {
            return n == b;
        }
    }
    let ar = ModArith { m: n, mersenne: false };
    let mut d = n - 1;
    let mut s = 0;
    while d % 2 == 0 {
        d /= 2;
        s += 1;
    }
    'outer: for &a in &BASES {
        let mut x = ar.pow(a, d);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = ar.mul(x, x);
            if x == n - 1 {
                continue 'outer;
            }
        }
        return false;
    }
    true
}
