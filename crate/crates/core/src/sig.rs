//! Truncated path-signature algebra for piecewise-linear 2D paths.
//!
//! The signature of a path collects its iterated integrals. Level `k`
//! of a 2D path is a tensor with `2^k` components, stored here as a
//! flat vector in lexicographic multi-index order (index `(i_1..i_k)`,
//! `i in {1,2}`), so a signature truncated at depth `K` carries
//! `2^{K+1} - 1` numbers in total. Two facts make the computation exact
//! for polylines: a straight segment with displacement `d` has
//! `level_k = d^{⊗k} / k!`, and concatenating paths multiplies their
//! signatures in the truncated tensor algebra (Chen's identity).

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SigError {
    #[error("displacement is not finite: ({dx}, {dy})")]
    NonFinite { dx: f64, dy: f64 },
    #[error("signature depth mismatch: {left} vs {right}")]
    DepthMismatch { left: usize, right: usize },
    #[error("path has no points")]
    EmptyPath,
}

/// Straight-segment displacement in writing-plane units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Displacement {
    pub dx: f64,
    pub dy: f64,
}

impl Displacement {
    pub fn new(dx: f64, dy: f64) -> Result<Self, SigError> {
        if !(dx.is_finite() && dy.is_finite()) {
            return Err(SigError::NonFinite { dx, dy });
        }
        Ok(Self { dx, dy })
    }

    #[inline]
    fn component(&self, axis: usize) -> f64 {
        if axis == 0 {
            self.dx
        } else {
            self.dy
        }
    }
}

/// Signature truncated at `depth`; `levels[k]` holds the `2^k` entries
/// of the k-fold iterated integral, `levels[0] == [1.0]` always.
#[derive(Debug, Clone, PartialEq)]
pub struct Signature {
    depth: usize,
    levels: Vec<Vec<f64>>,
}

impl Signature {
    /// The identity of the tensor algebra: `(1, 0, 0, ...)`.
    pub fn identity(depth: usize) -> Self {
        let mut levels = Vec::with_capacity(depth + 1);
        levels.push(vec![1.0]);
        for k in 1..=depth {
            levels.push(vec![0.0; 1 << k]);
        }
        Self { depth, levels }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Flat entries of level `k` in lexicographic multi-index order.
    pub fn level(&self, k: usize) -> &[f64] {
        &self.levels[k]
    }

    /// Total number of entries, `2^{depth+1} - 1`.
    pub fn len(&self) -> usize {
        (1 << (self.depth + 1)) - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// All levels concatenated, level 0 first.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for level in &self.levels {
            out.extend_from_slice(level);
        }
        out
    }

    /// Entry addressed by a multi-index over axes `{1, 2}`.
    pub fn entry(&self, index: &[usize]) -> f64 {
        debug_assert!(index.iter().all(|&i| i == 1 || i == 2));
        let mut flat = 0usize;
        for &i in index {
            flat = flat * 2 + (i - 1);
        }
        self.levels[index.len()][flat]
    }

    /// Signed Lévy area `(P^{12} - P^{21}) / 2`; needs depth >= 2.
    pub fn levy_area(&self) -> f64 {
        (self.levels[2][1] - self.levels[2][2]) / 2.0
    }

    fn max_abs_nonzero_level(&self) -> f64 {
        self.levels[1..]
            .iter()
            .flat_map(|l| l.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// True when the signature equals the identity within `tol` on
    /// every level above zero.
    pub fn is_identity(&self, tol: f64) -> bool {
        (self.levels[0][0] - 1.0).abs() <= tol && self.max_abs_nonzero_level() <= tol
    }
}

/// Signature of one straight segment: `level_k = d^{⊗k} / k!`, built by
/// iterating `level_k = (level_{k-1} ⊗ d) / k`.
pub fn segment_signature(d: Displacement, depth: usize) -> Result<Signature, SigError> {
    if !(d.dx.is_finite() && d.dy.is_finite()) {
        return Err(SigError::NonFinite { dx: d.dx, dy: d.dy });
    }
    let mut levels = Vec::with_capacity(depth + 1);
    levels.push(vec![1.0]);
    for k in 1..=depth {
        let prev = &levels[k - 1];
        let mut next = vec![0.0; 1 << k];
        for (p, &value) in prev.iter().enumerate() {
            for axis in 0..2 {
                next[p * 2 + axis] = value * d.component(axis) / k as f64;
            }
        }
        levels.push(next);
    }
    Ok(Signature { depth, levels })
}

/// Chen's identity: the signature of a concatenated path is the
/// truncated tensor product of the parts,
/// `level_n = sum_{i+j=n} a_i ⊗ b_j`.
pub fn chen_concat(a: &Signature, b: &Signature) -> Result<Signature, SigError> {
    if a.depth != b.depth {
        return Err(SigError::DepthMismatch {
            left: a.depth,
            right: b.depth,
        });
    }
    let depth = a.depth;
    let mut levels = Vec::with_capacity(depth + 1);
    for n in 0..=depth {
        let mut out = vec![0.0; 1 << n];
        for i in 0..=n {
            let j = n - i;
            let left = &a.levels[i];
            let right = &b.levels[j];
            let stride = 1 << j;
            for (u, &lu) in left.iter().enumerate() {
                if lu == 0.0 {
                    continue;
                }
                let base = u * stride;
                for (v, &rv) in right.iter().enumerate() {
                    out[base + v] += lu * rv;
                }
            }
        }
        levels.push(out);
    }
    Ok(Signature { depth, levels })
}

/// Signature of a polyline: per-segment signatures folded left-to-right
/// with [`chen_concat`]. A single point yields the identity.
pub fn path_signature(points: &[(f64, f64)], depth: usize) -> Result<Signature, SigError> {
    if points.is_empty() {
        return Err(SigError::EmptyPath);
    }
    let mut acc = Signature::identity(depth);
    for pair in points.windows(2) {
        let d = Displacement::new(pair[1].0 - pair[0].0, pair[1].1 - pair[0].1)?;
        let seg = segment_signature(d, depth)?;
        acc = chen_concat(&acc, &seg)?;
    }
    Ok(acc)
}

/// Concatenates a path's signature with its reversal's; the algebraic
/// inverse property makes the result the identity up to rounding.
pub fn inverse_check(points: &[(f64, f64)], depth: usize) -> Result<Signature, SigError> {
    let forward = path_signature(points, depth)?;
    let reversed: Vec<(f64, f64)> = points.iter().rev().copied().collect();
    let backward = path_signature(&reversed, depth)?;
    chen_concat(&forward, &backward)
}
