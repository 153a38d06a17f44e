//! Receptive-field size and center arithmetic for conv/pool stacks.
//!
//! One unit at the top of a stack sees a square region of the input.
//! Walking from the top unit down to the input, the region size and
//! center obey
//!
//! ```text
//! r_below = (r_above - 1) * m + k
//! x_below = m * x_above + (k - 1)/2 - p
//! ```
//!
//! per layer, with kernel `k`, stride `m`, padding `p`. Horizontal and
//! vertical geometry are independent, so everything here works on a
//! single axis; callers run it twice for 2D stacks. Centers are kept as
//! reals because even kernels put them between pixels.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RfError {
    #[error("kernel and stride must be >= 1 (got k={kernel}, m={stride})")]
    BadLayer { kernel: usize, stride: usize },
    #[error("layer index {index} out of range for stack of {len}")]
    IndexOutOfRange { index: usize, len: usize },
}

/// One axis of a convolution or pooling layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl LayerSpec {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Result<Self, RfError> {
        if kernel < 1 || stride < 1 {
            return Err(RfError::BadLayer { kernel, stride });
        }
        Ok(Self { kernel, stride, padding })
    }

    /// Output extent for a given input extent (floor convention).
    pub fn out_extent(&self, input: usize) -> usize {
        (input + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1
    }
}

/// Region of the input seen by one top unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReceptiveField {
    /// Region extent in input pixels.
    pub size: usize,
    /// Region center in input coordinates (pixel 0 at 0.0).
    pub center: f64,
}

impl ReceptiveField {
    /// True when the region extends past `[0, extent)` of the input,
    /// i.e. part of it lies in the padding.
    pub fn clips(&self, extent: usize) -> bool {
        let half = (self.size as f64 - 1.0) / 2.0;
        self.center - half < 0.0 || self.center + half > extent as f64 - 1.0
    }
}

/// Unrolls the size/center recursion from a top unit at `top_index`
/// (r = 1 there) down through `stack` (ordered input to output) to the
/// input. An empty stack maps the unit to itself.
pub fn receptive_field(stack: &[LayerSpec], top_index: f64) -> ReceptiveField {
    let mut size = 1usize;
    let mut center = top_index;
    for layer in stack.iter().rev() {
        size = (size - 1) * layer.stride + layer.kernel;
        center = layer.stride as f64 * center + (layer.kernel as f64 - 1.0) / 2.0
            - layer.padding as f64;
    }
    ReceptiveField { size, center }
}

/// Input-pixel growth caused by enlarging the kernel of the layer at
/// `index` (0-based, input side first) by `delta_k`: the increase is
/// `delta_k` times the product of the strides of the layers below it.
pub fn enlargement(stack: &[LayerSpec], index: usize, delta_k: usize) -> Result<usize, RfError> {
    if index >= stack.len() {
        return Err(RfError::IndexOutOfRange { index, len: stack.len() });
    }
    let below: usize = stack[..index].iter().map(|l| l.stride).product();
    Ok(delta_k * below)
}

/// Why a branch family fails center alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentOffense {
    pub branch: usize,
    pub layer: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    pub aligned: bool,
    pub offenses: Vec<AlignmentOffense>,
}

/// Checks that per-branch stacks (common trunk plus branch-specific
/// layers) keep the same receptive-field center for the same top unit.
/// Beyond the shared prefix every layer must satisfy `k = 2p + 1` and
/// `m = 1`; centers are additionally compared numerically.
pub fn centers_aligned(branches: &[Vec<LayerSpec>]) -> AlignmentReport {
    let mut offenses = Vec::new();
    if branches.len() > 1 {
        let prefix = common_prefix_len(branches);
        for (b, stack) in branches.iter().enumerate() {
            for (l, layer) in stack.iter().enumerate().skip(prefix) {
                if layer.kernel != 2 * layer.padding + 1 {
                    offenses.push(AlignmentOffense {
                        branch: b,
                        layer: l,
                        reason: format!(
                            "kernel {} != 2*padding {} + 1",
                            layer.kernel, layer.padding
                        ),
                    });
                }
                if layer.stride != 1 {
                    offenses.push(AlignmentOffense {
                        branch: b,
                        layer: l,
                        reason: format!("stride {} != 1", layer.stride),
                    });
                }
            }
        }
        // Numerical cross-check at two top positions.
        for top in [0.0, 3.0] {
            let centers: Vec<f64> = branches
                .iter()
                .map(|s| receptive_field(s, top).center)
                .collect();
            for (b, &c) in centers.iter().enumerate().skip(1) {
                if (c - centers[0]).abs() > 1e-9 {
                    offenses.push(AlignmentOffense {
                        branch: b,
                        layer: branches[b].len().saturating_sub(1),
                        reason: format!(
                            "center {} differs from branch 0 center {} at top index {}",
                            c, centers[0], top
                        ),
                    });
                }
            }
        }
    }
    AlignmentReport { aligned: offenses.is_empty(), offenses }
}

fn common_prefix_len(branches: &[Vec<LayerSpec>]) -> usize {
    let min_len = branches.iter().map(|s| s.len()).min().unwrap_or(0);
    let mut n = 0;
    'outer: while n < min_len {
        let first = branches[0][n];
        for stack in &branches[1..] {
            if stack[n] != first {
                break 'outer;
            }
        }
        n += 1;
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(k: usize, m: usize, p: usize) -> LayerSpec {
        LayerSpec::new(k, m, p).unwrap()
    }

    #[test]
    fn single_layer_unrolling() {
        let rf = receptive_field(&[layer(3, 1, 1)], 0.0);
        assert_eq!(rf.size, 3);
        assert!((rf.center - 0.0).abs() < 1e-12);
    }

    #[test]
    fn two_stride2_layers() {
        // Hand unrolling: r = (3 - 1) * 2 + 3 = 7 for the lower layer
        // after the upper contributes r = 3.
        let stack = [layer(3, 2, 1), layer(3, 2, 1)];
        let rf = receptive_field(&stack, 0.0);
        assert_eq!(rf.size, 7);
    }

    #[test]
    fn centered_stacks_preserve_coordinates() {
        let stack = [layer(3, 1, 1), layer(5, 1, 2), layer(7, 1, 3)];
        for top in [0.0, 1.0, 9.0, 40.0] {
            let rf = receptive_field(&stack, top);
            assert_eq!(rf.center, top);
        }
    }

    #[test]
    fn empty_stack_is_identity() {
        let rf = receptive_field(&[], 5.0);
        assert_eq!(rf.size, 1);
        assert_eq!(rf.center, 5.0);
    }

    #[test]
    fn enlargement_formula() {
        let stack = [layer(3, 2, 1), layer(3, 1, 1), layer(3, 1, 1)];
        // Delta k = 2 at the layer above one stride-2 layer.
        assert_eq!(enlargement(&stack, 1, 2).unwrap(), 4);
        assert_eq!(enlargement(&stack, 1, 0).unwrap(), 0);
        assert_eq!(enlargement(&stack, 0, 2).unwrap(), 2);
        assert!(matches!(
            enlargement(&stack, 3, 1),
            Err(RfError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn enlargement_consistent_with_unrolling() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let n = rng.random_range(1..6);
            let stack: Vec<LayerSpec> = (0..n)
                .map(|_| {
                    layer(
                        rng.random_range(1..6),
                        rng.random_range(1..4),
                        rng.random_range(0..3),
                    )
                })
                .collect();
            let idx = rng.random_range(0..n);
            let dk = rng.random_range(0..4usize);
            let mut modified = stack.clone();
            modified[idx].kernel += dk;
            let base = receptive_field(&stack, 0.0).size;
            let grown = receptive_field(&modified, 0.0).size;
            assert_eq!(grown - base, enlargement(&stack, idx, dk).unwrap());
        }
    }

    #[test]
    fn size_monotone_in_kernel_and_stride() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let n = rng.random_range(1..5);
            let stack: Vec<LayerSpec> = (0..n)
                .map(|_| {
                    layer(
                        rng.random_range(1..5),
                        rng.random_range(1..3),
                        rng.random_range(0..2),
                    )
                })
                .collect();
            let base = receptive_field(&stack, 0.0).size;
            for i in 0..n {
                let mut bigger = stack.clone();
                bigger[i].kernel += 1;
                assert!(receptive_field(&bigger, 0.0).size >= base);
                let mut strided = stack.clone();
                strided[i].stride += 1;
                assert!(receptive_field(&strided, 0.0).size >= base);
            }
        }
    }

    #[test]
    fn aligned_branch_family() {
        let trunk = vec![layer(3, 1, 1), layer(2, 2, 0)];
        let branches: Vec<Vec<LayerSpec>> = [3usize, 5, 7]
            .iter()
            .map(|&k| {
                let mut s = trunk.clone();
                s.push(layer(k, 1, (k - 1) / 2));
                s
            })
            .collect();
        let report = centers_aligned(&branches);
        assert!(report.aligned, "{:?}", report.offenses);
    }

    #[test]
    fn strided_branch_rejected() {
        let trunk = vec![layer(3, 1, 1)];
        let mut ok = trunk.clone();
        ok.push(layer(3, 1, 1));
        let mut bad = trunk.clone();
        bad.push(layer(3, 2, 1));
        let report = centers_aligned(&[ok, bad]);
        assert!(!report.aligned);
        assert!(report
            .offenses
            .iter()
            .any(|o| o.branch == 1 && o.layer == 1 && o.reason.contains("stride")));
    }

    #[test]
    fn identical_branches_aligned() {
        let stack = vec![layer(3, 2, 1), layer(5, 1, 2)];
        let report = centers_aligned(&[stack.clone(), stack]);
        assert!(report.aligned);
    }

    #[test]
    fn clipping_flag() {
        let rf = ReceptiveField { size: 7, center: 1.0 };
        assert!(rf.clips(100));
        let rf = ReceptiveField { size: 3, center: 50.0 };
        assert!(!rf.clips(100));
    }
}
