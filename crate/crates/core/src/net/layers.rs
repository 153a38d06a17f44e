//! Convolution, pooling, activation, vertical collapse, and affine
//! layers with explicit backward passes.

use ndarray::{Array1, Array2, Array3, Axis};
use rand_chacha::ChaCha8Rng;

use super::{glorot, NetError, ParamSlices};

/// 2D cross-correlation with zero padding. Weights are stored as
/// `[out_channels, in_channels * kh * kw]` so forward and backward are
/// single matrix products against the im2col matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

pub struct ConvCache {
    cols: Array2<f64>,
    in_h: usize,
    in_w: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Self {
        let (kh, kw) = kernel;
        let w = glorot(rng, out_channels, in_channels * kh * kw);
        Self {
            in_channels,
            out_channels,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
            w,
            b: Array1::zeros(out_channels),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: Array2::zeros(self.w.dim()),
            b: Array1::zeros(self.b.len()),
            ..*self
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.ph - self.kh) / self.sh + 1,
            (w + 2 * self.pw - self.kw) / self.sw + 1,
        )
    }

    fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (_, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let mut cols = Array2::zeros((self.in_channels * self.kh * self.kw, oh * ow));
        for c in 0..self.in_channels {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.sh + ky) as isize - self.ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.sw + kx) as isize - self.pw as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[(row, oy * ow + ox)] = x[(c, iy as usize, ix as usize)];
                        }
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&self, x: &Array3<f64>) -> Result<(Array3<f64>, ConvCache), NetError> {
        let (c, h, w) = x.dim();
        if c != self.in_channels || h + 2 * self.ph < self.kh || w + 2 * self.pw < self.kw {
            return Err(NetError::ShapeMismatch {
                expected: vec![self.in_channels, self.kh, self.kw],
                got: vec![c, h, w],
            });
        }
        let (oh, ow) = self.out_hw(h, w);
        let cols = self.im2col(x);
        let mut y_mat = self.w.dot(&cols);
        for (mut row, &bias) in y_mat.outer_iter_mut().zip(self.b.iter()) {
            for v in row.iter_mut() {
                *v += bias;
            }
        }
        let y = y_mat
            .into_shape_with_order((self.out_channels, oh, ow))
            .expect("conv reshape");
        Ok((y, ConvCache { cols, in_h: h, in_w: w }))
    }

    /// Accumulates weight/bias gradients into `grad` and returns the
    /// input gradient.
    pub fn backward(&self, cache: &ConvCache, gy: &Array3<f64>, grad: &mut Conv2d) -> Array3<f64> {
        let (oc, oh, ow) = gy.dim();
        let gy_mat = gy
            .view()
            .into_shape_with_order((oc, oh * ow))
            .expect("grad reshape");
        grad.b += &gy_mat.sum_axis(Axis(1));
        grad.w += &gy_mat.dot(&cache.cols.t());
        let dcols = self.w.t().dot(&gy_mat);
        // col2im scatter-add.
        let (h, w) = (cache.in_h, cache.in_w);
        let mut dx = Array3::zeros((self.in_channels, h, w));
        for c in 0..self.in_channels {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.sh + ky) as isize - self.ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.sw + kx) as isize - self.pw as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dx[(c, iy as usize, ix as usize)] += dcols[(row, oy * ow + ox)];
                        }
                    }
                }
            }
        }
        dx
    }
}

impl ParamSlices for Conv2d {
    fn param_slices(&self) -> Vec<&[f64]> {
        vec![self.w.as_slice().expect("contiguous"), self.b.as_slice().expect("contiguous")]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w.as_slice_mut().expect("contiguous"),
            self.b.as_slice_mut().expect("contiguous"),
        ]
    }

    fn param_names(&self, prefix: &str) -> Vec<String> {
        vec![format!("{prefix}.w"), format!("{prefix}.b")]
    }
}

/// Non-overlapping max pooling with window = stride = `(ph, pw)`;
/// trailing rows/columns that do not fill a window are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool2d {
    pub ph: usize,
    pub pw: usize,
}

pub struct PoolCache {
    argmax: Vec<(usize, usize)>,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

impl MaxPool2d {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h / self.ph, w / self.pw)
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, PoolCache) {
        let (c, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let mut y = Array3::zeros((c, oh, ow));
        let mut argmax = vec![(0usize, 0usize); c * oh * ow];
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = (0usize, 0usize);
                    for dy in 0..self.ph {
                        for dx in 0..self.pw {
                            let iy = oy * self.ph + dy;
                            let ix = ox * self.pw + dx;
                            let v = x[(ci, iy, ix)];
                            if v > best {
                                best = v;
                                at = (iy, ix);
                            }
                        }
                    }
                    y[(ci, oy, ox)] = best;
                    argmax[(ci * oh + oy) * ow + ox] = at;
                }
            }
        }
        (y, PoolCache { argmax, in_h: h, in_w: w, out_h: oh, out_w: ow })
    }

    pub fn backward(&self, cache: &PoolCache, gy: &Array3<f64>) -> Array3<f64> {
        let (c, _, _) = gy.dim();
        let mut dx = Array3::zeros((c, cache.in_h, cache.in_w));
        for ci in 0..c {
            for oy in 0..cache.out_h {
                for ox in 0..cache.out_w {
                    let (iy, ix) = cache.argmax[(ci * cache.out_h + oy) * cache.out_w + ox];
                    dx[(ci, iy, ix)] += gy[(ci, oy, ox)];
                }
            }
        }
        dx
    }
}

/// ReLU over a feature-map tensor; the mask is kept for backward.
pub fn relu_forward(x: &Array3<f64>) -> (Array3<f64>, Vec<bool>) {
    let mask: Vec<bool> = x.iter().map(|&v| v > 0.0).collect();
    let y = x.mapv(|v| v.max(0.0));
    (y, mask)
}

pub fn relu_backward(gy: &Array3<f64>, mask: &[bool]) -> Array3<f64> {
    let mut dx = gy.clone();
    for (v, &m) in dx.iter_mut().zip(mask) {
        if !m {
            *v = 0.0;
        }
    }
    dx
}

/// Turns `N x 1 x W` feature maps into a length-W sequence of N-wide
/// frames; frame `t` concatenates the channel values at column `t`.
/// Any height above one is a configuration error carrying the name of
/// the offending stack.
pub fn collapse_vertical(maps: &Array3<f64>, stack: &str) -> Result<Array2<f64>, NetError> {
    let (n, h, w) = maps.dim();
    if h != 1 {
        return Err(NetError::NotCollapsed { height: h, stack: stack.to_string() });
    }
    let mut seq = Array2::zeros((w, n));
    for t in 0..w {
        for c in 0..n {
            seq[(t, c)] = maps[(c, 0, t)];
        }
    }
    Ok(seq)
}

/// Gradient of [`collapse_vertical`]: scatters frame gradients back
/// into map layout.
pub fn collapse_vertical_backward(gseq: &Array2<f64>) -> Array3<f64> {
    let (w, n) = gseq.dim();
    let mut dmaps = Array3::zeros((n, 1, w));
    for t in 0..w {
        for c in 0..n {
            dmaps[(c, 0, t)] = gseq[(t, c)];
        }
    }
    dmaps
}

/// Affine map over frame rows: `y = x W^T + b`. With `bias` disabled
/// this doubles as the embedding layer (a bare matrix).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Option<Array1<f64>>,
}

pub struct LinearCache {
    x: Array2<f64>,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self {
            w: glorot(rng, out_dim, in_dim),
            b: bias.then(|| Array1::zeros(out_dim)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: Array2::zeros(self.w.dim()),
            b: self.b.as_ref().map(|b| Array1::zeros(b.len())),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, LinearCache), NetError> {
        if x.ncols() != self.in_dim() {
            return Err(NetError::ShapeMismatch {
                expected: vec![self.in_dim()],
                got: vec![x.ncols()],
            });
        }
        let mut y = x.dot(&self.w.t());
        if let Some(b) = &self.b {
            for mut row in y.outer_iter_mut() {
                row += b;
            }
        }
        Ok((y, LinearCache { x: x.clone() }))
    }

    pub fn backward(&self, cache: &LinearCache, gy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &gy.t().dot(&cache.x);
        if let Some(gb) = grad.b.as_mut() {
            *gb += &gy.sum_axis(Axis(0));
        }
        gy.dot(&self.w)
    }
}

impl ParamSlices for Linear {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = vec![self.w.as_slice().expect("contiguous")];
        if let Some(b) = &self.b {
            out.push(b.as_slice().expect("contiguous"));
        }
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.w.as_slice_mut().expect("contiguous")];
        if let Some(b) = &mut self.b {
            out.push(b.as_slice_mut().expect("contiguous"));
        }
        out
    }

    fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut out = vec![format!("{prefix}.w")];
        if self.b.is_some() {
            out.push(format!("{prefix}.b"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_maps(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
        let mut x = Array3::zeros((c, h, w));
        for v in x.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        x
    }

    #[test]
    fn identity_conv_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let mut conv = Conv2d::new(&mut rng, 2, 2, (1, 1), (1, 1), (0, 0));
        conv.w.fill(0.0);
        conv.w[(0, 0)] = 1.0;
        conv.w[(1, 1)] = 1.0;
        conv.b.fill(0.0);
        let x = random_maps(&mut rng, 2, 4, 5);
        let (y, _) = conv.forward(&x).unwrap();
        assert!(x.iter().zip(y.iter()).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn conv_output_shape_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        for (h, w, k, m, p) in [(5, 7, 3, 1, 1), (8, 8, 3, 2, 1), (9, 4, 2, 2, 0)] {
            let conv = Conv2d::new(&mut rng, 1, 3, (k, k), (m, m), (p, p));
            let x = random_maps(&mut rng, 1, h, w);
            let (y, _) = conv.forward(&x).unwrap();
            let expect = ((h + 2 * p - k) / m + 1, (w + 2 * p - k) / m + 1);
            assert_eq!((y.dim().1, y.dim().2), expect);
        }
    }

    /// Central-difference check of conv gradients through a fixed
    /// random linear readout.
    #[test]
    fn conv_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let conv = Conv2d::new(&mut rng, 2, 3, (3, 3), (1, 1), (1, 1));
        let x = random_maps(&mut rng, 2, 5, 7);
        let readout = random_maps(&mut rng, 3, 5, 7);
        let loss = |c: &Conv2d, x: &Array3<f64>| -> f64 {
            let (y, _) = c.forward(x).unwrap();
            (&y * &readout).sum()
        };
        let (y, cache) = conv.forward(&x).unwrap();
        assert_eq!(y.dim(), (3, 5, 7));
        let mut grad = conv.zeros_like();
        let dx = conv.backward(&cache, &readout, &mut grad);
        let eps = 1e-5;
        let mut max_rel = 0.0f64;
        // Weight and bias gradients.
        let mut probe = conv.clone();
        for slot in 0..2 {
            let n = probe.param_slices()[slot].len();
            for i in (0..n).step_by(7) {
                let orig = probe.param_slices()[slot][i];
                probe.param_slices_mut()[slot][i] = orig + eps;
                let up = loss(&probe, &x);
                probe.param_slices_mut()[slot][i] = orig - eps;
                let down = loss(&probe, &x);
                probe.param_slices_mut()[slot][i] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let analytic = grad.param_slices()[slot][i];
                let denom = numeric.abs().max(analytic.abs()).max(1e-8);
                max_rel = max_rel.max((numeric - analytic).abs() / denom);
            }
        }
        // Input gradient.
        for i in (0..x.len()).step_by(11) {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += eps;
            xm.as_slice_mut().unwrap()[i] -= eps;
            let numeric = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps);
            let analytic = dx.as_slice().unwrap()[i];
            let denom = numeric.abs().max(analytic.abs()).max(1e-8);
            max_rel = max_rel.max((numeric - analytic).abs() / denom);
        }
        assert!(max_rel < 1e-4, "max rel err {max_rel}");
    }

    #[test]
    fn maxpool_forward_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let pool = MaxPool2d { ph: 2, pw: 2 };
        let x = random_maps(&mut rng, 2, 4, 6);
        let (y, cache) = pool.forward(&x);
        assert_eq!(y.dim(), (2, 2, 3));
        for ci in 0..2 {
            for oy in 0..2 {
                for ox in 0..3 {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            best = best.max(x[(ci, oy * 2 + dy, ox * 2 + dx)]);
                        }
                    }
                    assert_eq!(y[(ci, oy, ox)], best);
                }
            }
        }
        let gy = random_maps(&mut rng, 2, 2, 3);
        let dx = pool.backward(&cache, &gy);
        // Mass is conserved; only argmax cells receive gradient.
        assert!((dx.sum() - gy.sum()).abs() < 1e-12);
        let nonzero = dx.iter().filter(|v| **v != 0.0).count();
        assert!(nonzero <= 2 * 2 * 3);
    }

    #[test]
    fn collapse_vertical_frames_match_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(69);
        let x = random_maps(&mut rng, 2, 1, 3);
        let seq = collapse_vertical(&x, "trunk").unwrap();
        assert_eq!(seq.dim(), (3, 2));
        for t in 0..3 {
            for c in 0..2 {
                assert_eq!(seq[(t, c)], x[(c, 0, t)]);
            }
        }
        // Gradient scatters straight back.
        let g = collapse_vertical_backward(&seq);
        assert_eq!(g, x);
        // Height above one is rejected with the stack name.
        let tall = random_maps(&mut rng, 2, 2, 3);
        match collapse_vertical(&tall, "trunk") {
            Err(NetError::NotCollapsed { height: 2, stack }) => assert_eq!(stack, "trunk"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn linear_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let lin = Linear::new(&mut rng, 4, 3, true);
        let mut x = Array2::zeros((5, 4));
        for v in x.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let mut readout = Array2::zeros((5, 3));
        for v in readout.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let loss = |l: &Linear, x: &Array2<f64>| (&l.forward(x).unwrap().0 * &readout).sum();
        let (_, cache) = lin.forward(&x).unwrap();
        let mut grad = lin.zeros_like();
        let dx = lin.backward(&cache, &readout, &mut grad);
        let eps = 1e-5;
        let mut max_rel = 0.0f64;
        let mut probe = lin.clone();
        for slot in 0..2 {
            let n = probe.param_slices()[slot].len();
            for i in 0..n {
                let orig = probe.param_slices()[slot][i];
                probe.param_slices_mut()[slot][i] = orig + eps;
                let up = loss(&probe, &x);
                probe.param_slices_mut()[slot][i] = orig - eps;
                let down = loss(&probe, &x);
                probe.param_slices_mut()[slot][i] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let analytic = grad.param_slices()[slot][i];
                let denom = numeric.abs().max(analytic.abs()).max(1e-8);
                max_rel = max_rel.max((numeric - analytic).abs() / denom);
            }
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += eps;
            xm.as_slice_mut().unwrap()[i] -= eps;
            let numeric = (loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * eps);
            let analytic = dx.as_slice().unwrap()[i];
            let denom = numeric.abs().max(analytic.abs()).max(1e-8);
            max_rel = max_rel.max((numeric - analytic).abs() / denom);
        }
        assert!(max_rel < 1e-4, "max rel err {max_rel}");
    }

    #[test]
    fn relu_masks_negative_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let x = random_maps(&mut rng, 1, 3, 3);
        let (y, mask) = relu_forward(&x);
        assert!(y.iter().all(|&v| v >= 0.0));
        let gy = random_maps(&mut rng, 1, 3, 3);
        let dx = relu_backward(&gy, &mask);
        for ((&xv, &gv), &dv) in x.iter().zip(gy.iter()).zip(dx.iter()) {
            if xv > 0.0 {
                assert_eq!(dv, gv);
            } else {
                assert_eq!(dv, 0.0);
            }
        }
    }
}
