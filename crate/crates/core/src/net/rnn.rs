//! LSTM cells, bidirectional wrappers, and residual recurrent layers
//! with full backpropagation through time.

use ndarray::{s, Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;

use super::layers::{Linear, LinearCache};
use super::{glorot, NetError, ParamSlices};

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Single-direction LSTM. Gate blocks are stacked in the order input,
/// forget, candidate, output inside `wx`, `wh`, and `b`; the forget
/// bias starts at +1.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    pub input_dim: usize,
    pub hidden: usize,
    pub wx: Array2<f64>,
    pub wh: Array2<f64>,
    pub b: Array1<f64>,
}

pub struct LstmCache {
    x: Array2<f64>,
    /// Post-activation gate values per step, `[T, 4H]`.
    gates: Array2<f64>,
    c: Array2<f64>,
    tanh_c: Array2<f64>,
    h: Array2<f64>,
}

impl Lstm {
    pub fn new(rng: &mut ChaCha8Rng, input_dim: usize, hidden: usize) -> Self {
        let mut b = Array1::zeros(4 * hidden);
        for i in hidden..2 * hidden {
            b[i] = 1.0;
        }
        Self {
            input_dim,
            hidden,
            wx: glorot(rng, 4 * hidden, input_dim),
            wh: glorot(rng, 4 * hidden, hidden),
            b,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            input_dim: self.input_dim,
            hidden: self.hidden,
            wx: Array2::zeros(self.wx.dim()),
            wh: Array2::zeros(self.wh.dim()),
            b: Array1::zeros(self.b.len()),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, LstmCache), NetError> {
        let steps = x.nrows();
        if steps == 0 {
            return Err(NetError::EmptySequence);
        }
        if x.ncols() != self.input_dim {
            return Err(NetError::ShapeMismatch {
                expected: vec![self.input_dim],
                got: vec![x.ncols()],
            });
        }
        let hh = self.hidden;
        // Input contribution for the whole sequence in one product.
        let xg = x.dot(&self.wx.t());
        let mut gates = Array2::zeros((steps, 4 * hh));
        let mut c = Array2::zeros((steps, hh));
        let mut tanh_c = Array2::zeros((steps, hh));
        let mut h = Array2::zeros((steps, hh));
        let mut h_prev = Array1::zeros(hh);
        let mut c_prev = Array1::<f64>::zeros(hh);
        for t in 0..steps {
            let rec = self.wh.dot(&h_prev);
            for j in 0..4 * hh {
                let pre = xg[(t, j)] + rec[j] + self.b[j];
                gates[(t, j)] = if j / hh == 2 { pre.tanh() } else { sigmoid(pre) };
            }
            for j in 0..hh {
                let i = gates[(t, j)];
                let f = gates[(t, hh + j)];
                let g = gates[(t, 2 * hh + j)];
                let o = gates[(t, 3 * hh + j)];
                let cv = f * c_prev[j] + i * g;
                c[(t, j)] = cv;
                let tc = cv.tanh();
                tanh_c[(t, j)] = tc;
                h[(t, j)] = o * tc;
            }
            h_prev.assign(&h.row(t));
            c_prev.assign(&c.row(t));
        }
        let out = h.clone();
        Ok((out, LstmCache { x: x.clone(), gates, c, tanh_c, h }))
    }

    /// BPTT; accumulates parameter gradients into `grad`, returns the
    /// input-sequence gradient.
    pub fn backward(&self, cache: &LstmCache, gy: &Array2<f64>, grad: &mut Lstm) -> Array2<f64> {
        let steps = cache.x.nrows();
        let hh = self.hidden;
        let mut dgates = Array2::zeros((steps, 4 * hh));
        let mut dh_next = Array1::zeros(hh);
        let mut dc_next = Array1::<f64>::zeros(hh);
        for t in (0..steps).rev() {
            let mut dpre = Array1::zeros(4 * hh);
            for j in 0..hh {
                let dh = gy[(t, j)] + dh_next[j];
                let i = cache.gates[(t, j)];
                let f = cache.gates[(t, hh + j)];
                let g = cache.gates[(t, 2 * hh + j)];
                let o = cache.gates[(t, 3 * hh + j)];
                let tc = cache.tanh_c[(t, j)];
                let dc = dc_next[j] + dh * o * (1.0 - tc * tc);
                let c_prev = if t > 0 { cache.c[(t - 1, j)] } else { 0.0 };
                dpre[j] = dc * g * i * (1.0 - i);
                dpre[hh + j] = dc * c_prev * f * (1.0 - f);
                dpre[2 * hh + j] = dc * i * (1.0 - g * g);
                dpre[3 * hh + j] = dh * tc * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            dh_next = self.wh.t().dot(&dpre);
            dgates.row_mut(t).assign(&dpre);
        }
        grad.wx += &dgates.t().dot(&cache.x);
        grad.b += &dgates.sum_axis(Axis(0));
        // Recurrent weights see h shifted one step back.
        let mut h_prev = Array2::zeros((steps, hh));
        if steps > 1 {
            h_prev
                .slice_mut(s![1.., ..])
                .assign(&cache.h.slice(s![..steps - 1, ..]));
        }
        grad.wh += &dgates.t().dot(&h_prev);
        dgates.dot(&self.wx)
    }
}

impl ParamSlices for Lstm {
    fn param_slices(&self) -> Vec<&[f64]> {
        vec![
            self.wx.as_slice().expect("contiguous"),
            self.wh.as_slice().expect("contiguous"),
            self.b.as_slice().expect("contiguous"),
        ]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.wx.as_slice_mut().expect("contiguous"),
            self.wh.as_slice_mut().expect("contiguous"),
            self.b.as_slice_mut().expect("contiguous"),
        ]
    }

    fn param_names(&self, prefix: &str) -> Vec<String> {
        vec![
            format!("{prefix}.wx"),
            format!("{prefix}.wh"),
            format!("{prefix}.b"),
        ]
    }
}

fn reverse_rows(x: &Array2<f64>) -> Array2<f64> {
    x.slice(s![..;-1, ..]).to_owned()
}

/// Bidirectional LSTM: a forward and a reversed pass, outputs
/// concatenated per frame to width `2H`.
#[derive(Debug, Clone, PartialEq)]
pub struct Blstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

pub struct BlstmCache {
    fwd: LstmCache,
    bwd: LstmCache,
}

impl Blstm {
    pub fn new(rng: &mut ChaCha8Rng, input_dim: usize, hidden: usize) -> Self {
        Self {
            fwd: Lstm::new(rng, input_dim, hidden),
            bwd: Lstm::new(rng, input_dim, hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden
    }

    pub fn zeros_like(&self) -> Self {
        Self { fwd: self.fwd.zeros_like(), bwd: self.bwd.zeros_like() }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, BlstmCache), NetError> {
        let (yf, cf) = self.fwd.forward(x)?;
        let xr = reverse_rows(x);
        let (yb_r, cb) = self.bwd.forward(&xr)?;
        let yb = reverse_rows(&yb_r);
        let steps = x.nrows();
        let hh = self.fwd.hidden;
        let mut out = Array2::zeros((steps, 2 * hh));
        out.slice_mut(s![.., ..hh]).assign(&yf);
        out.slice_mut(s![.., hh..]).assign(&yb);
        Ok((out, BlstmCache { fwd: cf, bwd: cb }))
    }

    pub fn backward(&self, cache: &BlstmCache, gy: &Array2<f64>, grad: &mut Blstm) -> Array2<f64> {
        let hh = self.fwd.hidden;
        let gf = gy.slice(s![.., ..hh]).to_owned();
        let gb = gy.slice(s![.., hh..]).to_owned();
        let dxf = self.fwd.backward(&cache.fwd, &gf, &mut grad.fwd);
        let dxb_r = self.bwd.backward(&cache.bwd, &reverse_rows(&gb), &mut grad.bwd);
        dxf + reverse_rows(&dxb_r)
    }
}

impl ParamSlices for Blstm {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = self.fwd.param_slices();
        out.extend(self.bwd.param_slices());
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.fwd.param_slices_mut();
        out.extend(self.bwd.param_slices_mut());
        out
    }

    fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut out = self.fwd.param_names(&format!("{prefix}.fwd"));
        out.extend(self.bwd.param_names(&format!("{prefix}.bwd")));
        out
    }
}

/// One residual layer: the recurrent output is projected back to the
/// input width so the skip addition is well-typed.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlstm {
    pub blstm: Blstm,
    pub proj: Linear,
}

pub struct ResidualBlstmCache {
    blstm: BlstmCache,
    proj: LinearCache,
}

impl ResidualBlstm {
    pub fn new(rng: &mut ChaCha8Rng, width: usize, hidden: usize) -> Self {
        Self {
            blstm: Blstm::new(rng, width, hidden),
            proj: Linear::new(rng, 2 * hidden, width, true),
        }
    }

    /// The recurrent transform alone, before the skip addition.
    pub fn transform(&self, x: &Array2<f64>) -> Result<Array2<f64>, NetError> {
        let (mid, _) = self.blstm.forward(x)?;
        Ok(self.proj.forward(&mid)?.0)
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, ResidualBlstmCache), NetError> {
        let (mid, bc) = self.blstm.forward(x)?;
        let (proj, pc) = self.proj.forward(&mid)?;
        Ok((proj + x, ResidualBlstmCache { blstm: bc, proj: pc }))
    }

    pub fn backward(
        &self,
        cache: &ResidualBlstmCache,
        gy: &Array2<f64>,
        grad: &mut ResidualBlstm,
    ) -> Array2<f64> {
        let dmid = self.proj.backward(&cache.proj, gy, &mut grad.proj);
        let dx = self.blstm.backward(&cache.blstm, &dmid, &mut grad.blstm);
        dx + gy
    }

    pub fn zeros_like(&self) -> Self {
        Self { blstm: self.blstm.zeros_like(), proj: self.proj.zeros_like() }
    }
}

impl ParamSlices for ResidualBlstm {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = self.blstm.param_slices();
        out.extend(self.proj.param_slices());
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.blstm.param_slices_mut();
        out.extend(self.proj.param_slices_mut());
        out
    }

    fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut out = self.blstm.param_names(&format!("{prefix}.blstm"));
        out.extend(self.proj.param_names(&format!("{prefix}.proj")));
        out
    }
}

/// Unidirectional counterpart of [`ResidualBlstm`], for sequence
/// models that must only look backwards.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualLstm {
    pub lstm: Lstm,
    pub proj: Linear,
}

pub struct ResidualLstmCache {
    lstm: LstmCache,
    proj: LinearCache,
}

impl ResidualLstm {
    pub fn new(rng: &mut ChaCha8Rng, width: usize, hidden: usize) -> Self {
        Self {
            lstm: Lstm::new(rng, width, hidden),
            proj: Linear::new(rng, hidden, width, true),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, ResidualLstmCache), NetError> {
        let (mid, lc) = self.lstm.forward(x)?;
        let (proj, pc) = self.proj.forward(&mid)?;
        Ok((proj + x, ResidualLstmCache { lstm: lc, proj: pc }))
    }

    pub fn backward(
        &self,
        cache: &ResidualLstmCache,
        gy: &Array2<f64>,
        grad: &mut ResidualLstm,
    ) -> Array2<f64> {
        let dmid = self.proj.backward(&cache.proj, gy, &mut grad.proj);
        let dx = self.lstm.backward(&cache.lstm, &dmid, &mut grad.lstm);
        dx + gy
    }

    pub fn zeros_like(&self) -> Self {
        Self { lstm: self.lstm.zeros_like(), proj: self.proj.zeros_like() }
    }
}

impl ParamSlices for ResidualLstm {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = self.lstm.param_slices();
        out.extend(self.proj.param_slices());
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.lstm.param_slices_mut();
        out.extend(self.proj.param_slices_mut());
        out
    }

    fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut out = self.lstm.param_names(&format!("{prefix}.lstm"));
        out.extend(self.proj.param_names(&format!("{prefix}.proj")));
        out
    }
}

/// Residual recurrent layer in either direction mode.
#[derive(Debug, Clone, PartialEq)]
pub enum SeqLayer {
    Bi(ResidualBlstm),
    Uni(ResidualLstm),
}

pub enum SeqLayerCache {
    Bi(ResidualBlstmCache),
    Uni(ResidualLstmCache),
}

impl SeqLayer {
    pub fn new(rng: &mut ChaCha8Rng, width: usize, hidden: usize, bidirectional: bool) -> Self {
        if bidirectional {
            Self::Bi(ResidualBlstm::new(rng, width, hidden))
        } else {
            Self::Uni(ResidualLstm::new(rng, width, hidden))
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, SeqLayerCache), NetError> {
        match self {
            Self::Bi(l) => l.forward(x).map(|(y, c)| (y, SeqLayerCache::Bi(c))),
            Self::Uni(l) => l.forward(x).map(|(y, c)| (y, SeqLayerCache::Uni(c))),
        }
    }

    pub fn backward(&self, cache: &SeqLayerCache, gy: &Array2<f64>, grad: &mut SeqLayer) -> Array2<f64> {
        match (self, cache, grad) {
            (Self::Bi(l), SeqLayerCache::Bi(c), Self::Bi(g)) => l.backward(c, gy, g),
            (Self::Uni(l), SeqLayerCache::Uni(c), Self::Uni(g)) => l.backward(c, gy, g),
            _ => unreachable!("mismatched layer/cache/grad variants"),
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            Self::Bi(l) => Self::Bi(l.zeros_like()),
            Self::Uni(l) => Self::Uni(l.zeros_like()),
        }
    }
}

impl ParamSlices for SeqLayer {
    fn param_slices(&self) -> Vec<&[f64]> {
        match self {
            Self::Bi(l) => l.param_slices(),
            Self::Uni(l) => l.param_slices(),
        }
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Self::Bi(l) => l.param_slices_mut(),
            Self::Uni(l) => l.param_slices_mut(),
        }
    }

    fn param_names(&self, prefix: &str) -> Vec<String> {
        match self {
            Self::Bi(l) => l.param_names(prefix),
            Self::Uni(l) => l.param_names(prefix),
        }
    }
}

/// Runs a residual stack; identity for zero layers.
pub fn residual_stack_forward(
    layers: &[ResidualBlstm],
    x: &Array2<f64>,
) -> Result<(Array2<f64>, Vec<ResidualBlstmCache>), NetError> {
    let mut caches = Vec::with_capacity(layers.len());
    let mut cur = x.clone();
    for layer in layers {
        let (next, cache) = layer.forward(&cur)?;
        caches.push(cache);
        cur = next;
    }
    Ok((cur, caches))
}
