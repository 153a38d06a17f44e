//! The recognizer graph (conv trunk, center-aligned multi-scale
//! branches with residual BLSTM stacks, shared classifier) and the
//! rescoring sequence model (embedding, recurrent stack, classifier).

use ndarray::{s, Array2, Array3};
use rand_chacha::ChaCha8Rng;

use crate::ctc::ProbSequence;
use crate::rfgeom::{self, LayerSpec};

use super::layers::{
    collapse_vertical, collapse_vertical_backward, relu_backward, relu_forward, Conv2d,
    ConvCache, Linear, LinearCache, MaxPool2d, PoolCache,
};
use super::rnn::{ResidualBlstm, ResidualBlstmCache, SeqLayer, SeqLayerCache};
use super::{NetError, ParamSlices};

/// One trunk element as named in run configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrunkItem {
    Conv { channels: usize },
    Pool { h: usize, w: usize },
}

/// Everything needed to build a recognizer graph.
#[derive(Debug, Clone, PartialEq)]
pub struct RecognizerSpec {
    pub in_channels: usize,
    pub in_height: usize,
    /// Class count including the blank.
    pub classes: usize,
    pub trunk: Vec<TrunkItem>,
    pub branch_kernels: Vec<usize>,
    pub branch_channels: usize,
    pub blstm_hidden: usize,
    pub blstm_layers: usize,
    /// Standardize each input channel to zero mean / unit variance
    /// before the trunk.
    pub standardize: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct TrunkBlock {
    conv: Conv2d,
    pool: Option<MaxPool2d>,
}

#[derive(Debug, Clone, PartialEq)]
struct Branch {
    conv: Conv2d,
    rnn: Vec<ResidualBlstm>,
}

/// Multi-branch convolutional-recurrent recognizer. Branch convs all
/// read the shared trunk output; their kernel sizes differ but keep
/// stride one and centering padding, so every branch sees the same
/// receptive-field centers at each time step.
#[derive(Debug, Clone, PartialEq)]
pub struct Recognizer {
    spec: RecognizerSpec,
    trunk: Vec<TrunkBlock>,
    branches: Vec<Branch>,
    classifier: Linear,
}

pub struct RecognizerCache {
    trunk: Vec<(ConvCache, Vec<bool>, Option<PoolCache>)>,
    trunk_out: Array3<f64>,
    branches: Vec<(ConvCache, Vec<bool>, Vec<ResidualBlstmCache>)>,
    branch_widths: Vec<usize>,
    classifier: LinearCache,
}

impl Recognizer {
    /// Builds the graph and verifies its geometry: the trunk must
    /// reduce the input height to one (vertical 2x1 pools are appended
    /// automatically while the height is even) and the branch family
    /// must pass the center-alignment check.
    pub fn build(spec: &RecognizerSpec, rng: &mut ChaCha8Rng) -> Result<Self, NetError> {
        if spec.branch_kernels.is_empty() {
            return Err(NetError::BadSpec("at least one branch is required".into()));
        }
        if spec.classes < 2 {
            return Err(NetError::BadSpec("need at least one label class".into()));
        }
        let mut trunk = Vec::new();
        let mut specs_w: Vec<LayerSpec> = Vec::new();
        let mut channels = spec.in_channels;
        let mut height = spec.in_height;
        let mut pending_pool: Option<MaxPool2d> = None;
        let mut stack_desc = String::new();
        for item in &spec.trunk {
            match *item {
                TrunkItem::Conv { channels: out } => {
                    if let Some(pool) = pending_pool.take() {
                        return Err(NetError::BadSpec(format!(
                            "pool {}x{} without preceding conv",
                            pool.ph, pool.pw
                        )));
                    }
                    let conv = Conv2d::new(rng, channels, out, (3, 3), (1, 1), (1, 1));
                    specs_w.push(LayerSpec { kernel: 3, stride: 1, padding: 1 });
                    channels = out;
                    trunk.push(TrunkBlock { conv, pool: None });
                    stack_desc.push_str(&format!("conv:{out},"));
                }
                TrunkItem::Pool { h, w } => {
                    let block = trunk
                        .last_mut()
                        .ok_or_else(|| NetError::BadSpec("trunk starts with a pool".into()))?;
                    if block.pool.is_some() {
                        return Err(NetError::BadSpec("two pools in a row".into()));
                    }
                    block.pool = Some(MaxPool2d { ph: h, pw: w });
                    if w > 1 {
                        specs_w.push(LayerSpec { kernel: w, stride: w, padding: 0 });
                    }
                    height /= h;
                    stack_desc.push_str(&format!("pool:{h}x{w},"));
                }
            }
        }
        if trunk.is_empty() {
            return Err(NetError::BadSpec("trunk has no conv layers".into()));
        }
        // Collapse the remaining height with vertical pools.
        while height > 1 {
            if height % 2 != 0 {
                return Err(NetError::CannotCollapse {
                    height,
                    stack: stack_desc.trim_end_matches(',').to_string(),
                });
            }
            let block = trunk.last_mut().expect("non-empty trunk");
            match &mut block.pool {
                Some(pool) if pool.pw == 1 => pool.ph *= 2,
                Some(_) | None => {
                    // Attach a fresh vertical pool to a pass-through
                    // 1x1-style block by adding it to a new conv-less
                    // slot is not representable; instead stack the
                    // pool on the last block when free, or grow it.
                    if block.pool.is_none() {
                        block.pool = Some(MaxPool2d { ph: 2, pw: 1 });
                    } else {
                        return Err(NetError::CannotCollapse {
                            height,
                            stack: stack_desc.trim_end_matches(',').to_string(),
                        });
                    }
                }
            }
            height /= 2;
            stack_desc.push_str("pool:2x1,");
        }

        // Branch geometry must keep centers aligned across scales.
        let mut families: Vec<Vec<LayerSpec>> = Vec::new();
        for &k in &spec.branch_kernels {
            if k % 2 == 0 {
                return Err(NetError::MisalignedBranches(format!("even kernel {k}")));
            }
            let mut family = specs_w.clone();
            family.push(LayerSpec { kernel: k, stride: 1, padding: (k - 1) / 2 });
            families.push(family);
        }
        let report = rfgeom::centers_aligned(&families);
        if !report.aligned {
            let first = &report.offenses[0];
            return Err(NetError::MisalignedBranches(format!(
                "branch {} layer {}: {}",
                first.branch, first.layer, first.reason
            )));
        }

        let branches = spec
            .branch_kernels
            .iter()
            .map(|&k| Branch {
                conv: Conv2d::new(
                    rng,
                    channels,
                    spec.branch_channels,
                    (k, k),
                    (1, 1),
                    ((k - 1) / 2, (k - 1) / 2),
                ),
                rnn: (0..spec.blstm_layers)
                    .map(|_| ResidualBlstm::new(rng, spec.branch_channels, spec.blstm_hidden))
                    .collect(),
            })
            .collect();
        let classifier = Linear::new(
            rng,
            spec.branch_kernels.len() * spec.branch_channels,
            spec.classes,
            true,
        );
        Ok(Self { spec: spec.clone(), trunk, branches, classifier })
    }

    pub fn spec(&self) -> &RecognizerSpec {
        &self.spec
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Per-axis layer specs of the trunk (width axis), one entry per
    /// spatially thick layer, for receptive-field reporting.
    pub fn width_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        for block in &self.trunk {
            specs.push(LayerSpec { kernel: 3, stride: 1, padding: 1 });
            if let Some(pool) = &block.pool {
                if pool.pw > 1 {
                    specs.push(LayerSpec { kernel: pool.pw, stride: pool.pw, padding: 0 });
                }
            }
        }
        specs
    }

    /// Width-axis downsampling factor from input to frames.
    pub fn width_stride(&self) -> usize {
        self.width_specs().iter().map(|l| l.stride).product()
    }

    /// Output frame count for an input of the given pixel width.
    pub fn frames_for_width(&self, width: usize) -> usize {
        self.width_specs()
            .iter()
            .fold(width, |w, spec| spec.out_extent(w))
    }

    /// Forward pass to pre-softmax frame logits.
    pub fn forward(&self, x: &Array3<f64>) -> Result<(Array2<f64>, RecognizerCache), NetError> {
        let (c, h, _) = x.dim();
        if c != self.spec.in_channels || h != self.spec.in_height {
            return Err(NetError::ShapeMismatch {
                expected: vec![self.spec.in_channels, self.spec.in_height],
                got: vec![c, h],
            });
        }
        let mut cur = if self.spec.standardize { standardize(x) } else { x.clone() };
        let mut trunk_caches = Vec::with_capacity(self.trunk.len());
        for block in &self.trunk {
            let (conv_out, conv_cache) = block.conv.forward(&cur)?;
            let (act, mask) = relu_forward(&conv_out);
            let (next, pool_cache) = match &block.pool {
                Some(pool) => {
                    let (pooled, cache) = pool.forward(&act);
                    (pooled, Some(cache))
                }
                None => (act, None),
            };
            trunk_caches.push((conv_cache, mask, pool_cache));
            cur = next;
        }
        let trunk_out = cur;

        let mut branch_caches = Vec::with_capacity(self.branches.len());
        let mut branch_outs: Vec<Array2<f64>> = Vec::with_capacity(self.branches.len());
        let mut branch_widths = Vec::with_capacity(self.branches.len());
        for branch in &self.branches {
            let (conv_out, conv_cache) = branch.conv.forward(&trunk_out)?;
            let (act, mask) = relu_forward(&conv_out);
            let mut seq = collapse_vertical(&act, "branch conv")?;
            let mut rnn_caches = Vec::with_capacity(branch.rnn.len());
            for layer in &branch.rnn {
                let (next, cache) = layer.forward(&seq)?;
                rnn_caches.push(cache);
                seq = next;
            }
            branch_widths.push(seq.ncols());
            branch_caches.push((conv_cache, mask, rnn_caches));
            branch_outs.push(seq);
        }

        // Per-frame concatenation across branches.
        let steps = branch_outs[0].nrows();
        let total: usize = branch_widths.iter().sum();
        let mut fused = Array2::zeros((steps, total));
        let mut offset = 0;
        for out in &branch_outs {
            fused
                .slice_mut(s![.., offset..offset + out.ncols()])
                .assign(out);
            offset += out.ncols();
        }
        let (logits, classifier_cache) = self.classifier.forward(&fused)?;
        Ok((
            logits,
            RecognizerCache {
                trunk: trunk_caches,
                trunk_out,
                branches: branch_caches,
                branch_widths,
                classifier: classifier_cache,
            },
        ))
    }

    /// Forward pass to per-frame probabilities.
    pub fn prob_sequence(&self, x: &Array3<f64>) -> Result<ProbSequence, NetError> {
        let (logits, _) = self.forward(x)?;
        Ok(ProbSequence::from_logits(logits.view()))
    }

    /// Backward pass from frame-logit gradients; accumulates into
    /// `grad` (a `zeros_like` twin) and returns nothing because input
    /// gradients are not needed at the image level.
    pub fn backward(&self, cache: &RecognizerCache, dlogits: &Array2<f64>, grad: &mut Recognizer) {
        let dfused = self
            .classifier
            .backward(&cache.classifier, dlogits, &mut grad.classifier);
        let mut dtrunk_out: Array3<f64> = Array3::zeros(cache.trunk_out.dim());
        let mut offset = 0;
        for (bi, ((branch, gbranch), (conv_cache, mask, rnn_caches))) in self
            .branches
            .iter()
            .zip(&mut grad.branches)
            .zip(&cache.branches)
            .enumerate()
        {
            let width = cache.branch_widths[bi];
            let mut dseq = dfused.slice(s![.., offset..offset + width]).to_owned();
            offset += width;
            for ((layer, glayer), lcache) in branch
                .rnn
                .iter()
                .zip(&mut gbranch.rnn)
                .zip(rnn_caches)
                .rev()
            {
                dseq = layer.backward(lcache, &dseq, glayer);
            }
            let dmaps = collapse_vertical_backward(&dseq);
            let dact = relu_backward(&dmaps, mask);
            let dx = branch.conv.backward(conv_cache, &dact, &mut gbranch.conv);
            dtrunk_out += &dx;
        }
        let mut dcur = dtrunk_out;
        for ((block, gblock), (conv_cache, mask, pool_cache)) in self
            .trunk
            .iter()
            .zip(&mut grad.trunk)
            .zip(&cache.trunk)
            .rev()
        {
            let dpool = match (&block.pool, pool_cache) {
                (Some(pool), Some(pc)) => pool.backward(pc, &dcur),
                _ => dcur,
            };
            let dact = relu_backward(&dpool, mask);
            dcur = block.conv.backward(conv_cache, &dact, &mut gblock.conv);
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            trunk: self
                .trunk
                .iter()
                .map(|b| TrunkBlock { conv: b.conv.zeros_like(), pool: b.pool })
                .collect(),
            branches: self
                .branches
                .iter()
                .map(|b| Branch {
                    conv: b.conv.zeros_like(),
                    rnn: b.rnn.iter().map(|l| l.zeros_like()).collect(),
                })
                .collect(),
            classifier: self.classifier.zeros_like(),
        }
    }
}

fn standardize(x: &Array3<f64>) -> Array3<f64> {
    let mut out = x.clone();
    let (c, h, w) = x.dim();
    for ci in 0..c {
        let mut plane = out.slice_mut(s![ci, .., ..]);
        let n = (h * w) as f64;
        let mean = plane.sum() / n;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt().max(1e-12);
        plane.mapv_inplace(|v| (v - mean) / std);
    }
    out
}

impl ParamSlices for Recognizer {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for block in &self.trunk {
            out.extend(block.conv.param_slices());
        }
        for branch in &self.branches {
            out.extend(branch.conv.param_slices());
            for layer in &branch.rnn {
                out.extend(layer.param_slices());
            }
        }
        out.extend(self.classifier.param_slices());
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for block in &mut self.trunk {
            out.extend(block.conv.param_slices_mut());
        }
        for branch in &mut self.branches {
            out.extend(branch.conv.param_slices_mut());
            for layer in &mut branch.rnn {
                out.extend(layer.param_slices_mut());
            }
        }
        out.extend(self.classifier.param_slices_mut());
        out
    }

    fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        for (i, block) in self.trunk.iter().enumerate() {
            out.extend(block.conv.param_names(&format!("{prefix}.trunk{i}")));
        }
        for (bi, branch) in self.branches.iter().enumerate() {
            out.extend(branch.conv.param_names(&format!("{prefix}.branch{bi}.conv")));
            for (li, layer) in branch.rnn.iter().enumerate() {
                out.extend(layer.param_names(&format!("{prefix}.branch{bi}.rnn{li}")));
            }
        }
        out.extend(self.classifier.param_names(&format!("{prefix}.classifier")));
        out
    }
}

/// Spec for the sequence rescoring model.
#[derive(Debug, Clone, PartialEq)]
pub struct LmSpec {
    /// Frame width, always the recognizer's class count.
    pub classes: usize,
    /// Embedding width.
    pub embed: usize,
    pub hidden: usize,
    pub layers: usize,
    pub bidirectional: bool,
}

/// Embedding + recurrent stack + classifier over probability frames.
/// The embedding is a bare matrix, so a one-hot frame selects a row
/// and soft frames mix rows by their confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct LmModel {
    spec: LmSpec,
    embed: Linear,
    rnn: Vec<SeqLayer>,
    classifier: Linear,
}

pub struct LmCache {
    embed: LinearCache,
    rnn: Vec<SeqLayerCache>,
    classifier: LinearCache,
}

impl LmModel {
    pub fn build(spec: &LmSpec, rng: &mut ChaCha8Rng) -> Result<Self, NetError> {
        if spec.classes < 2 {
            return Err(NetError::BadSpec("need at least one label class".into()));
        }
        Ok(Self {
            spec: spec.clone(),
            embed: Linear::new(rng, spec.classes, spec.embed, false),
            rnn: (0..spec.layers)
                .map(|_| SeqLayer::new(rng, spec.embed, spec.hidden, spec.bidirectional))
                .collect(),
            classifier: Linear::new(rng, spec.embed, spec.classes, true),
        })
    }

    pub fn spec(&self) -> &LmSpec {
        &self.spec
    }

    /// Embedding matrix view in `[classes, embed]` orientation.
    pub fn embedding_row(&self, class: usize) -> Vec<f64> {
        self.embed.w.column(class).to_vec()
    }

    pub fn forward(&self, frames: &Array2<f64>) -> Result<(Array2<f64>, LmCache), NetError> {
        if frames.ncols() != self.spec.classes {
            return Err(NetError::ShapeMismatch {
                expected: vec![self.spec.classes],
                got: vec![frames.ncols()],
            });
        }
        let (mut seq, embed_cache) = self.embed.forward(frames)?;
        let mut rnn_caches = Vec::with_capacity(self.rnn.len());
        for layer in &self.rnn {
            let (next, cache) = layer.forward(&seq)?;
            rnn_caches.push(cache);
            seq = next;
        }
        let (logits, classifier_cache) = self.classifier.forward(&seq)?;
        Ok((logits, LmCache { embed: embed_cache, rnn: rnn_caches, classifier: classifier_cache }))
    }

    pub fn prob_sequence(&self, frames: &Array2<f64>) -> Result<ProbSequence, NetError> {
        let (logits, _) = self.forward(frames)?;
        Ok(ProbSequence::from_logits(logits.view()))
    }

    /// Rescores a recognizer output end to end.
    pub fn rescore(&self, p: &ProbSequence) -> Result<ProbSequence, NetError> {
        self.prob_sequence(&p.rows().to_owned())
    }

    pub fn backward(&self, cache: &LmCache, dlogits: &Array2<f64>, grad: &mut LmModel) {
        let mut dseq = self
            .classifier
            .backward(&cache.classifier, dlogits, &mut grad.classifier);
        for ((layer, glayer), lcache) in self
            .rnn
            .iter()
            .zip(&mut grad.rnn)
            .zip(&cache.rnn)
            .rev()
        {
            dseq = layer.backward(lcache, &dseq, glayer);
        }
        self.embed.backward(&cache.embed, &dseq, &mut grad.embed);
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            embed: self.embed.zeros_like(),
            rnn: self.rnn.iter().map(|l| l.zeros_like()).collect(),
            classifier: self.classifier.zeros_like(),
        }
    }
}

impl ParamSlices for LmModel {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = self.embed.param_slices();
        for layer in &self.rnn {
            out.extend(layer.param_slices());
        }
        out.extend(self.classifier.param_slices());
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.embed.param_slices_mut();
        for layer in &mut self.rnn {
            out.extend(layer.param_slices_mut());
        }
        out.extend(self.classifier.param_slices_mut());
        out
    }

    fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut out = self.embed.param_names(&format!("{prefix}.embed"));
        for (i, layer) in self.rnn.iter().enumerate() {
            out.extend(layer.param_names(&format!("{prefix}.rnn{i}")));
        }
        out.extend(self.classifier.param_names(&format!("{prefix}.classifier")));
        out
    }
}
