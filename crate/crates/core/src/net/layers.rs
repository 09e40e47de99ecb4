//! Layers with hand-written backward passes.
//!
//! Every layer caches what its backward pass needs during `forward`, and
//! `backward` accumulates parameter gradients into [`Param::grad`] before
//! returning the gradient with respect to the layer input.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::tensor::FeatureTensor;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub type Rng = rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// A learnable tensor, flattened row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Param {
            name: name.into(),
            shape,
            value,
            grad,
        }
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, v: f64) -> Self {
        let len = shape.iter().product();
        Param::new(name, shape, vec![v; len])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.clear();
        self.grad.resize(self.value.len(), 0.0);
    }

    pub(crate) fn grad_mut(&mut self) -> &mut [f64] {
        if self.grad.len() != self.value.len() {
            self.zero_grad();
        }
        &mut self.grad
    }
}

fn check_finite(t: &FeatureTensor, layer: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation(layer))
    }
}

/// Propagation operators for each batch row. A row holds either a single
/// matrix shared by all frames or one matrix per input frame.
#[derive(Debug, Clone, Copy)]
pub struct Propagations<'a> {
    rows: &'a [&'a [Matrix]],
    /// Input frames per frame at the current temporal resolution.
    stride: usize,
}

impl<'a> Propagations<'a> {
    pub fn new(rows: &'a [&'a [Matrix]]) -> Self {
        Propagations { rows, stride: 1 }
    }

    pub fn with_stride(self, stride: usize) -> Self {
        Propagations { stride, ..self }
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn rows(&self) -> usize {
        self.rows.len()
    }

    pub fn at(&self, row: usize, frame: usize) -> &'a Matrix {
        let mats = self.rows[row];
        if mats.len() == 1 {
            &mats[0]
        } else {
            &mats[(frame * self.stride).min(mats.len() - 1)]
        }
    }

    fn check(&self, x: &FeatureTensor) -> Result<()> {
        if self.rows.len() != x.batch() {
            return Err(Error::DimensionMismatch(format!(
                "{} propagation rows for batch of {}",
                self.rows.len(),
                x.batch()
            )));
        }
        for mats in self.rows {
            if mats.is_empty() {
                return Err(Error::DimensionMismatch("empty propagation row".into()));
            }
            for m in *mats {
                if m.rows() != x.joints() || m.cols() != x.joints() {
                    return Err(Error::DimensionMismatch(format!(
                        "{}x{} propagation for {} joints",
                        m.rows(),
                        m.cols(),
                        x.joints()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Dot product with eight independent partial sums, combined in a fixed order.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub(crate) fn sum(a: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let chunks = a.chunks_exact(8);
    let tail: f64 = chunks.remainder().iter().sum();
    for x in chunks {
        for k in 0..8 {
            acc[k] += x[k];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `out = M x`, given `Mᵀ`.
fn apply_joint_operator(m_transposed: &Matrix, x: &[f64], out: &mut [f64]) {
    apply_joint_operator_transposed(m_transposed, x, out);
}

fn apply_joint_operator_transposed(m: &Matrix, g: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (i, &gi) in g.iter().enumerate() {
        if gi == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(m.row(i)) {
            *o += a * gi;
        }
    }
}

/// Spatial graph convolution `Z = Ĉ X Θ` on every (row, frame) slice.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpatialConv {
    /// `[in_channels, out_channels]`.
    pub theta: Param,
    #[serde(skip)]
    cache: Option<FeatureTensor>,
}

impl SpatialConv {
    pub fn new(theta: Param) -> Self {
        assert_eq!(theta.shape.len(), 2);
        SpatialConv { theta, cache: None }
    }

    pub fn in_channels(&self) -> usize {
        self.theta.shape[0]
    }

    pub fn out_channels(&self) -> usize {
        self.theta.shape[1]
    }

    pub fn forward(&mut self, x: &FeatureTensor, props: Propagations<'_>) -> Result<FeatureTensor> {
        let [b, cin, t, n] = x.shape();
        if cin != self.in_channels() {
            return Err(Error::DimensionMismatch(format!(
                "spatial conv expects {} channels, got {cin}",
                self.in_channels()
            )));
        }
        props.check(x)?;
        let cout = self.out_channels();
        let transposed: Vec<Vec<Matrix>> = props
            .rows
            .iter()
            .map(|mats| mats.iter().map(Matrix::transpose).collect())
            .collect();
        let transposed_refs: Vec<&[Matrix]> = transposed.iter().map(Vec::as_slice).collect();
        let props_t = Propagations {
            rows: &transposed_refs,
            stride: props.stride,
        };
        // Propagated input Ĉ X, kept for the weight gradient.
        let mut mixed = FeatureTensor::zeros(x.shape());
        for ib in 0..b {
            for ic in 0..cin {
                for it in 0..t {
                    let k = x.offset(ib, ic, it, 0);
                    apply_joint_operator(
                        props_t.at(ib, it),
                        &x.as_slice()[k..k + n],
                        &mut mixed.as_mut_slice()[k..k + n],
                    );
                }
            }
        }
        let mut z = FeatureTensor::zeros([b, cout, t, n]);
        let theta = &self.theta.value;
        let span = t * n;
        for ib in 0..b {
            for o in 0..cout {
                let zk = z.offset(ib, o, 0, 0);
                for ic in 0..cin {
                    let w = theta[ic * cout + o];
                    if w == 0.0 {
                        continue;
                    }
                    let mk = mixed.offset(ib, ic, 0, 0);
                    let (src, dst) = (&mixed.as_slice()[mk..mk + span], &mut z.as_mut_slice()[zk..zk + span]);
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
        }
        check_finite(&z, "spatial conv")?;
        self.cache = Some(mixed);
        Ok(z)
    }

    pub fn backward(&mut self, grad: &FeatureTensor, props: Propagations<'_>) -> Result<FeatureTensor> {
        let mixed = self.cache.as_ref().ok_or(Error::MissingCache("spatial conv"))?;
        let [b, cin, t, n] = mixed.shape();
        let cout = self.out_channels();
        if grad.shape() != [b, cout, t, n] {
            return Err(Error::ShapeMismatch(format!("spatial conv gradient {:?}", grad.shape())));
        }
        let span = t * n;
        let theta = self.theta.value.clone();
        let dtheta = self.theta.grad_mut();
        let mut dmixed = FeatureTensor::zeros([b, cin, t, n]);
        for ib in 0..b {
            for ic in 0..cin {
                let mk = mixed.offset(ib, ic, 0, 0);
                let m = &mixed.as_slice()[mk..mk + span];
                for o in 0..cout {
                    let gk = grad.offset(ib, o, 0, 0);
                    let g = &grad.as_slice()[gk..gk + span];
                    dtheta[ic * cout + o] += dot(m, g);
                    let w = theta[ic * cout + o];
                    if w != 0.0 {
                        let dm = &mut dmixed.as_mut_slice()[mk..mk + span];
                        for (d, gv) in dm.iter_mut().zip(g) {
                            *d += w * gv;
                        }
                    }
                }
            }
        }
        let mut dx = FeatureTensor::zeros([b, cin, t, n]);
        for ib in 0..b {
            for ic in 0..cin {
                for it in 0..t {
                    let k = dmixed.offset(ib, ic, it, 0);
                    apply_joint_operator_transposed(
                        props.at(ib, it),
                        &dmixed.as_slice()[k..k + n],
                        &mut dx.as_mut_slice()[k..k + n],
                    );
                }
            }
        }
        Ok(dx)
    }
}

/// Per-channel 1-D convolution along frames, shared by all joints, with zero
/// padding that keeps `T` at stride 1 and gives `ceil(T / stride)` frames.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemporalConv {
    /// `[channels, kernel]`.
    pub weight: Param,
    pub stride: usize,
    #[serde(skip)]
    cache: Option<FeatureTensor>,
}

impl TemporalConv {
    pub fn new(weight: Param, stride: usize) -> Self {
        assert_eq!(weight.shape.len(), 2);
        assert!(stride >= 1);
        TemporalConv {
            weight,
            stride,
            cache: None,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn channels(&self) -> usize {
        self.weight.shape[0]
    }

    fn left_pad(&self) -> usize {
        (self.kernel() - 1) / 2
    }

    pub fn output_frames(&self, frames: usize) -> usize {
        frames.div_ceil(self.stride)
    }

    pub fn forward(&mut self, x: &FeatureTensor) -> Result<FeatureTensor> {
        let [b, c, t, n] = x.shape();
        if c != self.channels() {
            return Err(Error::DimensionMismatch(format!(
                "temporal conv expects {} channels, got {c}",
                self.channels()
            )));
        }
        let k = self.kernel();
        if k > t {
            return Err(Error::KernelLargerThanSequence { kernel: k, frames: t });
        }
        let t_out = self.output_frames(t);
        let pad = self.left_pad() as isize;
        let mut out = FeatureTensor::zeros([b, c, t_out, n]);
        for ib in 0..b {
            for ic in 0..c {
                let w = &self.weight.value[ic * k..(ic + 1) * k];
                for to in 0..t_out {
                    let ok = out.offset(ib, ic, to, 0);
                    for (tap, &wv) in w.iter().enumerate() {
                        let src = (to * self.stride) as isize + tap as isize - pad;
                        if src < 0 || src >= t as isize || wv == 0.0 {
                            continue;
                        }
                        let xk = x.offset(ib, ic, src as usize, 0);
                        let (xs, os) = (&x.as_slice()[xk..xk + n], &mut out.as_mut_slice()[ok..ok + n]);
                        for (o, v) in os.iter_mut().zip(xs) {
                            *o += wv * v;
                        }
                    }
                }
            }
        }
        check_finite(&out, "temporal conv")?;
        self.cache = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad: &FeatureTensor) -> Result<FeatureTensor> {
        let x = self.cache.take().ok_or(Error::MissingCache("temporal conv"))?;
        let [b, c, t, n] = x.shape();
        let t_out = self.output_frames(t);
        if grad.shape() != [b, c, t_out, n] {
            self.cache = Some(x);
            return Err(Error::ShapeMismatch(format!("temporal conv gradient {:?}", grad.shape())));
        }
        let k = self.kernel();
        let pad = self.left_pad() as isize;
        let stride = self.stride;
        let weight = self.weight.value.clone();
        let dw = self.weight.grad_mut();
        let mut dx = FeatureTensor::zeros(x.shape());
        for ib in 0..b {
            for ic in 0..c {
                for to in 0..t_out {
                    let gk = grad.offset(ib, ic, to, 0);
                    let g = &grad.as_slice()[gk..gk + n];
                    for tap in 0..k {
                        let src = (to * stride) as isize + tap as isize - pad;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let xk = x.offset(ib, ic, src as usize, 0);
                        dw[ic * k + tap] += dot(&x.as_slice()[xk..xk + n], g);
                        let wv = weight[ic * k + tap];
                        let dxs = &mut dx.as_mut_slice()[xk..xk + n];
                        for (d, gv) in dxs.iter_mut().zip(g) {
                            *d += wv * gv;
                        }
                    }
                }
            }
        }
        self.cache = Some(x);
        Ok(dx)
    }
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone)]
struct BnCache {
    normalized: FeatureTensor,
    inv_std: Vec<f64>,
    mode: Mode,
}

/// Per-channel batch normalization over batch, frames and joints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    #[serde(skip)]
    cache: Option<BnCache>,
}

impl BatchNorm {
    pub fn new(prefix: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: Param::filled(format!("{prefix}.gamma"), vec![channels], 1.0),
            beta: Param::filled(format!("{prefix}.beta"), vec![channels], 0.0),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: &FeatureTensor, mode: Mode) -> Result<FeatureTensor> {
        let [b, c, t, n] = x.shape();
        if c != self.channels() {
            return Err(Error::DimensionMismatch(format!(
                "batch norm expects {} channels, got {c}",
                self.channels()
            )));
        }
        if mode == Mode::Train && b < 2 {
            return Err(Error::BatchTooSmall(b));
        }
        let span = t * n;
        let count = (b * span) as f64;
        let mut normalized = FeatureTensor::zeros(x.shape());
        let mut inv_std = vec![0.0; c];
        for ic in 0..c {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut sum = 0.0;
                    for ib in 0..b {
                        let k = x.offset(ib, ic, 0, 0);
                        sum += self::sum(&x.as_slice()[k..k + span]);
                    }
                    let mean = sum / count;
                    let mut sq = 0.0;
                    for ib in 0..b {
                        let k = x.offset(ib, ic, 0, 0);
                        sq += x.as_slice()[k..k + span].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                    }
                    let var = sq / count;
                    self.running_mean[ic] = BN_MOMENTUM * self.running_mean[ic] + (1.0 - BN_MOMENTUM) * mean;
                    self.running_var[ic] = BN_MOMENTUM * self.running_var[ic] + (1.0 - BN_MOMENTUM) * var;
                    (mean, var)
                }
                Mode::Eval => (self.running_mean[ic], self.running_var[ic]),
            };
            let inv = 1.0 / (var + BN_EPSILON).sqrt();
            inv_std[ic] = inv;
            for ib in 0..b {
                let k = x.offset(ib, ic, 0, 0);
                for (dst, &v) in normalized.as_mut_slice()[k..k + span].iter_mut().zip(&x.as_slice()[k..k + span]) {
                    *dst = (v - mean) * inv;
                }
            }
        }
        let mut out = normalized.clone();
        for ib in 0..b {
            for ic in 0..c {
                let (g, s) = (self.gamma.value[ic], self.beta.value[ic]);
                let k = out.offset(ib, ic, 0, 0);
                out.as_mut_slice()[k..k + span].iter_mut().for_each(|v| *v = g * *v + s);
            }
        }
        check_finite(&out, "batch norm")?;
        self.cache = Some(BnCache {
            normalized,
            inv_std,
            mode,
        });
        Ok(out)
    }

    pub fn backward(&mut self, grad: &FeatureTensor) -> Result<FeatureTensor> {
        let cache = self.cache.take().ok_or(Error::MissingCache("batch norm"))?;
        let [b, c, t, n] = cache.normalized.shape();
        if grad.shape() != cache.normalized.shape() {
            self.cache = Some(cache);
            return Err(Error::ShapeMismatch(format!("batch norm gradient {:?}", grad.shape())));
        }
        let span = t * n;
        let count = (b * span) as f64;
        let mut dx = FeatureTensor::zeros(grad.shape());
        for ic in 0..c {
            let (mut sum_g, mut sum_gx) = (0.0, 0.0);
            for ib in 0..b {
                let k = grad.offset(ib, ic, 0, 0);
                let g = &grad.as_slice()[k..k + span];
                let xh = &cache.normalized.as_slice()[k..k + span];
                sum_g += sum(g);
                sum_gx += dot(g, xh);
            }
            self.gamma.grad_mut()[ic] += sum_gx;
            self.beta.grad_mut()[ic] += sum_g;
            let scale = self.gamma.value[ic] * cache.inv_std[ic];
            for ib in 0..b {
                let k = grad.offset(ib, ic, 0, 0);
                let g = &grad.as_slice()[k..k + span];
                let xh = &cache.normalized.as_slice()[k..k + span];
                let d = &mut dx.as_mut_slice()[k..k + span];
                match cache.mode {
                    Mode::Train => {
                        for ((dv, &gv), &xv) in d.iter_mut().zip(g).zip(xh) {
                            *dv = scale * (gv - sum_g / count - xv * sum_gx / count);
                        }
                    }
                    Mode::Eval => {
                        for (dv, &gv) in d.iter_mut().zip(g) {
                            *dv = scale * gv;
                        }
                    }
                }
            }
        }
        self.cache = Some(cache);
        Ok(dx)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward(&mut self, x: &FeatureTensor) -> FeatureTensor {
        self.mask = Some(x.as_slice().iter().map(|&v| v > 0.0).collect());
        x.map(|v| v.max(0.0))
    }

    /// Which inputs of the last forward pass were positive.
    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn backward(&mut self, grad: &FeatureTensor) -> Result<FeatureTensor> {
        let mask = self.mask.as_ref().ok_or(Error::MissingCache("relu"))?;
        if mask.len() != grad.len() {
            return Err(Error::ShapeMismatch("relu gradient".into()));
        }
        let data = grad.as_slice().iter().zip(mask).map(|(&g, &m)| if m { g } else { 0.0 }).collect();
        FeatureTensor::from_vec(grad.shape(), data)
    }
}

/// Inverted dropout: survivors are scaled by `1 / (1 - p)` in train mode.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f64,
    scale: Option<Vec<f64>>,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1)");
        Dropout { rate, scale: None }
    }

    pub fn forward(&mut self, x: &FeatureTensor, mode: Mode, rng: &mut Rng) -> FeatureTensor {
        if mode == Mode::Eval || self.rate == 0.0 {
            self.scale = None;
            return x.clone();
        }
        let keep = 1.0 / (1.0 - self.rate);
        let scale: Vec<f64> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < self.rate { 0.0 } else { keep })
            .collect();
        let data = x.as_slice().iter().zip(&scale).map(|(v, s)| v * s).collect();
        self.scale = Some(scale);
        FeatureTensor::from_vec(x.shape(), data).expect("same shape")
    }

    pub fn backward(&mut self, grad: &FeatureTensor) -> FeatureTensor {
        match &self.scale {
            None => grad.clone(),
            Some(scale) => {
                let data = grad.as_slice().iter().zip(scale).map(|(g, s)| g * s).collect();
                FeatureTensor::from_vec(grad.shape(), data).expect("same shape")
            }
        }
    }
}

/// Average over subjects, frames and joints. Batch rows are grouped in runs
/// of `subjects` rows per sample; the result is `samples × channels`.
pub fn global_average_pool(x: &FeatureTensor, subjects: usize) -> Result<Matrix> {
    let [b, c, t, n] = x.shape();
    if subjects == 0 || b % subjects != 0 {
        return Err(Error::ShapeMismatch(format!("{b} rows are not a multiple of {subjects} subjects")));
    }
    let samples = b / subjects;
    let span = t * n;
    let denom = (subjects * span) as f64;
    let mut out = Matrix::zeros(samples, c);
    for s in 0..samples {
        for ic in 0..c {
            let mut total = 0.0;
            for m in 0..subjects {
                let k = x.offset(s * subjects + m, ic, 0, 0);
                total += sum(&x.as_slice()[k..k + span]);
            }
            out[(s, ic)] = total / denom;
        }
    }
    Ok(out)
}

/// Gradient of [`global_average_pool`]: spreads each entry evenly.
pub fn global_average_pool_backward(grad: &Matrix, shape: [usize; 4], subjects: usize) -> FeatureTensor {
    let [_, _, t, n] = shape;
    let denom = (subjects * t * n) as f64;
    FeatureTensor::from_fn(shape, |[b, c, _, _]| grad[(b / subjects, c)] / denom)
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let peak = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - peak).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Fully connected classifier `logits = x W + b`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    /// `[in_features, out_features]`.
    pub weight: Param,
    pub bias: Param,
    #[serde(skip)]
    cache: Option<Matrix>,
}

impl Linear {
    pub fn new(weight: Param, bias: Param) -> Self {
        assert_eq!(weight.shape.len(), 2);
        assert_eq!(bias.len(), weight.shape[1]);
        Linear {
            weight,
            bias,
            cache: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_features() {
            return Err(Error::DimensionMismatch(format!(
                "classifier expects {} features, got {}",
                self.in_features(),
                x.cols()
            )));
        }
        let (fin, fout) = (self.in_features(), self.out_features());
        let out = Matrix::from_fn(x.rows(), fout, |r, o| {
            self.bias.value[o] + (0..fin).map(|i| x[(r, i)] * self.weight.value[i * fout + o]).sum::<f64>()
        });
        self.cache = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Matrix) -> Result<Matrix> {
        let x = self.cache.take().ok_or(Error::MissingCache("linear"))?;
        let (fin, fout) = (self.in_features(), self.out_features());
        if grad.rows() != x.rows() || grad.cols() != fout {
            self.cache = Some(x);
            return Err(Error::ShapeMismatch("linear gradient".into()));
        }
        {
            let dw = self.weight.grad_mut();
            for r in 0..x.rows() {
                for i in 0..fin {
                    for o in 0..fout {
                        dw[i * fout + o] += x[(r, i)] * grad[(r, o)];
                    }
                }
            }
        }
        {
            let db = self.bias.grad_mut();
            for r in 0..x.rows() {
                for o in 0..fout {
                    db[o] += grad[(r, o)];
                }
            }
        }
        let dx = Matrix::from_fn(x.rows(), fin, |r, i| {
            (0..fout).map(|o| grad[(r, o)] * self.weight.value[i * fout + o]).sum()
        });
        self.cache = Some(x);
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tensor(shape: [usize; 4], seed: u64) -> FeatureTensor {
        let mut rng = Rng::seed_from_u64(seed);
        FeatureTensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identity_spatial_conv() {
        let x = tensor([2, 3, 4, 5], 1);
        let eye = [Matrix::identity(5)];
        let rows: Vec<&[Matrix]> = vec![&eye; 2];
        let theta = Param::new("t", vec![3, 3], Matrix::identity(3).as_slice().to_vec());
        let mut conv = SpatialConv::new(theta);
        let z = conv.forward(&x, Propagations::new(&rows)).unwrap();
        assert_eq!(z, x);
        let zero = FeatureTensor::zeros([2, 3, 4, 5]);
        assert!(conv.forward(&zero, Propagations::new(&rows)).unwrap().as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn spatial_conv_rejects_wrong_graph() {
        let x = tensor([1, 2, 2, 4], 2);
        let eye = [Matrix::identity(3)];
        let rows: Vec<&[Matrix]> = vec![&eye];
        let mut conv = SpatialConv::new(Param::filled("t", vec![2, 2], 1.0));
        assert!(matches!(conv.forward(&x, Propagations::new(&rows)), Err(Error::DimensionMismatch(_))));
        let mut fresh = SpatialConv::new(Param::filled("t", vec![2, 2], 1.0));
        assert!(matches!(
            fresh.backward(&x, Propagations::new(&rows)),
            Err(Error::MissingCache(_))
        ));
    }

    #[test]
    fn temporal_identity_and_average() {
        let x = tensor([1, 2, 6, 3], 3);
        let mut id = TemporalConv::new(Param::filled("k", vec![2, 1], 1.0), 1);
        assert_eq!(id.forward(&x).unwrap(), x);

        let c = FeatureTensor::from_fn([1, 1, 7, 2], |_| 2.5);
        let mut avg = TemporalConv::new(Param::filled("k", vec![1, 3], 1.0 / 3.0), 1);
        let out = avg.forward(&c).unwrap();
        for t in 1..6 {
            assert!((out.get(0, 0, t, 0) - 2.5).abs() < 1e-12);
        }
        assert!(out.get(0, 0, 0, 0) < 2.5);
    }

    #[test]
    fn temporal_stride_and_kernel_checks() {
        let x = tensor([1, 1, 7, 2], 4);
        let mut conv = TemporalConv::new(Param::filled("k", vec![1, 3], 1.0), 2);
        assert_eq!(conv.forward(&x).unwrap().frames(), 4);
        let mut long = TemporalConv::new(Param::filled("k", vec![1, 9], 1.0), 1);
        assert!(matches!(
            long.forward(&x),
            Err(Error::KernelLargerThanSequence { kernel: 9, frames: 7 })
        ));
    }

    #[test]
    fn batch_norm_train_statistics() {
        let x = tensor([4, 3, 5, 6], 5).map(|v| 3.0 * v + 7.0);
        let mut bn = BatchNorm::new("bn", 3);
        let y = bn.forward(&x, Mode::Train).unwrap();
        let count = (4 * 5 * 6) as f64;
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| (0..5).flat_map(move |t| (0..6).map(move |n| (b, t, n))))
                .map(|(b, t, n)| y.get(b, c, t, n))
                .collect();
            let mean = vals.iter().sum::<f64>() / count;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-5);
        }
        assert!(matches!(
            bn.forward(&tensor([1, 3, 5, 6], 6), Mode::Train),
            Err(Error::BatchTooSmall(1))
        ));
    }

    #[test]
    fn batch_norm_constant_channel_and_eval_purity() {
        let x = FeatureTensor::from_fn([3, 1, 4, 2], |_| 5.0);
        let mut bn = BatchNorm::new("bn", 1);
        assert!(bn.forward(&x, Mode::Train).unwrap().as_slice().iter().all(|v| *v == 0.0));
        let probe = tensor([2, 1, 4, 2], 8);
        let a = bn.forward(&probe, Mode::Eval).unwrap();
        let b = bn.forward(&probe, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn relu_softmax_pool() {
        let x = FeatureTensor::from_vec([1, 1, 1, 2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(Relu::default().forward(&x).as_slice(), &[0.0, 2.0]);
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[1e4, -1e4, 0.0]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let c = FeatureTensor::from_fn([4, 3, 2, 5], |[_, c, _, _]| c as f64 + 0.5);
        let pooled = global_average_pool(&c, 2).unwrap();
        assert_eq!(pooled.rows(), 2);
        for s in 0..2 {
            for ch in 0..3 {
                assert!((pooled[(s, ch)] - (ch as f64 + 0.5)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dropout_eval_is_identity_and_train_preserves_mean() {
        let x = FeatureTensor::from_fn([1, 1, 100, 100], |_| 1.0);
        let mut d = Dropout::new(0.5);
        let mut rng = Rng::seed_from_u64(9);
        assert_eq!(d.forward(&x, Mode::Eval, &mut rng), x);
        let y = d.forward(&x, Mode::Train, &mut rng);
        let mean = y.as_slice().iter().sum::<f64>() / y.len() as f64;
        assert!((mean - 1.0).abs() < 0.02);
    }
}
