//! Central finite-difference checks of every backward pass.
//!
//! Each case builds a small seeded instance of a layer, reduces its output
//! to a scalar with a fixed random projection and compares the analytic
//! gradient of every input and parameter against
//! `(L(v + h) - L(v - h)) / 2h`.

use rand::seq::index::sample;
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::centrality::{centrality_from_lengths, CentralityMode, Stream};
use crate::error::{Error, Result};
use crate::graph::SkeletonTemplate;
use crate::linalg::Matrix;
use crate::net::{
    global_average_pool, global_average_pool_backward, softmax, BatchNorm, Block, BlockConfig, CgcnModel, ChannelPlan,
    Dropout, FeatureTensor, Linear, Mode, ModelConfig, Param, PropagationId, Propagations, Relu, Rng, SpatialConv,
    TemporalConv,
};
use crate::training::cross_entropy;

pub const LAYERS: [&str; 14] = [
    "spatial_conv",
    "spatial_conv_per_frame",
    "temporal_conv",
    "batch_norm_train",
    "batch_norm_eval",
    "relu",
    "dropout_eval",
    "dropout_train",
    "pooling",
    "linear",
    "softmax_xent",
    "block",
    "block_eval",
    "model",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub step: f64,
    pub threshold: f64,
    /// Coordinates sampled per tensor; smaller tensors are checked in full.
    pub max_coords: usize,
    /// Lower bound on the error denominator. Gradients that vanish by
    /// symmetry, such as a weight feeding a train-mode BN, are then
    /// compared in absolute terms.
    pub norm_floor: f64,
    pub seed: u64,
    /// Flips the sign of every analytic gradient, so every check must fail.
    pub inject_fault: bool,
    /// Restricts the run to these cases; `None` runs all of [`LAYERS`].
    pub layers: Option<Vec<String>>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            threshold: 1e-4,
            max_coords: 24,
            norm_floor: 1e-6,
            seed: 0,
            inject_fault: false,
            layers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub layer: String,
    pub tensor: String,
    pub coords: usize,
    /// Coordinates dropped because a step of `±h` crossed a ReLU kink.
    pub skipped: usize,
    pub analytic_norm: f64,
    pub relative_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub threshold: f64,
    pub checks: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }

    /// Largest relative error per layer, in run order.
    pub fn per_layer(&self) -> Vec<(String, f64, bool)> {
        let mut out: Vec<(String, f64, bool)> = Vec::new();
        for c in &self.checks {
            match out.iter_mut().find(|(l, _, _)| *l == c.layer) {
                Some(entry) => {
                    entry.1 = entry.1.max(c.relative_error);
                    entry.2 &= c.passed;
                }
                None => out.push((c.layer.clone(), c.relative_error, c.passed)),
            }
        }
        out
    }
}

/// `‖a - n‖ / max(‖a‖, ‖n‖, floor)`, zero when all three vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied())
        .max(norm(&mut numeric.iter().copied()))
        .max(floor);
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

type Vars = Vec<(String, Vec<f64>)>;

struct Eval {
    loss: f64,
    grads: Option<Vec<Vec<f64>>>,
    /// Digest of the ReLU masks; zero for cases without ReLUs.
    pattern: u64,
}

impl Eval {
    fn plain(loss: f64, grads: Option<Vec<Vec<f64>>>) -> Result<Eval> {
        Ok(Eval { loss, grads, pattern: 0 })
    }
}

/// `f(vars, want_grad)` evaluates the loss and, when asked, one gradient per variable.
fn check_case(
    layer: &str,
    vars: Vars,
    opts: &GradcheckOptions,
    rng: &mut Rng,
    mut f: impl FnMut(&[Vec<f64>], bool) -> Result<Eval>,
) -> Result<Vec<TensorCheck>> {
    let mut current: Vec<Vec<f64>> = vars.iter().map(|(_, v)| v.clone()).collect();
    let base = f(&current, true)?;
    let grads = base.grads.ok_or(Error::MissingCache("gradcheck"))?;
    let mut out = Vec::with_capacity(vars.len());
    for (k, (name, v)) in vars.iter().enumerate() {
        let coords: Vec<usize> = if v.len() <= opts.max_coords {
            (0..v.len()).collect()
        } else {
            let mut idx = sample(rng, v.len(), opts.max_coords).into_vec();
            idx.sort_unstable();
            idx
        };
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        let mut skipped = 0;
        for &i in &coords {
            let orig = current[k][i];
            current[k][i] = orig + opts.step;
            let plus = f(&current, false)?;
            current[k][i] = orig - opts.step;
            let minus = f(&current, false)?;
            current[k][i] = orig;
            if plus.pattern != base.pattern || minus.pattern != base.pattern {
                skipped += 1;
                continue;
            }
            numeric.push((plus.loss - minus.loss) / (2.0 * opts.step));
            let a = grads[k][i];
            analytic.push(if opts.inject_fault { -a } else { a });
        }
        let err = relative_error(&analytic, &numeric, opts.norm_floor);
        let all_zero = analytic.iter().chain(&numeric).all(|x| x.abs() < 1e-300);
        out.push(TensorCheck {
            layer: layer.to_string(),
            tensor: name.clone(),
            coords: analytic.len(),
            skipped,
            analytic_norm: analytic.iter().map(|a| a * a).sum::<f64>().sqrt(),
            relative_error: if opts.inject_fault && all_zero { f64::INFINITY } else { err },
            passed: err <= opts.threshold && !(opts.inject_fault && all_zero),
        });
    }
    Ok(out)
}

fn random_vec(rng: &mut Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn away_from_zero(rng: &mut Rng, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn random_symmetric(rng: &mut Rng, n: usize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = rng.gen_range(-1.0..1.0);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// A small random `[batch, channels, frames, joints]` shape.
fn random_shape(rng: &mut Rng) -> [usize; 4] {
    [rng.gen_range(2..=3), rng.gen_range(1..=4), rng.gen_range(3..=7), rng.gen_range(2..=6)]
}

fn tensor(shape: [usize; 4], v: &[f64]) -> Result<FeatureTensor> {
    FeatureTensor::from_vec(shape, v.to_vec())
}

fn project(y: &FeatureTensor, r: &[f64]) -> f64 {
    y.as_slice().iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Runs the selected cases.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let selected: Vec<String> = match &opts.layers {
        None => LAYERS.iter().map(|s| s.to_string()).collect(),
        Some(list) => {
            for l in list {
                if !LAYERS.contains(&l.as_str()) {
                    return Err(Error::Config(format!("unknown gradcheck layer {l:?}; known: {}", LAYERS.join(", "))));
                }
            }
            LAYERS.iter().filter(|l| list.iter().any(|s| s == *l)).map(|s| s.to_string()).collect()
        }
    };
    let mut checks = Vec::new();
    for layer in &selected {
        let salt = LAYERS.iter().position(|l| l == layer).unwrap_or(0) as u64;
        let mut rng = Rng::seed_from_u64(crate::training::mix_seed(opts.seed, salt + 101));
        checks.extend(run_layer(layer, opts, &mut rng)?);
    }
    Ok(GradcheckReport {
        step: opts.step,
        threshold: opts.threshold,
        checks,
    })
}

fn run_layer(layer: &str, opts: &GradcheckOptions, rng: &mut Rng) -> Result<Vec<TensorCheck>> {
    match layer {
        "spatial_conv" | "spatial_conv_per_frame" => spatial_case(layer, opts, rng),
        "temporal_conv" => temporal_case(opts, rng),
        "batch_norm_train" => batch_norm_case(layer, Mode::Train, opts, rng),
        "batch_norm_eval" => batch_norm_case(layer, Mode::Eval, opts, rng),
        "relu" => relu_case(opts, rng),
        "dropout_eval" => dropout_case(layer, Mode::Eval, opts, rng),
        "dropout_train" => dropout_case(layer, Mode::Train, opts, rng),
        "pooling" => pooling_case(opts, rng),
        "linear" => linear_case(opts, rng),
        "softmax_xent" => softmax_case(opts, rng),
        "block" => block_case(layer, Mode::Train, opts, rng),
        "block_eval" => block_case(layer, Mode::Eval, opts, rng),
        "model" => model_case(opts, rng),
        other => Err(Error::Config(format!("unknown gradcheck layer {other:?}"))),
    }
}

fn spatial_case(layer: &str, opts: &GradcheckOptions, rng: &mut Rng) -> Result<Vec<TensorCheck>> {
    let shape = random_shape(rng);
    let (cin, cout, n) = (shape[1], rng.gen_range(1..=4), shape[3]);
    let per_frame = layer.ends_with("per_frame");
    let first: Vec<Matrix> = if per_frame {
        (0..shape[2]).map(|_| random_symmetric(rng, n)).collect()
    } else {
        vec![random_symmetric(rng, n)]
    };
    let rest: Vec<Vec<Matrix>> = (1..shape[0]).map(|_| vec![random_symmetric(rng, n)]).collect();
    let mut rows: Vec<&[Matrix]> = vec![&first];
    rows.extend(rest.iter().map(|m| m.as_slice()));
    let out_len = shape[0] * cout * shape[2] * shape[3];
    let r = random_vec(rng, out_len);
    let vars = vec![
        ("input".to_string(), random_vec(rng, shape.iter().product())),
        ("theta".to_string(), random_vec(rng, cin * cout)),
    ];
    check_case(layer, vars, opts, rng, |v, want| {
        let mut conv = SpatialConv::new(Param::new("theta", vec![cin, cout], v[1].clone()));
        let props = Propagations::new(&rows);
        let y = conv.forward(&tensor(shape, &v[0])?, props)?;
        let loss = project(&y, &r);
        if !want {
            return Eval::plain(loss, None);
        }
        let dx = conv.backward(&tensor(y.shape(), &r)?, props)?;
        Eval::plain(loss, Some(vec![dx.into_vec(), conv.theta.grad.clone()]))
    })
}

fn temporal_case(opts: &GradcheckOptions, rng: &mut Rng) -> Result<Vec<TensorCheck>> {
    let mut checks = Vec::new();
    for stride in [1usize, 2usize] {
        let shape = random_shape(rng);
        let k = rng.gen_range(1..=shape[2].min(5));
        let out_frames = shape[2].div_ceil(stride);
        let r = random_vec(rng, shape[0] * shape[1] * out_frames * shape[3]);
        let vars = vec![
            (format!("input@stride{stride}"), random_vec(rng, shape.iter().product())),
            (format!("weight@stride{stride}"), random_vec(rng, shape[1] * k)),
        ];
        checks.extend(check_case("temporal_conv", vars, opts, rng, |v, want| {
            let mut conv = TemporalConv::new(Param::new("w", vec![shape[1], k], v[1].clone()), stride);
            let y = conv.forward(&tensor(shape, &v[0])?)?;
            let loss = project(&y, &r);
            if !want {
                return Eval::plain(loss, None);
            }
            let dx = conv.backward(&tensor(y.shape(), &r)?)?;
            Eval::plain(loss, Some(vec![dx.into_vec(), conv.weight.grad.clone()]))
        })?);
    }
    Ok(checks)
}

fn batch_norm_case(layer: &str, mode: Mode, opts: &GradcheckOptions, rng: &mut Rng) -> Result<Vec<TensorCheck>> {
    let shape = random_shape(rng);
    let c = shape[1];
    let r = random_vec(rng, shape.iter().product());
    let running_mean = random_vec(rng, c);
    let running_var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
    let vars = vec![
        ("input".to_string(), random_vec(rng, shape.iter().product())),
        ("gamma".to_string(), (0..c).map(|_| rng.gen_range(0.5..1.5)).collect()),
        ("beta".to_string(), random_vec(rng, c)),
    ];
    check_case(layer, vars, opts, rng, |v, want| {
        let mut bn = BatchNorm::new("bn", c);
        bn.gamma.value = v[1].clone();
        bn.beta.value = v[2].clone();
        bn.running_mean = running_mean.clone();
        bn.running_var = running_var.clone();
        let y = bn.forward(&tensor(shape, &v[0])?, mode)?;
        let loss = project(&y, &r);
        if !want {
            return Eval::plain(loss, None);
        }
        let dx = bn.backward(&tensor(shape, &r)?)?;
        Eval::plain(loss, Some(vec![dx.into_vec(), bn.gamma.grad.clone(), bn.beta.grad.clone()]))
    })
}

fn relu_case(opts: &GradcheckOptions, rng: &mut Rng) -> Result<Vec<TensorCheck>> {
    let shape = random_shape(rng);
    let r = random_vec(rng, shape.iter().product());
    let vars = vec![("input".to_string(), away_from_zero(rng, shape.iter().product()))];
    check_case("relu", vars, opts, rng, |v, want| {
        let mut relu = Relu::default();
        let y = relu.forward(&tensor(shape, &v[0])?);
        let loss = project(&y, &r);
        if !want {
            return Eval::plain(loss, None);
        }
        Eval::plain(loss, Some(vec![relu.backward(&tensor(shape, &r)?)?.into_vec()]))
    })
}

fn dropout_case(layer: &str, mode: Mode, opts: &GradcheckOptions, rng: &mut Rng) -> Result<Vec<TensorCheck>> {
    let shape = random_shape(rng);
    let r = random_vec(rng, shape.iter().product());
    let mask_seed: u64 = rng.gen();
    let vars = vec![("input".to_string(), random_vec(rng, shape.iter().product()))];
    check_case(layer, vars, opts, rng, |v, want| {
        // Reseeding fixes the train-mode mask across evaluations.
        let mut mask_rng = Rng::seed_from_u64(mask_seed);
        let mut dropout = Dropout::new(0.5);
        let y = dropout.forward(&tensor(shape, &v[0])?, mode, &mut mask_rng);
        let loss = project(&y, &r);
        if !want {
            return Eval::plain(loss, None);
        }
        Eval::plain(loss, Some(vec![dropout.backward(&tensor(shape, &r)?).into_vec()]))
    })
}

fn pooling_case(opts: &GradcheckOptions, rng: &mut Rng) -> Result<Vec<TensorCheck>> {
    let subjects = rng.gen_range(1..=2);
    let mut shape = random_shape(rng);
    shape[0] *= subjects;
    let samples = shape[0] / subjects;
    let r = Matrix::from_vec(samples, shape[1], random_vec(rng, samples * shape[1]))?;
    let vars = vec![("input".to_string(), random_vec(rng, shape.iter().product()))];
    check_case("pooling", vars, opts, rng, |v, want| {
        let y = global_average_pool(&tensor(shape, &v[0])?, subjects)?;
        let loss: f64 = y.as_slice().iter().zip(r.as_slice()).map(|(a, b)| a * b).sum();
        if !want {
            return Eval::plain(loss, None);
        }
        Eval::plain(loss, Some(vec![global_average_pool_backward(&r, shape, subjects).into_vec()]))
    })
}

fn linear_case(opts: &GradcheckOptions, rng: &mut Rng) -> Result<Vec<TensorCheck>> {
    let (rows, fin, fout) = (rng.gen_range(1..=4), rng.gen_range(1..=6), rng.gen_range(2..=6));
    let r = Matrix::from_vec(rows, fout, random_vec(rng, rows * fout))?;
    let vars = vec![
        ("input".to_string(), random_vec(rng, rows * fin)),
        ("weight".to_string(), random_vec(rng, fin * fout)),
        ("bias".to_string(), random_vec(rng, fout)),
    ];
    check_case("linear", vars, opts, rng, |v, want| {
        let mut lin = Linear::new(
            Param::new("w", vec![fin, fout], v[1].clone()),
            Param::new("b", vec![fout], v[2].clone()),
        );
        let y = lin.forward(&Matrix::from_vec(rows, fin, v[0].clone())?)?;
        let loss: f64 = y.as_slice().iter().zip(r.as_slice()).map(|(a, b)| a * b).sum();
        if !want {
            return Eval::plain(loss, None);
        }
        let dx = lin.backward(&r)?;
        Eval::plain(loss, Some(vec![dx.as_slice().to_vec(), lin.weight.grad.clone(), lin.bias.grad.clone()]))
    })
}

fn softmax_case(opts: &GradcheckOptions, rng: &mut Rng) -> Result<Vec<TensorCheck>> {
    let (rows, classes) = (rng.gen_range(1..=4), rng.gen_range(2..=8));
    let labels: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..classes)).collect();
    let vars = vec![("logits".to_string(), (0..rows * classes).map(|_| rng.gen_range(-3.0..3.0)).collect())];
    check_case("softmax_xent", vars, opts, rng, |v, want| {
        let mut loss = 0.0;
        let mut grad = Vec::with_capacity(rows * classes);
        for (r, &label) in labels.iter().enumerate() {
            let p = softmax(&v[0][r * classes..(r + 1) * classes]);
            let (l, g) = cross_entropy(&p, label)?;
            loss += l;
            grad.extend(g);
        }
        Eval::plain(loss, want.then(|| vec![grad]))
    })
}

fn block_case(layer: &str, mode: Mode, opts: &GradcheckOptions, rng: &mut Rng) -> Result<Vec<TensorCheck>> {
    let config = BlockConfig {
        in_channels: rng.gen_range(1..=4),
        out_channels: rng.gen_range(1..=5),
        temporal_kernel: [1, 3, 5][rng.gen_range(0..3)],
        temporal_stride: rng.gen_range(1..=2),
        dropout_rate: 0.0,
    };
    let mut shape = random_shape(rng);
    shape[1] = config.in_channels;
    shape[2] = rng.gen_range(config.temporal_kernel.max(3)..=8);
    let out_len = shape[0] * config.out_channels * shape[2].div_ceil(config.temporal_stride) * shape[3];
    let mut block = Block::new("block", config, rng)?;
    let mats: Vec<Vec<Matrix>> = (0..shape[0]).map(|_| vec![random_symmetric(rng, shape[3])]).collect();
    let rows: Vec<&[Matrix]> = mats.iter().map(|m| m.as_slice()).collect();
    let r = random_vec(rng, out_len);
    let mut vars = vec![("input".to_string(), random_vec(rng, shape.iter().product()))];
    vars.extend(block.params().iter().map(|p| (p.name.clone(), p.value.clone())));
    check_case(layer, vars, opts, rng, |v, want| {
        for (p, value) in block.params_mut().into_iter().zip(&v[1..]) {
            p.value.clone_from(value);
            p.zero_grad();
        }
        let mut unused = Rng::seed_from_u64(0);
        let props = Propagations::new(&rows);
        let y = block.forward(&tensor(shape, &v[0])?, props, mode, &mut unused)?;
        let loss = project(&y, &r);
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        block.hash_activation_pattern(&mut hasher);
        let pattern = std::hash::Hasher::finish(&hasher);
        if !want {
            return Ok(Eval { loss, grads: None, pattern });
        }
        let dx = block.backward(&tensor(y.shape(), &r)?, props)?;
        let mut grads = vec![dx.into_vec()];
        grads.extend(block.params().iter().map(|p| p.grad.clone()));
        Ok(Eval { loss, grads: Some(grads), pattern })
    })
}

/// The full desk-plan network on the 25-joint skeleton with centrality
/// propagation, two samples of 20 frames and mean cross-entropy.
fn model_case(opts: &GradcheckOptions, rng: &mut Rng) -> Result<Vec<TensorCheck>> {
    let template = SkeletonTemplate::builtin("ntu25").ok_or_else(|| Error::UnknownTemplate("ntu25".into()))?;
    let graph = template.graph()?;
    let lengths: Vec<f64> = (0..graph.edges().len()).map(|_| rng.gen_range(0.05..0.4)).collect();
    let set = centrality_from_lengths(&graph, &lengths, CentralityMode::SequenceMean, None)?;
    let prop = set.summed_propagation(&[Stream::J, Stream::B, Stream::W]).matrix().clone();
    let mut config = ModelConfig::new(ChannelPlan::Desk, 9, 4);
    config.dropout = 0.0;
    let id = PropagationId {
        streams: vec![Stream::J, Stream::B, Stream::W],
        inputs_hash: "gradcheck".into(),
    };
    let mut model = CgcnModel::new(config, id, rng.gen())?;
    let shape = [2, 9, 20, graph.joint_count()];
    let labels = [1usize, 3];
    let mats = [prop];
    let rows: Vec<&[Matrix]> = vec![&mats, &mats];
    let mut vars = vec![("input".to_string(), random_vec(rng, shape.iter().product()))];
    vars.extend(model.params().iter().map(|p| (p.name.clone(), p.value.clone())));
    check_case("model", vars, opts, rng, |v, want| {
        for (p, value) in model.params_mut().into_iter().zip(&v[1..]) {
            p.value.clone_from(value);
            p.zero_grad();
        }
        let mut unused = Rng::seed_from_u64(0);
        let logits = model.forward_logits(&tensor(shape, &v[0])?, &rows, Mode::Train, &mut unused)?;
        let mut loss = 0.0;
        let mut grad = Matrix::zeros(logits.rows(), logits.cols());
        for (r, &label) in labels.iter().enumerate() {
            let (l, g) = cross_entropy(&softmax(logits.row(r)), label)?;
            loss += l / labels.len() as f64;
            for (c, gv) in g.iter().enumerate() {
                grad[(r, c)] = gv / labels.len() as f64;
            }
        }
        let pattern = model.activation_pattern();
        if !want {
            return Ok(Eval { loss, grads: None, pattern });
        }
        let dx = model.backward(&grad, &rows)?;
        let mut grads = vec![dx.into_vec()];
        grads.extend(model.params().iter().map(|p| p.grad.clone()));
        Ok(Eval { loss, grads: Some(grads), pattern })
    })
}
