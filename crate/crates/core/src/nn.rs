//! Layers, parameter storage, initialization and the Adam optimizer.
//!
//! Learnable tensors live in a [`ParamStore`]. A forward pass binds the store
//! onto a fresh [`Graph`] (one leaf per entry) and layers look their
//! parameters up by [`ParamId`].

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, ZERO_INDEX};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Linear,
    Conv1d,
    Batchnorm,
    CoordEmbed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub kind: LayerKind,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: LayerKind, tensor: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            kind,
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|e| &e.tensor)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|e| &mut e.tensor)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    /// Records every parameter as a leaf of `graph`, in store order.
    pub fn bind<'g>(&self, graph: &'g Graph) -> Vec<Var<'g>> {
        self.entries.iter().map(|e| graph.leaf(e.tensor.clone())).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            format_version: CHECKPOINT_VERSION,
            params: self.clone(),
        };
        write_json(path, &file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: CheckpointFile = read_json(path)?;
        if file.format_version != CHECKPOINT_VERSION {
            return Err(Error::contract(format!(
                "checkpoint format version {} (expected {CHECKPOINT_VERSION})",
                file.format_version
            )));
        }
        for e in &file.params.entries {
            Tensor::new(e.tensor.shape().to_vec(), e.tensor.data().to_vec())?;
        }
        Ok(file.params)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    params: ParamStore,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line() as u64,
        message: e.to_string(),
    })
}

/// Kaiming-uniform bound for fan-in `fan_in` under a leaky rectifier.
fn kaiming_bound(fan_in: usize) -> f64 {
    let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
    gain * (3.0 / fan_in.max(1) as f64).sqrt()
}

fn uniform_tensor<R: Rng + ?Sized>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_parts(shape, data)
}

pub fn leaky_relu(x: Var<'_>) -> Var<'_> {
    x.leaky_relu(LEAKY_SLOPE)
}

/// Fully connected layer `x · W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self::with_kind(store, name, LayerKind::Linear, in_dim, out_dim, rng)
    }

    fn with_kind<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        kind: LayerKind,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = uniform_tensor(vec![in_dim, out_dim], kaiming_bound(in_dim), rng);
        let weight = store.add(format!("{name}.weight"), kind, w);
        let bias = store.add(format!("{name}.bias"), kind, Tensor::zeros(vec![out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'g>(&self, params: &[Var<'g>], x: Var<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::Shape {
                op: "linear",
                lhs: shape,
                rhs: vec![self.in_dim, self.out_dim],
            });
        }
        x.matmul(params[self.weight.0])?.add(params[self.bias.0])
    }
}

/// Stride-1 cross-correlation with zero "same" padding over `[batch, channels, length]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel;
        let w = uniform_tensor(vec![out_channels, in_channels, kernel], kaiming_bound(fan_in), rng);
        let weight = store.add(format!("{name}.weight"), LayerKind::Conv1d, w);
        let bias = store.add(format!("{name}.bias"), LayerKind::Conv1d, Tensor::zeros(vec![out_channels]));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn forward<'g>(&self, params: &[Var<'g>], x: Var<'g>) -> Result<Var<'g>> {
        conv1d_same(x, params[self.weight.0], params[self.bias.0])
    }
}

/// Same-padded conv1d of `x: [b, c, t]` with `weight: [o, c, k]` and `bias: [o]`.
///
/// Lowered to an im2col gather followed by a matrix product, so both the
/// forward and backward passes stay inside the differentiable primitive set.
pub fn conv1d_same<'g>(x: Var<'g>, weight: Var<'g>, bias: Var<'g>) -> Result<Var<'g>> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
        return Err(Error::Shape {
            op: "conv1d",
            lhs: xs,
            rhs: ws,
        });
    }
    let (b, c, t) = (xs[0], xs[1], xs[2]);
    let (o, k) = (ws[0], ws[2]);
    if t < 1 {
        return Err(Error::contract("conv1d input length must be at least 1"));
    }
    let pad = (k - 1) / 2;
    let mut cols = Vec::with_capacity(b * t * c * k);
    for bi in 0..b {
        for ti in 0..t {
            for ci in 0..c {
                for ki in 0..k {
                    let src = ti as isize + ki as isize - pad as isize;
                    cols.push(if src < 0 || src >= t as isize {
                        ZERO_INDEX
                    } else {
                        bi * c * t + ci * t + src as usize
                    });
                }
            }
        }
    }
    let cols = x.gather(cols, vec![b * t, c * k])?;
    let wmat = weight.reshape(vec![o, c * k])?.transpose()?;
    let y = cols.matmul(wmat)?.add(bias)?; // [b*t, o]
    let mut perm = Vec::with_capacity(b * o * t);
    for bi in 0..b {
        for oi in 0..o {
            for ti in 0..t {
                perm.push((bi * t + ti) * o + oi);
            }
        }
    }
    y.gather(perm, vec![b, o, t])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel normalization over `[batch, channels, length]` (or `[batch, channels]`).
///
/// Train mode normalizes with batch statistics and folds them into the
/// running estimates with momentum [`BN_MOMENTUM`]; eval mode uses the
/// running estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), LayerKind::Batchnorm, Tensor::ones(vec![channels]));
        let beta = store.add(format!("{name}.beta"), LayerKind::Batchnorm, Tensor::zeros(vec![channels]));
        Self {
            gamma,
            beta,
            channels,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn forward<'g>(&mut self, params: &[Var<'g>], x: Var<'g>, mode: Mode) -> Result<Var<'g>> {
        let (y, batch_stats) = self.apply(params, x, mode)?;
        if let Some((mv, vv)) = batch_stats {
            for ci in 0..self.channels {
                self.running_mean[ci] = BN_MOMENTUM * self.running_mean[ci] + (1.0 - BN_MOMENTUM) * mv[ci];
                self.running_var[ci] = BN_MOMENTUM * self.running_var[ci] + (1.0 - BN_MOMENTUM) * vv[ci];
            }
        }
        Ok(y)
    }

    /// Eval-mode forward; leaves the running statistics untouched.
    pub fn infer<'g>(&self, params: &[Var<'g>], x: Var<'g>) -> Result<Var<'g>> {
        Ok(self.apply(params, x, Mode::Eval)?.0)
    }

    #[allow(clippy::type_complexity)]
    fn apply<'g>(&self, params: &[Var<'g>], x: Var<'g>, mode: Mode) -> Result<(Var<'g>, Option<(Vec<f64>, Vec<f64>)>)> {
        let shape = x.shape();
        if !(shape.len() == 2 || shape.len() == 3) || shape[1] != self.channels {
            return Err(Error::Shape {
                op: "batchnorm",
                lhs: shape,
                rhs: vec![self.channels],
            });
        }
        let (b, c) = (shape[0], shape[1]);
        let t = shape.get(2).copied().unwrap_or(1);
        if mode == Mode::Train && b < 2 {
            return Err(Error::contract("batchnorm in train mode needs a batch of at least 2"));
        }
        let g = x.graph();
        // [b, c, t] -> [b*t, c]
        let mut to_rows = Vec::with_capacity(b * c * t);
        for bi in 0..b {
            for ti in 0..t {
                for ci in 0..c {
                    to_rows.push(bi * c * t + ci * t + ti);
                }
            }
        }
        let rows = x.gather(to_rows, vec![b * t, c])?;
        let mut batch_stats = None;
        let normalized = match mode {
            Mode::Train => {
                let mean = rows.mean_batch()?;
                let centered = rows.sub(mean)?;
                let var = centered.square().mean_batch()?;
                let std = var.add_scalar(BN_EPS).sqrt();
                batch_stats = Some((mean.value().data().to_vec(), var.value().data().to_vec()));
                centered.div(std)?
            }
            Mode::Eval => {
                let mean = g.constant(Tensor::vector(self.running_mean.clone()));
                let std = g.constant(Tensor::vector(
                    self.running_var.iter().map(|v| (v + BN_EPS).sqrt()).collect(),
                ));
                rows.sub(mean)?.div(std)?
            }
        };
        let y = normalized.mul(params[self.gamma.0])?.add(params[self.beta.0])?;
        let mut back = Vec::with_capacity(b * c * t);
        for bi in 0..b {
            for ci in 0..c {
                for ti in 0..t {
                    back.push((bi * t + ti) * c + ci);
                }
            }
        }
        Ok((y.gather(back, shape)?, batch_stats))
    }
}

/// Learned affine projection of normalized 2-D coordinates followed by a leaky rectifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordEmbed {
    pub proj: Linear,
}

impl CoordEmbed {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, embed_dim: usize, rng: &mut R) -> Self {
        Self {
            proj: Linear::with_kind(store, name, LayerKind::CoordEmbed, 2, embed_dim, rng),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.proj.out_dim
    }

    /// `coords: [batch, 2]`, normalized to the unit square.
    pub fn forward<'g>(&self, params: &[Var<'g>], coords: Var<'g>) -> Result<Var<'g>> {
        #[cfg(debug_assertions)]
        if coords.value().data().iter().any(|&v| !(-0.5..=1.5).contains(&v)) {
            eprintln!("warning: coord_embed input far outside the unit square");
        }
        Ok(leaky_relu(self.proj.forward(params, coords)?))
    }
}

/// Adam moments and hyperparameters for one [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::contract(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (entry, g) in store.entries().iter().zip(grads) {
            if entry.tensor.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: entry.tensor.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if let Some(bad) = g.data().iter().find(|v| !v.is_finite()) {
                return Err(Error::numeric(format!(
                    "non-finite gradient {bad} for parameter `{}` at step {}",
                    entry.name,
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((param, g), m), v) in store.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &gi), mi), vi) in param.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `grad` of `loss` with respect to `params`, as plain tensors.
pub fn param_grads<'g>(graph: &'g Graph, loss: Var<'g>, params: &[Var<'g>]) -> Result<Vec<Tensor>> {
    Ok(graph
        .grad(loss, params)?
        .into_iter()
        .map(|v| (*v.value()).clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, GradcheckOptions};
    use crate::rng;

    #[test]
    fn linear_identity_and_sum() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(0, 0);
        let lin = Linear::new(&mut store, "l", 2, 2, &mut r);
        *store.get_mut(lin.weight) = Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let g = Graph::new();
        let p = store.bind(&g);
        let x = g.constant(Tensor::matrix(&[vec![3.0, -4.0]]).unwrap());
        assert_eq!(lin.forward(&p, x).unwrap().value().data(), &[3.0, -4.0]);

        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 2, 1, &mut r);
        *store.get_mut(lin.weight) = Tensor::matrix(&[vec![1.0], vec![1.0]]).unwrap();
        let g = Graph::new();
        let p = store.bind(&g);
        let x = g.constant(Tensor::matrix(&[vec![1.0, 1.0]]).unwrap());
        assert_eq!(lin.forward(&p, x).unwrap().value().data(), &[2.0]);
    }

    #[test]
    fn linear_rejects_wrong_width() {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 3, 1, &mut rng::stream(0, 0));
        let g = Graph::new();
        let p = store.bind(&g);
        let x = g.constant(Tensor::zeros(vec![1, 2]));
        assert!(matches!(lin.forward(&p, x), Err(Error::Shape { .. })));
    }

    fn conv_once(kernel: [f64; 3], input: &[f64]) -> Vec<f64> {
        let g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, input.len()], input.to_vec()).unwrap());
        let w = g.constant(Tensor::new(vec![1, 1, 3], kernel.to_vec()).unwrap());
        let b = g.constant(Tensor::zeros(vec![1]));
        conv1d_same(x, w, b).unwrap().value().data().to_vec()
    }

    #[test]
    fn conv1d_examples() {
        let input = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(conv_once([0.0, 1.0, 0.0], &input), input.to_vec());
        assert_eq!(conv_once([1.0, 1.0, 1.0], &input), vec![3.0, 6.0, 9.0, 12.0, 15.0, 11.0]);
    }

    #[test]
    fn conv1d_preserves_length() {
        let mut r = rng::stream(1, 0);
        for t in 1..9 {
            let mut store = ParamStore::new();
            let conv = Conv1d::new(&mut store, "c", 2, 3, 3, &mut r);
            let g = Graph::new();
            let p = store.bind(&g);
            let x = g.constant(Tensor::ones(vec![2, 2, t]));
            assert_eq!(conv.forward(&p, x).unwrap().shape(), vec![2, 3, t]);
        }
    }

    #[test]
    fn layers_pass_gradcheck() {
        let mut r = rng::stream(7, 0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", 3, 4, &mut r);
        let conv = Conv1d::new(&mut store, "conv", 2, 3, 3, &mut r);
        let mut bn = BatchNorm::new(&mut store, "bn", 3);
        let emb = CoordEmbed::new(&mut store, "emb", 3, &mut r);
        // move parameters away from their trivial initial values
        for t in store.tensors_mut() {
            for v in t.data_mut() {
                *v += r.random_range(-0.3..0.3);
            }
        }
        let xs = Tensor::new(vec![2, 3], (0..6).map(|i| 0.3 * i as f64 - 0.7).collect()).unwrap();
        let xc = Tensor::new(vec![3, 2, 4], (0..24).map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0).collect()).unwrap();
        let coords = Tensor::new(vec![2, 2], vec![0.1, 0.9, 0.6, 0.35]).unwrap();
        let mut point: Vec<Tensor> = store.tensors().cloned().collect();
        point.extend([xs, xc, coords]);
        let n = store.len();
        let bn_cell = std::cell::RefCell::new(&mut bn);
        let report = gradcheck(
            |_, v| {
                let p = &v[..n];
                let a = lin.forward(p, v[n])?;
                let c = conv.forward(p, v[n + 1])?;
                let c = bn_cell.borrow_mut().forward(p, c, Mode::Train)?;
                let weights = v[n + 1].graph().constant(
                    Tensor::new(vec![3, 3, 4], (0..36).map(|i| (i % 5) as f64 - 2.0).collect()).unwrap(),
                );
                let e = emb.forward(p, v[n + 2])?;
                leaky_relu(a).square().sum().add(c.mul(weights)?.sum())?.add(e.sum())
            },
            &point,
            GradcheckOptions::with_tol(1e-5),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn batchnorm_constant_batch_is_zero() {
        let mut store = ParamStore::new();
        let mut bn = BatchNorm::new(&mut store, "bn", 2);
        let g = Graph::new();
        let p = store.bind(&g);
        let x = g.constant(Tensor::full(vec![4, 2, 3], 5.0));
        let y = bn.forward(&p, x, Mode::Train).unwrap();
        assert!(y.value().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn batchnorm_train_normalizes_and_tracks() {
        let mut store = ParamStore::new();
        let mut bn = BatchNorm::new(&mut store, "bn", 2);
        let g = Graph::new();
        let p = store.bind(&g);
        let data: Vec<f64> = (0..16).map(|i| (i * i) as f64 * 0.3 - 2.0).collect();
        let x = g.constant(Tensor::new(vec![4, 2, 2], data).unwrap());
        let y = bn.forward(&p, x, Mode::Train).unwrap().value();
        for c in 0..2 {
            let vals: Vec<f64> = (0..4).flat_map(|b| (0..2).map(move |t| (b, t))).map(|(b, t)| y.data()[b * 4 + c * 2 + t]).collect();
            let mean = vals.iter().sum::<f64>() / 8.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
        assert!(bn.running_mean.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn batchnorm_eval_is_deterministic_and_single_row_train_fails() {
        let mut store = ParamStore::new();
        let mut bn = BatchNorm::new(&mut store, "bn", 3);
        bn.running_mean = vec![1.0, 2.0, 3.0];
        bn.running_var = vec![4.0, 1.0, 0.25];
        let run = |bn: &mut BatchNorm| {
            let g = Graph::new();
            let p = store.bind(&g);
            let x = g.constant(Tensor::new(vec![1, 3], vec![3.0, 3.0, 3.0]).unwrap());
            bn.forward(&p, x, Mode::Eval).unwrap().value().data().to_vec()
        };
        let a = run(&mut bn);
        assert_eq!(a, run(&mut bn));
        assert!((a[0] - 1.0).abs() < 1e-5);
        let g = Graph::new();
        let p = store.bind(&g);
        let x = g.constant(Tensor::zeros(vec![1, 3]));
        assert!(bn.forward(&p, x, Mode::Train).is_err());
    }

    #[test]
    fn leaky_relu_values() {
        let g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![5.0, -1.0, -2.0]));
        let y = leaky_relu(x);
        assert_eq!(y.value().data()[..2], [5.0, -0.2]);
        let d = g.grad(y.sum(), &[x]).unwrap()[0].value();
        assert_eq!(d.data()[2], 0.2);
    }

    #[test]
    fn coord_embed_zero_weights_and_width() {
        let mut store = ParamStore::new();
        let emb = CoordEmbed::new(&mut store, "e", 6, &mut rng::stream(0, 0));
        *store.get_mut(emb.proj.weight) = Tensor::zeros(vec![2, 6]);
        let g = Graph::new();
        let p = store.bind(&g);
        let c = g.constant(Tensor::matrix(&[vec![0.2, 0.7]]).unwrap());
        let y = emb.forward(&p, c).unwrap();
        assert_eq!(y.shape(), vec![1, 6]);
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_first_step_and_zero_grad() {
        let mut store = ParamStore::new();
        store.add("w", LayerKind::Linear, Tensor::vector(vec![1.0, -2.0, 0.5]));
        let before = store.clone();
        let mut adam = AdamState::new(&store, 1e-4);
        adam.step(&mut store, &[Tensor::zeros(vec![3])]).unwrap();
        assert_eq!(store, before);

        let mut adam = AdamState::new(&store, 1e-4);
        adam.step(&mut store, &[Tensor::ones(vec![3])]).unwrap();
        for (a, b) in store.get(ParamId(0)).data().iter().zip(before.get(ParamId(0)).data()) {
            assert!(((b - a) - 1e-4).abs() < 1e-9);
        }
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut store = ParamStore::new();
        store.add("w", LayerKind::Linear, Tensor::vector(vec![1.0]));
        let mut adam = AdamState::new(&store, 1e-3);
        let err = adam.step(&mut store, &[Tensor::vector(vec![f64::NAN])]).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(adam.step, 0);
        assert_eq!(store.get(ParamId(0)).data(), &[1.0]);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let build = |seed| {
            let mut store = ParamStore::new();
            let mut r = rng::stream(seed, 3);
            Linear::new(&mut store, "a", 4, 5, &mut r);
            Conv1d::new(&mut store, "b", 2, 3, 3, &mut r);
            store
        };
        assert_eq!(build(11), build(11));
        assert_ne!(build(11), build(12));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(5, 0);
        Linear::new(&mut store, "a", 7, 3, &mut r);
        let mut store2 = store.clone();
        store2.get_mut(ParamId(0)).data_mut()[0] = 0.1 + 0.2;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        store2.save(&path).unwrap();
        let loaded = ParamStore::load(&path).unwrap();
        for (a, b) in loaded.tensors().zip(store2.tensors()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }
}
