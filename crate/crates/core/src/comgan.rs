//! Generator/critic pair, the adversarial training objectives and the training loop.

use std::path::Path;
use std::time::Instant;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dataset::{FingerprintDatabase, MaskFill, StandardizationStats};
use crate::error::{Error, Result};
use crate::nn::{self, param_grads, AdamState, BatchNorm, Conv1d, CoordEmbed, Linear, Mode, ParamStore};
use crate::rng::{self, Rng};
use crate::scene::{Point, Rect};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub conv_widths: Vec<usize>,
    pub trunk_width: usize,
    pub kernel: usize,
    /// Additive skips `(from, to)`: the output of block `from` is added to that of block `to`.
    pub skips: Vec<(usize, usize)>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            conv_widths: vec![16, 64, 128, 64, 16],
            trunk_width: 96,
            kernel: 3,
            skips: vec![(0, 4), (1, 3)],
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self, ru_count: usize) -> Result<()> {
        let bad = |key: &str, message: String| Error::Config {
            key: format!("generator.{key}"),
            message,
        };
        if self.conv_widths.is_empty() || self.conv_widths.contains(&0) {
            return Err(bad("conv_widths", "widths must be non-empty and positive".into()));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(bad("kernel", format!("kernel must be odd, got {}", self.kernel)));
        }
        if self.trunk_width == 0 || !self.trunk_width.is_multiple_of(ru_count) {
            return Err(bad(
                "trunk_width",
                format!("{} is not a positive multiple of the RU count {ru_count}", self.trunk_width),
            ));
        }
        for &(from, to) in &self.skips {
            if from >= to || to >= self.conv_widths.len() || self.conv_widths[from] != self.conv_widths[to] {
                return Err(bad("skips", format!("skip {from}->{to} does not join two width-matched blocks")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticConfig {
    pub conv_widths: Vec<usize>,
    /// Hidden and output widths of the auxiliary RP head; the last must be 2.
    pub aux_widths: Vec<usize>,
    pub kernel: usize,
    pub batch_norm: bool,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            conv_widths: vec![16, 64, 128],
            aux_widths: vec![8, 2],
            kernel: 3,
            batch_norm: false,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| Error::Config {
            key: format!("critic.{key}"),
            message: message.into(),
        };
        if self.conv_widths.is_empty() || self.conv_widths.contains(&0) {
            return Err(bad("conv_widths", "widths must be non-empty and positive"));
        }
        if self.aux_widths.last() != Some(&2) || self.aux_widths.contains(&0) {
            return Err(bad("aux_widths", "the auxiliary head must end in 2 outputs"));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(bad("kernel", "kernel must be odd"));
        }
        Ok(())
    }
}

/// Loss weights shared by both objectives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gradient_penalty: f64,
    pub aux: f64,
    pub reconstruction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(alias = "lambda_1")]
    pub gp_weight: f64,
    #[serde(alias = "lambda_2")]
    pub aux_weight: f64,
    #[serde(alias = "lambda_3")]
    pub reconstruction_weight: f64,
    pub learning_rate: f64,
    pub n_critic: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Generator updates per epoch; one pass over the data when unset.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    /// Measured RUs kept per training input.
    pub keep: usize,
    /// False builds the lite variant: no auxiliary head and no auxiliary term.
    pub auxiliary: bool,
    pub mask_fill: MaskFill,
    pub checkpoint_every: Option<usize>,
    /// Area used to normalize RP coordinates; the training RPs' bounding box when unset.
    pub coord_bounds: Option<Rect>,
    pub generator: GeneratorConfig,
    pub critic: CriticConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gp_weight: 10.0,
            aux_weight: 1.0,
            reconstruction_weight: 100.0,
            learning_rate: 1e-4,
            n_critic: 5,
            batch_size: 64,
            epochs: 20,
            steps_per_epoch: None,
            seed: 0,
            keep: 1,
            auxiliary: true,
            mask_fill: MaskFill::default(),
            checkpoint_every: None,
            coord_bounds: None,
            generator: GeneratorConfig::default(),
            critic: CriticConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn lite(mut self) -> Self {
        self.auxiliary = false;
        self.aux_weight = 0.0;
        self
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            gradient_penalty: self.gp_weight,
            aux: if self.auxiliary { self.aux_weight } else { 0.0 },
            reconstruction: self.reconstruction_weight,
        }
    }

    pub fn validate(&self, ru_count: usize) -> Result<()> {
        let bad = |key: &str, message: String| Error::Config {
            key: key.into(),
            message,
        };
        for (key, v) in [
            ("gp_weight", self.gp_weight),
            ("aux_weight", self.aux_weight),
            ("reconstruction_weight", self.reconstruction_weight),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(bad(key, format!("must be a finite non-negative number, got {v}")));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(bad("learning_rate", "must be positive".into()));
        }
        if self.n_critic == 0 {
            return Err(bad("n_critic", "must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(bad("batch_size", "must be at least 2".into()));
        }
        if self.keep == 0 || self.keep >= ru_count {
            return Err(bad("keep", format!("must satisfy 1 <= keep < {ru_count}")));
        }
        self.generator.validate(ru_count)?;
        self.critic.validate()
    }
}

/// Coordinate-conditioned completion network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    ru_count: usize,
    skips: Vec<(usize, usize)>,
    embed: CoordEmbed,
    trunk: Linear,
    convs: Vec<Conv1d>,
    norms: Vec<BatchNorm>,
    head: Linear,
}

impl Generator {
    pub fn new(store: &mut ParamStore, ru_count: usize, cfg: &GeneratorConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate(ru_count)?;
        let embed = CoordEmbed::new(store, "gen.embed", ru_count, rng);
        let trunk = Linear::new(store, "gen.trunk", 2 * ru_count, cfg.trunk_width, rng);
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut channels = cfg.trunk_width / ru_count;
        for (i, &w) in cfg.conv_widths.iter().enumerate() {
            convs.push(Conv1d::new(store, &format!("gen.block{i}.conv"), channels, w, cfg.kernel, rng));
            norms.push(BatchNorm::new(store, &format!("gen.block{i}.bn"), w));
            channels = w;
        }
        let head = Linear::new(store, "gen.head", channels * ru_count, ru_count, rng);
        Ok(Self {
            ru_count,
            skips: cfg.skips.clone(),
            embed,
            trunk,
            convs,
            norms,
            head,
        })
    }

    pub fn ru_count(&self) -> usize {
        self.ru_count
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// `masked: [b, L]` standardized with fills at missing entries, `coords: [b, 2]` normalized.
    pub fn forward<'g>(&mut self, params: &[Var<'g>], masked: Var<'g>, coords: Var<'g>, mode: Mode) -> Result<Var<'g>> {
        let Generator {
            ru_count,
            skips,
            embed,
            trunk,
            convs,
            norms,
            head,
        } = self;
        generator_body(*ru_count, skips, embed, trunk, convs, head, params, masked, coords, |i, x| {
            norms[i].forward(params, x, mode)
        })
    }

    /// Eval-mode forward that leaves running statistics untouched.
    pub fn infer<'g>(&self, params: &[Var<'g>], masked: Var<'g>, coords: Var<'g>) -> Result<Var<'g>> {
        generator_body(
            self.ru_count,
            &self.skips,
            &self.embed,
            &self.trunk,
            &self.convs,
            &self.head,
            params,
            masked,
            coords,
            |i, x| self.norms[i].infer(params, x),
        )
    }
}

#[allow(clippy::too_many_arguments)]
fn generator_body<'g>(
    l: usize,
    skips: &[(usize, usize)],
    embed: &CoordEmbed,
    trunk: &Linear,
    convs: &[Conv1d],
    head: &Linear,
    params: &[Var<'g>],
    masked: Var<'g>,
    coords: Var<'g>,
    mut norm: impl FnMut(usize, Var<'g>) -> Result<Var<'g>>,
) -> Result<Var<'g>> {
    let (ms, cs) = (masked.shape(), coords.shape());
    if ms.len() != 2 || ms[1] != l || cs != [ms[0], 2] {
        return Err(Error::Shape {
            op: "generator_forward",
            lhs: ms,
            rhs: cs,
        });
    }
    let b = ms[0];
    let e = embed.forward(params, coords)?;
    let h = nn::leaky_relu(trunk.forward(params, masked.concat_cols(e)?)?);
    let mut x = h.reshape(vec![b, trunk.out_dim / l, l])?;
    let mut outputs: Vec<Var<'g>> = Vec::with_capacity(convs.len());
    for (i, conv) in convs.iter().enumerate() {
        let mut y = nn::leaky_relu(norm(i, conv.forward(params, x)?)?);
        for &(from, _) in skips.iter().filter(|s| s.1 == i) {
            y = y.add(outputs[from])?;
        }
        outputs.push(y);
        x = y;
    }
    let flat = x.reshape(vec![b, head.in_dim])?;
    head.forward(params, flat)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AuxHead {
    layers: Vec<Linear>,
}

/// Wasserstein critic with an optional auxiliary RP regression head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Critic {
    ru_count: usize,
    convs: Vec<Conv1d>,
    norms: Vec<BatchNorm>,
    score: Linear,
    aux: Option<AuxHead>,
}

/// Critic outputs for one batch.
#[derive(Clone, Copy, Debug)]
pub struct CriticOutput<'g> {
    /// `[b, 1]`, unbounded.
    pub score: Var<'g>,
    /// `[b, 2]` normalized coordinates, absent in the lite variant.
    pub rp: Option<Var<'g>>,
}

impl Critic {
    pub fn new(store: &mut ParamStore, ru_count: usize, cfg: &CriticConfig, auxiliary: bool, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut channels = 1;
        for (i, &w) in cfg.conv_widths.iter().enumerate() {
            convs.push(Conv1d::new(store, &format!("critic.block{i}.conv"), channels, w, cfg.kernel, rng));
            if cfg.batch_norm {
                norms.push(BatchNorm::new(store, &format!("critic.block{i}.bn"), w));
            }
            channels = w;
        }
        let flat = channels * ru_count;
        let score = Linear::new(store, "critic.score", flat, 1, rng);
        // Created last so that the lite variant shares every other initial weight.
        let aux = auxiliary.then(|| {
            let mut layers = Vec::new();
            let mut width = flat;
            for (i, &w) in cfg.aux_widths.iter().enumerate() {
                layers.push(Linear::new(store, &format!("critic.aux{i}"), width, w, rng));
                width = w;
            }
            AuxHead { layers }
        });
        Ok(Self {
            ru_count,
            convs,
            norms,
            score,
            aux,
        })
    }

    pub fn has_aux(&self) -> bool {
        self.aux.is_some()
    }

    /// `rss: [b, L]` standardized.
    pub fn forward<'g>(&mut self, params: &[Var<'g>], rss: Var<'g>) -> Result<CriticOutput<'g>> {
        let s = rss.shape();
        if s.len() != 2 || s[1] != self.ru_count {
            return Err(Error::Shape {
                op: "critic_forward",
                lhs: s,
                rhs: vec![self.ru_count],
            });
        }
        let b = s[0];
        let mut x = rss.reshape(vec![b, 1, self.ru_count])?;
        for i in 0..self.convs.len() {
            let mut y = self.convs[i].forward(params, x)?;
            if let Some(bn) = self.norms.get_mut(i) {
                y = bn.forward(params, y, Mode::Train)?;
            }
            x = nn::leaky_relu(y);
        }
        let flat = x.reshape(vec![b, self.score.in_dim])?;
        let score = self.score.forward(params, flat)?;
        let rp = match &self.aux {
            Some(head) => {
                let mut h = flat;
                for (i, layer) in head.layers.iter().enumerate() {
                    h = layer.forward(params, h)?;
                    if i + 1 < head.layers.len() {
                        h = nn::leaky_relu(h);
                    }
                }
                Some(h)
            }
            None => None,
        };
        Ok(CriticOutput { score, rp })
    }
}

/// `E[(‖∇ score(x̂)‖₂ − 1)²]` over `x̂ = u·real + (1 − u)·fake`, one `u` per row.
///
/// The input gradient is itself a graph value, so the result differentiates
/// with respect to whatever parameters `score` closes over.
pub fn gradient_penalty<'g>(
    graph: &'g Graph,
    mut score: impl FnMut(Var<'g>) -> Result<Var<'g>>,
    real: &Tensor,
    fake: &Tensor,
    mix: &[f64],
) -> Result<Var<'g>> {
    if real.shape() != fake.shape() || real.shape().len() != 2 {
        return Err(Error::contract(format!(
            "gradient penalty needs equal 2-D batches, got {:?} and {:?}",
            real.shape(),
            fake.shape()
        )));
    }
    let (b, w) = (real.shape()[0], real.shape()[1]);
    if mix.len() != b {
        return Err(Error::contract(format!("{} mixing weights for a batch of {b}", mix.len())));
    }
    let data = real
        .data()
        .iter()
        .zip(fake.data())
        .enumerate()
        .map(|(k, (&r, &f))| {
            let u = mix[k / w];
            u * r + (1.0 - u) * f
        })
        .collect();
    let x_hat = graph.leaf(Tensor::new(vec![b, w], data)?);
    let s = score(x_hat)?;
    let g = graph.grad(s.sum(), &[x_hat])?[0];
    let norms = g.square().sum_cols()?.add_scalar(NORM_EPS).sqrt();
    if !norms.value().is_finite() {
        return Err(Error::numeric("non-finite critic input-gradient norm"));
    }
    Ok(norms.add_scalar(-1.0).square().mean())
}

/// Terms of the critic objective; `total` is the one to minimize.
#[derive(Clone, Copy, Debug)]
pub struct CriticLoss<'g> {
    pub total: Var<'g>,
    /// `E[score(fake)] − E[score(real)]`.
    pub wasserstein: Var<'g>,
    pub gradient_penalty: Var<'g>,
    pub aux_mse: Var<'g>,
}

/// Terms of the generator objective.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorLoss<'g> {
    pub total: Var<'g>,
    pub adversarial: Var<'g>,
    pub aux_mse: Var<'g>,
    pub reconstruction: Var<'g>,
}

fn check_aligned(real: &Var<'_>, fake: &Var<'_>) -> Result<()> {
    if real.shape() != fake.shape() {
        return Err(Error::contract(format!(
            "real and fake batches are not row-aligned: {:?} vs {:?}",
            real.shape(),
            fake.shape()
        )));
    }
    Ok(())
}

fn aux_mse<'g>(graph: &'g Graph, real: &CriticOutput<'g>, fake: &CriticOutput<'g>) -> Result<Var<'g>> {
    match (real.rp, fake.rp) {
        (Some(a), Some(b)) => Ok(a.sub(b)?.square().mean()),
        _ => Ok(graph.scalar(0.0)),
    }
}

/// Critic objective on row-aligned batches; `fake[i]` was completed from a masked copy of `real[i]`.
pub fn critic_loss<'g>(
    critic: &mut Critic,
    params: &[Var<'g>],
    real: Var<'g>,
    fake: Var<'g>,
    mix: &[f64],
    weights: &LossWeights,
) -> Result<CriticLoss<'g>> {
    check_aligned(&real, &fake)?;
    let graph = real.graph();
    let on_real = critic.forward(params, real)?;
    let on_fake = critic.forward(params, fake)?;
    let wasserstein = on_fake.score.mean().sub(on_real.score.mean())?;
    let (rv, fv) = (real.value(), fake.value());
    let gp = gradient_penalty(graph, |x| Ok(critic.forward(params, x)?.score), &rv, &fv, mix)?;
    let aux = aux_mse(graph, &on_real, &on_fake)?;
    let total = wasserstein
        .add(gp.scale(weights.gradient_penalty))?
        .add(aux.scale(weights.aux))?;
    Ok(CriticLoss {
        total,
        wasserstein,
        gradient_penalty: gp,
        aux_mse: aux,
    })
}

/// Generator objective; gradients reach the generator through `fake`.
pub fn generator_loss<'g>(
    critic: &mut Critic,
    critic_params: &[Var<'g>],
    real: Var<'g>,
    fake: Var<'g>,
    weights: &LossWeights,
) -> Result<GeneratorLoss<'g>> {
    check_aligned(&real, &fake)?;
    let graph = real.graph();
    let on_real = critic.forward(critic_params, real)?;
    let on_fake = critic.forward(critic_params, fake)?;
    let adversarial = on_fake.score.mean().neg();
    let aux = aux_mse(graph, &on_real, &on_fake)?;
    let reconstruction = fake.sub(real)?.abs().mean();
    let total = adversarial
        .add(aux.scale(weights.aux))?
        .add(reconstruction.scale(weights.reconstruction))?;
    Ok(GeneratorLoss {
        total,
        adversarial,
        aux_mse: aux,
        reconstruction,
    })
}

/// Per-epoch means of the logged loss terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub critic: f64,
    pub generator: f64,
    pub gradient_penalty: f64,
    /// `E[score(real)] − E[score(fake)]` over the critic updates.
    pub score_gap: f64,
    pub aux_mse: f64,
    pub reconstruction: f64,
}

/// Trained (or freshly initialized) model with optimizer state and history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comgan {
    pub config: TrainConfig,
    pub generator: Generator,
    pub critic: Critic,
    pub generator_params: ParamStore,
    pub critic_params: ParamStore,
    pub generator_adam: AdamState,
    pub critic_adam: AdamState,
    pub history: Vec<EpochLosses>,
    pub stats: Option<StandardizationStats>,
    pub bounds: Rect,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    model: Comgan,
}

#[derive(Serialize)]
struct CheckpointRef<'a> {
    format_version: u32,
    model: &'a Comgan,
}

impl Comgan {
    pub fn new(ru_count: usize, cfg: &TrainConfig, bounds: Rect) -> Result<Self> {
        cfg.validate(ru_count)?;
        if !(bounds.width() > 0.0 && bounds.height() > 0.0) {
            return Err(Error::contract("coordinate bounds must have positive area"));
        }
        let mut generator_params = ParamStore::new();
        let generator = Generator::new(&mut generator_params, ru_count, &cfg.generator, &mut rng::stream(cfg.seed, 1))?;
        let mut critic_params = ParamStore::new();
        let critic = Critic::new(&mut critic_params, ru_count, &cfg.critic, cfg.auxiliary, &mut rng::stream(cfg.seed, 2))?;
        Ok(Self {
            generator_adam: AdamState::new(&generator_params, cfg.learning_rate),
            critic_adam: AdamState::new(&critic_params, cfg.learning_rate),
            config: cfg.clone(),
            generator,
            critic,
            generator_params,
            critic_params,
            history: Vec::new(),
            stats: None,
            bounds,
        })
    }

    pub fn ru_count(&self) -> usize {
        self.generator.ru_count
    }

    pub fn is_finite(&self) -> bool {
        self.generator_params.is_finite() && self.critic_params.is_finite()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        nn::write_json(
            path,
            &CheckpointRef {
                format_version: CHECKPOINT_VERSION,
                model: self,
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = nn::read_json(path)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::contract(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.format_version
            )));
        }
        Ok(ck.model)
    }

    fn stats(&self) -> Result<&StandardizationStats> {
        self.stats
            .as_ref()
            .ok_or_else(|| Error::contract("model has no standardization statistics; train it first"))
    }

    /// Eval-mode generator output in standardized units; `masked: [b, L]`, `coords: [b, 2]` normalized.
    pub fn predict_standardized(&self, masked: Tensor, coords: Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let params = self.generator_params.bind(&g);
        let y = self.generator.infer(&params, g.constant(masked), g.constant(coords))?;
        let out = (*y.value()).clone();
        Ok(out)
    }

    /// Completes raw-dB rows (`rss` and `mask` row-major, one coordinate per row) to raw dB.
    ///
    /// Measured entries come back as predicted too; fusing them is up to the caller.
    pub fn complete_batch(&self, rss: &[f64], mask: &[bool], coords: &[Point]) -> Result<Vec<f64>> {
        let stats = self.stats()?;
        let l = self.ru_count();
        let b = coords.len();
        if rss.len() != b * l || mask.len() != b * l {
            return Err(Error::Shape {
                op: "complete",
                lhs: vec![rss.len(), mask.len()],
                rhs: vec![b, l],
            });
        }
        let fill = self.config.mask_fill;
        let mut input = Vec::with_capacity(b * l);
        for (k, (&v, &m)) in rss.iter().zip(mask).enumerate() {
            input.push(if m { stats.forward(k % l, v) } else { fill.value(stats, k % l) });
        }
        let c: Vec<f64> = coords.iter().flat_map(|&p| self.bounds.normalize(p)).collect();
        let y = self.predict_standardized(Tensor::new(vec![b, l], input)?, Tensor::new(vec![b, 2], c)?)?;
        let out: Vec<f64> = y.data().iter().enumerate().map(|(k, &v)| stats.inverse(k % l, v)).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("generator produced a non-finite value"));
        }
        Ok(out)
    }

    pub fn complete(&self, rss: &[f64], mask: &[bool], coord: Point) -> Result<Vec<f64>> {
        self.complete_batch(rss, mask, &[coord])
    }
}

/// JSON summary written next to a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub config: TrainConfig,
    pub seed: u64,
    pub epoch_losses: Vec<EpochLosses>,
    pub wall_time_s: f64,
}

impl TrainingManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        nn::write_json(path, self)
    }
}

struct TrainingSet {
    rows: Vec<f64>,
    coords: Vec<f64>,
    fills: Vec<f64>,
    l: usize,
}

impl TrainingSet {
    fn len(&self) -> usize {
        self.coords.len() / 2
    }

    /// `(real, masked, coords)` for `batch` rows drawn with replacement.
    fn draw(&self, batch: usize, keep: usize, rng: &mut Rng) -> Result<(Tensor, Tensor, Tensor)> {
        let l = self.l;
        let mut real = Vec::with_capacity(batch * l);
        let mut masked = Vec::with_capacity(batch * l);
        let mut coords = Vec::with_capacity(batch * 2);
        for _ in 0..batch {
            let i = rng.random_range(0..self.len());
            let row = &self.rows[i * l..(i + 1) * l];
            real.extend_from_slice(row);
            let start = masked.len();
            masked.extend_from_slice(&self.fills);
            for j in index::sample(rng, l, keep) {
                masked[start + j] = row[j];
            }
            coords.extend_from_slice(&self.coords[2 * i..2 * i + 2]);
        }
        Ok((
            Tensor::new(vec![batch, l], real)?,
            Tensor::new(vec![batch, l], masked)?,
            Tensor::new(vec![batch, 2], coords)?,
        ))
    }
}

fn training_set(db: &FingerprintDatabase, stats: &StandardizationStats, bounds: &Rect, fill: MaskFill) -> Result<TrainingSet> {
    let l = db.ru_count();
    let mut rows = Vec::new();
    let mut coords = Vec::new();
    for i in 0..db.len() {
        if db.mask_row(i).iter().all(|&m| m) {
            rows.extend_from_slice(db.row(i));
            coords.extend(bounds.normalize(db.sample_coord(i)));
        }
    }
    if rows.is_empty() {
        return Err(Error::contract("training needs fully measured samples"));
    }
    let fills = (0..l).map(|ru| fill.value(stats, ru)).collect();
    Ok(TrainingSet { rows, coords, fills, l })
}

/// Trains a fresh model on a standardized database.
pub fn train(db: &FingerprintDatabase, cfg: &TrainConfig) -> Result<Comgan> {
    train_with_checkpoints(db, cfg, None)
}

/// As [`train`], writing `epoch_N.json` every `checkpoint_every` epochs into `dir`.
///
/// A non-finite loss aborts the run; with `dir` set the last good state is
/// written to `last_good.json` first.
pub fn train_with_checkpoints(db: &FingerprintDatabase, cfg: &TrainConfig, dir: Option<&Path>) -> Result<Comgan> {
    let stats = db
        .standardization()
        .ok_or_else(|| Error::contract("training database must be standardized"))?
        .clone();
    let bounds = match &cfg.coord_bounds {
        Some(b) => *b,
        None => {
            let b = db.coord_bounds();
            if b.width() > 0.0 && b.height() > 0.0 {
                b
            } else {
                b.expanded(0.5)
            }
        }
    };
    let mut model = Comgan::new(db.ru_count(), cfg, bounds)?;
    model.stats = Some(stats.clone());
    if cfg.epochs == 0 {
        return Ok(model);
    }
    let data = training_set(db, &stats, &model.bounds, cfg.mask_fill)?;
    let steps = cfg
        .steps_per_epoch
        .unwrap_or_else(|| data.len().div_ceil(cfg.batch_size))
        .max(1);
    let weights = cfg.weights();
    let mut batches = rng::stream(cfg.seed, 3);
    let mut mixes = rng::stream(cfg.seed, 4);
    let mut last_good = model.clone();

    for epoch in 0..cfg.epochs {
        let mut acc = [0.0; 6];
        let mut critic_updates = 0usize;
        let outcome = (|| -> Result<()> {
            for _ in 0..steps {
                for _ in 0..cfg.n_critic {
                    let terms = critic_step(&mut model, &data, &weights, &mut batches, &mut mixes)?;
                    acc[0] += terms[0];
                    acc[2] += terms[1];
                    acc[3] += terms[2];
                    acc[4] += terms[3];
                    critic_updates += 1;
                }
                let terms = generator_step(&mut model, &data, &weights, &mut batches)?;
                acc[1] += terms[0];
                acc[5] += terms[1];
            }
            Ok(())
        })();
        if let Err(e) = outcome {
            if let Some(dir) = dir {
                last_good.save(&dir.join("last_good.json"))?;
            }
            return Err(match e {
                Error::Numeric(m) => Error::Numeric(format!("training aborted in epoch {epoch}: {m}")),
                other => other,
            });
        }
        let c = critic_updates as f64;
        let s = steps as f64;
        model.history.push(EpochLosses {
            epoch,
            critic: acc[0] / c,
            generator: acc[1] / s,
            gradient_penalty: acc[2] / c,
            score_gap: -acc[3] / c,
            aux_mse: acc[4] / c,
            reconstruction: acc[5] / s,
        });
        last_good = model.clone();
        if let (Some(dir), Some(every)) = (dir, cfg.checkpoint_every) {
            if every > 0 && (epoch + 1) % every == 0 {
                model.save(&dir.join(format!("epoch_{}.json", epoch + 1)))?;
            }
        }
    }
    Ok(model)
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::numeric(format!("non-finite {name} loss")))
    }
}

fn generate(model: &mut Comgan, masked: Tensor, coords: Tensor) -> Result<Tensor> {
    let g = Graph::new();
    let params = model.generator_params.bind(&g);
    let fake = model
        .generator
        .forward(&params, g.constant(masked), g.constant(coords), Mode::Train)?;
    let out = (*fake.value()).clone();
    Ok(out)
}

/// One critic update; returns `[total, gp, wasserstein, aux]`.
fn critic_step(model: &mut Comgan, data: &TrainingSet, weights: &LossWeights, batches: &mut Rng, mixes: &mut Rng) -> Result<[f64; 4]> {
    let b = model.config.batch_size;
    let (real, masked, coords) = data.draw(b, model.config.keep, batches)?;
    let fake = generate(model, masked, coords)?;
    let mix: Vec<f64> = (0..b).map(|_| mixes.random::<f64>()).collect();
    let g = Graph::new();
    let params = model.critic_params.bind(&g);
    let loss = critic_loss(&mut model.critic, &params, g.constant(real), g.constant(fake), &mix, weights)?;
    let total = finite("critic", loss.total.item())?;
    let grads = param_grads(&g, loss.total, &params)?;
    model.critic_adam.step(&mut model.critic_params, &grads)?;
    Ok([total, loss.gradient_penalty.item(), loss.wasserstein.item(), loss.aux_mse.item()])
}

/// One generator update; returns `[total, reconstruction]`.
fn generator_step(model: &mut Comgan, data: &TrainingSet, weights: &LossWeights, batches: &mut Rng) -> Result<[f64; 2]> {
    let b = model.config.batch_size;
    let (real, masked, coords) = data.draw(b, model.config.keep, batches)?;
    let g = Graph::new();
    let gen_params = model.generator_params.bind(&g);
    let critic_params = model.critic_params.bind(&g);
    let fake = model
        .generator
        .forward(&gen_params, g.constant(masked), g.constant(coords), Mode::Train)?;
    let loss = generator_loss(&mut model.critic, &critic_params, g.constant(real), fake, weights)?;
    let total = finite("generator", loss.total.item())?;
    let grads = param_grads(&g, loss.total, &gen_params)?;
    model.generator_adam.step(&mut model.generator_params, &grads)?;
    Ok([total, loss.reconstruction.item()])
}

/// Wall-clock helper for manifests.
pub fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, start.elapsed().as_secs_f64()))
}
