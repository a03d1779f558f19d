//! The three router networks and their batched forward/backward passes.

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nn::{
    init_uniform, lit, relu, relu_backward, EncoderCache, EncoderLayer, Linear, ParamMuts, ParamRefs, Real,
};
use crate::error::{Error, Result};
use crate::features::{FeatureBundle, STATS_DIM};

/// Number of modality tokens fed to the encoder: text, image, statistics.
pub const SLOTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Transformer {
        layers: usize,
        model_dim: usize,
        heads: usize,
        ffn_dim: usize,
        dropout: f64,
    },
    Mlp {
        model_dim: usize,
        hidden: Vec<usize>,
    },
    BilinearMf {
        model_dim: usize,
        rank: usize,
    },
}

impl Architecture {
    /// 2 layers, d = 256, 4 heads, FFN 512, dropout 0.3.
    pub fn transformer() -> Self {
        Architecture::Transformer {
            layers: 2,
            model_dim: 256,
            heads: 4,
            ffn_dim: 512,
            dropout: 0.3,
        }
    }

    /// Three hidden ReLU layers of width 256 over the projected modalities.
    pub fn mlp() -> Self {
        Architecture::Mlp {
            model_dim: 256,
            hidden: vec![256, 256, 256],
        }
    }

    pub fn bilinear_mf() -> Self {
        Architecture::BilinearMf {
            model_dim: 256,
            rank: 16,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Transformer { .. } => "transformer",
            Architecture::Mlp { .. } => "mlp",
            Architecture::BilinearMf { .. } => "mf",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "transformer" => Ok(Self::transformer()),
            "mlp" => Ok(Self::mlp()),
            "mf" | "bilinear-mf" => Ok(Self::bilinear_mf()),
            other => Err(Error::invalid(format!("unknown router variant {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::Transformer {
                layers,
                model_dim,
                heads,
                ffn_dim,
                dropout,
            } => {
                if *layers == 0 || *model_dim == 0 || *heads == 0 || *ffn_dim == 0 {
                    return Err(Error::invalid("transformer sizes must be positive"));
                }
                if model_dim % heads != 0 {
                    return Err(Error::invalid(format!("model dim {model_dim} not divisible by {heads} heads")));
                }
                if !(0.0..1.0).contains(dropout) {
                    return Err(Error::Range(format!("dropout {dropout} not in [0, 1)")));
                }
            }
            Architecture::Mlp { model_dim, hidden } => {
                if *model_dim == 0 || hidden.is_empty() || hidden.contains(&0) {
                    return Err(Error::invalid("mlp sizes must be positive"));
                }
            }
            Architecture::BilinearMf { model_dim, rank } => {
                if *model_dim == 0 || *rank == 0 {
                    return Err(Error::invalid("mf sizes must be positive"));
                }
            }
        }
        Ok(())
    }
}

/// Embedding widths the network was built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub text: usize,
    pub image: usize,
}

impl InputDims {
    pub fn raw_width(&self) -> usize {
        self.text + self.image + STATS_DIM
    }
}

/// Inputs are clamped to this magnitude so no finite input can overflow.
pub const INPUT_LIMIT: f64 = 1e6;

fn clamp_input(x: f32) -> f64 {
    (x as f64).clamp(-INPUT_LIMIT, INPUT_LIMIT)
}

/// Dense, zero-filled-where-masked model inputs for a batch.
#[derive(Debug, Clone)]
pub struct Batch<F> {
    pub text: Array2<F>,
    pub image: Array2<F>,
    pub stats: Array2<F>,
}

impl<F: Real> Batch<F> {
    pub fn len(&self) -> usize {
        self.stats.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_bundles(bundles: &[&FeatureBundle], dims: InputDims) -> Result<Self> {
        let n = bundles.len();
        let mut text = Array2::zeros((n, dims.text));
        let mut image = Array2::zeros((n, dims.image));
        let mut stats = Array2::zeros((n, STATS_DIM));
        for (i, b) in bundles.iter().enumerate() {
            if let Some(v) = b.effective_text() {
                if v.len() != dims.text {
                    return Err(Error::Dimension(format!(
                        "query {}: text embedding has {} values, model expects {}",
                        b.query_id,
                        v.len(),
                        dims.text
                    )));
                }
                text.row_mut(i).assign(&Array1::from_iter(v.iter().map(|&x| lit::<F>(clamp_input(x)))));
            }
            if let Some(v) = b.effective_image() {
                if v.len() != dims.image {
                    return Err(Error::Dimension(format!(
                        "query {}: image embedding has {} values, model expects {}",
                        b.query_id,
                        v.len(),
                        dims.image
                    )));
                }
                image.row_mut(i).assign(&Array1::from_iter(v.iter().map(|&x| lit::<F>(clamp_input(x)))));
            }
            if let Some(v) = b.effective_stats() {
                stats.row_mut(i).assign(&Array1::from_iter(v.iter().map(|&x| lit::<F>(clamp_input(x)))));
            }
        }
        Ok(Self { text, image, stats })
    }

    fn raw(&self) -> Array2<F> {
        concatenate(Axis(1), &[self.text.view(), self.image.view(), self.stats.view()])
            .expect("batch parts share row count")
    }
}

/// Linear maps from each modality into the shared model space.
#[derive(Debug, Clone, PartialEq)]
pub struct Projections<F> {
    pub text: Linear<F>,
    pub image: Linear<F>,
    pub stats: Linear<F>,
}

impl<F: Real> Projections<F> {
    fn new<R: Rng>(rng: &mut R, dims: InputDims, model_dim: usize) -> Self {
        Self {
            text: Linear::new(rng, dims.text, model_dim),
            image: Linear::new(rng, dims.image, model_dim),
            stats: Linear::new(rng, STATS_DIM, model_dim),
        }
    }

    fn forward(&self, batch: &Batch<F>) -> [Array2<F>; SLOTS] {
        [
            self.text.forward(&batch.text),
            self.image.forward(&batch.image),
            self.stats.forward(&batch.stats),
        ]
    }

    fn backward(&self, batch: &Batch<F>, dv: [Array2<F>; SLOTS], grad: &mut Self) {
        let [dt, di, ds] = dv;
        self.text.backward(&batch.text, &dt, &mut grad.text);
        self.image.backward(&batch.image, &di, &mut grad.image);
        self.stats.backward(&batch.stats, &ds, &mut grad.stats);
    }

    fn params<'a>(&'a self, out: &mut ParamRefs<'a, F>) {
        self.text.params("proj.text", out);
        self.image.params("proj.image", out);
        self.stats.params("proj.stats", out);
    }

    fn params_mut<'a>(&'a mut self, out: &mut ParamMuts<'a, F>) {
        self.text.params_mut("proj.text", out);
        self.image.params_mut("proj.image", out);
        self.stats.params_mut("proj.stats", out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerNet<F> {
    pub proj: Projections<F>,
    /// Learned additive vector per modality slot.
    pub slot_embed: Array2<F>,
    pub layers: Vec<EncoderLayer<F>>,
    pub head: Linear<F>,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpNet<F> {
    pub proj: Projections<F>,
    pub hidden: Vec<Linear<F>>,
    pub head: Linear<F>,
}

/// `logit = uᵀ A B z + c` over the raw concatenated features `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct MfNet<F> {
    /// `model_dim × rank`
    pub left: Array2<F>,
    /// `rank × raw_width`
    pub right: Array2<F>,
    pub u: Array1<F>,
    pub c: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Network<F> {
    Transformer(TransformerNet<F>),
    Mlp(MlpNet<F>),
    Mf(MfNet<F>),
}

pub enum Cache<F> {
    Transformer {
        views: [Array2<F>; SLOTS],
        layers: Vec<EncoderCache<F>>,
        pooled: Array2<F>,
    },
    Mlp {
        input: Array2<F>,
        pre: Vec<Array2<F>>,
        post: Vec<Array2<F>>,
    },
    Mf {
        raw: Array2<F>,
        low: Array2<F>,
        mid: Array2<F>,
    },
}

impl<F: Real> Network<F> {
    pub fn new<R: Rng>(arch: &Architecture, dims: InputDims, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        Ok(match arch {
            Architecture::Transformer {
                layers,
                model_dim,
                heads,
                ffn_dim,
                dropout,
            } => {
                let proj = Projections::new(rng, dims, *model_dim);
                let slot_embed = init_uniform(rng, (SLOTS, *model_dim), *model_dim);
                let layers = (0..*layers)
                    .map(|_| EncoderLayer::new(rng, *model_dim, *heads, *ffn_dim))
                    .collect();
                let head = Linear::new(rng, *model_dim, 1);
                Network::Transformer(TransformerNet {
                    proj,
                    slot_embed,
                    layers,
                    head,
                    dropout: *dropout,
                })
            }
            Architecture::Mlp { model_dim, hidden } => {
                let proj = Projections::new(rng, dims, *model_dim);
                let mut width = SLOTS * model_dim;
                let mut layers = Vec::new();
                for &h in hidden {
                    layers.push(Linear::new(rng, width, h));
                    width = h;
                }
                let head = Linear::new(rng, width, 1);
                Network::Mlp(MlpNet {
                    proj,
                    hidden: layers,
                    head,
                })
            }
            Architecture::BilinearMf { model_dim, rank } => {
                let raw = dims.raw_width();
                Network::Mf(MfNet {
                    left: init_uniform(rng, (*model_dim, *rank), *rank),
                    right: init_uniform(rng, (*rank, raw), raw),
                    u: init_uniform(rng, (1, *model_dim), *model_dim).row(0).to_owned(),
                    c: Array1::zeros(1),
                })
            }
        })
    }

    pub fn params(&self) -> ParamRefs<'_, F> {
        let mut out = Vec::new();
        match self {
            Network::Transformer(n) => {
                n.proj.params(&mut out);
                out.push(("slot_embed".into(), n.slot_embed.view().into_dyn()));
                for (i, l) in n.layers.iter().enumerate() {
                    l.params(&format!("encoder.{i}"), &mut out);
                }
                n.head.params("head", &mut out);
            }
            Network::Mlp(n) => {
                n.proj.params(&mut out);
                for (i, l) in n.hidden.iter().enumerate() {
                    l.params(&format!("hidden.{i}"), &mut out);
                }
                n.head.params("head", &mut out);
            }
            Network::Mf(n) => {
                out.push(("mf.left".into(), n.left.view().into_dyn()));
                out.push(("mf.right".into(), n.right.view().into_dyn()));
                out.push(("mf.u".into(), n.u.view().into_dyn()));
                out.push(("mf.c".into(), n.c.view().into_dyn()));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> ParamMuts<'_, F> {
        let mut out = Vec::new();
        match self {
            Network::Transformer(n) => {
                n.proj.params_mut(&mut out);
                out.push(("slot_embed".into(), n.slot_embed.view_mut().into_dyn()));
                for (i, l) in n.layers.iter_mut().enumerate() {
                    l.params_mut(&format!("encoder.{i}"), &mut out);
                }
                n.head.params_mut("head", &mut out);
            }
            Network::Mlp(n) => {
                n.proj.params_mut(&mut out);
                for (i, l) in n.hidden.iter_mut().enumerate() {
                    l.params_mut(&format!("hidden.{i}"), &mut out);
                }
                n.head.params_mut("head", &mut out);
            }
            Network::Mf(n) => {
                out.push(("mf.left".into(), n.left.view_mut().into_dyn()));
                out.push(("mf.right".into(), n.right.view_mut().into_dyn()));
                out.push(("mf.u".into(), n.u.view_mut().into_dyn()));
                out.push(("mf.c".into(), n.c.view_mut().into_dyn()));
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Same structure with every parameter set to zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(F::zero());
        z
    }

    pub fn fill(&mut self, v: F) {
        for (_, mut p) in self.params_mut() {
            p.fill(v);
        }
    }

    pub fn dropout(&self) -> f64 {
        match self {
            Network::Transformer(n) => n.dropout,
            _ => 0.0,
        }
    }

    /// Inference logits; dropout disabled.
    pub fn logits(&self, batch: &Batch<F>) -> Array1<F> {
        self.forward::<rand_chacha::ChaCha8Rng>(batch, None).0
    }

    /// Forward pass with a cache for [`Network::backward`]. Dropout is active
    /// only when an RNG is supplied.
    pub fn forward<R: Rng>(&self, batch: &Batch<F>, mut rng: Option<&mut R>) -> (Array1<F>, Cache<F>) {
        let n = batch.len();
        match self {
            Network::Transformer(net) => {
                let views = net.proj.forward(batch);
                let d = net.slot_embed.ncols();
                let mut x = Array2::zeros((n * SLOTS, d));
                for b in 0..n {
                    for (slot, v) in views.iter().enumerate() {
                        let mut row = x.row_mut(b * SLOTS + slot);
                        row.assign(&v.row(b));
                        row += &net.slot_embed.row(slot);
                    }
                }
                let mut caches = Vec::with_capacity(net.layers.len());
                for layer in &net.layers {
                    let dropout = rng.as_mut().map(|r| (&mut **r, net.dropout));
                    let (y, c) = layer.forward(&x, SLOTS, dropout);
                    caches.push(c);
                    x = y;
                }
                let pooled = x
                    .into_shape_with_order((n, SLOTS, d))
                    .expect("contiguous encoder output")
                    .mean_axis(Axis(1))
                    .expect("non-empty slot axis");
                let logits = net.head.forward(&pooled).column(0).to_owned();
                (
                    logits,
                    Cache::Transformer {
                        views,
                        layers: caches,
                        pooled,
                    },
                )
            }
            Network::Mlp(net) => {
                let [t, i, st] = net.proj.forward(batch);
                let input = concatenate(Axis(1), &[t.view(), i.view(), st.view()]).expect("same rows");
                let mut pre = Vec::with_capacity(net.hidden.len());
                let mut post = Vec::with_capacity(net.hidden.len());
                let mut h = input.clone();
                for layer in &net.hidden {
                    let z = layer.forward(&h);
                    h = relu(&z);
                    pre.push(z);
                    post.push(h.clone());
                }
                let logits = net.head.forward(&h).column(0).to_owned();
                (logits, Cache::Mlp { input, pre, post })
            }
            Network::Mf(net) => {
                let raw = batch.raw();
                let low = raw.dot(&net.right.t());
                let mid = low.dot(&net.left.t());
                let logits = mid.dot(&net.u) + net.c[0];
                (logits, Cache::Mf { raw, low, mid })
            }
        }
    }

    /// Accumulate `dL/dθ` into `grad` given `dL/dlogit` per sample.
    pub fn backward(&self, batch: &Batch<F>, cache: &Cache<F>, dlogits: &Array1<F>, grad: &mut Self) {
        let n = batch.len();
        let dl = dlogits.view().insert_axis(Axis(1)).to_owned();
        match (self, cache, grad) {
            (
                Network::Transformer(net),
                Cache::Transformer {
                    views: _,
                    layers,
                    pooled,
                },
                Network::Transformer(g),
            ) => {
                let dpooled = net.head.backward(pooled, &dl, &mut g.head);
                let d = net.slot_embed.ncols();
                let inv = lit::<F>(1.0 / SLOTS as f64);
                let mut dx = Array2::zeros((n * SLOTS, d));
                for b in 0..n {
                    for slot in 0..SLOTS {
                        dx.row_mut(b * SLOTS + slot).assign(&(&dpooled.row(b) * inv));
                    }
                }
                for (layer, (c, gl)) in net.layers.iter().zip(layers.iter().zip(g.layers.iter_mut())).rev() {
                    dx = layer.backward(c, &dx, SLOTS, gl);
                }
                let dx3 = dx.into_shape_with_order((n, SLOTS, d)).expect("contiguous gradient");
                g.slot_embed += &dx3.sum_axis(Axis(0));
                let dv = [0, 1, 2].map(|slot| dx3.slice(s![.., slot, ..]).to_owned());
                net.proj.backward(batch, dv, &mut g.proj);
            }
            (Network::Mlp(net), Cache::Mlp { input, pre, post }, Network::Mlp(g)) => {
                let last = post.last().expect("at least one hidden layer");
                let mut dh = net.head.backward(last, &dl, &mut g.head);
                for i in (0..net.hidden.len()).rev() {
                    let dz = relu_backward(&pre[i], &dh);
                    let x = if i == 0 { input } else { &post[i - 1] };
                    dh = net.hidden[i].backward(x, &dz, &mut g.hidden[i]);
                }
                let d = net.proj.text.output_dim();
                let dv = [0, 1, 2].map(|k| dh.slice(s![.., k * d..(k + 1) * d]).to_owned());
                net.proj.backward(batch, dv, &mut g.proj);
            }
            (Network::Mf(net), Cache::Mf { raw, low, mid }, Network::Mf(g)) => {
                g.u += &mid.t().dot(dlogits);
                g.c[0] += dlogits.sum();
                // dmid[b, j] = dlogit[b] * u[j]
                let dmid = dl.dot(&net.u.view().insert_axis(Axis(0)));
                g.left += &dmid.t().dot(low);
                let dlow = dmid.dot(&net.left);
                g.right += &dlow.t().dot(raw);
            }
            _ => unreachable!("network, cache and gradient variants always match"),
        }
    }
}

/// Numerically stable mean binary cross-entropy on logits and its gradient
/// with respect to each logit.
pub fn bce_with_logits<F: Real>(logits: &Array1<F>, targets: &Array1<F>) -> (F, Array1<F>) {
    let n = lit::<F>(logits.len() as f64);
    let mut loss = F::zero();
    let mut grad = Array1::zeros(logits.len());
    for ((&z, &y), g) in logits.iter().zip(targets.iter()).zip(grad.iter_mut()) {
        loss += z.max(F::zero()) - z * y + (F::one() + (-z.abs()).exp()).ln();
        *g = (sigmoid(z) - y) / n;
    }
    (loss / n, grad)
}

pub fn sigmoid<F: Real>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

/// Logistic probability kept strictly inside (0, 1).
pub fn probability(logit: f64) -> f64 {
    sigmoid(logit).clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}
