//! Dense layers with explicit backward passes.
//!
//! Everything is generic over the float type so the same code runs in `f32`
//! for training and serving and in `f64` for finite-difference checks.
//! Activations are row-major `(rows × features)` matrices.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{s, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};
use rand::Rng;

pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + Debug
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
}

impl<T> Real for T where
    T: Float
        + LinalgScalar
        + ScalarOperand
        + FromPrimitive
        + Debug
        + Sum
        + AddAssign
        + SubAssign
        + MulAssign
        + DivAssign
        + Send
        + Sync
        + 'static
{
}

#[inline]
pub fn lit<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("representable constant")
}

pub type ParamRefs<'a, F> = Vec<(String, ArrayViewD<'a, F>)>;
pub type ParamMuts<'a, F> = Vec<(String, ArrayViewMutD<'a, F>)>;

/// Uniform in `±1/sqrt(fan_in)`.
pub fn init_uniform<F: Real, R: Rng>(rng: &mut R, shape: (usize, usize), fan_in: usize) -> Array2<F> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_simple_fn(shape, || lit(rng.random_range(-bound..bound)))
}

fn init_vec<F: Real, R: Rng>(rng: &mut R, n: usize, fan_in: usize) -> Array1<F> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array1::from_shape_simple_fn(n, || lit(rng.random_range(-bound..bound)))
}

/// `y = x Wᵀ + b` with `W: out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Linear<F> {
    pub fn new<R: Rng>(rng: &mut R, input: usize, output: usize) -> Self {
        Self {
            weight: init_uniform(rng, (output, input), input),
            bias: init_vec(rng, output, input),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = if self.input_dim() == 0 {
            Array2::zeros((x.nrows(), self.output_dim()))
        } else {
            x.dot(&self.weight.t())
        };
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<F>, dy: &Array2<F>, grad: &mut Self) -> Array2<F> {
        if self.input_dim() > 0 {
            grad.weight += &dy.t().dot(x);
        }
        grad.bias += &dy.sum_axis(Axis(0));
        if self.input_dim() == 0 {
            Array2::zeros((x.nrows(), 0))
        } else {
            dy.dot(&self.weight)
        }
    }

    pub fn params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, F>) {
        out.push((format!("{prefix}.weight"), self.weight.view().into_dyn()));
        out.push((format!("{prefix}.bias"), self.bias.view().into_dyn()));
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamMuts<'a, F>) {
        out.push((format!("{prefix}.weight"), self.weight.view_mut().into_dyn()));
        out.push((format!("{prefix}.bias"), self.bias.view_mut().into_dyn()));
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

pub struct LayerNormCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

impl<F: Real> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, LayerNormCache<F>) {
        let d = lit::<F>(x.ncols() as f64);
        let eps = lit::<F>(LAYER_NORM_EPS);
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.iter().map(|&v| v * v).sum::<F>() / d;
            *is = F::one() / (var + eps).sqrt();
            row *= *is;
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<F>, dy: &Array2<F>, grad: &mut Self) -> Array2<F> {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let d = lit::<F>(dy.ncols() as f64);
        let dxhat = dy * &self.gamma;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((mut out, g), xh), &is) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows())
            .zip(cache.xhat.rows())
            .zip(cache.inv_std.iter())
        {
            let sum_g = g.sum();
            let sum_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>();
            Zip::from(&mut out)
                .and(&g)
                .and(&xh)
                .for_each(|o, &gi, &xi| *o = is / d * (d * gi - sum_g - xi * sum_gx));
        }
        dx
    }

    pub fn params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, F>) {
        out.push((format!("{prefix}.gamma"), self.gamma.view().into_dyn()));
        out.push((format!("{prefix}.beta"), self.beta.view().into_dyn()));
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamMuts<'a, F>) {
        out.push((format!("{prefix}.gamma"), self.gamma.view_mut().into_dyn()));
        out.push((format!("{prefix}.beta"), self.beta.view_mut().into_dyn()));
    }
}

pub fn relu<F: Real>(x: &Array2<F>) -> Array2<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

/// `dy` where the pre-activation was positive, else 0.
pub fn relu_backward<F: Real>(pre: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(pre).for_each(|d, &p| {
        if p <= F::zero() {
            *d = F::zero();
        }
    });
    dx
}

/// Inverted dropout mask: entries are 0 or `1/(1-p)`.
pub fn dropout_mask<F: Real, R: Rng>(rng: &mut R, shape: (usize, usize), p: f64) -> Array2<F> {
    let keep = lit::<F>(1.0 / (1.0 - p));
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { F::zero() } else { keep })
}

/// Multi-head self-attention over fixed-length sequences stored as
/// consecutive rows: sample `b` owns rows `b*seq .. (b+1)*seq`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention<F> {
    pub heads: usize,
    pub query: Linear<F>,
    pub key: Linear<F>,
    pub value: Linear<F>,
    pub output: Linear<F>,
}

pub struct AttentionCache<F> {
    x: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// Softmax weights, one `seq × seq` block per (sample, head), stacked.
    probs: Vec<Array2<F>>,
    context: Array2<F>,
}

impl<F: Real> SelfAttention<F> {
    pub fn new<R: Rng>(rng: &mut R, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "model dim must be divisible by heads");
        Self {
            heads,
            query: Linear::new(rng, dim, dim),
            key: Linear::new(rng, dim, dim),
            value: Linear::new(rng, dim, dim),
            output: Linear::new(rng, dim, dim),
        }
    }

    fn head_dim(&self) -> usize {
        self.query.output_dim() / self.heads
    }

    pub fn forward(&self, x: &Array2<F>, seq: usize) -> (Array2<F>, AttentionCache<F>) {
        let q = self.query.forward(x);
        let k = self.key.forward(x);
        let v = self.value.forward(x);
        let hd = self.head_dim();
        let scale = lit::<F>(1.0 / (hd as f64).sqrt());
        let batch = x.nrows() / seq;
        let mut context = Array2::zeros(q.raw_dim());
        let mut probs = Vec::with_capacity(batch * self.heads);
        for b in 0..batch {
            let rows = b * seq..(b + 1) * seq;
            for h in 0..self.heads {
                let cols = h * hd..(h + 1) * hd;
                let qb = q.slice(s![rows.clone(), cols.clone()]);
                let kb = k.slice(s![rows.clone(), cols.clone()]);
                let vb = v.slice(s![rows.clone(), cols.clone()]);
                let mut p = qb.dot(&kb.t()) * scale;
                for mut row in p.rows_mut() {
                    let m = row.fold(F::neg_infinity(), |a, &b| a.max(b));
                    row.mapv_inplace(|z| (z - m).exp());
                    let z = row.sum();
                    row /= z;
                }
                context.slice_mut(s![rows.clone(), cols]).assign(&p.dot(&vb));
                probs.push(p);
            }
        }
        let out = self.output.forward(&context);
        (
            out,
            AttentionCache {
                x: x.clone(),
                q,
                k,
                v,
                probs,
                context,
            },
        )
    }

    pub fn backward(&self, cache: &AttentionCache<F>, dy: &Array2<F>, seq: usize, grad: &mut Self) -> Array2<F> {
        let dctx = self.output.backward(&cache.context, dy, &mut grad.output);
        let hd = self.head_dim();
        let scale = lit::<F>(1.0 / (hd as f64).sqrt());
        let batch = dy.nrows() / seq;
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for b in 0..batch {
            let rows = b * seq..(b + 1) * seq;
            for h in 0..self.heads {
                let cols = h * hd..(h + 1) * hd;
                let p = &cache.probs[b * self.heads + h];
                let qb = cache.q.slice(s![rows.clone(), cols.clone()]);
                let kb = cache.k.slice(s![rows.clone(), cols.clone()]);
                let vb = cache.v.slice(s![rows.clone(), cols.clone()]);
                let dcb = dctx.slice(s![rows.clone(), cols.clone()]);
                let dp = dcb.dot(&vb.t());
                dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&dcb));
                let mut ds = dp.clone();
                for ((mut dsr, pr), dpr) in ds.rows_mut().into_iter().zip(p.rows()).zip(dp.rows()) {
                    let dot = pr.iter().zip(dpr.iter()).map(|(&a, &b)| a * b).sum::<F>();
                    Zip::from(&mut dsr)
                        .and(&pr)
                        .and(&dpr)
                        .for_each(|o, &pi, &dpi| *o = pi * (dpi - dot) * scale);
                }
                dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&kb));
                dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qb));
            }
        }
        let mut dx = self.query.backward(&cache.x, &dq, &mut grad.query);
        dx += &self.key.backward(&cache.x, &dk, &mut grad.key);
        dx += &self.value.backward(&cache.x, &dv, &mut grad.value);
        dx
    }

    pub fn params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, F>) {
        self.query.params(&format!("{prefix}.query"), out);
        self.key.params(&format!("{prefix}.key"), out);
        self.value.params(&format!("{prefix}.value"), out);
        self.output.params(&format!("{prefix}.output"), out);
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamMuts<'a, F>) {
        self.query.params_mut(&format!("{prefix}.query"), out);
        self.key.params_mut(&format!("{prefix}.key"), out);
        self.value.params_mut(&format!("{prefix}.value"), out);
        self.output.params_mut(&format!("{prefix}.output"), out);
    }
}

/// Post-norm encoder block:
/// `x1 = LN(x + drop(attn(x)))`, `y = LN(x1 + drop(W2 drop(relu(W1 x1))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<F> {
    pub attention: SelfAttention<F>,
    pub norm1: LayerNorm<F>,
    pub ffn_in: Linear<F>,
    pub ffn_out: Linear<F>,
    pub norm2: LayerNorm<F>,
}

pub struct EncoderCache<F> {
    attn: AttentionCache<F>,
    drop_attn: Option<Array2<F>>,
    norm1: LayerNormCache<F>,
    x1: Array2<F>,
    hidden_pre: Array2<F>,
    drop_hidden: Option<Array2<F>>,
    hidden: Array2<F>,
    drop_ffn: Option<Array2<F>>,
    norm2: LayerNormCache<F>,
}

impl<F: Real> EncoderLayer<F> {
    pub fn new<R: Rng>(rng: &mut R, dim: usize, heads: usize, ffn_dim: usize) -> Self {
        Self {
            attention: SelfAttention::new(rng, dim, heads),
            norm1: LayerNorm::new(dim),
            ffn_in: Linear::new(rng, dim, ffn_dim),
            ffn_out: Linear::new(rng, ffn_dim, dim),
            norm2: LayerNorm::new(dim),
        }
    }

    pub fn forward<R: Rng>(
        &self,
        x: &Array2<F>,
        seq: usize,
        dropout: Option<(&mut R, f64)>,
    ) -> (Array2<F>, EncoderCache<F>) {
        let (mut rng, p) = match dropout {
            Some((r, p)) if p > 0.0 => (Some(r), p),
            _ => (None, 0.0),
        };
        let mut mask = |shape: (usize, usize)| rng.as_mut().map(|r| dropout_mask::<F, _>(*r, shape, p));

        let (attn_out, attn) = self.attention.forward(x, seq);
        let drop_attn = mask(attn_out.dim());
        let branch = match &drop_attn {
            Some(m) => attn_out * m,
            None => attn_out,
        };
        let (x1, norm1) = self.norm1.forward(&(x + &branch));

        let hidden_pre = self.ffn_in.forward(&x1);
        let drop_hidden = mask(hidden_pre.dim());
        let mut hidden = relu(&hidden_pre);
        if let Some(m) = &drop_hidden {
            hidden *= m;
        }
        let ffn = self.ffn_out.forward(&hidden);
        let drop_ffn = mask(ffn.dim());
        let branch = match &drop_ffn {
            Some(m) => ffn * m,
            None => ffn,
        };
        let (y, norm2) = self.norm2.forward(&(&x1 + &branch));
        (
            y,
            EncoderCache {
                attn,
                drop_attn,
                norm1,
                x1,
                hidden_pre,
                drop_hidden,
                hidden,
                drop_ffn,
                norm2,
            },
        )
    }

    pub fn backward(&self, cache: &EncoderCache<F>, dy: &Array2<F>, seq: usize, grad: &mut Self) -> Array2<F> {
        let dr2 = self.norm2.backward(&cache.norm2, dy, &mut grad.norm2);
        let mut dffn = dr2.clone();
        if let Some(m) = &cache.drop_ffn {
            dffn *= m;
        }
        let mut dhidden = self.ffn_out.backward(&cache.hidden, &dffn, &mut grad.ffn_out);
        if let Some(m) = &cache.drop_hidden {
            dhidden *= m;
        }
        let dpre = relu_backward(&cache.hidden_pre, &dhidden);
        let mut dx1 = self.ffn_in.backward(&cache.x1, &dpre, &mut grad.ffn_in);
        dx1 += &dr2;

        let dr1 = self.norm1.backward(&cache.norm1, &dx1, &mut grad.norm1);
        let mut dattn = dr1.clone();
        if let Some(m) = &cache.drop_attn {
            dattn *= m;
        }
        let mut dx = self.attention.backward(&cache.attn, &dattn, seq, &mut grad.attention);
        dx += &dr1;
        dx
    }

    pub fn params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, F>) {
        self.attention.params(&format!("{prefix}.attn"), out);
        self.norm1.params(&format!("{prefix}.norm1"), out);
        self.ffn_in.params(&format!("{prefix}.ffn_in"), out);
        self.ffn_out.params(&format!("{prefix}.ffn_out"), out);
        self.norm2.params(&format!("{prefix}.norm2"), out);
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamMuts<'a, F>) {
        self.attention.params_mut(&format!("{prefix}.attn"), out);
        self.norm1.params_mut(&format!("{prefix}.norm1"), out);
        self.ffn_in.params_mut(&format!("{prefix}.ffn_in"), out);
        self.ffn_out.params_mut(&format!("{prefix}.ffn_out"), out);
        self.norm2.params_mut(&format!("{prefix}.norm2"), out);
    }
}
