//! Neural building blocks: SELU dense blocks with optional layer norm and
//! dropout, and the Gaussian encoder head with reparameterized sampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Matrix, NoiseSource, ParamId, ParamStore, Rng, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Selu,
    Linear,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout: survivors are scaled by `1/(1−p)`. Identity in eval mode.
pub fn dropout(
    g: &mut Graph,
    x: Var,
    p: f64,
    mode: Mode,
    noise: &mut dyn NoiseSource,
) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability must be in [0, 1), got {p}")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let (n, d) = g.shape(x);
    let keep = 1.0 / (1.0 - p);
    let mask = noise
        .uniform(n, d)
        .mapv(|u| if u < p { 0.0 } else { keep });
    let m = g.input(mask);
    g.mul(x, m)
}

/// `z = μ + exp(½·logvar) ⊙ η`, η ~ N(0, I) from `noise`. The noise enters
/// as a constant so gradients reach μ and logvar only.
pub fn reparameterize(
    g: &mut Graph,
    mu: Var,
    logvar: Var,
    noise: &mut dyn NoiseSource,
) -> Result<Var> {
    if g.shape(mu) != g.shape(logvar) {
        return Err(Error::Dimension(format!(
            "reparameterize: μ {:?} vs logvar {:?}",
            g.shape(mu),
            g.shape(logvar)
        )));
    }
    let (n, d) = g.shape(mu);
    let eta = g.input(noise.normal(n, d));
    let half = g.scale(logvar, 0.5);
    let std = g.exp(half);
    let scaled = g.mul(std, eta)?;
    g.add(mu, scaled)
}

/// LeCun-normal initialization: N(0, 1/fan_in).
pub fn lecun_normal(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let scale = (1.0 / fan_in as f64).sqrt();
    rng.normal_matrix(fan_in, fan_out) * scale
}

/// `affine → activation → [layer norm] → [dropout]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseBlock {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub dropout_p: f64,
    pub w: ParamId,
    pub b: ParamId,
    /// γ and β of the layer norm, if any.
    pub norm: Option<(ParamId, ParamId)>,
}

impl DenseBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        layer_norm: bool,
        dropout_p: f64,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Config(format!("{name}: widths must be positive")));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::Config(format!("{name}: dropout must be in [0, 1)")));
        }
        let w = store.add(format!("{name}.w"), lecun_normal(rng, in_dim, out_dim));
        let b = store.add(format!("{name}.b"), Matrix::zeros((1, out_dim)));
        let norm = layer_norm.then(|| {
            (
                store.add(format!("{name}.ln_gamma"), Matrix::ones((1, out_dim))),
                store.add(format!("{name}.ln_beta"), Matrix::zeros((1, out_dim))),
            )
        });
        Ok(Self {
            name: name.to_string(),
            in_dim,
            out_dim,
            activation,
            dropout_p,
            w,
            b,
            norm,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.w, self.b];
        if let Some((g, b)) = self.norm {
            v.extend([g, b]);
        }
        v
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: Mode,
        noise: &mut dyn NoiseSource,
    ) -> Result<Var> {
        if g.shape(x).1 != self.in_dim {
            return Err(Error::Dimension(format!(
                "{}: expected width {}, got {}",
                self.name,
                self.in_dim,
                g.shape(x).1
            )));
        }
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let mut h = g.affine(x, w, b)?;
        h = match self.activation {
            Activation::Selu => g.selu(h),
            Activation::Sigmoid => g.sigmoid(h),
            Activation::Linear => h,
        };
        if let Some((gamma, beta)) = self.norm {
            let gv = g.param(store, gamma);
            let bv = g.param(store, beta);
            h = g.layer_norm(h, gv, bv, LAYER_NORM_EPS)?;
        }
        dropout(g, h, self.dropout_p, mode, noise)
    }
}

/// Maps a hidden vector to (μ, log σ²); log σ² is clamped to `[−10, 10]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianHead {
    pub in_dim: usize,
    pub z_dim: usize,
    pub mu_w: ParamId,
    pub mu_b: ParamId,
    pub logvar_w: ParamId,
    pub logvar_b: ParamId,
}

impl GaussianHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        in_dim: usize,
        z_dim: usize,
    ) -> Result<Self> {
        if in_dim == 0 || z_dim == 0 {
            return Err(Error::Config(format!("{name}: widths must be positive")));
        }
        Ok(Self {
            in_dim,
            z_dim,
            mu_w: store.add(format!("{name}.mu_w"), lecun_normal(rng, in_dim, z_dim)),
            mu_b: store.add(format!("{name}.mu_b"), Matrix::zeros((1, z_dim))),
            logvar_w: store.add(format!("{name}.logvar_w"), lecun_normal(rng, in_dim, z_dim)),
            logvar_b: store.add(format!("{name}.logvar_b"), Matrix::zeros((1, z_dim))),
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.mu_w, self.mu_b, self.logvar_w, self.logvar_b]
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<(Var, Var)> {
        let (w, b) = (g.param(store, self.mu_w), g.param(store, self.mu_b));
        let mu = g.affine(h, w, b)?;
        let (w, b) = (g.param(store, self.logvar_w), g.param(store, self.logvar_b));
        let lv = g.affine(h, w, b)?;
        let lv = g.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
        Ok((mu, lv))
    }
}
