//! Objective functions.
//!
//! * [`si_mse`]: masked scale-invariant MSE for multi-task regression with
//!   missing labels.
//! * [`vae_loss`]: reconstruction MSE plus the Gaussian KL term.
//! * [`contrastive_clr`]: cross-level contrastive loss between paired
//!   latent codes, cosine similarity, positive pair excluded from the
//!   denominator.
//! * [`mmd`], [`WganCritic`] / [`wgan_losses`]: the alternative discrepancy
//!   terms used in ablations.
//! * [`combined_pretrain_loss`]: `λ·clr + (1−λ)·vae`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::lecun_normal;
use crate::numerics::{Graph, Matrix, ParamId, ParamStore, Rng, Var};

/// Labels with their availability mask (1 = observed, 0 = NA).
#[derive(Clone, Debug, PartialEq)]
pub struct LabelBatch {
    pub y: Matrix,
    pub mask: Matrix,
}

impl LabelBatch {
    pub fn new(y: Matrix, mask: Matrix) -> Result<Self> {
        if y.dim() != mask.dim() {
            return Err(Error::Dimension(format!(
                "labels {:?} vs mask {:?}",
                y.dim(),
                mask.dim()
            )));
        }
        if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Data("label mask must be 0/1".into()));
        }
        Ok(Self { y, mask })
    }

    pub fn tasks(&self) -> usize {
        self.y.ncols()
    }

    pub fn rows(&self) -> usize {
        self.y.nrows()
    }
}

/// Per sample, with masked residuals `d = (y − ŷ)⊙mask` and `k*` observed
/// tasks: `Σd²/k* − (Σd)²/k*²`, averaged over samples.
pub fn si_mse(g: &mut Graph, pred: Var, batch: &LabelBatch) -> Result<Var> {
    let p = g.value(pred);
    if p.dim() != batch.y.dim() {
        return Err(Error::Dimension(format!(
            "si_mse: predictions {:?} vs labels {:?}",
            p.dim(),
            batch.y.dim()
        )));
    }
    let n = p.nrows();
    if n == 0 {
        return Err(Error::Precondition("si_mse on an empty batch".into()));
    }
    let mut total = 0.0;
    let mut dpred = Matrix::zeros(p.raw_dim());
    for i in 0..n {
        let (mut k, mut s, mut q) = (0.0, 0.0, 0.0);
        for j in 0..p.ncols() {
            let m = batch.mask[[i, j]];
            if m != 0.0 {
                let d = (batch.y[[i, j]] - p[[i, j]]) * m;
                k += m;
                s += d;
                q += d * d;
            }
        }
        if k == 0.0 {
            return Err(Error::Precondition(format!(
                "si_mse: row {i} has no observed labels"
            )));
        }
        total += q / k - s * s / (k * k);
        for j in 0..p.ncols() {
            let m = batch.mask[[i, j]];
            if m != 0.0 {
                let d = (batch.y[[i, j]] - p[[i, j]]) * m;
                dpred[[i, j]] = -2.0 * m / n as f64 * (d / k - s / (k * k));
            }
        }
    }
    Ok(g.push_si_mse(pred, total / n as f64, dpred))
}

/// Mean squared reconstruction error over all elements plus
/// `½·Σ(μ² + e^{logvar} − logvar − 1)` averaged over the batch.
pub fn vae_loss(g: &mut Graph, x: Var, x_hat: Var, mu: Var, logvar: Var) -> Result<Var> {
    let recon = reconstruction_mse(g, x, x_hat)?;
    let kl = kl_divergence(g, mu, logvar)?;
    g.add(recon, kl)
}

pub fn reconstruction_mse(g: &mut Graph, x: Var, x_hat: Var) -> Result<Var> {
    let diff = g.sub(x_hat, x)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

pub fn kl_divergence(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    let n = g.shape(mu).0;
    if n == 0 {
        return Err(Error::Precondition("kl on an empty batch".into()));
    }
    let mu2 = g.square(mu);
    let var = g.exp(logvar);
    let a = g.add(mu2, var)?;
    let b = g.sub(a, logvar)?;
    let c = g.add_scalar(b, -1.0);
    let s = g.sum(c);
    Ok(g.scale(s, 0.5 / n as f64))
}

/// Cross-level contrastive loss. With `s(a, b)` the cosine similarity
/// divided by `temperature`, for each pair `i`:
///
/// ```text
/// L_i = −s(h_i, l_i) + log( Σ_{k≠i} e^{s(h_i, l_k)} + Σ_{k≠i} e^{s(l_i, h_k)} )
/// ```
///
/// and the loss is the mean of `L_i`. The positive pair does not appear in
/// the denominator, so the loss can be negative.
pub fn contrastive_clr(g: &mut Graph, zh: Var, zl: Var, temperature: f64) -> Result<Var> {
    let (h, l) = (g.value(zh), g.value(zl));
    if h.dim() != l.dim() {
        return Err(Error::Dimension(format!(
            "contrastive: z_H {:?} vs z_L {:?}",
            h.dim(),
            l.dim()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config("contrastive temperature must be positive".into()));
    }
    let n = h.nrows();
    if n < 2 {
        return Err(Error::Precondition(format!(
            "contrastive loss needs at least 2 pairs, got {n}"
        )));
    }
    let normalize = |m: &Matrix, which: &str| -> Result<(Matrix, Vec<f64>)> {
        let mut out = m.clone();
        let mut norms = Vec::with_capacity(m.nrows());
        for (i, mut row) in out.outer_iter_mut().enumerate() {
            let norm = row.dot(&row).sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Precondition(format!(
                    "contrastive: {which} row {i} has zero norm"
                )));
            }
            row /= norm;
            norms.push(norm);
        }
        Ok((out, norms))
    };
    let (hn, h_norm) = normalize(h, "z_H")?;
    let (ln, l_norm) = normalize(l, "z_L")?;
    let s = hn.dot(&ln.t()) / temperature;

    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut ds = Matrix::zeros((n, n));
    for i in 0..n {
        let mut m = f64::NEG_INFINITY;
        for k in (0..n).filter(|&k| k != i) {
            m = m.max(s[[i, k]]).max(s[[k, i]]);
        }
        let mut pi = 0.0;
        for k in (0..n).filter(|&k| k != i) {
            pi += (s[[i, k]] - m).exp() + (s[[k, i]] - m).exp();
        }
        total += -s[[i, i]] + m + pi.ln();
        ds[[i, i]] -= inv_n;
        for k in (0..n).filter(|&k| k != i) {
            ds[[i, k]] += (s[[i, k]] - m).exp() / pi * inv_n;
            ds[[k, i]] += (s[[k, i]] - m).exp() / pi * inv_n;
        }
    }
    let dhn = ds.dot(&ln) / temperature;
    let dln = ds.t().dot(&hn) / temperature;
    let unnormalize = |dn: Matrix, un: &Matrix, norms: &[f64]| {
        let mut out = dn;
        for (i, mut row) in out.outer_iter_mut().enumerate() {
            let u = un.row(i);
            let proj = u.dot(&row);
            row.zip_mut_with(&u, |d, &uu| *d = (*d - uu * proj) / norms[i]);
        }
        out
    };
    let dzh = unnormalize(dhn, &hn, &h_norm);
    let dzl = unnormalize(dln, &ln, &l_norm);
    Ok(g.push_contrastive(zh, zl, total * inv_n, dzh, dzl))
}

/// Equal-weight mixture of RBF kernels `exp(−‖a−b‖² / (2σ²))`; `bandwidths`
/// holds the σ² values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub bandwidths: Vec<f64>,
}

pub const DEFAULT_MMD_SCALES: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

impl KernelSpec {
    pub fn new(bandwidths: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() || bandwidths.iter().any(|b| !(*b > 0.0) || !b.is_finite()) {
            return Err(Error::Config(
                "kernel bandwidths must be a non-empty list of positive values".into(),
            ));
        }
        Ok(Self { bandwidths })
    }

    /// Bandwidths `median(‖x_i − x_j‖²) · scale` over all distinct pairs of
    /// the pooled rows of `a` and `b`.
    pub fn median_heuristic(a: &Matrix, b: &Matrix, scales: &[f64]) -> Result<Self> {
        let rows: Vec<_> = a.outer_iter().chain(b.outer_iter()).collect();
        let mut d2 = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                d2.push(sq_dist(rows[i].iter(), rows[j].iter()));
            }
        }
        d2.sort_by(f64::total_cmp);
        let median = if d2.is_empty() {
            1.0
        } else if d2.len() % 2 == 1 {
            d2[d2.len() / 2]
        } else {
            0.5 * (d2[d2.len() / 2 - 1] + d2[d2.len() / 2])
        };
        let base = if median > 0.0 && median.is_finite() { median } else { 1.0 };
        Self::new(scales.iter().map(|s| base * s).collect())
    }

    pub fn eval(&self, d2: f64) -> f64 {
        let w = 1.0 / self.bandwidths.len() as f64;
        self.bandwidths
            .iter()
            .map(|s2| w * (-d2 / (2.0 * s2)).exp())
            .sum()
    }

    /// `-dκ/d(d²) · 2`, i.e. the factor `K'` with `∇_a κ(a, b) = −K'·(a − b)`.
    fn slope(&self, d2: f64) -> f64 {
        let w = 1.0 / self.bandwidths.len() as f64;
        self.bandwidths
            .iter()
            .map(|s2| w * (-d2 / (2.0 * s2)).exp() / s2)
            .sum()
    }
}

fn sq_dist<'a>(a: impl Iterator<Item = &'a f64>, b: impl Iterator<Item = &'a f64>) -> f64 {
    a.zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Biased (V-statistic) MMD² between the rows of `a` and `b`.
pub fn mmd(g: &mut Graph, a: Var, b: Var, kernel: &KernelSpec) -> Result<Var> {
    let (av, bv) = (g.value(a), g.value(b));
    if av.ncols() != bv.ncols() {
        return Err(Error::Dimension(format!(
            "mmd: widths {} vs {}",
            av.ncols(),
            bv.ncols()
        )));
    }
    let (n, m) = (av.nrows(), bv.nrows());
    if n == 0 || m == 0 {
        return Err(Error::Precondition("mmd needs non-empty sample sets".into()));
    }
    let mut da = Matrix::zeros(av.raw_dim());
    let mut db = Matrix::zeros(bv.raw_dim());
    let mut value = 0.0;

    // (weight, x set, y set, x grad, y grad)
    let mut term = |x: &Matrix, y: &Matrix, coef: f64, dx: &mut Matrix, dy: Option<&mut Matrix>| {
        let mut dy_local = dy;
        for i in 0..x.nrows() {
            for j in 0..y.nrows() {
                let d2 = sq_dist(x.row(i).iter(), y.row(j).iter());
                value += coef * kernel.eval(d2);
                let k1 = kernel.slope(d2);
                for c in 0..x.ncols() {
                    let diff = x[[i, c]] - y[[j, c]];
                    dx[[i, c]] -= coef * k1 * diff;
                    if let Some(dy) = dy_local.as_deref_mut() {
                        dy[[j, c]] += coef * k1 * diff;
                    }
                }
            }
        }
    };
    let (nf, mf) = (n as f64, m as f64);
    // within-set terms: each ordered pair contributes to both endpoints,
    // which the x-side loop already covers by symmetry (factor 2 below).
    term(av, av, 1.0 / (nf * nf), &mut da, None);
    term(bv, bv, 1.0 / (mf * mf), &mut db, None);
    da *= 2.0;
    db *= 2.0;
    term(av, bv, -2.0 / (nf * mf), &mut da, Some(&mut db));
    Ok(g.push_mmd(a, b, value, da, db))
}

/// `(critic_loss, generator_loss)` = `(mean(c_L) − mean(c_H), −mean(c_L))`.
/// The gradient penalty is added separately by [`WganCritic::critic_objective`].
pub fn wgan_losses(g: &mut Graph, critic_h: Var, critic_l: Var) -> Result<(Var, Var)> {
    if g.shape(critic_h).0 != g.shape(critic_l).0 {
        return Err(Error::Dimension(format!(
            "wgan: {} vs {} critic outputs",
            g.shape(critic_h).0,
            g.shape(critic_l).0
        )));
    }
    let mh = g.mean(critic_h);
    let ml = g.mean(critic_l);
    let critic = g.sub(ml, mh)?;
    let generator = g.scale(ml, -1.0);
    Ok((critic, generator))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WganConfig {
    pub hidden: usize,
    pub gradient_penalty: f64,
    pub critic_steps: usize,
    pub leaky_slope: f64,
}

impl Default for WganConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            gradient_penalty: 10.0,
            critic_steps: 5,
            leaky_slope: 0.2,
        }
    }
}

/// Two-layer critic `leaky_relu(x W1 + b1) W2 + b2` over latent vectors,
/// with its own parameters.
#[derive(Clone, Debug)]
pub struct WganCritic {
    pub store: ParamStore,
    pub config: WganConfig,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl WganCritic {
    pub fn new(rng: &mut Rng, input_dim: usize, config: WganConfig) -> Self {
        let mut store = ParamStore::new();
        let w1 = store.add("critic.w1", lecun_normal(rng, input_dim, config.hidden));
        let b1 = store.add("critic.b1", Matrix::zeros((1, config.hidden)));
        let w2 = store.add("critic.w2", lecun_normal(rng, config.hidden, 1));
        let b2 = store.add("critic.b2", Matrix::zeros((1, 1)));
        Self {
            store,
            config,
            w1,
            b1,
            w2,
            b2,
        }
    }

    /// Critic scores (`n×1`). With `differentiate_critic = false` the
    /// critic's parameters enter as constants (generator step).
    pub fn forward(&self, g: &mut Graph, x: Var, differentiate_critic: bool) -> Result<Var> {
        let p = |g: &mut Graph, id| {
            if differentiate_critic {
                g.param(&self.store, id)
            } else {
                g.param_const(&self.store, id)
            }
        };
        let (w1, b1, w2, b2) = (p(g, self.w1), p(g, self.b1), p(g, self.w2), p(g, self.b2));
        let h = g.affine(x, w1, b1)?;
        let a = g.leaky_relu(h, self.config.leaky_slope);
        g.affine(a, w2, b2)
    }

    /// `mean((‖∇_x critic(x̂)‖ − 1)²)` on interpolates
    /// `x̂ = ε·z_H + (1−ε)·z_L`, ε ~ U(0, 1) per row. The input gradient is
    /// built on the tape so the penalty is differentiable in the critic
    /// parameters.
    pub fn gradient_penalty(&self, g: &mut Graph, zh: &Matrix, zl: &Matrix, rng: &mut Rng) -> Result<Var> {
        let n = zh.nrows();
        let eps: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let mut interp = zl.clone();
        for (i, mut row) in interp.outer_iter_mut().enumerate() {
            row.zip_mut_with(&zh.row(i), |l, &h| *l = eps[i] * h + (1.0 - eps[i]) * *l);
        }
        let w1 = g.param(&self.store, self.w1);
        let b1 = g.param(&self.store, self.b1);
        let w2 = g.param(&self.store, self.w2);
        let x = g.input(interp);
        let pre = g.affine(x, w1, b1)?;
        let slope = self.config.leaky_slope;
        let mask = g.value(pre).mapv(|v| if v > 0.0 { 1.0 } else { slope });
        let mask = g.input(mask);
        let ones = g.input(Matrix::ones((n, 1)));
        let w2t = g.transpose(w2);
        let upstream = g.matmul(ones, w2t)?;
        let gated = g.mul(upstream, mask)?;
        let w1t = g.transpose(w1);
        let grad_x = g.matmul(gated, w1t)?;
        let sq = g.square(grad_x);
        let ss = g.sum_cols(sq);
        let ss = g.add_scalar(ss, 1e-12);
        let norm = g.sqrt(ss);
        let dev = g.add_scalar(norm, -1.0);
        let dev2 = g.square(dev);
        Ok(g.mean(dev2))
    }

    /// Full critic objective on detached latent batches:
    /// `mean(c(z_L)) − mean(c(z_H)) + gp_coef · GP`.
    pub fn critic_objective(&self, g: &mut Graph, zh: &Matrix, zl: &Matrix, rng: &mut Rng) -> Result<Var> {
        let h = g.input(zh.clone());
        let l = g.input(zl.clone());
        let ch = self.forward(g, h, true)?;
        let cl = self.forward(g, l, true)?;
        let (critic, _) = wgan_losses(g, ch, cl)?;
        let gp = self.gradient_penalty(g, zh, zl, rng)?;
        let gp = g.scale(gp, self.config.gradient_penalty);
        g.add(critic, gp)
    }
}

/// `λ·clr + (1−λ)·vae`.
pub fn combined_pretrain_loss(g: &mut Graph, lambda: f64, clr: Var, vae: Var) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must be in [0, 1], got {lambda}")));
    }
    let a = g.scale(clr, lambda);
    let b = g.scale(vae, 1.0 - lambda);
    g.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn si_value(y: Matrix, mask: Matrix, pred: Matrix) -> f64 {
        let mut g = Graph::new();
        let p = g.input(pred);
        let l = si_mse(&mut g, p, &LabelBatch::new(y, mask).unwrap()).unwrap();
        g.scalar(l)
    }

    #[test]
    fn si_mse_examples() {
        let y = array![[0.2, 0.6]];
        assert_eq!(si_value(y.clone(), Matrix::ones((1, 2)), y.clone()), 0.0);
        let v = si_value(y.clone(), Matrix::ones((1, 2)), array![[0.4, 0.5]]);
        assert!((v - 0.0225).abs() < 1e-12, "{v}");
        let v = si_value(y.clone(), Matrix::ones((1, 2)), &y + 0.3);
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn si_mse_empty_row_is_precondition_error() {
        let mut g = Graph::new();
        let p = g.input(Matrix::zeros((2, 2)));
        let b = LabelBatch::new(Matrix::zeros((2, 2)), array![[1.0, 0.0], [0.0, 0.0]]).unwrap();
        assert!(matches!(si_mse(&mut g, p, &b), Err(Error::Precondition(_))));
    }

    #[test]
    fn si_mse_ignores_masked_predictions() {
        let y = array![[0.1, 0.5, 0.9], [0.3, 0.2, 0.7]];
        let mask = array![[1.0, 0.0, 1.0], [1.0, 1.0, 0.0]];
        let p = array![[0.2, 0.4, 0.6], [0.5, 0.5, 0.5]];
        let mut q = p.clone();
        q[[0, 1]] = 123.0;
        q[[1, 2]] = -9.0;
        assert_eq!(
            si_value(y.clone(), mask.clone(), p).to_bits(),
            si_value(y, mask, q).to_bits()
        );
    }

    #[test]
    fn vae_loss_examples() {
        let mut g = Graph::new();
        let x = g.input(array![[0.5, -0.2]]);
        let mu = g.input(array![[0.0]]);
        let lv = g.input(array![[0.0]]);
        let l = vae_loss(&mut g, x, x, mu, lv).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let mu1 = g.input(array![[1.0]]);
        let l = vae_loss(&mut g, x, x, mu1, lv).unwrap();
        assert!((g.scalar(l) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn contrastive_examples() {
        let mut g = Graph::new();
        let z = g.input(array![[1.0, 0.0], [0.0, 1.0]]);
        let l = contrastive_clr(&mut g, z, z, 1.0).unwrap();
        assert!((g.scalar(l) - (2f64.ln() - 1.0)).abs() < 1e-9);
        let same = g.input(array![[0.3, 0.4], [0.3, 0.4]]);
        let l = contrastive_clr(&mut g, same, same, 1.0).unwrap();
        assert!((g.scalar(l) - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn contrastive_rejects_degenerate_inputs() {
        let mut g = Graph::new();
        let one = g.input(array![[1.0, 0.0]]);
        assert!(contrastive_clr(&mut g, one, one, 1.0).is_err());
        let zero = g.input(array![[0.0, 0.0], [1.0, 0.0]]);
        let ok = g.input(array![[1.0, 0.0], [0.0, 1.0]]);
        assert!(matches!(
            contrastive_clr(&mut g, zero, ok, 1.0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn mmd_examples() {
        let mut g = Graph::new();
        let a = g.input(array![[0.0]]);
        let b = g.input(array![[1.0]]);
        let k = KernelSpec::new(vec![1.0]).unwrap();
        let v = mmd(&mut g, a, b, &k).unwrap();
        let want = 2.0 * (1.0 - (-0.5f64).exp());
        assert!((g.scalar(v) - want).abs() < 1e-12);
        let aa = g.input(array![[0.1, 0.2], [1.0, -1.0]]);
        let v = mmd(&mut g, aa, aa, &k).unwrap();
        assert!(g.scalar(v).abs() < 1e-15);
    }

    #[test]
    fn kernel_spec_rejects_empty_or_nonpositive() {
        assert!(KernelSpec::new(vec![]).is_err());
        assert!(KernelSpec::new(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn wgan_examples() {
        let mut g = Graph::new();
        let h = g.input(array![[0.7], [0.7]]);
        let (c, _) = wgan_losses(&mut g, h, h).unwrap();
        assert_eq!(g.scalar(c), 0.0);
        let h = g.input(array![[1.0], [1.0]]);
        let l = g.input(array![[0.0], [0.0]]);
        let (c, gen) = wgan_losses(&mut g, h, l).unwrap();
        assert_eq!(g.scalar(c), -1.0);
        assert_eq!(g.scalar(gen), 0.0);
    }

    #[test]
    fn combined_loss_weights() {
        let mut g = Graph::new();
        let clr = g.input(array![[2.0]]);
        let vae = g.input(array![[1.0]]);
        let v = combined_pretrain_loss(&mut g, 0.0, clr, vae).unwrap();
        assert_eq!(g.scalar(v), 1.0);
        let v = combined_pretrain_loss(&mut g, 1.0, clr, vae).unwrap();
        assert_eq!(g.scalar(v), 2.0);
        let v = combined_pretrain_loss(&mut g, 0.8, clr, vae).unwrap();
        assert!((g.scalar(v) - 1.8).abs() < 1e-15);
        assert!(matches!(
            combined_pretrain_loss(&mut g, 1.5, clr, vae),
            Err(Error::Config(_))
        ));
    }
}
