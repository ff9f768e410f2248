//! Model stacks: stochastic encoder, decoder, transmitter and the multi-task
//! regressor, plus the block-wise freeze bookkeeping used by gradual
//! unfreezing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Activation, DenseBlock, GaussianHead, Mode};
use crate::numerics::{Graph, NoiseSource, ParamId, ParamStore, Rng, Var, ZeroNoise};

/// Layer widths and dropout for every component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub z_dim: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub transmitter_widths: Vec<usize>,
    pub regressor_shared: Vec<usize>,
    pub regressor_head: Vec<usize>,
    pub dropout: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            z_dim: 128,
            encoder_widths: vec![512, 256, 128],
            decoder_widths: vec![128, 256, 512],
            transmitter_widths: vec![128, 128],
            regressor_shared: vec![128, 128],
            regressor_head: vec![64, 16, 1],
            dropout: 0.1,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let lists = [
            ("encoder_widths", &self.encoder_widths),
            ("decoder_widths", &self.decoder_widths),
            ("regressor_shared", &self.regressor_shared),
            ("regressor_head", &self.regressor_head),
        ];
        for (name, l) in lists {
            if l.is_empty() || l.contains(&0) {
                return Err(Error::Config(format!("arch.{name} must be non-empty positive widths")));
            }
        }
        if self.transmitter_widths.contains(&0) {
            return Err(Error::Config("arch.transmitter_widths must be positive".into()));
        }
        if self.z_dim == 0 {
            return Err(Error::Config("arch.z_dim must be positive".into()));
        }
        if self.transmitter_widths.last().is_some_and(|&w| w != self.z_dim) {
            return Err(Error::Config(
                "arch.transmitter_widths must end at z_dim".into(),
            ));
        }
        if self.regressor_head.last() != Some(&1) {
            return Err(Error::Config("arch.regressor_head must end with width 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("arch.dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Middle layers SELU + layer norm + dropout; the last layer layer norm only;
/// then the Gaussian head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub blocks: Vec<DenseBlock>,
    pub head: GaussianHead,
}

impl Encoder {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        in_dim: usize,
        arch: &ArchConfig,
    ) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut width = in_dim;
        let last = arch.encoder_widths.len() - 1;
        for (i, &out) in arch.encoder_widths.iter().enumerate() {
            let (act, drop) = if i < last {
                (Activation::Selu, arch.dropout)
            } else {
                (Activation::Linear, 0.0)
            };
            blocks.push(DenseBlock::new(
                store,
                rng,
                &format!("{prefix}.block{i}"),
                width,
                out,
                act,
                true,
                drop,
            )?);
            width = out;
        }
        let head = GaussianHead::new(store, rng, &format!("{prefix}.head"), width, arch.z_dim)?;
        Ok(Self { blocks, head })
    }

    pub fn in_dim(&self) -> usize {
        self.blocks[0].in_dim
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v: Vec<_> = self.blocks.iter().flat_map(|b| b.params()).collect();
        v.extend(self.head.params());
        v
    }

    /// Unfreezing groups, ordered input → output. The Gaussian head belongs
    /// to the last group.
    pub fn freeze_blocks(&self, prefix: &str) -> Vec<FreezeBlock> {
        let last = self.blocks.len() - 1;
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let mut params = b.params();
                if i == last {
                    params.extend(self.head.params());
                }
                FreezeBlock {
                    name: format!("{prefix}.block{i}"),
                    params,
                    trainable: false,
                }
            })
            .collect()
    }

    /// Returns `(z, μ, logvar)`. In eval mode `z = μ`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: Mode,
        noise: &mut dyn NoiseSource,
    ) -> Result<(Var, Var, Var)> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, store, h, mode, noise)?;
        }
        let (mu, logvar) = self.head.forward(g, store, h)?;
        let z = match mode {
            Mode::Eval => mu,
            Mode::Train => crate::layers::reparameterize(g, mu, logvar, noise)?,
        };
        Ok((z, mu, logvar))
    }
}

/// Middle layers SELU + layer norm + dropout, final linear layer back to the
/// input width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    pub blocks: Vec<DenseBlock>,
}

impl Decoder {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        out_dim: usize,
        arch: &ArchConfig,
    ) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut width = arch.z_dim;
        for (i, &out) in arch.decoder_widths.iter().enumerate() {
            blocks.push(DenseBlock::new(
                store,
                rng,
                &format!("{prefix}.block{i}"),
                width,
                out,
                Activation::Selu,
                true,
                arch.dropout,
            )?);
            width = out;
        }
        let i = arch.decoder_widths.len();
        blocks.push(DenseBlock::new(
            store,
            rng,
            &format!("{prefix}.block{i}"),
            width,
            out_dim,
            Activation::Linear,
            false,
            0.0,
        )?);
        Ok(Self { blocks })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: Var,
        mode: Mode,
        noise: &mut dyn NoiseSource,
    ) -> Result<Var> {
        let mut h = z;
        for b in &self.blocks {
            h = b.forward(g, store, h, mode, noise)?;
        }
        Ok(h)
    }
}

/// Maps the low-domain latent code toward the high-domain embedding. With no
/// blocks it is the identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transmitter {
    pub blocks: Vec<DenseBlock>,
}

impl Transmitter {
    /// Middle layers SELU, last layer layer norm.
    pub fn build(store: &mut ParamStore, rng: &mut Rng, prefix: &str, arch: &ArchConfig) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut width = arch.z_dim;
        let last = arch.transmitter_widths.len().saturating_sub(1);
        for (i, &out) in arch.transmitter_widths.iter().enumerate() {
            let (act, norm) = if i < last {
                (Activation::Selu, false)
            } else {
                (Activation::Linear, true)
            };
            blocks.push(DenseBlock::new(
                store,
                rng,
                &format!("{prefix}.block{i}"),
                width,
                out,
                act,
                norm,
                0.0,
            )?);
            width = out;
        }
        Ok(Self { blocks })
    }

    pub fn identity() -> Self {
        Self { blocks: Vec::new() }
    }

    pub fn is_identity(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let mut h = z;
        // the transmitter has no dropout, so no noise is ever drawn
        let mut no_noise = crate::numerics::Rng::new(0);
        for b in &self.blocks {
            h = b.forward(g, store, h, Mode::Eval, &mut no_noise)?;
        }
        Ok(h)
    }
}

/// Shared layers followed by one sigmoid-terminated head per task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regressor {
    pub shared: Vec<DenseBlock>,
    pub heads: Vec<Vec<DenseBlock>>,
}

impl Regressor {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        tasks: usize,
        arch: &ArchConfig,
    ) -> Result<Self> {
        if tasks == 0 {
            return Err(Error::Config("task count must be at least 1".into()));
        }
        let mut width = arch.z_dim;
        let mut shared = Vec::new();
        for (i, &out) in arch.regressor_shared.iter().enumerate() {
            shared.push(DenseBlock::new(
                store,
                rng,
                &format!("{prefix}.shared{i}"),
                width,
                out,
                Activation::Selu,
                true,
                arch.dropout,
            )?);
            width = out;
        }
        let last = arch.regressor_head.len() - 1;
        let mut heads = Vec::with_capacity(tasks);
        for t in 0..tasks {
            let mut w = width;
            let mut head = Vec::new();
            for (i, &out) in arch.regressor_head.iter().enumerate() {
                let act = if i == last {
                    Activation::Sigmoid
                } else {
                    Activation::Selu
                };
                head.push(DenseBlock::new(
                    store,
                    rng,
                    &format!("{prefix}.task{t}.layer{i}"),
                    w,
                    out,
                    act,
                    false,
                    0.0,
                )?);
                w = out;
            }
            heads.push(head);
        }
        Ok(Self { shared, heads })
    }

    pub fn tasks(&self) -> usize {
        self.heads.len()
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.shared
            .iter()
            .chain(self.heads.iter().flatten())
            .flat_map(|b| b.params())
            .collect()
    }

    /// Predictions `n×k`, each in (0, 1).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: Var,
        mode: Mode,
        noise: &mut dyn NoiseSource,
    ) -> Result<Var> {
        let mut h = z;
        for b in &self.shared {
            h = b.forward(g, store, h, mode, noise)?;
        }
        let mut outs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let mut o = h;
            for b in head {
                o = b.forward(g, store, o, mode, noise)?;
            }
            outs.push(o);
        }
        g.concat_cols(&outs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransmitterKind {
    /// No transmitter at all (high-domain model).
    None,
    /// Identity mapping (the "w/o transmitter" ablation).
    Identity,
    Mlp,
}

/// Everything needed to rebuild a [`ModelStack`] with identical parameter
/// names and shapes. Stored alongside checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub tasks: usize,
    pub transmitter: TransmitterKind,
    pub arch: ArchConfig,
}

/// Encoder, decoder, optional transmitter and regressor sharing one
/// parameter store.
#[derive(Clone, Debug)]
pub struct ModelStack {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub transmitter: Transmitter,
    pub regressor: Regressor,
}

pub const ENCODER: &str = "encoder";
pub const DECODER: &str = "decoder";
pub const TRANSMITTER: &str = "transmitter";
pub const REGRESSOR: &str = "regressor";

impl ModelStack {
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        if spec.input_dim == 0 {
            return Err(Error::Config("input width must be positive".into()));
        }
        spec.arch.validate()?;
        let mut rng = Rng::derive(seed, "init");
        let mut store = ParamStore::new();
        let encoder = Encoder::build(&mut store, &mut rng, ENCODER, spec.input_dim, &spec.arch)?;
        let decoder = Decoder::build(&mut store, &mut rng, DECODER, spec.input_dim, &spec.arch)?;
        let transmitter = match spec.transmitter {
            TransmitterKind::Mlp => Transmitter::build(&mut store, &mut rng, TRANSMITTER, &spec.arch)?,
            TransmitterKind::None | TransmitterKind::Identity => Transmitter::identity(),
        };
        let regressor = Regressor::build(&mut store, &mut rng, REGRESSOR, spec.tasks, &spec.arch)?;
        Ok(Self {
            spec: spec.clone(),
            store,
            encoder,
            decoder,
            transmitter,
            regressor,
        })
    }

    pub fn topology(&self) -> serde_json::Value {
        serde_json::json!({
            "spec": self.spec,
            "encoder": self.encoder,
            "decoder": self.decoder,
            "transmitter": self.transmitter,
            "regressor": self.regressor,
        })
    }

    pub fn encode(
        &self,
        g: &mut Graph,
        x: Var,
        mode: Mode,
        noise: &mut dyn NoiseSource,
    ) -> Result<(Var, Var, Var)> {
        self.encoder.forward(g, &self.store, x, mode, noise)
    }

    pub fn transmit(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.transmitter.forward(g, &self.store, z)
    }

    pub fn predict(
        &self,
        g: &mut Graph,
        z: Var,
        mode: Mode,
        noise: &mut dyn NoiseSource,
    ) -> Result<Var> {
        self.regressor.forward(g, &self.store, z, mode, noise)
    }

    /// Supervised path: encoder mean → transmitter → regressor.
    pub fn forward_supervised(
        &self,
        g: &mut Graph,
        x: Var,
        mode: Mode,
        noise: &mut dyn NoiseSource,
    ) -> Result<Var> {
        let (_, mu, _) = self.encode(g, x, mode, &mut ZeroNoise(&mut *noise))?;
        let zt = self.transmit(g, mu)?;
        self.predict(g, zt, mode, noise)
    }

    /// Freeze groups for gradual unfreezing, input → output: encoder blocks,
    /// then the transmitter as one group when it is not the identity.
    pub fn freeze_state(&self) -> FreezeState {
        let mut blocks = self.encoder.freeze_blocks(ENCODER);
        if !self.transmitter.is_identity() {
            blocks.push(FreezeBlock {
                name: TRANSMITTER.into(),
                params: self.transmitter.params(),
                trainable: false,
            });
        }
        FreezeState { blocks }
    }

    /// Copies regressor weights from another stack with the same task count.
    pub fn inherit_regressor(&mut self, from: &ModelStack) -> Result<()> {
        if from.regressor.tasks() != self.regressor.tasks() {
            return Err(Error::Config(format!(
                "cannot inherit a {}-task regressor into a {}-task model",
                from.regressor.tasks(),
                self.regressor.tasks()
            )));
        }
        let prefix = format!("{REGRESSOR}.");
        self.store.copy_prefixed(&from.store, &prefix, &prefix)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreezeBlock {
    pub name: String,
    pub params: Vec<ParamId>,
    pub trainable: bool,
}

/// Ordered (input → output) blocks with per-block trainable flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreezeState {
    pub blocks: Vec<FreezeBlock>,
}

impl FreezeState {
    pub fn freeze_all(&mut self) {
        for b in &mut self.blocks {
            b.trainable = false;
        }
    }

    pub fn unfrozen_count(&self) -> usize {
        self.blocks.iter().filter(|b| b.trainable).count()
    }

    pub fn all_trainable(&self) -> bool {
        self.blocks.iter().all(|b| b.trainable)
    }

    /// Makes the output-nearest frozen block trainable and returns its index.
    /// With nothing left frozen this is a no-op returning `None`.
    pub fn unfreeze_top(&mut self) -> Option<usize> {
        let idx = self.blocks.iter().rposition(|b| !b.trainable);
        match idx {
            Some(i) => {
                self.blocks[i].trainable = true;
                Some(i)
            }
            None => {
                log::warn!("unfreeze requested but every block is already trainable");
                None
            }
        }
    }

    pub fn apply(&self, store: &mut ParamStore) {
        for b in &self.blocks {
            store.set_trainable(&b.params, b.trainable);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    fn spec(input_dim: usize, tasks: usize, t: TransmitterKind) -> ModelSpec {
        ModelSpec {
            input_dim,
            tasks,
            transmitter: t,
            arch: ArchConfig::default(),
        }
    }

    #[test]
    fn encoder_parameter_count_matches_widths() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        Encoder::build(&mut store, &mut rng, "e", 1000, &ArchConfig::default()).unwrap();
        let want = (1000 * 512 + 512)
            + (512 * 256 + 256)
            + (256 * 128 + 128)
            + 2 * (512 + 256 + 128)
            + 2 * (128 * 128 + 128);
        assert_eq!(store.numel(), want);
    }

    #[test]
    fn transmitter_parameter_count() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        Transmitter::build(&mut store, &mut rng, "t", &ArchConfig::default()).unwrap();
        assert_eq!(store.numel(), 2 * (128 * 128 + 128) + 2 * 128);
    }

    #[test]
    fn build_is_deterministic_and_finite() {
        let a = ModelStack::build(&spec(20, 3, TransmitterKind::Mlp), 4).unwrap();
        let b = ModelStack::build(&spec(20, 3, TransmitterKind::Mlp), 4).unwrap();
        let ids: Vec<_> = a.store.ids().collect();
        assert!(a.store.values_equal(&b.store, &ids));
        assert!(a.store.iter().all(|(_, p)| p.value.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn build_rejects_bad_widths() {
        assert!(ModelStack::build(&spec(0, 3, TransmitterKind::Mlp), 0).is_err());
        assert!(ModelStack::build(&spec(5, 0, TransmitterKind::Mlp), 0).is_err());
    }

    #[test]
    fn encode_shapes_and_modes() {
        let m = ModelStack::build(&spec(10, 2, TransmitterKind::Mlp), 1).unwrap();
        let mut rng = Rng::new(2);
        let x = rng.normal_matrix(5, 10);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let (z, mu, _) = m.encode(&mut g, xv, Mode::Eval, &mut rng).unwrap();
        assert_eq!(z, mu);
        assert_eq!(g.shape(z), (5, 128));
        let (z, mu, _) = m
            .encode(&mut g, xv, Mode::Train, &mut ZeroNoise(&mut rng))
            .unwrap();
        assert_eq!(g.value(z), g.value(mu));
    }

    #[test]
    fn identity_transmitter_passes_input_through() {
        let m = ModelStack::build(&spec(4, 1, TransmitterKind::Identity), 1).unwrap();
        let mut g = Graph::new();
        let z = g.input(Rng::new(3).normal_matrix(6, 128));
        let out = m.transmit(&mut g, z).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn fresh_transmitter_maps_zero_to_final_beta() {
        let m = ModelStack::build(&spec(4, 1, TransmitterKind::Mlp), 1).unwrap();
        let mut g = Graph::new();
        let z = g.input(Matrix::zeros((3, 128)));
        let out = m.transmit(&mut g, z).unwrap();
        let (_, beta) = m.transmitter.blocks.last().unwrap().norm.unwrap();
        for row in g.value(out).outer_iter() {
            assert_eq!(row, m.store.get(beta).value.row(0));
        }
        assert_eq!(g.shape(out), (3, 128));
    }

    #[test]
    fn predictions_in_unit_interval() {
        for k in [1, 4] {
            let m = ModelStack::build(&spec(8, k, TransmitterKind::None), 9).unwrap();
            let mut rng = Rng::new(1);
            let mut z = rng.normal_matrix(7, 128) * 3.0;
            let row0 = z.row(0).to_owned();
            z.row_mut(1).assign(&row0);
            let mut g = Graph::new();
            let zv = g.input(z);
            let y = m.predict(&mut g, zv, Mode::Eval, &mut rng).unwrap();
            let y = g.value(y);
            assert_eq!(y.dim(), (7, k));
            assert!(y.iter().all(|&v| v > 0.0 && v < 1.0));
            assert_eq!(y.row(0), y.row(1));
        }
    }

    #[test]
    fn unfreeze_from_the_output_side() {
        let m = ModelStack::build(&spec(8, 1, TransmitterKind::None), 0).unwrap();
        let mut fs = m.freeze_state();
        assert_eq!(fs.blocks.len(), 3);
        assert_eq!(fs.unfreeze_top(), Some(2));
        assert!(fs.blocks[2].params.contains(&m.encoder.head.mu_w));
        assert_eq!(fs.unfreeze_top(), Some(1));
        assert_eq!(fs.unfreeze_top(), Some(0));
        assert!(fs.all_trainable());
        assert_eq!(fs.unfreeze_top(), None);
    }

    #[test]
    fn transmitter_is_first_group_released() {
        let m = ModelStack::build(&spec(8, 1, TransmitterKind::Mlp), 0).unwrap();
        let mut fs = m.freeze_state();
        let i = fs.unfreeze_top().unwrap();
        assert_eq!(fs.blocks[i].name, TRANSMITTER);
    }
}
