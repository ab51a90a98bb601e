//! The client network `mapper ∘ meta ∘ encoder`, the auxiliary decoder and
//! the composite training loss.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{mse_loss, GradientBundle, Mlp, Optimizer, OptimizerKind};
use crate::rng;

/// One value per model part.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Parts<T> {
    pub encoder: T,
    pub decoder: T,
    pub meta: T,
    pub mapper: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Encoder,
    Decoder,
    Meta,
    Mapper,
}

impl Part {
    pub const ALL: [Part; 4] = [Part::Encoder, Part::Decoder, Part::Meta, Part::Mapper];

    pub fn name(self) -> &'static str {
        match self {
            Part::Encoder => "encoder",
            Part::Decoder => "decoder",
            Part::Meta => "meta",
            Part::Mapper => "mapper",
        }
    }
}

impl<T> Parts<T> {
    pub fn splat(v: T) -> Self
    where
        T: Clone,
    {
        Parts {
            encoder: v.clone(),
            decoder: v.clone(),
            meta: v.clone(),
            mapper: v,
        }
    }

    pub fn get(&self, part: Part) -> &T {
        match part {
            Part::Encoder => &self.encoder,
            Part::Decoder => &self.decoder,
            Part::Meta => &self.meta,
            Part::Mapper => &self.mapper,
        }
    }

    pub fn get_mut(&mut self, part: Part) -> &mut T {
        match part {
            Part::Encoder => &mut self.encoder,
            Part::Decoder => &mut self.decoder,
            Part::Meta => &mut self.meta,
            Part::Mapper => &mut self.mapper,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(Part, &T) -> U) -> Parts<U> {
        Parts {
            encoder: f(Part::Encoder, &self.encoder),
            decoder: f(Part::Decoder, &self.decoder),
            meta: f(Part::Meta, &self.meta),
            mapper: f(Part::Mapper, &self.mapper),
        }
    }
}

/// Architecture and training hyperparameters shared by every client. The
/// input width `m` is per task and supplied when a model is built.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ModelConfig {
    /// Meta signal space (latent) dimension `d`.
    pub latent_dim: usize,
    /// Meta-model output dimension `n`.
    pub feature_dim: usize,
    /// Coordinate dimension `p`.
    pub coord_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub meta_hidden: Vec<usize>,
    pub mapper_hidden: Vec<usize>,
    /// Learning rate of encoder and decoder.
    pub lr_encoder: f64,
    pub lr_meta: f64,
    pub lr_mapper: f64,
    /// Weight of the reconstruction term in the composite loss.
    pub recon_weight: f64,
    pub optimizers: Parts<OptimizerKind>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 50,
            feature_dim: 32,
            coord_dim: 2,
            encoder_hidden: alloc::vec![1024],
            decoder_hidden: alloc::vec![1024],
            meta_hidden: alloc::vec![256, 128, 64],
            mapper_hidden: alloc::vec![64, 32],
            lr_encoder: 0.0095,
            lr_meta: 0.0005,
            lr_mapper: 0.0005,
            recon_weight: 0.1,
            optimizers: Parts::splat(OptimizerKind::Adam),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims_ok = self.latent_dim >= 1
            && self.feature_dim >= 1
            && self.coord_dim >= 1
            && [
                &self.encoder_hidden,
                &self.decoder_hidden,
                &self.meta_hidden,
                &self.mapper_hidden,
            ]
            .iter()
            .all(|h| h.iter().all(|&w| w >= 1));
        if !dims_ok {
            return Err(Error::InvalidConfig("all model dimensions must be >= 1".into()));
        }
        let lrs = [self.lr_encoder, self.lr_meta, self.lr_mapper];
        if lrs.iter().any(|lr| !(*lr > 0.0 && lr.is_finite())) {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        if !(self.recon_weight >= 0.0 && self.recon_weight.is_finite()) {
            return Err(Error::InvalidConfig("reconstruction weight must be >= 0".into()));
        }
        Ok(())
    }

    pub fn learning_rates(&self) -> Parts<f64> {
        Parts {
            encoder: self.lr_encoder,
            decoder: self.lr_encoder,
            meta: self.lr_meta,
            mapper: self.lr_mapper,
        }
    }

    fn widths(&self, input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
        let mut w = Vec::with_capacity(hidden.len() + 2);
        w.push(input);
        w.extend_from_slice(hidden);
        w.push(output);
        w
    }

    pub fn encoder_widths(&self, m: usize) -> Vec<usize> {
        self.widths(m, &self.encoder_hidden, self.latent_dim)
    }

    pub fn decoder_widths(&self, m: usize) -> Vec<usize> {
        self.widths(self.latent_dim, &self.decoder_hidden, m)
    }

    pub fn meta_widths(&self) -> Vec<usize> {
        self.widths(self.latent_dim, &self.meta_hidden, self.feature_dim)
    }

    pub fn mapper_widths(&self) -> Vec<usize> {
        self.widths(self.feature_dim, &self.mapper_hidden, self.coord_dim)
    }

    /// Freshly initialized meta-model network.
    pub fn init_meta(&self, seed: u64) -> Result<Mlp> {
        self.validate()?;
        Mlp::seeded(&self.meta_widths(), seed, STREAM_META)
    }
}

const STREAM_ENCODER: u64 = 1;
const STREAM_DECODER: u64 = 2;
const STREAM_META: u64 = 3;
const STREAM_MAPPER: u64 = 4;

/// Loss value split into its two terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub prediction: f64,
    pub reconstruction: f64,
}

/// A client's full parameter set with its optimizer states.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientModel {
    config: ModelConfig,
    nets: Parts<Mlp>,
    optimizers: Parts<Optimizer>,
}

impl ClientModel {
    /// Randomly initialized encoder, decoder and mapper for an `m`-AP task,
    /// with a meta part drawn from `meta_seed`.
    pub fn new(config: &ModelConfig, m: usize, seed: u64, meta: Mlp) -> Result<Self> {
        config.validate()?;
        if m == 0 {
            return Err(Error::InvalidConfig("task has no access points".into()));
        }
        let nets = Parts {
            encoder: Mlp::seeded(&config.encoder_widths(m), seed, STREAM_ENCODER)?,
            decoder: Mlp::seeded(&config.decoder_widths(m), seed, STREAM_DECODER)?,
            meta,
            mapper: Mlp::seeded(&config.mapper_widths(), seed, STREAM_MAPPER)?,
        };
        ClientModel::from_parts(config, nets)
    }

    /// Like [`ClientModel::new`] with a random meta part seeded by `seed`.
    pub fn random(config: &ModelConfig, m: usize, seed: u64) -> Result<Self> {
        let meta = Mlp::seeded(&config.meta_widths(), seed, STREAM_META)?;
        ClientModel::new(config, m, seed, meta)
    }

    /// Assembles a model from explicit networks, checking `m → d → n → p`.
    pub fn from_parts(config: &ModelConfig, nets: Parts<Mlp>) -> Result<Self> {
        let (d, n, p) = (config.latent_dim, config.feature_dim, config.coord_dim);
        let m = nets.encoder.input_dim();
        let checks = [
            ("encoder output", d, nets.encoder.output_dim()),
            ("decoder input", d, nets.decoder.input_dim()),
            ("decoder output", m, nets.decoder.output_dim()),
            ("meta input", d, nets.meta.input_dim()),
            ("meta output", n, nets.meta.output_dim()),
            ("mapper input", n, nets.mapper.input_dim()),
            ("mapper output", p, nets.mapper.output_dim()),
        ];
        for (ctx, expected, found) in checks {
            if expected != found {
                return Err(Error::dims(ctx, expected, found));
            }
        }
        let optimizers = nets.map(|part, net| Optimizer::new(*config.optimizers.get(part), net));
        Ok(ClientModel {
            config: config.clone(),
            nets,
            optimizers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.nets.encoder.input_dim()
    }

    pub fn nets(&self) -> &Parts<Mlp> {
        &self.nets
    }

    pub fn net(&self, part: Part) -> &Mlp {
        self.nets.get(part)
    }

    pub fn net_mut(&mut self, part: Part) -> &mut Mlp {
        self.nets.get_mut(part)
    }

    pub fn meta(&self) -> &Mlp {
        &self.nets.meta
    }

    /// Replaces the local meta part with `theta` and resets its optimizer.
    pub fn load_meta(&mut self, theta: &Mlp) -> Result<()> {
        if !theta.same_shape(&self.nets.meta) {
            return Err(Error::InvalidConfig("meta-model shape differs from client".into()));
        }
        self.nets.meta.clone_from(theta);
        self.optimizers.meta = Optimizer::new(self.config.optimizers.meta, theta);
        Ok(())
    }

    pub fn set_optimizers(&mut self, kinds: Parts<OptimizerKind>) {
        self.config.optimizers = kinds;
        self.optimizers = self.nets.map(|part, net| Optimizer::new(*kinds.get(part), net));
    }

    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        self.nets.encoder.predict(x)
    }

    pub fn decode(&self, latent: &Matrix) -> Result<Matrix> {
        self.nets.decoder.predict(latent)
    }

    /// `mapper(meta(encoder(x)))`.
    pub fn full_forward(&self, x: &Matrix) -> Result<Matrix> {
        let latent = self.nets.encoder.predict(x)?;
        let features = self.nets.meta.predict(&latent)?;
        self.nets.mapper.predict(&features)
    }

    fn check_batch(&self, x: &Matrix, y: &Matrix) -> Result<()> {
        if x.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if x.cols() != self.input_dim() {
            return Err(Error::dims("batch inputs", self.input_dim(), x.cols()));
        }
        if y.cols() != self.config.coord_dim {
            return Err(Error::dims("batch labels", self.config.coord_dim, y.cols()));
        }
        if y.rows() != x.rows() {
            return Err(Error::dims("batch rows", x.rows(), y.rows()));
        }
        Ok(())
    }

    /// `MSE(ŷ, y) + λ·MSE(x̂, x)` and its gradient over all four parts.
    pub fn composite_loss(
        &self,
        x: &Matrix,
        y: &Matrix,
    ) -> Result<(LossBreakdown, Parts<GradientBundle>)> {
        self.check_batch(x, y)?;
        let nets = &self.nets;
        let (latent, enc_cache) = nets.encoder.forward(x)?;
        let (features, meta_cache) = nets.meta.forward(&latent)?;
        let (pred, map_cache) = nets.mapper.forward(&features)?;
        let (prediction, dpred) = mse_loss(&pred, y)?;
        let (g_mapper, dfeatures) = nets.mapper.backward(&map_cache, &dpred)?;
        let (g_meta, mut dlatent) = nets.meta.backward(&meta_cache, &dfeatures)?;

        let lambda = self.config.recon_weight;
        let (reconstruction, g_decoder) = if lambda > 0.0 {
            let (recon, dec_cache) = nets.decoder.forward(&latent)?;
            let (loss, mut drecon) = mse_loss(&recon, x)?;
            drecon.map_inplace(|v| v * lambda);
            let (g, dlat) = nets.decoder.backward(&dec_cache, &drecon)?;
            for (a, b) in dlatent.as_mut_slice().iter_mut().zip(dlat.as_slice()) {
                *a += b;
            }
            (loss, g)
        } else {
            let mut g = GradientBundle::zeros_like(&nets.decoder);
            g.samples = x.rows();
            (0.0, g)
        };
        let (g_encoder, _) = nets.encoder.backward(&enc_cache, &dlatent)?;
        let loss = LossBreakdown {
            total: prediction + lambda * reconstruction,
            prediction,
            reconstruction,
        };
        Ok((
            loss,
            Parts {
                encoder: g_encoder,
                decoder: g_decoder,
                meta: g_meta,
                mapper: g_mapper,
            },
        ))
    }

    /// Prediction loss and its gradient with respect to the meta part only.
    pub fn meta_gradient(&self, x: &Matrix, y: &Matrix) -> Result<(f64, GradientBundle)> {
        self.check_batch(x, y)?;
        let nets = &self.nets;
        let latent = nets.encoder.predict(x)?;
        let (features, meta_cache) = nets.meta.forward(&latent)?;
        let (pred, map_cache) = nets.mapper.forward(&features)?;
        let (loss, dpred) = mse_loss(&pred, y)?;
        let (_, dfeatures) = nets.mapper.backward(&map_cache, &dpred)?;
        let (g_meta, _) = nets.meta.backward(&meta_cache, &dfeatures)?;
        Ok((loss, g_meta))
    }

    /// Prediction MSE without gradients.
    pub fn prediction_loss(&self, x: &Matrix, y: &Matrix) -> Result<f64> {
        self.check_batch(x, y)?;
        Ok(mse_loss(&self.full_forward(x)?, y)?.0)
    }

    /// One optimizer step per part with the configured learning rates. The
    /// decoder is left untouched when the reconstruction weight is zero.
    pub fn apply_gradients(&mut self, grads: &Parts<GradientBundle>) -> Result<()> {
        let lrs = self.config.learning_rates();
        let skip_decoder = self.config.recon_weight == 0.0;
        for part in Part::ALL {
            if part == Part::Decoder && skip_decoder {
                continue;
            }
            let lr = *lrs.get(part);
            let net = self.nets.get_mut(part);
            self.optimizers.get_mut(part).step(net, grads.get(part), lr)?;
        }
        Ok(())
    }

    /// Composite loss on `(x, y)` followed by one optimizer step.
    pub fn train_step(&mut self, x: &Matrix, y: &Matrix) -> Result<LossBreakdown> {
        let (loss, grads) = self.composite_loss(x, y)?;
        self.apply_gradients(&grads)?;
        Ok(loss)
    }

    /// All parameters, part by part in `Part::ALL` order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for part in Part::ALL {
            v.extend(self.nets.get(part).params().copied());
        }
        v
    }
}

/// Seeds derived for a client's private parts, so that RI and MI runs of the
/// same seed share encoder, decoder and mapper initializations.
pub fn client_seed(seed: u64, client: u64) -> u64 {
    rng::stream_id(&[seed, client])
}
