//! Variational knowledge refining.
//!
//! A prior head sees the pooled context and pooled subgraph; a separate
//! posterior head additionally sees the gold response entities. A latent
//! `z` is decoded to a `d`-vector that is added to every retrieved entity row.

use rand::Rng;
use thiserror::Error;

use crate::numerics::{GaussianVars, Graph, ParamId, ParamStore, ShapeError, Tensor, Var};

#[derive(Debug, Error)]
pub enum RefinerError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("gold entity vector has length {got}, expected {expected}")]
    GoldLength { got: usize, expected: usize },
    #[error("noise vector has length {got}, expected {expected}")]
    NoiseLength { got: usize, expected: usize },
}

/// `input -> tanh(x W_h + b_h) -> (mean, logvar)`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianHead {
    pub w_hidden: ParamId,
    pub b_hidden: ParamId,
    pub w_mean: ParamId,
    pub b_mean: ParamId,
    pub w_logvar: ParamId,
    pub b_logvar: ParamId,
}

impl GaussianHead {
    fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        latent: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w_hidden: store.normal(&format!("{prefix}.w_hidden"), input, hidden, input, rng),
            b_hidden: store.zeros(&format!("{prefix}.b_hidden"), 1, hidden),
            w_mean: store.normal(&format!("{prefix}.w_mean"), hidden, latent, hidden, rng),
            b_mean: store.zeros(&format!("{prefix}.b_mean"), 1, latent),
            w_logvar: store.normal(&format!("{prefix}.w_logvar"), hidden, latent, hidden, rng),
            b_logvar: store.zeros(&format!("{prefix}.b_logvar"), 1, latent),
        }
    }

    pub fn ids(&self) -> [ParamId; 6] {
        [
            self.w_hidden,
            self.b_hidden,
            self.w_mean,
            self.b_mean,
            self.w_logvar,
            self.b_logvar,
        ]
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, input: Var) -> Result<GaussianVars, ShapeError> {
        let w = g.param(store, self.w_hidden);
        let b = g.param(store, self.b_hidden);
        let pre = g.matmul(input, w)?;
        let pre = g.add(pre, b)?;
        let hidden = g.tanh(pre);
        let affine = |g: &mut Graph, w: ParamId, b: ParamId| -> Result<Var, ShapeError> {
            let w = g.param(store, w);
            let b = g.param(store, b);
            let out = g.matmul(hidden, w)?;
            g.add(out, b)
        };
        Ok(GaussianVars {
            mean: affine(g, self.w_mean, self.b_mean)?,
            logvar: affine(g, self.w_logvar, self.b_logvar)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RefinerParams {
    pub prior: GaussianHead,
    pub posterior: GaussianHead,
    pub dec_weight: ParamId,
    pub dec_bias: ParamId,
    pub latent_dim: usize,
    pub num_entities: usize,
}

impl RefinerParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        d: usize,
        hidden: usize,
        latent_dim: usize,
        num_entities: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            prior: GaussianHead::register(store, "refiner.prior", 2 * d, hidden, latent_dim, rng),
            posterior: GaussianHead::register(
                store,
                "refiner.posterior",
                2 * d + num_entities,
                hidden,
                latent_dim,
                rng,
            ),
            dec_weight: store.normal("refiner.dec_weight", latent_dim, d, latent_dim, rng),
            dec_bias: store.zeros("refiner.dec_bias", 1, d),
            latent_dim,
            num_entities,
        }
    }

    /// Sets the decoder to the zero map so that refining is the identity.
    pub fn zero_decoder(&self, store: &mut ParamStore) {
        store.get_mut(self.dec_weight).value.data_mut().fill(0.0);
        store.get_mut(self.dec_bias).value.data_mut().fill(0.0);
    }
}

/// Prior `p(z | context, subgraph)` from the pooled representations.
pub fn prior_params(
    g: &mut Graph,
    store: &ParamStore,
    params: &RefinerParams,
    ctx_pooled: Var,
    sub_pooled: Var,
) -> Result<GaussianVars, ShapeError> {
    let input = g.concat_cols(&[ctx_pooled, sub_pooled])?;
    params.prior.forward(g, store, input)
}

/// Posterior `q(z | context, subgraph, gold entities)`.
pub fn posterior_params(
    g: &mut Graph,
    store: &ParamStore,
    params: &RefinerParams,
    ctx_pooled: Var,
    sub_pooled: Var,
    gold: &[f64],
) -> Result<GaussianVars, RefinerError> {
    if gold.len() != params.num_entities {
        return Err(RefinerError::GoldLength {
            got: gold.len(),
            expected: params.num_entities,
        });
    }
    let gold = g.constant(Tensor::row_vector(gold.to_vec()));
    let input = g.concat_cols(&[ctx_pooled, sub_pooled, gold])?;
    Ok(params.posterior.forward(g, store, input)?)
}

/// `e_sub + f_dec(z)`, the decoded latent broadcast over every entity row.
pub fn refine(
    g: &mut Graph,
    store: &ParamStore,
    params: &RefinerParams,
    e_sub: Var,
    z: Var,
) -> Result<Var, ShapeError> {
    let w = g.param(store, params.dec_weight);
    let b = g.param(store, params.dec_bias);
    let dec = g.matmul(z, w)?;
    let dec = g.add(dec, b)?;
    if g.shape(dec)[1] != g.shape(e_sub)[1] {
        return Err(ShapeError::new("refine", g.shape(e_sub), g.shape(dec)));
    }
    g.add(e_sub, dec)
}

/// `KL(q || p)`.
pub fn kl_loss(g: &mut Graph, posterior: &GaussianVars, prior: &GaussianVars) -> Result<Var, ShapeError> {
    posterior.kl(g, prior)
}

#[derive(Debug, Clone, Copy)]
pub enum RefineMode<'a> {
    /// Sample `z` from the posterior with explicit standard-normal noise.
    Train { gold: &'a [f64], noise: &'a [f64] },
    /// Use the prior mean.
    Infer,
}

#[derive(Debug, Clone, Copy)]
pub struct RefineOutput {
    pub refined: Var,
    pub prior: GaussianVars,
    pub posterior: Option<GaussianVars>,
    /// `KL(q || p)` in training mode.
    pub kl: Option<Var>,
    pub z: Var,
}

pub fn refine_pipeline(
    g: &mut Graph,
    store: &ParamStore,
    params: &RefinerParams,
    ctx_pooled: Var,
    e_sub: Var,
    mode: RefineMode<'_>,
) -> Result<RefineOutput, RefinerError> {
    let sub_pooled = g.mean_rows(e_sub);
    let prior = prior_params(g, store, params, ctx_pooled, sub_pooled)?;
    match mode {
        RefineMode::Infer => {
            let z = prior.mean;
            let refined = refine(g, store, params, e_sub, z)?;
            Ok(RefineOutput {
                refined,
                prior,
                posterior: None,
                kl: None,
                z,
            })
        }
        RefineMode::Train { gold, noise } => {
            if noise.len() != params.latent_dim {
                return Err(RefinerError::NoiseLength {
                    got: noise.len(),
                    expected: params.latent_dim,
                });
            }
            let posterior = posterior_params(g, store, params, ctx_pooled, sub_pooled, gold)?;
            let z = posterior.sample(g, noise)?;
            let kl = kl_loss(g, &posterior, &prior)?;
            let refined = refine(g, store, params, e_sub, z)?;
            Ok(RefineOutput {
                refined,
                prior,
                posterior: Some(posterior),
                kl: Some(kl),
                z,
            })
        }
    }
}
