use serde::{Deserialize, Serialize};

use super::graph::kl_value;
use super::{Graph, NumericsError, ShapeError, Tensor, Var};

/// Diagonal Gaussian in log-variance form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mean: Vec<f64>, logvar: Vec<f64>) -> Result<Self, NumericsError> {
        if mean.len() != logvar.len() {
            return Err(NumericsError::Dimension(mean.len(), logvar.len()));
        }
        Ok(Self { mean, logvar })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.logvar.iter().map(|lv| (0.5 * lv).exp()).collect()
    }
}

/// `KL(q || p)` summed over dimensions.
pub fn gaussian_kl(q: &GaussianParams, p: &GaussianParams) -> Result<f64, NumericsError> {
    if q.dim() != p.dim() {
        return Err(NumericsError::Dimension(q.dim(), p.dim()));
    }
    Ok(kl_value(&q.mean, &q.logvar, &p.mean, &p.logvar))
}

/// `z = mean + exp(logvar / 2) * eps`.
pub fn reparameterize(g: &GaussianParams, eps: &[f64]) -> Result<Vec<f64>, NumericsError> {
    if eps.len() != g.dim() {
        return Err(NumericsError::Dimension(g.dim(), eps.len()));
    }
    Ok(g
        .mean
        .iter()
        .zip(&g.logvar)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// A Gaussian whose mean and log-variance are nodes on a tape (`1 x d_z` each).
#[derive(Debug, Clone, Copy)]
pub struct GaussianVars {
    pub mean: Var,
    pub logvar: Var,
}

impl GaussianVars {
    pub fn value(&self, g: &Graph) -> GaussianParams {
        GaussianParams {
            mean: g.value(self.mean).data().to_vec(),
            logvar: g.value(self.logvar).data().to_vec(),
        }
    }

    pub fn kl(&self, g: &mut Graph, prior: &GaussianVars) -> Result<Var, ShapeError> {
        g.gaussian_kl(self.mean, self.logvar, prior.mean, prior.logvar)
    }

    pub fn sample(&self, g: &mut Graph, eps: &[f64]) -> Result<Var, ShapeError> {
        let shape = g.shape(self.mean);
        if shape != [1, eps.len()] {
            return Err(ShapeError::new("reparameterize", shape, [1, eps.len()]));
        }
        let half = g.scale(self.logvar, 0.5);
        let std = g.exp(half);
        let noise = g.constant(Tensor::row_vector(eps.to_vec()));
        let scaled = g.mul(std, noise)?;
        g.add(self.mean, scaled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reparameterize_cases() {
        let g = GaussianParams::new(vec![0.5, -1.0], vec![0.3, 0.1]).unwrap();
        assert_eq!(reparameterize(&g, &[0.0, 0.0]).unwrap(), g.mean);
        let collapsed = GaussianParams::new(vec![0.5], vec![f64::NEG_INFINITY]).unwrap();
        assert_eq!(reparameterize(&collapsed, &[3.0]).unwrap(), vec![0.5]);
        let g = GaussianParams::new(vec![0.0], vec![2.0 * 2f64.ln()]).unwrap();
        assert!((reparameterize(&g, &[1.0]).unwrap()[0] - 2.0).abs() < 1e-15);
        assert!(reparameterize(&g, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn kl_cases() {
        let q = GaussianParams::new(vec![1.0], vec![0.0]).unwrap();
        let p = GaussianParams::new(vec![0.0], vec![0.0]).unwrap();
        assert!((gaussian_kl(&q, &p).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(gaussian_kl(&q, &q).unwrap(), 0.0);
        let r = GaussianParams::new(vec![0.0, 1.0], vec![0.0, 0.0]).unwrap();
        assert!(matches!(gaussian_kl(&q, &r), Err(NumericsError::Dimension(1, 2))));
    }

    #[test]
    fn tape_sample_matches_plain() {
        let params = GaussianParams::new(vec![0.2, -0.4], vec![0.6, -1.2]).unwrap();
        let mut g = Graph::new();
        let vars = GaussianVars {
            mean: g.constant(Tensor::row_vector(params.mean.clone())),
            logvar: g.constant(Tensor::row_vector(params.logvar.clone())),
        };
        let z = vars.sample(&mut g, &[0.7, -1.1]).unwrap();
        let plain = reparameterize(&params, &[0.7, -1.1]).unwrap();
        for (a, b) in g.value(z).data().iter().zip(&plain) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
