use rand::Rng;

use super::{Graph, ParamId, ParamStore, ShapeError, Var};

/// Scaled dot-product attention: `softmax(Q K^T / sqrt(d)) V`.
pub fn attention(g: &mut Graph, query: Var, keys: Var, values: Var) -> Result<Var, ShapeError> {
    let [_, dq] = g.shape(query);
    let [lk, dk] = g.shape(keys);
    let [lv, _] = g.shape(values);
    if dq != dk {
        return Err(ShapeError::new("attention", g.shape(query), g.shape(keys)));
    }
    if lk != lv {
        return Err(ShapeError::new("attention", g.shape(keys), g.shape(values)));
    }
    let kt = g.transpose(keys);
    let scores = g.matmul(query, kt)?;
    let scaled = g.scale(scores, 1.0 / (dq.max(1) as f64).sqrt());
    let weights = g.softmax_rows(scaled);
    g.matmul(weights, values)
}

/// Weights of one GRU cell, row-vector convention (`x W`, `h U`).
#[derive(Debug, Clone, Copy)]
pub struct GruParams {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

/// GRU weights placed on a tape.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    w: [Var; 3],
    u: [Var; 3],
    b: [Var; 3],
}

impl GruParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = |gate: &str, store: &mut ParamStore, rng: &mut R| {
            (
                store.normal(&format!("{prefix}.w_{gate}"), input_dim, hidden_dim, input_dim, rng),
                store.normal(&format!("{prefix}.u_{gate}"), hidden_dim, hidden_dim, hidden_dim, rng),
                store.zeros(&format!("{prefix}.b_{gate}"), 1, hidden_dim),
            )
        };
        let (w_z, u_z, b_z) = w("z", store, rng);
        let (w_r, u_r, b_r) = w("r", store, rng);
        let (w_h, u_h, b_h) = w("h", store, rng);
        Self {
            w_z,
            u_z,
            b_z,
            w_r,
            u_r,
            b_r,
            w_h,
            u_h,
            b_h,
            input_dim,
            hidden_dim,
        }
    }

    pub fn ids(&self) -> [ParamId; 9] {
        [
            self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r, self.w_h, self.u_h,
            self.b_h,
        ]
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> GruVars {
        GruVars {
            w: [self.w_z, self.w_r, self.w_h].map(|id| g.param(store, id)),
            u: [self.u_z, self.u_r, self.u_h].map(|id| g.param(store, id)),
            b: [self.b_z, self.b_r, self.b_h].map(|id| g.param(store, id)),
        }
    }
}

/// One step from pre-projected inputs `xw[k] = x W_k + b_k`.
fn step_projected(g: &mut Graph, p: &GruVars, h: Var, xw: [Var; 3]) -> Result<Var, ShapeError> {
    let hz = g.matmul(h, p.u[0])?;
    let z_in = g.add(xw[0], hz)?;
    let z = g.sigmoid(z_in);
    let hr = g.matmul(h, p.u[1])?;
    let r_in = g.add(xw[1], hr)?;
    let r = g.sigmoid(r_in);
    let rh = g.mul(r, h)?;
    let rhu = g.matmul(rh, p.u[2])?;
    let cand_in = g.add(xw[2], rhu)?;
    let cand = g.tanh(cand_in);
    let keep = g.affine(z, -1.0, 1.0);
    let kept = g.mul(keep, h)?;
    let fresh = g.mul(z, cand)?;
    g.add(kept, fresh)
}

/// `h' = (1 - z) * h + z * tanh(x W_h + (r * h) U_h + b_h)` with
/// `z = sigmoid(x W_z + h U_z + b_z)` and `r = sigmoid(x W_r + h U_r + b_r)`.
#[allow(clippy::needless_range_loop)]
pub fn gru_step(g: &mut Graph, p: &GruVars, h: Var, x: Var) -> Result<Var, ShapeError> {
    let mut xw = [h; 3];
    for k in 0..3 {
        let proj = g.matmul(x, p.w[k])?;
        xw[k] = g.add(proj, p.b[k])?;
    }
    step_projected(g, p, h, xw)
}

/// Runs the cell over the rows of `xs` starting from `h0`; returns the final state.
#[allow(clippy::needless_range_loop)]
pub fn gru_sequence(g: &mut Graph, p: &GruVars, xs: Var, h0: Var) -> Result<Var, ShapeError> {
    let mut proj = [h0; 3];
    for k in 0..3 {
        let m = g.matmul(xs, p.w[k])?;
        proj[k] = g.add(m, p.b[k])?;
    }
    let mut h = h0;
    for i in 0..g.shape(xs)[0] {
        let mut xw = [h0; 3];
        for k in 0..3 {
            xw[k] = g.row(proj[k], i)?;
        }
        h = step_projected(g, p, h, xw)?;
    }
    Ok(h)
}
