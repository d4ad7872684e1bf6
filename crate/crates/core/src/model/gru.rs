use crate::autodiff::{Graph, ParamId, ParamStore, RngStream, Scalar, Var};
use crate::error::{Error, Result};

/// One GRU layer with gates ordered `r, z, h̃` and `h' = (1-z)·h + z·h̃`.
#[derive(Debug, Clone)]
pub struct Gru {
    pub input: usize,
    pub hidden: usize,
    /// `[input, 3·hidden]`.
    pub w: ParamId,
    /// `[hidden, 2·hidden]`, recurrent weights of `r` and `z`.
    pub u_rz: ParamId,
    /// `[hidden, hidden]`, recurrent weights of the candidate.
    pub u_h: ParamId,
    /// `[3·hidden]`.
    pub b: ParamId,
}

impl Gru {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        Ok(Gru {
            input,
            hidden,
            w: store.add_glorot(format!("{name}.w"), &[input, 3 * hidden], rng)?,
            u_rz: store.add_glorot(format!("{name}.u_rz"), &[hidden, 2 * hidden], rng)?,
            u_h: store.add_glorot(format!("{name}.u_h"), &[hidden, hidden], rng)?,
            b: store.add_zeros(format!("{name}.b"), &[3 * hidden])?,
        })
    }

    /// Input projection `x·W + b` for `x: [.., input]`, as `[.., 3·hidden]`.
    pub fn project_input<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.last() != Some(&self.input) {
            return Err(Error::Shape {
                op: "gru-input",
                lhs: shape,
                rhs: vec![self.input, 3 * self.hidden],
            });
        }
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = g.reshape(x, &[rows, self.input])?;
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(flat, w)?;
        let y = g.add(y, b)?;
        let mut out = shape;
        *out.last_mut().expect("nonempty") = 3 * self.hidden;
        g.reshape(y, &out)
    }

    /// One update from a projected input `xw: [B, 3·hidden]` and `h: [B, hidden]`.
    pub fn step_projected<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, xw: Var, h: Var) -> Result<Var> {
        let n = self.hidden;
        let u_rz = g.param(store, self.u_rz);
        let u_h = g.param(store, self.u_h);
        let x_rz = g.slice(xw, 1, 0, 2 * n)?;
        let x_h = g.slice(xw, 1, 2 * n, n)?;
        let h_rz = g.matmul(h, u_rz)?;
        let rz = g.add(x_rz, h_rz)?;
        let rz = g.sigmoid(rz)?;
        let r = g.slice(rz, 1, 0, n)?;
        let z = g.slice(rz, 1, n, n)?;
        let rh = g.mul(r, h)?;
        let rh = g.matmul(rh, u_h)?;
        let cand = g.add(x_h, rh)?;
        let cand = g.tanh(cand)?;
        let keep = g.one_minus(z)?;
        let old = g.mul(keep, h)?;
        let new = g.mul(z, cand)?;
        g.add(old, new)
    }

    pub fn step<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, h: Var) -> Result<Var> {
        let xw = self.project_input(g, store, x)?;
        self.step_projected(g, store, xw, h)
    }
}
