//! Parameter bundles shared by the encoder and the heads.

use rand::Rng;

use crate::autodiff::{xavier_uniform, Array, AutodiffError, Graph, ParamId, ParamStore, Real, Var};

type Result<T> = std::result::Result<T, AutodiffError>;

/// Affine layer `x·Wᵀ + b`, `W` shaped `[out, in]`.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Dense {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), xavier_uniform(&[output, input], input, output, rng))?;
        let b = store.add(format!("{name}.b"), Array::zeros(&[output]))?;
        Ok(Dense { w, b: Some(b) })
    }

    /// A bias-free projection.
    pub fn without_bias<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), xavier_uniform(&[output, input], input, output, rng))?;
        Ok(Dense { w, b: None })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.affine(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Array::full(&[dim], T::one()))?;
        let beta = store.add(format!("{name}.beta"), Array::zeros(&[dim]))?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta, Self::EPS)
    }
}

/// Two affine layers with a ReLU between them.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub hidden: Dense,
    pub out: Dense,
}

impl Mlp {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Mlp {
            hidden: Dense::new(store, &format!("{name}.0"), input, output, rng)?,
            out: Dense::new(store, &format!("{name}.1"), output, output, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = g.relu(h);
        self.out.forward(g, h)
    }
}

/// Single-direction LSTM weights, gates packed `[i, f, g, o]`.
#[derive(Clone, Copy, Debug)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w_ih = store.add(
            format!("{name}.w_ih"),
            xavier_uniform(&[4 * hidden, input], input, 4 * hidden, rng),
        )?;
        let w_hh = store.add(
            format!("{name}.w_hh"),
            xavier_uniform(&[4 * hidden, hidden], hidden, 4 * hidden, rng),
        )?;
        let mut bias = Array::zeros(&[4 * hidden]);
        for v in &mut bias.data_mut()[hidden..2 * hidden] {
            *v = T::one();
        }
        let b = store.add(format!("{name}.b"), bias)?;
        Ok(Lstm { w_ih, w_hh, b, hidden })
    }

    /// Runs over the rows of `x` in the given order; returns one hidden
    /// row per step, in step order.
    pub fn run<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, order: &[usize]) -> Result<Vec<Var>> {
        let (w_ih, w_hh, b) = (g.param(self.w_ih), g.param(self.w_hh), g.param(self.b));
        let zx = g.affine(x, w_ih, Some(b))?;
        let mut h = g.constant(Array::zeros(&[1, self.hidden]));
        let mut c = g.constant(Array::zeros(&[1, self.hidden]));
        let mut out = Vec::with_capacity(order.len());
        for &t in order {
            let z = g.select_rows(zx, &[t])?;
            let (h2, c2) = crate::autodiff::lstm_step(g, z, h, c, w_hh)?;
            h = h2;
            c = c2;
            out.push(h);
        }
        Ok(out)
    }
}
