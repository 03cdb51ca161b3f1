//! Parameterized layers built on the tape primitives.

use rand::Rng;

use crate::tensor::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};
use crate::Scalar;

pub const LN_EPS: f64 = 1e-5;

/// Token-wise affine map `x @ W + b` over the last axis.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        let w = store.xavier(format!("{name}.weight"), &[fan_in, fan_out], rng)?;
        let b = store.zeros(format!("{name}.bias"), &[fan_out])?;
        Ok(Self { w, b, fan_in, fan_out })
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var) -> Result<Var, TensorError> {
        let w = t.param(s, self.w);
        let b = t.param(s, self.b);
        let y = t.matmul(x, w)?;
        t.add_bcast(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self, TensorError> {
        let gain = store.ones(format!("{name}.gain"), &[d])?;
        let bias = store.zeros(format!("{name}.bias"), &[d])?;
        Ok(Self { gain, bias })
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var) -> Result<Var, TensorError> {
        let g = t.param(s, self.gain);
        let b = t.param(s, self.bias);
        t.layer_norm(x, g, b, LN_EPS)
    }
}

/// Two-layer GELU perceptron.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var) -> Result<Var, TensorError> {
        let h = self.fc1.forward(t, s, x)?;
        let h = t.gelu(h)?;
        self.fc2.forward(t, s, h)
    }
}

/// Multi-head scaled dot-product attention with output projection.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d: usize,
}

/// Keys (transposed per head) and values ready for reuse across queries.
#[derive(Debug, Clone, Copy)]
pub struct KeyValues {
    /// `[B, heads, dh, Nk]`
    pub kt: Var,
    /// `[B, heads, Nk, dh]`
    pub v: Var,
}

impl Attention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        if heads == 0 || d % heads != 0 {
            return Err(crate::tensor::TensorError::Invalid {
                op: "attention",
                msg: format!("width {d} not divisible by {heads} heads"),
            });
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, rng)?,
            heads,
            d,
        })
    }

    fn split_heads<T: Scalar>(&self, t: &mut Tape<T>, x: Var) -> Result<Var, TensorError> {
        let s = t.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.d {
            return Err(TensorError::Shape { op: "attention", lhs: s, rhs: vec![self.d] });
        }
        let x = t.reshape(x, &[s[0], s[1], self.heads, self.d / self.heads])?;
        t.transpose(x, 1, 2)
    }

    /// Projects `[B, Nk, d]` context into reusable keys and values.
    pub fn key_values<T: Scalar>(&self, t: &mut Tape<T>, s: &ParamStore<T>, ctx: Var) -> Result<KeyValues, TensorError> {
        let k = self.k.forward(t, s, ctx)?;
        let k = self.split_heads(t, k)?;
        let kt = t.transpose(k, 2, 3)?;
        let v = self.v.forward(t, s, ctx)?;
        let v = self.split_heads(t, v)?;
        Ok(KeyValues { kt, v })
    }

    /// Returns the projected output `[B, Nq, d]` and the attention weights
    /// `[B, heads, Nq, Nk]`.
    pub fn attend<T: Scalar>(
        &self,
        t: &mut Tape<T>,
        s: &ParamStore<T>,
        query: Var,
        kv: KeyValues,
        causal: bool,
    ) -> Result<(Var, Var), TensorError> {
        let qs = t.shape(query).to_vec();
        let q = self.q.forward(t, s, query)?;
        let q = self.split_heads(t, q)?;
        let ks = t.shape(kv.kt).to_vec();
        if ks[0] != qs[0] {
            return Err(TensorError::Shape { op: "attention", lhs: qs, rhs: ks });
        }
        let scores = t.matmul(q, kv.kt)?;
        let scores = t.scale(scores, 1.0 / ((self.d / self.heads) as f64).sqrt())?;
        let w = if causal { t.causal_softmax(scores)? } else { t.softmax_rows(scores)? };
        let ctx = t.matmul(w, kv.v)?;
        let ctx = t.transpose(ctx, 1, 2)?;
        let ctx = t.reshape(ctx, &[qs[0], qs[1], self.d])?;
        Ok((self.o.forward(t, s, ctx)?, w))
    }

    pub fn forward<T: Scalar>(
        &self,
        t: &mut Tape<T>,
        s: &ParamStore<T>,
        query: Var,
        context: Var,
        causal: bool,
    ) -> Result<Var, TensorError> {
        let kv = self.key_values(t, s, context)?;
        Ok(self.attend(t, s, query, kv, causal)?.0)
    }
}

/// Repeats each row of `[B, d]` `n` times, giving `[B, n, d]`.
pub fn repeat_rows<T: Scalar>(t: &mut Tape<T>, x: Var, n: usize) -> Result<Var, TensorError> {
    let s = t.shape(x).to_vec();
    let idx: Vec<usize> = (0..s[0]).flat_map(|b| std::iter::repeat_n(b, n)).collect();
    let y = t.index_select(x, &idx)?;
    t.reshape(y, &[s[0], n, s[1]])
}

/// Sinusoidal embedding of integer steps, `[len(steps), dim]`.
pub fn sinusoidal_embedding<T: Scalar>(steps: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = vec![T::zero(); steps.len() * dim];
    for (i, &k) in steps.iter().enumerate() {
        for j in 0..half {
            let freq = (-(10000f64.ln()) * j as f64 / half.max(1) as f64).exp();
            let a = k as f64 * freq;
            data[i * dim + j] = T::of(a.sin());
            data[i * dim + half + j] = T::of(a.cos());
        }
    }
    Tensor::new(&[steps.len(), dim], data).expect("sized above")
}
