//! Building blocks shared by the encoder, decoder and relational memory.

use crate::error::Result;
use crate::params::{Initializer, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Additive mask value for disallowed attention positions. Finite, and large
/// enough that `exp` underflows to exactly zero after max subtraction.
pub const MASKED: f64 = -1e30;

pub(crate) fn register(store: &mut ParamStore, name: String, value: Tensor) -> Result<ParamId> {
    store.insert(name, value)
}

/// Affine map `x · W + b` with `W` stored as `in × out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn register(store: &mut ParamStore, init: &Initializer, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Self> {
        let wname = format!("{prefix}.w");
        let w = register(store, wname.clone(), init.xavier(&wname, fan_in, fan_out))?;
        let b = if bias {
            Some(register(store, format!("{prefix}.b"), Tensor::zeros(&[fan_out]))?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    /// Registers a linear map whose weight and bias start at zero.
    pub fn register_zero(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let w = register(store, format!("{prefix}.w"), Tensor::zeros(&[fan_in, fan_out]))?;
        let b = register(store, format!("{prefix}.b"), Tensor::zeros(&[fan_out]))?;
        Ok(Self { w, b: Some(b) })
    }

    pub fn bind(store: &ParamStore, prefix: &str, bias: bool) -> Result<Self> {
        let w = store.require(&format!("{prefix}.w"))?;
        let b = if bias { Some(store.require(&format!("{prefix}.b"))?) } else { None };
        Ok(Self { w, b })
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.get(self.w).shape()[0]
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.get(self.w).shape()[1]
    }

    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Token embedding table `V × d`, scaled by `sqrt(d)` on lookup.
#[derive(Clone, Copy, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub scale: f64,
}

impl Embedding {
    pub fn register(store: &mut ParamStore, init: &Initializer, name: &str, vocab: usize, d: usize) -> Result<Self> {
        let table = register(store, name.to_string(), init.normal(name, &[vocab, d], 1.0 / (d as f64).sqrt()))?;
        Ok(Self {
            table,
            scale: (d as f64).sqrt(),
        })
    }

    pub fn bind(store: &ParamStore, name: &str) -> Result<Self> {
        let table = store.require(name)?;
        let d = store.get(table).cols();
        Ok(Self {
            table,
            scale: (d as f64).sqrt(),
        })
    }

    pub fn vocab_size(&self, store: &ParamStore) -> usize {
        store.get(self.table).rows()
    }

    pub fn lookup<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, ids: &[usize]) -> Result<Var> {
        let table = tape.param(store, self.table);
        let rows = tape.gather_rows(table, ids)?;
        Ok(tape.scale(rows, self.scale))
    }
}

/// Two affine layers with a relu between them.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn register(store: &mut ParamStore, init: &Initializer, prefix: &str, d: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::register(store, init, &format!("{prefix}.fc1"), d, hidden, true)?,
            fc2: Linear::register(store, init, &format!("{prefix}.fc2"), hidden, d, true)?,
        })
    }

    pub fn bind(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            fc1: Linear::bind(store, &format!("{prefix}.fc1"), true)?,
            fc2: Linear::bind(store, &format!("{prefix}.fc2"), true)?,
        })
    }

    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.relu(h);
        self.fc2.forward(tape, store, h)
    }
}

/// Layer normalization with learned scale and shift.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gamma: register(store, format!("{prefix}.gamma"), Tensor::ones(&[d]))?,
            beta: register(store, format!("{prefix}.beta"), Tensor::zeros(&[d]))?,
            eps,
        })
    }

    pub fn bind(store: &ParamStore, prefix: &str, eps: f64) -> Result<Self> {
        Ok(Self {
            gamma: store.require(&format!("{prefix}.gamma"))?,
            beta: store.require(&format!("{prefix}.beta"))?,
            eps,
        })
    }

    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, x: Var) -> Result<Var> {
        let n = tape.standardize_rows(x, self.eps)?;
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let y = tape.mul_row(n, g)?;
        tape.add_row(y, b)
    }
}

/// Scaled dot-product attention split over `heads` column blocks of already
/// projected queries, keys and values. Returns the concatenated head outputs;
/// the weights can be read back with [`Tape::attention_weights`].
pub fn multi_head<'p>(tape: &mut Tape<'p>, q: Var, k: Var, v: Var, heads: usize, mask: Option<Var>) -> Result<Var> {
    tape.attention(q, k, v, heads, mask)
}

/// Multi-head attention with query/key/value/output projections.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn register(store: &mut ParamStore, init: &Initializer, prefix: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::register(store, init, &format!("{prefix}.q"), d, d, true)?,
            k: Linear::register(store, init, &format!("{prefix}.k"), d, d, true)?,
            v: Linear::register(store, init, &format!("{prefix}.v"), d, d, true)?,
            o: Linear::register(store, init, &format!("{prefix}.o"), d, d, true)?,
            heads,
        })
    }

    pub fn bind(store: &ParamStore, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::bind(store, &format!("{prefix}.q"), true)?,
            k: Linear::bind(store, &format!("{prefix}.k"), true)?,
            v: Linear::bind(store, &format!("{prefix}.v"), true)?,
            o: Linear::bind(store, &format!("{prefix}.o"), true)?,
            heads,
        })
    }

    pub fn keys_values<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, x: Var) -> Result<(Var, Var)> {
        Ok((self.k.forward(tape, store, x)?, self.v.forward(tape, store, x)?))
    }

    /// Attends from `query` rows to projected `keys`/`values`. Returns the
    /// projected output and the attention node holding the weights.
    pub fn attend<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, query: Var, keys: Var, values: Var, mask: Option<Var>) -> Result<(Var, Var)> {
        let q = self.q.forward(tape, store, query)?;
        let ctx = multi_head(tape, q, keys, values, self.heads, mask)?;
        Ok((self.o.forward(tape, store, ctx)?, ctx))
    }

    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, query: Var, source: Var, mask: Option<Var>) -> Result<(Var, Var)> {
        let (k, v) = self.keys_values(tape, store, source)?;
        self.attend(tape, store, query, k, v, mask)
    }
}

/// Additive causal mask: row `i` may see columns `0..=i`.
pub fn causal_mask(t: usize) -> Tensor {
    let mut m = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in i + 1..t {
            m.data_mut()[i * t + j] = MASKED;
        }
    }
    m
}

/// Sinusoidal position encodings for positions `start..start + len`.
pub fn positional_encoding(start: usize, len: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * d);
    for pos in start..start + len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(&[len, d], data).expect("shape matches")
}
