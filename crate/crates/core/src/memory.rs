//! Relational memory: a `slots × d` matrix carried across decoding steps.
//!
//! At step `t` the previous memory `M_{t-1}` queries the row-wise
//! concatenation `[M_{t-1}; y_{t-1}]` with multi-head attention, the result
//! passes through a residual MLP, and forget/input gates blend the old memory
//! with `tanh` of the candidate:
//!
//! ```text
//! Z   = MultiHead(Q = M W_q, K = [M; y] W_k, V = [M; y] W_v)
//! M~  = mlp(Z + M) + Z + M
//! G_f = Y W_f + tanh(M) U_f          (Y = y duplicated over the slots)
//! G_i = Y W_i + tanh(M) U_i
//! M_t = sigmoid(G_f) * M + sigmoid(G_i) * tanh(M~)
//! ```
//!
//! Query/key/value projections are single `d × d` maps split into heads.

use crate::error::{Error, Result};
use crate::layers::{multi_head, Embedding, FeedForward, Linear};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState {
    pub matrix: Tensor,
    /// Number of updates applied since the initial memory.
    pub step: usize,
}

impl MemoryState {
    pub fn slots(&self) -> usize {
        self.matrix.rows()
    }

    pub fn width(&self) -> usize {
        self.matrix.cols()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MemoryParams {
    pub initial: ParamId,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub mlp: FeedForward,
    pub forget_w: Linear,
    pub forget_u: Linear,
    pub input_w: Linear,
    pub input_u: Linear,
    pub heads: usize,
}

/// Vars produced by one gate application.
#[derive(Clone, Copy, Debug)]
pub struct GateOutput {
    pub memory: Var,
    pub forget: Var,
    pub input: Var,
}

impl MemoryParams {
    pub fn register(store: &mut ParamStore, init: &Initializer, prefix: &str, d: usize, heads: usize, slots: usize, init_std: f64) -> Result<Self> {
        if slots == 0 {
            return Err(Error::Config("memory needs at least one slot".into()));
        }
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("memory width {d} not divisible by {heads} heads")));
        }
        let name = format!("{prefix}.initial");
        let initial = store.insert(name.clone(), init.normal(&name, &[slots, d], init_std))?;
        Ok(Self {
            initial,
            query: Linear::register(store, init, &format!("{prefix}.attn.q"), d, d, true)?,
            key: Linear::register(store, init, &format!("{prefix}.attn.k"), d, d, true)?,
            value: Linear::register(store, init, &format!("{prefix}.attn.v"), d, d, true)?,
            mlp: FeedForward::register(store, init, &format!("{prefix}.mlp"), d, d)?,
            forget_w: Linear::register(store, init, &format!("{prefix}.gate.forget_w"), d, d, true)?,
            forget_u: Linear::register(store, init, &format!("{prefix}.gate.forget_u"), d, d, false)?,
            input_w: Linear::register(store, init, &format!("{prefix}.gate.input_w"), d, d, true)?,
            input_u: Linear::register(store, init, &format!("{prefix}.gate.input_u"), d, d, false)?,
            heads,
        })
    }

    pub fn bind(store: &ParamStore, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            initial: store.require(&format!("{prefix}.initial"))?,
            query: Linear::bind(store, &format!("{prefix}.attn.q"), true)?,
            key: Linear::bind(store, &format!("{prefix}.attn.k"), true)?,
            value: Linear::bind(store, &format!("{prefix}.attn.v"), true)?,
            mlp: FeedForward::bind(store, &format!("{prefix}.mlp"))?,
            forget_w: Linear::bind(store, &format!("{prefix}.gate.forget_w"), true)?,
            forget_u: Linear::bind(store, &format!("{prefix}.gate.forget_u"), false)?,
            input_w: Linear::bind(store, &format!("{prefix}.gate.input_w"), true)?,
            input_u: Linear::bind(store, &format!("{prefix}.gate.input_u"), false)?,
            heads,
        })
    }

    pub fn slots(&self, store: &ParamStore) -> usize {
        store.get(self.initial).rows()
    }

    pub fn width(&self, store: &ParamStore) -> usize {
        store.get(self.initial).cols()
    }

    pub fn initial_state(&self, store: &ParamStore) -> MemoryState {
        MemoryState {
            matrix: store.get(self.initial).clone(),
            step: 0,
        }
    }

    fn check(&self, tape: &Tape<'_>, store: &ParamStore, memory: Var, y: Var) -> Result<()> {
        let want = [self.slots(store), self.width(store)];
        let (r, c) = tape.value(memory).matrix_dims()?;
        if [r, c] != want {
            return Err(Error::shape("memory", &[r, c], &want));
        }
        let (yr, yc) = tape.value(y).matrix_dims()?;
        if yr != 1 || yc != want[1] {
            return Err(Error::shape("memory input embedding", &[yr, yc], &[1, want[1]]));
        }
        Ok(())
    }

    /// Multi-head attention with the memory as query and `[memory; y]` as
    /// keys and values. Output is `slots × d`.
    pub fn attend<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, memory: Var, y: Var) -> Result<Var> {
        self.check(tape, store, memory, y)?;
        let joined = tape.concat_rows(&[memory, y])?;
        let q = self.query.forward(tape, store, memory)?;
        let k = self.key.forward(tape, store, joined)?;
        let v = self.value.forward(tape, store, joined)?;
        let z = multi_head(tape, q, k, v, self.heads, None)?;
        Ok(z)
    }

    /// `mlp(z + memory) + z + memory`.
    pub fn residual<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, z: Var, memory: Var) -> Result<Var> {
        let sum = tape.add(z, memory)?;
        let h = self.mlp.forward(tape, store, sum)?;
        tape.add(h, sum)
    }

    pub fn gate<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, candidate: Var, memory: Var, y: Var) -> Result<GateOutput> {
        self.check(tape, store, memory, y)?;
        let tm = tape.tanh(memory);
        let gf_y = self.forget_w.forward(tape, store, y)?;
        let gf_m = self.forget_u.forward(tape, store, tm)?;
        let gf = tape.add_row(gf_m, gf_y)?;
        let gi_y = self.input_w.forward(tape, store, y)?;
        let gi_m = self.input_u.forward(tape, store, tm)?;
        let gi = tape.add_row(gi_m, gi_y)?;
        let forget = tape.sigmoid(gf);
        let input = tape.sigmoid(gi);
        let kept = tape.mul(forget, memory)?;
        let tc = tape.tanh(candidate);
        let added = tape.mul(input, tc)?;
        let next = tape.add(kept, added)?;
        Ok(GateOutput { memory: next, forget, input })
    }

    /// One full update `M_{t-1}, y_{t-1} -> M_t`.
    pub fn step<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, memory: Var, y: Var) -> Result<Var> {
        let z = self.attend(tape, store, memory, y)?;
        let candidate = self.residual(tape, store, z, memory)?;
        Ok(self.gate(tape, store, candidate, memory, y)?.memory)
    }

    /// Rolls the memory over the rows of `inputs` (`T × d`, the embeddings
    /// of `y_0 = BOS, y_1, ..., y_{T-1}`), returning `M_1 ..= M_T`.
    pub fn rollout<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, inputs: Var) -> Result<Vec<Var>> {
        let steps = tape.value(inputs).rows();
        let mut memory = tape.param(store, self.initial);
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let y = tape.slice_rows(inputs, t, 1)?;
            memory = self.step(tape, store, memory, y)?;
            states.push(memory);
        }
        Ok(states)
    }

    /// Applies one update to a concrete state.
    pub fn advance(&self, store: &ParamStore, state: &MemoryState, y: &Tensor) -> Result<MemoryState> {
        let mut tape = Tape::new();
        let m = tape.constant(state.matrix.clone());
        let y = tape.constant(y.clone());
        let next = self.step(&mut tape, store, m, y)?;
        Ok(MemoryState {
            matrix: tape.value(next).clone(),
            step: state.step + 1,
        })
    }
}

/// Memory states `M_1 ..= M_{|prefix|+1}` obtained by feeding `bos` followed
/// by `prefix`. `M_t` depends only on the tokens before position `t`.
pub fn memory_rollout(params: &MemoryParams, embedding: &Embedding, store: &ParamStore, bos: usize, prefix: &[usize]) -> Result<Vec<MemoryState>> {
    let vocab = embedding.vocab_size(store);
    if vocab == 0 {
        return Err(Error::Vocab("empty vocabulary".into()));
    }
    let ids: Vec<usize> = std::iter::once(bos).chain(prefix.iter().copied()).collect();
    if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(Error::Vocab(format!("unknown token id {bad} (vocabulary size {vocab})")));
    }
    let mut tape = Tape::new();
    let inputs = embedding.lookup(&mut tape, store, &ids)?;
    let states = params.rollout(&mut tape, store, inputs)?;
    Ok(states
        .into_iter()
        .enumerate()
        .map(|(i, v)| MemoryState {
            matrix: tape.value(v).clone(),
            step: i + 1,
        })
        .collect())
}
