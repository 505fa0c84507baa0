//! Encoder-decoder Transformer over patch features with an optional
//! relational memory.
//!
//! Three variants share one parameter layout:
//!
//! * `base`: plain post-norm Transformer.
//! * `base+rm`: memory rolled over the target prefix, flattened and appended
//!   to the last decoder state before the output projection.
//! * `base+rm+mcln`: every decoder normalization is memory-conditioned.
//!
//! Parameters common to the variants carry the same names and shapes, and
//! are initialized from the name, so two variants built from one seed agree
//! on everything they share.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{causal_mask, positional_encoding, Attention, Embedding, FeedForward, LayerNorm, Linear};
use crate::mcln::{flatten_memory, Mcln};
use crate::memory::{MemoryParams, MemoryState};
use crate::params::{Initializer, ParamStore};
use crate::tensor::{kernels, Tape, Tensor, Var};
use crate::vocab::{BOS, EOS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationMode {
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "base+rm")]
    BaseRm,
    #[default]
    #[serde(rename = "base+rm+mcln")]
    Full,
}

impl AblationMode {
    pub const ALL: [AblationMode; 3] = [AblationMode::Base, AblationMode::BaseRm, AblationMode::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Base => "base",
            AblationMode::BaseRm => "base+rm",
            AblationMode::Full => "base+rm+mcln",
        }
    }

    pub fn has_memory(self) -> bool {
        self != AblationMode::Base
    }

    pub fn conditions_norms(self) -> bool {
        self == AblationMode::Full
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode {s:?} (expected base, base+rm or base+rm+mcln)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub memory_slots: usize,
    pub feature_dim: usize,
    /// Feed-forward inner width as a multiple of `d_model`.
    pub ffn_mult: usize,
    /// Filled from the dataset vocabulary when zero.
    pub vocab_size: usize,
    pub mode: AblationMode,
    pub memory_init_std: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 8,
            encoder_layers: 3,
            decoder_layers: 3,
            memory_slots: 3,
            feature_dim: 128,
            ffn_mult: 4,
            vocab_size: 0,
            mode: AblationMode::Full,
            memory_init_std: 0.1,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if self.decoder_layers == 0 {
            return bad("at least one decoder layer is required".into());
        }
        if self.mode.has_memory() && self.memory_slots == 0 {
            return bad("memory modes need at least one memory slot".into());
        }
        if self.feature_dim == 0 || self.ffn_mult == 0 {
            return bad("feature_dim and ffn_mult must be positive".into());
        }
        if self.vocab_size < 4 {
            return bad(format!("vocabulary size {} is below the 4 special tokens", self.vocab_size));
        }
        if self.norm_eps.is_nan() || self.norm_eps <= 0.0 || self.memory_init_std.is_nan() || self.memory_init_std < 0.0 {
            return bad("norm_eps must be positive and memory_init_std non-negative".into());
        }
        Ok(())
    }

    pub fn memory_width(&self) -> usize {
        self.memory_slots * self.d_model
    }
}

#[derive(Clone, Copy, Debug)]
enum Norm {
    Plain(LayerNorm),
    Conditional(Mcln),
}

impl Norm {
    fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, x: Var, memory: Option<Var>) -> Result<Var> {
        match self {
            Norm::Plain(ln) => ln.forward(tape, store, x),
            Norm::Conditional(m) => {
                let memory = memory.ok_or_else(|| Error::contract("conditional norm needs memory states"))?;
                m.forward(tape, store, x, memory)
            }
        }
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: Attention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: Attention,
    cross_attn: Attention,
    ffn: FeedForward,
    norms: [Norm; 3],
}

/// Output of a teacher-forced decode.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub logits: Var,
    /// Cross-attention node of each layer; see [`Tape::attention_weights`].
    pub cross_attention: Vec<Var>,
}

/// Encoder output plus per-layer cross-attention keys and values, computed
/// once per source for incremental decoding.
#[derive(Clone, Debug)]
pub struct EncodedSource {
    pub hidden: Tensor,
    cross: Vec<(Tensor, Tensor)>,
}

impl EncodedSource {
    pub fn source_len(&self) -> usize {
        self.hidden.rows()
    }
}

/// Decoder state after consuming a prefix: memory at the frontier and each
/// layer's self-attention keys and values.
#[derive(Clone, Debug, PartialEq)]
pub struct StepState {
    pub memory: Option<MemoryState>,
    keys: Vec<Option<Tensor>>,
    values: Vec<Option<Tensor>>,
    pub position: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    embed: Embedding,
    proj: Linear,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    memory: Option<MemoryParams>,
    output: Linear,
}

impl Model {
    /// Registers freshly initialized parameters for `config` in a new store.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<(Model, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let init = Initializer::new(seed);
        let c = config;
        let d = c.d_model;
        let ffn = d * c.ffn_mult;
        Embedding::register(&mut store, &init, "embed.tokens", c.vocab_size, d)?;
        Linear::register(&mut store, &init, "encoder.proj", c.feature_dim, d, true)?;
        for i in 0..c.encoder_layers {
            let p = format!("encoder.layers.{i}");
            Attention::register(&mut store, &init, &format!("{p}.attn"), d, c.heads)?;
            LayerNorm::register(&mut store, &format!("{p}.norm1"), d, c.norm_eps)?;
            FeedForward::register(&mut store, &init, &format!("{p}.ffn"), d, ffn)?;
            LayerNorm::register(&mut store, &format!("{p}.norm2"), d, c.norm_eps)?;
        }
        for i in 0..c.decoder_layers {
            let p = format!("decoder.layers.{i}");
            Attention::register(&mut store, &init, &format!("{p}.self_attn"), d, c.heads)?;
            Attention::register(&mut store, &init, &format!("{p}.cross_attn"), d, c.heads)?;
            FeedForward::register(&mut store, &init, &format!("{p}.ffn"), d, ffn)?;
            for k in 1..=3 {
                let name = format!("{p}.norm{k}");
                if c.mode.conditions_norms() {
                    Mcln::register(&mut store, &name, d, c.memory_width(), c.norm_eps)?;
                } else {
                    LayerNorm::register(&mut store, &name, d, c.norm_eps)?;
                }
            }
        }
        if c.mode.has_memory() {
            MemoryParams::register(&mut store, &init, "memory", d, c.heads, c.memory_slots, c.memory_init_std)?;
        }
        let out_in = if c.mode == AblationMode::BaseRm { d + c.memory_width() } else { d };
        Linear::register(&mut store, &init, "output", out_in, c.vocab_size, true)?;
        let model = Model::bind(config, &store)?;
        Ok((model, store))
    }

    /// Resolves parameter handles for `config` in an existing store and
    /// checks their shapes.
    pub fn bind(config: &ModelConfig, store: &ParamStore) -> Result<Model> {
        config.validate()?;
        let c = config;
        let eps = c.norm_eps;
        let encoder = (0..c.encoder_layers)
            .map(|i| {
                let p = format!("encoder.layers.{i}");
                Ok(EncoderLayer {
                    attn: Attention::bind(store, &format!("{p}.attn"), c.heads)?,
                    norm1: LayerNorm::bind(store, &format!("{p}.norm1"), eps)?,
                    ffn: FeedForward::bind(store, &format!("{p}.ffn"))?,
                    norm2: LayerNorm::bind(store, &format!("{p}.norm2"), eps)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..c.decoder_layers)
            .map(|i| {
                let p = format!("decoder.layers.{i}");
                let norm = |k: usize| -> Result<Norm> {
                    let name = format!("{p}.norm{k}");
                    Ok(if c.mode.conditions_norms() {
                        Norm::Conditional(Mcln::bind(store, &name, eps)?)
                    } else {
                        Norm::Plain(LayerNorm::bind(store, &name, eps)?)
                    })
                };
                Ok(DecoderLayer {
                    self_attn: Attention::bind(store, &format!("{p}.self_attn"), c.heads)?,
                    cross_attn: Attention::bind(store, &format!("{p}.cross_attn"), c.heads)?,
                    ffn: FeedForward::bind(store, &format!("{p}.ffn"))?,
                    norms: [norm(1)?, norm(2)?, norm(3)?],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let memory = if c.mode.has_memory() {
            Some(MemoryParams::bind(store, "memory", c.heads)?)
        } else {
            None
        };
        let model = Model {
            config: config.clone(),
            embed: Embedding::bind(store, "embed.tokens")?,
            proj: Linear::bind(store, "encoder.proj", true)?,
            encoder,
            decoder,
            memory,
            output: Linear::bind(store, "output", true)?,
        };
        model.check_shapes(store)?;
        Ok(model)
    }

    fn check_shapes(&self, store: &ParamStore) -> Result<()> {
        let c = &self.config;
        let expect = |name: &str, got: &[usize], want: &[usize]| {
            if got == want {
                Ok(())
            } else {
                Err(Error::Checkpoint(format!("parameter {name} has shape {got:?}, config expects {want:?}")))
            }
        };
        expect("embed.tokens", store.get(self.embed.table).shape(), &[c.vocab_size, c.d_model])?;
        expect("encoder.proj.w", store.get(self.proj.w).shape(), &[c.feature_dim, c.d_model])?;
        if let Some(m) = &self.memory {
            expect("memory.initial", store.get(m.initial).shape(), &[c.memory_slots, c.d_model])?;
        }
        let out_in = if c.mode == AblationMode::BaseRm {
            c.d_model + c.memory_width()
        } else {
            c.d_model
        };
        expect("output.w", store.get(self.output.w).shape(), &[out_in, c.vocab_size])
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> AblationMode {
        self.config.mode
    }

    pub fn memory_params(&self) -> Option<&MemoryParams> {
        self.memory.as_ref()
    }

    pub fn embedding(&self) -> &Embedding {
        &self.embed
    }

    /// Per-patch affine map from feature space to model width.
    pub fn project<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, features: Var) -> Result<Var> {
        let (s, f) = tape.value(features).matrix_dims()?;
        if f != self.config.feature_dim || s == 0 {
            return Err(Error::shape("project_features", &[s, f], &[s.max(1), self.config.feature_dim]));
        }
        self.proj.forward(tape, store, features)
    }

    pub fn encode<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, features: Var) -> Result<Var> {
        let mut h = self.project(tape, store, features)?;
        for layer in &self.encoder {
            let (a, _) = layer.attn.forward(tape, store, h, h, None)?;
            let x = tape.add(h, a)?;
            let x = layer.norm1.forward(tape, store, x)?;
            let f = layer.ffn.forward(tape, store, x)?;
            let x2 = tape.add(x, f)?;
            h = layer.norm2.forward(tape, store, x2)?;
        }
        Ok(h)
    }

    /// Memory states for each decoder input position, flattened to
    /// `T × slots·d`. Row `t` is the memory after consuming inputs `0..=t`.
    pub fn memory_rows<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, inputs: &[usize]) -> Result<Option<Var>> {
        let Some(mem) = &self.memory else { return Ok(None) };
        let emb = self.embed.lookup(tape, store, inputs)?;
        let states = mem.rollout(tape, store, emb)?;
        Ok(Some(flatten_memory(tape, &states)?))
    }

    /// Scaled token embeddings plus sinusoidal positions from `start`.
    fn embed_inputs<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, inputs: &[usize], start: usize) -> Result<Var> {
        let e = self.embed.lookup(tape, store, inputs)?;
        let pe = tape.constant(positional_encoding(start, inputs.len(), self.config.d_model));
        tape.add(e, pe)
    }

    #[allow(clippy::too_many_arguments)]
    fn decoder_layer<'p>(
        &self,
        layer: &DecoderLayer,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        x: Var,
        self_kv: (Var, Var),
        mask: Option<Var>,
        cross_kv: (Var, Var),
        memory: Option<Var>,
    ) -> Result<(Var, Var)> {
        let (a, _) = layer.self_attn.attend(tape, store, x, self_kv.0, self_kv.1, mask)?;
        let h = tape.add(x, a)?;
        let h = layer.norms[0].forward(tape, store, h, memory)?;
        let (c, weights) = layer.cross_attn.attend(tape, store, h, cross_kv.0, cross_kv.1, None)?;
        let h2 = tape.add(h, c)?;
        let h2 = layer.norms[1].forward(tape, store, h2, memory)?;
        let f = layer.ffn.forward(tape, store, h2)?;
        let h3 = tape.add(h2, f)?;
        Ok((layer.norms[2].forward(tape, store, h3, memory)?, weights))
    }

    fn project_output<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, h: Var, memory: Option<Var>) -> Result<Var> {
        let h = match (self.config.mode, memory) {
            (AblationMode::BaseRm, Some(m)) => tape.concat_cols(&[h, m])?,
            (AblationMode::BaseRm, None) => return Err(Error::contract("memory states missing for base+rm")),
            _ => h,
        };
        self.output.forward(tape, store, h)
    }

    /// Teacher-forced decode of `inputs` (starting with BOS) against encoder
    /// states `enc`. `memory` holds one flattened memory row per input
    /// position and is required exactly when the mode uses memory.
    pub fn decode<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, enc: Var, inputs: &[usize], memory: Option<Var>) -> Result<Decoded> {
        let t = inputs.len();
        if t == 0 {
            return Err(Error::contract("decode needs at least one input token"));
        }
        match (self.memory.is_some(), memory) {
            (true, None) => return Err(Error::contract("memory states required for this mode")),
            (false, Some(_)) => return Err(Error::contract("this mode takes no memory states")),
            (true, Some(m)) => {
                let (rows, cols) = tape.value(m).matrix_dims()?;
                if rows != t || cols != self.config.memory_width() {
                    return Err(Error::contract(format!(
                        "expected {t} memory rows of width {}, got {rows} × {cols}",
                        self.config.memory_width()
                    )));
                }
            }
            (false, None) => {}
        }
        let mut h = self.embed_inputs(tape, store, inputs, 0)?;
        let mask = if t > 1 { Some(tape.constant(causal_mask(t))) } else { None };
        let mut cross_attention = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let self_kv = layer.self_attn.keys_values(tape, store, h)?;
            let cross_kv = layer.cross_attn.keys_values(tape, store, enc)?;
            let (out, w) = self.decoder_layer(layer, tape, store, h, self_kv, mask, cross_kv, memory)?;
            h = out;
            cross_attention.push(w);
        }
        let logits = self.project_output(tape, store, h, memory)?;
        Ok(Decoded { logits, cross_attention })
    }

    /// Encode, roll the memory over `inputs`, and decode.
    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, features: Var, inputs: &[usize]) -> Result<Decoded> {
        let enc = self.encode(tape, store, features)?;
        let memory = self.memory_rows(tape, store, inputs)?;
        self.decode(tape, store, enc, inputs, memory)
    }

    /// Mean negative log-likelihood of `report` followed by EOS.
    pub fn nll<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, features: Var, report: &[usize]) -> Result<Var> {
        let (inputs, targets) = teacher_pair(report);
        let out = self.forward(tape, store, features, &inputs)?;
        let targets: Vec<Option<usize>> = targets.into_iter().map(Some).collect();
        tape.cross_entropy(out.logits, &targets)
    }

    /// Per-step log-probabilities of `tokens` computed by one teacher-forced
    /// pass.
    pub fn sequence_log_probs(&self, store: &ParamStore, features: &Tensor, tokens: &[usize]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let inputs: Vec<usize> = std::iter::once(BOS).chain(tokens[..tokens.len() - 1].iter().copied()).collect();
        let mut tape = Tape::new();
        let x = tape.constant_ref(features);
        let out = self.forward(&mut tape, store, x, &inputs)?;
        let logits = tape.value(out.logits);
        let v = logits.cols();
        let logp = kernels::log_softmax_rows(logits.data(), v);
        tokens
            .iter()
            .enumerate()
            .map(|(i, &tok)| {
                if tok >= v {
                    Err(Error::Vocab(format!("token id {tok} >= vocabulary size {v}")))
                } else {
                    Ok(logp[i * v + tok])
                }
            })
            .collect()
    }

    /// Cross-attention weights `[layer][head]` (each `T × S`) for decoding
    /// `inputs` against `features`.
    pub fn attention_weights(&self, store: &ParamStore, features: &Tensor, inputs: &[usize]) -> Result<Vec<Vec<Tensor>>> {
        let mut tape = Tape::new();
        let x = tape.constant_ref(features);
        let out = self.forward(&mut tape, store, x, inputs)?;
        out.cross_attention
            .iter()
            .map(|&node| tape.attention_weights(node).ok_or_else(|| Error::contract("not an attention node")))
            .collect()
    }

    /// Encoder output and cross-attention keys/values for incremental
    /// decoding.
    pub fn encode_source(&self, store: &ParamStore, features: &Tensor) -> Result<EncodedSource> {
        let mut tape = Tape::new();
        let x = tape.constant_ref(features);
        let enc = self.encode(&mut tape, store, x)?;
        let mut cross = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let (k, v) = layer.cross_attn.keys_values(&mut tape, store, enc)?;
            cross.push((tape.value(k).clone(), tape.value(v).clone()));
        }
        Ok(EncodedSource {
            hidden: tape.value(enc).clone(),
            cross,
        })
    }

    pub fn start_state(&self, store: &ParamStore) -> StepState {
        StepState {
            memory: self.memory.as_ref().map(|m| m.initial_state(store)),
            keys: vec![None; self.decoder.len()],
            values: vec![None; self.decoder.len()],
            position: 0,
        }
    }

    /// Consumes `token` at the state's position and returns the
    /// log-probabilities of the next token together with the advanced state.
    pub fn step(&self, store: &ParamStore, src: &EncodedSource, state: &StepState, token: usize) -> Result<(Vec<f64>, StepState)> {
        let vocab = self.config.vocab_size;
        if token >= vocab {
            return Err(Error::Vocab(format!("token id {token} >= vocabulary size {vocab}")));
        }
        if src.cross.len() != self.decoder.len() {
            return Err(Error::contract("encoded source does not match the decoder depth"));
        }
        let mut tape = Tape::new();
        let mut next = StepState {
            memory: None,
            keys: Vec::with_capacity(self.decoder.len()),
            values: Vec::with_capacity(self.decoder.len()),
            position: state.position + 1,
        };
        let memory_row = match (&self.memory, &state.memory) {
            (Some(params), Some(prev)) => {
                let m = tape.constant_ref(&prev.matrix);
                let y = self.embed.lookup(&mut tape, store, &[token])?;
                let updated = params.step(&mut tape, store, m, y)?;
                next.memory = Some(MemoryState {
                    matrix: tape.value(updated).clone(),
                    step: prev.step + 1,
                });
                Some(flatten_memory(&mut tape, &[updated])?)
            }
            (None, None) => None,
            _ => return Err(Error::contract("decoder state does not match the model mode")),
        };
        let mut h = self.embed_inputs(&mut tape, store, &[token], state.position)?;
        for (i, layer) in self.decoder.iter().enumerate() {
            let (k_new, v_new) = layer.self_attn.keys_values(&mut tape, store, h)?;
            let (k, v) = match (&state.keys[i], &state.values[i]) {
                (Some(k0), Some(v0)) => {
                    let k0 = tape.constant_ref(k0);
                    let v0 = tape.constant_ref(v0);
                    (tape.concat_rows(&[k0, k_new])?, tape.concat_rows(&[v0, v_new])?)
                }
                _ => (k_new, v_new),
            };
            next.keys.push(Some(tape.value(k).clone()));
            next.values.push(Some(tape.value(v).clone()));
            let ck = tape.constant_ref(&src.cross[i].0);
            let cv = tape.constant_ref(&src.cross[i].1);
            let (out, _) = self.decoder_layer(layer, &mut tape, store, h, (k, v), None, (ck, cv), memory_row)?;
            h = out;
        }
        let logits = self.project_output(&mut tape, store, h, memory_row)?;
        let logp = kernels::log_softmax_rows(tape.value(logits).data(), vocab);
        Ok((logp, next))
    }
}

/// Decoder inputs `[BOS, y_1 .. y_n]` and targets `[y_1 .. y_n, EOS]` for a
/// report `y`.
pub fn teacher_pair(report: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let inputs = std::iter::once(BOS).chain(report.iter().copied()).collect();
    let targets = report.iter().copied().chain(std::iter::once(EOS)).collect();
    (inputs, targets)
}
