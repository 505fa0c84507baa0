//! Greedy and beam-search decoding with per-hypothesis decoder state.
//!
//! Scores are sums of per-step log-probabilities under the full vocabulary
//! softmax; `PAD`, `BOS` and `UNK` are never emitted. A hypothesis finishes
//! when it emits `EOS` or reaches `max_len` tokens (EOS included in the
//! count). Ranking is by score, then shorter length, then lexicographic
//! token order.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncodedSource, Model, StepState};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::vocab::{BOS, EOS, PAD, UNK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam: usize,
    pub max_len: usize,
    /// Rank by mean instead of total log-probability. Disables early
    /// stopping.
    pub length_normalize: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 3,
            max_len: 100,
            length_normalize: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Hypothesis {
    /// Emitted tokens, ending in `EOS` when the hypothesis finished on it.
    pub tokens: Vec<usize>,
    /// Sum of `step_scores`.
    pub score: f64,
    pub step_scores: Vec<f64>,
    pub finished: bool,
    state: Option<StepState>,
}

impl Hypothesis {
    /// Tokens with a trailing `EOS` removed.
    pub fn content(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    /// Decoder state at the frontier; dropped once the hypothesis finishes.
    pub fn state(&self) -> Option<&StepState> {
        self.state.as_ref()
    }

    fn rank_score(&self, length_normalize: bool) -> f64 {
        if length_normalize && !self.tokens.is_empty() {
            self.score / self.tokens.len() as f64
        } else {
            self.score
        }
    }
}

fn emittable(token: usize) -> bool {
    !matches!(token, PAD | BOS | UNK)
}

/// Best-first order: higher score, then shorter, then lexicographically
/// smaller tokens.
fn rank(a_score: f64, a_tokens: &[usize], b_score: f64, b_tokens: &[usize]) -> Ordering {
    b_score
        .total_cmp(&a_score)
        .then(a_tokens.len().cmp(&b_tokens.len()))
        .then_with(|| a_tokens.cmp(b_tokens))
}

/// Argmax decoding. Equal log-probabilities go to the smaller token id.
pub fn greedy_decode(model: &Model, store: &ParamStore, src: &EncodedSource, max_len: usize) -> Result<Hypothesis> {
    if max_len == 0 {
        return Err(Error::contract("max_len must be at least 1"));
    }
    let mut state = model.start_state(store);
    let mut last = BOS;
    let mut tokens = Vec::new();
    let mut step_scores = Vec::new();
    while tokens.len() < max_len {
        let (logp, next) = model.step(store, src, &state, last)?;
        let (tok, lp) = logp
            .iter()
            .enumerate()
            .filter(|(t, _)| emittable(*t))
            .fold((usize::MAX, f64::NEG_INFINITY), |best, (t, &lp)| if lp > best.1 { (t, lp) } else { best });
        if tok == usize::MAX {
            return Err(Error::NonFinite("next-token distribution".into()));
        }
        tokens.push(tok);
        step_scores.push(lp);
        state = next;
        last = tok;
        if tok == EOS {
            break;
        }
    }
    Ok(Hypothesis {
        score: step_scores.iter().sum(),
        finished: true,
        tokens,
        step_scores,
        state: None,
    })
}

/// Beam search returning finished hypotheses, best first.
///
/// Without length normalization the search stops as soon as the best
/// finished score is at least the best live score; since scores never
/// increase, the top-ranked result is then final.
pub fn beam_search(model: &Model, store: &ParamStore, src: &EncodedSource, cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    if cfg.beam == 0 {
        return Err(Error::contract("beam width must be at least 1"));
    }
    if cfg.max_len == 0 {
        return Err(Error::contract("max_len must be at least 1"));
    }
    let mut alive = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        step_scores: Vec::new(),
        finished: false,
        state: Some(model.start_state(store)),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_len {
        let mut expanded = Vec::with_capacity(alive.len());
        let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
        for (h, hyp) in alive.iter().enumerate() {
            let last = hyp.tokens.last().copied().unwrap_or(BOS);
            let state = hyp.state.as_ref().expect("live hypotheses keep their state");
            let (logp, next) = model.step(store, src, state, last)?;
            for (tok, &lp) in logp.iter().enumerate() {
                if emittable(tok) {
                    candidates.push((h, tok, lp));
                }
            }
            expanded.push(next);
        }
        let key = |&(h, _, lp): &(usize, usize, f64)| {
            let hyp = &alive[h];
            let score = hyp.score + lp;
            let len = hyp.tokens.len() + 1;
            if cfg.length_normalize {
                score / len as f64
            } else {
                score
            }
        };
        candidates.sort_by(|a, b| {
            key(b).total_cmp(&key(a)).then_with(|| {
                let ta = alive[a.0].tokens.iter().chain(std::iter::once(&a.1));
                let tb = alive[b.0].tokens.iter().chain(std::iter::once(&b.1));
                // EOS before other tokens at equal score, then lexicographic
                (a.1 != EOS).cmp(&(b.1 != EOS)).then_with(|| ta.cmp(tb))
            })
        });
        let mut next_alive = Vec::with_capacity(cfg.beam);
        for &(h, tok, lp) in candidates.iter().take(cfg.beam) {
            let parent = &alive[h];
            let mut tokens = parent.tokens.clone();
            tokens.push(tok);
            let mut step_scores = parent.step_scores.clone();
            step_scores.push(lp);
            let done = tok == EOS || tokens.len() == cfg.max_len;
            let hyp = Hypothesis {
                score: parent.score + lp,
                tokens,
                step_scores,
                finished: done,
                state: if done { None } else { Some(expanded[h].clone()) },
            };
            if done {
                finished.push(hyp);
            } else {
                next_alive.push(hyp);
            }
        }
        alive = next_alive;
        if alive.is_empty() {
            break;
        }
        if !cfg.length_normalize {
            let best_done = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            let best_alive = alive.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if best_done >= best_alive {
                break;
            }
        }
    }
    finished.sort_by(|a, b| rank(a.rank_score(cfg.length_normalize), &a.tokens, b.rank_score(cfg.length_normalize), &b.tokens));
    finished.truncate(cfg.beam);
    Ok(finished)
}

/// Encodes `features` and returns the best hypothesis. Beam width 1 uses
/// greedy decoding.
pub fn generate(model: &Model, store: &ParamStore, features: &Tensor, cfg: &DecodeConfig) -> Result<Hypothesis> {
    let src = model.encode_source(store, features)?;
    if cfg.beam == 1 && !cfg.length_normalize {
        return greedy_decode(model, store, &src, cfg.max_len);
    }
    beam_search(model, store, &src, cfg)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::contract("beam search produced no hypothesis"))
}
