//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p mdt-cli --test acceptance -- 4 5`.

use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use mdt_core::experiments::{AblationSummary, AttentionExport};
use mdt_core::generation::{beam_search, greedy_decode, DecodeConfig};
use mdt_core::layers::{causal_mask, positional_encoding, Attention, Embedding, FeedForward, LayerNorm, Linear};
use mdt_core::memory::{memory_rollout, MemoryParams};
use mdt_core::metrics::{avg_delta, bleu, clipped_counts, label_efficacy, meteor_pair, rouge_l_pair, LengthHistogram, NlgScores};
use mdt_core::model::{teacher_pair, AblationMode, Model, ModelConfig};
use mdt_core::tensor::{grad_check, grad_check_params};
use mdt_core::train::read_generations;
use mdt_core::vocab::{BOS, EOS};
use mdt_core::{Initializer, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (usize, &'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn core<T>(r: mdt_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| format!("error[{}]: {e}", e.category()))
}

fn random(seed: u64, tag: &str, shape: &[usize]) -> Tensor {
    Initializer::new(seed).normal(tag, shape, 1.0)
}

type Op = Box<dyn Fn(&mut Tape<'_>, &[Var]) -> mdt_core::Result<Var>>;

type Shapes = fn(usize, usize) -> Vec<Vec<usize>>;

/// Each op with the shapes of its inputs for a given `(rows, cols)`.
fn op_table() -> Vec<(&'static str, Shapes, Op)> {
    fn one(r: usize, c: usize) -> Vec<Vec<usize>> {
        vec![vec![r, c]]
    }
    fn two(r: usize, c: usize) -> Vec<Vec<usize>> {
        vec![vec![r, c], vec![r, c]]
    }
    fn row(r: usize, c: usize) -> Vec<Vec<usize>> {
        vec![vec![r, c], vec![1, c]]
    }
    fn col(r: usize, c: usize) -> Vec<Vec<usize>> {
        vec![vec![r, c], vec![r, 1]]
    }
    vec![
        ("tanh", one, Box::new(|t, v| Ok(t.tanh(v[0])))),
        ("sigmoid", one, Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        ("relu", one, Box::new(|t, v| Ok(t.relu(v[0])))),
        ("ln", one, Box::new(|t, v| Ok(t.ln(v[0])))),
        ("scale", one, Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        ("add_scalar", one, Box::new(|t, v| Ok(t.add_scalar(v[0], 0.3)))),
        ("neg", one, Box::new(|t, v| Ok(t.neg(v[0])))),
        ("transpose", one, Box::new(|t, v| t.transpose(v[0]))),
        ("sum", one, Box::new(|t, v| Ok(t.sum(v[0])))),
        ("mean", one, Box::new(|t, v| Ok(t.mean(v[0])))),
        ("add", two, Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", two, Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", two, Box::new(|t, v| t.mul(v[0], v[1]))),
        ("add_row", row, Box::new(|t, v| t.add_row(v[0], v[1]))),
        ("mul_row", row, Box::new(|t, v| t.mul_row(v[0], v[1]))),
        ("sub_col", col, Box::new(|t, v| t.sub_col(v[0], v[1]))),
        ("div_col", col, Box::new(|t, v| t.div_col(v[0], v[1]))),
        ("matmul", |r, c| vec![vec![r, c], vec![c, r + 1]], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("matmul_t", |r, c| vec![vec![r, c], vec![r + 2, c]], Box::new(|t, v| t.matmul_t(v[0], v[1]))),
        ("concat_rows", |r, c| vec![vec![r, c], vec![2, c]], Box::new(|t, v| t.concat_rows(v))),
        ("concat_cols", |r, c| vec![vec![r, c], vec![r, 3]], Box::new(|t, v| t.concat_cols(v))),
        (
            "slice_rows",
            one,
            Box::new(|t, v| {
                let r = t.shape(v[0])[0];
                t.slice_rows(v[0], r / 2, r - r / 2)
            }),
        ),
        (
            "slice_cols",
            one,
            Box::new(|t, v| {
                let c = t.shape(v[0])[1];
                t.slice_cols(v[0], c / 2, c - c / 2)
            }),
        ),
        (
            "reshape",
            one,
            Box::new(|t, v| {
                let n = t.value(v[0]).len();
                t.reshape(v[0], &[1, n])
            }),
        ),
        (
            "gather_rows",
            one,
            Box::new(|t, v| {
                let r = t.shape(v[0])[0];
                let ids: Vec<usize> = (0..2 * r + 1).map(|i| (i * 7 + 1) % r).collect();
                t.gather_rows(v[0], &ids)
            }),
        ),
        (
            "pick",
            one,
            Box::new(|t, v| {
                let (r, c) = (t.shape(v[0])[0], t.shape(v[0])[1]);
                let at: Vec<(usize, usize)> = (0..r + 2).map(|i| (i % r, (i * 3) % c)).collect();
                t.pick(v[0], &at)
            }),
        ),
        ("softmax_rows", one, Box::new(|t, v| t.softmax_rows(v[0]))),
        ("log_softmax_rows", one, Box::new(|t, v| t.log_softmax_rows(v[0]))),
        ("row_mean", one, Box::new(|t, v| t.row_mean(v[0]))),
        ("row_std", one, Box::new(|t, v| t.row_std(v[0]))),
        ("standardize_rows", one, Box::new(|t, v| t.standardize_rows(v[0], 1e-6))),
        (
            "attention",
            |r, c| vec![vec![r, 2 * c], vec![r + 1, 2 * c], vec![r + 1, 2 * c]],
            Box::new(|t, v| t.attention(v[0], v[1], v[2], 2, None)),
        ),
        (
            "masked_attention",
            |r, c| vec![vec![r, 2 * c]; 3],
            Box::new(|t, v| {
                let m = t.constant(causal_mask(t.shape(v[0])[0]));
                t.attention(v[0], v[1], v[2], 2, Some(m))
            }),
        ),
    ]
}

fn gradient_suite() -> Outcome {
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut checks = 0;
    for (name, shapes, op) in op_table() {
        for (k, (r, c)) in [(1, 5), (3, 4), (6, 7)].into_iter().enumerate() {
            if (name == "row_std" || name == "standardize_rows") && c < 2 {
                continue;
            }
            let seed = k as u64;
            let mut inputs: Vec<Tensor> = shapes(r, c).iter().enumerate().map(|(i, s)| random(seed, &format!("{name}.{i}"), s)).collect();
            match name {
                "ln" => inputs[0].data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.5),
                "div_col" => inputs[1].data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.5),
                "relu" => inputs[0].data_mut().iter_mut().for_each(|v| *v += 0.05f64.copysign(*v)),
                _ => {}
            }
            let err = core(grad_check(
                |t, v| {
                    let y = op(t, v)?;
                    let w = t.constant(random(seed ^ 0xabcd, "contract", t.shape(y)));
                    let p = t.mul(y, w)?;
                    Ok(t.sum(p))
                },
                &inputs,
                1e-6,
            ))?;
            ensure!(err <= TOL, "{name} at {r}x{c}: relative error {err:.2e}");
            worst = worst.max(err);
            checks += 1;
        }
    }
    for (r, c) in [(1, 5), (4, 6)] {
        let logits = random(r as u64, "ce", &[r, c]);
        let targets: Vec<Option<usize>> = (0..r).map(|i| (i % 3 != 2).then_some((i * 5) % c)).collect();
        let err = core(grad_check(|t, v| t.cross_entropy(v[0], &targets), &[logits], 1e-6))?;
        ensure!(err <= TOL, "cross_entropy at {r}x{c}: relative error {err:.2e}");
        worst = worst.max(err);
        checks += 1;
    }
    for mode in AblationMode::ALL {
        let cfg = ModelConfig {
            d_model: 8,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            memory_slots: 2,
            feature_dim: 5,
            vocab_size: 6,
            mode,
            ..ModelConfig::default()
        };
        let (model, mut store) = core(Model::init(&cfg, 21))?;
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            if store.name(id).contains("cond_") {
                let shape = store.get(id).shape().to_vec();
                *store.get_mut(id) = Initializer::new(4).normal(store.name(id), &shape, 0.3);
            }
        }
        let features = random(9, "features", &[3, 5]);
        let report = [4usize, 5];
        let err = core(grad_check_params(
            |tape, store| {
                let x = tape.constant(features.clone());
                model.nll(tape, store, x, &report)
            },
            &mut store,
            &ids,
            1e-4,
            1,
        ))?;
        ensure!(err <= TOL, "end-to-end loss ({mode}): relative error {err:.2e}");
        worst = worst.max(err);
        checks += 1;
    }
    let elapsed = start.elapsed();
    ensure!(elapsed <= Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!("{checks} checks, worst relative error {worst:.2e}, {:.1}s", elapsed.as_secs_f64()))
}

/// Plain post-norm Transformer over the same parameters, with ordinary
/// layer norms.
fn reference_logits(cfg: &ModelConfig, store: &ParamStore, feats: &Tensor, inputs: &[usize]) -> mdt_core::Result<Tensor> {
    let mut tape = Tape::new();
    let eps = cfg.norm_eps;
    let x = tape.constant(feats.clone());
    let mut h = Linear::bind(store, "encoder.proj", true)?.forward(&mut tape, store, x)?;
    for i in 0..cfg.encoder_layers {
        let p = format!("encoder.layers.{i}");
        let (a, _) = Attention::bind(store, &format!("{p}.attn"), cfg.heads)?.forward(&mut tape, store, h, h, None)?;
        let s = tape.add(h, a)?;
        let s = LayerNorm::bind(store, &format!("{p}.norm1"), eps)?.forward(&mut tape, store, s)?;
        let f = FeedForward::bind(store, &format!("{p}.ffn"))?.forward(&mut tape, store, s)?;
        let s2 = tape.add(s, f)?;
        h = LayerNorm::bind(store, &format!("{p}.norm2"), eps)?.forward(&mut tape, store, s2)?;
    }
    let e = Embedding::bind(store, "embed.tokens")?.lookup(&mut tape, store, inputs)?;
    let pe = tape.constant(positional_encoding(0, inputs.len(), cfg.d_model));
    let mut y = tape.add(e, pe)?;
    let mask = tape.constant(causal_mask(inputs.len()));
    for i in 0..cfg.decoder_layers {
        let p = format!("decoder.layers.{i}");
        let ln = |k: usize| LayerNorm::bind(store, &format!("{p}.norm{k}"), eps);
        let (a, _) = Attention::bind(store, &format!("{p}.self_attn"), cfg.heads)?.forward(&mut tape, store, y, y, Some(mask))?;
        let s = tape.add(y, a)?;
        let s = ln(1)?.forward(&mut tape, store, s)?;
        let (c, _) = Attention::bind(store, &format!("{p}.cross_attn"), cfg.heads)?.forward(&mut tape, store, s, h, None)?;
        let s2 = tape.add(s, c)?;
        let s2 = ln(2)?.forward(&mut tape, store, s2)?;
        let f = FeedForward::bind(store, &format!("{p}.ffn"))?.forward(&mut tape, store, s2)?;
        let s3 = tape.add(s2, f)?;
        y = ln(3)?.forward(&mut tape, store, s3)?;
    }
    let logits = Linear::bind(store, "output", true)?.forward(&mut tape, store, y)?;
    Ok(tape.value(logits).clone())
}

fn random_report(rng: &mut ChaCha8Rng, max_len: usize, vocab: usize) -> Vec<usize> {
    let n = rng.random_range(1..=max_len);
    (0..n).map(|_| rng.random_range(4..vocab)).collect()
}

fn vanilla_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let inputs = 12;
    for seed in 0..inputs {
        let cfg = ModelConfig {
            d_model: 16,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            memory_slots: 3,
            feature_dim: 7,
            vocab_size: 15,
            mode: AblationMode::Full,
            ..ModelConfig::default()
        };
        let (model, store) = core(Model::init(&cfg, 500 + seed))?;
        let cond_zero = store
            .ids()
            .filter(|&id| store.name(id).contains("cond_"))
            .all(|id| store.get(id).data().iter().all(|&v| v == 0.0));
        ensure!(cond_zero, "conditioning weights are not zero-initialized");
        let feats = random(900 + seed, "features", &[1 + seed as usize % 6, 7]);
        let report = random_report(&mut rng, 12, 15);
        let (inputs, _) = teacher_pair(&report);
        let reference = core(reference_logits(&cfg, &store, &feats, &inputs))?;
        let mut tape = Tape::new();
        let x = tape.constant(feats.clone());
        let out = core(model.forward(&mut tape, &store, x, &inputs))?;
        for (a, b) in tape.value(out.logits).data().iter().zip(reference.data()) {
            worst = worst.max((a - b).abs());
        }
        let mut tape = Tape::new();
        let x = tape.constant(feats.clone());
        let loss = core(model.nll(&mut tape, &store, x, &report))?;
        let loss = tape.value(loss).data()[0];
        let mut tape = Tape::new();
        let r = tape.constant(reference.clone());
        let targets: Vec<Option<usize>> = teacher_pair(&report).1.into_iter().map(Some).collect();
        let ce = core(tape.cross_entropy(r, &targets))?;
        worst = worst.max((loss - tape.value(ce).data()[0]).abs());
    }
    ensure!(worst <= 1e-9, "max deviation {worst:.2e}");
    Ok(format!("{inputs} inputs, max deviation {worst:.2e}"))
}

fn memory_invariants() -> Outcome {
    let cfg = ModelConfig {
        d_model: 8,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        memory_slots: 3,
        feature_dim: 6,
        vocab_size: 12,
        mode: AblationMode::Full,
        ..ModelConfig::default()
    };
    let (model, store) = core(Model::init(&cfg, 5))?;
    let mem = model.memory_params().ok_or("full model has no memory")?;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..100 {
        let prefix = random_report(&mut rng, 20, 12);
        let mut extended = prefix.clone();
        extended.push(rng.random_range(0..12));
        let short = core(memory_rollout(mem, model.embedding(), &store, BOS, &prefix))?;
        let long = core(memory_rollout(mem, model.embedding(), &store, BOS, &extended))?;
        ensure!(long.len() == short.len() + 1, "rollout length");
        for (a, b) in short.iter().zip(&long) {
            ensure!(
                a.matrix.data() == b.matrix.data() && a.step == b.step,
                "prefix states differ at step {}",
                a.step
            );
        }
    }

    let mut gate_checks = 0;
    for seed in 0..100u64 {
        let mut store = ParamStore::new();
        let init = Initializer::new(seed);
        let mem = core(MemoryParams::register(&mut store, &init, "memory", 8, 2, 3, 0.1))?;
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = init.normal(&format!("{}.wide", store.name(id)), &shape, 0.5);
        }
        let scale = 0.1 + 0.06 * seed as f64;
        let m_prev = init.normal("m", &[3, 8], scale);
        let mut tape = Tape::new();
        let m = tape.constant(m_prev.clone());
        let y = tape.constant(init.normal("y", &[1, 8], scale));
        let z = core(mem.attend(&mut tape, &store, m, y))?;
        let cand = core(mem.residual(&mut tape, &store, z, m))?;
        let g = core(mem.gate(&mut tape, &store, cand, m, y))?;
        let (f, i, next) = (tape.value(g.forget), tape.value(g.input), tape.value(g.memory));
        for k in 0..next.len() {
            let (fv, iv) = (f.data()[k], i.data()[k]);
            ensure!(fv > 0.0 && fv < 1.0 && iv > 0.0 && iv < 1.0, "gate outside (0, 1)");
            ensure!(
                next.data()[k].abs() <= fv * m_prev.data()[k].abs() + iv + 1e-12,
                "memory exceeds its gate bound"
            );
            gate_checks += 1;
        }
    }

    for slots in 1..=4 {
        let (model, store) = core(Model::init(
            &ModelConfig {
                memory_slots: slots,
                ..cfg.clone()
            },
            2,
        ))?;
        let states = core(memory_rollout(
            model.memory_params().ok_or("no memory")?,
            model.embedding(),
            &store,
            BOS,
            &[4, 5, 6, 7, 8],
        ))?;
        for s in &states {
            ensure!(s.matrix.shape() == [slots, 8], "memory shape {:?} with {slots} slots", s.matrix.shape());
        }
    }
    Ok(format!(
        "100 prefixes bit-exact, {gate_checks} gate entries bounded, shapes constant for 1-4 slots"
    ))
}

/// A toy model whose only emittable tokens are `EOS`, 4 and 5.
fn toy_model(seed: u64, mode: AblationMode) -> mdt_core::Result<(Model, ParamStore, Tensor)> {
    let cfg = ModelConfig {
        d_model: 8,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        memory_slots: 2,
        feature_dim: 5,
        vocab_size: 6,
        mode,
        ..ModelConfig::default()
    };
    let (model, mut store) = Model::init(&cfg, seed)?;
    let id = store.require("output.w")?;
    store.get_mut(id).data_mut().iter_mut().for_each(|w| *w *= 4.0);
    Ok((model, store, Initializer::new(seed + 100).normal("features", &[3, 5], 1.0)))
}

fn sequences(max_len: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for seq in &frontier {
            for tok in [EOS, 4, 5] {
                let mut s: Vec<usize> = seq.clone();
                s.push(tok);
                if tok == EOS || s.len() == max_len {
                    out.push(s);
                } else {
                    next.push(s);
                }
            }
        }
        frontier = next;
    }
    out
}

fn beam_oracle() -> Outcome {
    let mut cases = 0;
    for seed in 0..6 {
        for mode in AblationMode::ALL {
            let (model, store, feats) = core(toy_model(seed, mode))?;
            let src = core(model.encode_source(&store, &feats))?;
            for max_len in 1..=3 {
                let mut best: Option<(f64, Vec<usize>)> = None;
                for s in sequences(max_len) {
                    let score: f64 = core(model.sequence_log_probs(&store, &feats, &s))?.iter().sum();
                    if best.as_ref().is_none_or(|b| score > b.0) {
                        best = Some((score, s));
                    }
                }
                let (score, tokens) = best.expect("non-empty search space");
                let cfg = DecodeConfig {
                    beam: 27,
                    max_len,
                    length_normalize: false,
                };
                let got = core(beam_search(&model, &store, &src, &cfg))?;
                ensure!(
                    got[0].tokens == tokens,
                    "seed {seed} {mode} T={max_len}: beam {:?} vs exhaustive {tokens:?}",
                    got[0].tokens
                );
                ensure!((got[0].score - score).abs() <= 1e-9, "seed {seed} {mode}: score mismatch");

                for len in [max_len, 4 * max_len] {
                    let g = core(greedy_decode(&model, &store, &src, len))?;
                    let b = core(beam_search(
                        &model,
                        &store,
                        &src,
                        &DecodeConfig {
                            beam: 1,
                            max_len: len,
                            length_normalize: false,
                        },
                    ))?;
                    ensure!(
                        b[0].tokens == g.tokens && b[0].score == g.score,
                        "seed {seed} {mode}: beam 1 differs from greedy"
                    );
                }
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} toy cases over 6 seeds: beam 27 = exhaustive argmax, beam 1 = greedy"))
}

fn metric_fixtures() -> Outcome {
    let pairs = [
        ("the cat sat on the mat", "the cat sat on the mat"),
        ("the the the the the the the", "the cat is on the mat"),
        ("a c d", "a b c d"),
        ("there is no pleural effusion", "no pleural effusion is seen"),
        ("heart size is normal the lungs are clear", "the lungs are clear heart size is normal"),
        ("mild edema", "there is mild interstitial edema"),
        ("no acute fracture no acute fracture", "no acute fracture"),
    ];
    let close = |got: f64, want: f64, what: &str| -> Result<(), String> {
        ensure!((got - want).abs() <= 1e-9, "{what}: {got} vs {want}");
        Ok(())
    };
    let (c, r): (Vec<&str>, Vec<&str>) = pairs.iter().copied().unzip();
    let corpus = core(bleu(&c, &r))?;
    for (g, w) in corpus
        .iter()
        .zip([0.7567567567567568, 0.6352980431290526, 0.5598552215589248, 0.47663625167250323])
    {
        close(*g, w, "corpus BLEU")?;
    }
    ensure!(core(clipped_counts(&[pairs[1].0], &[pairs[1].1], 1))? == (2, 7), "clipped unigram counts");
    close(core(bleu(&[pairs[1].0], &[pairs[1].1]))?[0], 2.0 / 7.0, "clipped unigram precision")?;
    close(core(bleu(&[""], &["the cat"]))?[3], 0.0, "empty candidate")?;
    let rouge = [1.0, 0.31202046035805625, 0.8356164383561644, 0.6, 0.5, 0.5304347826086957, 0.7093023255813954];
    let meteor = [
        0.9976851851851852,
        0.16393442622950818,
        0.6552706552706553,
        0.75,
        0.9921875,
        0.2127659574468085,
        0.8922558922558923,
    ];
    for ((c, r), (rw, mw)) in pairs.iter().zip(rouge.into_iter().zip(meteor)) {
        close(rouge_l_pair(c, r), rw, "ROUGE-L")?;
        close(meteor_pair(c, r), mw, "METEOR-lite")?;
    }
    let gold = vec![vec![2, 5], vec![2], vec![], vec![2, 5]];
    let pred = vec![vec![2, 5], vec![], vec![2, 7], vec![2]];
    let s = core(label_efficacy(&pred, &gold, 14))?;
    close(s.per_category[2].precision, 2.0 / 3.0, "label precision")?;
    close(s.per_category[5].recall, 0.5, "label recall")?;
    close(s.macro_avg.f1, (11.0 + 4.0 / 3.0) / 14.0, "label macro F1")?;
    let base = NlgScores::from_values([0.396, 0.254, 0.179, 0.135, 0.164, 0.342]);
    let full = NlgScores::from_values([0.470, 0.304, 0.219, 0.165, 0.187, 0.371]);
    ensure!((100.0 * avg_delta(&full, &base) - 17.6).abs() < 0.05, "reference average gain");
    Ok("BLEU, ROUGE-L, METEOR-lite, label efficacy and average gain match".into())
}

fn mdt(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mdt"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| format!("cannot run mdt: {e}"))?;
    if !out.status.success() {
        return Err(format!("mdt {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn read(path: impl AsRef<Path>) -> Result<Vec<u8>, String> {
    std::fs::read(path.as_ref()).map_err(|e| format!("{}: {e}", path.as_ref().display()))
}

const ABLATION: &str = r#"
[model]
d_model = 32
heads = 4
encoder_layers = 1
decoder_layers = 1
memory_slots = 3

[optim]
lr_visual = 5e-4
lr_other = 1e-3
decay = 0.8

[train]
epochs = 8
batch_size = 16

[decode]
beam = 3
"#;

fn ablation_experiment() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    std::fs::write(dir.join("ablation.toml"), ABLATION).map_err(|e| e.to_string())?;
    mdt(
        dir,
        &["-c", "ablation.toml", "datagen", "--n-train", "2000", "--n-val", "50", "--n-test", "100"],
    )?;
    mdt(dir, &["-c", "ablation.toml", "--out-dir", "ablation", "ablate", "--seeds", "1,2,3"])?;
    let elapsed = start.elapsed();
    let summary: AblationSummary = serde_json::from_slice(&read(dir.join("ablation/ablation.json"))?).map_err(|e| e.to_string())?;
    let of = |m: AblationMode| summary.medians.iter().find(|(k, _)| *k == m).map(|(_, s)| s.values()[3]).unwrap_or(f64::NAN);
    let f1 = |m: AblationMode| summary.median_label_f1.iter().find(|(k, _)| *k == m).map(|(_, v)| *v).unwrap_or(f64::NAN);
    let (base, rm, full) = (of(AblationMode::Base), of(AblationMode::BaseRm), of(AblationMode::Full));
    let mut detail = format!("median BLEU-4 base {base:.4}, base+rm {rm:.4}, full {full:.4}; ");
    let _ = write!(
        detail,
        "avg_delta {:+.1}%; label F1 base {:.3}, base+rm {:.3}, full {:.3}; {:.1} min",
        100.0 * summary.avg_delta_full_vs_base,
        f1(AblationMode::Base),
        f1(AblationMode::BaseRm),
        f1(AblationMode::Full),
        elapsed.as_secs_f64() / 60.0
    );
    ensure!(full >= rm && rm >= base, "ordering violated: {detail}");
    ensure!(summary.avg_delta_full_vs_base >= 0.05, "average gain below +5%: {detail}");
    ensure!(f1(AblationMode::Full) >= f1(AblationMode::Base), "label F1 of full below base: {detail}");
    ensure!(elapsed <= Duration::from_secs(30 * 60), "over 30 minutes: {detail}");
    Ok(detail)
}

const TINY: &str = r#"
[model]
d_model = 16
heads = 2
encoder_layers = 1
decoder_layers = 1
memory_slots = 2

[optim]
lr_visual = 1e-3
lr_other = 1e-3

[train]
epochs = 2
batch_size = 8
seed = 4

[decode]
beam = 2
max_len = 80
"#;

fn tiny_workspace() -> Result<tempfile::TempDir, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    std::fs::write(tmp.path().join("tiny.toml"), TINY).map_err(|e| e.to_string())?;
    mdt(tmp.path(), &["-c", "tiny.toml", "datagen", "--n-train", "24", "--n-val", "4", "--n-test", "6"])?;
    Ok(tmp)
}

fn sweep_harness() -> Outcome {
    let tmp = tiny_workspace()?;
    mdt(tmp.path(), &["-c", "tiny.toml", "--out-dir", "sweep", "sweep-memory", "--slots", "1,2,3,4"])?;
    let table = String::from_utf8(read(tmp.path().join("sweep/sweep.tsv"))?).map_err(|e| e.to_string())?;
    let mut lines = table.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split('\t').collect();
    ensure!(header.len() == 11 && header[..2] == ["slots", "params"], "header {header:?}");
    let rows: Vec<(usize, usize)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            Ok((f[0].parse().map_err(|_| l.to_string())?, f[1].parse().map_err(|_| l.to_string())?))
        })
        .collect::<Result<_, String>>()?;
    ensure!(rows.iter().map(|r| r.0).eq(1..=4), "slot column {rows:?}");
    ensure!(rows.windows(2).all(|w| w[0].1 < w[1].1), "parameter counts not increasing: {rows:?}");
    Ok(format!("4 runs, parameter counts {:?}", rows.iter().map(|r| r.1).collect::<Vec<_>>()))
}

fn exports() -> Outcome {
    let tmp = tiny_workspace()?;
    let dir = tmp.path();
    mdt(dir, &["-c", "tiny.toml", "train"])?;
    mdt(dir, &["-c", "tiny.toml", "evaluate", "--checkpoint", "runs/default/best.ckpt", "--out", "eval"])?;
    let gens = read_generations(&dir.join("eval/generations.jsonl")).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for g in &gens {
        let id = g.id.to_string();
        mdt(
            dir,
            &[
                "-c",
                "tiny.toml",
                "export-attention",
                "--checkpoint",
                "runs/default/best.ckpt",
                "--sample-id",
                &id,
                "--out",
                "att",
            ],
        )?;
        let export: AttentionExport = serde_json::from_slice(&read(dir.join(format!("att/attention_{id}.json")))?).map_err(|e| e.to_string())?;
        let steps = export.tokens.len();
        ensure!(steps > 0 && export.heads.len() == 2, "sample {id}: {steps} steps, {} heads", export.heads.len());
        for m in export.heads.iter().chain(std::iter::once(&export.mean)) {
            ensure!(m.len() == steps, "sample {id}: {} rows for {steps} tokens", m.len());
            for row in m {
                ensure!(row.len() == 8, "sample {id}: {} columns for 8 patches", row.len());
                ensure!(row.iter().all(|&w| w >= 0.0), "negative attention weight");
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    ensure!(worst <= 1e-9, "row sums off by {worst:.2e}");

    mdt(dir, &["export-lengths", "--generations", "eval/generations.jsonl", "--out", "lengths.tsv"])?;
    let table = String::from_utf8(read(dir.join("lengths.tsv"))?).map_err(|e| e.to_string())?;
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    let labels: Vec<String> = (0..10).map(|i| format!("{}-{}", 10 * i, 10 * i + 9)).chain([">=100".to_string()]).collect();
    ensure!(rows.iter().map(|r| r[0].to_string()).eq(labels.iter().cloned()), "bin labels {rows:?}");
    ensure!(LengthHistogram::labels() == labels, "library bin labels");
    let mut expected = [[0usize; 11]; 2];
    for g in &gens {
        for (k, text) in [&g.hypothesis, &g.reference].into_iter().enumerate() {
            expected[k][(text.split_whitespace().count() / 10).min(10)] += 1;
        }
    }
    for k in 0..2 {
        let counts: Vec<usize> = rows.iter().map(|r| r[k + 1].parse().unwrap_or(usize::MAX)).collect();
        ensure!(counts == expected[k], "column {k}: {counts:?} vs {:?}", expected[k]);
        ensure!(counts.iter().sum::<usize>() == gens.len(), "counts do not sum to the corpus size");
    }
    Ok(format!(
        "{} attention maps (T x 8), worst row-sum error {worst:.1e}; histograms sum to {}",
        gens.len(),
        gens.len()
    ))
}

fn determinism() -> Outcome {
    let tmp = tiny_workspace()?;
    let dir = tmp.path();
    for run in ["a", "b"] {
        mdt(dir, &["-c", "tiny.toml", "--out-dir", run, "train"])?;
        mdt(
            dir,
            &["-c", "tiny.toml", "--out-dir", run, "evaluate", "--checkpoint", &format!("{run}/best.ckpt")],
        )?;
    }
    let mut files = vec![
        "loss.tsv",
        "best.ckpt",
        "eval_test/metrics.json",
        "eval_test/metrics.txt",
        "eval_test/generations.jsonl",
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    files.extend((1..=2).map(|e| format!("epoch_{e}.ckpt")));
    for f in &files {
        ensure!(read(dir.join("a").join(f))? == read(dir.join("b").join(f))?, "{f} differs between runs");
    }
    Ok(format!("{} artifacts byte-identical across two runs", files.len()))
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 9] = [
        (1, "gradient suite", gradient_suite),
        (2, "vanilla equivalence", vanilla_equivalence),
        (3, "memory invariants", memory_invariants),
        (4, "beam oracle", beam_oracle),
        (5, "metric fixtures", metric_fixtures),
        (6, "ablation experiment", ablation_experiment),
        (7, "memory sweep harness", sweep_harness),
        (8, "exports", exports),
        (9, "determinism", determinism),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL: {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
