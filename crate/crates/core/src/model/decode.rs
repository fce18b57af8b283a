//! Decoding strategies: greedy, length-normalized beam search, and seeded
//! multinomial sampling.
//!
//! All three run over a [`StepScorer`], which yields next-token logits one
//! position at a time. The model's scorer keeps per-layer cached activations
//! (keys/values and finalized expansion rows) so each step costs one new
//! position instead of recomputing the whole prefix; cached decoding is
//! required to match full-prefix recomputation to 1e-10.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::data::{TokenSequence, EOS, SOS};
use crate::error::{Error, Result};
use crate::expansion::ExpansionLayer;
use crate::model::{DecoderLayer, Model, SeqTransform};
use crate::tensor::{no_grad, Tensor};

/// Stepwise next-token scorer with cloneable decoding state.
pub trait StepScorer {
    type State: Clone;

    fn start(&self) -> Result<Self::State>;
    fn vocab_size(&self) -> usize;
    /// Hard bound on total sequence length (sos and eos included).
    fn max_len(&self) -> usize;
    /// Feed `token`, advance the state, return logits for the next token.
    fn step(&self, state: &mut Self::State, token: u32) -> Result<Vec<f64>>;
}

/// First index of the maximum (deterministic tie-break).
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn log_softmax_vec(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    v.iter().map(|&x| x - lse).collect()
}

/// Argmax continuation until eos or the length bound.
pub fn greedy<S: StepScorer>(scorer: &S) -> Result<TokenSequence> {
    let mut state = scorer.start()?;
    let mut ids = vec![SOS];
    while ids.len() < scorer.max_len() {
        let logits = scorer.step(&mut state, *ids.last().expect("nonempty"))?;
        let next = argmax(&logits) as u32;
        ids.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(TokenSequence::new(ids))
}

struct Hypothesis<S> {
    ids: Vec<u32>,
    state: S,
    sum_logp: f64,
}

impl<S> Hypothesis<S> {
    /// Mean log-probability over generated tokens (length normalization).
    fn score(&self) -> f64 {
        self.sum_logp / (self.ids.len() - 1).max(1) as f64
    }
}

/// Length-normalized beam search. Hypotheses retire when they emit eos or
/// hit the length bound; the best retired hypothesis wins.
pub fn beam_search<S: StepScorer>(scorer: &S, width: usize) -> Result<TokenSequence> {
    if width == 0 {
        return Err(Error::config("beam width must be at least 1".to_string()));
    }
    if width > scorer.vocab_size() {
        return Err(Error::config(format!(
            "beam width {width} exceeds vocabulary size {}",
            scorer.vocab_size()
        )));
    }
    let mut active = vec![Hypothesis { ids: vec![SOS], state: scorer.start()?, sum_logp: 0.0 }];
    let mut finished: Vec<Hypothesis<S::State>> = Vec::new();

    while !active.is_empty() {
        let mut candidates: Vec<Hypothesis<S::State>> = Vec::new();
        for hyp in active.drain(..) {
            let mut state = hyp.state;
            let logits = scorer.step(&mut state, *hyp.ids.last().expect("nonempty"))?;
            let logp = log_softmax_vec(&logits);
            let mut order: Vec<usize> = (0..logp.len()).collect();
            order.sort_by(|&a, &b| logp[b].partial_cmp(&logp[a]).expect("finite").then(a.cmp(&b)));
            for &tok in order.iter().take(width) {
                let mut ids = hyp.ids.clone();
                ids.push(tok as u32);
                candidates.push(Hypothesis {
                    ids,
                    state: state.clone(),
                    sum_logp: hyp.sum_logp + logp[tok],
                });
            }
        }
        // Stable sort: ties keep deterministic construction order.
        candidates.sort_by(|a, b| b.score().partial_cmp(&a.score()).expect("finite"));
        for cand in candidates.into_iter().take(width) {
            if *cand.ids.last().expect("nonempty") == EOS || cand.ids.len() >= scorer.max_len() {
                finished.push(cand);
            } else {
                active.push(cand);
            }
        }
    }

    let best = finished
        .into_iter()
        .reduce(|best, h| if h.score() > best.score() { h } else { best })
        .expect("at least one hypothesis always finishes");
    Ok(TokenSequence::new(best.ids))
}

/// One sampled rollout with the model log-probability of each generated
/// token (at temperature 1, regardless of the sampling temperature).
#[derive(Debug, Clone)]
pub struct Sampled {
    pub seq: TokenSequence,
    pub logps: Vec<f64>,
}

impl Sampled {
    pub fn sum_logp(&self) -> f64 {
        self.logps.iter().sum()
    }
}

/// k independent multinomial rollouts, reproducible under `seed`.
/// Temperature scales the sampling distribution only; 0 degenerates to
/// greedy.
pub fn sample<S: StepScorer>(
    scorer: &S,
    k: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<Sampled>> {
    if temperature < 0.0 {
        return Err(Error::config("temperature must be nonnegative".to_string()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut rollouts = Vec::with_capacity(k);
    for _ in 0..k {
        let mut state = scorer.start()?;
        let mut ids = vec![SOS];
        let mut logps = Vec::new();
        while ids.len() < scorer.max_len() {
            let logits = scorer.step(&mut state, *ids.last().expect("nonempty"))?;
            let model_logp = log_softmax_vec(&logits);
            let next = if temperature < 1e-12 {
                argmax(&logits)
            } else {
                let scaled: Vec<f64> = logits.iter().map(|&x| x / temperature).collect();
                let probs: Vec<f64> = log_softmax_vec(&scaled).iter().map(|&lp| lp.exp()).collect();
                let draw: f64 = rng.gen();
                let mut acc = 0.0;
                let mut chosen = probs.len() - 1;
                for (i, &p) in probs.iter().enumerate() {
                    acc += p;
                    if draw < acc {
                        chosen = i;
                        break;
                    }
                }
                chosen
            };
            ids.push(next as u32);
            logps.push(model_logp[next]);
            if next as u32 == EOS {
                break;
            }
        }
        rollouts.push(Sampled { seq: TokenSequence::new(ids), logps });
    }
    Ok(rollouts)
}

// ── incremental model scorer ─────────────────────────────────────────

type Buf = Rc<Vec<f64>>;

struct NormSnap {
    gain: Buf,
    bias: Buf,
}

struct AttnSnap {
    w_q: Buf,
    w_k: Buf,
    w_v: Buf,
    w_out: Buf,
    n_heads: usize,
}

struct ExpSnap {
    q_bank: Buf,
    b_bank: Buf,
    w_c: Buf,
    w_k: Buf,
    w_v1: Buf,
    w_v2: Buf,
    w_s: Buf,
    n_e: usize,
    eps: f64,
}

enum SelfSnap {
    Expansion(ExpSnap),
    Attention(AttnSnap),
}

struct FfSnap {
    w1: Buf,
    b1: Buf,
    w2: Buf,
    b2: Buf,
}

struct LayerSnap {
    ln1: NormSnap,
    self_kind: SelfSnap,
    ln2: NormSnap,
    cross: AttnSnap,
    /// Memory keys/values, projected once per decode.
    cross_k: Vec<f64>,
    cross_v: Vec<f64>,
    ln3: NormSnap,
    ff: FfSnap,
}

/// Incremental decoder over one image's memory.
pub struct ModelScorer<'a> {
    model: &'a Model,
    n_mem: usize,
    layers: Vec<LayerSnap>,
    tok_emb: Buf,
    pos_emb: Buf,
    final_norm: NormSnap,
    out_w: Buf,
    out_b: Buf,
}

/// Per-layer cached activations of one hypothesis.
#[derive(Clone, Default)]
struct LayerState {
    /// Expansion caches: projected keys/values (t×d) and finalized expanded
    /// rows (t·N_E×d). Expansion rows never change once their origin's keys
    /// are in place, so they are append-only.
    keys: Vec<f64>,
    v1: Vec<f64>,
    v2: Vec<f64>,
    eq: Vec<f64>,
    f1: Vec<f64>,
    f2: Vec<f64>,
    /// Baseline self-attention caches.
    k_self: Vec<f64>,
    v_self: Vec<f64>,
}

/// Generated-prefix cache; cloneable so beam search can branch hypotheses.
#[derive(Clone)]
pub struct DecodeState {
    pos: usize,
    layers: Vec<LayerState>,
}

fn norm_snap(ln: &crate::model::LayerNorm) -> NormSnap {
    NormSnap { gain: ln.gain.value_rc(), bias: ln.bias.value_rc() }
}

fn attn_snap(p: &crate::attention::AttentionParams) -> AttnSnap {
    AttnSnap {
        w_q: p.w_q.value_rc(),
        w_k: p.w_k.value_rc(),
        w_v: p.w_v.value_rc(),
        w_out: p.w_out.value_rc(),
        n_heads: p.n_heads,
    }
}

fn exp_snap(layer: &ExpansionLayer) -> ExpSnap {
    let p = &layer.params;
    ExpSnap {
        q_bank: p.q_bank.value_rc(),
        b_bank: p.b_bank.value_rc(),
        w_c: p.w_c.as_ref().expect("decoder expansion is dynamic").value_rc(),
        w_k: p.w_k.value_rc(),
        w_v1: p.w_v1.value_rc(),
        w_v2: p.w_v2.value_rc(),
        w_s: p.w_s.value_rc(),
        n_e: layer.mode.n_e(),
        eps: p.epsilon,
    }
}

fn vec_mat(x: &[f64], w: &[f64], d_in: usize, d_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; d_out];
    for (i, &xi) in x.iter().enumerate().take(d_in) {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * d_out..(i + 1) * d_out];
        for (o, wj) in out.iter_mut().zip(row) {
            *o += xi * wj;
        }
    }
    out
}

fn ln_vec(x: &[f64], snap: &NormSnap) -> Vec<f64> {
    let d = x.len();
    let mean = x.iter().sum::<f64>() / d as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
    let inv = 1.0 / (var + crate::model::LN_EPS).sqrt();
    x.iter()
        .zip(snap.gain.iter().zip(snap.bias.iter()))
        .map(|(&v, (&g, &b))| (v - mean) * inv * g + b)
        .collect()
}

fn add_assign(x: &mut [f64], y: &[f64]) {
    x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Attention of a single query row over cached keys/values, per head.
fn attend_one(q: &[f64], keys: &[f64], values: &[f64], n_rows: usize, n_heads: usize) -> Vec<f64> {
    let d = q.len();
    let dh = d / n_heads;
    let inv = 1.0 / (dh as f64).sqrt();
    let mut ctx = vec![0.0; d];
    for h in 0..n_heads {
        let lo = h * dh;
        let q_h = &q[lo..lo + dh];
        let mut scores: Vec<f64> = (0..n_rows)
            .map(|r| dot(q_h, &keys[r * d + lo..r * d + lo + dh]) * inv)
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            z += *s;
        }
        for (r, s) in scores.iter().enumerate() {
            let w = s / z;
            let v_h = &values[r * d + lo..r * d + lo + dh];
            for (c, v) in ctx[lo..lo + dh].iter_mut().zip(v_h) {
                *c += w * v;
            }
        }
    }
    ctx
}

fn expansion_step(snap: &ExpSnap, ls: &mut LayerState, h: &[f64], pos: usize) -> Vec<f64> {
    let d = h.len();
    let n_e = snap.n_e;
    let inv = 1.0 / (d as f64).sqrt();
    let eps = snap.eps;

    let k_new = vec_mat(h, &snap.w_k, d, d);
    let v1_new = vec_mat(h, &snap.w_v1, d, d);
    let v2_new = vec_mat(h, &snap.w_v2, d, d);
    let s_row = vec_mat(h, &snap.w_s, d, d);
    let c_row = vec_mat(h, &snap.w_c, d, d);
    ls.keys.extend_from_slice(&k_new);
    ls.v1.extend_from_slice(&v1_new);
    ls.v2.extend_from_slice(&v2_new);
    let n_keys = pos + 1;

    // New expanded rows (origin = pos) attend every key ≤ pos; their F rows
    // are final immediately.
    for j in 0..n_e {
        let eq: Vec<f64> = c_row.iter().zip(&snap.q_bank[j * d..(j + 1) * d]).map(|(a, b)| a + b).collect();
        let eb: Vec<f64> = c_row.iter().zip(&snap.b_bank[j * d..(j + 1) * d]).map(|(a, b)| a + b).collect();
        let mut a1 = vec![0.0; n_keys];
        let mut a2 = vec![0.0; n_keys];
        for key in 0..n_keys {
            let z = dot(&eq, &ls.keys[key * d..(key + 1) * d]) * inv;
            if z > 0.0 {
                a1[key] = z;
            } else if z < 0.0 {
                a2[key] = -z;
            }
        }
        let s1 = a1.iter().sum::<f64>() + eps;
        let s2 = a2.iter().sum::<f64>() + eps;
        let mut f1 = vec![0.0; d];
        let mut f2 = vec![0.0; d];
        for key in 0..n_keys {
            let w1 = a1[key] / s1;
            if w1 != 0.0 {
                add_scaled(&mut f1, &ls.v1[key * d..(key + 1) * d], w1);
            }
            let w2 = a2[key] / s2;
            if w2 != 0.0 {
                add_scaled(&mut f2, &ls.v2[key * d..(key + 1) * d], w2);
            }
        }
        add_assign(&mut f1, &eb);
        add_assign(&mut f2, &eb);
        ls.eq.extend_from_slice(&eq);
        ls.f1.extend_from_slice(&f1);
        ls.f2.extend_from_slice(&f2);
    }

    // Gather step for this position over every cached expanded row (all have
    // origin ≤ pos).
    let n_rows = ls.eq.len() / d;
    let mut a1 = vec![0.0; n_rows];
    let mut a2 = vec![0.0; n_rows];
    for r in 0..n_rows {
        let z = dot(&ls.eq[r * d..(r + 1) * d], &k_new) * inv;
        if z > 0.0 {
            a1[r] = z;
        } else if z < 0.0 {
            a2[r] = -z;
        }
    }
    let s1 = a1.iter().sum::<f64>() + eps;
    let s2 = a2.iter().sum::<f64>() + eps;
    let mut b1 = vec![0.0; d];
    let mut b2 = vec![0.0; d];
    for r in 0..n_rows {
        let w1 = a1[r] / s1;
        if w1 != 0.0 {
            add_scaled(&mut b1, &ls.f1[r * d..(r + 1) * d], w1);
        }
        let w2 = a2[r] / s2;
        if w2 != 0.0 {
            add_scaled(&mut b2, &ls.f2[r * d..(r + 1) * d], w2);
        }
    }
    (0..d)
        .map(|c| {
            let gate = 1.0 / (1.0 + (-s_row[c]).exp());
            b2[c] + gate * (b1[c] - b2[c])
        })
        .collect()
}

fn add_scaled(acc: &mut [f64], row: &[f64], w: f64) {
    acc.iter_mut().zip(row).for_each(|(a, b)| *a += w * b);
}

fn self_attn_step(snap: &AttnSnap, ls: &mut LayerState, h: &[f64]) -> Vec<f64> {
    let d = h.len();
    let q = vec_mat(h, &snap.w_q, d, d);
    let k_new = vec_mat(h, &snap.w_k, d, d);
    let v_new = vec_mat(h, &snap.w_v, d, d);
    ls.k_self.extend_from_slice(&k_new);
    ls.v_self.extend_from_slice(&v_new);
    let n = ls.k_self.len() / d;
    let ctx = attend_one(&q, &ls.k_self, &ls.v_self, n, snap.n_heads);
    vec_mat(&ctx, &snap.w_out, d, d)
}

impl Model {
    /// Build an incremental scorer over the encoded memory of `features`.
    pub fn scorer(&self, features: &Tensor) -> Result<ModelScorer<'_>> {
        let memory = no_grad(|| self.encode(features))?;
        self.scorer_from_memory(&memory)
    }

    /// As [`Model::scorer`], reusing an already-computed memory.
    pub fn scorer_from_memory(&self, memory: &Tensor) -> Result<ModelScorer<'_>> {
        let d = self.config.d_model;
        if memory.cols() != d {
            return Err(Error::dim(format!(
                "scorer: memory width {} != d_model {d}",
                memory.cols()
            )));
        }
        let n_mem = memory.rows();
        let layers = self
            .dec_layers
            .iter()
            .map(|layer: &DecoderLayer| {
                let self_kind = match &layer.self_transform {
                    SeqTransform::Expansion(e) => SelfSnap::Expansion(exp_snap(e)),
                    SeqTransform::SelfAttention(a) => SelfSnap::Attention(attn_snap(a)),
                };
                let cross = attn_snap(&layer.cross);
                let mut cross_k = vec![0.0; n_mem * d];
                let mut cross_v = vec![0.0; n_mem * d];
                for r in 0..n_mem {
                    cross_k[r * d..(r + 1) * d]
                        .copy_from_slice(&vec_mat(memory.row(r), &cross.w_k, d, d));
                    cross_v[r * d..(r + 1) * d]
                        .copy_from_slice(&vec_mat(memory.row(r), &cross.w_v, d, d));
                }
                LayerSnap {
                    ln1: norm_snap(&layer.norm1),
                    self_kind,
                    ln2: norm_snap(&layer.norm2),
                    cross,
                    cross_k,
                    cross_v,
                    ln3: norm_snap(&layer.norm3),
                    ff: FfSnap {
                        w1: layer.ff.w1.value_rc(),
                        b1: layer.ff.b1.value_rc(),
                        w2: layer.ff.w2.value_rc(),
                        b2: layer.ff.b2.value_rc(),
                    },
                }
            })
            .collect();
        Ok(ModelScorer {
            model: self,
            n_mem,
            layers,
            tok_emb: self.tok_emb.value_rc(),
            pos_emb: self.pos_emb.value_rc(),
            final_norm: norm_snap(&self.final_norm),
            out_w: self.out_w.value_rc(),
            out_b: self.out_b.value_rc(),
        })
    }

    pub fn greedy_decode(&self, features: &Tensor) -> Result<TokenSequence> {
        greedy(&self.scorer(features)?)
    }

    pub fn beam_search(&self, features: &Tensor, width: usize) -> Result<TokenSequence> {
        beam_search(&self.scorer(features)?, width)
    }

    pub fn sample_decode(
        &self,
        features: &Tensor,
        k: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<Vec<Sampled>> {
        sample(&self.scorer(features)?, k, temperature, seed)
    }
}

impl StepScorer for ModelScorer<'_> {
    type State = DecodeState;

    fn start(&self) -> Result<DecodeState> {
        Ok(DecodeState { pos: 0, layers: vec![LayerState::default(); self.layers.len()] })
    }

    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn max_len(&self) -> usize {
        self.model.config.max_seq_len
    }

    fn step(&self, state: &mut DecodeState, token: u32) -> Result<Vec<f64>> {
        let cfg = &self.model.config;
        let d = cfg.d_model;
        if token as usize >= cfg.vocab_size {
            return Err(Error::dim(format!("step: token {token} out of vocabulary")));
        }
        if state.pos >= cfg.max_seq_len {
            return Err(Error::Length(format!(
                "step: position {} exceeds max_seq_len {}",
                state.pos, cfg.max_seq_len
            )));
        }
        let t = token as usize;
        let mut x: Vec<f64> = self.tok_emb[t * d..(t + 1) * d]
            .iter()
            .zip(&self.pos_emb[state.pos * d..(state.pos + 1) * d])
            .map(|(a, b)| a + b)
            .collect();

        for (snap, ls) in self.layers.iter().zip(&mut state.layers) {
            let h = ln_vec(&x, &snap.ln1);
            let sub = match &snap.self_kind {
                SelfSnap::Expansion(e) => expansion_step(e, ls, &h, state.pos),
                SelfSnap::Attention(a) => self_attn_step(a, ls, &h),
            };
            add_assign(&mut x, &sub);

            let h2 = ln_vec(&x, &snap.ln2);
            let q = vec_mat(&h2, &snap.cross.w_q, d, d);
            let ctx = attend_one(&q, &snap.cross_k, &snap.cross_v, self.n_mem, snap.cross.n_heads);
            let cross_out = vec_mat(&ctx, &snap.cross.w_out, d, d);
            add_assign(&mut x, &cross_out);

            let h3 = ln_vec(&x, &snap.ln3);
            let d_ff = snap.ff.b1.len();
            let mut hidden = vec_mat(&h3, &snap.ff.w1, d, d_ff);
            add_assign(&mut hidden, &snap.ff.b1);
            hidden.iter_mut().for_each(|v| {
                if *v < 0.0 {
                    *v = 0.0;
                }
            });
            let mut ff_out = vec_mat(&hidden, &snap.ff.w2, d_ff, d);
            add_assign(&mut ff_out, &snap.ff.b2);
            add_assign(&mut x, &ff_out);
        }

        let hf = ln_vec(&x, &self.final_norm);
        let mut logits = vec_mat(&hf, &self.out_w, d, cfg.vocab_size);
        add_assign(&mut logits, &self.out_b);
        state.pos += 1;
        Ok(logits)
    }
}
