//! Small causal decoder conditioned on an `H_A` prefix, its language-model
//! pretraining, the two tuning losses and greedy generation.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Zipf};
use serde::{Deserialize, Serialize};

use crate::numerics::{GradSet, ParamGroup, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::family::{AnswerKind, CenterKind};
use crate::graphcore::{extract_khop, Center, Graph, Label};
use crate::instance::{legal_answers, SamplingConfig, TaskInstance};
use crate::seed::rng_for;
use crate::tasktext::TaskText;
use crate::structattn::{attend, build_mask, head_freqs, AttentionParams, Projection};
use crate::trainer::Adam;
use crate::{Error, Result, TaskFamily};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Must equal the encoder width so `H_A` rows enter without projection.
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { d_model: 32, heads: 4, layers: 2, ffn_mult: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of the corpus held out for perplexity.
    pub heldout_fraction: f64,
    /// Number of graph descriptions in the corpus.
    pub descriptions: usize,
    /// Number of instructions paired with a random legal answer.
    pub instructions: usize,
    /// Fraction of instructions whose context first states the answer.
    pub hinted_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 600, batch_size: 8, lr: 3e-3, heldout_fraction: 0.1, descriptions: 5000, instructions: 5000, hinted_fraction: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub attn: AttentionParams,
    pub ff1: ParamId,
    pub ff1_bias: ParamId,
    pub ff2: ParamId,
    pub ff2_bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub vocab_size: usize,
    pub embed: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub head: ParamId,
}

fn normal<T: Real>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let d = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::of(d.sample(rng))).collect()).expect("shape")
}

impl Decoder {
    /// Adds decoder parameters to `store`, trainable. The output head starts
    /// near zero so the untrained model is close to uniform.
    pub fn init<T: Real>(store: &mut ParamStore<T>, config: DecoderConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        let d = config.d_model;
        if config.heads == 0 || d % config.heads != 0 || (d / config.heads) % 2 != 0 {
            return Err(Error::Config(format!("decoder width {d} must split into {} heads of even width", config.heads)));
        }
        let mut rng = rng_for(seed, "decoder-init");
        let g = ParamGroup::Decoder;
        let embed = store.add("dec.embed", normal(&mut rng, &[vocab_size, d], 1.0), g, true);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mut proj = |name: &str, store: &mut ParamStore<T>| Projection {
                base: store.add(format!("dec.{l}.{name}"), normal(&mut rng, &[d, d], 1.0 / (d as f64).sqrt()), g, true),
                adapter: None,
            };
            let attn = AttentionParams {
                q: proj("wq", store),
                k: proj("wk", store),
                v: proj("wv", store),
                o: proj("wo", store),
                heads: config.heads,
                d_k: d,
            };
            let hidden = config.ffn_mult * d;
            let ff1 = store.add(format!("dec.{l}.ff1"), normal(&mut rng, &[d, hidden], 1.0 / (d as f64).sqrt()), g, true);
            let ff1_bias = store.add(format!("dec.{l}.ff1_bias"), Tensor::zeros(&[hidden]), g, true);
            let ff2 =
                store.add(format!("dec.{l}.ff2"), normal(&mut rng, &[hidden, d], 1.0 / (hidden as f64).sqrt()), g, true);
            let ff2_bias = store.add(format!("dec.{l}.ff2_bias"), Tensor::zeros(&[d]), g, true);
            layers.push(DecoderLayer { attn, ff1, ff1_bias, ff2, ff2_bias });
        }
        let head = store.add("dec.head", normal(&mut rng, &[d, vocab_size], 0.02), g, true);
        Ok(Self { config, vocab_size, embed, layers, head })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = vec![self.embed];
        for l in &self.layers {
            out.extend([l.attn.q.base, l.attn.k.base, l.attn.v.base, l.attn.o.base, l.ff1, l.ff1_bias, l.ff2, l.ff2_bias]);
        }
        out.push(self.head);
        out
    }

    pub fn freeze<T: Real>(&self, store: &mut ParamStore<T>) {
        for id in self.params() {
            store.set_requires_grad(id, false);
        }
    }

    pub fn is_frozen<T: Real>(&self, store: &ParamStore<T>) -> bool {
        self.params().iter().all(|&id| !store.get(id).requires_grad)
    }

    /// Final hidden states for `[prefix; embed(tokens)]`, `[rows, d_model]`.
    pub fn hidden<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        prefix: Option<Var>,
        tokens: &[u32],
    ) -> Result<Var> {
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::UnknownToken(format!("id {bad}")));
        }
        let table = tape.param(store, self.embed);
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let mut x = match (prefix, idx.is_empty()) {
            (Some(p), true) => p,
            (Some(p), false) => {
                let e = tape.gather_rows(table, &idx)?;
                tape.concat_rows(&[p, e])?
            }
            (None, false) => tape.gather_rows(table, &idx)?,
            (None, true) => return Err(Error::Invalid("decoder input is empty".into())),
        };
        let len = tape.shape(x)[0];
        let pos = tape.constant(Tensor::new(vec![len], (0..len).map(|i| T::of(i as f64)).collect())?);
        let freqs: Arc<[T]> = head_freqs(self.config.d_model, self.config.heads)?;
        let mask = build_mask(0, len, 0);
        for layer in &self.layers {
            let h = tape.layer_norm(x, LN_EPS);
            let a = attend(tape, store, h, &layer.attn, pos, &freqs, &[], &mask)?;
            x = tape.add(x, a.out)?;
            let h = tape.layer_norm(x, LN_EPS);
            let (w1, b1) = (tape.param(store, layer.ff1), tape.param(store, layer.ff1_bias));
            let (w2, b2) = (tape.param(store, layer.ff2), tape.param(store, layer.ff2_bias));
            let f = tape.matmul(h, w1)?;
            let f = tape.add(f, b1)?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, w2)?;
            let f = tape.add(f, b2)?;
            x = tape.add(x, f)?;
        }
        Ok(tape.layer_norm(x, LN_EPS))
    }

    /// Logits for rows `start..start + count` of the hidden states.
    fn logits_rows<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        hidden: Var,
        start: usize,
        count: usize,
    ) -> Result<Var> {
        let rows = tape.slice_rows(hidden, start, count)?;
        let head = tape.param(store, self.head);
        tape.matmul(rows, head)
    }

    /// Summed NLL of `targets` where row `start + t` predicts `targets[t]`.
    fn nll<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        prefix: Option<Var>,
        context: &[u32],
        targets: &[u32],
    ) -> Result<Var> {
        if targets.is_empty() {
            return Err(Error::Invalid("empty target sequence".into()));
        }
        if targets.contains(&0) {
            return Err(Error::Invalid("target contains padding".into()));
        }
        // context already ends with BOS; the last target is never an input.
        let mut input = context.to_vec();
        input.extend_from_slice(&targets[..targets.len() - 1]);
        let m = prefix.map_or(0, |p| tape.shape(p)[0]);
        let h = self.hidden(tape, store, prefix, &input)?;
        let start = m + context.len() - 1;
        let logits = self.logits_rows(tape, store, h, start, targets.len())?;
        let t: Vec<usize> = targets.iter().map(|&v| v as usize).collect();
        tape.cross_entropy(logits, &t)
    }
}

/// Token ids the decoder needs besides the vocabulary size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub bos: u32,
    pub eos: u32,
    pub yes: u32,
    pub no: u32,
}

impl SpecialIds {
    pub fn from_vocab(v: &crate::tasktext::Vocab) -> Self {
        Self { bos: v.bos(), eos: v.eos(), yes: v.yes(), no: v.no() }
    }
}

/// Instruction loss: NLL of `target` given `[H_A; detail; BOS; y_<t]`.
pub fn loss_it<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    decoder: &Decoder,
    specials: SpecialIds,
    h_a: Var,
    detail: &[u32],
    target: &[u32],
) -> Result<Var> {
    let mut context = detail.to_vec();
    context.push(specials.bos);
    decoder.nll(tape, store, Some(h_a), &context, target)
}

/// Reconstruction loss: NLL of `d_g` given `[H_A; BOS; w_<t]` only.
pub fn loss_prompt<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    decoder: &Decoder,
    specials: SpecialIds,
    h_a: Var,
    d_g: &[u32],
) -> Result<Var> {
    decoder.nll(tape, store, Some(h_a), &[specials.bos], d_g)
}

pub fn loss_total<T: Real>(tape: &mut Tape<T>, l_it: Var, l_prompt: Var) -> Result<Var> {
    tape.add(l_it, l_prompt)
}

/// Next-token logits after `[H_A; detail; BOS; generated]`.
pub fn next_logits<T: Real>(
    store: &ParamStore<T>,
    decoder: &Decoder,
    specials: SpecialIds,
    h_a: &Tensor<T>,
    detail: &[u32],
    generated: &[u32],
) -> Result<Vec<f64>> {
    let mut tape = Tape::inference();
    let prefix = tape.constant(h_a.clone());
    let mut input = detail.to_vec();
    input.push(specials.bos);
    input.extend_from_slice(generated);
    let h = decoder.hidden(&mut tape, store, Some(prefix), &input)?;
    let last = tape.shape(h)[0] - 1;
    let logits = decoder.logits_rows(&mut tape, store, h, last, 1)?;
    Ok(tape.value(logits).to_f64_vec())
}

fn argmax(v: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding until EOS (included) or `max_len` tokens.
pub fn generate<T: Real>(
    store: &ParamStore<T>,
    decoder: &Decoder,
    specials: SpecialIds,
    h_a: &Tensor<T>,
    detail: &[u32],
    max_len: usize,
) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(max_len);
    while out.len() < max_len {
        let t = argmax(&next_logits(store, decoder, specials, h_a, detail, &out)?);
        out.push(t);
        if t == specials.eos {
            break;
        }
    }
    Ok(out)
}

/// `P(yes) / (P(yes) + P(no))` at the first answer position.
pub fn score_binary<T: Real>(
    store: &ParamStore<T>,
    decoder: &Decoder,
    specials: SpecialIds,
    h_a: &Tensor<T>,
    detail: &[u32],
) -> Result<f64> {
    let l = next_logits(store, decoder, specials, h_a, detail, &[])?;
    Ok(binary_from_logits(l[specials.yes as usize], l[specials.no as usize]))
}

pub fn binary_from_logits(yes: f64, no: f64) -> f64 {
    1.0 / (1.0 + (no - yes).exp())
}

/// Pretraining example: `target` is scored after `context + [BOS]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LmSequence {
    pub context: Vec<u32>,
    pub target: Vec<u32>,
}

impl LmSequence {
    pub fn bare(target: Vec<u32>) -> Self {
        Self { context: Vec::new(), target }
    }
}

/// Summed NLL of `seq.target` after `seq.context + [BOS]`, without a prefix.
fn lm_nll<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, decoder: &Decoder, bos: u32, seq: &LmSequence) -> Result<Var> {
    let mut context = seq.context.clone();
    context.push(bos);
    decoder.nll(tape, store, None, &context, &seq.target)
}

/// `exp(mean NLL per predicted token)` over a corpus.
pub fn perplexity<T: Real>(store: &ParamStore<T>, decoder: &Decoder, bos: u32, corpus: &[LmSequence]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in corpus {
        let mut tape = Tape::inference();
        let l = lm_nll(&mut tape, store, decoder, bos, seq)?;
        total += tape.value(l).item().as_f64();
        count += seq.target.len();
    }
    if count == 0 {
        return Err(Error::Invalid("empty corpus".into()));
    }
    Ok((total / count as f64).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub train_sequences: usize,
    pub heldout_sequences: usize,
    pub vocab_size: usize,
    pub initial_perplexity: f64,
    pub heldout_perplexity: f64,
    pub losses: Vec<f64>,
}

/// Trains the decoder as a language model on `corpus` (each target ends
/// with EOS), then freezes it.
pub fn pretrain_decoder<T: Real>(
    store: &mut ParamStore<T>,
    decoder: &Decoder,
    corpus: &[LmSequence],
    bos: u32,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainReport> {
    let mut rng = rng_for(seed, "decoder-pretrain");
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let held = ((corpus.len() as f64) * cfg.heldout_fraction).round() as usize;
    let held = held.clamp(1, corpus.len().saturating_sub(1).max(1));
    let heldout: Vec<LmSequence> = order[..held].iter().map(|&i| corpus[i].clone()).collect();
    let train: Vec<LmSequence> = order[held..].iter().map(|&i| corpus[i].clone()).collect();
    if train.is_empty() {
        return Err(Error::Invalid("decoder corpus too small".into()));
    }
    let initial_perplexity = perplexity(store, decoder, bos, &heldout)?;
    let ids = decoder.params();
    let mut adam = Adam::new(store, &ids);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut grads = GradSet::default();
        let mut loss = 0.0;
        let mut tokens = 0usize;
        for _ in 0..cfg.batch_size {
            let seq = &train[rng.random_range(0..train.len())];
            let mut tape = Tape::new();
            let l = lm_nll(&mut tape, store, decoder, bos, seq)?;
            loss += tape.value(l).item().as_f64();
            tokens += seq.target.len();
            tape.backward(l)?;
            grads.add(&tape.param_grads())?;
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("decoder pretraining loss at step {step}")));
        }
        losses.push(loss / tokens as f64);
        store.accumulate(&grads)?;
        // Per-token mean gradient keeps the step size independent of length.
        let inv = T::of(1.0 / tokens as f64);
        for &id in &ids {
            if let Some(g) = store.get_mut(id).grad.as_mut() {
                g.scale_in_place(inv);
            }
        }
        adam.step(store, &ids, |_| cfg.lr)?;
    }
    decoder.freeze(store);
    let heldout_perplexity = perplexity(store, decoder, bos, &heldout)?;
    Ok(PretrainReport {
        steps: cfg.steps,
        train_sequences: train.len(),
        heldout_sequences: heldout.len(),
        vocab_size: decoder.vocab_size,
        initial_perplexity,
        heldout_perplexity,
        losses,
    })
}

/// Largest count answer included in the pretraining corpus.
pub const MAX_COUNT_ANSWER: u32 = 20;

fn random_center(kind: CenterKind, n: usize, rng: &mut impl Rng) -> Center {
    let a = rng.random_range(0..n);
    match kind {
        CenterKind::Node => Center::Node(a),
        CenterKind::Pair if n > 1 => Center::Pair(a, (a + rng.random_range(1..n)) % n),
        CenterKind::Pair => Center::Node(a),
        CenterKind::Whole => Center::Whole,
    }
}

fn random_label(family: TaskFamily, num_classes: usize, rng: &mut impl Rng) -> Label {
    match family.answer_kind() {
        AnswerKind::Binary => Label::Binary(rng.random_bool(0.5)),
        AnswerKind::Class => Label::Class(rng.random_range(0..num_classes)),
        AnswerKind::Number => {
            // Zipf over 0..=MAX: small numbers dominate, as in natural text
            let zipf = Zipf::new((MAX_COUNT_ANSWER + 1) as f64, 1.0).expect("valid zipf");
            Label::Count(zipf.sample(rng) as u32 - 1)
        }
    }
}

/// Pretraining corpus over `graphs`:
///
/// - every legal answer string of every family;
/// - `descriptions` canonical descriptions of k-hop samples around random
///   nodes or node pairs;
/// - `instructions` rendered task instructions for `families`, each followed
///   by a random legal answer (uniform for yes/no and classes, Zipf for
///   numbers). A `hinted_fraction` of them state that answer before the
///   instruction. Answers carry no label information, so the decoder learns
///   answer formats and to read answers from context, but nothing about
///   solving the tasks.
pub fn pretrain_corpus(
    text: &TaskText,
    graphs: &[Graph],
    families: &[TaskFamily],
    num_classes: usize,
    sampling: SamplingConfig,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<Vec<LmSequence>> {
    if graphs.is_empty() || families.is_empty() {
        return Err(Error::Invalid("decoder corpus needs graphs and families".into()));
    }
    if !(0.0..=1.0).contains(&cfg.hinted_fraction) {
        return Err(Error::Invalid(format!("hinted_fraction {} outside [0, 1]", cfg.hinted_fraction)));
    }
    let mut corpus = Vec::new();
    for family in TaskFamily::ALL {
        corpus.extend(legal_answers(text, family, num_classes, MAX_COUNT_ANSWER).into_iter().map(LmSequence::bare));
    }
    let mut rng = rng_for(seed, "decoder-corpus");
    for k in 0..cfg.descriptions {
        let g = &graphs[rng.random_range(0..graphs.len())];
        let kind = if k % 2 == 1 { CenterKind::Pair } else { CenterKind::Node };
        let center = random_center(kind, g.num_nodes(), &mut rng);
        let sample = extract_khop(g, center, sampling.hop_radius, sampling.max_nodes)?;
        corpus.push(LmSequence::bare(text.render_graph_description(&sample)));
    }
    for k in 0..cfg.instructions {
        let family = families[k % families.len()];
        let g = &graphs[rng.random_range(0..graphs.len())];
        let center = random_center(family.center_kind(), g.num_nodes(), &mut rng);
        if matches!((family.center_kind(), center), (CenterKind::Pair, Center::Node(_))) {
            continue;
        }
        let label = random_label(family, num_classes, &mut rng);
        let inst = TaskInstance::new(text, family, g, center, label, sampling, num_classes)?;
        // some instructions are preceded by a segment stating the answer,
        // so the decoder learns to read answer evidence from earlier positions
        let mut context = Vec::new();
        if rng.random_bool(cfg.hinted_fraction) {
            context.extend(inst.target_tokens.iter().copied().filter(|&t| t != text.vocab.eos()));
            context.push(text.vocab.sep());
        }
        context.extend(inst.detail_tokens);
        corpus.push(LmSequence { context, target: inst.target_tokens });
    }
    Ok(corpus)
}
