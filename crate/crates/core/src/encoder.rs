//! Input assembly `[graph; text; align]`, the adapter-augmented attention
//! stack and the alignment-token read-out.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::graphcore::SubgraphSample;
use crate::instance::TaskInstance;
use crate::numerics::{ParamGroup, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::seed::rng_for;
use crate::structattn::{
    assign_positions, attend, bucket, build_mask, graph_head_biases, head_freqs, path_weight_matrix, AttentionParams,
    BiasTables, MaskSpec, PositionAssignment, Projection, MAX_DIST_BUCKET,
};
use crate::tasktext::{TaskText, TextEmbedder};
use crate::{Error, Result};

pub use crate::structattn::LowRankAdapter;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_h: usize,
    pub d_k: usize,
    pub heads: usize,
    pub layers: usize,
    /// Number of alignment tokens.
    pub m: usize,
    /// Adapter rank.
    pub rank: usize,
    pub alpha: f64,
    /// Hidden width of the edge perceptron.
    pub d_mlp: usize,
    pub ffn_mult: usize,
    pub max_dist_bucket: usize,
    pub hash_buckets: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_h: 32,
            d_k: 32,
            heads: 4,
            layers: 2,
            m: 8,
            rank: 4,
            alpha: 8.0,
            d_mlp: 16,
            ffn_mult: 4,
            max_dist_bucket: MAX_DIST_BUCKET,
            hash_buckets: 256,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d_h == 0 || self.d_k == 0 || self.layers == 0 || self.rank == 0 || self.d_mlp == 0 {
            return bad("encoder dimensions must be positive".into());
        }
        if self.m == 0 {
            return bad("at least one alignment token is required".into());
        }
        if self.heads == 0 || self.d_k % self.heads != 0 || (self.d_k / self.heads) % 2 != 0 {
            return bad(format!("d_k {} must split into {} heads of even width", self.d_k, self.heads));
        }
        if !(self.alpha > 0.0) {
            return bad("adapter alpha must be positive".into());
        }
        Ok(())
    }

    /// Number of trainable scalars, counted from the matrix shapes.
    pub fn trainable_count(&self) -> usize {
        let r = self.rank;
        let adapters = 3 * (self.d_h * r + r * self.d_k) + (self.d_k * r + r * self.d_h);
        let mlp = self.d_h * self.d_mlp + self.d_mlp + self.d_mlp * self.heads + self.heads;
        self.layers * adapters + self.m * self.d_h + (self.max_dist_bucket + 2) * self.heads + mlp + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn: AttentionParams,
    pub ff1: ParamId,
    pub ff1_bias: ParamId,
    pub ff2: ParamId,
    pub ff2_bias: ParamId,
}

/// The attention blocks. Base weights are frozen; only adapters train.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStack {
    pub layers: Vec<EncoderLayer>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentTokens {
    /// `[m, d_h]`
    pub embeddings: ParamId,
    pub m: usize,
}

/// Every encoder parameter handle. Values live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub stack: EncoderStack,
    pub align: AlignmentTokens,
    pub tables: BiasTables,
    /// Shared position of all graph tokens.
    pub graph_pos: ParamId,
}

fn normal<T: Real>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let d = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::of(d.sample(rng))).collect()).expect("shape")
}

impl Encoder {
    /// Adds all encoder parameters to `store`. Base weights are random and
    /// frozen; adapter up-matrices start at zero.
    pub fn init<T: Real>(store: &mut ParamStore<T>, config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "encoder-init");
        let (d_h, d_k, r) = (config.d_h, config.d_k, config.rank);
        let scale = config.alpha / r as f64;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mut proj = |name: &str, din: usize, dout: usize, store: &mut ParamStore<T>| {
                let base = store.add(
                    format!("enc.{l}.{name}.base"),
                    normal(&mut rng, &[din, dout], 1.0 / (din as f64).sqrt()),
                    ParamGroup::Base,
                    false,
                );
                let down = store.add(
                    format!("enc.{l}.{name}.lora_down"),
                    normal(&mut rng, &[din, r], 1.0 / (din as f64).sqrt()),
                    ParamGroup::Adapter,
                    true,
                );
                let up = store.add(format!("enc.{l}.{name}.lora_up"), Tensor::zeros(&[r, dout]), ParamGroup::Adapter, true);
                Projection { base, adapter: Some(LowRankAdapter { down, up, scale }) }
            };
            let attn = AttentionParams {
                q: proj("wq", d_h, d_k, store),
                k: proj("wk", d_h, d_k, store),
                v: proj("wv", d_h, d_k, store),
                o: proj("wo", d_k, d_h, store),
                heads: config.heads,
                d_k,
            };
            let hidden = config.ffn_mult * d_h;
            let ff1 = store.add(
                format!("enc.{l}.ff1"),
                normal(&mut rng, &[d_h, hidden], 1.0 / (d_h as f64).sqrt()),
                ParamGroup::Base,
                false,
            );
            let ff1_bias = store.add(format!("enc.{l}.ff1_bias"), Tensor::zeros(&[hidden]), ParamGroup::Base, false);
            let ff2 = store.add(
                format!("enc.{l}.ff2"),
                normal(&mut rng, &[hidden, d_h], 1.0 / (hidden as f64).sqrt()),
                ParamGroup::Base,
                false,
            );
            let ff2_bias = store.add(format!("enc.{l}.ff2_bias"), Tensor::zeros(&[d_h]), ParamGroup::Base, false);
            layers.push(EncoderLayer { attn, ff1, ff1_bias, ff2, ff2_bias });
        }
        let embeddings = store.add("enc.align", normal(&mut rng, &[config.m, d_h], 0.02), ParamGroup::Alignment, true);
        let tables = BiasTables::init(store, d_h, config.d_mlp, config.heads, config.max_dist_bucket, &mut rng);
        let graph_pos = store.add("enc.graph_pos", Tensor::scalar(T::zero()), ParamGroup::GraphPos, true);
        Ok(Self {
            config,
            stack: EncoderStack { layers },
            align: AlignmentTokens { embeddings, m: config.m },
            tables,
            graph_pos,
        })
    }

    /// The trainable subset: adapters, alignment embeddings, distance table,
    /// edge perceptron and the graph position.
    pub fn trainable_params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for layer in &self.stack.layers {
            for p in [layer.attn.q, layer.attn.k, layer.attn.v, layer.attn.o] {
                if let Some(a) = p.adapter {
                    out.push(a.down);
                    out.push(a.up);
                }
            }
        }
        out.push(self.align.embeddings);
        out.extend(self.tables.ids());
        out.push(self.graph_pos);
        out
    }

    /// Frozen base weights of the stack.
    pub fn base_params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for layer in &self.stack.layers {
            for p in [layer.attn.q, layer.attn.k, layer.attn.v, layer.attn.o] {
                out.push(p.base);
            }
            out.extend([layer.ff1, layer.ff1_bias, layer.ff2, layer.ff2_bias]);
        }
        out
    }

    pub fn freqs<T: Real>(&self) -> Result<Arc<[T]>> {
        head_freqs(self.config.d_k, self.config.heads)
    }
}

/// Everything `encode` needs apart from parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub n: usize,
    pub l: usize,
    pub m: usize,
    pub d_h: usize,
    /// `[(n + l), d_h]` graph-token then text-token embeddings.
    pub static_tokens: Vec<f64>,
    pub positions: PositionAssignment,
    pub mask: MaskSpec,
    /// Distance-table row for each ordered graph pair, row-major `n x n`.
    pub distance_rows: Vec<usize>,
    /// `[edges, d_h]` description embeddings.
    pub edge_embeddings: Vec<f64>,
    pub edge_count: usize,
    /// `[n*n, edges]` shortest-path averaging weights.
    pub path_weights: Vec<f64>,
}

/// Embeds graph and text tokens for encoder input. Token embeddings for the
/// whole vocabulary are computed once.
#[derive(Debug, Clone)]
pub struct InputBuilder {
    pub embedder: TextEmbedder,
    token_table: Vec<Vec<f64>>,
}

impl InputBuilder {
    pub fn new(embedder: TextEmbedder, text: &TaskText) -> Self {
        let token_table = text.vocab.tokens().iter().map(|t| embedder.embed_text(t)).collect();
        Self { embedder, token_table }
    }

    /// Builds `[T_G; T_desc; A]` for a sample. `graph` is the sample's
    /// induced graph in local indexing and `desc` the description token ids.
    pub fn assemble(
        &self,
        sample: &SubgraphSample,
        graph: &crate::graphcore::Graph,
        desc: &[u32],
        m: usize,
        max_dist_bucket: usize,
    ) -> Result<EncoderInput> {
        let (n, l) = (sample.len(), desc.len());
        if 2 * m > n + l {
            return Err(Error::Invalid(format!("{m} alignment tokens exceed half of {n} graph + {l} text tokens")));
        }
        if graph.num_nodes() != n {
            return Err(Error::Invalid(format!("graph has {} nodes, sample {n}", graph.num_nodes())));
        }
        let d_h = self.embedder.dim();
        let mut static_tokens = Vec::with_capacity((n + l) * d_h);
        for a in 0..n {
            static_tokens.extend(self.embedder.embed_text(graph.node_text(a)));
        }
        for &t in desc {
            let row = self
                .token_table
                .get(t as usize)
                .ok_or_else(|| Error::UnknownToken(format!("id {t}")))?;
            static_tokens.extend_from_slice(row);
        }
        let distance_rows = sample.spd.as_slice().iter().map(|&d| bucket(d, max_dist_bucket)).collect();
        let (edges, path_weights) = path_weight_matrix(sample);
        let mut edge_embeddings = Vec::with_capacity(edges.len() * d_h);
        for &(a, b) in &edges {
            edge_embeddings.extend(self.embedder.embed_text(graph.description(a, b).unwrap_or_default()));
        }
        Ok(EncoderInput {
            n,
            l,
            m,
            d_h,
            static_tokens,
            positions: assign_positions(n, l, m),
            mask: build_mask(n, l, m),
            distance_rows,
            edge_embeddings,
            edge_count: edges.len(),
            path_weights,
        })
    }

    /// Input for an instance with its family's task description.
    pub fn assemble_input(&self, inst: &TaskInstance, text: &TaskText, encoder: &Encoder) -> Result<EncoderInput> {
        let desc = text.render_desc(inst.family)?;
        self.assemble(&inst.sample, &inst.graph, &desc, encoder.config.m, encoder.config.max_dist_bucket)
    }

    /// Input for an instance with the task-agnostic description.
    pub fn assemble_generic(&self, inst: &TaskInstance, text: &TaskText, encoder: &Encoder) -> Result<EncoderInput> {
        let desc = text.render_generic_desc()?;
        self.assemble(&inst.sample, &inst.graph, &desc, encoder.config.m, encoder.config.max_dist_bucket)
    }
}

fn constant<T: Real>(tape: &mut Tape<T>, shape: Vec<usize>, data: &[f64]) -> Result<Var> {
    Ok(tape.constant(Tensor::new(shape, data.iter().map(|&v| T::of(v)).collect())?))
}

/// Runs the stack and returns `H_A`, the `[m, d_h]` hidden states at the
/// alignment positions.
pub fn encode<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    encoder: &Encoder,
    input: &EncoderInput,
) -> Result<Var> {
    let (n, l, m, d_h) = (input.n, input.l, input.m, input.d_h);
    let total = n + l + m;
    if d_h != encoder.config.d_h || m != encoder.config.m {
        return Err(Error::Invalid(format!(
            "input built for d_h={d_h}, m={m}; encoder has d_h={}, m={}",
            encoder.config.d_h, encoder.config.m
        )));
    }
    let stat = constant(tape, vec![n + l, d_h], &input.static_tokens)?;
    let align = tape.param(store, encoder.align.embeddings);
    let mut x = tape.concat_rows(&[stat, align])?;

    let p_g = tape.param(store, encoder.graph_pos);
    let positions = input.positions.on_tape(tape, p_g)?;
    let freqs = encoder.freqs::<T>()?;

    let table = tape.param(store, encoder.tables.distance_table);
    let mut bias = tape.gather_rows(table, &input.distance_rows)?;
    if input.edge_count > 0 {
        let emb = constant(tape, vec![input.edge_count, d_h], &input.edge_embeddings)?;
        let mlp = crate::structattn::edge_mlp_forward(tape, store, &encoder.tables.edge_mlp, emb)?;
        let p = constant(tape, vec![n * n, input.edge_count], &input.path_weights)?;
        let edge = tape.matmul(p, mlp)?;
        bias = tape.add(bias, edge)?;
    }
    let head_biases = graph_head_biases(tape, bias, n, total)?;

    for (li, layer) in encoder.stack.layers.iter().enumerate() {
        let a = attend(tape, store, x, &layer.attn, positions, &freqs, &head_biases, &input.mask)?;
        let h = tape.add(x, a.out)?;
        let h = tape.layer_norm(h, LN_EPS);
        let w1 = tape.param(store, layer.ff1);
        let b1 = tape.param(store, layer.ff1_bias);
        let w2 = tape.param(store, layer.ff2);
        let b2 = tape.param(store, layer.ff2_bias);
        let f = tape.matmul(h, w1)?;
        let f = tape.add(f, b1)?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, w2)?;
        let f = tape.add(f, b2)?;
        let h = tape.add(h, f)?;
        x = tape.layer_norm(h, LN_EPS);
        if !tape.value(x).all_finite() {
            return Err(Error::NonFinite(format!("encoder layer {li} activations")));
        }
    }
    tape.slice_rows(x, n + l, m)
}
