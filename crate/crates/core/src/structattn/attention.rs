use std::sync::Arc;

use super::MaskSpec;
use crate::numerics::{ParamId, ParamStore, Real, Tape, Var};
use crate::{Error, Result};

/// Low-rank update `scale * down * up` added to a frozen projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowRankAdapter {
    /// `[d_in, r]`
    pub down: ParamId,
    /// `[r, d_out]`, zero at initialization.
    pub up: ParamId,
    /// `alpha / r`
    pub scale: f64,
}

/// A projection matrix with an optional adapter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub base: ParamId,
    pub adapter: Option<LowRankAdapter>,
}

impl Projection {
    /// Effective weight on the tape.
    pub fn weight<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<Var> {
        let w = tape.param(store, self.base);
        let Some(a) = self.adapter else { return Ok(w) };
        let (down, up) = (tape.param(store, a.down), tape.param(store, a.up));
        let delta = tape.matmul(down, up)?;
        let delta = tape.scale(delta, T::of(a.scale));
        tape.add(w, delta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// `[d_h, d_k]`
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
    /// `[d_k, d_h]`
    pub o: Projection,
    pub heads: usize,
    pub d_k: usize,
}

pub struct AttendOutput {
    /// `[tokens, d_h]`
    pub out: Var,
    /// Per-head `[tokens, tokens]` attention weights.
    pub weights: Vec<Var>,
}

/// Multi-head attention with rotary positions, additive per-head biases and
/// the directional mask.
///
/// Head `h` scores query `i` against key `j` as
/// `rope(q_i, k_j, pos_i - pos_j) / sqrt(d_head) + bias_h[i, j]`; forbidden
/// pairs are set to `-inf` before the row softmax. `head_biases` is either
/// empty or holds one `[tokens, tokens]` matrix per head.
#[allow(clippy::too_many_arguments)]
pub fn attend<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    params: &AttentionParams,
    positions: Var,
    freqs: &Arc<[T]>,
    head_biases: &[Var],
    mask: &MaskSpec,
) -> Result<AttendOutput> {
    let tokens = tape.shape(x)[0];
    if tokens != mask.len() {
        return Err(Error::Shape { op: "attend", lhs: tape.shape(x).to_vec(), rhs: vec![mask.len()] });
    }
    if !head_biases.is_empty() && head_biases.len() != params.heads {
        return Err(Error::Invalid(format!("{} bias heads for {} attention heads", head_biases.len(), params.heads)));
    }
    let d_head = params.d_k / params.heads;
    let wq = params.q.weight(tape, store)?;
    let wk = params.k.weight(tape, store)?;
    let wv = params.v.weight(tape, store)?;
    let wo = params.o.weight(tape, store)?;
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let q = tape.rotary(q, positions, freqs.clone())?;
    let k = tape.rotary(k, positions, freqs.clone())?;
    let scale = T::one() / T::of(d_head as f64).sqrt();

    let mut heads = Vec::with_capacity(params.heads);
    let mut weights = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let qh = tape.slice_cols(q, h * d_head, d_head)?;
        let kh = tape.slice_cols(k, h * d_head, d_head)?;
        let vh = tape.slice_cols(v, h * d_head, d_head)?;
        let kt = tape.transpose(kh)?;
        let s = tape.matmul(qh, kt)?;
        let mut s = tape.scale(s, scale);
        if let Some(&b) = head_biases.get(h) {
            s = tape.add(s, b)?;
        }
        if !tape.value(s).all_finite() {
            return Err(Error::NonFinite(format!("attention logits in head {h}")));
        }
        let s = tape.masked_fill(s, mask.allowed.clone())?;
        let a = tape.softmax(s);
        heads.push(tape.matmul(a, vh)?);
        weights.push(a);
    }
    let cat = tape.concat_cols(&heads)?;
    let out = tape.matmul(cat, wo)?;
    Ok(AttendOutput { out, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, ParamGroup, Tensor};
    use crate::seed::rng_for;
    use crate::structattn::{assign_positions, build_mask, head_freqs, rope_score, rotary_freqs};
    use rand::Rng;

    fn rand_tensor(rng: &mut impl Rng, shape: &[usize], s: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-s..s)).collect()).unwrap()
    }

    fn params(store: &mut ParamStore<f64>, d_h: usize, d_k: usize, heads: usize, adapters: bool, seed: u64) -> AttentionParams {
        let mut rng = rng_for(seed, "attn");
        let mut proj = |name: &str, din: usize, dout: usize| {
            let base = store.add(format!("{name}.base"), rand_tensor(&mut rng, &[din, dout], 0.5), ParamGroup::Base, false);
            let adapter = adapters.then(|| LowRankAdapter {
                down: store.add(format!("{name}.down"), rand_tensor(&mut rng, &[din, 2], 0.5), ParamGroup::Adapter, true),
                up: store.add(format!("{name}.up"), rand_tensor(&mut rng, &[2, dout], 0.5), ParamGroup::Adapter, true),
                scale: 0.5,
            });
            Projection { base, adapter }
        };
        AttentionParams {
            q: proj("q", d_h, d_k),
            k: proj("k", d_h, d_k),
            v: proj("v", d_h, d_k),
            o: proj("o", d_k, d_h),
            heads,
            d_k,
        }
    }

    /// Independent reference: explicit loops over heads, queries and keys.
    fn reference(
        x: &Tensor<f64>,
        store: &ParamStore<f64>,
        p: &AttentionParams,
        pos: &[f64],
        mask: &MaskSpec,
        bias: Option<&[Vec<f64>]>,
    ) -> Vec<f64> {
        let eff = |pr: &Projection| {
            let mut w = store.value(pr.base).clone();
            if let Some(a) = pr.adapter {
                let d = store.value(a.down).matmul(store.value(a.up)).unwrap();
                for (o, v) in w.data_mut().iter_mut().zip(d.data()) {
                    *o += a.scale * v;
                }
            }
            w
        };
        let (q, k, v) = (x.matmul(&eff(&p.q)).unwrap(), x.matmul(&eff(&p.k)).unwrap(), x.matmul(&eff(&p.v)).unwrap());
        let t = x.rows();
        let dh = p.d_k / p.heads;
        let freqs = rotary_freqs(dh).unwrap();
        let mut cat = vec![0.0; t * p.d_k];
        for h in 0..p.heads {
            for i in 0..t {
                let qi = &q.row(i)[h * dh..(h + 1) * dh];
                let mut logits = vec![f64::NEG_INFINITY; t];
                for (j, l) in logits.iter_mut().enumerate() {
                    if mask.allows(i, j) {
                        let kj = &k.row(j)[h * dh..(h + 1) * dh];
                        *l = rope_score(qi, kj, pos[i] - pos[j], &freqs).unwrap() / (dh as f64).sqrt()
                            + bias.map_or(0.0, |b| b[h][i * t + j]);
                    }
                }
                let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                for j in 0..t {
                    let a = (logits[j] - mx).exp() / z;
                    for c in 0..dh {
                        cat[i * p.d_k + h * dh + c] += a * v.row(j)[h * dh + c];
                    }
                }
            }
        }
        Tensor::new(vec![t, p.d_k], cat).unwrap().matmul(&eff(&p.o)).unwrap().into_data()
    }

    fn run(
        store: &ParamStore<f64>,
        p: &AttentionParams,
        x: &Tensor<f64>,
        pos: &[f64],
        mask: &MaskSpec,
        bias: Option<&[Vec<f64>]>,
    ) -> (Vec<f64>, Vec<Tensor<f64>>) {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pv = tape.constant(Tensor::new(vec![pos.len()], pos.to_vec()).unwrap());
        let t = x.rows();
        let biases: Vec<Var> = bias
            .map(|b| b.iter().map(|m| tape.constant(Tensor::new(vec![t, t], m.clone()).unwrap())).collect())
            .unwrap_or_default();
        let freqs = head_freqs::<f64>(p.d_k, p.heads).unwrap();
        let o = attend(&mut tape, store, xv, p, pv, &freqs, &biases, mask).unwrap();
        (tape.value(o.out).data().to_vec(), o.weights.iter().map(|&w| tape.value(w).clone()).collect())
    }

    #[test]
    fn single_graph_token() {
        let mut store = ParamStore::new();
        let p = params(&mut store, 4, 4, 1, false, 1);
        let x = Tensor::from_f64(vec![1, 4], &[0.3, -0.2, 0.8, 0.1]).unwrap();
        let (out, w) = run(&store, &p, &x, &[0.0], &build_mask(1, 0, 0), None);
        assert_eq!(w[0].data(), &[1.0]);
        let expect = x.matmul(store.value(p.v.base)).unwrap().matmul(store.value(p.o.base)).unwrap();
        for (a, b) in out.iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_plain_attention_at_offset_zero() {
        let mut store = ParamStore::new();
        let p = params(&mut store, 8, 8, 2, true, 2);
        let mut rng = rng_for(9, "x");
        let x = rand_tensor(&mut rng, &[7, 8], 1.0);
        let mask = build_mask(3, 2, 2);
        let pos = vec![0.0; 7];
        let (out, _) = run(&store, &p, &x, &pos, &mask, None);
        let r = reference(&x, &store, &p, &pos, &mask, None);
        for (a, b) in out.iter().zip(&r) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn matches_reference_with_positions_and_bias() {
        let mut store = ParamStore::new();
        let p = params(&mut store, 8, 8, 2, true, 3);
        let mut rng = rng_for(10, "x");
        let x = rand_tensor(&mut rng, &[8, 8], 1.0);
        let pa = assign_positions(3, 3, 2);
        let pos = pa.values(0.7);
        let mask = build_mask(3, 3, 2);
        let bias: Vec<Vec<f64>> = (0..2)
            .map(|_| {
                let mut b = vec![0.0; 64];
                for i in 0..3 {
                    for j in 0..3 {
                        b[i * 8 + j] = rng.random_range(-1.0..1.0);
                    }
                }
                b
            })
            .collect();
        let (out, w) = run(&store, &p, &x, &pos, &mask, Some(&bias));
        let r = reference(&x, &store, &p, &pos, &mask, Some(&bias));
        for (a, b) in out.iter().zip(&r) {
            assert!((a - b).abs() < 1e-9);
        }
        for h in &w {
            for q in 0..8 {
                let row = h.row(q);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (k, &a) in row.iter().enumerate() {
                    if !mask.allows(q, k) {
                        assert_eq!(a, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let p = params(&mut store, 8, 8, 2, true, 4);
        let mut rng = rng_for(11, "x");
        let x = rand_tensor(&mut rng, &[12, 8], 1.0);
        let pg = store.add("p_g", Tensor::scalar(0.3), ParamGroup::GraphPos, true);
        let pa = assign_positions(4, 6, 2);
        let mask = build_mask(4, 6, 2);
        let ids: Vec<ParamId> = store.iter().filter(|(_, q)| q.requires_grad).map(|(id, _)| id).collect();
        let freqs = head_freqs::<f64>(8, 2).unwrap();
        let rep = grad_check(
            &mut store,
            &ids,
            |s, tape| {
                let xv = tape.constant(x.clone());
                let pgv = tape.param(s, pg);
                let pos = pa.on_tape(tape, pgv)?;
                let o = attend(tape, s, xv, &p, pos, &freqs, &[], &mask)?;
                let sq = tape.mul(o.out, o.out)?;
                Ok(tape.sum(sq))
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }
}
