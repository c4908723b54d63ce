//! Scaled dot-product attention and the residual multi-head block used by
//! every encoder and decoder layer.
//!
//! The block follows the pattern: queries and keys arrive with whatever
//! positional or role encodings the caller added, values and the residual
//! stream stay un-encoded, and the output is
//! `layer_norm(residual + dropout(multi_head(q, k, v)))`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-head projection parameters plus the block's output projection and
/// normalization, registered in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub wo: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub head_count: usize,
    pub model_dim: usize,
    pub dropout_rate: f64,
}

impl AttentionParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        model_dim: usize,
        head_count: usize,
        dropout_rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if head_count == 0 || model_dim % head_count != 0 {
            return Err(Error::Config(format!(
                "attention: model_dim {model_dim} not divisible by head_count {head_count}"
            )));
        }
        let head_dim = model_dim / head_count;
        let mut proj = |store: &mut ParamStore, name: String| {
            store.register(name, fan_in_uniform(&[model_dim, head_dim], rng))
        };
        let wq = (0..head_count)
            .map(|h| proj(store, format!("{prefix}.wq{h}")))
            .collect();
        let wk = (0..head_count)
            .map(|h| proj(store, format!("{prefix}.wk{h}")))
            .collect();
        let wv = (0..head_count)
            .map(|h| proj(store, format!("{prefix}.wv{h}")))
            .collect();
        let wo = store.register(
            format!("{prefix}.wo"),
            fan_in_uniform(&[model_dim, model_dim], rng),
        );
        let ln_gain = store.register(
            format!("{prefix}.ln_gain"),
            Tensor::new(vec![model_dim], vec![1.0; model_dim])?,
        );
        let ln_bias = store.register(
            format!("{prefix}.ln_bias"),
            Tensor::new(vec![model_dim], vec![0.0; model_dim])?,
        );
        Ok(AttentionParams {
            wq,
            wk,
            wv,
            wo,
            ln_gain,
            ln_bias,
            head_count,
            model_dim,
            dropout_rate,
        })
    }
}

/// Uniform init on ±1/sqrt(fan_in); fan_in is the first extent.
pub fn fan_in_uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (shape[0] as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// Shared state for one forward pass: the tape, the parameter bindings and
/// the dropout regime.
pub struct ForwardCtx<'a> {
    pub tape: &'a mut Tape,
    pub vars: &'a crate::tensor::Bound,
    pub training: bool,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval(tape: &'a mut Tape, vars: &'a crate::tensor::Bound) -> Self {
        ForwardCtx {
            tape,
            vars,
            training: false,
            rng: None,
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars.var(id)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !self.training || rate <= 0.0 {
            return Ok(x);
        }
        let rng = self
            .rng
            .as_deref_mut()
            .ok_or_else(|| Error::Config("training forward needs an rng".into()))?;
        let keep = 1.0 - rate;
        let n = self.tape.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        self.tape.mul_mask(x, mask)
    }
}

/// `softmax(Q·Kᵀ/√d_k)·V` with the row-stochastic weights returned alongside
/// the output.
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (
        tape.value(q).shape.clone(),
        tape.value(k).shape.clone(),
        tape.value(v).shape.clone(),
    );
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(Error::Shape(format!(
            "attention: q {qs:?}, k {ks:?}, v {vs:?}"
        )));
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (qs[1] as f64).sqrt());
    let weights = tape.softmax(scaled, 1)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Output of [`att_block`]: the normalized stream plus the head-mean
/// attention map, which the visual-attention pathway reads as a heat map.
pub struct AttOutput {
    pub out: Var,
    pub weights: Var,
}

/// Multi-head attention with residual connection and layer normalization.
///
/// `queries_in` and `key_input` carry any encodings the caller added;
/// `residual_source` is the un-encoded stream the output is added to.
pub fn att_block(
    ctx: &mut ForwardCtx,
    queries_in: Var,
    key_input: Var,
    value_input: Var,
    residual_source: Var,
    params: &AttentionParams,
) -> Result<AttOutput> {
    let d = params.model_dim;
    for (v, role) in [
        (queries_in, "queries"),
        (key_input, "keys"),
        (value_input, "values"),
        (residual_source, "residual"),
    ] {
        let s = &ctx.tape.value(v).shape;
        if s.len() != 2 || s[1] != d {
            return Err(Error::Shape(format!("att_block {role}: {s:?} vs d={d}")));
        }
    }
    let mut head_outs = Vec::with_capacity(params.head_count);
    let mut head_weights = Vec::with_capacity(params.head_count);
    for h in 0..params.head_count {
        let qh = ctx.tape.matmul(queries_in, ctx.var(params.wq[h]))?;
        let kh = ctx.tape.matmul(key_input, ctx.var(params.wk[h]))?;
        let vh = ctx.tape.matmul(value_input, ctx.var(params.wv[h]))?;
        let (out, w) = scaled_dot_attention(ctx.tape, qh, kh, vh)?;
        head_outs.push(out);
        head_weights.push(w);
    }
    let cat = ctx.tape.concat(&head_outs, 1)?;
    let projected = ctx.tape.matmul(cat, ctx.var(params.wo))?;
    let dropped = ctx.dropout(projected, params.dropout_rate)?;
    let summed = ctx.tape.add(residual_source, dropped)?;
    let out = ctx.tape.layer_norm(
        summed,
        ctx.var(params.ln_gain),
        ctx.var(params.ln_bias),
        LAYER_NORM_EPS,
    )?;
    let wsum = ctx.tape.add_many(&head_weights)?;
    let weights = ctx.tape.scale(wsum, 1.0 / params.head_count as f64);
    Ok(AttOutput { out, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn uniform_weights_when_scores_constant() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::zeros(vec![2, 3]));
        let k = tape.leaf(Tensor::from_rows(&[
            &[1.0, 0.5, -2.0],
            &[0.0, 1.0, 3.0],
            &[4.0, 4.0, 4.0],
        ]));
        let v = tape.leaf(Tensor::from_rows(&[&[3.0, 0.0], &[0.0, 3.0], &[3.0, 3.0]]));
        let (out, w) = scaled_dot_attention(&mut tape, q, k, v).unwrap();
        for &wv in &tape.value(w).data {
            assert_close(wv, 1.0 / 3.0, 1e-12);
        }
        // Column means of V.
        for row in tape.value(out).data.chunks(2) {
            assert_close(row[0], 2.0, 1e-12);
            assert_close(row[1], 2.0, 1e-12);
        }
    }

    #[test]
    fn single_key_wins_regardless_of_query() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::from_rows(&[&[0.3, -5.0], &[100.0, 2.0]]));
        let k = tape.leaf(Tensor::from_rows(&[&[1.0, 1.0]]));
        let v = tape.leaf(Tensor::from_rows(&[&[7.0, -4.0]]));
        let (out, w) = scaled_dot_attention(&mut tape, q, k, v).unwrap();
        assert_eq!(tape.value(w).data, vec![1.0, 1.0]);
        for row in tape.value(out).data.chunks(2) {
            assert_eq!(row, [7.0, -4.0]);
        }
    }

    #[test]
    fn identity_queries_hand_value() {
        // QKᵀ/√2 has 1/√2 on the diagonal; row 0 weights are
        // softmax([0.7071, 0]).
        let mut tape = Tape::new();
        let eye = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let q = tape.leaf(eye.clone());
        let k = tape.leaf(eye);
        let v = tape.leaf(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let (_, w) = scaled_dot_attention(&mut tape, q, k, v).unwrap();
        assert_close(tape.value(w).at2(0, 0), 0.6698, 5e-4);
        assert_close(tape.value(w).at2(0, 1), 0.3302, 5e-4);
    }

    #[test]
    fn weight_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = fan_in_uniform(&[4, 6], &mut rng);
        let k = fan_in_uniform(&[5, 6], &mut rng);
        let v = fan_in_uniform(&[5, 6], &mut rng);
        let mut tape = Tape::new();
        let (q, k, v) = (tape.leaf(q), tape.leaf(k), tape.leaf(v));
        let (_, w) = scaled_dot_attention(&mut tape, q, k, v).unwrap();
        assert_eq!(tape.value(w).shape, vec![4, 5]);
        for row in tape.value(w).data.chunks(5) {
            assert_close(row.iter().sum::<f64>(), 1.0, 1e-12);
        }
    }

    fn block_fixture(
        d: usize,
        h: usize,
        n_q: usize,
        n_k: usize,
        seed: u64,
    ) -> (ParamStore, AttentionParams, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = AttentionParams::init(&mut store, "att", d, h, 0.0, &mut rng).unwrap();
        let queries = fan_in_uniform(&[n_q, d], &mut rng);
        let keys = fan_in_uniform(&[n_k, d], &mut rng);
        (store, params, queries, keys)
    }

    #[test]
    fn zero_projections_reduce_to_normalized_residual() {
        let (mut store, params, queries, keys) = block_fixture(4, 2, 3, 5, 2);
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            if name.contains(".w") {
                store.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let q = tape.leaf(queries.clone());
        let k = tape.leaf(keys);
        let mut ctx = ForwardCtx::eval(&mut tape, &bound);
        let out = att_block(&mut ctx, q, k, k, q, &params).unwrap();

        let mut tape2 = Tape::new();
        let x = tape2.leaf(queries);
        let gain = tape2.leaf(Tensor::new(vec![4], vec![1.0; 4]).unwrap());
        let bias = tape2.leaf(Tensor::new(vec![4], vec![0.0; 4]).unwrap());
        let want = tape2.layer_norm(x, gain, bias, LAYER_NORM_EPS).unwrap();
        for (a, b) in tape.value(out.out).data.iter().zip(&tape2.value(want).data) {
            assert_close(*a, *b, 1e-12);
        }
    }

    #[test]
    fn key_permutation_leaves_output_unchanged() {
        let (store, params, queries, keys) = block_fixture(4, 2, 3, 5, 3);
        let perm = [4usize, 2, 0, 3, 1];
        let mut permuted = keys.clone();
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..4 {
                permuted.data[dst * 4 + j] = keys.data[src * 4 + j];
            }
        }
        let run = |keys: &Tensor| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let q = tape.leaf(queries.clone());
            let k = tape.leaf(keys.clone());
            let mut ctx = ForwardCtx::eval(&mut tape, &bound);
            let out = att_block(&mut ctx, q, k, k, q, &params).unwrap();
            tape.value(out.out).data.clone()
        };
        let base = run(&keys);
        let shuffled = run(&permuted);
        for (a, b) in base.iter().zip(&shuffled) {
            assert_close(*a, *b, 1e-10);
        }
    }

    #[test]
    fn query_permutation_permutes_rows() {
        let (store, params, queries, keys) = block_fixture(4, 2, 3, 5, 4);
        let perm = [2usize, 0, 1];
        let mut permuted = queries.clone();
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..4 {
                permuted.data[dst * 4 + j] = queries.data[src * 4 + j];
            }
        }
        let run = |q: &Tensor| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let qv = tape.leaf(q.clone());
            let k = tape.leaf(keys.clone());
            let mut ctx = ForwardCtx::eval(&mut tape, &bound);
            let out = att_block(&mut ctx, qv, k, k, qv, &params).unwrap();
            tape.value(out.out).data.clone()
        };
        let base = run(&queries);
        let shuffled = run(&permuted);
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..4 {
                assert_close(shuffled[dst * 4 + j], base[src * 4 + j], 1e-10);
            }
        }
    }

    #[test]
    fn heat_map_shape_is_nq_by_nk() {
        let (store, params, queries, keys) = block_fixture(4, 2, 3, 5, 5);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let q = tape.leaf(queries);
        let k = tape.leaf(keys);
        let mut ctx = ForwardCtx::eval(&mut tape, &bound);
        let out = att_block(&mut ctx, q, k, k, q, &params).unwrap();
        assert_eq!(tape.value(out.weights).shape, vec![3, 5]);
        for row in tape.value(out.weights).data.chunks(5) {
            assert_close(row.iter().sum::<f64>(), 1.0, 1e-12);
        }
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let params = AttentionParams::init(&mut store, "att", 4, 2, 0.0, &mut rng).unwrap();
        let queries = store.register("queries", fan_in_uniform(&[2, 4], &mut rng));
        let keys = store.register("keys", fan_in_uniform(&[3, 4], &mut rng));
        let out = grad_check(&store, 1e-5, |tape, bound| {
            let q = bound.var(queries);
            let k = bound.var(keys);
            let mut ctx = ForwardCtx::eval(tape, bound);
            let r = att_block(&mut ctx, q, k, k, q, &params)?;
            let sq = tape.mul(r.out, r.out)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(out.max_rel_error < 1e-4, "{}", out.max_rel_error);
    }

    #[test]
    fn hand_sized_single_head_matches_primitive_composition() {
        let (store, params, queries, keys) = block_fixture(2, 1, 2, 2, 8);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let q = tape.leaf(queries.clone());
        let k = tape.leaf(keys.clone());
        let mut ctx = ForwardCtx::eval(&mut tape, &bound);
        let got = att_block(&mut ctx, q, k, k, q, &params).unwrap();

        // Same computation spelled out with raw primitives.
        let mut t2 = Tape::new();
        let b2 = store.bind(&mut t2);
        let q2 = t2.leaf(queries);
        let k2 = t2.leaf(keys);
        let qh = t2.matmul(q2, b2.var(params.wq[0])).unwrap();
        let kh = t2.matmul(k2, b2.var(params.wk[0])).unwrap();
        let vh = t2.matmul(k2, b2.var(params.wv[0])).unwrap();
        let kt = t2.transpose(kh).unwrap();
        let scores = t2.matmul(qh, kt).unwrap();
        let scaled = t2.scale(scores, 1.0 / 2.0_f64.sqrt());
        let w = t2.softmax(scaled, 1).unwrap();
        let att = t2.matmul(w, vh).unwrap();
        let proj = t2.matmul(att, b2.var(params.wo)).unwrap();
        let sum = t2.add(q2, proj).unwrap();
        let want = t2
            .layer_norm(
                sum,
                b2.var(params.ln_gain),
                b2.var(params.ln_bias),
                LAYER_NORM_EPS,
            )
            .unwrap();
        for (a, b) in tape.value(got.out).data.iter().zip(&t2.value(want).data) {
            assert_close(*a, *b, 1e-12);
        }
    }

    #[test]
    fn dropout_only_active_in_training() {
        let (store, mut params, queries, keys) = block_fixture(4, 2, 3, 5, 9);
        params.dropout_rate = 0.5;
        let run = |training: bool, seed: u64| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let q = tape.leaf(queries.clone());
            let k = tape.leaf(keys.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ctx = ForwardCtx {
                tape: &mut tape,
                vars: &bound,
                training,
                rng: Some(&mut rng),
            };
            let out = att_block(&mut ctx, q, k, k, q, &params).unwrap();
            tape.value(out.out).data.clone()
        };
        assert_eq!(run(false, 1), run(false, 2));
        assert_ne!(run(true, 1), run(false, 1));
        assert_eq!(run(true, 7), run(true, 7));
    }
}
