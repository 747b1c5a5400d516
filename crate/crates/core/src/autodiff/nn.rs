//! Layers built from graph primitives. Each layer has an `init_*` that
//! registers its parameters under a name prefix and a forward function that
//! looks them up through a [`Bound`].

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{Bound, ParamStore};
use super::tensor::Real;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

pub fn init_linear<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    store.register_glorot(&format!("{name}.w"), fan_in, fan_out, rng)?;
    store.register_zeros(&format!("{name}.b"), &[fan_out])
}

/// `x · W + b` over the last axis of `x`.
pub fn linear<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let xw = g.matmul(x, w)?;
    g.add(xw, b)
}

/// Registers `dims.len() - 1` linear layers `{name}.0`, `{name}.1`, ...
pub fn init_mlp<T: Real>(store: &mut ParamStore<T>, name: &str, dims: &[usize], rng: &mut impl Rng) -> Result<()> {
    for (i, w) in dims.windows(2).enumerate() {
        init_linear(store, &format!("{name}.{i}"), w[0], w[1], rng)?;
    }
    Ok(())
}

/// Linear layers with ReLU between them (none after the last).
pub fn mlp<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, layers: usize, x: Var) -> Result<Var> {
    let mut h = x;
    for i in 0..layers {
        h = linear(g, p, &format!("{name}.{i}"), h)?;
        if i + 1 < layers {
            h = g.relu(h);
        }
    }
    Ok(h)
}

pub fn init_layer_norm<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<()> {
    store.register_ones(&format!("{name}.gain"), &[d])?;
    store.register_zeros(&format!("{name}.bias"), &[d])
}

pub fn layer_norm<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let n = g.layer_norm(x, T::of(LN_EPS))?;
    let gain = p.get(&format!("{name}.gain"))?;
    let bias = p.get(&format!("{name}.bias"))?;
    let scaled = g.mul(n, gain)?;
    g.add(scaled, bias)
}

/// Registers `q`, `k`, `v`, `o` projections. The key projection has no
/// bias: softmax is invariant to the constant logit shift it would add.
pub fn init_attention<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut impl Rng) -> Result<()> {
    init_linear(store, &format!("{name}.q"), d, d, rng)?;
    store.register_glorot(&format!("{name}.k.w"), d, d, rng)?;
    init_linear(store, &format!("{name}.v"), d, d, rng)?;
    init_linear(store, &format!("{name}.o"), d, d, rng)
}

/// Multi-head scaled dot-product attention.
///
/// `query_in` is `[B, Lq, d]` and `kv_in` is `[B, Lk, d]`; rank-2 inputs are
/// treated as a batch of one. Output has the shape of `query_in`.
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    name: &str,
    query_in: Var,
    kv_in: Var,
    heads: usize,
) -> Result<Var> {
    let q_shape = g.shape(query_in).to_vec();
    let kv_shape = g.shape(kv_in).to_vec();
    let (q3, kv3) = match (q_shape.len(), kv_shape.len()) {
        (2, 2) => (
            g.reshape(query_in, &[1, q_shape[0], q_shape[1]])?,
            g.reshape(kv_in, &[1, kv_shape[0], kv_shape[1]])?,
        ),
        (3, 3) => (query_in, kv_in),
        _ => {
            return Err(Error::Contract(format!(
                "attention: query {q_shape:?} and key/value {kv_shape:?} must both be rank 2 or 3"
            )))
        }
    };
    let (b, lq, d) = {
        let s = g.shape(q3);
        (s[0], s[1], s[2])
    };
    let (bk, lk, dk) = {
        let s = g.shape(kv3);
        (s[0], s[1], s[2])
    };
    if bk != b || dk != d {
        return Err(Error::Contract(format!(
            "attention: query {q_shape:?} and key/value {kv_shape:?} disagree on batch or width"
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
    }
    let dh = d / heads;

    let split = |g: &mut Graph<T>, x: Var, len: usize| -> Result<Var> {
        let x = g.reshape(x, &[b, len, heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * heads, len, dh])
    };
    let q = linear(g, p, &format!("{name}.q"), q3)?;
    let kw = p.get(&format!("{name}.k.w"))?;
    let k = g.matmul(kv3, kw)?;
    let v = linear(g, p, &format!("{name}.v"), kv3)?;
    let q = split(g, q, lq)?;
    let k = split(g, k, lk)?;
    let v = split(g, v, lk)?;

    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, T::one() / T::of(dh as f64).sqrt());
    let attn = g.softmax(scores)?;
    let ctx = g.matmul(attn, v)?;
    let ctx = g.reshape(ctx, &[b, heads, lq, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, lq, d])?;
    let out = linear(g, p, &format!("{name}.o"), ctx)?;
    g.reshape(out, &q_shape)
}

pub fn init_transformer_layer<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    d: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    init_layer_norm(store, &format!("{name}.ln1"), d)?;
    init_attention(store, &format!("{name}.attn"), d, rng)?;
    init_layer_norm(store, &format!("{name}.ln2"), d)?;
    init_mlp(store, &format!("{name}.ffn"), &[d, 2 * d, d], rng)
}

/// Pre-norm encoder block over the second-to-last axis of `x` (`[B, L, d]`):
/// `x + MHA(LN(x))`, then `x + FFN(LN(x))` with a 2d-wide ReLU hidden layer.
pub fn transformer_layer<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var, heads: usize) -> Result<Var> {
    let h = layer_norm(g, p, &format!("{name}.ln1"), x)?;
    let a = multi_head_attention(g, p, &format!("{name}.attn"), h, h, heads)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, p, &format!("{name}.ln2"), x)?;
    let f = mlp(g, p, &format!("{name}.ffn"), 2, h)?;
    g.add(x, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_key_attention_returns_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        init_attention(&mut store, "a", 4, &mut rng).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let q = g.constant(Tensor::from_fn(&[3, 4], |i| (i as f64).sin()));
        let kv = g.constant(Tensor::from_fn(&[1, 4], |i| 0.3 * i as f64 - 0.5));
        let out = multi_head_attention(&mut g, &p, "a", q, kv, 1).unwrap();
        assert_eq!(g.shape(out), &[3, 4]);
        let v = linear(&mut g, &p, "a.v", kv).unwrap();
        let expected = linear(&mut g, &p, "a.o", v).unwrap();
        for row in g.value(out).data().chunks(4) {
            for (a, b) in row.iter().zip(g.value(expected).data()) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn indivisible_width_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        init_attention(&mut store, "a", 6, &mut rng).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[2, 6]));
        let err = multi_head_attention(&mut g, &p, "a", x, x, 4).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn zeroed_output_projections_make_layer_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        init_transformer_layer(&mut store, "t", 8, &mut rng).unwrap();
        store.set("t.attn.o.w", Tensor::zeros(&[8, 8])).unwrap();
        store.set("t.ffn.1.w", Tensor::zeros(&[16, 8])).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::from_fn(&[2, 5, 8], |i| (i as f64 * 0.37).cos()));
        let y = transformer_layer(&mut g, &p, "t", x, 2).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }
}
