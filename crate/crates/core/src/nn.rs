//! Parameterised building blocks evaluated on a [`Graph`].

use rand::{Rng, RngCore};

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Gradients, Var};
use crate::params::{InitScheme, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Forward-pass context: the tape, the parameters bound onto it and the
/// dropout source.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    rng: Option<&'a mut dyn RngCore>,
}

impl<'a> Ctx<'a> {
    /// Evaluation context: dropout disabled.
    pub fn eval(g: &'a mut Graph, store: &'a ParamStore) -> Self {
        Self {
            g,
            store,
            bound: vec![None; store.len()],
            rng: None,
        }
    }

    /// Training context: dropout drawn from `rng`.
    pub fn train(g: &'a mut Graph, store: &'a ParamStore, rng: &'a mut dyn RngCore) -> Self {
        Self {
            g,
            store,
            bound: vec![None; store.len()],
            rng: Some(rng),
        }
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Route parameter `id` to an existing node instead of a fresh leaf.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound[id.0] = Some(v);
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.leaf(self.store.tensor(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Parameter gradients after a backward pass; parameters that were never
    /// touched get `None`.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Vec<f64>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.raw(v).map(<[f64]>::to_vec)))
            .collect()
    }

    /// Inverted dropout; identity outside training or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Config(format!("dropout rate must be < 1, got {p}")));
        }
        let shape = self.g.value(x).shape().to_vec();
        let n = self.g.value(x).len();
        let keep = 1.0 / (1.0 - p);
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = Tensor::new(&shape, mask)?;
        self.g.mul_const(x, &mask)
    }
}

/// `n x 1` column of 0/1 from a boolean row mask.
pub fn mask_column(mask: &[bool]) -> Tensor {
    Tensor::new(
        &[mask.len(), 1],
        mask.iter().map(|&m| m as u8 as f64).collect(),
    )
    .expect("mask column")
}

/// Zero the rows whose mask entry is false (no-op when everything is kept).
pub fn zero_masked_rows(g: &mut Graph, x: Var, mask: Option<&[bool]>) -> Result<Var> {
    match mask {
        Some(m) if m.iter().any(|&k| !k) => {
            if m.len() != g.value(x).rows() {
                return dim_err(format!(
                    "row mask length {} vs {} rows",
                    m.len(),
                    g.value(x).rows()
                ));
            }
            g.mul_const(x, &mask_column(m))
        }
        Some(m) if m.len() != g.value(x).rows() => dim_err(format!(
            "row mask length {} vs {} rows",
            m.len(),
            g.value(x).rows()
        )),
        _ => Ok(x),
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w: store.register(format!("{name}.weight"), &[d_in, d_out], InitScheme::XavierUniform, rng)?,
            b: Some(store.register(format!("{name}.bias"), &[d_out], InitScheme::Zeros, rng)?),
        })
    }

    pub fn without_bias<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w: store.register(format!("{name}.weight"), &[d_in, d_out], InitScheme::XavierUniform, rng)?,
            b: None,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.p(self.w);
        let y = ctx.g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = ctx.p(b);
                ctx.g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        kernel: usize,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("conv kernel must be odd, got {kernel}")));
        }
        Ok(Self {
            w: store.register(
                format!("{name}.weight"),
                &[kernel, c_in, c_out],
                InitScheme::XavierUniform,
                rng,
            )?,
            b: store.register(format!("{name}.bias"), &[c_out], InitScheme::Zeros, rng)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.p(self.w);
        let b = ctx.p(self.b);
        ctx.g.conv1d(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            gamma: store.register(format!("{name}.gamma"), &[d], InitScheme::Ones, rng)?,
            beta: store.register(format!("{name}.beta"), &[d], InitScheme::Zeros, rng)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let g = ctx.p(self.gamma);
        let b = ctx.p(self.beta);
        ctx.g.layer_norm(x, g, b, self.eps)
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub d: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide d = {d}")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q_proj"), d, d, rng)?,
            // a key bias shifts every score in a softmax row equally
            k: Linear::without_bias(store, &format!("{name}.k_proj"), d, d, rng)?,
            v: Linear::new(store, &format!("{name}.v_proj"), d, d, rng)?,
            out: Linear::new(store, &format!("{name}.out_proj"), d, d, rng)?,
            heads,
            d,
        })
    }

    /// `q: n_q x d`, `k, v: n_k x d`; `key_mask[j] == false` excludes key `j`.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        q: Var,
        k: Var,
        v: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let nk = ctx.g.value(k).rows();
        if ctx.g.value(v).rows() != nk {
            return dim_err("attention keys and values differ in length");
        }
        let qp = self.q.forward(ctx, q)?;
        let kp = self.k.forward(ctx, k)?;
        let vp = self.v.forward(ctx, v)?;
        let ctxv = attend(ctx.g, qp, kp, vp, self.heads, key_mask)?;
        self.out.forward(ctx, ctxv)
    }
}

/// Per-head softmax attention on already-projected inputs, heads concatenated.
pub fn attend(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let d = g.value(q).cols();
    if g.value(k).cols() != d || g.value(v).cols() != d {
        return dim_err("attention inputs must share the model dim");
    }
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("{heads} heads do not divide d = {d}")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let s = g.scale(s, scale)?;
        let a = g.masked_softmax_rows(s, key_mask)?;
        outs.push(g.matmul(a, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}

/// Two-layer ReLU feed-forward block `d -> hidden -> d`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(store, &format!("{name}.linear1"), d, hidden, rng)?,
            l2: Linear::new(store, &format!("{name}.linear2"), hidden, d, rng)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, dropout: f64) -> Result<Var> {
        let h = self.l1.forward(ctx, x)?;
        let h = ctx.g.relu(h)?;
        let h = ctx.dropout(h, dropout)?;
        self.l2.forward(ctx, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with_mha(d: usize, heads: usize) -> (ParamStore, MultiHeadAttention) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "attn", d, heads, &mut rng).unwrap();
        (store, mha)
    }

    #[test]
    fn single_key_attention_is_projected_value() {
        let (store, mha) = store_with_mha(4, 2);
        let mut g = Graph::new();
        let mut ctx = Ctx::eval(&mut g, &store);
        let q = ctx.g.constant(Tensor::matrix(2, 4, vec![0.1, -2.0, 3.0, 0.5, 7.0, 1.0, -1.0, 0.0]).unwrap());
        let kv = ctx.g.constant(Tensor::matrix(1, 4, vec![0.3, 0.2, -0.4, 1.0]).unwrap());
        let y = mha.forward(&mut ctx, q, kv, kv, None).unwrap();
        let vp = mha.v.forward(&mut ctx, kv).unwrap();
        let expect = mha.out.forward(&mut ctx, vp).unwrap();
        let (a, e) = (ctx.g.value(y).clone(), ctx.g.value(expect).clone());
        for i in 0..2 {
            for j in 0..4 {
                assert!((a.at(i, j) - e.at(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_queries_give_uniform_weights() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[2, 4]));
        let k = g.constant(Tensor::matrix(3, 4, (0..12).map(|v| v as f64 * 0.3).collect()).unwrap());
        let v = g.constant(Tensor::matrix(3, 4, (0..12).map(|v| (v as f64).sin()).collect()).unwrap());
        let y = attend(&mut g, q, k, v, 2, None).unwrap();
        let vv = g.value(v).clone();
        for j in 0..4 {
            let mean = (vv.at(0, j) + vv.at(1, j) + vv.at(2, j)) / 3.0;
            assert!((g.value(y).at(1, j) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn all_masked_keys_give_zero_rows_and_flag() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::ones(&[1, 4]));
        let k = g.constant(Tensor::ones(&[2, 4]));
        let y = attend(&mut g, q, k, k, 2, Some(&[false, false])).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        assert!(g.flags().contains(&crate::graph::Flag::EmptyAttentionRow));
    }

    #[test]
    fn heads_must_divide_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        assert!(MultiHeadAttention::new(&mut store, "a", 6, 4, &mut rng).is_err());
    }

    #[test]
    fn dropout_is_identity_in_eval_and_inverted_in_train() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let mut ctx = Ctx::eval(&mut g, &store);
        let x = ctx.g.constant(Tensor::ones(&[4, 8]));
        assert_eq!(ctx.dropout(x, 0.5).unwrap(), x);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let mut ctx = Ctx::train(&mut g, &store, &mut rng);
        let x = ctx.g.constant(Tensor::ones(&[4, 8]));
        let y = ctx.dropout(x, 0.5).unwrap();
        assert!(ctx.g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
