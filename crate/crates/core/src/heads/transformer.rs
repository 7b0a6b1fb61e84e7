use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::graph::Var;
use crate::nn::{zero_masked_rows, Ctx, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{InitScheme, ParamId, ParamStore};

/// Post-norm self-attention + feed-forward layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    pub pos: ParamId,
    pub dropout: f64,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ffn_dim: usize,
        n_layers: usize,
        l_max: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let pos = store.register(format!("{name}.pos"), &[l_max, d], InitScheme::XavierUniform, rng)?;
        let layers = (0..n_layers)
            .map(|i| {
                let p = format!("{name}.{i}");
                Ok(EncoderLayer {
                    attn: MultiHeadAttention::new(store, &format!("{p}.self_attn"), d, heads, rng)?,
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), d, rng)?,
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), d, ffn_dim, rng)?,
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), d, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers, pos, dropout })
    }

    /// Positional rows for the first `l` clips.
    pub fn positions(&self, ctx: &mut Ctx, l: usize) -> Result<Var> {
        let pos = ctx.p(self.pos);
        let l_max = ctx.g.value(pos).rows();
        if l > l_max {
            return Err(Error::Config(format!("{l} clips exceed l_max = {l_max}")));
        }
        ctx.g.slice_rows(pos, 0, l)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, clip_mask: &[bool]) -> Result<Var> {
        let l = ctx.g.value(x).rows();
        if clip_mask.len() != l {
            return dim_err("encoder mask length");
        }
        let pos = self.positions(ctx, l)?;
        let mut x = x;
        for layer in &self.layers {
            let qk = ctx.g.add(x, pos)?;
            let a = layer.attn.forward(ctx, qk, qk, x, Some(clip_mask))?;
            let a = ctx.dropout(a, self.dropout)?;
            let r = ctx.g.add(x, a)?;
            x = layer.norm1.forward(ctx, r)?;
            let f = layer.ffn.forward(ctx, x, self.dropout)?;
            let f = ctx.dropout(f, self.dropout)?;
            let r = ctx.g.add(x, f)?;
            x = layer.norm2.forward(ctx, r)?;
            x = zero_masked_rows(ctx.g, x, Some(clip_mask))?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

/// What the decoder hands to the losses and to inference.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    /// `n_q x 2`, foreground column first.
    pub logits: Var,
    /// `n_q x 2` (center, width), each in `(0, 1)`.
    pub moments: Var,
    pub hidden: Var,
}

/// Set decoder: learnable moment queries read the encoder memory, then class
/// and moment heads run on every query.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    pub query_embed: ParamId,
    pub class_head: Linear,
    pub moment_head: [Linear; 3],
    pub dropout: f64,
    pub d: usize,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ffn_dim: usize,
        n_layers: usize,
        n_queries: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let query_embed = store.register(
            format!("{name}.query_embed"),
            &[n_queries, d],
            InitScheme::XavierUniform,
            rng,
        )?;
        let layers = (0..n_layers)
            .map(|i| {
                let p = format!("{name}.{i}");
                Ok(DecoderLayer {
                    self_attn: MultiHeadAttention::new(store, &format!("{p}.self_attn"), d, heads, rng)?,
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), d, rng)?,
                    cross_attn: MultiHeadAttention::new(store, &format!("{p}.cross_attn"), d, heads, rng)?,
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), d, rng)?,
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), d, ffn_dim, rng)?,
                    norm3: LayerNorm::new(store, &format!("{p}.norm3"), d, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            query_embed,
            class_head: Linear::new(store, &format!("{name}.class_head"), d, 2, rng)?,
            moment_head: [
                Linear::new(store, &format!("{name}.span_head.0"), d, d, rng)?,
                Linear::new(store, &format!("{name}.span_head.1"), d, d, rng)?,
                Linear::new(store, &format!("{name}.span_head.2"), d, 2, rng)?,
            ],
            dropout,
            d,
        })
    }

    /// `memory_pos` is added to the memory keys of every cross-attention.
    pub fn forward(&self, ctx: &mut Ctx, memory: Var, memory_pos: Var, clip_mask: &[bool]) -> Result<DecoderOutput> {
        let qpos = ctx.p(self.query_embed);
        let (n_q, d) = ctx.g.value(qpos).dims2()?;
        if ctx.g.value(memory).cols() != d {
            return dim_err("decoder memory width");
        }
        let keys = ctx.g.add(memory, memory_pos)?;
        let mut tgt = ctx.g.constant(crate::tensor::Tensor::zeros(&[n_q, d]));
        for layer in &self.layers {
            let q = ctx.g.add(tgt, qpos)?;
            let a = layer.self_attn.forward(ctx, q, q, tgt, None)?;
            let a = ctx.dropout(a, self.dropout)?;
            let r = ctx.g.add(tgt, a)?;
            tgt = layer.norm1.forward(ctx, r)?;

            let q = ctx.g.add(tgt, qpos)?;
            let a = layer.cross_attn.forward(ctx, q, keys, memory, Some(clip_mask))?;
            let a = ctx.dropout(a, self.dropout)?;
            let r = ctx.g.add(tgt, a)?;
            tgt = layer.norm2.forward(ctx, r)?;

            let f = layer.ffn.forward(ctx, tgt, self.dropout)?;
            let f = ctx.dropout(f, self.dropout)?;
            let r = ctx.g.add(tgt, f)?;
            tgt = layer.norm3.forward(ctx, r)?;
        }
        let logits = self.class_head.forward(ctx, tgt)?;
        let mut h = tgt;
        for (i, lin) in self.moment_head.iter().enumerate() {
            h = lin.forward(ctx, h)?;
            if i < 2 {
                h = ctx.g.relu(h)?;
            }
        }
        let moments = ctx.g.sigmoid(h)?;
        Ok(DecoderOutput {
            logits,
            moments,
            hidden: tgt,
        })
    }
}

/// Dot product of each memory row with a trainable vector, over `sqrt(d)`.
#[derive(Clone, Debug)]
pub struct SaliencyHead {
    pub w: ParamId,
}

impl SaliencyHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w: store.register(format!("{name}.weight"), &[d], InitScheme::XavierUniform, rng)?,
        })
    }

    /// `L x 1` scores; padded clips score 0.
    pub fn forward(&self, ctx: &mut Ctx, memory: Var, clip_mask: &[bool]) -> Result<Var> {
        let w = ctx.p(self.w);
        predict_saliency(ctx, memory, w, clip_mask)
    }
}

pub fn predict_saliency(ctx: &mut Ctx, memory: Var, w: Var, clip_mask: &[bool]) -> Result<Var> {
    let d = ctx.g.value(memory).cols();
    if ctx.g.value(w).len() != d {
        return dim_err(format!("saliency vector needs {d} entries"));
    }
    let wt = ctx.g.transpose(w)?;
    let s = ctx.g.matmul(memory, wt)?;
    let s = ctx.g.scale(s, 1.0 / (d as f64).sqrt())?;
    zero_masked_rows(ctx.g, s, Some(clip_mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_module;
    use crate::graph::Graph;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn saliency_head_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let mut ctx = Ctx::eval(&mut g, &store);
        let mem = ctx.g.constant(Tensor::matrix(3, 4, vec![1.0, 0.0, 0.0, 0.0, 0.3, 0.2, 0.1, 0.0, 0.3, 0.2, 0.1, 0.0]).unwrap());
        let w = ctx.g.constant(Tensor::vector(&[2.0, 0.0, 0.0, 0.0]));
        let s = predict_saliency(&mut ctx, mem, w, &[true; 3]).unwrap();
        assert!((ctx.g.value(s).at(0, 0) - 1.0).abs() < 1e-15);
        assert_eq!(ctx.g.value(s).at(1, 0), ctx.g.value(s).at(2, 0));
        let z = ctx.g.constant(Tensor::zeros(&[4]));
        let s = predict_saliency(&mut ctx, mem, z, &[true; 3]).unwrap();
        assert!(ctx.g.value(s).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "enc", 8, 2, 16, 3, 10, 0.1, &mut rng).unwrap();
        let x = random(&mut rng, 5, 8);
        let run = || {
            let mut g = Graph::new();
            let mut ctx = Ctx::eval(&mut g, &store);
            let xv = ctx.g.constant(x.clone());
            let y = enc.forward(&mut ctx, xv, &[true; 5]).unwrap();
            ctx.g.value(y).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[5, 8]);
        assert_eq!(a.data(), run().data());
    }

    #[test]
    fn decoder_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, "dec", 8, 2, 16, 3, 10, 0.1, &mut rng).unwrap();
        let mut g = Graph::new();
        let mut ctx = Ctx::eval(&mut g, &store);
        let mem = ctx.g.constant(random(&mut rng, 6, 8));
        let pos = ctx.g.constant(random(&mut rng, 6, 8));
        let out = dec.forward(&mut ctx, mem, pos, &[true; 6]).unwrap();
        assert_eq!(ctx.g.value(out.logits).shape(), &[10, 2]);
        assert_eq!(ctx.g.value(out.moments).shape(), &[10, 2]);
        assert!(ctx.g.value(out.moments).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn encoder_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "enc", 4, 2, 8, 2, 6, 0.1, &mut rng).unwrap();
        let x = random(&mut rng, 4, 4);
        let wts = random(&mut rng, 4, 4);
        let rep = grad_check_module(
            &store,
            &store.ids(),
            &[x],
            |ctx, v| {
                let y = enc.forward(ctx, v[0], &[true, true, true, false])?;
                let y = ctx.g.mul_const(y, &wts)?;
                ctx.g.sum(y)
            },
            1e-5,
            Some(10),
            3,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn decoder_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, "dec", 4, 2, 8, 2, 3, 0.1, &mut rng).unwrap();
        let mem = random(&mut rng, 5, 4);
        let pos = random(&mut rng, 5, 4);
        let wl = random(&mut rng, 3, 2);
        let wm = random(&mut rng, 3, 2);
        let rep = grad_check_module(
            &store,
            &store.ids(),
            &[mem, pos],
            |ctx, v| {
                let out = dec.forward(ctx, v[0], v[1], &[true; 5])?;
                let a = ctx.g.mul_const(out.logits, &wl)?;
                let b = ctx.g.mul_const(out.moments, &wm)?;
                let s = ctx.g.add(a, b)?;
                ctx.g.sum(s)
            },
            // zero-initialised targets make the first norm sharply curved
            1e-6,
            Some(10),
            5,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }
}
