//! Bidirectional cross-modal fusion.
//!
//! Stage 1 lets clips attend to the query, stage 2 lets query tokens attend
//! to the clips, stage 3 lets the query-conditioned clips attend to the
//! clip-conditioned query. Every stage is attention, dropout, residual from
//! the query side, layer norm; the last stage ends in a ReLU.

use rand::Rng;

use crate::config::CrossModal;
use crate::error::{dim_err, Error, Result};
use crate::graph::Var;
use crate::nn::{zero_masked_rows, Ctx, LayerNorm, MultiHeadAttention};
use crate::params::{InitScheme, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct Stage {
    pub attn: MultiHeadAttention,
    pub norm: LayerNorm,
}

impl Stage {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), d, rng)?,
        })
    }

    /// `LN(x + dropout(attn(x + q_pos, kv + kv_pos, kv + kv_pos)))`.
    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        ctx: &mut Ctx,
        x: Var,
        q_pos: Var,
        kv: Var,
        kv_pos: Var,
        kv_mask: &[bool],
        dropout: f64,
    ) -> Result<Var> {
        let q = ctx.g.add(x, q_pos)?;
        let k = ctx.g.add(kv, kv_pos)?;
        let a = self.attn.forward(ctx, q, k, k, Some(kv_mask))?;
        let a = ctx.dropout(a, dropout)?;
        let r = ctx.g.add(x, a)?;
        self.norm.forward(ctx, r)
    }
}

#[derive(Clone, Debug)]
pub struct FusionLayer {
    pub t2v: Stage,
    pub v2t: Option<Stage>,
    pub fused: Option<Stage>,
}

#[derive(Clone, Debug)]
pub struct Bicmf {
    pub layers: Vec<FusionLayer>,
    pub pos_v: ParamId,
    pub pos_t: ParamId,
    pub dropout: f64,
    pub mode: CrossModal,
    pub d: usize,
}

impl Bicmf {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        l_max: usize,
        n_max: usize,
        n_layers: usize,
        mode: CrossModal,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::Config("fusion needs at least one layer".into()));
        }
        let pos_v = store.register(format!("{name}.pos_v"), &[l_max, d], InitScheme::XavierUniform, rng)?;
        let pos_t = store.register(format!("{name}.pos_t"), &[n_max, d], InitScheme::XavierUniform, rng)?;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let p = format!("{name}.{i}");
            let t2v = Stage::new(store, &format!("{p}.t2v"), d, heads, rng)?;
            let (v2t, fused) = match mode {
                CrossModal::Bi => (
                    Some(Stage::new(store, &format!("{p}.v2t"), d, heads, rng)?),
                    Some(Stage::new(store, &format!("{p}.fused"), d, heads, rng)?),
                ),
                CrossModal::Uni => (None, None),
            };
            layers.push(FusionLayer { t2v, v2t, fused });
        }
        Ok(Self {
            layers,
            pos_v,
            pos_t,
            dropout,
            mode,
            d,
        })
    }

    /// Query-injected clip features `L x d`.
    pub fn fuse(
        &self,
        ctx: &mut Ctx,
        v_r: Var,
        t_bar: Var,
        clip_mask: &[bool],
        text_mask: &[bool],
    ) -> Result<Var> {
        let (l, d) = ctx.g.value(v_r).dims2()?;
        let (n, dt) = ctx.g.value(t_bar).dims2()?;
        if d != self.d || dt != self.d {
            return dim_err(format!("fusion expects width {}, got {d} and {dt}", self.d));
        }
        if clip_mask.len() != l || text_mask.len() != n {
            return dim_err("fusion masks must match feature lengths");
        }
        if !text_mask.iter().any(|&m| m) {
            return Err(Error::EmptyQuery);
        }
        let (pv, pt) = (ctx.p(self.pos_v), ctx.p(self.pos_t));
        let (l_max, n_max) = (ctx.g.value(pv).rows(), ctx.g.value(pt).rows());
        if l > l_max || n > n_max {
            return Err(Error::Config(format!(
                "{l} clips / {n} tokens exceed the positional tables ({l_max} / {n_max})"
            )));
        }
        let pv = ctx.g.slice_rows(pv, 0, l)?;
        let pt = ctx.g.slice_rows(pt, 0, n)?;

        let mut v = v_r;
        for layer in &self.layers {
            let v_t = layer.t2v.forward(ctx, v, pv, t_bar, pt, text_mask, self.dropout)?;
            v = match (&layer.v2t, &layer.fused) {
                (Some(v2t), Some(fused)) => {
                    let t_v = v2t.forward(ctx, t_bar, pt, v, pv, clip_mask, self.dropout)?;
                    fused.forward(ctx, v_t, pv, t_v, pt, text_mask, self.dropout)?
                }
                _ => v_t,
            };
            v = ctx.g.relu(v)?;
            v = zero_masked_rows(ctx.g, v, Some(clip_mask))?;
        }
        Ok(v)
    }
}
