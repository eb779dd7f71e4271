use crate::attention::AttentionParams;
use crate::blocks::BlockPartition;
use crate::error::{LsrmError, Result};
use crate::nsa::{
    nsa_cross_attention, BranchSet, EmptySelection, KvSet, NsaInputs, NsaWeights, Selection,
    SelectionSource, WindowCtx,
};
use crate::rng::SeedStream;
use crate::routing::Budgets;
use crate::tensor::{LayerNorm, Linear, Mlp, Tensor};

use super::dense::{gated_residual, DenseBlockWeights, StreamWeights};

#[derive(Clone, Debug, PartialEq)]
pub struct SparseStreamWeights {
    pub norm_attn: LayerNorm,
    pub self_nsa: NsaWeights,
    pub cross_nsa: NsaWeights,
    pub gate: Linear,
    pub norm_ffn: LayerNorm,
    pub ffn: Mlp,
    /// Per-layer projection of the frozen upsampled Stage-1 tokens.
    pub inject: Linear,
}

impl SparseStreamWeights {
    /// Attention projections, stream gate, norms and FFN copied from a dense
    /// stream; branch gates, compression and injection drawn fresh.
    pub fn from_dense(dense: &StreamWeights, p: &AttentionParams, stream: &SeedStream) -> Self {
        let mut self_nsa = NsaWeights::random(p, BranchSet::Full, &stream.child("self"));
        self_nsa.proj = dense.self_attn.clone();
        let mut cross_nsa = NsaWeights::random(p, BranchSet::CmpSel, &stream.child("cross"));
        cross_nsa.proj = dense.cross_attn.clone();
        SparseStreamWeights {
            norm_attn: dense.norm_attn.clone(),
            self_nsa,
            cross_nsa,
            gate: dense.gate.clone(),
            norm_ffn: dense.norm_ffn.clone(),
            ffn: dense.ffn.clone(),
            inject: Linear::random(p.d, p.d, &stream.child("inject")),
        }
    }

    pub fn zeros(p: &AttentionParams) -> Self {
        let nsa = |branches: BranchSet| {
            let mut w = NsaWeights::random(p, branches, &SeedStream::new(0));
            w.proj = crate::nsa::AttnProj::zeros(p);
            w.gate = Linear::zeros(p.d, branches.count() * p.d);
            w.compress.k.fc1 = Linear::zeros(p.kv_width(), p.kv_width());
            w.compress.k.fc2 = Linear::zeros(p.kv_width(), p.kv_width());
            w.compress.v = w.compress.k.clone();
            w
        };
        SparseStreamWeights {
            norm_attn: LayerNorm::new(p.d),
            self_nsa: nsa(BranchSet::Full),
            cross_nsa: nsa(BranchSet::CmpSel),
            gate: Linear::zeros(p.d, 2 * p.d),
            norm_ffn: LayerNorm::new(p.d),
            ffn: Mlp::zeros(p.d, 4 * p.d, p.d),
            inject: Linear::zeros(p.d, p.d),
        }
    }

    /// Force branch gates to `sigmoid(bias)` for every token.
    pub fn set_constant_gates(&mut self, self_bias: [f32; 3], cross_bias: [f32; 2]) {
        self.self_nsa.set_constant_gates(&self_bias).expect("three self branches");
        self.cross_nsa.set_constant_gates(&cross_bias).expect("two cross branches");
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseBlockWeights {
    pub x: SparseStreamWeights,
    pub y: SparseStreamWeights,
}

impl SparseBlockWeights {
    pub fn from_dense(dense: &DenseBlockWeights, p: &AttentionParams, stream: &SeedStream) -> Self {
        SparseBlockWeights {
            x: SparseStreamWeights::from_dense(&dense.x, p, &stream.child("x")),
            y: SparseStreamWeights::from_dense(&dense.y, p, &stream.child("y")),
        }
    }

    pub fn random(p: &AttentionParams, stream: &SeedStream) -> Self {
        SparseBlockWeights::from_dense(&DenseBlockWeights::random(p, &stream.child("dense")), p, stream)
    }

    pub fn zeros(p: &AttentionParams) -> Self {
        SparseBlockWeights {
            x: SparseStreamWeights::zeros(p),
            y: SparseStreamWeights::zeros(p),
        }
    }
}

/// How selected-branch blocks are chosen. Plan selections hold occupied
/// slots of the key-side partition.
#[derive(Clone, Debug, PartialEq)]
pub enum Routing {
    Plan {
        v2v: Selection,
        v2i: Selection,
        i2v: Selection,
        i2i: Selection,
    },
    Score(Budgets),
}

/// Everything about the sparse token sets that stays fixed across layers.
#[derive(Clone, Debug)]
pub struct SparseContext {
    pub params: AttentionParams,
    pub vol_part: BlockPartition,
    pub img_part: BlockPartition,
    pub routing: Routing,
    pub vol_own: Vec<usize>,
    pub img_own: Vec<usize>,
}

impl SparseContext {
    pub fn new(
        params: AttentionParams,
        vol_part: BlockPartition,
        img_part: BlockPartition,
        routing: Routing,
    ) -> Result<Self> {
        if let Routing::Plan { v2v, v2i, i2v, i2i } = &routing {
            let (nv, ni) = (vol_part.num_tokens(), img_part.num_tokens());
            for (name, s, q, slots) in [
                ("v2v", v2v, nv, vol_part.num_occupied()),
                ("v2i", v2i, nv, img_part.num_occupied()),
                ("i2v", i2v, ni, vol_part.num_occupied()),
                ("i2i", i2i, ni, img_part.num_occupied()),
            ] {
                if s.queries() != q {
                    return Err(LsrmError::config(format!(
                        "{name} plan has {} rows for {q} queries",
                        s.queries()
                    )));
                }
                s.validate(slots)?;
            }
        }
        Ok(SparseContext {
            vol_own: (0..vol_part.num_tokens()).map(|t| vol_part.slot_of_token(t)).collect(),
            img_own: (0..img_part.num_tokens()).map(|t| img_part.slot_of_token(t)).collect(),
            params,
            vol_part,
            img_part,
            routing,
        })
    }

    /// Selection sources `(x-self, x-cross, y-self, y-cross)` for the query
    /// rows `vol_rows` / `img_rows` (global token ids), or all rows.
    pub fn sources(&self, subsets: Option<(&[u32], &[u32])>) -> SelectionSet {
        match &self.routing {
            Routing::Plan { v2v, v2i, i2v, i2i } => {
                let pick = |s: &Selection, rows: Option<&[u32]>| match rows {
                    Some(r) => s.subset(r),
                    None => s.clone(),
                };
                let (vr, ir) = match subsets {
                    Some((v, i)) => (Some(v), Some(i)),
                    None => (None, None),
                };
                SelectionSet::Given([pick(v2v, vr), pick(v2i, vr), pick(i2i, ir), pick(i2v, ir)])
            }
            Routing::Score(b) => SelectionSet::Score([b.v2v, b.v2i, b.i2i, b.i2v]),
        }
    }
}

pub enum SelectionSet {
    Given([Selection; 4]),
    Score([usize; 4]),
}

impl SelectionSet {
    pub fn get(&self, n: usize) -> SelectionSource<'_> {
        match self {
            SelectionSet::Given(s) => SelectionSource::Given(&s[n]),
            SelectionSet::Score(b) => SelectionSource::ScoreTopK(b[n]),
        }
    }
}

/// Key-side context for updating one stream.
#[derive(Clone, Copy, Debug)]
pub struct StreamKv<'a> {
    pub self_kv: &'a KvSet,
    pub cross_kv: &'a KvSet,
    pub window: WindowCtx<'a>,
    /// Own block of each query as a slot of `self_kv`.
    pub own: &'a [usize],
    pub self_sel: SelectionSource<'a>,
    pub cross_sel: SelectionSource<'a>,
}

/// Attention, gating and FFN for one stream given its (already injected)
/// input `x` and normalized `xn`.
pub fn stream_step(
    x: &Tensor,
    xn: &Tensor,
    w: &SparseStreamWeights,
    kv: StreamKv<'_>,
    p: &AttentionParams,
) -> Result<Tensor> {
    let self_out = nsa_cross_attention(
        &NsaInputs {
            x: xn,
            kv: kv.self_kv,
            selection: kv.self_sel,
            window: Some(kv.window),
            on_empty: EmptySelection::OwnBlock(kv.own),
        },
        &w.self_nsa,
        p,
    )?;
    let cross_out = nsa_cross_attention(
        &NsaInputs {
            x: xn,
            kv: kv.cross_kv,
            selection: kv.cross_sel,
            window: None,
            on_empty: EmptySelection::Compressed,
        },
        &w.cross_nsa,
        p,
    )?;
    gated_residual(x, xn, &self_out.out, &cross_out.out, &w.gate, &w.norm_ffn, &w.ffn)
}

/// `a + inject(up)`.
pub(crate) fn injected(a: &Tensor, up: &Tensor, inject: &Linear) -> Result<Tensor> {
    let mut out = inject.forward(up)?;
    for (o, v) in out.data_mut().iter_mut().zip(a.data()) {
        *o += *v;
    }
    Ok(out)
}

/// Per-layer key-side state, exposed for routing comparisons.
pub struct LayerState<'a> {
    pub layer: usize,
    pub xn: &'a Tensor,
    pub yn: &'a Tensor,
    pub weights: &'a SparseBlockWeights,
    /// `(x-self, x-cross, y-self, y-cross)` key sets.
    pub kv: [&'a KvSet; 4],
}

fn block_forward_with(
    layer: usize,
    x: &Tensor,
    y: &Tensor,
    x_up: &Tensor,
    y_up: &Tensor,
    w: &SparseBlockWeights,
    ctx: &SparseContext,
    hook: &mut dyn FnMut(&LayerState<'_>) -> Result<()>,
) -> Result<(Tensor, Tensor)> {
    let p = &ctx.params;
    let xi = injected(x, x_up, &w.x.inject)?;
    let yi = injected(y, y_up, &w.y.inject)?;
    let xn = w.x.norm_attn.forward(&xi)?;
    let yn = w.y.norm_attn.forward(&yi)?;
    let kv_xs = KvSet::build(&xn, &ctx.vol_part, &w.x.self_nsa, p)?;
    let kv_xc = KvSet::build(&yn, &ctx.img_part, &w.x.cross_nsa, p)?;
    let kv_ys = KvSet::build(&yn, &ctx.img_part, &w.y.self_nsa, p)?;
    let kv_yc = KvSet::build(&xn, &ctx.vol_part, &w.y.cross_nsa, p)?;
    hook(&LayerState {
        layer,
        xn: &xn,
        yn: &yn,
        weights: w,
        kv: [&kv_xs, &kv_xc, &kv_ys, &kv_yc],
    })?;
    let sel = ctx.sources(None);
    let x_out = stream_step(
        &xi,
        &xn,
        &w.x,
        StreamKv {
            self_kv: &kv_xs,
            cross_kv: &kv_xc,
            window: WindowCtx {
                kv: &kv_xs,
                own_slot: &ctx.vol_own,
            },
            own: &ctx.vol_own,
            self_sel: sel.get(0),
            cross_sel: sel.get(1),
        },
        p,
    )?;
    let y_out = stream_step(
        &yi,
        &yn,
        &w.y,
        StreamKv {
            self_kv: &kv_ys,
            cross_kv: &kv_yc,
            window: WindowCtx {
                kv: &kv_ys,
                own_slot: &ctx.img_own,
            },
            own: &ctx.img_own,
            self_sel: sel.get(2),
            cross_sel: sel.get(3),
        },
        p,
    )?;
    Ok((x_out, y_out))
}

/// One sparse block on inputs `x + inject(x_up)`, `y + inject(y_up)`.
pub fn sparse_block_forward(
    x: &Tensor,
    y: &Tensor,
    x_up: &Tensor,
    y_up: &Tensor,
    w: &SparseBlockWeights,
    ctx: &SparseContext,
) -> Result<(Tensor, Tensor)> {
    block_forward_with(0, x, y, x_up, y_up, w, ctx, &mut |_| Ok(()))
}

/// Runs every block from zero-initialized streams and adds the upsampled
/// Stage-1 tokens back: `(x^(L) + x_up, y^(L) + y_up)`.
pub fn sparse_stage_forward(
    x_up: &Tensor,
    y_up: &Tensor,
    blocks: &[SparseBlockWeights],
    ctx: &SparseContext,
) -> Result<(Tensor, Tensor)> {
    sparse_stage_forward_with(x_up, y_up, blocks, ctx, &mut |_| Ok(()))
}

/// [`sparse_stage_forward`] with a hook observing each layer's key-side state.
pub fn sparse_stage_forward_with(
    x_up: &Tensor,
    y_up: &Tensor,
    blocks: &[SparseBlockWeights],
    ctx: &SparseContext,
    hook: &mut dyn FnMut(&LayerState<'_>) -> Result<()>,
) -> Result<(Tensor, Tensor)> {
    if x_up.rows() != ctx.vol_part.num_tokens() || y_up.rows() != ctx.img_part.num_tokens() {
        return Err(LsrmError::config("upsampled tokens do not match the sparse partitions"));
    }
    let mut x = Tensor::zeros(x_up.shape());
    let mut y = Tensor::zeros(y_up.shape());
    for (m, w) in blocks.iter().enumerate() {
        (x, y) = block_forward_with(m, &x, &y, x_up, y_up, w, ctx, hook)?;
    }
    x.add_assign(x_up)?;
    y.add_assign(y_up)?;
    Ok((x, y))
}
