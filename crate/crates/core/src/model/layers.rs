//! Building blocks: conv/norm primitives, the recurrent conv unit, the
//! recurrent residual block and the additive attention gate.

use rand::Rng;

use crate::backend::{NormStats, Padding, ParamId, ParamStore, StatsId, StatsStore, Tape, Var};
use crate::error::Result;

enum StatsAccess<'a> {
    Train(&'a mut StatsStore),
    Eval(&'a StatsStore),
}

/// Forward-pass context: the recording, parameter values and norm statistics.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    params: &'a ParamStore,
    stats: StatsAccess<'a>,
}

impl<'a> Ctx<'a> {
    /// Batch statistics; running estimates are updated.
    pub fn train(tape: &'a mut Tape, params: &'a ParamStore, stats: &'a mut StatsStore) -> Self {
        Self {
            tape,
            params,
            stats: StatsAccess::Train(stats),
        }
    }

    /// Running statistics; nothing is mutated.
    pub fn eval(tape: &'a mut Tape, params: &'a ParamStore, stats: &'a StatsStore) -> Self {
        Self {
            tape,
            params,
            stats: StatsAccess::Eval(stats),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl ConvLayer {
    pub fn new<R: Rng>(
        params: &mut ParamStore,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = params.add_kaiming(format!("{prefix}.weight"), cout, cin, k, rng)?;
        let bias = if bias {
            Some(params.add_constant(format!("{prefix}.bias"), cout, 0.0)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv2d(x, w, b, 1, Padding::Same)
    }
}

#[derive(Clone, Debug)]
pub struct NormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
}

impl NormLayer {
    pub fn new(params: &mut ParamStore, stats: &mut StatsStore, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: params.add_constant(format!("{prefix}.gamma"), channels, 1.0)?,
            beta: params.add_constant(format!("{prefix}.beta"), channels, 0.0)?,
            stats: stats.add(prefix, channels),
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        match &mut ctx.stats {
            StatsAccess::Train(store) => ctx.tape.batchnorm2d(x, g, b, NormStats::Train(store.get_mut(self.stats))),
            StatsAccess::Eval(store) => ctx.tape.batchnorm2d(x, g, b, NormStats::Eval(store.get(self.stats))),
        }
    }
}

/// `norm(relu(conv(x)))`: the plain conv unit used for up-sampling paths
/// and, with recurrence off, inside every block.
fn conv_relu_norm(ctx: &mut Ctx<'_>, conv: &ConvLayer, norm: &NormLayer, x: Var) -> Result<Var> {
    let y = conv.forward(ctx, x)?;
    let y = ctx.tape.relu(y);
    norm.forward(ctx, y)
}

/// Recurrent convolutional unit unrolled over discrete time steps.
///
/// The feed-forward response `ff(x)` (carrying the bias) is computed once;
/// step `t` adds the recurrent kernel applied to the previous state:
/// `h(0) = norm_0(relu(ff(x)))`, `h(t) = norm_t(relu(ff(x) + rec(h(t-1))))`.
/// Each step has its own normalization.
#[derive(Clone, Debug)]
pub struct RecurrentUnit {
    pub ff: ConvLayer,
    pub rec: Option<ConvLayer>,
    pub norms: Vec<NormLayer>,
}

impl RecurrentUnit {
    /// `recurrent` creates the recurrent kernel; `steps` is the unrolling
    /// depth the unit is built for (ignored without the kernel).
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        params: &mut ParamStore,
        stats: &mut StatsStore,
        prefix: &str,
        cin: usize,
        cout: usize,
        recurrent: bool,
        steps: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let ff = ConvLayer::new(params, &format!("{prefix}.ff"), cin, cout, 3, true, rng)?;
        let rec = if recurrent {
            Some(ConvLayer::new(params, &format!("{prefix}.rec"), cout, cout, 3, false, rng)?)
        } else {
            None
        };
        let n_norms = if recurrent { steps + 1 } else { 1 };
        let norms = (0..n_norms)
            .map(|t| NormLayer::new(params, stats, &format!("{prefix}.norm{t}"), cout))
            .collect::<Result<_>>()?;
        Ok(Self { ff, rec, norms })
    }

    /// Steps this unit unrolls.
    pub fn steps(&self) -> usize {
        self.norms.len() - 1
    }

    /// Unrolls `steps` recurrent steps (at most the number the unit was
    /// built for). Without a recurrent kernel this is the feed-forward unit.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var, steps: usize) -> Result<Var> {
        let feed = self.ff.forward(ctx, x)?;
        let a = ctx.tape.relu(feed);
        let mut h = self.norms[0].forward(ctx, a)?;
        let Some(rec) = &self.rec else { return Ok(h) };
        if steps > self.steps() {
            return Err(crate::Error::contract(
                "rcl_forward",
                format!("{steps} steps requested, unit built for {}", self.steps()),
            ));
        }
        for norm in &self.norms[1..=steps] {
            let r = rec.forward(ctx, h)?;
            let s = ctx.tape.add(feed, r)?;
            let a = ctx.tape.relu(s);
            h = norm.forward(ctx, a)?;
        }
        Ok(h)
    }
}

/// Two stacked recurrent units wrapped in a residual addition:
/// `out = proj(x) + stack(x)`, with `proj` a 1×1 conv + norm only when
/// the widths differ.
#[derive(Clone, Debug)]
pub struct R2clBlock {
    pub units: [RecurrentUnit; 2],
    pub proj: Option<(ConvLayer, NormLayer)>,
    pub residual: bool,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl R2clBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        params: &mut ParamStore,
        stats: &mut StatsStore,
        prefix: &str,
        cin: usize,
        cout: usize,
        recurrent: bool,
        steps: usize,
        residual: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let u0 = RecurrentUnit::new(params, stats, &format!("{prefix}.u0"), cin, cout, recurrent, steps, rng)?;
        let u1 = RecurrentUnit::new(params, stats, &format!("{prefix}.u1"), cout, cout, recurrent, steps, rng)?;
        let proj = if residual && cin != cout {
            let conv = ConvLayer::new(params, &format!("{prefix}.proj"), cin, cout, 1, true, rng)?;
            let norm = NormLayer::new(params, stats, &format!("{prefix}.proj_norm"), cout)?;
            Some((conv, norm))
        } else {
            None
        };
        Ok(Self {
            units: [u0, u1],
            proj,
            residual,
            in_channels: cin,
            out_channels: cout,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let c = ctx.tape.shape(x).c;
        if c != self.in_channels {
            return Err(crate::Error::contract(
                "r2cl_block",
                format!("input has {c} channels, block expects {}", self.in_channels),
            ));
        }
        let h = self.units[0].forward(ctx, x, self.units[0].steps())?;
        let stack = self.units[1].forward(ctx, h, self.units[1].steps())?;
        if !self.residual {
            return Ok(stack);
        }
        let skip = match &self.proj {
            Some((conv, norm)) => {
                let p = conv.forward(ctx, x)?;
                norm.forward(ctx, p)?
            }
            None => x,
        };
        ctx.tape.add(skip, stack)
    }
}

/// Additive attention gate on a skip connection.
///
/// `α = σ(ψᵀ relu(W_xᵀx + W_gᵀg↑ + β_g) + β_ψ)` and the gated skip is `x · α`,
/// with `g↑` the gating signal upsampled to the skip's extents.
#[derive(Clone, Debug)]
pub struct AttentionGate {
    /// `W_x`, no bias.
    pub wx: ConvLayer,
    /// `W_g` with bias `β_g`.
    pub wg: ConvLayer,
    /// `ψ` with bias `β_ψ`.
    pub psi: ConvLayer,
    pub skip_channels: usize,
}

impl AttentionGate {
    pub fn new<R: Rng>(
        params: &mut ParamStore,
        prefix: &str,
        skip_channels: usize,
        gate_channels: usize,
        inter_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            wx: ConvLayer::new(params, &format!("{prefix}.wx"), skip_channels, inter_channels, 1, false, rng)?,
            wg: ConvLayer::new(params, &format!("{prefix}.wg"), gate_channels, inter_channels, 1, true, rng)?,
            psi: ConvLayer::new(params, &format!("{prefix}.psi"), inter_channels, 1, 1, true, rng)?,
            skip_channels,
        })
    }

    /// Returns the gated skip features and the coefficient map α.
    pub fn forward(&self, ctx: &mut Ctx<'_>, skip: Var, gate: Var) -> Result<(Var, Var)> {
        let (ss, gs) = (ctx.tape.shape(skip), ctx.tape.shape(gate));
        if gs.h * 2 != ss.h || gs.w * 2 != ss.w {
            return Err(crate::Error::ShapeMismatch {
                op: "attention_gate",
                left: ss.to_string(),
                right: gs.to_string(),
            });
        }
        let g_up = ctx.tape.upsample2(gate);
        let qx = self.wx.forward(ctx, skip)?;
        let qg = self.wg.forward(ctx, g_up)?;
        let q = ctx.tape.add(qx, qg)?;
        let q = ctx.tape.relu(q);
        let q = self.psi.forward(ctx, q)?;
        let alpha = ctx.tape.sigmoid(q);
        let wide = ctx.tape.broadcast_channels(alpha, ss.c)?;
        let gated = ctx.tape.mul(skip, wide)?;
        Ok((gated, alpha))
    }
}

/// Nearest 2× upsampling followed by a 3×3 conv unit.
#[derive(Clone, Debug)]
pub struct UpConv {
    pub conv: ConvLayer,
    pub norm: NormLayer,
}

impl UpConv {
    pub fn new<R: Rng>(
        params: &mut ParamStore,
        stats: &mut StatsStore,
        prefix: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv: ConvLayer::new(params, &format!("{prefix}.conv"), cin, cout, 3, true, rng)?,
            norm: NormLayer::new(params, stats, &format!("{prefix}.norm"), cout)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let up = ctx.tape.upsample2(x);
        conv_relu_norm(ctx, &self.conv, &self.norm, up)
    }
}
