//! The R2AU-Net encoder–decoder.
//!
//! Encoder level `k` is a recurrent residual block of width `base·2^k`
//! followed by 2×2 max pooling; the bottleneck block has width
//! `base·2^depth`. Each decoder level upsamples the level below with a
//! nearest-neighbour 2× + 3×3 conv unit, gates the matching skip with an
//! additive attention gate driven by the level below, concatenates
//! `[gated skip, upsampled]` and applies another recurrent residual block.
//! A 1×1 conv + sigmoid head emits the crack probability map.
//!
//! Parameter names follow `enc{k}`, `bottleneck`, `up{k}`, `att{k}`,
//! `dec{k}` and `head` prefixes; see `docs/architecture.md` for the full
//! layer table.

mod config;
mod layers;

pub use config::ModelConfig;
pub use layers::{AttentionGate, ConvLayer, Ctx, NormLayer, R2clBlock, RecurrentUnit, UpConv};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backend::{ParamStore, Shape, StatsStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::mask::ProbabilityMask;

#[derive(Clone, Debug)]
pub struct DecoderLevel {
    pub up: UpConv,
    pub gate: Option<AttentionGate>,
    pub block: R2clBlock,
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: Vec<R2clBlock>,
    bottleneck: R2clBlock,
    /// Ordered deepest first: index 0 is level `depth - 1`.
    decoder: Vec<DecoderLevel>,
    head: ConvLayer,
}

/// Recorded outputs of one forward pass.
pub struct ForwardTrace {
    pub output: Var,
    /// Attention coefficient maps, deepest level first (empty when attention is off).
    pub alphas: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    pub params: ParamStore,
    pub stats: StatsStore,
    layout: Layout,
}

/// Builds a freshly initialized model; parameters are drawn in a fixed
/// order from a ChaCha8 stream seeded with `seed`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let mut stats = StatsStore::new();
    let rec = cfg.recurrence_enabled;
    let steps = cfg.effective_steps();
    let res = cfg.residual_enabled;

    let mut encoder = Vec::with_capacity(cfg.depth);
    for k in 0..cfg.depth {
        let cin = if k == 0 { cfg.in_channels } else { cfg.width(k - 1) };
        encoder.push(R2clBlock::new(&mut params, &mut stats, &format!("enc{k}"), cin, cfg.width(k), rec, steps, res, &mut rng)?);
    }
    let bottleneck = R2clBlock::new(
        &mut params,
        &mut stats,
        "bottleneck",
        cfg.width(cfg.depth - 1),
        cfg.width(cfg.depth),
        rec,
        steps,
        res,
        &mut rng,
    )?;
    let mut decoder = Vec::with_capacity(cfg.depth);
    for k in (0..cfg.depth).rev() {
        let (w, below) = (cfg.width(k), cfg.width(k + 1));
        let up = UpConv::new(&mut params, &mut stats, &format!("up{k}"), below, w, &mut rng)?;
        let gate = if cfg.attention_enabled {
            let inter = (w / cfg.attn_inter_ratio).max(1);
            Some(AttentionGate::new(&mut params, &format!("att{k}"), w, below, inter, &mut rng)?)
        } else {
            None
        };
        let block = R2clBlock::new(&mut params, &mut stats, &format!("dec{k}"), 2 * w, w, rec, steps, res, &mut rng)?;
        decoder.push(DecoderLevel { up, gate, block });
    }
    let head = ConvLayer::new(&mut params, "head", cfg.width(0), cfg.out_channels, 1, true, &mut rng)?;

    Ok(Model {
        config: cfg.clone(),
        params,
        stats,
        layout: Layout {
            encoder,
            bottleneck,
            decoder,
            head,
        },
    })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &[R2clBlock] {
        &self.layout.encoder
    }

    pub fn bottleneck(&self) -> &R2clBlock {
        &self.layout.bottleneck
    }

    /// Decoder levels, deepest first.
    pub fn decoder(&self) -> &[DecoderLevel] {
        &self.layout.decoder
    }

    pub fn head(&self) -> &ConvLayer {
        &self.layout.head
    }

    /// Training-mode forward: batch statistics, running estimates updated.
    pub fn forward_train(&mut self, tape: &mut Tape, x: Var) -> Result<ForwardTrace> {
        let Model {
            config,
            params,
            stats,
            layout,
        } = self;
        let mut ctx = Ctx::train(tape, params, stats);
        run(config, layout, &mut ctx, x)
    }

    /// Evaluation-mode forward using running statistics.
    pub fn forward_eval(&self, tape: &mut Tape, x: Var) -> Result<ForwardTrace> {
        let mut ctx = Ctx::eval(tape, &self.params, &self.stats);
        run(&self.config, &self.layout, &mut ctx, x)
    }

    /// Eval-mode probability maps for a batch of RGB images in [0, 1].
    pub fn predict(&self, images: &Tensor) -> Result<Vec<ProbabilityMask>> {
        let mut tape = Tape::new();
        let x = tape.leaf(images.clone(), false);
        let trace = self.forward_eval(&mut tape, x)?;
        let out = tape.value(trace.output);
        let s = out.shape();
        Ok(out
            .data()
            .chunks(s.plane())
            .map(|plane| ProbabilityMask {
                height: s.h,
                width: s.w,
                data: plane.to_vec(),
            })
            .collect())
    }

    /// Copies parameter values and running statistics (not gradients).
    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            params: self.params.iter().map(|p| p.data.clone()).collect(),
            stats: self.stats.iter().map(|s| (s.mean.clone(), s.var.clone())).collect(),
        }
    }

    pub fn restore(&mut self, snap: &Snapshot) {
        for (p, data) in self.params.iter_mut().zip(&snap.params) {
            p.data.copy_from_slice(data);
        }
        for (s, (mean, var)) in self.stats.iter_mut().zip(&snap.stats) {
            s.mean.copy_from_slice(mean);
            s.var.copy_from_slice(var);
        }
    }
}

fn check_input(config: &ModelConfig, s: Shape) -> Result<()> {
    if s.c != config.in_channels {
        return Err(Error::contract(
            "predict",
            format!("input {s} has {} channels, model expects {}", s.c, config.in_channels),
        ));
    }
    let d = config.spatial_divisor();
    if !s.h.is_multiple_of(d) || !s.w.is_multiple_of(d) {
        return Err(Error::Divisibility {
            height: s.h,
            width: s.w,
            divisor: d,
        });
    }
    Ok(())
}

fn run(config: &ModelConfig, layout: &Layout, ctx: &mut Ctx<'_>, x: Var) -> Result<ForwardTrace> {
    check_input(config, ctx.tape.shape(x))?;
    let mut skips = Vec::with_capacity(config.depth);
    let mut h = x;
    for block in &layout.encoder {
        h = block.forward(ctx, h)?;
        skips.push(h);
        h = ctx.tape.maxpool2(h)?;
    }
    h = layout.bottleneck.forward(ctx, h)?;
    let mut alphas = Vec::new();
    for level in &layout.decoder {
        let skip = skips.pop().expect("one skip per decoder level");
        let up = level.up.forward(ctx, h)?;
        let skip = match &level.gate {
            Some(gate) => {
                let (gated, alpha) = gate.forward(ctx, skip, h)?;
                alphas.push(alpha);
                gated
            }
            None => skip,
        };
        let cat = ctx.tape.concat_channels(skip, up)?;
        h = level.block.forward(ctx, cat)?;
    }
    let logits = layout.head.forward(ctx, h)?;
    let output = ctx.tape.sigmoid(logits);
    Ok(ForwardTrace { output, alphas })
}

/// Parameter and running-statistic values at one point in training.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    params: Vec<Vec<f32>>,
    stats: Vec<(Vec<f32>, Vec<f32>)>,
}
