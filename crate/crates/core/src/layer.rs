//! Operator-level breakdown of one transformer layer.
//!
//! Each op carries its forward cost (for the pipeline time model) and the
//! bytes it saves for backward. The saved bytes are fixed shares of the
//! activation profile's coefficients, so summing a layer's ops reproduces
//! [`crate::activation::activations_per_layer`] exactly.

use crate::activation::ActivationProfile;
use crate::config::{ModelConfig, ParallelismConfig};
use crate::perf::{CostKind, LayerCost};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerOp {
    pub name: &'static str,
    pub cost: LayerCost,
    pub saved_bytes: f64,
}

// Share of the shared and sharded coefficients saved by each op.
const LN: (f64, f64) = (0.2, 0.0);
const QKV: (f64, f64) = (0.2, 0.0);
const ATTENTION: (f64, f64) = (0.0, 6.0 / 24.0);
const PROJ: (f64, f64) = (0.0, 2.0 / 24.0);
const DROPOUT: (f64, f64) = (0.1, 0.0);
const FC1: (f64, f64) = (0.2, 0.0);
const GELU: (f64, f64) = (0.0, 8.0 / 24.0);
const FC2: (f64, f64) = (0.0, 8.0 / 24.0);

/// Forward ops of one layer in execution order.
pub fn layer_ops(
    model: &ModelConfig,
    par: &ParallelismConfig,
    profile: &ActivationProfile,
    cross_attention: bool,
) -> Vec<LayerOp> {
    let t = par.tp_degree as f64;
    let p = model.bytes_per_element as f64;
    let h = model.hidden_dim as f64;
    let s = model.seq_len as f64;
    let tokens = model.tokens_per_microbatch() as f64;
    let th = tokens * h;
    let score_coeff = if profile.flash_attention {
        0.0
    } else {
        profile.attention_score_coeff * model.num_heads as f64 * s / h
    };
    // bytes saved per unit of coefficient
    let unit = th * p / 2.0;
    let saved = |share: (f64, f64)| {
        unit * (share.0 * profile.shared_coeff + share.1 * profile.sharded_coeff / t)
    };
    let compute = |flops: f64, bytes: f64| LayerCost::new(CostKind::Compute, flops, bytes);
    let allreduce = || LayerOp {
        name: "allreduce",
        cost: LayerCost::new(CostKind::Communication, 0.0, 2.0 * (t - 1.0) / t * th * p),
        saved_bytes: 0.0,
    };
    let elementwise = |name, flops_per_elem: f64, share| LayerOp {
        name,
        cost: compute(flops_per_elem * th, 2.0 * th * p),
        saved_bytes: saved(share),
    };

    let mut ops = vec![
        elementwise("layernorm1", 8.0, LN),
        LayerOp {
            name: "qkv",
            cost: compute(6.0 * th * h / t, p * (3.0 * h * h / t + th + 3.0 * th / t)),
            saved_bytes: saved(QKV),
        },
        LayerOp {
            name: "attention",
            cost: compute(
                4.0 * th * s / t,
                p * (4.0 * th / t + 3.0 * score_coeff * th / t),
            ),
            saved_bytes: saved(ATTENTION) + unit * score_coeff / t,
        },
        LayerOp {
            name: "proj",
            cost: compute(2.0 * th * h / t, p * (h * h / t + th / t + th)),
            saved_bytes: saved(PROJ),
        },
    ];
    if par.tp_degree > 1 {
        ops.push(allreduce());
    }
    ops.push(elementwise("dropout1", 1.0, DROPOUT));
    if cross_attention {
        let third = unit * profile.cross_attention_extra / t / 3.0;
        ops.push(LayerOp {
            name: "cross_qkv",
            cost: compute(6.0 * th * h / t, p * (3.0 * h * h / t + th + 3.0 * th / t)),
            saved_bytes: third,
        });
        ops.push(LayerOp {
            name: "cross_attention",
            cost: compute(4.0 * th * s / t, p * 4.0 * th / t),
            saved_bytes: third,
        });
        ops.push(LayerOp {
            name: "cross_proj",
            cost: compute(2.0 * th * h / t, p * (h * h / t + th / t + th)),
            saved_bytes: third,
        });
        if par.tp_degree > 1 {
            ops.push(allreduce());
        }
    }
    ops.push(elementwise("layernorm2", 8.0, LN));
    ops.push(LayerOp {
        name: "fc1",
        cost: compute(8.0 * th * h / t, p * (4.0 * h * h / t + th + 4.0 * th / t)),
        saved_bytes: saved(FC1),
    });
    ops.push(LayerOp {
        name: "gelu",
        cost: compute(32.0 * th / t, p * 8.0 * th / t),
        saved_bytes: saved(GELU),
    });
    ops.push(LayerOp {
        name: "fc2",
        cost: compute(8.0 * th * h / t, p * (4.0 * h * h / t + 4.0 * th / t + th)),
        saved_bytes: saved(FC2),
    });
    if par.tp_degree > 1 {
        ops.push(allreduce());
    }
    ops.push(elementwise("dropout2", 1.0, DROPOUT));
    ops
}

/// Layer composition of a model: `(ops, how many layers use them)`.
pub fn model_layers(
    model: &ModelConfig,
    par: &ParallelismConfig,
    profile: &ActivationProfile,
) -> Vec<(Vec<LayerOp>, u64)> {
    let cross = model.cross_attention_layers();
    let plain = model.num_layers - cross;
    let mut out = Vec::new();
    if plain > 0 {
        out.push((layer_ops(model, par, profile, false), plain));
    }
    if cross > 0 {
        out.push((layer_ops(model, par, profile, true), cross));
    }
    out
}

/// Whether layer `index` (0-based, forward order) carries cross-attention.
/// Encoders come first, decoders last.
pub fn is_cross_layer(model: &ModelConfig, index: u64) -> bool {
    index >= model.num_layers - model.cross_attention_layers()
}
