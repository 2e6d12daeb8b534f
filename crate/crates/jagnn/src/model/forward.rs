//! Tape construction for one batch: attention layers, jump path, combined
//! embedding, sigmoid head, and the depth-regularized BCE loss.

use serde::Serialize;

use super::params::{JumpAggregation, ModelParams};
use super::plan::BatchPlan;
use super::ModelError;
use crate::graphstore::TransactionGraph;
use crate::numeric::{Tape, Tensor, Var};

/// Parameter tensors staged as tape leaves for one forward/backward round.
pub struct ParamVars {
    pub w_in: Var,
    pub ln: Vec<(Var, Var)>,
    pub weights: Vec<Vec<Var>>,
    pub att: Vec<Vec<Vec<Var>>>,
    pub head_w: Var,
    pub head_b: Var,
    /// Flat list in [`ModelParams::named`] order, for gradient collection.
    pub flat: Vec<Var>,
}

impl ParamVars {
    pub fn stage(tape: &mut Tape, params: &ModelParams) -> Result<Self, ModelError> {
        let mut flat = Vec::new();
        let mut leaf = |tape: &mut Tape, t: &Tensor, flat: &mut Vec<Var>| {
            let v = tape.leaf(t.clone())?;
            flat.push(v);
            Ok::<Var, crate::numeric::NumericError>(v)
        };
        let w_in = leaf(tape, &params.w_in, &mut flat)?;
        let mut ln = Vec::new();
        let mut weights = Vec::new();
        let mut att = Vec::new();
        for n in 0..params.arch.layers {
            let gamma = leaf(tape, &params.ln_gamma[n], &mut flat)?;
            let beta = leaf(tape, &params.ln_beta[n], &mut flat)?;
            ln.push((gamma, beta));
            let mut layer_w = Vec::new();
            let mut layer_a = Vec::new();
            for r in 0..params.arch.relations {
                layer_w.push(leaf(tape, &params.weights[n][r], &mut flat)?);
                let mut heads = Vec::new();
                for m in 0..params.arch.heads {
                    heads.push(leaf(tape, &params.att[n][r][m], &mut flat)?);
                }
                layer_a.push(heads);
            }
            weights.push(layer_w);
            att.push(layer_a);
        }
        let head_w = leaf(tape, &params.head_w, &mut flat)?;
        let head_b = leaf(tape, &params.head_b, &mut flat)?;
        Ok(Self {
            w_in,
            ln,
            weights,
            att,
            head_w,
            head_b,
            flat,
        })
    }
}

/// One attention softmax, kept for normalization checks.
#[derive(Debug, Clone, Copy)]
pub struct AttentionRecord {
    pub layer: usize,
    pub relation: usize,
    pub head: usize,
    pub alpha: Var,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Fail the forward pass if any attention group strays from sum 1 by
    /// more than 1e-12.
    pub validate_attention: bool,
}

pub struct ForwardOutput {
    /// Per-target fraud probability, batch order.
    pub probs: Var,
    /// Pre-sigmoid head output, batch order.
    pub logits: Var,
    /// Final-layer attention embedding rows for the targets.
    pub h_agg: Var,
    /// Aggregated jump embedding rows for the targets.
    pub h_jump: Var,
    /// Concatenated embedding rows for the targets.
    pub combined: Var,
    pub attention: Vec<AttentionRecord>,
}

/// Attention coefficients for one `(layer, relation, head)`: softmax over
/// each destination group of `LeakyReLU(a^T [x_dst || x_src])`.
pub fn attention_coefficients(
    tape: &mut Tape,
    x: Var,
    att_vec: Var,
    dst: &[usize],
    src: &[usize],
    seg: &[usize],
    n_groups: usize,
    slope: f64,
) -> Result<Var, ModelError> {
    let width = tape.value(x).cols();
    let a_dst = tape.slice_vec(att_vec, 0, width)?;
    let a_src = tape.slice_vec(att_vec, width, width)?;
    let dst_proj = tape.matvec(x, a_dst)?;
    let src_proj = tape.matvec(x, a_src)?;
    let dst_logit = tape.vec_gather(dst_proj, dst)?;
    let src_logit = tape.vec_gather(src_proj, src)?;
    let logits = tape.add(dst_logit, src_logit)?;
    let activated = tape.leaky_relu(logits, slope)?;
    Ok(tape.masked_softmax(activated, seg, n_groups)?)
}

/// Full batch forward pass.
pub fn forward(
    tape: &mut Tape,
    graph: &TransactionGraph,
    params: &ModelParams,
    pv: &ParamVars,
    plan: &BatchPlan,
    opts: ForwardOptions,
) -> Result<ForwardOutput, ModelError> {
    let arch = &params.arch;
    if graph.feature_dim() != arch.feature_dim {
        return Err(ModelError::FeatureDimMismatch {
            expected: arch.feature_dim,
            got: graph.feature_dim(),
        });
    }
    tape.validate_softmax = opts.validate_attention;

    let n_active = plan.anchors.len();
    let width = arch.embedding_width;

    // input projection of the active anchors' raw features
    let mut feat_data = Vec::with_capacity(n_active * arch.feature_dim);
    for &a in &plan.anchors {
        feat_data.extend_from_slice(graph.features(a));
    }
    let feats = tape.leaf(Tensor::matrix(n_active, arch.feature_dim, feat_data)?)?;
    let mut levels: Vec<Var> = Vec::with_capacity(arch.layers + 1);
    levels.push(tape.matmul(feats, pv.w_in)?);

    let mut attention = Vec::new();
    for n in 0..arch.layers {
        let (gamma, beta) = pv.ln[n];
        let x = tape.layer_norm(levels[n], gamma, beta, 1e-8)?;
        let mut acc = tape.leaf(Tensor::zeros(vec![n_active, width]))?;
        for (r, rel_plan) in plan.relations.iter().enumerate() {
            if rel_plan.dst.is_empty() {
                continue;
            }
            let transformed = tape.matmul(x, pv.weights[n][r])?;
            let gathered = tape.row_gather(transformed, &rel_plan.src)?;
            for m in 0..arch.heads {
                let alpha = attention_coefficients(
                    tape,
                    x,
                    pv.att[n][r][m],
                    &rel_plan.dst,
                    &rel_plan.src,
                    &rel_plan.seg,
                    rel_plan.n_groups,
                    arch.leaky_slope,
                )?;
                attention.push(AttentionRecord {
                    layer: n,
                    relation: r,
                    head: m,
                    alpha,
                });
                let weighted = tape.row_scale(gathered, alpha)?;
                let summed = tape.segment_sum_rows(weighted, &rel_plan.dst, n_active)?;
                acc = tape.add(acc, summed)?;
            }
        }
        let averaged = tape.scale(acc, 1.0 / arch.heads as f64)?;
        levels.push(tape.relu(averaged)?);
    }

    // jump path: per contributing layer, per relation, mean over each
    // target's random anchors of the layer-input activations
    let n_targets = plan.targets.len();
    let mut contributions: Vec<Var> = Vec::new();
    for n in arch.jump_layers() {
        let level = levels[n - 1];
        let mut j = tape.leaf(Tensor::zeros(vec![n_targets, width]))?;
        for jump_plan in &plan.jump {
            if jump_plan.src.is_empty() {
                continue;
            }
            let rows = tape.row_gather(level, &jump_plan.src)?;
            let mean = tape.segment_mean_rows(rows, &jump_plan.target, n_targets)?;
            j = tape.add(j, mean)?;
        }
        contributions.push(j);
    }
    let h_jump = match arch.jump_aggregation {
        JumpAggregation::Mean => {
            let mut acc = contributions[0];
            for &c in &contributions[1..] {
                acc = tape.add(acc, c)?;
            }
            tape.scale(acc, 1.0 / contributions.len() as f64)?
        }
        JumpAggregation::Concat => tape.hstack(&contributions)?,
        JumpAggregation::Max => {
            let mut acc = contributions[0];
            for &c in &contributions[1..] {
                acc = tape.maximum(acc, c)?;
            }
            acc
        }
    };

    let h_agg = tape.row_gather(levels[arch.layers], &plan.target_slots)?;
    let combined = tape.hstack(&[h_agg, h_jump])?;
    let raw_logits = tape.matvec(combined, pv.head_w)?;
    let logits = tape.add_bias(raw_logits, pv.head_b)?;
    let probs = tape.sigmoid(logits)?;

    Ok(ForwardOutput {
        probs,
        logits,
        h_agg,
        h_jump,
        combined,
        attention,
    })
}

/// Loss value split into its classification and depth-penalty parts.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossBreakdown {
    pub classification: f64,
    /// Exactly `lambda * depth`; constant in the parameters.
    pub regularization: f64,
    pub total: f64,
}

/// Mean binary cross-entropy over the batch plus `lambda * depth`.
/// Predictions are clamped to `[1e-12, 1 - 1e-12]` before the logs.
pub fn bce_with_depth_penalty(
    tape: &mut Tape,
    probs: Var,
    labels: &[f64],
    lambda: f64,
    depth: usize,
) -> Result<(Var, LossBreakdown), ModelError> {
    let n = tape.value(probs).len();
    if labels.len() != n {
        return Err(ModelError::LabelLength {
            expected: n,
            got: labels.len(),
        });
    }
    let y = tape.leaf(Tensor::vector(labels.to_vec()))?;
    let clamped = tape.clamp(probs, 1e-12, 1.0 - 1e-12)?;
    let log_p = tape.log(clamped)?;
    let one_minus_p = tape.affine(clamped, -1.0, 1.0)?;
    let log_q = tape.log(one_minus_p)?;
    let one_minus_y = tape.affine(y, -1.0, 1.0)?;
    let pos_term = tape.mul(y, log_p)?;
    let neg_term = tape.mul(one_minus_y, log_q)?;
    let sum_terms = tape.add(pos_term, neg_term)?;
    let mean = tape.mean(sum_terms)?;
    let classification = tape.scale(mean, -1.0)?;
    let regularization = lambda * depth as f64;
    let total = tape.affine(classification, 1.0, regularization)?;
    let breakdown = LossBreakdown {
        classification: tape.value(classification).data()[0],
        regularization,
        total: tape.value(total).data()[0],
    };
    Ok((total, breakdown))
}
