//! CPC and aligned-CPC losses over a batch of sequences.

use rand::Rng;

use crate::alignment::{expected_path_score, score_block, ScoreMatrix};
use crate::error::{shape_err, Error, Result};
use crate::math::{axpy, gemm, CustomOp, Graph, Real, Tensor, Var, View};
use crate::model::{predict_graph, ContextSequence, LatentSequence, PredictionHeads};

/// A latent frame of some sequence in the batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameRef {
    pub sequence: u32,
    pub frame: u32,
}

/// Negatives drawn for one anchor position, shared by all `K` predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeSet {
    pub frames: Vec<FrameRef>,
}

/// Negative sets for every `(sequence, position)` of a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativePlan {
    pub per_sequence: Vec<Vec<NegativeSet>>,
}

/// Draws `n` negatives per anchor, uniformly with replacement from all
/// latent frames of the *other* sequences of the same group.
///
/// `lengths[b]` is the latent length of sequence `b`, `groups[b]` its group
/// and `positions[b]` the number of anchors that need a negative set.
pub fn sample_negatives<R: Rng>(
    lengths: &[usize],
    groups: &[usize],
    positions: &[usize],
    n: usize,
    rng: &mut R,
) -> Result<NegativePlan> {
    if lengths.len() != groups.len() || lengths.len() != positions.len() {
        return Err(shape_err("lengths, groups and positions must have one entry per sequence"));
    }
    if n == 0 {
        return Err(Error::Invalid("at least one negative is required".into()));
    }
    let mut per_sequence = Vec::with_capacity(lengths.len());
    for b in 0..lengths.len() {
        let pool: Vec<usize> = (0..lengths.len()).filter(|&o| o != b && groups[o] == groups[b]).collect();
        let total: usize = pool.iter().map(|&o| lengths[o]).sum();
        if total == 0 {
            return Err(Error::Insufficient(format!(
                "sequence {b} has no other sequence in group {} to draw negatives from",
                groups[b]
            )));
        }
        let sets = (0..positions[b])
            .map(|_| {
                let frames = (0..n)
                    .map(|_| {
                        let mut r = rng.gen_range(0..total);
                        let mut seq = pool[0];
                        for &o in &pool {
                            if r < lengths[o] {
                                seq = o;
                                break;
                            }
                            r -= lengths[o];
                        }
                        FrameRef { sequence: seq as u32, frame: r as u32 }
                    })
                    .collect();
                NegativeSet { frames }
            })
            .collect();
        per_sequence.push(sets);
    }
    Ok(NegativePlan { per_sequence })
}

/// How the `K x M` score matrix of an anchor is reduced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Expected score over all monotone alignments, divided by `M`.
    Aligned,
    /// Mean of the diagonal `L[k][k]` over `K` (plain CPC, requires `K == M`).
    Diagonal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContrastiveSpec {
    pub k: usize,
    pub m: usize,
    pub kind: LossKind,
}

impl ContrastiveSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.m {
            return Err(Error::Invalid(format!("need 1 <= K <= M, got K={}, M={}", self.k, self.m)));
        }
        if self.kind == LossKind::Diagonal && self.k != self.m {
            return Err(Error::Invalid("the CPC loss scores K == M predictions".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LossStats {
    pub positions: usize,
    pub score_evaluations: u64,
}

/// Loss node; gradients are computed during the forward sweep and scaled by
/// the upstream gradient on the way back.
struct ContrastiveOp<T: Real> {
    inputs: Vec<Var>,
    grads: Vec<Tensor<T>>,
}

impl<T: Real> CustomOp<T> for ContrastiveOp<T> {
    fn name(&self) -> &'static str {
        "contrastive_loss"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let s = grad.data()[0];
        self.grads.iter().map(|g| Some(g.map(|v| v * s))).collect()
    }
}

/// Adds the contrastive loss over all anchors of a batch to `graph`.
///
/// `predictions[b]` is `[T'_b - M, K * D]` (row `t` holds the `K` predictions
/// made from `c_t`) and `latents[b]` is `[T'_b, D]`.
pub fn contrastive_loss<T: Real>(
    graph: &mut Graph<T>,
    predictions: &[Var],
    latents: &[Var],
    plan: &NegativePlan,
    spec: &ContrastiveSpec,
) -> Result<(Var, LossStats)> {
    spec.validate()?;
    let (k, m) = (spec.k, spec.m);
    if predictions.len() != latents.len() || plan.per_sequence.len() != latents.len() {
        return Err(shape_err("one prediction block, latent block and negative list per sequence"));
    }
    if latents.is_empty() {
        return Err(Error::Empty("batch without sequences"));
    }
    let dim = graph.value(latents[0]).cols();
    for b in 0..latents.len() {
        let (len, d) = graph.value(latents[b]).dims2()?;
        let (rows, width) = graph.value(predictions[b]).dims2()?;
        if d != dim || width != k * dim {
            return Err(shape_err(format!("sequence {b}: latent dim {d}, prediction width {width}")));
        }
        if len <= m {
            return Err(Error::TooShort(format!("sequence {b} has {len} latents, needs more than M={m}")));
        }
        if rows != len - m || plan.per_sequence[b].len() != rows {
            return Err(shape_err(format!(
                "sequence {b}: {rows} prediction rows and {} negative sets for {} anchors",
                plan.per_sequence[b].len(),
                len - m
            )));
        }
    }
    let total_positions: usize = plan.per_sequence.iter().map(Vec::len).sum();
    let nf = T::from_usize(total_positions).unwrap();
    let scale = match spec.kind {
        LossKind::Aligned => -T::one() / (nf * T::from_usize(m).unwrap()),
        LossKind::Diagonal => -T::one() / (nf * T::from_usize(k).unwrap()),
    };

    let mut d_pred: Vec<Tensor<T>> = predictions.iter().map(|&p| Tensor::zeros(graph.value(p).shape())).collect();
    let mut d_lat: Vec<Tensor<T>> = latents.iter().map(|&z| Tensor::zeros(graph.value(z).shape())).collect();
    let mut sum = T::zero();
    let mut evaluations = 0u64;

    let mut dl = vec![T::zero(); k * m];
    let mut negs: Vec<T> = Vec::new();
    let mut da = vec![T::zero(); k * m];
    let mut dn: Vec<T> = Vec::new();
    let mut dneg: Vec<T> = Vec::new();
    for b in 0..latents.len() {
        let z = graph.value(latents[b]);
        let preds = graph.value(predictions[b]);
        for (t, negset) in plan.per_sequence[b].iter().enumerate() {
            let n = negset.frames.len();
            negs.clear();
            for f in &negset.frames {
                negs.extend_from_slice(graph.value(latents[f.sequence as usize]).row(f.frame as usize));
            }
            let p = preds.row(t);
            let futures = &z.data()[(t + 1) * dim..(t + 1 + m) * dim];
            let block = score_block(p, dim, futures, &negs, &mut evaluations);
            if block.log_scores.iter().any(|v| !v.is_finite()) {
                let dump = ScoreMatrix { k, m, data: block.log_scores.clone() }.to_csv();
                return Err(Error::NonFinite(format!("score matrix of sequence {b}, anchor {t}:\n{dump}")));
            }
            let scores = ScoreMatrix { k, m, data: block.log_scores };
            match spec.kind {
                LossKind::Aligned => {
                    let (value, occ) = expected_path_score(&scores);
                    sum = sum + value / T::from_usize(m).unwrap();
                    for (g, &o) in dl.iter_mut().zip(occ.data()) {
                        *g = scale * o;
                    }
                }
                LossKind::Diagonal => {
                    let value = (0..k).fold(T::zero(), |acc, i| acc + scores.get(i, i));
                    sum = sum + value / T::from_usize(k).unwrap();
                    dl.iter_mut().for_each(|g| *g = T::zero());
                    for i in 0..k {
                        dl[i * m + i] = scale;
                    }
                }
            }

            // L = pos - ln(e^pos + e^lse_neg):
            //   dL/dpos = 1 - e^L,  dL/dneg_n = -e^{neg_n - denom}
            dn.clear();
            dn.resize(k * n, T::zero());
            for kk in 0..k {
                let mut w = T::zero();
                for mm in 0..m {
                    let i = kk * m + mm;
                    let g = dl[i];
                    if g == T::zero() {
                        da[i] = T::zero();
                        continue;
                    }
                    da[i] = g * (T::one() - scores.data[i].exp());
                    w = w + g * (block.lse_neg[kk] - block.denom[i]).exp();
                }
                if w != T::zero() {
                    for j in 0..n {
                        dn[kk * n + j] = -w * (block.neg[kk * n + j] - block.lse_neg[kk]).exp();
                    }
                }
            }
            let pv = View::rows(p, dim);
            let dp = d_pred[b].row_mut(t);
            gemm(k, m, dim, View::rows(&da, m), View::rows(futures, dim), T::one(), dp);
            gemm(k, n, dim, View::rows(&dn, n), View::rows(&negs, dim), T::one(), dp);
            let dz = &mut d_lat[b].data_mut()[(t + 1) * dim..(t + 1 + m) * dim];
            gemm(m, k, dim, View::cols(&da, m), pv, T::one(), dz);
            dneg.clear();
            dneg.resize(n * dim, T::zero());
            gemm(n, k, dim, View::cols(&dn, n), pv, T::zero(), &mut dneg);
            for (f, row) in negset.frames.iter().zip(dneg.chunks_exact(dim)) {
                axpy(T::one(), row, d_lat[f.sequence as usize].row_mut(f.frame as usize));
            }
        }
    }
    let loss = -(sum / nf);
    let mut inputs = predictions.to_vec();
    inputs.extend_from_slice(latents);
    let mut grads = d_pred;
    grads.append(&mut d_lat);
    let var = graph.custom(Tensor::scalar(loss), Box::new(ContrastiveOp { inputs, grads }))?;
    Ok((var, LossStats { positions: total_positions, score_evaluations: evaluations }))
}

/// Loss value and gradients with respect to the loss inputs.
#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub loss: T,
    pub grad_latents: Vec<Tensor<T>>,
    pub grad_contexts: Vec<Tensor<T>>,
    pub grad_head_weight: Tensor<T>,
    pub grad_head_bias: Tensor<T>,
    pub stats: LossStats,
}

fn loss_with_heads<T: Real>(
    latents: &[LatentSequence<T>],
    contexts: &[ContextSequence<T>],
    heads: &PredictionHeads<T>,
    negatives: &NegativePlan,
    spec: ContrastiveSpec,
) -> Result<LossOutput<T>> {
    spec.validate()?;
    if heads.k() != spec.k {
        return Err(shape_err(format!("{} prediction heads for K={}", heads.k(), spec.k)));
    }
    if latents.len() != contexts.len() {
        return Err(shape_err("one context sequence per latent sequence"));
    }
    let mut g = Graph::new();
    let w = g.param(heads.weight().clone());
    let bias = g.param(heads.bias().clone());
    let mut zs = Vec::new();
    let mut cs = Vec::new();
    let mut preds = Vec::new();
    for (z, c) in latents.iter().zip(contexts) {
        let len = z.len();
        if c.len() != len {
            return Err(shape_err("latent and context sequences must have equal length"));
        }
        if len <= spec.m {
            return Err(Error::TooShort(format!("{len} latents, need more than M={}", spec.m)));
        }
        let zv = g.param(z.as_tensor().clone());
        let cv = g.param(c.as_tensor().clone());
        preds.push(predict_graph(&mut g, cv, w, bias, len - spec.m)?);
        zs.push(zv);
        cs.push(cv);
    }
    let (loss, stats) = contrastive_loss(&mut g, &preds, &zs, negatives, &spec)?;
    let grads = g.backward(loss)?;
    Ok(LossOutput {
        loss: g.value(loss).data()[0],
        grad_latents: zs.iter().map(|&v| grads.get_or_zeros(&g, v)).collect(),
        grad_contexts: cs.iter().map(|&v| grads.get_or_zeros(&g, v)).collect(),
        grad_head_weight: grads.get_or_zeros(&g, w),
        grad_head_bias: grads.get_or_zeros(&g, bias),
        stats,
    })
}

/// Aligned CPC: `-(1/|T_v|) Σ_t expected_path_score(L_t) / M`.
pub fn acpc_loss<T: Real>(
    latents: &[LatentSequence<T>],
    contexts: &[ContextSequence<T>],
    heads: &PredictionHeads<T>,
    negatives: &NegativePlan,
    k: usize,
    m: usize,
) -> Result<LossOutput<T>> {
    loss_with_heads(latents, contexts, heads, negatives, ContrastiveSpec { k, m, kind: LossKind::Aligned })
}

/// Plain CPC: `-(1/|T_v|) Σ_t (1/K) Σ_k L_t[k][k]`.
pub fn cpc_loss<T: Real>(
    latents: &[LatentSequence<T>],
    contexts: &[ContextSequence<T>],
    heads: &PredictionHeads<T>,
    negatives: &NegativePlan,
    k: usize,
) -> Result<LossOutput<T>> {
    loss_with_heads(latents, contexts, heads, negatives, ContrastiveSpec { k, m: k, kind: LossKind::Diagonal })
}
