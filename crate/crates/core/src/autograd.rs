//! Hand-written reverse-mode gradients for the transformer in [`crate::model`].
//!
//! [`forward_with_tape`] records every intermediate the adjoints need and
//! [`backward`] walks the tape in reverse. [`finite_diff_grad`] is the
//! independent central-difference oracle used to check it.

use crate::error::{Error, Result};
use crate::model::{
    attention_weights, check_tokens, input_representation, validate, Activation, LayerParams, ModelConfig, ModelParams,
    ParamGrads,
};
use crate::tensor::{normal_cdf, normal_pdf, rmsnorm_rows, row_rms, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct HeadTape {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Softmax attention weights, `s x s`.
    pub weights: Matrix,
    pub out: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTape {
    pub input: Matrix,
    pub norm_mha: Matrix,
    pub heads: Vec<HeadTape>,
    pub concat: Matrix,
    pub mid: Matrix,
    pub norm_mlp: Matrix,
    pub mlp_pre: Matrix,
    pub mlp_act: Matrix,
    pub output: Matrix,
}

/// Forward intermediates for one token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    pub config: ModelConfig,
    pub tokens: Vec<usize>,
    pub input: Matrix,
    pub layers: Vec<LayerTape>,
    pub logits: Matrix,
}

impl Tape {
    /// Number of recorded scalars.
    pub fn scalar_count(&self) -> usize {
        let layer: usize = self
            .layers
            .iter()
            .map(|l| {
                let heads: usize = l
                    .heads
                    .iter()
                    .map(|h| h.q.len() + h.k.len() + h.v.len() + h.weights.len() + h.out.len())
                    .sum();
                heads
                    + [
                        &l.input,
                        &l.norm_mha,
                        &l.concat,
                        &l.mid,
                        &l.norm_mlp,
                        &l.mlp_pre,
                        &l.mlp_act,
                        &l.output,
                    ]
                    .iter()
                    .map(|m| m.len())
                    .sum::<usize>()
            })
            .sum();
        self.input.len() + layer + self.logits.len()
    }

    /// Re-runs the forward pass from the recorded tokens.
    pub fn replay(&self, params: &ModelParams) -> Result<Tape> {
        forward_with_tape(params, &self.tokens, &self.config).map(|(_, t)| t)
    }
}

fn layer_forward_taped(layer: &LayerParams, x: &Matrix, config: &ModelConfig) -> Result<LayerTape> {
    let norm_mha = rmsnorm_rows(x, &layer.g_mha)?;
    let mut heads = Vec::with_capacity(layer.heads.len());
    for head in &layer.heads {
        let q = norm_mha.matmul(&head.wq)?;
        let k = norm_mha.matmul(&head.wk)?;
        let v = norm_mha.matmul(&head.wv)?;
        let weights = attention_weights(&q, &k)?;
        let out = weights.matmul(&v)?;
        heads.push(HeadTape { q, k, v, weights, out });
    }
    let outs: Vec<Matrix> = heads.iter().map(|h| h.out.clone()).collect();
    let concat = Matrix::hstack(&outs)?;
    let mid = x.add(&concat.matmul(&layer.wo)?)?;
    let norm_mlp = rmsnorm_rows(&mid, &layer.g_mlp)?;
    let mlp_pre = norm_mlp.matmul(&layer.wl1)?.add_row_broadcast(&layer.bl1)?;
    let mlp_act = config.activation.apply(&mlp_pre);
    let output = mid.add(&mlp_act.matmul(&layer.wl2)?.add_row_broadcast(&layer.bl2)?)?;
    Ok(LayerTape {
        input: x.clone(),
        norm_mha,
        heads,
        concat,
        mid,
        norm_mlp,
        mlp_pre,
        mlp_act,
        output,
    })
}

/// Same computation as [`crate::model::forward`], keeping the intermediates.
pub fn forward_with_tape(params: &ModelParams, tokens: &[usize], config: &ModelConfig) -> Result<(Matrix, Tape)> {
    let input = input_representation(params, tokens, config)?;
    let mut layers: Vec<LayerTape> = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let x = layers.last().map_or(&input, |t| &t.output);
        let t = layer_forward_taped(layer, x, config)?;
        layers.push(t);
    }
    let last = layers.last().map_or(&input, |t| &t.output);
    let logits = last.matmul(&params.w_out)?;
    let tape = Tape {
        config: config.clone(),
        tokens: tokens.to_vec(),
        input,
        layers,
        logits: logits.clone(),
    };
    Ok((logits, tape))
}

/// Mean token-level cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_loss(logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    let (s, o) = logits.shape();
    if targets.len() != s {
        return Err(Error::invalid(format!("{} targets for {s} positions", targets.len())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= o) {
        return Err(Error::invalid(format!("target {t} out of range for {o} classes")));
    }
    let mut dlogits = Matrix::zeros(s, o);
    let mut total = 0.0;
    for (i, &target) in targets.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        total += log_z - row[target];
        let d = dlogits.row_mut(i);
        for (dj, &z) in d.iter_mut().zip(row) {
            *dj = (z - log_z).exp() / s as f64;
        }
        d[target] -= 1.0 / s as f64;
    }
    Ok((total / s as f64, dlogits))
}

/// Adjoint of [`rmsnorm_rows`]; returns `(dx, dg)`. Rows with zero mean
/// square contribute nothing, matching the zero-output guard.
pub fn rmsnorm_backward(x: &Matrix, g: &Matrix, dy: &Matrix) -> (Matrix, Matrix) {
    let h = x.cols() as f64;
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    let mut dg = Matrix::zeros(1, x.cols());
    for r in 0..x.rows() {
        let xr = x.row(r);
        let rms = row_rms(xr);
        if rms == 0.0 {
            continue;
        }
        let dyr = dy.row(r);
        let coupling: f64 = xr
            .iter()
            .zip(dyr)
            .zip(g.data())
            .map(|((&xv, &d), &gv)| d * gv * xv)
            .sum::<f64>()
            / (h * rms * rms * rms);
        for (j, dxv) in dx.row_mut(r).iter_mut().enumerate() {
            *dxv = g.data()[j] * dyr[j] / rms - xr[j] * coupling;
        }
        for (dgv, (&xv, &d)) in dg.data_mut().iter_mut().zip(xr.iter().zip(dyr)) {
            *dgv += d * xv / rms;
        }
    }
    (dx, dg)
}

/// Row-wise softmax Jacobian-vector product given the softmax output.
fn softmax_backward(s: &Matrix, ds: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(s.rows(), s.cols());
    for r in 0..s.rows() {
        let (sr, dr) = (s.row(r), ds.row(r));
        let dot: f64 = sr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for (o, (&sv, &dv)) in out.row_mut(r).iter_mut().zip(sr.iter().zip(dr)) {
            *o = sv * (dv - dot);
        }
    }
    out
}

fn activation_grad(act: Activation, pre: &Matrix) -> Matrix {
    match act {
        Activation::Relu => pre.map(|x| if x > 0.0 { 1.0 } else { 0.0 }),
        Activation::Gelu => pre.map(|x| normal_cdf(x) + x * normal_pdf(x)),
    }
}

fn layer_backward(
    layer: &LayerParams,
    tape: &LayerTape,
    dy: &Matrix,
    config: &ModelConfig,
    grads: &mut LayerParams,
) -> Result<Matrix> {
    // MLP branch
    grads.wl2 = tape.mlp_act.transpose().matmul(dy)?;
    grads.bl2 = dy.column_sums();
    let d_act = dy.matmul(&layer.wl2.transpose())?;
    let d_pre = d_act.hadamard(&activation_grad(config.activation, &tape.mlp_pre))?;
    grads.wl1 = tape.norm_mlp.transpose().matmul(&d_pre)?;
    grads.bl1 = d_pre.column_sums();
    let d_norm_mlp = d_pre.matmul(&layer.wl1.transpose())?;
    let (d_mid_norm, dg_mlp) = rmsnorm_backward(&tape.mid, &layer.g_mlp, &d_norm_mlp);
    grads.g_mlp = dg_mlp;
    let d_mid = dy.add(&d_mid_norm)?;

    // Attention branch
    grads.wo = tape.concat.transpose().matmul(&d_mid)?;
    let d_concat = d_mid.matmul(&layer.wo.transpose())?;
    let v = config.value_dim;
    let mut d_norm_mha = Matrix::zeros(tape.norm_mha.rows(), tape.norm_mha.cols());
    for (e, ((head, ht), hg)) in layer
        .heads
        .iter()
        .zip(&tape.heads)
        .zip(grads.heads.iter_mut())
        .enumerate()
    {
        let d_out = d_concat.slice_cols(e * v, (e + 1) * v)?;
        let d_weights = d_out.matmul(&ht.v.transpose())?;
        let d_v = ht.weights.transpose().matmul(&d_out)?;
        let c = 1.0 / (ht.q.cols() as f64).sqrt();
        let d_logits = softmax_backward(&ht.weights, &d_weights).scale(c);
        let d_q = d_logits.matmul(&ht.k)?;
        let d_k = d_logits.transpose().matmul(&ht.q)?;
        let xt = tape.norm_mha.transpose();
        hg.wq = xt.matmul(&d_q)?;
        hg.wk = xt.matmul(&d_k)?;
        hg.wv = xt.matmul(&d_v)?;
        d_norm_mha.add_assign(&d_q.matmul(&head.wq.transpose())?)?;
        d_norm_mha.add_assign(&d_k.matmul(&head.wk.transpose())?)?;
        d_norm_mha.add_assign(&d_v.matmul(&head.wv.transpose())?)?;
    }
    let (d_in_norm, dg_mha) = rmsnorm_backward(&tape.input, &layer.g_mha, &d_norm_mha);
    grads.g_mha = dg_mha;
    d_mid.add(&d_in_norm)
}

/// Gradients of the loss whose logit gradient is `dlogits`.
pub fn backward(tape: &Tape, dlogits: &Matrix, params: &ModelParams, config: &ModelConfig) -> Result<ParamGrads> {
    if tape.config != *config {
        return Err(Error::TapeMismatch(format!(
            "tape recorded for ({}), got ({config})",
            tape.config
        )));
    }
    validate(params, config).map_err(Error::Validation)?;
    if dlogits.shape() != tape.logits.shape() {
        return Err(Error::TapeMismatch(format!(
            "dlogits {:?} vs logits {:?}",
            dlogits.shape(),
            tape.logits.shape()
        )));
    }
    let mut grads = params.zeros_like();
    let last = tape.layers.last().map_or(&tape.input, |t| &t.output);
    grads.w_out = last.transpose().matmul(dlogits)?;
    let mut dx = dlogits.matmul(&params.w_out.transpose())?;
    for ((layer, lt), lg) in params
        .layers
        .iter()
        .zip(&tape.layers)
        .zip(grads.layers.iter_mut())
        .rev()
    {
        dx = layer_backward(layer, lt, &dx, config, lg)?;
    }
    for (i, &t) in tape.tokens.iter().enumerate() {
        for (g, &d) in grads.embedding.row_mut(t).iter_mut().zip(dx.row(i)) {
            *g += d;
        }
        for (g, &d) in grads.pos.row_mut(i).iter_mut().zip(dx.row(i)) {
            *g += d;
        }
    }
    Ok(grads)
}

/// Loss of one (tokens, targets) pair.
pub fn sequence_loss(params: &ModelParams, tokens: &[usize], targets: &[usize], config: &ModelConfig) -> Result<f64> {
    check_tokens(tokens, config)?;
    let logits = crate::model::forward(params, tokens, config)?;
    cross_entropy_loss(&logits, targets).map(|(l, _)| l)
}

/// Central differences of an arbitrary scalar function; `2 * len(theta)`
/// evaluations.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, theta: &[f64], epsilon: f64) -> Vec<f64> {
    let mut work = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + epsilon;
            let plus = f(&work);
            work[i] = orig - epsilon;
            let minus = f(&work);
            work[i] = orig;
            (plus - minus) / (2.0 * epsilon)
        })
        .collect()
}

/// Finite-difference gradient of [`sequence_loss`] for every scalar
/// parameter. Costs two forward passes per parameter.
pub fn finite_diff_grad(
    params: &ModelParams,
    tokens: &[usize],
    targets: &[usize],
    config: &ModelConfig,
    epsilon: f64,
) -> Result<ParamGrads> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    sequence_loss(params, tokens, targets, config)?;
    let mut grads = params.zeros_like();
    let mut work = params.clone();
    let count = params.tensors().len();
    for t in 0..count {
        let len = params.tensors()[t].1.len();
        for i in 0..len {
            let orig = work.tensors()[t].1.data()[i];
            let mut eval = |value: f64| -> Result<f64> {
                work.tensors_mut()[t].1.data_mut()[i] = value;
                sequence_loss(&work, tokens, targets, config)
            };
            let plus = eval(orig + epsilon)?;
            let minus = eval(orig - epsilon)?;
            eval(orig)?;
            grads.tensors_mut()[t].1.data_mut()[i] = (plus - minus) / (2.0 * epsilon);
        }
    }
    Ok(grads)
}

/// Largest per-tensor relative error `|a - b|_2 / (|a|_2 + |b|_2)`; tensors
/// that are exactly zero in both count as zero error.
pub fn max_relative_error(a: &ParamGrads, b: &ParamGrads) -> f64 {
    a.tensors()
        .iter()
        .zip(b.tensors())
        .map(|((_, x), (_, y))| {
            let diff: f64 = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale =
                x.data().iter().map(|p| p * p).sum::<f64>().sqrt() + y.data().iter().map(|q| q * q).sum::<f64>().sqrt();
            if scale == 0.0 {
                0.0
            } else {
                diff / scale
            }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_params};
    use crate::tensor::Prng;

    fn tiny(activation: Activation) -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            hidden: 4,
            mlp_inner: 4,
            num_heads: 1,
            key_dim: 2,
            value_dim: 2,
            out_dim: 7,
            max_seq: 3,
            vocab: 7,
            activation,
        }
    }

    #[test]
    fn tape_logits_match_forward() {
        let mut c = tiny(Activation::Gelu);
        c.num_layers = 2;
        c.num_heads = 2;
        let p = init_params(&c, 4, 0.5).unwrap();
        let tokens = [3, 0, 6];
        let (logits, tape) = forward_with_tape(&p, &tokens, &c).unwrap();
        assert_eq!(logits, forward(&p, &tokens, &c).unwrap());
        assert_eq!(tape.replay(&p).unwrap(), tape);
        assert_eq!(tape.layers.len(), 2);

        let per_layer = tape.scalar_count() - tape.input.len() - tape.logits.len();
        c.num_layers = 4;
        let p4 = init_params(&c, 4, 0.5).unwrap();
        let (_, t4) = forward_with_tape(&p4, &tokens, &c).unwrap();
        assert_eq!(t4.scalar_count() - t4.input.len() - t4.logits.len(), 2 * per_layer);
    }

    #[test]
    fn cross_entropy_cases() {
        let (loss, _) = cross_entropy_loss(&Matrix::zeros(2, 4), &[0, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);

        let mut logits = Matrix::zeros(1, 3);
        logits.set(0, 1, 1e3);
        let (loss, _) = cross_entropy_loss(&logits, &[1]).unwrap();
        assert!(loss.abs() <= 1e-6);

        // Two classes: loss = log(1 + exp(z_other - z_target)).
        let logits = Matrix::from_rows(&[[0.3, -1.2]]);
        let (loss, d) = cross_entropy_loss(&logits, &[0]).unwrap();
        let expected = (1.0 + (-1.2f64 - 0.3).exp()).ln();
        assert!((loss - expected).abs() <= 1e-12);
        let p1 = 1.0 / (1.0 + (0.3f64 + 1.2).exp());
        assert!((d.get(0, 1) - p1).abs() <= 1e-12);
        assert!((d.get(0, 0) + p1).abs() <= 1e-12);

        assert!(cross_entropy_loss(&logits, &[2]).is_err());
        assert!(cross_entropy_loss(&logits, &[0, 1]).is_err());
    }

    #[test]
    fn w_out_gradient_without_layers() {
        let mut c = tiny(Activation::Relu);
        c.num_layers = 0;
        let p = init_params(&c, 2, 0.5).unwrap();
        let tokens = [1, 5];
        let (logits, tape) = forward_with_tape(&p, &tokens, &c).unwrap();
        let (_, dlogits) = cross_entropy_loss(&logits, &[2, 2]).unwrap();
        let g = backward(&tape, &dlogits, &p, &c).unwrap();
        let input = input_representation(&p, &tokens, &c).unwrap();
        assert_eq!(g.w_out, input.transpose().matmul(&dlogits).unwrap());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let c = tiny(Activation::Gelu);
        let p = init_params(&c, 3, 0.5).unwrap();
        let (logits, tape) = forward_with_tape(&p, &[0, 1, 2], &c).unwrap();
        let g = backward(&tape, &Matrix::zeros(logits.rows(), logits.cols()), &p, &c).unwrap();
        assert!(g.tensors().iter().all(|(_, m)| m.max_abs() == 0.0));
    }

    #[test]
    fn backward_rejects_foreign_tape() {
        let c = tiny(Activation::Relu);
        let p = init_params(&c, 3, 0.5).unwrap();
        let (logits, tape) = forward_with_tape(&p, &[0, 1], &c).unwrap();
        let mut c2 = c.clone();
        c2.mlp_inner = 5;
        let p2 = init_params(&c2, 3, 0.5).unwrap();
        assert!(matches!(
            backward(&tape, &logits, &p2, &c2),
            Err(Error::TapeMismatch(_))
        ));
        assert!(matches!(
            backward(&tape, &Matrix::zeros(3, 7), &p, &c),
            Err(Error::TapeMismatch(_))
        ));
    }

    #[test]
    fn central_difference_quadratic() {
        let theta = [1.5, -0.25, 3.0];
        let g = central_difference(|t| t.iter().map(|x| x * x).sum(), &theta, 1e-5);
        for (gi, ti) in g.iter().zip(theta) {
            assert!((gi - 2.0 * ti).abs() <= 1e-10);
        }
    }

    #[test]
    fn rmsnorm_backward_matches_differences_and_zero_rows() {
        let mut rng = Prng::new(5);
        let x = Matrix::random_normal(1, 5, 1.0, &mut rng);
        let g = Matrix::random_normal(1, 5, 1.0, &mut rng);
        let dy = Matrix::random_normal(1, 5, 1.0, &mut rng);
        let (dx, _) = rmsnorm_backward(&x, &g, &dy);
        let f = |t: &[f64]| {
            let xm = Matrix::from_vec(1, 5, t.to_vec()).unwrap();
            rmsnorm_rows(&xm, &g).unwrap().hadamard(&dy).unwrap().sum()
        };
        let fd = central_difference(f, x.data(), 1e-6);
        for (a, b) in dx.data().iter().zip(&fd) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        let (dz, dgz) = rmsnorm_backward(&Matrix::zeros(2, 5), &g, &Matrix::filled(2, 5, 1.0));
        assert_eq!(dz.max_abs(), 0.0);
        assert_eq!(dgz.max_abs(), 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for act in [Activation::Relu, Activation::Gelu] {
            let c = tiny(act);
            let p = init_params(&c, 10, 0.5).unwrap();
            let (tokens, targets) = ([2, 6, 2], [1, 0, 4]);
            let (logits, tape) = forward_with_tape(&p, &tokens, &c).unwrap();
            let (_, dlogits) = cross_entropy_loss(&logits, &targets).unwrap();
            let g = backward(&tape, &dlogits, &p, &c).unwrap();
            let fd = finite_diff_grad(&p, &tokens, &targets, &c, 1e-5).unwrap();
            let err = max_relative_error(&g, &fd);
            assert!(err <= 1e-6, "{act:?}: {err}");
        }
    }
}
