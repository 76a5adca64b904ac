//! Numerical certification of function preservation.
//!
//! [`preservation_report`] compares two models end to end on sampled token
//! sequences. The `check_*` functions isolate the intermediate identities the
//! preservation arguments rest on, so a failure can be localized.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{forward, layer_forward, HeadParams, LayerParams, Model, ModelConfig, ModelParams};
use crate::tensor::{rmsnorm_rows, Matrix, Prng};

/// Before/after output differences over a set of inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PreservationReport {
    pub num_inputs: usize,
    pub max_abs_diff: f64,
    /// Relative to `max(1, |reference|)` entrywise.
    pub max_rel_diff: f64,
    pub per_input_diffs: Vec<f64>,
    pub tolerance: f64,
    pub pass: bool,
}

impl fmt::Display for PreservationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "max_abs={:e} max_rel={:e} pass={}",
            self.max_abs_diff, self.max_rel_diff, self.pass
        )
    }
}

/// `count` token sequences with lengths cycling through `1..=max_seq` and
/// tokens uniform in `[0, vocab)`.
pub fn sample_inputs(config: &ModelConfig, count: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = Prng::new(seed);
    (0..count)
        .map(|i| {
            let len = i % config.max_seq + 1;
            (0..len).map(|_| rng.next_below(config.vocab)).collect()
        })
        .collect()
}

/// Runs both models on every input and compares the logits. Model `a` is the
/// reference for relative differences.
pub fn preservation_report(
    cfg_a: &ModelConfig,
    params_a: &ModelParams,
    cfg_b: &ModelConfig,
    params_b: &ModelParams,
    inputs: &[Vec<usize>],
    tol: f64,
) -> Result<PreservationReport> {
    if cfg_a.out_dim != cfg_b.out_dim || cfg_a.vocab != cfg_b.vocab || cfg_a.max_seq > cfg_b.max_seq {
        return Err(Error::invalid(format!(
            "models are not comparable: ({cfg_a}) vs ({cfg_b})"
        )));
    }
    let diffs: Vec<(f64, f64)> = inputs
        .par_iter()
        .map(|tokens| {
            let a = forward(params_a, tokens, cfg_a)?;
            let b = forward(params_b, tokens, cfg_b)?;
            if a.shape() != b.shape() {
                return Err(Error::invalid("output shapes differ"));
            }
            let mut abs: f64 = 0.0;
            let mut rel: f64 = 0.0;
            for (&x, &y) in a.data().iter().zip(b.data()) {
                let d = (x - y).abs();
                abs = abs.max(d);
                rel = rel.max(d / x.abs().max(1.0));
            }
            // NaN never compares greater, so surface it explicitly.
            if !(a.is_finite() && b.is_finite()) {
                abs = f64::INFINITY;
                rel = f64::INFINITY;
            }
            Ok((abs, rel))
        })
        .collect::<Result<_>>()?;
    let max_abs_diff = diffs.iter().fold(0.0, |m: f64, d| m.max(d.0));
    let max_rel_diff = diffs.iter().fold(0.0, |m: f64, d| m.max(d.1));
    Ok(PreservationReport {
        num_inputs: inputs.len(),
        max_abs_diff,
        max_rel_diff,
        per_input_diffs: diffs.into_iter().map(|d| d.0).collect(),
        tolerance: tol,
        pass: max_abs_diff <= tol,
    })
}

pub fn compare_models(a: &Model, b: &Model, inputs: &[Vec<usize>], tol: f64) -> Result<PreservationReport> {
    preservation_report(&a.config, &a.params, &b.config, &b.params, inputs, tol)
}

/// Compares `rmsnorm([x 0], padded_gain)` with `[rmsnorm(x, g) 0]`, where
/// `padded_gain` already has `new_h` entries.
pub fn norm_padding_diff(g: &Matrix, padded_gain: &Matrix, x: &Matrix, new_h: usize) -> Result<f64> {
    let h = x.cols();
    if new_h <= h || padded_gain.cols() != new_h {
        return Err(Error::invalid(format!(
            "padding {h} -> {new_h} with gain of {}",
            padded_gain.cols()
        )));
    }
    let padded_x = x.concat_cols(&Matrix::zeros(x.rows(), new_h - h))?;
    let lhs = rmsnorm_rows(&padded_x, padded_gain)?;
    let rhs = rmsnorm_rows(x, g)?.concat_cols(&Matrix::zeros(x.rows(), new_h - h))?;
    lhs.max_abs_diff(&rhs)
}

/// The normalization step of hidden expansion: with the gain scaled by
/// `sqrt(h / new_h)` and arbitrary new entries `extra_gain`, normalizing the
/// zero-padded input equals padding the normalized input.
pub fn check_norm_padding_identity(g: &Matrix, x: &Matrix, new_h: usize, extra_gain: &Matrix) -> Result<f64> {
    let h = x.cols();
    let scaled = g.scale((h as f64 / new_h as f64).sqrt());
    norm_padding_diff(g, &scaled.concat_cols(extra_gain)?, x, new_h)
}

/// Pre-softmax logits of an attention-expanded head against the original:
/// `(x q')(x k')^T / sqrt(new_k)` vs `(x q)(x k)^T / sqrt(k)`.
pub fn check_attention_logit_identity(
    before: &HeadParams,
    after: &HeadParams,
    x: &Matrix,
    k: usize,
    new_k: usize,
) -> Result<f64> {
    let logits = |head: &HeadParams, dim: usize| -> Result<Matrix> {
        let q = x.matmul(&head.wq)?;
        let kk = x.matmul(&head.wk)?;
        Ok(q.matmul(&kk.transpose())?.scale(1.0 / (dim as f64).sqrt()))
    };
    logits(after, new_k)?.max_abs_diff(&logits(before, k)?)
}

/// `max |layer(x) - x|`; zero for a freshly inserted layer.
pub fn check_layer_identity(layer: &LayerParams, x: &Matrix, config: &ModelConfig) -> Result<f64> {
    layer_forward(layer, x, config)?.max_abs_diff(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Activation};
    use crate::transforms::{self, InitPolicy, TransformKind, TransformSpec};

    fn cfg() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden: 6,
            mlp_inner: 8,
            num_heads: 2,
            key_dim: 3,
            value_dim: 3,
            out_dim: 7,
            max_seq: 5,
            vocab: 11,
            activation: Activation::Relu,
        }
    }

    #[test]
    fn inputs_are_deterministic_and_bounded() {
        let c = cfg();
        let a = sample_inputs(&c, 13, 4);
        assert_eq!(a, sample_inputs(&c, 13, 4));
        assert_eq!(sample_inputs(&c, 1, 4).len(), 1);
        for (i, seq) in a.iter().enumerate() {
            assert_eq!(seq.len(), i % 5 + 1);
            assert!(seq.iter().all(|&t| t < 11));
        }
    }

    #[test]
    fn self_comparison_is_exact() {
        let c = cfg();
        let p = init_params(&c, 1, 0.3).unwrap();
        let inputs = sample_inputs(&c, 10, 0);
        let r = preservation_report(&c, &p, &c, &p, &inputs, 0.0).unwrap();
        assert_eq!(r.max_abs_diff, 0.0);
        assert!(r.pass);
        assert_eq!(r.per_input_diffs.len(), 10);
        assert_eq!(r.to_string(), "max_abs=0e0 max_rel=0e0 pass=true");
    }

    #[test]
    fn report_detects_unsafe_expansion() {
        let c = cfg();
        let p = init_params(&c, 2, 0.3).unwrap();
        let inputs = sample_inputs(&c, 10, 0);
        let init = InitPolicy::RandomNormal { seed: 5, stddev: 0.5 };
        let (c2, p2) = transforms::mlp_expand(&c, &p, 12, init).unwrap();
        let ok = preservation_report(&c, &p, &c2, &p2, &inputs, 1e-15).unwrap();
        assert!(ok.pass, "{ok}");
        let spec = TransformSpec::new(TransformKind::MlpExpand { new_p: 12 }, init).with_unsafe_fill(init);
        let (c3, p3) = transforms::apply(&c, &p, &spec).unwrap();
        let bad = preservation_report(&c, &p, &c3, &p3, &inputs, 1e-15).unwrap();
        assert!(!bad.pass);
        assert!(bad.max_abs_diff > 1e-3);
        assert_eq!(
            bad.max_abs_diff,
            bad.per_input_diffs.iter().cloned().fold(0.0, f64::max)
        );
    }

    #[test]
    fn report_rejects_incomparable_models() {
        let c = cfg();
        let p = init_params(&c, 2, 0.3).unwrap();
        let mut c2 = cfg();
        c2.out_dim = 3;
        let p2 = init_params(&c2, 2, 0.3).unwrap();
        assert!(preservation_report(&c, &p, &c2, &p2, &sample_inputs(&c, 2, 0), 1.0).is_err());
    }

    #[test]
    fn norm_padding_cases() {
        let g = Matrix::row_vector(&[1.0, 1.0]);
        let m = Matrix::row_vector(&[0.3, -2.0]);
        let zero = check_norm_padding_identity(&g, &Matrix::zeros(3, 2), 4, &m).unwrap();
        assert_eq!(zero, 0.0);
        let x = Matrix::from_rows(&[[3.0, 4.0]]);
        assert!(check_norm_padding_identity(&g, &x, 4, &m).unwrap() <= 1e-15);

        // Without the gain scaling every entry is inflated by sqrt(new_h / h).
        let unscaled = g.concat_cols(&m).unwrap();
        let gap = norm_padding_diff(&g, &unscaled, &x, 4).unwrap();
        let norm_inf = rmsnorm_rows(&x, &g).unwrap().max_abs();
        let expected = (2f64.sqrt() - 1.0) * norm_inf;
        assert!((gap - expected).abs() <= 1e-15, "{gap} vs {expected}");
    }

    #[test]
    fn logit_identity_cases() {
        let before = HeadParams {
            wq: Matrix::from_rows(&[[0.5]]),
            wk: Matrix::from_rows(&[[-1.5]]),
            wv: Matrix::from_rows(&[[1.0]]),
        };
        let cfg1 = ModelConfig {
            num_layers: 1,
            hidden: 1,
            mlp_inner: 1,
            num_heads: 1,
            key_dim: 1,
            value_dim: 1,
            out_dim: 1,
            max_seq: 2,
            vocab: 1,
            activation: Activation::Relu,
        };
        let mut params = init_params(&cfg1, 0, 1.0).unwrap();
        params.layers[0].heads[0] = before.clone();
        let init = InitPolicy::RandomNormal { seed: 1, stddev: 1.0 };
        let (_, expanded) = transforms::attention_expand(&cfg1, &params, 2, init).unwrap();
        let after = &expanded.layers[0].heads[0];
        let x = Matrix::from_rows(&[[2.0], [-0.7]]);
        assert!(check_attention_logit_identity(&before, after, &x, 1, 2).unwrap() <= 1e-15);
        assert_eq!(
            check_attention_logit_identity(&before, after, &Matrix::zeros(2, 1), 1, 2).unwrap(),
            0.0
        );
        let mut zq = before.clone();
        zq.wq = Matrix::zeros(1, 1);
        let mut zq_after = after.clone();
        zq_after.wq = Matrix::zeros(1, 2);
        assert_eq!(check_attention_logit_identity(&zq, &zq_after, &x, 1, 2).unwrap(), 0.0);
    }

    #[test]
    fn layer_identity_cases() {
        let c = cfg();
        let p = init_params(&c, 3, 0.3).unwrap();
        let init = InitPolicy::RandomNormal { seed: 9, stddev: 0.5 };
        let (c2, p2) = transforms::add_layer(&c, &p, 2, init).unwrap();
        let x = Matrix::random_normal(4, 6, 1.0, &mut Prng::new(0));
        assert_eq!(check_layer_identity(&p2.layers[1], &x, &c2).unwrap(), 0.0);
        assert_eq!(
            check_layer_identity(&p2.layers[1], &Matrix::zeros(4, 6), &c2).unwrap(),
            0.0
        );
        let mut broken = p2.layers[1].clone();
        broken.wo = Matrix::filled(6, 6, 0.1);
        assert!(check_layer_identity(&broken, &x, &c2).unwrap() > 0.0);
    }
}
