//! The six function-preserving expansions.
//!
//! Each transformation grows one architecture dimension (`p`, `E`, `v`, `k`,
//! `h` or `N`). New blocks are always appended after existing indices. Blocks
//! that must be zero for the expanded model to compute the same function are
//! zero-filled regardless of the [`InitPolicy`]; only
//! [`TransformSpec::unsafe_fill`] can override them, and it exists for
//! negative-control testing.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{validate, HeadParams, LayerParams, ModelConfig, ModelParams};
use crate::tensor::{Matrix, Prng};

/// How to fill newly created blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitPolicy {
    Zeros,
    Constant { value: f64 },
    RandomNormal { seed: u64, stddev: f64 },
}

impl InitPolicy {
    pub fn check(&self) -> Result<()> {
        match *self {
            InitPolicy::RandomNormal { stddev, .. } if !(stddev > 0.0 && stddev.is_finite()) => Err(Error::invalid(
                format!("random_normal stddev must be > 0, got {stddev}"),
            )),
            InitPolicy::Constant { value } if !value.is_finite() => {
                Err(Error::invalid(format!("constant init must be finite, got {value}")))
            }
            _ => Ok(()),
        }
    }

    /// A `rows x cols` block. Random blocks draw from a stream derived from
    /// the policy seed and `key`, so a block's values depend only on its
    /// identity and not on how many other blocks were filled before it.
    pub fn block(&self, rows: usize, cols: usize, key: &[u64]) -> Matrix {
        match *self {
            InitPolicy::Zeros => Matrix::zeros(rows, cols),
            InitPolicy::Constant { value } => Matrix::filled(rows, cols, value),
            InitPolicy::RandomNormal { seed, stddev } => {
                Matrix::random_normal(rows, cols, stddev, &mut Prng::derive(seed, key))
            }
        }
    }
}

/// Which dimension to grow, and to what.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    MlpExpand {
        new_p: usize,
    },
    AddHeads {
        count: usize,
    },
    HeadsExpand {
        new_v: usize,
    },
    AttentionExpand {
        new_k: usize,
    },
    HiddenExpand {
        new_h: usize,
    },
    /// 1-based insertion position in `1..=N+1`.
    AddLayer {
        position: usize,
    },
}

impl TransformKind {
    pub fn name(&self) -> &'static str {
        match self {
            TransformKind::MlpExpand { .. } => "mlp_expand",
            TransformKind::AddHeads { .. } => "add_heads",
            TransformKind::HeadsExpand { .. } => "heads_expand",
            TransformKind::AttentionExpand { .. } => "attention_expand",
            TransformKind::HiddenExpand { .. } => "hidden_expand",
            TransformKind::AddLayer { .. } => "add_layer",
        }
    }

    /// The integer carried by the kind (new size, count or position).
    pub fn target(&self) -> usize {
        match *self {
            TransformKind::MlpExpand { new_p: t }
            | TransformKind::AddHeads { count: t }
            | TransformKind::HeadsExpand { new_v: t }
            | TransformKind::AttentionExpand { new_k: t }
            | TransformKind::HiddenExpand { new_h: t }
            | TransformKind::AddLayer { position: t } => t,
        }
    }

    pub fn from_name(name: &str, target: usize) -> Option<Self> {
        Some(match name {
            "mlp_expand" => TransformKind::MlpExpand { new_p: target },
            "add_heads" => TransformKind::AddHeads { count: target },
            "heads_expand" => TransformKind::HeadsExpand { new_v: target },
            "attention_expand" => TransformKind::AttentionExpand { new_k: target },
            "hidden_expand" => TransformKind::HiddenExpand { new_h: target },
            "add_layer" => TransformKind::AddLayer { position: target },
            _ => return None,
        })
    }

    fn tag(&self) -> u64 {
        match self {
            TransformKind::MlpExpand { .. } => 1,
            TransformKind::AddHeads { .. } => 2,
            TransformKind::HeadsExpand { .. } => 3,
            TransformKind::AttentionExpand { .. } => 4,
            TransformKind::HiddenExpand { .. } => 5,
            TransformKind::AddLayer { .. } => 6,
        }
    }

    /// Checks the kind against the current config and returns the config
    /// after the transformation.
    pub fn expanded_config(&self, config: &ModelConfig) -> Result<ModelConfig> {
        let mut next = config.clone();
        let grow = |what: &str, old: usize, new: usize| {
            if new > old {
                Ok(new)
            } else {
                Err(Error::invalid(format!("{what} must grow: {old} -> {new}")))
            }
        };
        match *self {
            TransformKind::MlpExpand { new_p } => next.mlp_inner = grow("p", config.mlp_inner, new_p)?,
            TransformKind::AddHeads { count } => {
                if count == 0 {
                    return Err(Error::invalid("add_heads count must be >= 1"));
                }
                next.num_heads += count;
            }
            TransformKind::HeadsExpand { new_v } => next.value_dim = grow("v", config.value_dim, new_v)?,
            TransformKind::AttentionExpand { new_k } => next.key_dim = grow("k", config.key_dim, new_k)?,
            TransformKind::HiddenExpand { new_h } => next.hidden = grow("h", config.hidden, new_h)?,
            TransformKind::AddLayer { position } => {
                if position == 0 || position > config.num_layers + 1 {
                    return Err(Error::invalid(format!(
                        "add_layer position {position} outside 1..={}",
                        config.num_layers + 1
                    )));
                }
                next.num_layers += 1;
            }
        }
        Ok(next)
    }
}

/// One step of an expansion schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformSpec {
    pub kind: TransformKind,
    /// Fill for blocks the preservation argument leaves unconstrained.
    pub init: InitPolicy,
    /// Overrides the zero fill of constrained blocks. Breaks preservation.
    pub unsafe_fill: Option<InitPolicy>,
}

impl TransformSpec {
    pub fn new(kind: TransformKind, init: InitPolicy) -> Self {
        TransformSpec {
            kind,
            init,
            unsafe_fill: None,
        }
    }

    pub fn with_unsafe_fill(mut self, fill: InitPolicy) -> Self {
        self.unsafe_fill = Some(fill);
        self
    }

    pub fn check(&self) -> Result<()> {
        self.init.check()?;
        if let Some(fill) = &self.unsafe_fill {
            fill.check()?;
        }
        Ok(())
    }
}

// Tensor tags used in derived RNG keys.
const T_WQ: u64 = 1;
const T_WK: u64 = 2;
const T_WV: u64 = 3;
const T_WO: u64 = 4;
const T_WL1: u64 = 5;
const T_BL1: u64 = 6;
const T_WL2: u64 = 7;
const T_BL2: u64 = 8;
const T_G_MHA: u64 = 9;
const T_G_MLP: u64 = 10;
const T_EMB: u64 = 11;
const T_POS: u64 = 12;
const T_WOUT: u64 = 13;
/// Marks keys of constrained blocks so unsafe fills never reuse init streams.
const CONSTRAINED: u64 = 1 << 32;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    /// Real weight surgery.
    Weights,
    /// Shape-only expansion of per-parameter state (optimizer moments): every
    /// new slot is zero and nothing is rescaled.
    State,
}

struct Surgery<'a> {
    spec: &'a TransformSpec,
    mode: Mode,
}

impl Surgery<'_> {
    fn key(&self, tensor: u64, layer: usize, head: usize) -> [u64; 4] {
        [self.spec.kind.tag(), tensor, layer as u64, head as u64]
    }

    /// Block that preservation leaves arbitrary.
    fn free(&self, rows: usize, cols: usize, tensor: u64, layer: usize, head: usize) -> Matrix {
        match self.mode {
            Mode::State => Matrix::zeros(rows, cols),
            Mode::Weights => self.spec.init.block(rows, cols, &self.key(tensor, layer, head)),
        }
    }

    /// Block that must be zero for function preservation.
    fn constrained(&self, rows: usize, cols: usize, tensor: u64, layer: usize, head: usize) -> Matrix {
        match (self.mode, &self.spec.unsafe_fill) {
            (Mode::Weights, Some(fill)) => fill.block(rows, cols, &self.key(tensor | CONSTRAINED, layer, head)),
            _ => Matrix::zeros(rows, cols),
        }
    }

    fn rescale(&self, m: &Matrix, factor: f64) -> Matrix {
        match self.mode {
            Mode::Weights => m.scale(factor),
            Mode::State => m.clone(),
        }
    }

    fn run(&self, config: &ModelConfig, params: &ModelParams) -> Result<(ModelConfig, ModelParams)> {
        self.spec.check()?;
        validate(params, config).map_err(Error::Validation)?;
        let next = self.spec.kind.expanded_config(config)?;
        let params = match self.spec.kind {
            TransformKind::MlpExpand { new_p } => self.mlp_expand(config, params, new_p)?,
            TransformKind::AddHeads { count } => self.add_heads(config, params, count)?,
            TransformKind::HeadsExpand { new_v } => self.heads_expand(config, params, new_v)?,
            TransformKind::AttentionExpand { new_k } => self.attention_expand(config, params, new_k)?,
            TransformKind::HiddenExpand { new_h } => self.hidden_expand(config, params, new_h)?,
            TransformKind::AddLayer { position } => self.add_layer(config, params, position)?,
        };
        debug_assert!(validate(&params, &next).is_ok());
        Ok((next, params))
    }

    fn mlp_expand(&self, config: &ModelConfig, params: &ModelParams, new_p: usize) -> Result<ModelParams> {
        let (h, dp) = (config.hidden, new_p - config.mlp_inner);
        let mut out = params.clone();
        for (n, layer) in out.layers.iter_mut().enumerate() {
            layer.wl1 = layer.wl1.concat_cols(&self.free(h, dp, T_WL1, n, 0))?;
            layer.bl1 = layer.bl1.concat_cols(&self.free(1, dp, T_BL1, n, 0))?;
            layer.wl2 = layer.wl2.concat_rows(&self.constrained(dp, h, T_WL2, n, 0))?;
        }
        Ok(out)
    }

    fn new_head(&self, config: &ModelConfig, layer: usize, head: usize) -> HeadParams {
        let (h, k, v) = (config.hidden, config.key_dim, config.value_dim);
        HeadParams {
            wq: self.free(h, k, T_WQ, layer, head),
            wk: self.free(h, k, T_WK, layer, head),
            wv: self.free(h, v, T_WV, layer, head),
        }
    }

    fn add_heads(&self, config: &ModelConfig, params: &ModelParams, count: usize) -> Result<ModelParams> {
        let (h, v, e) = (config.hidden, config.value_dim, config.num_heads);
        let mut out = params.clone();
        for (n, layer) in out.layers.iter_mut().enumerate() {
            for head in e..e + count {
                layer.heads.push(self.new_head(config, n, head));
                layer.wo = layer.wo.concat_rows(&self.constrained(v, h, T_WO, n, head))?;
            }
        }
        Ok(out)
    }

    fn heads_expand(&self, config: &ModelConfig, params: &ModelParams, new_v: usize) -> Result<ModelParams> {
        let (h, v, dv) = (config.hidden, config.value_dim, new_v - config.value_dim);
        let mut out = params.clone();
        for (n, layer) in out.layers.iter_mut().enumerate() {
            let mut splits = Vec::with_capacity(2 * layer.heads.len());
            for (e, head) in layer.heads.iter_mut().enumerate() {
                head.wv = head.wv.concat_cols(&self.free(h, dv, T_WV, n, e))?;
                splits.push(layer.wo.slice_rows(e * v, (e + 1) * v)?);
                splits.push(self.constrained(dv, h, T_WO, n, e));
            }
            layer.wo = Matrix::vstack(&splits)?;
        }
        Ok(out)
    }

    fn attention_expand(&self, config: &ModelConfig, params: &ModelParams, new_k: usize) -> Result<ModelParams> {
        let (h, k, dk) = (config.hidden, config.key_dim, new_k - config.key_dim);
        let factor = (new_k as f64).sqrt() / (k as f64).sqrt();
        let mut out = params.clone();
        for (n, layer) in out.layers.iter_mut().enumerate() {
            for (e, head) in layer.heads.iter_mut().enumerate() {
                head.wq = head.wq.concat_cols(&self.free(h, dk, T_WQ, n, e))?;
                head.wk = self
                    .rescale(&head.wk, factor)
                    .concat_cols(&self.constrained(h, dk, T_WK, n, e))?;
            }
        }
        Ok(out)
    }

    fn hidden_expand(&self, config: &ModelConfig, params: &ModelParams, new_h: usize) -> Result<ModelParams> {
        let h = config.hidden;
        let dh = new_h - h;
        let factor = (h as f64).sqrt() / (new_h as f64).sqrt();
        let (p, o) = (config.mlp_inner, config.out_dim);
        let mut out = params.clone();
        out.embedding = out
            .embedding
            .concat_cols(&self.constrained(config.vocab, dh, T_EMB, 0, 0))?;
        out.pos = out
            .pos
            .concat_cols(&self.constrained(config.max_seq, dh, T_POS, 0, 0))?;
        out.w_out = out.w_out.concat_rows(&self.free(dh, o, T_WOUT, 0, 0))?;
        for (n, layer) in out.layers.iter_mut().enumerate() {
            layer.g_mha = self
                .rescale(&layer.g_mha, factor)
                .concat_cols(&self.free(1, dh, T_G_MHA, n, 0))?;
            layer.g_mlp = self
                .rescale(&layer.g_mlp, factor)
                .concat_cols(&self.free(1, dh, T_G_MLP, n, 0))?;
            for (e, head) in layer.heads.iter_mut().enumerate() {
                head.wq = head.wq.concat_rows(&self.free(dh, config.key_dim, T_WQ, n, e))?;
                head.wk = head.wk.concat_rows(&self.free(dh, config.key_dim, T_WK, n, e))?;
                head.wv = head.wv.concat_rows(&self.free(dh, config.value_dim, T_WV, n, e))?;
            }
            let ev = layer.wo.rows();
            layer.wo = layer.wo.concat_cols(&self.constrained(ev, dh, T_WO, n, 0))?;
            layer.wl1 = layer.wl1.concat_rows(&self.free(dh, p, T_WL1, n, 0))?;
            layer.wl2 = layer.wl2.concat_cols(&self.constrained(p, dh, T_WL2, n, 0))?;
            layer.bl2 = layer.bl2.concat_cols(&self.constrained(1, dh, T_BL2, n, 0))?;
        }
        Ok(out)
    }

    fn add_layer(&self, config: &ModelConfig, params: &ModelParams, position: usize) -> Result<ModelParams> {
        let idx = position - 1;
        let (h, p, v, e) = (config.hidden, config.mlp_inner, config.value_dim, config.num_heads);
        let gain = match self.mode {
            Mode::Weights => Matrix::filled(1, h, 1.0),
            Mode::State => Matrix::zeros(1, h),
        };
        let layer = LayerParams {
            g_mha: gain.clone(),
            heads: (0..e).map(|head| self.new_head(config, idx, head)).collect(),
            wo: self.constrained(e * v, h, T_WO, idx, 0),
            g_mlp: gain,
            wl1: self.free(h, p, T_WL1, idx, 0),
            bl1: self.free(1, p, T_BL1, idx, 0),
            wl2: self.constrained(p, h, T_WL2, idx, 0),
            bl2: self.constrained(1, h, T_BL2, idx, 0),
        };
        let mut out = params.clone();
        out.layers.insert(idx, layer);
        Ok(out)
    }
}

/// Applies one transformation, returning the new config and parameters.
pub fn apply(config: &ModelConfig, params: &ModelParams, spec: &TransformSpec) -> Result<(ModelConfig, ModelParams)> {
    Surgery {
        spec,
        mode: Mode::Weights,
    }
    .run(config, params)
}

/// Grows a parameter-shaped state buffer (gradients, optimizer moments) the
/// same way `spec` grows the parameters: new slots are zero, existing values
/// are kept as they are, and nothing is rescaled.
pub fn expand_state(config: &ModelConfig, state: &ModelParams, spec: &TransformSpec) -> Result<ModelParams> {
    Surgery {
        spec,
        mode: Mode::State,
    }
    .run(config, state)
    .map(|(_, s)| s)
}

pub fn mlp_expand(
    config: &ModelConfig,
    params: &ModelParams,
    new_p: usize,
    init: InitPolicy,
) -> Result<(ModelConfig, ModelParams)> {
    apply(
        config,
        params,
        &TransformSpec::new(TransformKind::MlpExpand { new_p }, init),
    )
}

pub fn add_heads(
    config: &ModelConfig,
    params: &ModelParams,
    count: usize,
    init: InitPolicy,
) -> Result<(ModelConfig, ModelParams)> {
    apply(
        config,
        params,
        &TransformSpec::new(TransformKind::AddHeads { count }, init),
    )
}

pub fn heads_expand(
    config: &ModelConfig,
    params: &ModelParams,
    new_v: usize,
    init: InitPolicy,
) -> Result<(ModelConfig, ModelParams)> {
    apply(
        config,
        params,
        &TransformSpec::new(TransformKind::HeadsExpand { new_v }, init),
    )
}

pub fn attention_expand(
    config: &ModelConfig,
    params: &ModelParams,
    new_k: usize,
    init: InitPolicy,
) -> Result<(ModelConfig, ModelParams)> {
    apply(
        config,
        params,
        &TransformSpec::new(TransformKind::AttentionExpand { new_k }, init),
    )
}

pub fn hidden_expand(
    config: &ModelConfig,
    params: &ModelParams,
    new_h: usize,
    init: InitPolicy,
) -> Result<(ModelConfig, ModelParams)> {
    apply(
        config,
        params,
        &TransformSpec::new(TransformKind::HiddenExpand { new_h }, init),
    )
}

pub fn add_layer(
    config: &ModelConfig,
    params: &ModelParams,
    position: usize,
    init: InitPolicy,
) -> Result<(ModelConfig, ModelParams)> {
    apply(
        config,
        params,
        &TransformSpec::new(TransformKind::AddLayer { position }, init),
    )
}

/// One schedule step as recorded in the audit trail.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditEntry {
    pub index: usize,
    pub kind: TransformKind,
    pub before: ModelConfig,
    pub after: ModelConfig,
}

impl fmt::Display for AuditEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step {}: {} dims {}\u{2192}{}",
            self.index,
            self.kind.name(),
            self.before.dims(),
            self.after.dims()
        )
    }
}

/// Folds `specs` left to right. The first failing step aborts the whole
/// schedule with [`Error::Schedule`] carrying its 0-based index.
pub fn apply_schedule(
    config: &ModelConfig,
    params: &ModelParams,
    specs: &[TransformSpec],
) -> Result<(ModelConfig, ModelParams, Vec<AuditEntry>)> {
    let mut cfg = config.clone();
    let mut cur = params.clone();
    let mut audit = Vec::with_capacity(specs.len());
    for (index, spec) in specs.iter().enumerate() {
        let (next_cfg, next) = apply(&cfg, &cur, spec).map_err(|e| Error::Schedule {
            index,
            source: Box::new(e),
        })?;
        audit.push(AuditEntry {
            index,
            kind: spec.kind,
            before: cfg,
            after: next_cfg.clone(),
        });
        cfg = next_cfg;
        cur = next;
    }
    Ok((cfg, cur, audit))
}

/// State-buffer counterpart of [`apply_schedule`].
pub fn expand_state_schedule(
    config: &ModelConfig,
    state: &ModelParams,
    specs: &[TransformSpec],
) -> Result<ModelParams> {
    let mut cfg = config.clone();
    let mut cur = state.clone();
    for (index, spec) in specs.iter().enumerate() {
        let wrap = |e| Error::Schedule {
            index,
            source: Box::new(e),
        };
        cur = expand_state(&cfg, &cur, spec).map_err(wrap)?;
        cfg = spec.kind.expanded_config(&cfg).map_err(wrap)?;
    }
    Ok(cur)
}
