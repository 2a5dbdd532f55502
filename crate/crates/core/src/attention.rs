//! Multi-head additive attention over a feature map.
//!
//! One MLP with hidden size `k` is split into `g` row blocks, one per head:
//!
//! ```text
//! e_j^(h) = W_M2^(h) · tanh(LN_h(W_M0^(h) f_j + W_M1^(h) h_prev))
//! α^(h)   = softmax_j(e^(h) / ε)
//! c^(h)   = Σ_j α_j^(h) v_j^(h)
//! ```
//!
//! The value slice `v_j^(h)` depends on the projection mode: the raw channel
//! group (`None`), a group of `W_f f_j` (`Untied`), or head `h`'s own rows of
//! `W_M0 f_j` (`Tied`), which is why tied mode needs no extra weights.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamKind, ParameterSet, Tape, Tensor, Var};
use crate::corpus::FeatureMap;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const W_M0: &str = "attention/W_M0";
pub const W_M1: &str = "attention/W_M1";
pub const W_M2: &str = "attention/W_M2";
pub const LN_GAIN: &str = "attention/ln_gain";
pub const LN_BIAS: &str = "attention/ln_bias";
pub const W_F: &str = "attention/W_f";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Projection {
    /// Context is pooled from the raw feature channels.
    None,
    /// Context is pooled from a separate `q × r` projection.
    Untied { q: usize },
    /// Context reuses the scoring projection `W_M0`.
    Tied,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    pub mlp_size: usize,
    pub projection: Projection,
    pub temperature: f64,
    pub feature_channels: usize,
    pub state_size: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        let g = self.heads;
        if g == 0 {
            return Err(Error::Config("attention needs at least one head".into()));
        }
        if self.mlp_size == 0 || self.feature_channels == 0 || self.state_size == 0 {
            return Err(Error::Config("attention sizes must be >= 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !self.mlp_size.is_multiple_of(g) {
            return Err(Error::Config(format!("{g} heads do not divide MLP size {}", self.mlp_size)));
        }
        match self.projection {
            Projection::None if !self.feature_channels.is_multiple_of(g) => Err(Error::Config(format!(
                "{g} heads do not divide feature channels {}",
                self.feature_channels
            ))),
            Projection::Untied { q } if q == 0 || q % g != 0 => {
                Err(Error::Config(format!("{g} heads do not divide projection size {q}")))
            }
            _ => Ok(()),
        }
    }

    /// Width of the context vector.
    pub fn context_dim(&self) -> usize {
        match self.projection {
            Projection::None => self.feature_channels,
            Projection::Untied { q } => q,
            Projection::Tied => self.mlp_size,
        }
    }
}

/// Named parameter shapes for a configuration.
pub fn attention_param_shapes(cfg: &AttentionConfig) -> Result<Vec<(&'static str, Vec<usize>, ParamKind)>> {
    cfg.validate()?;
    let (k, r, n) = (cfg.mlp_size, cfg.feature_channels, cfg.state_size);
    let mut shapes = vec![
        (W_M0, vec![k, r], ParamKind::Weight),
        (W_M1, vec![k, n], ParamKind::Weight),
        (W_M2, vec![1, k], ParamKind::Weight),
        (LN_GAIN, vec![k], ParamKind::Affine),
        (LN_BIAS, vec![k], ParamKind::Affine),
    ];
    if let Projection::Untied { q } = cfg.projection {
        shapes.push((W_F, vec![q, r], ParamKind::Weight));
    }
    Ok(shapes)
}

/// Total attention parameter count.
pub fn attention_param_count(cfg: &AttentionConfig) -> Result<usize> {
    Ok(attention_param_shapes(cfg)?
        .iter()
        .map(|(_, s, _)| s.iter().product::<usize>())
        .sum())
}

/// Handles of the attention weights inside a [`ParameterSet`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub w_m0: ParamId,
    pub w_m1: ParamId,
    pub w_m2: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub w_f: Option<ParamId>,
}

impl AttentionParams {
    /// Registers zero-initialised weights (LN gain 1).
    pub fn register<T: Scalar>(set: &mut ParameterSet<T>, cfg: &AttentionConfig) -> Result<Self> {
        let mut w_f = None;
        let mut ids = Vec::new();
        for (name, shape, kind) in attention_param_shapes(cfg)? {
            let init = if name == LN_GAIN { T::one() } else { T::zero() };
            let id = set.add(name, kind, Tensor::full(&shape, init))?;
            if name == W_F {
                w_f = Some(id);
            } else {
                ids.push(id);
            }
        }
        Ok(AttentionParams {
            w_m0: ids[0],
            w_m1: ids[1],
            w_m2: ids[2],
            ln_gain: ids[3],
            ln_bias: ids[4],
            w_f,
        })
    }

    /// Looks the handles up by name in an existing set.
    pub fn find<T: Scalar>(set: &ParameterSet<T>, cfg: &AttentionConfig) -> Result<Self> {
        let get = |n: &str| set.id(n).ok_or_else(|| Error::Config(format!("missing parameter {n}")));
        Ok(AttentionParams {
            w_m0: get(W_M0)?,
            w_m1: get(W_M1)?,
            w_m2: get(W_M2)?,
            ln_gain: get(LN_GAIN)?,
            ln_bias: get(LN_BIAS)?,
            w_f: match cfg.projection {
                Projection::Untied { .. } => Some(get(W_F)?),
                _ => None,
            },
        })
    }
}

/// Attention weights loaded on one tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    w_m0: Var,
    w_m1: Var,
    w_m2: Var,
    ln_gain: Var,
    ln_bias: Var,
    w_f: Option<Var>,
}

impl AttentionVars {
    pub fn load<T: Scalar>(tape: &mut Tape<T>, set: &ParameterSet<T>, p: &AttentionParams) -> Self {
        AttentionVars {
            w_m0: tape.param(set, p.w_m0),
            w_m1: tape.param(set, p.w_m1),
            w_m2: tape.param(set, p.w_m2),
            ln_gain: tape.param(set, p.ln_gain),
            ln_bias: tape.param(set, p.ln_bias),
            w_f: p.w_f.map(|id| tape.param(set, id)),
        }
    }
}

/// Per-image projections, computed once and reused at every step.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedFeatures {
    /// `[B·F × k]` scoring input `W_M0 f_j`.
    pub scores: Var,
    /// `[B·F × context_dim]` pooled values.
    pub values: Var,
    pub batch: usize,
    pub locations: usize,
}

/// `features` is a `[B·F × r]` stack of feature maps.
pub fn precompute_projection<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    locations: usize,
    vars: &AttentionVars,
    cfg: &AttentionConfig,
) -> Result<ProjectedFeatures> {
    let (rows, r) = (tape.value(features).rows(), tape.value(features).cols());
    if r != cfg.feature_channels || locations == 0 || rows % locations != 0 {
        return Err(Error::dim(
            "precompute_projection",
            format!(
                "features {:?} with {locations} locations, expected {} channels",
                tape.value(features).shape(),
                cfg.feature_channels
            ),
        ));
    }
    let scores = tape.matmul_t(features, vars.w_m0)?;
    let values = match cfg.projection {
        Projection::None => features,
        Projection::Untied { .. } => {
            let w_f = vars.w_f.ok_or_else(|| Error::Config("untied mode without W_f".into()))?;
            tape.matmul_t(features, w_f)?
        }
        Projection::Tied => scores,
    };
    Ok(ProjectedFeatures {
        scores,
        values,
        batch: rows / locations,
        locations,
    })
}

/// One attention read.
#[derive(Debug, Clone, Copy)]
pub struct AttentionStep {
    /// `[B × context_dim]`
    pub context: Var,
    /// `[B·F × g]`, column `h` holds head `h`'s weights.
    pub alpha: Var,
}

pub fn attend<T: Scalar>(
    tape: &mut Tape<T>,
    projected: &ProjectedFeatures,
    h_prev: Var,
    vars: &AttentionVars,
    cfg: &AttentionConfig,
) -> Result<AttentionStep> {
    let (b, n) = (tape.value(h_prev).rows(), tape.value(h_prev).cols());
    if n != cfg.state_size || b != projected.batch {
        return Err(Error::dim(
            "attend",
            format!(
                "state {:?} for batch {} with state size {}",
                tape.value(h_prev).shape(),
                projected.batch,
                cfg.state_size
            ),
        ));
    }
    let g = cfg.heads;
    let hp = tape.matmul_t(h_prev, vars.w_m1)?;
    let hp = tape.repeat_rows(hp, projected.locations)?;
    let pre = tape.add(projected.scores, hp)?;
    let normed = tape.layer_norm(pre, vars.ln_gain, vars.ln_bias, g)?;
    let act = tape.tanh(normed)?;
    let weighted = tape.mul_row(act, vars.w_m2)?;
    let scores = tape.group_sum(weighted, g)?;
    if !tape.value(scores).is_finite() {
        return Err(Error::Numeric("non-finite attention scores".into()));
    }
    let alpha = tape.block_softmax(scores, projected.locations, T::of(cfg.temperature))?;
    let context = tape.weighted_pool(alpha, projected.values, projected.locations)?;
    Ok(AttentionStep { context, alpha })
}

/// Plain-value result of a single-image attention read.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput<T> {
    pub context: Vec<T>,
    /// `g` rows of `|F|` weights.
    pub weights: Vec<Vec<T>>,
}

/// Convenience wrapper: attends one feature map with one state vector.
pub fn attend_once<T: Scalar>(
    features: &FeatureMap,
    h_prev: &[T],
    set: &ParameterSet<T>,
    cfg: &AttentionConfig,
) -> Result<AttentionOutput<T>> {
    let params = AttentionParams::find(set, cfg)?;
    let mut tape = Tape::new();
    let vars = AttentionVars::load(&mut tape, set, &params);
    let f = tape.leaf(Tensor::from_vec(
        &[features.locations(), features.channels()],
        features.data().iter().map(|&v| T::of_f32(v)).collect(),
    )?);
    let h = tape.leaf(Tensor::from_vec(&[1, h_prev.len()], h_prev.to_vec())?);
    let proj = precompute_projection(&mut tape, f, features.locations(), &vars, cfg)?;
    let step = attend(&mut tape, &proj, h, &vars, cfg)?;
    let a = tape.value(step.alpha);
    let weights = (0..cfg.heads)
        .map(|h| (0..features.locations()).map(|j| a.row(j)[h]).collect())
        .collect();
    Ok(AttentionOutput {
        context: tape.value(step.context).data().to_vec(),
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(projection: Projection, g: usize) -> AttentionConfig {
        AttentionConfig {
            heads: g,
            mlp_size: 512,
            projection,
            temperature: 1.0,
            feature_channels: 832,
            state_size: 512,
        }
    }

    #[test]
    fn paper_sized_counts() {
        let tied = attention_param_count(&cfg(Projection::Tied, 8)).unwrap();
        assert_eq!(tied, 425_984 + 262_144 + 512 + 1_024);
        let untied = attention_param_count(&cfg(Projection::Untied { q: 512 }, 8)).unwrap();
        assert_eq!(untied, tied + 425_984);
        for mode in [Projection::None, Projection::Tied, Projection::Untied { q: 512 }] {
            let one = attention_param_count(&cfg(mode, 1)).unwrap();
            assert_eq!(one, attention_param_count(&cfg(mode, 8)).unwrap());
        }
    }

    #[test]
    fn divisibility_is_checked() {
        assert!(cfg(Projection::Tied, 3).validate().is_err());
        assert!(cfg(Projection::Untied { q: 500 }, 8).validate().is_err());
        let mut c = cfg(Projection::None, 8);
        c.feature_channels = 830;
        c.mlp_size = 16;
        assert!(c.validate().is_err());
        assert!(attention_param_shapes(&c).is_err());
    }

    #[test]
    fn context_dims() {
        assert_eq!(cfg(Projection::None, 1).context_dim(), 832);
        assert_eq!(cfg(Projection::Untied { q: 256 }, 1).context_dim(), 256);
        assert_eq!(cfg(Projection::Tied, 1).context_dim(), 512);
    }
}
