//! Whole-model configuration: codec, backbone choice, solver, and parameter
//! initialization. Configurations round-trip through the checkpoint
//! key=value block.

use std::collections::BTreeMap;

use crate::codec::{init_codec_params, CodecConfig};
use crate::dynamics::{
    init_ode_params, init_rnn_params, AugmentMode, BackboneKind, CellKind, OdeSpec, SolverConfig,
    SolverMethod,
};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::SplitRng;
use crate::tape::Nonlinearity;

/// Everything needed to build and run a model, minus the learned weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub codec: CodecConfig,
    pub backbone: BackboneKind,
    pub solver: SolverConfig,
    pub ode: OdeSpec,
    pub cell: CellKind,
    /// Groups per subject (`G`).
    pub groups: usize,
}

impl ModelConfig {
    /// Desk-scale ODE model over the default synthetic benchmark.
    pub fn desk_scale() -> ModelConfig {
        let codec = CodecConfig::desk_scale();
        let ode = OdeSpec::with_defaults(codec.latent_dim);
        ModelConfig {
            codec,
            backbone: BackboneKind::Ode,
            solver: SolverConfig::default(),
            ode,
            cell: CellKind::Gru,
            groups: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.solver.validate()?;
        if self.groups == 0 {
            return Err(Error::Config("groups must be >= 1".into()));
        }
        if self.ode.latent_dim != self.codec.latent_dim {
            return Err(Error::Config(format!(
                "ode latent dim {} != codec latent dim {}",
                self.ode.latent_dim, self.codec.latent_dim
            )));
        }
        if self.ode.hidden == 0 {
            return Err(Error::Config("ode hidden width must be >= 1".into()));
        }
        Ok(())
    }

    /// Initializes all trainable parameters for the chosen backbone.
    pub fn init_params(&self, rng: &mut SplitRng) -> Result<ParamSet> {
        self.validate()?;
        match self.backbone {
            BackboneKind::Ode => {
                let mut params = init_codec_params(&self.codec, rng)?;
                params.extend(init_ode_params(&self.ode, rng));
                Ok(params)
            }
            BackboneKind::LatentRnn => {
                let mut params = init_codec_params(&self.codec, rng)?;
                params.extend(init_rnn_params(self.codec.latent_dim, self.cell, rng));
                Ok(params)
            }
            BackboneKind::PureRnn => {
                // Per-frame model: spatial stages plus a cell on the spatial code.
                let full = init_codec_params(&self.codec, rng)?;
                let mut params = full.with_prefix("enc.spatial");
                params.extend(full.with_prefix("dec.spatial"));
                params.extend(init_rnn_params(self.codec.spatial_dim, self.cell, rng));
                Ok(params)
            }
        }
    }

    /// Serializes into checkpoint-config keys.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let joined = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut kv = BTreeMap::new();
        kv.insert("codec.height".into(), self.codec.height.to_string());
        kv.insert("codec.width".into(), self.codec.width.to_string());
        kv.insert("codec.group_len".into(), self.codec.group_len.to_string());
        kv.insert("codec.spatial_dim".into(), self.codec.spatial_dim.to_string());
        kv.insert("codec.latent_dim".into(), self.codec.latent_dim.to_string());
        kv.insert("codec.spatial_hidden".into(), joined(&self.codec.spatial_hidden));
        kv.insert("codec.temporal_hidden".into(), joined(&self.codec.temporal_hidden));
        kv.insert("codec.variational".into(), self.codec.variational.to_string());
        kv.insert("backbone".into(), self.backbone.name().into());
        kv.insert("solver.method".into(), self.solver.method.name().into());
        kv.insert("solver.steps".into(), self.solver.steps_per_unit.to_string());
        kv.insert("ode.augment".into(), self.ode.augment_dim.to_string());
        kv.insert("ode.augment_mode".into(), self.solver.augment_mode.name().into());
        kv.insert("ode.hidden".into(), self.ode.hidden.to_string());
        kv.insert("ode.nonlinearity".into(), self.ode.nonlinearity.name().into());
        kv.insert("rnn.cell".into(), self.cell.name().into());
        kv.insert("groups".into(), self.groups.to_string());
        kv
    }

    /// Parses from checkpoint-config keys (extra keys are ignored; the block
    /// also carries run metadata).
    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<ModelConfig> {
        let get = |key: &str| -> Result<&String> {
            kv.get(key)
                .ok_or_else(|| Error::Config(format!("checkpoint config missing key {key:?}")))
        };
        let parse_usize = |key: &str| -> Result<usize> {
            get(key)?
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("bad value for {key:?}: {e}")))
        };
        let parse_list = |key: &str| -> Result<Vec<usize>> {
            let raw = get(key)?;
            if raw.is_empty() {
                return Ok(vec![]);
            }
            raw.split(',')
                .map(|s| {
                    s.parse::<usize>()
                        .map_err(|e| Error::Config(format!("bad value for {key:?}: {e}")))
                })
                .collect()
        };

        let codec = CodecConfig {
            height: parse_usize("codec.height")?,
            width: parse_usize("codec.width")?,
            group_len: parse_usize("codec.group_len")?,
            spatial_dim: parse_usize("codec.spatial_dim")?,
            latent_dim: parse_usize("codec.latent_dim")?,
            spatial_hidden: parse_list("codec.spatial_hidden")?,
            temporal_hidden: parse_list("codec.temporal_hidden")?,
            variational: get("codec.variational")?
                .parse::<bool>()
                .map_err(|e| Error::Config(format!("bad value for codec.variational: {e}")))?,
        };
        let backbone: BackboneKind = get("backbone")?.parse()?;
        let solver = SolverConfig {
            steps_per_unit: parse_usize("solver.steps")?,
            method: get("solver.method")?.parse::<SolverMethod>()?,
            augment_mode: get("ode.augment_mode")?.parse::<AugmentMode>()?,
        };
        let ode = OdeSpec {
            latent_dim: codec.latent_dim,
            augment_dim: parse_usize("ode.augment")?,
            hidden: parse_usize("ode.hidden")?,
            nonlinearity: get("ode.nonlinearity")?.parse::<Nonlinearity>()?,
        };
        let cell: CellKind = get("rnn.cell")?.parse()?;
        let cfg = ModelConfig {
            codec,
            backbone,
            solver,
            ode,
            cell,
            groups: parse_usize("groups")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut cfg = ModelConfig::desk_scale();
        cfg.backbone = BackboneKind::LatentRnn;
        cfg.codec.variational = true;
        cfg.solver.augment_mode = AugmentMode::ConstantZero;
        let kv = cfg.to_kv();
        let back = ModelConfig::from_kv(&kv).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn mismatched_latent_dims_fail_validation() {
        let mut cfg = ModelConfig::desk_scale();
        cfg.ode.latent_dim += 1;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn pure_rnn_params_have_no_temporal_stage() {
        let mut cfg = ModelConfig::desk_scale();
        cfg.backbone = BackboneKind::PureRnn;
        let params = cfg.init_params(&mut SplitRng::new(1)).unwrap();
        assert!(params.names().any(|n| n.starts_with("enc.spatial")));
        assert!(params.names().any(|n| n.starts_with("rnn.")));
        assert!(!params.names().any(|n| n.starts_with("enc.temporal")));
        assert!(!params.names().any(|n| n.starts_with("ode.")));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = ModelConfig::desk_scale();
        let a = cfg.init_params(&mut SplitRng::new(5)).unwrap();
        let b = cfg.init_params(&mut SplitRng::new(5)).unwrap();
        assert_eq!(a, b);
    }
}
