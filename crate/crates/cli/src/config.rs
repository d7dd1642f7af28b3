//! Flat `key = value` run configuration.

use std::path::Path;

use adaseg_core::codespace::{Ablation, HyperParams};
use adaseg_core::networks::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, IoContext, Result};

/// Every tunable of a run. Unlisted keys keep their defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub img_size: usize,
    pub width: usize,
    pub max_width: usize,
    pub n_down: usize,
    pub n_mid: usize,
    pub mlp_hidden: usize,

    pub learning_rate: f64,
    pub batch_size: usize,
    pub iters_joint: usize,
    pub iters_self: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lr_milestone_1: f64,
    pub lr_milestone_2: f64,
    pub grad_clip: f64,

    pub lambda_cycle: f64,
    pub lambda_style: f64,
    pub lambda_div: f64,
    pub lambda_seg: f64,
    pub lambda_inter: f64,
    pub lambda_intra: f64,
    pub eps_adain: f64,
    pub div_decay: bool,
    pub paper_literal_adv: bool,

    pub use_seg: bool,
    pub use_style_seg: bool,
    pub use_adv: bool,
    pub use_cycle: bool,
    pub use_style_da: bool,
    pub use_div: bool,
    pub use_self_inter: bool,
    pub use_self_intra: bool,

    pub teacher_refresh: usize,
    pub mix_supervised: bool,
    pub supervised_only: bool,
    pub eval_interval: usize,
    pub checkpoint_interval: usize,
    pub prebuild_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_parts(&ModelConfig::default(), &HyperParams::default())
    }
}

impl RunConfig {
    pub fn from_parts(m: &ModelConfig, hp: &HyperParams) -> Self {
        let ab = hp.ablation;
        RunConfig {
            img_size: m.img_size,
            width: m.width,
            max_width: m.max_width,
            n_down: m.n_down,
            n_mid: m.n_mid,
            mlp_hidden: m.mlp_hidden,
            learning_rate: hp.learning_rate,
            batch_size: hp.batch_size,
            iters_joint: hp.iters_joint,
            iters_self: hp.iters_self,
            seed: hp.seed,
            adam_beta1: hp.adam_beta1,
            adam_beta2: hp.adam_beta2,
            adam_eps: hp.adam_eps,
            lr_milestone_1: hp.lr_milestones[0],
            lr_milestone_2: hp.lr_milestones[1],
            grad_clip: hp.grad_clip,
            lambda_cycle: hp.lambda_cycle,
            lambda_style: hp.lambda_style,
            lambda_div: hp.lambda_div,
            lambda_seg: hp.lambda_seg,
            lambda_inter: hp.lambda_inter,
            lambda_intra: hp.lambda_intra,
            eps_adain: hp.eps_adain,
            div_decay: hp.div_decay,
            paper_literal_adv: hp.paper_literal_adv,
            use_seg: ab.seg,
            use_style_seg: ab.style_seg,
            use_adv: ab.adv,
            use_cycle: ab.cycle,
            use_style_da: ab.style_da,
            use_div: ab.div,
            use_self_inter: ab.self_inter,
            use_self_intra: ab.self_intra,
            teacher_refresh: hp.teacher_refresh,
            mix_supervised: hp.mix_supervised,
            supervised_only: hp.supervised_only,
            eval_interval: hp.eval_interval,
            checkpoint_interval: hp.checkpoint_interval,
            prebuild_samples: hp.prebuild_samples,
        }
    }

    /// The 64×64, width-16 setting used for CPU runs.
    pub fn desk() -> Self {
        let hp = HyperParams {
            iters_joint: 2000,
            iters_self: 500,
            prebuild_samples: 200,
            ..HyperParams::default()
        };
        RunConfig::from_parts(&ModelConfig::desk(), &hp)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            img_size: self.img_size,
            width: self.width,
            max_width: self.max_width,
            n_down: self.n_down,
            n_mid: self.n_mid,
            mlp_hidden: self.mlp_hidden,
        }
    }

    pub fn hyper_params(&self) -> HyperParams {
        HyperParams {
            lambda_cycle: self.lambda_cycle,
            lambda_style: self.lambda_style,
            lambda_div: self.lambda_div,
            lambda_seg: self.lambda_seg,
            lambda_inter: self.lambda_inter,
            lambda_intra: self.lambda_intra,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            iters_joint: self.iters_joint,
            iters_self: self.iters_self,
            eps_adain: self.eps_adain,
            seed: self.seed,
            ablation: Ablation {
                seg: self.use_seg,
                style_seg: self.use_style_seg,
                adv: self.use_adv,
                cycle: self.use_cycle,
                style_da: self.use_style_da,
                div: self.use_div,
                self_inter: self.use_self_inter,
                self_intra: self.use_self_intra,
            },
            paper_literal_adv: self.paper_literal_adv,
            div_decay: self.div_decay,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            lr_milestones: [self.lr_milestone_1, self.lr_milestone_2],
            teacher_refresh: self.teacher_refresh,
            grad_clip: self.grad_clip,
            mix_supervised: self.mix_supervised,
            supervised_only: self.supervised_only,
            eval_interval: self.eval_interval,
            checkpoint_interval: self.checkpoint_interval,
            prebuild_samples: self.prebuild_samples,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.hyper_params().validate()?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Effective values, one `key = value` line each, readable by [`RunConfig::parse`].
    pub fn dump(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trips() {
        let c = RunConfig::desk();
        assert_eq!(RunConfig::parse(&c.dump()).unwrap(), c);
        assert!(c.dump().lines().all(|l| l.contains(" = ")));
    }

    #[test]
    fn missing_keys_default_and_unknown_keys_fail() {
        let c = RunConfig::parse("width = 32\n# comment\nuse_adv = false\n").unwrap();
        assert_eq!(c.width, 32);
        assert!(!c.use_adv);
        assert_eq!(c.iters_joint, 20_000);
        assert!(matches!(
            RunConfig::parse("widht = 3"),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let e = RunConfig::parse("learning_rate = -1.0").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = RunConfig::parse("img_size = 48").unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }
}
