use crate::nn::NormMode;
use crate::protolearn::DistillVariant;
use crate::{Error, Result};

/// What an FSL step does: classifier initialization, whether the network is
/// fine-tuned, the normalization used while fine-tuning and the distillation
/// term.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSpec {
    pub name: String,
    pub imprint: bool,
    pub finetune: bool,
    pub norm_mode: NormMode,
    pub distill: DistillVariant,
    pub lambda: f64,
}

/// Registered method names in the ablation row order; `pifs` is the last row.
pub const METHOD_NAMES: [&str; 10] =
    ["ft", "ft_kd", "ft_l2", "wi", "wi_ft", "wi_ft_pd", "wi_ft_br", "wi_ft_br_kd", "wi_ft_br_l2", "pifs"];

/// Human-readable ablation labels matching [`METHOD_NAMES`].
pub const ABLATION_LABELS: [&str; 10] =
    ["FT", "FT+KD", "FT+L2", "WI", "FT+WI", "FT+WI+PD", "FT+WI+BR", "FT+WI+BR+KD", "FT+WI+BR+L2", "FT+WI+BR+PD"];

impl MethodSpec {
    pub fn by_name(name: &str) -> Result<Self> {
        let (imprint, finetune, br, distill) = match name {
            "ft" => (false, true, false, DistillVariant::None),
            "ft_kd" => (false, true, false, DistillVariant::Kd),
            "ft_l2" => (false, true, false, DistillVariant::L2),
            "wi" => (true, false, false, DistillVariant::None),
            "wi_ft" => (true, true, false, DistillVariant::None),
            "wi_ft_pd" => (true, true, false, DistillVariant::Pd),
            "wi_ft_br" => (true, true, true, DistillVariant::None),
            "wi_ft_br_kd" => (true, true, true, DistillVariant::Kd),
            "wi_ft_br_l2" => (true, true, true, DistillVariant::L2),
            "pifs" | "wi_ft_br_pd" => (true, true, true, DistillVariant::Pd),
            other => return Err(Error::Config(format!("unknown method {other:?}; known: {}", METHOD_NAMES.join(", ")))),
        };
        Ok(Self {
            name: name.to_string(),
            imprint,
            finetune,
            norm_mode: if br { NormMode::BatchRenorm } else { NormMode::BatchNorm },
            distill,
            lambda: 10.0,
        })
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_flags() {
        let p = MethodSpec::by_name("pifs").unwrap();
        assert!(p.imprint && p.finetune);
        assert_eq!((p.norm_mode, p.distill, p.lambda), (NormMode::BatchRenorm, DistillVariant::Pd, 10.0));
        let f = MethodSpec::by_name("ft").unwrap();
        assert!(!f.imprint && f.finetune);
        assert_eq!((f.norm_mode, f.distill), (NormMode::BatchNorm, DistillVariant::None));
        for n in METHOD_NAMES {
            assert_eq!(MethodSpec::by_name(n).unwrap().name, n);
        }
        assert!(MethodSpec::by_name("dwi").is_err());
    }
}
