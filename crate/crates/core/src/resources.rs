//! Exact parameter and FLOP accounting. One multiply-add counts as 2 FLOPs;
//! bias additions, activations and resampling are not counted.

use crate::error::{Error, Result};
use crate::network::{ModelConfig, ModelLayout};

fn check_positive(values: &[(&str, u64)], f: u64) -> Result<()> {
    if let Some((name, _)) = values.iter().find(|(_, v)| *v == 0) {
        return Err(Error::Config(format!("{name} must be positive")));
    }
    if f.is_multiple_of(2) {
        return Err(Error::Config(format!("filter size must be odd, got {f}")));
    }
    Ok(())
}

/// Weights of one task's grouped fusion convolution: `HW` kernels of `N×f×f`,
/// plus `HW` biases when `bias` is set.
pub fn grouped_fusion_params(n: u64, h: u64, w: u64, f: u64, bias: bool) -> Result<u64> {
    check_positive(&[("N", n), ("H", h), ("W", w), ("f", f)], f)?;
    let hw = h * w;
    Ok(hw * n * f * f + if bias { hw } else { 0 })
}

/// Weights of the equivalent dense convolution: `HW` kernels of `NHW×f×f`.
pub fn standard_fusion_params(n: u64, h: u64, w: u64, f: u64) -> Result<u64> {
    check_positive(&[("N", n), ("H", h), ("W", w), ("f", f)], f)?;
    let hw = h * w;
    Ok(hw * (n * hw) * f * f)
}

/// FLOPs of one CTAL pass for a single image, by stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CtalFlops {
    pub affinity: u64,
    pub fusion: u64,
    pub projection: u64,
    pub diffusion: u64,
    pub blend: u64,
}

impl CtalFlops {
    pub fn new(n: u64, c: u64, h: u64, w: u64, f: u64) -> Result<Self> {
        check_positive(&[("N", n), ("C", c), ("H", h), ("W", w), ("f", f)], f)?;
        let hw = h * w;
        Ok(CtalFlops {
            affinity: n * 2 * c * hw * hw,
            fusion: n * 2 * n * f * f * hw * hw,
            projection: 2 * c * c * hw * n,
            diffusion: n * 2 * c * hw * hw,
            blend: 3 * n * c * hw,
        })
    }

    pub fn total(&self) -> u64 {
        self.affinity + self.fusion + self.projection + self.diffusion + self.blend
    }
}

pub fn ctal_flops(n: u64, c: u64, h: u64, w: u64, f: u64) -> Result<u64> {
    CtalFlops::new(n, c, h, w, f).map(|c| c.total())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentCost {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

/// Per-component cost of one model for a single input image.
#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub components: Vec<ComponentCost>,
    pub total_params: u64,
    pub total_flops: u64,
    pub tasks: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filter: usize,
    pub scale: usize,
    pub variant: &'static str,
    pub gamma: f64,
}

impl CostReport {
    pub fn component(&self, name: &str) -> Option<&ComponentCost> {
        self.components.iter().find(|c| c.name == name)
    }

    /// `key=value` lines with a fixed field order.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# cost-report v1 flops=2*multiply-add bias_and_activations=excluded\n\
             config variant={} tasks={} channels={} height={} width={} filter={} scale=1/{} gamma={}\n",
            self.variant, self.tasks, self.channels, self.height, self.width, self.filter, self.scale, self.gamma
        );
        for c in &self.components {
            out.push_str(&format!(
                "component={} params={} flops={}\n",
                c.name, c.params, c.flops
            ));
        }
        out.push_str(&format!(
            "total params={} flops={}\n",
            self.total_params, self.total_flops
        ));
        out
    }
}

/// Walks the layer tree of `config` and sums analytic per-layer costs.
pub fn model_cost(config: &ModelConfig) -> Result<CostReport> {
    let layout = ModelLayout::new(config)?;
    let mut components: Vec<ComponentCost> = layout
        .components()
        .into_iter()
        .map(|(name, convs)| ComponentCost {
            name: name.to_string(),
            params: convs.iter().map(|c| c.params()).sum(),
            flops: convs.iter().map(|c| c.flops()).sum(),
        })
        .collect();
    let cc = &layout.ctal.config;
    let (n, c, h, w, f) = (
        cc.tasks as u64,
        cc.channels as u64,
        cc.height as u64,
        cc.width as u64,
        cc.filter as u64,
    );
    let ctal_params = n * grouped_fusion_params(n, h, w, f, cc.fusion_bias)?
        + layout.ctal.proj.iter().map(|p| p.params()).sum::<u64>();
    components.push(ComponentCost {
        name: "ctal".into(),
        params: ctal_params,
        flops: ctal_flops(n, c, h, w, f)?,
    });
    Ok(CostReport {
        total_params: components.iter().map(|c| c.params).sum(),
        total_flops: components.iter().map(|c| c.flops).sum(),
        components,
        tasks: config.tasks.len(),
        channels: config.channels,
        height: config.height,
        width: config.width,
        filter: config.filter,
        scale: config.scale,
        variant: config.variant.name(),
        gamma: config.gamma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fusion_counts() {
        assert_eq!(grouped_fusion_params(3, 72, 96, 3, false).unwrap(), 186_624);
        assert_eq!(standard_fusion_params(3, 72, 96, 3).unwrap(), 1_289_945_088);
        assert_eq!(grouped_fusion_params(1, 1, 1, 1, false).unwrap(), 1);
        assert_eq!(standard_fusion_params(1, 1, 1, 1).unwrap(), 1);
        assert_eq!(grouped_fusion_params(2, 3, 3, 3, true).unwrap(), 9 * 18 + 9);
        assert!(grouped_fusion_params(3, 0, 4, 3, false).is_err());
        assert!(standard_fusion_params(3, 4, 4, 2).is_err());
    }

    #[test]
    fn halving_resolution_divides_quadratic_terms_by_16() {
        let a = CtalFlops::new(3, 8, 8, 8, 3).unwrap();
        let b = CtalFlops::new(3, 8, 4, 4, 3).unwrap();
        assert_eq!(a.affinity + a.diffusion, 16 * (b.affinity + b.diffusion));
    }

    #[test]
    fn report_totals_are_component_sums() {
        let r = model_cost(&ModelConfig::three_task(5, 64, 64)).unwrap();
        assert_eq!(
            r.total_params,
            r.components.iter().map(|c| c.params).sum::<u64>()
        );
        assert_eq!(
            r.total_flops,
            r.components.iter().map(|c| c.flops).sum::<u64>()
        );
        assert!(r.to_text().contains("component=ctal params="));
    }
}
