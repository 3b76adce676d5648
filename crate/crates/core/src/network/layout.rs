//! Static description of every layer: names, shapes and output resolution.
//! Both parameter allocation and the analytic cost model walk this tree.

use rand::Rng;

use crate::ctal::CtalConfig;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::{ModelConfig, Variant};
use super::params::ParamStore;

/// Number of encoder pyramid levels fed to the decoder.
pub const PYRAMID_LEVELS: usize = 4;

/// Weight initialisation family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// `U(±sqrt(6/fan_in))`, for layers followed by ReLU.
    He,
    /// `U(±sqrt(3/fan_in))`, unit-variance preserving for linear outputs.
    Lecun,
}

/// A biased, ungrouped, square-kernel convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub relu: bool,
    /// Output spatial extent for the configured input size.
    pub out_height: usize,
    pub out_width: usize,
    pub init: Init,
}

impl ConvSpec {
    fn new(
        name: String,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
        out: (usize, usize),
    ) -> Self {
        ConvSpec {
            name,
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            relu,
            out_height: out.0,
            out_width: out.1,
            init: if relu { Init::He } else { Init::Lecun },
        }
    }

    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel,
            self.kernel,
        ]
    }

    pub fn params(&self) -> u64 {
        (self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels)
            as u64
    }

    /// Multiply-adds counted twice, bias additions excluded, batch 1.
    pub fn flops(&self) -> u64 {
        2 * (self.out_channels
            * self.in_channels
            * self.kernel
            * self.kernel
            * self.out_height
            * self.out_width) as u64
    }

    fn allocate<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        let fan_in = (self.in_channels * self.kernel * self.kernel) as f64;
        let bound = match self.init {
            Init::He => (6.0 / fan_in).sqrt(),
            Init::Lecun => (3.0 / fan_in).sqrt(),
        };
        store.insert(
            self.weight_name(),
            Tensor::uniform(&self.weight_shape(), -bound, bound, rng),
        )?;
        store.insert(self.bias_name(), Tensor::zeros(&[self.out_channels]))
    }
}

/// `conv3×3 → ReLU → conv3×3`, added to its input.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualSpec {
    pub first: ConvSpec,
    pub second: ConvSpec,
}

/// Projection to `C` channels, two residual blocks, output convolution.
/// The second block's output is the head's intermediate feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadSpec {
    pub proj: ConvSpec,
    pub blocks: [ResidualSpec; 2],
    pub out: ConvSpec,
}

impl HeadSpec {
    fn new(prefix: &str, cin: usize, c: usize, cout: usize, res: (usize, usize)) -> Self {
        let block = |j: usize| ResidualSpec {
            first: ConvSpec::new(format!("{prefix}.block{j}.conv1"), c, c, 3, 1, true, res),
            second: ConvSpec::new(format!("{prefix}.block{j}.conv2"), c, c, 3, 1, false, res),
        };
        HeadSpec {
            proj: ConvSpec::new(format!("{prefix}.proj"), cin, c, 1, 1, false, res),
            blocks: [block(0), block(1)],
            out: ConvSpec::new(format!("{prefix}.out"), c, cout, 1, 1, false, res),
        }
    }

    pub fn convs(&self) -> Vec<&ConvSpec> {
        let mut v = vec![&self.proj];
        for b in &self.blocks {
            v.push(&b.first);
            v.push(&b.second);
        }
        v.push(&self.out);
        v
    }
}

/// Names of the CTAL tensors, per task.
#[derive(Clone, Debug, PartialEq)]
pub struct CtalSpec {
    pub config: CtalConfig,
    pub fuse_weight: Vec<String>,
    pub fuse_bias: Vec<Option<String>>,
    pub proj: Vec<ConvSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DecoderSpec {
    Single {
        csf: ConvSpec,
        initial: Vec<HeadSpec>,
        finals: Vec<HeadSpec>,
    },
    Multi {
        /// `[task][scale]`.
        initial: Vec<Vec<HeadSpec>>,
        /// Per task.
        csf: Vec<ConvSpec>,
        /// Per task: `conv3×3 → ReLU`, then `conv1×1`.
        finals: Vec<[ConvSpec; 2]>,
    },
}

/// The complete layer tree of one model configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelLayout {
    pub encoder: Vec<ConvSpec>,
    pub decoder: DecoderSpec,
    pub ctal: CtalSpec,
}

/// Channel width of each pyramid level (1/4 … 1/32).
pub fn pyramid_channels(width: usize) -> [usize; PYRAMID_LEVELS] {
    [width, 2 * width, 4 * width, 8 * width]
}

impl ModelLayout {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (h, w) = (cfg.height, cfg.width);
        let wd = cfg.encoder_width;
        let chans = pyramid_channels(wd);
        let mut encoder = vec![ConvSpec::new(
            "encoder.stem".into(),
            3,
            wd,
            3,
            2,
            true,
            (h / 2, w / 2),
        )];
        let mut cin = wd;
        for (level, &cout) in chans.iter().enumerate() {
            let div = 4 << level;
            encoder.push(ConvSpec::new(
                format!("encoder.down{}", level + 1),
                cin,
                cout,
                3,
                2,
                true,
                (h / div, w / div),
            ));
            cin = cout;
        }

        let c = cfg.channels;
        let quarter = cfg.feature_dims();
        let decoder = match cfg.variant {
            Variant::SingleScale => DecoderSpec::Single {
                csf: ConvSpec::new("ss.csf".into(), chans.iter().sum(), c, 3, 1, true, quarter),
                initial: cfg
                    .tasks
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        HeadSpec::new(&format!("ss.initial.task{k}"), c, c, t.channels, quarter)
                    })
                    .collect(),
                finals: cfg
                    .tasks
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        HeadSpec::new(&format!("ss.final.task{k}"), c, c, t.channels, quarter)
                    })
                    .collect(),
            },
            Variant::MultiScale => DecoderSpec::Multi {
                initial: cfg
                    .tasks
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        (0..PYRAMID_LEVELS)
                            .map(|s| {
                                let div = 4 << s;
                                HeadSpec::new(
                                    &format!("ms.initial.task{k}.scale{s}"),
                                    chans[s],
                                    c,
                                    t.channels,
                                    (h / div, w / div),
                                )
                            })
                            .collect()
                    })
                    .collect(),
                csf: (0..cfg.tasks.len())
                    .map(|k| {
                        ConvSpec::new(
                            format!("ms.csf.task{k}"),
                            PYRAMID_LEVELS * c,
                            c,
                            3,
                            1,
                            true,
                            quarter,
                        )
                    })
                    .collect(),
                finals: cfg
                    .tasks
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        [
                            ConvSpec::new(
                                format!("ms.final.task{k}.conv1"),
                                c,
                                c,
                                3,
                                1,
                                true,
                                quarter,
                            ),
                            ConvSpec::new(
                                format!("ms.final.task{k}.conv2"),
                                c,
                                t.channels,
                                1,
                                1,
                                false,
                                quarter,
                            ),
                        ]
                    })
                    .collect(),
            },
        };

        let ctal = cfg.ctal_config();
        let n = cfg.tasks.len();
        let ctal = CtalSpec {
            fuse_weight: (0..n)
                .map(|k| format!("ctal.fuse.task{k}.weight"))
                .collect(),
            fuse_bias: (0..n)
                .map(|k| ctal.fusion_bias.then(|| format!("ctal.fuse.task{k}.bias")))
                .collect(),
            proj: (0..n)
                .map(|k| {
                    ConvSpec::new(
                        format!("ctal.proj.task{k}"),
                        c,
                        c,
                        1,
                        1,
                        false,
                        (ctal.height, ctal.width),
                    )
                })
                .collect(),
            config: ctal,
        };
        Ok(ModelLayout {
            encoder,
            decoder,
            ctal,
        })
    }

    /// Every convolution outside CTAL, grouped by component name.
    pub fn components(&self) -> Vec<(&'static str, Vec<&ConvSpec>)> {
        let mut out = vec![("encoder", self.encoder.iter().collect())];
        match &self.decoder {
            DecoderSpec::Single {
                csf,
                initial,
                finals,
            } => {
                out.push(("csf", vec![csf]));
                out.push((
                    "initial_heads",
                    initial.iter().flat_map(HeadSpec::convs).collect(),
                ));
                out.push((
                    "final_heads",
                    finals.iter().flat_map(HeadSpec::convs).collect(),
                ));
            }
            DecoderSpec::Multi {
                initial,
                csf,
                finals,
            } => {
                out.push((
                    "initial_heads",
                    initial.iter().flatten().flat_map(HeadSpec::convs).collect(),
                ));
                out.push(("csf", csf.iter().collect()));
                out.push(("final_heads", finals.iter().flatten().collect()));
            }
        }
        out
    }

    /// Allocates and initialises every tensor in a fixed order.
    pub fn allocate<T: Scalar>(&self, rng: &mut impl Rng) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for (_, convs) in self.components() {
            for conv in convs {
                conv.allocate(&mut store, rng)?;
            }
        }
        let cfg = &self.ctal.config;
        let (n, hw, f) = (cfg.tasks, cfg.positions(), cfg.filter);
        let fuse_bound = 1.0 / ((n * f * f) as f64).sqrt();
        for k in 0..n {
            store.insert(
                self.ctal.fuse_weight[k].clone(),
                Tensor::uniform(&[hw, n, f, f], -fuse_bound, fuse_bound, rng),
            )?;
            if let Some(b) = &self.ctal.fuse_bias[k] {
                store.insert(b.clone(), Tensor::zeros(&[hw]))?;
            }
            self.ctal.proj[k].allocate(&mut store, rng)?;
        }
        Ok(store)
    }
}
