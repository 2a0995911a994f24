//! The three task architectures, their matched activation sites, and the
//! per-client matching decoders that reconstruct each site from the one
//! above it.
//!
//! Convolutions use stride 1 and "same" zero padding (`k / 2`), so every
//! spatial size halves only at the 2x2 pools:
//!
//! | arch        | input      | parameters |
//! |-------------|------------|-----------:|
//! | `mnist_mlp` | 784        |     89,610 |
//! | `cifar_cnn` | 3 x 32 x 32 |  4,259,274 |
//! | `kws_cnn`   | 1 x 32 x 32 |  4,317,002 |

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ConvSpec, ForwardTrace, LayerSpec, ModelGraph, ParamSet, PoolSwitches};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchId {
    MnistMlp,
    CifarCnn,
    KwsCnn,
}

impl ArchId {
    pub const ALL: [ArchId; 3] = [ArchId::MnistMlp, ArchId::CifarCnn, ArchId::KwsCnn];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchId::MnistMlp => "mnist_mlp",
            ArchId::CifarCnn => "cifar_cnn",
            ArchId::KwsCnn => "kws_cnn",
        }
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchId::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown architecture `{s}`")))
    }
}

/// An activation site used by the matching loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Site {
    Input,
    /// Output of the layer with this index.
    Layer(usize),
}

impl Site {
    fn order(self) -> isize {
        match self {
            Site::Input => -1,
            Site::Layer(i) => i as isize,
        }
    }

    /// This site's activation in `trace`.
    pub fn activation(self, trace: &ForwardTrace) -> &Tensor {
        match self {
            Site::Input => &trace.input,
            Site::Layer(i) => &trace.outputs[i],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelArch {
    pub id: ArchId,
    pub graph: ModelGraph,
    pub num_classes: usize,
}

impl ModelArch {
    /// Matched sites: optionally the input, every relu output, and the top
    /// layer, in increasing layer order.
    pub fn match_sites(&self, include_input: bool) -> Vec<Site> {
        let mut sites = Vec::new();
        if include_input {
            sites.push(Site::Input);
        }
        let layers = self.graph.layers();
        for (i, l) in layers.iter().enumerate() {
            if *l == LayerSpec::Relu {
                sites.push(Site::Layer(i));
            }
        }
        sites.push(Site::Layer(layers.len() - 1));
        sites
    }

    pub fn site_shape(&self, site: Site) -> &[usize] {
        match site {
            Site::Input => self.graph.input_shape(),
            Site::Layer(i) => self.graph.layer_shape(i),
        }
    }
}

pub fn build_arch(id: ArchId) -> ModelArch {
    let dense = |inputs, outputs| LayerSpec::Dense { inputs, outputs };
    let conv = |i, o, k| LayerSpec::Conv2d(ConvSpec::same(i, o, k));
    let (input, layers) = match id {
        ArchId::MnistMlp => (
            vec![784],
            vec![
                dense(784, 100),
                LayerSpec::Relu,
                dense(100, 100),
                LayerSpec::Relu,
                dense(100, NUM_CLASSES),
            ],
        ),
        ArchId::CifarCnn => (
            vec![3, 32, 32],
            vec![
                conv(3, 32, 5),
                LayerSpec::Relu,
                LayerSpec::MaxPool2x2,
                conv(32, 64, 5),
                LayerSpec::Relu,
                LayerSpec::MaxPool2x2,
                LayerSpec::Flatten,
                dense(64 * 8 * 8, 1024),
                LayerSpec::Relu,
                dense(1024, NUM_CLASSES),
            ],
        ),
        ArchId::KwsCnn => (
            vec![1, 32, 32],
            vec![
                conv(1, 64, 3),
                LayerSpec::Relu,
                conv(64, 64, 3),
                LayerSpec::Relu,
                LayerSpec::MaxPool2x2,
                conv(64, 64, 3),
                LayerSpec::Relu,
                conv(64, 64, 3),
                LayerSpec::Relu,
                LayerSpec::MaxPool2x2,
                LayerSpec::Flatten,
                dense(64 * 8 * 8, 1024),
                LayerSpec::Relu,
                dense(1024, NUM_CLASSES),
            ],
        ),
    };
    let graph = ModelGraph::new(input, layers).expect("built-in architectures are shape-consistent");
    ModelArch {
        id,
        graph,
        num_classes: NUM_CLASSES,
    }
}

/// One matching map `f_j`: reconstructs the fixed model's activation at
/// `target` from the trainable model's activation at `source`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingLayer {
    pub source: Site,
    pub target: Site,
    pub graph: ModelGraph,
    /// Trainable-model layer indices whose pool switches feed the decoder's
    /// unpool slots, in slot order.
    pub switch_layers: Vec<usize>,
}

impl MatchingLayer {
    /// Switches from the trainable model's trace, in slot order.
    pub fn switches<'a>(&self, trace: &'a ForwardTrace) -> Result<Vec<&'a PoolSwitches>> {
        self.switch_layers
            .iter()
            .map(|&l| {
                trace.switches[l]
                    .as_ref()
                    .ok_or_else(|| Error::invalid(format!("trace lacks switches for layer {l}")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchingDecoder {
    pub layers: Vec<MatchingLayer>,
    /// `param_ranges[j]` is the slice of θ owned by `layers[j]`.
    pub param_ranges: Vec<Range<usize>>,
}

impl MatchingDecoder {
    pub fn theta_params<'a>(&self, theta: &'a ParamSet, j: usize) -> &'a [Tensor] {
        &theta.tensors()[self.param_ranges[j].clone()]
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.graph.param_count()).sum()
    }

    /// Fresh θ for this decoder.
    pub fn init_theta<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut theta = ParamSet::new();
        for (j, l) in self.layers.iter().enumerate() {
            theta.extend_prefixed(&format!("f{j}."), l.graph.init_params(rng));
        }
        theta
    }
}

/// Builds the decoder by walking the forward layers between each pair of
/// adjacent sites in reverse: dense becomes the transposed-shape dense,
/// conv becomes a transposed conv with the same kernel, stride and padding,
/// max-pool becomes unpool (switches from the trainable model), flatten
/// becomes unflatten, relus are dropped.
pub fn build_matching_decoder(arch: &ModelArch, include_input: bool) -> Result<MatchingDecoder> {
    let sites = arch.match_sites(include_input);
    if sites.len() < 2 {
        return Err(Error::invalid(format!("{} has fewer than two match sites", arch.id)));
    }
    let forward = arch.graph.layers();
    let mut layers = Vec::with_capacity(sites.len() - 1);
    let mut param_ranges = Vec::with_capacity(sites.len() - 1);
    let mut next = 0;
    for pair in sites.windows(2) {
        let (target, source) = (pair[0], pair[1]);
        let lo = (target.order() + 1) as usize;
        let hi = source.order() as usize;
        let mut chain = Vec::new();
        let mut switch_layers = Vec::new();
        for i in (lo..=hi).rev() {
            match &forward[i] {
                LayerSpec::Relu => {}
                LayerSpec::Dense { inputs, outputs } => chain.push(LayerSpec::Dense {
                    inputs: *outputs,
                    outputs: *inputs,
                }),
                LayerSpec::Conv2d(c) => chain.push(LayerSpec::TransposedConv2d(ConvSpec {
                    in_channels: c.out_channels,
                    out_channels: c.in_channels,
                    ..*c
                })),
                LayerSpec::MaxPool2x2 => {
                    chain.push(LayerSpec::Unpool2x2 {
                        slot: switch_layers.len(),
                    });
                    switch_layers.push(i);
                }
                LayerSpec::Flatten => chain.push(LayerSpec::Unflatten {
                    shape: arch.graph.layer_input_shape(i).to_vec(),
                }),
                other => {
                    return Err(Error::invalid(format!(
                        "no matching counterpart for {} layer {i}",
                        other.kind()
                    )))
                }
            }
        }
        let parametric = chain.iter().filter(|l| l.param_shapes().is_some()).count();
        if parametric != 1 {
            return Err(Error::invalid(format!(
                "sites {source:?} -> {target:?} span {parametric} parametric layers, expected 1"
            )));
        }
        let graph = ModelGraph::new(arch.site_shape(source).to_vec(), chain)?;
        if graph.output_shape() != arch.site_shape(target) {
            return Err(Error::shape(
                format!("matching layer for {target:?}"),
                arch.site_shape(target),
                graph.output_shape(),
            ));
        }
        let n = graph.param_tensor_count();
        param_ranges.push(next..next + n);
        next += n;
        layers.push(MatchingLayer {
            source,
            target,
            graph,
            switch_layers,
        });
    }
    Ok(MatchingDecoder { layers, param_ranges })
}
