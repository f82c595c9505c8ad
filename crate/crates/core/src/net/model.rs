use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{param_checksum, Conv, ConvVars, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Architecture hyperparameters of the task model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskConfig {
    /// Total layer count `n`, output layer included.
    pub layers: usize,
    pub base_channels: usize,
    pub image_size: usize,
    pub io_channels: usize,
    /// Adds the input image to the output pre-activation, so the network
    /// learns a residual correction.
    #[serde(default)]
    pub input_skip: bool,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            layers: 7,
            base_channels: 16,
            image_size: 32,
            io_channels: 1,
            input_skip: true,
        }
    }
}

impl TaskConfig {
    /// Number of intermediate reconstruction levels, `⌊(n−1)/2⌋`.
    pub fn levels(&self) -> usize {
        (self.layers - 1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        if !(5..=9).contains(&self.layers) {
            return Err(Error::Config(format!(
                "task model needs 5..=9 layers, got {}",
                self.layers
            )));
        }
        let down = 1usize << (self.levels() - 1);
        if self.image_size % down != 0 || self.image_size / down < 2 {
            return Err(Error::Config(format!(
                "image size {} cannot be halved {} times",
                self.image_size,
                self.levels() - 1
            )));
        }
        if self.base_channels == 0 || self.io_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Encoder,
    Decoder,
    Output,
}

/// One layer of the task model: a 3×3 convolution with optional
/// stride-2 downsampling or nearest-neighbour upsampling in front.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub depth: usize,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub upsample: bool,
    /// Spatial side of this layer's output.
    pub size: usize,
}

/// Features `h_1 … h_n` of one forward pass; `h_n` is the output image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTrace {
    pub features: Vec<Tensor>,
}

impl FeatureTrace {
    /// Feature at `depth` (1-based).
    pub fn feature(&self, depth: usize) -> Result<&Tensor> {
        depth
            .checked_sub(1)
            .and_then(|i| self.features.get(i))
            .ok_or(Error::DepthOutOfRange {
                depth,
                max: self.features.len(),
            })
    }

    pub fn output(&self) -> &Tensor {
        self.features.last().expect("trace has at least one feature")
    }

    pub fn layers(&self) -> usize {
        self.features.len()
    }

    pub fn bitwise_eq(&self, other: &FeatureTrace) -> bool {
        self.features.len() == other.features.len()
            && self
                .features
                .iter()
                .zip(&other.features)
                .all(|(a, b)| a.bitwise_eq(b))
    }
}

/// Symmetric encoder–decoder with a feature tap after every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskModel {
    config: TaskConfig,
    layers: Vec<LayerSpec>,
    pub(crate) params: Vec<Conv>,
    pub(crate) trained: bool,
    pub(crate) train_seed: u64,
    pub(crate) epochs: usize,
}

fn layer_plan(config: &TaskConfig) -> Vec<LayerSpec> {
    let n = config.layers;
    let k = config.levels();
    let enc_channels = |d: usize| config.base_channels << (d - 1);
    let enc_size = |d: usize| config.image_size >> (d - 1);
    let mut plan = Vec::with_capacity(n);
    let mut channels = config.io_channels;
    let mut size = config.image_size;
    for depth in 1..=n {
        let spec = if depth <= k {
            LayerSpec {
                depth,
                kind: LayerKind::Encoder,
                in_channels: channels,
                out_channels: enc_channels(depth),
                stride: if depth == 1 { 1 } else { 2 },
                upsample: false,
                size: enc_size(depth),
            }
        } else if depth < n {
            // mirrored depth, or the unpaired centre layer when n is even
            let mirror = (n - depth).min(k);
            let target = enc_size(mirror);
            LayerSpec {
                depth,
                kind: LayerKind::Decoder,
                in_channels: channels,
                out_channels: enc_channels(mirror),
                stride: 1,
                upsample: target > size,
                size: target,
            }
        } else {
            LayerSpec {
                depth,
                kind: LayerKind::Output,
                in_channels: channels,
                out_channels: config.io_channels,
                stride: 1,
                upsample: config.image_size > size,
                size: config.image_size,
            }
        };
        channels = spec.out_channels;
        size = spec.size;
        plan.push(spec);
    }
    plan
}

impl TaskModel {
    pub fn new(config: TaskConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layers = layer_plan(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layers
            .iter()
            .map(|l| Conv::init(l.out_channels, l.in_channels, 3, &mut rng))
            .collect();
        Ok(TaskModel {
            config,
            layers,
            params,
            trained: false,
            train_seed: seed,
            epochs: 0,
        })
    }

    pub(crate) fn from_parts(
        config: TaskConfig,
        params: Vec<Conv>,
        trained: bool,
        train_seed: u64,
        epochs: usize,
    ) -> Result<Self> {
        config.validate()?;
        let layers = layer_plan(&config);
        if params.len() != layers.len()
            || params.iter().zip(&layers).any(|(p, l)| {
                p.weight.shape() != [l.out_channels, l.in_channels, 3, 3]
                    || p.bias.shape() != [l.out_channels]
            })
        {
            return Err(Error::ArchitectureMismatch(
                "parameter shapes do not match the layer plan".into(),
            ));
        }
        Ok(TaskModel {
            config,
            layers,
            params,
            trained,
            train_seed,
            epochs,
        })
    }

    /// Zeroes the output layer so the model emits `tanh(0) = 0` everywhere.
    pub fn zero_output_layer(&mut self) {
        let last = self.params.last_mut().expect("model has layers");
        *last = Conv::zeros(last.out_channels(), last.in_channels(), 3);
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Conv] {
        &self.params
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn train_seed(&self) -> u64 {
        self.train_seed
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    pub fn levels(&self) -> usize {
        self.config.levels()
    }

    pub fn depth_count(&self) -> usize {
        self.config.layers
    }

    /// `[C, H, W]` of the feature at `depth`.
    pub fn feature_shape(&self, depth: usize) -> Result<[usize; 3]> {
        let l = depth
            .checked_sub(1)
            .and_then(|i| self.layers.get(i))
            .ok_or(Error::DepthOutOfRange {
                depth,
                max: self.layers.len(),
            })?;
        Ok([l.out_channels, l.size, l.size])
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [
            self.config.io_channels,
            self.config.image_size,
            self.config.image_size,
        ]
    }

    pub fn checksum(&self) -> String {
        param_checksum(&self.params)
    }

    pub(crate) fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<ConvVars> {
        self.params.iter().map(|p| p.register(tape, trainable)).collect()
    }

    pub(crate) fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape() {
            return Err(Error::shape(
                "translate",
                format!("expected {:?}, got {:?}", self.input_shape(), x.shape()),
            ));
        }
        Ok(())
    }

    /// Runs the network on the tape. `tap` sees each feature `h_d` right
    /// after layer `d` and returns the tensor that continues forward, which is
    /// also what gets recorded for that depth.
    pub(crate) fn forward_on<F>(
        &self,
        tape: &mut Tape,
        vars: &[ConvVars],
        x: Var,
        mut tap: F,
    ) -> Result<Vec<Var>>
    where
        F: FnMut(&mut Tape, usize, Var) -> Result<Var>,
    {
        let mut h = x;
        let skip = self.config.input_skip;
        let mut features = Vec::with_capacity(self.layers.len());
        for (spec, v) in self.layers.iter().zip(vars) {
            if spec.upsample {
                h = tape.upsample2x(h)?;
            }
            h = Conv::apply(*v, tape, h, spec.stride)?;
            h = match spec.kind {
                LayerKind::Output if skip => {
                    let r = tape.add(h, x)?;
                    tape.tanh(r)?
                }
                LayerKind::Output => tape.tanh(h)?,
                _ => tape.leaky_relu(h, LEAKY_SLOPE)?,
            };
            h = tap(tape, spec.depth, h)?;
            features.push(h);
        }
        Ok(features)
    }

    /// Deterministic forward pass recording every feature tap.
    pub fn translate(&self, x: &Tensor) -> Result<FeatureTrace> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let feats = self.forward_on(&mut tape, &vars, xv, |_, _, h| Ok(h))?;
        Ok(FeatureTrace {
            features: feats.into_iter().map(|v| tape.value(v).clone()).collect(),
        })
    }
}
