//! The trainable part of one instrument pipeline: an optional shallow
//! embedding conv (used when no backbone is active), three conv blocks
//! (conv → batch norm → LeakyReLU), a dense block with batch norm,
//! dropout, and a single sigmoid unit.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    batch_norm_backward, batch_norm_infer, batch_norm_train, col2im, im2col, leaky_relu, leaky_relu_backward, sigmoid,
    BatchNormCache,
};
use super::{ModelError, GRID};

/// Layer sizes of one pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub input_channels: usize,
    /// Output channels of the learnable embedding conv; `None` when the
    /// input is a backbone feature map.
    pub embedding_channels: Option<usize>,
    pub conv_filters: Vec<usize>,
    pub dense_units: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Arch {
    pub fn head_input_channels(&self) -> usize {
        self.embedding_channels.unwrap_or(self.input_channels)
    }

    pub fn flat_len(&self) -> usize {
        GRID * GRID * self.conv_filters.last().copied().unwrap_or(self.head_input_channels())
    }
}

/// Named parameter matrices. Vectors are stored as `1 × n` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub names: Vec<String>,
    pub tensors: Vec<Array2<f64>>,
}

impl Params {
    pub fn zeros_like(other: &Params) -> Params {
        Params {
            names: other.names.clone(),
            tensors: other.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Array2::len).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn push(&mut self, name: String, value: Array2<f64>) -> usize {
        self.names.push(name);
        self.tensors.push(value);
        self.tensors.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    w: usize,
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    embed: Option<(usize, usize)>,
    dense1: BlockIdx,
    dense2_w: usize,
    dense2_b: usize,
}

/// One pipeline's trainable network with its batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct Network {
    pub arch: Arch,
    pub params: Params,
    /// One entry per batch-norm layer: conv blocks in order, then dense.
    pub bn_stats: Vec<RunningStats>,
    blocks: Vec<(usize, usize, usize)>,
    layout: Layout,
}

// blocks and layout are derived from arch
impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.params == other.params && self.bn_stats == other.bn_stats
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Intermediate values of a forward pass needed for backprop.
pub struct ForwardCache {
    batch: usize,
    embed_cols: Option<Array2<f64>>,
    blocks: Vec<BlockCache>,
    flat: Array2<f64>,
    dense_pre: Array2<f64>,
    dense_bn: Option<BatchNormCache>,
    dropout_mask: Option<Array2<f64>>,
    dense_out: Array2<f64>,
    pub logits: Array1<f64>,
    pub probs: Array1<f64>,
    /// Output shape of every layer, `[rows, cols]` per sample.
    pub shapes: Vec<(String, Vec<usize>)>,
}

struct BlockCache {
    cols: Array2<f64>,
    pre: Array2<f64>,
    bn: Option<BatchNormCache>,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..limit))
}

fn check_finite(name: &str, m: &Array2<f64>) -> Result<(), ModelError> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFinite { layer: name.to_string() })
    }
}

impl Network {
    pub fn new(arch: Arch, seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params { names: Vec::new(), tensors: Vec::new() };
        let mut bn_stats = Vec::new();
        let embed = arch.embedding_channels.map(|e| {
            let cin = arch.input_channels;
            let w = params.push("embed.w".into(), glorot(&mut rng, 9 * cin, e, 9 * cin, 9 * e));
            let b = params.push("embed.b".into(), Array2::zeros((1, e)));
            (w, b)
        });
        let mut cin = arch.head_input_channels();
        let mut blocks = Vec::new();
        for (k, &f) in arch.conv_filters.iter().enumerate() {
            let w = params.push(format!("conv{}.w", k + 1), glorot(&mut rng, 9 * cin, f, 9 * cin, 9 * f));
            let g = params.push(format!("conv{}.bn.gamma", k + 1), Array2::ones((1, f)));
            let b = params.push(format!("conv{}.bn.beta", k + 1), Array2::zeros((1, f)));
            bn_stats.push(RunningStats { mean: Array1::zeros(f), var: Array1::ones(f) });
            blocks.push((w, g, b));
            cin = f;
        }
        let flat = arch.flat_len();
        let u = arch.dense_units;
        let dense1 = BlockIdx {
            w: params.push("dense1.w".into(), glorot(&mut rng, flat, u, flat, u)),
            gamma: params.push("dense1.bn.gamma".into(), Array2::ones((1, u))),
            beta: params.push("dense1.bn.beta".into(), Array2::zeros((1, u))),
        };
        bn_stats.push(RunningStats { mean: Array1::zeros(u), var: Array1::ones(u) });
        let dense2_w = params.push("dense2.w".into(), glorot(&mut rng, u, 1, u, 1));
        let dense2_b = params.push("dense2.b".into(), Array2::zeros((1, 1)));
        Network {
            arch,
            params,
            bn_stats,
            blocks,
            layout: Layout { embed, dense1, dense2_w, dense2_b },
        }
    }

    /// Rebuilds a network from stored tensors. Names and shapes must match
    /// the architecture exactly.
    pub fn from_parts(arch: Arch, params: Params, bn_stats: Vec<RunningStats>) -> Result<Network, ModelError> {
        let mut net = Network::new(arch, 0);
        if net.params.names != params.names {
            return Err(ModelError::Checkpoint(format!(
                "parameter names {:?} do not match architecture {:?}",
                params.names, net.params.names
            )));
        }
        for (i, (have, want)) in params.tensors.iter().zip(&net.params.tensors).enumerate() {
            if have.dim() != want.dim() {
                return Err(ModelError::Checkpoint(format!(
                    "{}: shape {:?}, expected {:?}",
                    params.names[i],
                    have.dim(),
                    want.dim()
                )));
            }
        }
        if bn_stats.len() != net.bn_stats.len()
            || bn_stats.iter().zip(&net.bn_stats).any(|(a, b)| a.mean.len() != b.mean.len() || a.var.len() != b.var.len())
        {
            return Err(ModelError::Checkpoint("batch-norm statistics do not match architecture".into()));
        }
        net.params = params;
        net.bn_stats = bn_stats;
        Ok(net)
    }

    pub fn layout_embed(&self) -> bool {
        self.layout.embed.is_some()
    }

    /// Forward pass over a batch. `input` is `(batch * 64, C)`, NHWC rows.
    /// In training mode dropout draws from `rng` and batch norm uses batch
    /// statistics; running statistics are not touched (see
    /// [`Network::update_running_stats`]).
    pub fn forward(&self, input: &Array2<f64>, mode: Mode, rng: Option<&mut ChaCha8Rng>) -> Result<ForwardCache, ModelError> {
        let hw = GRID * GRID;
        if !input.nrows().is_multiple_of(hw) || input.nrows() == 0 {
            return Err(ModelError::Shape(format!("input rows {} not a positive multiple of {hw}", input.nrows())));
        }
        if input.ncols() != self.arch.input_channels {
            return Err(ModelError::Shape(format!(
                "input has {} channels, network expects {}",
                input.ncols(),
                self.arch.input_channels
            )));
        }
        check_finite("input", input)?;
        let batch = input.nrows() / hw;
        let slope = self.arch.leaky_slope;
        let eps = self.arch.bn_eps;
        let p = &self.params.tensors;
        let layout = self.layout;
        let mut shapes = Vec::new();

        let (mut act, embed_cols) = match layout.embed {
            Some((w, b)) => {
                let cols = im2col(input, batch, GRID);
                let out = cols.dot(&p[w]) + &p[b];
                check_finite("embed", &out)?;
                shapes.push(("embed".to_string(), vec![GRID, GRID, out.ncols()]));
                (out, Some(cols))
            }
            None => (input.clone(), None),
        };

        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (k, &(w, g, b)) in self.blocks.iter().enumerate() {
            let cols = im2col(&act, batch, GRID);
            let z = cols.dot(&p[w]);
            let (pre, bn) = match mode {
                Mode::Train => {
                    let (y, cache) = batch_norm_train(&z, &p[g], &p[b], eps);
                    (y, Some(cache))
                }
                Mode::Infer => {
                    let s = &self.bn_stats[k];
                    (batch_norm_infer(&z, &p[g], &p[b], &s.mean, &s.var, eps), None)
                }
            };
            act = leaky_relu(&pre, slope);
            let name = format!("conv{}", k + 1);
            check_finite(&name, &act)?;
            shapes.push((name, vec![GRID, GRID, act.ncols()]));
            blocks.push(BlockCache { cols, pre, bn });
        }

        let width = act.ncols() * hw;
        let flat = act
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((batch, width))
            .map_err(|e| ModelError::Shape(e.to_string()))?;
        shapes.push(("flatten".to_string(), vec![width]));
        let d = layout.dense1;
        let z1 = flat.dot(&p[d.w]);
        let (dense_pre, dense_bn) = match mode {
            Mode::Train => {
                let (y, cache) = batch_norm_train(&z1, &p[d.gamma], &p[d.beta], eps);
                (y, Some(cache))
            }
            Mode::Infer => {
                let s = self.bn_stats.last().unwrap();
                (batch_norm_infer(&z1, &p[d.gamma], &p[d.beta], &s.mean, &s.var, eps), None)
            }
        };
        let hidden = leaky_relu(&dense_pre, slope);
        check_finite("dense1", &hidden)?;
        shapes.push(("dense1".to_string(), vec![hidden.ncols()]));
        let (dense_out, dropout_mask) = match (mode, rng) {
            (Mode::Train, Some(rng)) if self.arch.dropout > 0.0 => {
                let keep = 1.0 - self.arch.dropout;
                let mask = Array2::from_shape_simple_fn(hidden.raw_dim(), || {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                (&hidden * &mask, Some(mask))
            }
            _ => (hidden, None),
        };
        let logits = dense_out.dot(&p[layout.dense2_w]).column(0).to_owned() + p[layout.dense2_b][[0, 0]];
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { layer: "dense2".into() });
        }
        shapes.push(("dense2".to_string(), vec![1]));
        let probs = logits.mapv(sigmoid);
        Ok(ForwardCache {
            batch,
            embed_cols,
            blocks,
            flat,
            dense_pre,
            dense_bn,
            dropout_mask,
            dense_out,
            logits,
            probs,
            shapes,
        })
    }

    /// Probability for each sample of `input` in inference mode.
    pub fn predict(&self, input: &Array2<f64>) -> Result<Array1<f64>, ModelError> {
        Ok(self.forward(input, Mode::Infer, None)?.probs)
    }

    /// Gradients of the loss with respect to every parameter, given the loss
    /// gradient with respect to the logits. Requires a training-mode cache.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Array1<f64>) -> Params {
        let slope = self.arch.leaky_slope;
        let p = &self.params.tensors;
        let layout = self.layout;
        let mut grads = Params::zeros_like(&self.params);
        let batch = cache.batch;

        let dlogit_col = dlogits.view().insert_axis(Axis(1));
        grads.tensors[layout.dense2_w] = cache.dense_out.t().dot(&dlogit_col);
        grads.tensors[layout.dense2_b][[0, 0]] = dlogits.sum();
        let mut dh = dlogit_col.dot(&p[layout.dense2_w].t());
        if let Some(mask) = &cache.dropout_mask {
            dh *= mask;
        }
        leaky_relu_backward(&mut dh, &cache.dense_pre, slope);
        let d = layout.dense1;
        let bn = cache.dense_bn.as_ref().expect("backward needs a training-mode forward pass");
        let (dz1, dgamma, dbeta) = batch_norm_backward(&dh, &p[d.gamma], bn);
        grads.tensors[d.gamma] = dgamma;
        grads.tensors[d.beta] = dbeta;
        grads.tensors[d.w] = cache.flat.t().dot(&dz1);
        let dflat = dz1.dot(&p[d.w].t());
        let last_c = cache.flat.ncols() / (GRID * GRID);
        let mut dact = dflat
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((batch * GRID * GRID, last_c))
            .expect("flatten is contiguous");

        for k in (0..self.blocks.len()).rev() {
            let (w, g, b) = self.blocks[k];
            let bc = &cache.blocks[k];
            leaky_relu_backward(&mut dact, &bc.pre, slope);
            let (dz, dgamma, dbeta) = batch_norm_backward(&dact, &p[g], bc.bn.as_ref().unwrap());
            grads.tensors[g] = dgamma;
            grads.tensors[b] = dbeta;
            grads.tensors[w] = bc.cols.t().dot(&dz);
            if k > 0 || layout.embed.is_some() {
                let cin = p[w].nrows() / 9;
                dact = col2im(&dz.dot(&p[w].t()), batch, GRID, cin);
            }
        }
        if let (Some((w, b)), Some(cols)) = (layout.embed, cache.embed_cols.as_ref()) {
            grads.tensors[w] = cols.t().dot(&dact);
            grads.tensors[b] = dact.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        for g in grads.tensors.iter_mut().filter(|g| !g.is_standard_layout()) {
            *g = g.as_standard_layout().into_owned();
        }
        grads
    }

    /// Folds a training-mode batch's statistics into the running averages.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        let m = self.arch.bn_momentum;
        let batch_stats = cache
            .blocks
            .iter()
            .filter_map(|b| b.bn.as_ref())
            .chain(cache.dense_bn.as_ref());
        for (stats, bn) in self.bn_stats.iter_mut().zip(batch_stats) {
            stats.mean = &stats.mean * m + &bn.batch_mean * (1.0 - m);
            stats.var = &stats.var * m + &bn.batch_var * (1.0 - m);
        }
    }
}

/// Stacks per-image `8 × 8 × C` maps into one `(batch * 64, C)` matrix.
pub fn stack_inputs<'a, I>(maps: I) -> Array2<f64>
where
    I: IntoIterator<Item = &'a ndarray::Array3<f64>>,
{
    let owned: Vec<_> = maps
        .into_iter()
        .map(|m| {
            let c = m.dim().2;
            m.as_standard_layout().into_owned().into_shape_with_order((GRID * GRID, c)).expect("8x8 feature map")
        })
        .collect();
    let views: Vec<_> = owned.iter().map(|m| m.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("maps share a channel count")
}
