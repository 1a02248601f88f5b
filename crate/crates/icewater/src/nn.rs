//! Neural-network building blocks over candle tensors: a named parameter
//! store partitioned into encoder/decoder groups, conv and batch-norm layers
//! with explicit train/eval semantics, differentiable bilinear resizing, the
//! standard initialization schemes, and an Adam optimizer with gradient
//! accumulation.
//!
//! Everything here is CPU-deterministic: the only randomness is the seeded
//! initializer, and repeated forward passes are bit-identical.

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Encoder,
    Decoder,
}

/// What a tensor is, which determines its default initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    ConvBias { fan_in: usize },
    BnWeight,
    BnBias,
    BnRunningMean,
    BnRunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }
}

pub struct ParamEntry {
    pub name: String,
    pub var: Var,
    pub group: ParamGroup,
    pub kind: ParamKind,
}

impl ParamEntry {
    pub fn trainable(&self) -> bool {
        self.kind.trainable()
    }

    pub fn elem_count(&self) -> usize {
        self.var.as_tensor().elem_count()
    }
}

/// Ordered, named collection of all model tensors. Registration order is the
/// deterministic initialization order.
pub struct ParamStore {
    device: Device,
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new(device: Device) -> Self {
        ParamStore {
            device,
            entries: Vec::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Register a zero-initialized tensor and hand back the shared variable.
    pub fn register(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        group: ParamGroup,
        kind: ParamKind,
    ) -> Result<Var> {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter {name}"
        );
        let var = Var::from_tensor(&Tensor::zeros(shape, DType::F32, &self.device)?)?;
        self.entries.push(ParamEntry {
            name,
            var: var.clone(),
            group,
            kind,
        });
        Ok(var)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.entries
            .iter()
            .filter(|e| e.trainable())
            .map(|e| e.var.clone())
            .collect()
    }

    pub fn count_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable())
            .map(|e| e.elem_count())
            .sum()
    }

    pub fn count_trainable_in(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable() && e.group == group)
            .map(|e| e.elem_count())
            .sum()
    }

    /// Snapshot every tensor (parameters and running stats) by name.
    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        self.entries
            .iter()
            .map(|e| Ok((e.name.clone(), e.var.as_tensor().copy()?)))
            .collect()
    }

    /// Write a snapshot back into the variables; shapes must match.
    pub fn restore(&self, snapshot: &[(String, Tensor)]) -> Result<()> {
        for (name, tensor) in snapshot {
            let entry = self.get(name).ok_or_else(|| Error::MissingTensor {
                file: "<snapshot>".into(),
                name: name.clone(),
            })?;
            entry.var.set(tensor)?;
        }
        Ok(())
    }

    /// Seeded default initialization for every entry whose group is in
    /// `groups`: Kaiming-uniform conv weights (the standard leaky-relu
    /// variant whose bound reduces to 1/sqrt(fan_in)), uniform conv biases
    /// with the same bound, batch-norm weight 1 / bias 0, running stats 0/1.
    pub fn init_random(&self, seed: u64, groups: &[ParamGroup]) -> Result<()> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for entry in &self.entries {
            if !groups.contains(&entry.group) {
                continue;
            }
            let n = entry.elem_count();
            let shape = entry.var.as_tensor().dims().to_vec();
            let data: Vec<f32> = match entry.kind {
                ParamKind::ConvWeight => {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n)
                        .map(|_| rng.random_range(-bound..bound) as f32)
                        .collect()
                }
                ParamKind::ConvBias { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n)
                        .map(|_| rng.random_range(-bound..bound) as f32)
                        .collect()
                }
                ParamKind::BnWeight | ParamKind::BnRunningVar => vec![1.0; n],
                ParamKind::BnBias | ParamKind::BnRunningMean => vec![0.0; n],
            };
            entry
                .var
                .set(&Tensor::from_vec(data, shape, &self.device)?)?;
        }
        Ok(())
    }
}

/// Use a variable in a forward pass: attached to the graph when training,
/// detached in evaluation so no graph is retained.
fn as_input(var: &Var, train: bool) -> Tensor {
    if train {
        var.as_tensor().clone()
    } else {
        var.as_tensor().detach()
    }
}

pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        bias: bool,
        group: ParamGroup,
    ) -> Result<Self> {
        let weight = store.register(
            format!("{name}.weight"),
            &[out_ch, in_ch, kernel, kernel],
            group,
            ParamKind::ConvWeight,
        )?;
        let fan_in = in_ch * kernel * kernel;
        let bias = if bias {
            Some(store.register(
                format!("{name}.bias"),
                &[out_ch],
                group,
                ParamKind::ConvBias { fan_in },
            )?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
            dilation,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let w = as_input(&self.weight, train);
        let mut y = x.conv2d(&w, self.padding, self.stride, self.dilation, 1)?;
        if let Some(bias) = &self.bias {
            let b = as_input(bias, train);
            let out_ch = b.dims1()?;
            y = y.broadcast_add(&b.reshape((1, out_ch, 1, 1))?)?;
        }
        Ok(y)
    }
}

pub struct BatchNorm2d {
    weight: Var,
    bias: Var,
    running_mean: Var,
    running_var: Var,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        group: ParamGroup,
    ) -> Result<Self> {
        Ok(BatchNorm2d {
            weight: store.register(
                format!("{name}.weight"),
                &[channels],
                group,
                ParamKind::BnWeight,
            )?,
            bias: store.register(
                format!("{name}.bias"),
                &[channels],
                group,
                ParamKind::BnBias,
            )?,
            running_mean: store.register(
                format!("{name}.running_mean"),
                &[channels],
                group,
                ParamKind::BnRunningMean,
            )?,
            running_var: store.register(
                format!("{name}.running_var"),
                &[channels],
                group,
                ParamKind::BnRunningVar,
            )?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        let gamma = as_input(&self.weight, train).reshape((1, c, 1, 1))?;
        let beta = as_input(&self.bias, train).reshape((1, c, 1, 1))?;
        if train {
            let mean = x.mean_keepdim((0, 2, 3))?;
            let centered = x.broadcast_sub(&mean)?;
            let var_biased = centered.sqr()?.mean_keepdim((0, 2, 3))?;
            let y = centered
                .broadcast_div(&(var_biased.clone() + self.eps)?.sqrt()?)?
                .broadcast_mul(&gamma)?
                .broadcast_add(&beta)?;
            // Running stats track the unbiased variance, outside the graph.
            let (b, _, h, w) = x.dims4()?;
            let n = (b * h * w) as f64;
            let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let mean_flat = mean.detach().reshape(c)?;
            let var_flat = (var_biased.detach().reshape(c)? * correction)?;
            self.running_mean.set(
                &((self.running_mean.as_tensor() * (1.0 - self.momentum))?
                    + (mean_flat * self.momentum)?)?,
            )?;
            self.running_var.set(
                &((self.running_var.as_tensor() * (1.0 - self.momentum))?
                    + (var_flat * self.momentum)?)?,
            )?;
            Ok(y)
        } else {
            let rm = self
                .running_mean
                .as_tensor()
                .detach()
                .reshape((1, c, 1, 1))?;
            let rv = self
                .running_var
                .as_tensor()
                .detach()
                .reshape((1, c, 1, 1))?;
            Ok(x.broadcast_sub(&rm)?
                .broadcast_div(&(rv + self.eps)?.sqrt()?)?
                .broadcast_mul(&gamma)?
                .broadcast_add(&beta)?)
        }
    }
}

/// 3x3 stride-2 max pooling with pad 1, as in the ResNet stem. Zero padding
/// is exact here because the input is post-ReLU (non-negative). Built from
/// nine strided slices folded with elementwise maxima so the backward pass
/// exists (the native pooling kernel only differentiates when kernel ==
/// stride).
pub fn max_pool_3x3_s2_p1(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let h_out = h.div_ceil(2);
    let w_out = w.div_ceil(2);
    let padded = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
    let device = x.device();
    let mut best: Option<Tensor> = None;
    for dr in 0..3u32 {
        let rows: Vec<u32> = (0..h_out as u32).map(|i| 2 * i + dr).collect();
        let row_idx = Tensor::from_vec(rows, h_out, device)?;
        let slab = padded.index_select(&row_idx, 2)?;
        for dc in 0..3u32 {
            let cols: Vec<u32> = (0..w_out as u32).map(|i| 2 * i + dc).collect();
            let col_idx = Tensor::from_vec(cols, w_out, device)?;
            let window = slab.index_select(&col_idx, 3)?;
            best = Some(match best {
                Some(acc) => acc.maximum(&window)?,
                None => window,
            });
        }
    }
    Ok(best.expect("nine pooling windows"))
}

/// Interpolation matrix for 1-D bilinear resizing with half-pixel centers.
fn bilinear_matrix(dst: usize, src: usize, device: &Device) -> Result<Tensor> {
    let scale = src as f64 / dst as f64;
    let mut data = vec![0f32; dst * src];
    for i in 0..dst {
        let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
        let j0 = s.floor() as usize;
        let t = s - j0 as f64;
        let j1 = (j0 + 1).min(src - 1);
        data[i * src + j0] += (1.0 - t) as f32;
        data[i * src + j1] += t as f32;
    }
    Ok(Tensor::from_vec(data, (dst, src), device)?)
}

/// Bilinear resize of a (B, C, H, W) tensor to (out_h, out_w), implemented as
/// two matrix products so it is differentiable and bit-deterministic.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let device = x.device();
    let flat = x.reshape((b * c, h, w))?;
    let up_h = bilinear_matrix(out_h, h, device)?;
    let up_w_t = bilinear_matrix(out_w, w, device)?.t()?.contiguous()?;
    let y = up_h.broadcast_matmul(&flat)?;
    let y = y.broadcast_matmul(&up_w_t)?;
    Ok(y.reshape((b, c, out_h, out_w))?)
}

/// Numerically stable log-softmax over the class dimension (dim 1).
pub fn log_softmax_classes(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Adam with the standard bias-corrected update, epsilon added after the
/// square root, and no weight decay. Supports gradient accumulation across
/// micro-batches: `accumulate` sums gradients, `apply_pending` performs one
/// update from the sums.
pub struct Adam {
    vars: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pending: Vec<Option<Tensor>>,
    step_count: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64) -> Result<Self> {
        let m = vars
            .iter()
            .map(|v| Tensor::zeros_like(v.as_tensor()))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v_ = vars
            .iter()
            .map(|v| Tensor::zeros_like(v.as_tensor()))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let pending = vec![None; vars.len()];
        Ok(Adam {
            vars,
            m,
            v: v_,
            pending,
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Add this backward pass's gradients to the pending sums.
    pub fn accumulate(&mut self, grads: &GradStore) -> Result<()> {
        for (i, var) in self.vars.iter().enumerate() {
            if let Some(g) = grads.get(var.as_tensor()) {
                let g = g.detach();
                self.pending[i] = Some(match self.pending[i].take() {
                    Some(prev) => (prev + g)?,
                    None => g,
                });
            }
        }
        Ok(())
    }

    /// One Adam update from the accumulated gradients.
    pub fn apply_pending(&mut self) -> Result<()> {
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for i in 0..self.vars.len() {
            let Some(grad) = self.pending[i].take() else {
                continue;
            };
            self.m[i] = ((&self.m[i] * self.beta1)? + (&grad * (1.0 - self.beta1))?)?;
            self.v[i] = ((&self.v[i] * self.beta2)? + (grad.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&self.m[i] / bc1)?;
            let v_hat = (&self.v[i] / bc2)?;
            let update = (m_hat * self.lr)?.div(&(v_hat.sqrt()? + self.eps)?)?;
            let var = &self.vars[i];
            var.set(&(var.as_tensor().detach() - update)?)?;
        }
        Ok(())
    }

    /// Convenience: single backward pass then update.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.accumulate(grads)?;
        self.apply_pending()
    }
}
