//! Parameterised layers built on the autograd tape.

use rand::Rng;

use crate::autograd::{BufferId, Graph, ParamId, ParamKind, ParamStore, Var};
use crate::tensor::{Element, Tensor, Window};

pub const BN_MOMENTUM: f64 = 0.03;
pub const BN_EPS: f64 = 1e-3;

/// Uniform initialisation in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
fn uniform<T: Element, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub window: Window,
    pub groups: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels / groups * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            uniform(&[out_channels, in_channels / groups, kernel, kernel], fan_in, rng),
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                ParamKind::Bias,
                uniform(&[out_channels], fan_in, rng),
            )
        });
        Self {
            weight,
            bias,
            window: Window::new(kernel, stride, kernel / 2),
            groups,
            in_channels,
            out_channels,
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.window, self.groups)
    }

    pub fn weight_count(&self) -> usize {
        self.out_channels * self.in_channels / self.groups * self.window.kernel * self.window.kernel
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(
                format!("{name}.gamma"),
                ParamKind::NormScale,
                Tensor::full(&[channels], T::one()),
            ),
            beta: store.add(format!("{name}.beta"), ParamKind::NormShift, Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(
                format!("{name}.running_var"),
                Tensor::full(&[channels], T::one()),
            ),
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.batch_norm(
            x,
            gamma,
            beta,
            self.running_mean,
            self.running_var,
            BN_MOMENTUM,
            BN_EPS,
        )
    }
}

/// Convolution, batch norm, SiLU.
#[derive(Debug, Clone)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBnAct {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        let conv = Conv2d::new(
            store,
            &format!("{name}.conv"),
            in_channels,
            out_channels,
            kernel,
            stride,
            groups,
            false,
            rng,
        );
        let bn = BatchNorm::new(store, &format!("{name}.bn"), out_channels);
        Self { conv, bn }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let y = self.conv.forward(g, x);
        let y = self.bn.forward(g, y);
        g.silu(y)
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels
    }
}

/// Learned ×`stride` upsampling (`kernel == stride`, no overlap).
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub window: Window,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvTranspose2d {
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = out_channels * stride * stride;
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            uniform(&[in_channels, out_channels, stride, stride], fan_in, rng),
        );
        let bias = Some(store.add(
            format!("{name}.bias"),
            ParamKind::Bias,
            uniform(&[out_channels], fan_in, rng),
        ));
        Self {
            weight,
            bias,
            window: Window::new(stride, stride, 0),
            in_channels,
            out_channels,
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv_transpose2d(x, w, b, self.window)
    }
}
