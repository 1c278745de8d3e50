//! Parameterised building blocks shared by every network body.

use dualvae_autodiff::{kaiming_normal, Graph, Padding, ParamId, ParamStore, Real, Tensor, Var};
use rand::Rng;

/// Negative slope of every leaky-relu in the model.
pub const LRELU_SLOPE: f64 = 0.2;

/// Layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Binds parameters into a graph: as gradient leaves while training, as
/// constants for inference.
#[derive(Clone, Copy)]
pub struct Ctx<'a, 'g, R: Real> {
    pub g: &'g Graph<R>,
    pub store: &'a ParamStore<R>,
    pub train: bool,
}

impl<'a, 'g, R: Real> Ctx<'a, 'g, R> {
    pub fn new(g: &'g Graph<R>, store: &'a ParamStore<R>, train: bool) -> Self {
        Self { g, store, train }
    }

    pub fn p(&self, id: ParamId) -> Var<'g, R> {
        if self.train {
            self.g.param(self.store, id)
        } else {
            self.g.constant(self.store.get(id).clone())
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_normal([cout, cin, k, k], cin * k * k, LRELU_SLOPE, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([cout]));
        Self {
            weight,
            bias,
            stride,
            padding: Padding::Reflect,
        }
    }

    pub fn forward<'g, R: Real>(&self, cx: &Ctx<'_, 'g, R>, x: Var<'g, R>) -> Var<'g, R> {
        x.conv2d(cx.p(self.weight), Some(cx.p(self.bias)), self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_normal([cout, cin], cin, LRELU_SLOPE, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([cout]));
        Self { weight, bias }
    }

    /// A layer whose weight starts at zero.
    pub fn zeros<R: Real>(store: &mut ParamStore<R>, name: &str, cin: usize, cout: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros([cout, cin]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([cout]));
        Self { weight, bias }
    }

    pub fn forward<'g, R: Real>(&self, cx: &Ctx<'_, 'g, R>, x: Var<'g, R>) -> Var<'g, R> {
        x.linear(cx.p(self.weight), Some(cx.p(self.bias)))
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, channels: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones([channels])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([channels])),
        }
    }

    pub fn forward<'g, R: Real>(&self, cx: &Ctx<'_, 'g, R>, x: Var<'g, R>) -> Var<'g, R> {
        x.layer_norm(cx.p(self.gain), cx.p(self.bias), LN_EPS)
    }
}
