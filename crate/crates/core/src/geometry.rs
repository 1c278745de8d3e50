//! The geometry module: a learned intensity transform from RGB to a
//! single-channel structure estimate.
//!
//! A stack of stride-1, reflect-padded 3x3 convolutions (leaky-relu between
//! them) ending in a 3-channel projection, followed by a channel-wise mean.
//! There is no normalisation and no output squashing.

use dualvae_autodiff::{ParamStore, Real, Tensor, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::layers::{Conv, Ctx, LRELU_SLOPE};

#[derive(Clone, Debug)]
pub struct GeometryModule {
    pub convs: Vec<Conv>,
}

impl GeometryModule {
    pub fn new<R: Real>(store: &mut ParamStore<R>, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.geometry_channels;
        let n = cfg.geometry_layers;
        let convs = (0..n)
            .map(|i| {
                let cin = if i == 0 { 3 } else { c };
                let cout = if i + 1 == n { 3 } else { c };
                Conv::new(store, &format!("geometry.conv{i}"), cin, cout, 3, 1, rng)
            })
            .collect();
        Self { convs }
    }

    /// `[N, 3, H, W]` image to `[N, 1, H, W]` structure estimate.
    pub fn forward<'g, R: Real>(&self, cx: &Ctx<'_, 'g, R>, x: Var<'g, R>) -> Var<'g, R> {
        let last = self.convs.len() - 1;
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(cx, h);
            if i < last {
                h = h.leaky_relu(LRELU_SLOPE);
            }
        }
        h.channel_mean()
    }

    /// Sets every layer to pass its first three input channels through
    /// unchanged (centre-tap identity kernels, zero bias).
    pub fn set_passthrough<R: Real>(&self, store: &mut ParamStore<R>) {
        for conv in &self.convs {
            let w = store.get_mut(conv.weight);
            let (o, c, kh, kw) = w.dims4();
            let mut t = Tensor::zeros([o, c, kh, kw]);
            for ch in 0..o.min(c).min(3) {
                t.data_mut()[((ch * c + ch) * kh + kh / 2) * kw + kw / 2] = R::ONE;
            }
            *w = t;
            let b = store.get_mut(conv.bias);
            *b = Tensor::zeros(b.shape().to_vec());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dualvae_autodiff::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn module() -> (ParamStore<f64>, GeometryModule) {
        let mut store = ParamStore::new();
        let m = GeometryModule::new(&mut store, &ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        (store, m)
    }

    #[test]
    fn passthrough_stack_averages_channels() {
        let (mut store, m) = module();
        m.set_passthrough(&mut store);
        let g = Graph::new();
        let cx = Ctx::new(&g, &store, false);
        let mut img = Tensor::zeros([1, 3, 4, 4]);
        for (ch, v) in [0.9, 0.3, 0.0].into_iter().enumerate() {
            img.data_mut()[ch * 16..(ch + 1) * 16].fill(v);
        }
        img.data_mut()[5] = 0.6;
        let out = m.forward(&cx, g.constant(img)).value();
        assert_eq!(out.shape(), [1, 1, 4, 4]);
        assert!((out.data()[0] - 0.4).abs() < 1e-12);
        assert!((out.data()[5] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn constant_image_gives_constant_map() {
        let (store, m) = module();
        let g = Graph::new();
        let cx = Ctx::new(&g, &store, false);
        let out = m.forward(&cx, g.constant(Tensor::full([1, 3, 8, 8], 0.7))).value();
        let first = out.data()[0];
        assert!(out.data().iter().all(|v| (v - first).abs() < 1e-12));
    }
}
