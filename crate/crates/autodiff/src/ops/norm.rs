use crate::graph::BackwardOp;
use crate::{Real, Tensor, Var};

struct LayerNormOp<R: Real> {
    xhat: Vec<R>,
    inv_std: Vec<R>,
    gain: Vec<R>,
    dims: (usize, usize, usize),
    shape: Vec<usize>,
}

impl<R: Real> BackwardOp<R> for LayerNormOp<R> {
    fn backward(&self, grad: &Tensor<R>, needs: &[bool]) -> Vec<Option<Tensor<R>>> {
        let (n, c, s) = self.dims;
        let dy = grad.data();
        let at = |b: usize, ch: usize, p: usize| (b * c + ch) * s + p;
        let mut dgain = vec![R::ZERO; c];
        let mut dbias = vec![R::ZERO; c];
        let mut dx = vec![R::ZERO; n * c * s];
        let cf = R::from_f64(c as f64);
        for b in 0..n {
            for p in 0..s {
                let mut sum_dxhat = R::ZERO;
                let mut sum_dxhat_xhat = R::ZERO;
                for ch in 0..c {
                    let i = at(b, ch, p);
                    let g = dy[i];
                    dgain[ch] += g * self.xhat[i];
                    dbias[ch] += g;
                    let dxh = g * self.gain[ch];
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += dxh * self.xhat[i];
                }
                let inv = self.inv_std[b * s + p];
                for ch in 0..c {
                    let i = at(b, ch, p);
                    let dxh = dy[i] * self.gain[ch];
                    dx[i] = inv / cf * (cf * dxh - sum_dxhat - self.xhat[i] * sum_dxhat_xhat);
                }
            }
        }
        vec![
            needs[0].then(|| Tensor::new(self.shape.clone(), dx)),
            needs[1].then(|| Tensor::new([c], dgain)),
            needs[2].then(|| Tensor::new([c], dbias)),
        ]
    }
}

impl<'g, R: Real> Var<'g, R> {
    /// Normalises over axis 1 (features/channels) independently at every
    /// other index of `[N, C, ...]`, then applies per-channel `gain` and
    /// `bias`.
    pub fn layer_norm(self, gain: Var<'g, R>, bias: Var<'g, R>, eps: f64) -> Var<'g, R> {
        assert!(eps > 0.0, "layer_norm: eps must be positive");
        let x = self.value();
        let shape = x.shape().to_vec();
        assert!(shape.len() >= 2, "layer_norm: need at least [N, C]");
        let (n, c) = (shape[0], shape[1]);
        assert!(c > 0, "layer_norm: zero feature dimension");
        let s: usize = shape[2..].iter().product();
        let (gv, bv) = (gain.value(), bias.value());
        assert_eq!(gv.shape(), [c], "layer_norm: gain shape");
        assert_eq!(bv.shape(), [c], "layer_norm: bias shape");

        let d = x.data();
        let eps = R::from_f64(eps);
        let cf = R::from_f64(c as f64);
        let mut xhat = vec![R::ZERO; d.len()];
        let mut inv_std = vec![R::ZERO; n * s];
        let mut out = vec![R::ZERO; d.len()];
        for b in 0..n {
            for p in 0..s {
                let idx = |ch: usize| (b * c + ch) * s + p;
                let mean = (0..c).map(|ch| d[idx(ch)]).sum::<R>() / cf;
                let var = (0..c)
                    .map(|ch| {
                        let t = d[idx(ch)] - mean;
                        t * t
                    })
                    .sum::<R>()
                    / cf;
                let inv = R::ONE / (var + eps).sqrt();
                inv_std[b * s + p] = inv;
                for ch in 0..c {
                    let i = idx(ch);
                    let xh = (d[i] - mean) * inv;
                    xhat[i] = xh;
                    out[i] = xh * gv.data()[ch] + bv.data()[ch];
                }
            }
        }
        let inputs = [self, gain, bias];
        let op: Option<Box<dyn BackwardOp<R>>> = self.graph.tracks(&inputs).then(|| {
            Box::new(LayerNormOp {
                xhat,
                inv_std,
                gain: gv.data().to_vec(),
                dims: (n, c, s),
                shape: shape.clone(),
            }) as Box<dyn BackwardOp<R>>
        });
        self.graph.push("layer_norm", Tensor::new(shape, out), &inputs, op)
    }
}
