//! Spatial primitives on `[N, C, H, W]` tensors.

use std::rc::Rc;

use crate::graph::BackwardOp;
use crate::{Real, Tensor, Var};

/// Border handling for odd-sized convolution kernels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Padding {
    /// Mirror without repeating the edge sample (`x[-1] = x[1]`).
    #[default]
    Reflect,
    Zero,
}

/// Output extent of a padded, strided convolution axis.
pub fn conv_out_size(size: usize, kernel: usize, stride: usize) -> usize {
    (size + 2 * (kernel / 2) - kernel) / stride + 1
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Source spatial offset for every `(ky, kx, oy, ox)` tap, `None` for zero
/// padding.
struct TapMap {
    taps: Vec<Option<u32>>,
    out_h: usize,
    out_w: usize,
}

impl TapMap {
    fn new(h: usize, w: usize, kh: usize, kw: usize, stride: usize, padding: Padding) -> Self {
        let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
        if padding == Padding::Reflect {
            assert!(
                h as isize > ph && w as isize > pw,
                "reflect padding needs spatial size > kernel radius ({h}x{w}, kernel {kh}x{kw})"
            );
        }
        let out_h = conv_out_size(h, kh, stride);
        let out_w = conv_out_size(w, kw, stride);
        let mut taps = Vec::with_capacity(kh * kw * out_h * out_w);
        for ky in 0..kh {
            for kx in 0..kw {
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let iy = (oy * stride) as isize - ph + ky as isize;
                        let ix = (ox * stride) as isize - pw + kx as isize;
                        let src = match padding {
                            Padding::Reflect => Some((reflect(iy, h) * w + reflect(ix, w)) as u32),
                            Padding::Zero => {
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    None
                                } else {
                                    Some((iy as usize * w + ix as usize) as u32)
                                }
                            }
                        };
                        taps.push(src);
                    }
                }
            }
        }
        Self { taps, out_h, out_w }
    }

    /// Fills `cols` (`[C*kh*kw, P]`) from one image `[C, H*W]`.
    fn im2col<R: Real>(&self, img: &[R], channels: usize, hw: usize, cols: &mut [R]) {
        let per_c = self.taps.len();
        for c in 0..channels {
            let src = &img[c * hw..(c + 1) * hw];
            let dst = &mut cols[c * per_c..(c + 1) * per_c];
            for (d, t) in dst.iter_mut().zip(&self.taps) {
                *d = match t {
                    Some(i) => src[*i as usize],
                    None => R::ZERO,
                };
            }
        }
    }

    /// Scatter-adds `cols` back onto one image gradient.
    fn col2im<R: Real>(&self, cols: &[R], channels: usize, hw: usize, img: &mut [R]) {
        let per_c = self.taps.len();
        for c in 0..channels {
            let dst = &mut img[c * hw..(c + 1) * hw];
            let src = &cols[c * per_c..(c + 1) * per_c];
            for (s, t) in src.iter().zip(&self.taps) {
                if let Some(i) = t {
                    dst[*i as usize] += *s;
                }
            }
        }
    }
}

struct Conv2dOp<R: Real> {
    taps: TapMap,
    cols: Vec<R>,
    kernel: Rc<Tensor<R>>,
    input_shape: [usize; 4],
    has_bias: bool,
}

impl<R: Real> BackwardOp<R> for Conv2dOp<R> {
    fn backward(&self, grad: &Tensor<R>, needs: &[bool]) -> Vec<Option<Tensor<R>>> {
        let [n, c, h, w] = self.input_shape;
        let (o, _, kh, kw) = self.kernel.dims4();
        let ckk = c * kh * kw;
        let p = self.taps.out_h * self.taps.out_w;
        let dy = grad.data();

        let dx = needs[0].then(|| {
            let mut dx = vec![R::ZERO; n * c * h * w];
            let mut dcols = vec![R::ZERO; ckk * p];
            for b in 0..n {
                // dcols = Kᵀ · dY_b
                R::gemm(
                    ckk, o, p, R::ONE,
                    self.kernel.data(), 1, ckk,
                    &dy[b * o * p..(b + 1) * o * p], p, 1,
                    R::ZERO, &mut dcols, p, 1,
                );
                self.taps.col2im(&dcols, c, h * w, &mut dx[b * c * h * w..(b + 1) * c * h * w]);
            }
            Tensor::new([n, c, h, w], dx)
        });
        let dk = needs[1].then(|| {
            let mut dk = vec![R::ZERO; o * ckk];
            for b in 0..n {
                // dK += dY_b · colsᵀ
                R::gemm(
                    o, p, ckk, R::ONE,
                    &dy[b * o * p..(b + 1) * o * p], p, 1,
                    &self.cols[b * ckk * p..(b + 1) * ckk * p], 1, p,
                    R::ONE, &mut dk, ckk, 1,
                );
            }
            Tensor::new([o, c, kh, kw], dk)
        });
        let mut grads = vec![dx, dk];
        if self.has_bias {
            grads.push(needs[2].then(|| {
                let mut db = vec![R::ZERO; o];
                for (i, chunk) in dy.chunks_exact(p).enumerate() {
                    db[i % o] += chunk.iter().copied().sum::<R>();
                }
                Tensor::new([o], db)
            }));
        }
        grads
    }
}

struct UpsampleOp;

impl<R: Real> BackwardOp<R> for UpsampleOp {
    fn backward(&self, grad: &Tensor<R>, _needs: &[bool]) -> Vec<Option<Tensor<R>>> {
        // Each input cell receives the sum of its 2x2 block.
        vec![Some(pool2x(grad, R::ONE))]
    }
}

struct AvgPoolOp;

impl<R: Real> BackwardOp<R> for AvgPoolOp {
    fn backward(&self, grad: &Tensor<R>, _needs: &[bool]) -> Vec<Option<Tensor<R>>> {
        vec![Some(upsample2x(grad).map(|v| v * R::from_f64(0.25)))]
    }
}

struct ChannelMeanOp {
    channels: usize,
}

impl<R: Real> BackwardOp<R> for ChannelMeanOp {
    fn backward(&self, grad: &Tensor<R>, _needs: &[bool]) -> Vec<Option<Tensor<R>>> {
        let (n, _, h, w) = grad.dims4();
        let c = self.channels;
        let inv = R::from_f64(1.0 / c as f64);
        let g = grad.data();
        let out = Tensor::from_fn([n, c, h, w], |i| {
            let s = i % (h * w);
            let b = i / (c * h * w);
            g[b * h * w + s] * inv
        });
        vec![Some(out)]
    }
}

struct BroadcastSpatialOp {
    hw: usize,
}

impl<R: Real> BackwardOp<R> for BroadcastSpatialOp {
    fn backward(&self, grad: &Tensor<R>, _needs: &[bool]) -> Vec<Option<Tensor<R>>> {
        let (n, c, _, _) = grad.dims4();
        let sums = grad
            .data()
            .chunks_exact(self.hw)
            .map(|ch| ch.iter().copied().sum())
            .collect();
        vec![Some(Tensor::new([n, c], sums))]
    }
}

fn upsample2x<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    let (n, c, h, w) = x.dims4();
    let d = x.data();
    let (h2, w2) = (2 * h, 2 * w);
    Tensor::from_fn([n, c, h2, w2], |i| {
        let plane = i / (h2 * w2);
        let y = (i / w2) % h2;
        let xx = i % w2;
        d[plane * h * w + (y / 2) * w + xx / 2]
    })
}

/// Sums each 2x2 block, scaled by `weight`.
fn pool2x<R: Real>(x: &Tensor<R>, weight: R) -> Tensor<R> {
    let (n, c, h, w) = x.dims4();
    assert!(h % 2 == 0 && w % 2 == 0, "2x pooling needs even extents, got {h}x{w}");
    let d = x.data();
    let (h2, w2) = (h / 2, w / 2);
    Tensor::from_fn([n, c, h2, w2], |i| {
        let plane = i / (h2 * w2);
        let y = (i / w2) % h2;
        let xx = i % w2;
        let base = plane * h * w + 2 * y * w + 2 * xx;
        (d[base] + d[base + 1] + d[base + w] + d[base + w + 1]) * weight
    })
}

impl<'g, R: Real> Var<'g, R> {
    /// 2-D cross-correlation of `[N, C, H, W]` with `[O, C, kh, kw]` (odd
    /// kernel sides, "same" padding of `k/2`), optional per-channel bias `[O]`.
    pub fn conv2d(
        self,
        kernel: Var<'g, R>,
        bias: Option<Var<'g, R>>,
        stride: usize,
        padding: Padding,
    ) -> Var<'g, R> {
        let (x, k) = (self.value(), kernel.value());
        let (n, c, h, w) = x.dims4();
        let (o, kc, kh, kw) = k.dims4();
        assert_eq!(c, kc, "conv2d: input has {c} channels, kernel expects {kc}");
        assert!(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel sides must be odd");
        assert!(stride >= 1, "conv2d: stride must be >= 1");

        let taps = TapMap::new(h, w, kh, kw, stride, padding);
        let ckk = c * kh * kw;
        let p = taps.out_h * taps.out_w;
        let track = self.graph.tracks(&[self, kernel]) || bias.is_some_and(|b| b.requires_grad());
        let save_cols = self.graph.tracks(&[kernel]);
        let mut cols = vec![R::ZERO; if save_cols { n * ckk * p } else { ckk * p }];
        let mut out = vec![R::ZERO; n * o * p];
        for b in 0..n {
            let cb = if save_cols { &mut cols[b * ckk * p..(b + 1) * ckk * p] } else { &mut cols[..] };
            taps.im2col(&x.data()[b * c * h * w..(b + 1) * c * h * w], c, h * w, cb);
            R::gemm(
                o, ckk, p, R::ONE,
                k.data(), ckk, 1,
                cb, p, 1,
                R::ZERO, &mut out[b * o * p..(b + 1) * o * p], p, 1,
            );
        }
        let mut inputs = vec![self, kernel];
        if let Some(bv) = bias {
            let bt = bv.value();
            assert_eq!(bt.shape(), [o], "conv2d: bias must have shape [{o}]");
            for (i, chunk) in out.chunks_exact_mut(p).enumerate() {
                let bb = bt.data()[i % o];
                chunk.iter_mut().for_each(|v| *v += bb);
            }
            inputs.push(bv);
        }
        let out = Tensor::new([n, o, taps.out_h, taps.out_w], out);
        let op: Option<Box<dyn BackwardOp<R>>> = track.then(|| {
            Box::new(Conv2dOp {
                taps,
                cols: if save_cols { cols } else { Vec::new() },
                kernel: k,
                input_shape: [n, c, h, w],
                has_bias: bias.is_some(),
            }) as Box<dyn BackwardOp<R>>
        });
        self.graph.push("conv2d", out, &inputs, op)
    }

    /// Nearest-neighbour 2x upsampling: each value fills a 2x2 block.
    pub fn upsample_nearest2x(self) -> Var<'g, R> {
        let out = upsample2x(&self.value());
        self.graph.push("upsample_nearest2x", out, &[self], Some(Box::new(UpsampleOp)))
    }

    /// Mean over non-overlapping 2x2 blocks.
    pub fn avg_pool2x(self) -> Var<'g, R> {
        let out = pool2x(&self.value(), R::from_f64(0.25));
        self.graph.push("avg_pool2x", out, &[self], Some(Box::new(AvgPoolOp)))
    }

    /// Per-pixel arithmetic mean over channels: `[N, C, H, W] -> [N, 1, H, W]`.
    pub fn channel_mean(self) -> Var<'g, R> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let d = x.data();
        let inv = R::from_f64(1.0 / c as f64);
        let out = Tensor::from_fn([n, 1, h, w], |i| {
            let (b, s) = (i / (h * w), i % (h * w));
            (0..c).map(|ch| d[(b * c + ch) * h * w + s]).sum::<R>() * inv
        });
        self.graph
            .push("channel_mean", out, &[self], Some(Box::new(ChannelMeanOp { channels: c })))
    }

    /// Repeats a `[N, C]` vector over an `h x w` grid: `[N, C, h, w]`.
    pub fn broadcast_spatial(self, h: usize, w: usize) -> Var<'g, R> {
        let x = self.value();
        let (n, c) = x.dims2();
        let d = x.data();
        let out = Tensor::from_fn([n, c, h, w], |i| d[i / (h * w)]);
        self.graph.push(
            "broadcast_spatial",
            out,
            &[self],
            Some(Box::new(BroadcastSpatialOp { hw: h * w })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Graph;

    #[test]
    fn output_size_formula() {
        assert_eq!(conv_out_size(32, 3, 1), 32);
        assert_eq!(conv_out_size(32, 3, 2), 16);
        assert_eq!(conv_out_size(5, 1, 1), 5);
    }

    #[test]
    fn identity_kernel_passthrough() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn([1, 1, 3, 4], |i| i as f64 * 0.5));
        let k = g.constant(Tensor::ones([1, 1, 1, 1]));
        let y = x.conv2d(k, None, 1, Padding::Zero).value();
        assert_eq!(*y, *x.value());
    }

    #[test]
    fn box_filter_centre_value() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(
            [1, 1, 3, 3],
            &[0.0, 3.0, 6.0, 3.0, 3.0, 3.0, 0.0, 0.0, 9.0],
        ));
        let k = g.constant(Tensor::full([1, 1, 3, 3], 1.0 / 9.0));
        let y = x.conv2d(k, None, 1, Padding::Zero).value();
        assert!((y.data()[4] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn reflect_preserves_constant_fields() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::full([2, 3, 5, 4], 0.7));
        let mut rng = rand::thread_rng();
        let k = g.constant(Tensor::randn([4, 3, 3, 3], 1.0, &mut rng));
        let y = x.conv2d(k, None, 1, Padding::Reflect).value();
        for plane in y.data().chunks_exact(20) {
            assert!(plane.iter().all(|v| (v - plane[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn upsample_then_pool_is_identity() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let up = x.upsample_nearest2x();
        assert_eq!(
            up.value().data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        assert_eq!(*up.avg_pool2x().value(), *x.value());
    }

    #[test]
    fn channel_mean_of_three() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64([1, 3, 1, 1], &[0.2, 0.4, 0.6]));
        assert!((x.channel_mean().item() - 0.4).abs() < 1e-15);
    }
}
