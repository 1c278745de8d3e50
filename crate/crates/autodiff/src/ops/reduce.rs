use std::rc::Rc;

use crate::graph::BackwardOp;
use crate::{Real, Tensor, Var};

#[derive(Clone, Copy)]
enum Reduce {
    Sum,
    Mean,
    L1,
    SqL2,
}

struct ReduceOp<R: Real> {
    kind: Reduce,
    input: Rc<Tensor<R>>,
}

impl<R: Real> BackwardOp<R> for ReduceOp<R> {
    fn backward(&self, grad: &Tensor<R>, _needs: &[bool]) -> Vec<Option<Tensor<R>>> {
        let g = grad.item();
        let x = &self.input;
        let out = match self.kind {
            Reduce::Sum => Tensor::full(x.shape().to_vec(), g),
            Reduce::Mean => Tensor::full(x.shape().to_vec(), g / R::from_f64(x.numel() as f64)),
            // Subgradient 0 at the kink.
            Reduce::L1 => x.map(|v| {
                if v > R::ZERO {
                    g
                } else if v < R::ZERO {
                    -g
                } else {
                    R::ZERO
                }
            }),
            Reduce::SqL2 => x.map(|v| R::from_f64(2.0) * v * g),
        };
        vec![Some(out)]
    }
}

impl<'g, R: Real> Var<'g, R> {
    fn reduce(self, name: &'static str, kind: Reduce) -> Var<'g, R> {
        let x = self.value();
        let v = match kind {
            Reduce::Sum => x.sum(),
            Reduce::Mean => x.mean(),
            Reduce::L1 => x.data().iter().map(|v| v.abs()).sum(),
            Reduce::SqL2 => x.data().iter().map(|&v| v * v).sum(),
        };
        let op: Option<Box<dyn BackwardOp<R>>> = self
            .graph
            .tracks(&[self])
            .then(|| Box::new(ReduceOp { kind, input: x }) as Box<dyn BackwardOp<R>>);
        self.graph.push(name, Tensor::scalar(v), &[self], op)
    }

    /// Sum of all entries (rank-0 result).
    pub fn sum(self) -> Var<'g, R> {
        self.reduce("sum", Reduce::Sum)
    }

    pub fn mean(self) -> Var<'g, R> {
        self.reduce("mean", Reduce::Mean)
    }

    /// `Σ |x_i|`.
    pub fn l1_norm(self) -> Var<'g, R> {
        self.reduce("l1_norm", Reduce::L1)
    }

    /// `Σ x_i²`.
    pub fn sq_l2(self) -> Var<'g, R> {
        self.reduce("sq_l2", Reduce::SqL2)
    }
}

struct SoftmaxRowsOp<R: Real> {
    output: Tensor<R>,
}

impl<R: Real> BackwardOp<R> for SoftmaxRowsOp<R> {
    fn backward(&self, grad: &Tensor<R>, _needs: &[bool]) -> Vec<Option<Tensor<R>>> {
        let (rows, cols) = self.output.dims2();
        let y = self.output.data();
        let dy = grad.data();
        let mut dx = vec![R::ZERO; rows * cols];
        for r in 0..rows {
            let span = r * cols..(r + 1) * cols;
            let dot: R = y[span.clone()]
                .iter()
                .zip(&dy[span.clone()])
                .map(|(&a, &b)| a * b)
                .sum();
            for i in span {
                dx[i] = y[i] * (dy[i] - dot);
            }
        }
        vec![Some(Tensor::new([rows, cols], dx))]
    }
}

struct CrossEntropyOp<R: Real> {
    probs: Tensor<R>,
    targets: Vec<usize>,
}

impl<R: Real> BackwardOp<R> for CrossEntropyOp<R> {
    fn backward(&self, grad: &Tensor<R>, _needs: &[bool]) -> Vec<Option<Tensor<R>>> {
        let (rows, cols) = self.probs.dims2();
        let scale = grad.item() / R::from_f64(rows as f64);
        let mut d = self.probs.map(|p| p * scale);
        for (r, &t) in self.targets.iter().enumerate() {
            d.data_mut()[r * cols + t] -= scale;
        }
        vec![Some(d)]
    }
}

/// Row-wise numerically stable softmax; `window(r)` gives the visible column
/// range `start..end` of row `r` (the rest get probability 0).
fn softmax_rows_with<R: Real>(x: &Tensor<R>, window: impl Fn(usize) -> (usize, usize)) -> Tensor<R> {
    let (rows, cols) = x.dims2();
    let d = x.data();
    let mut out = vec![R::ZERO; rows * cols];
    for r in 0..rows {
        let (start, end) = window(r);
        let end = end.clamp(1, cols);
        let start = start.min(end - 1);
        let row = &d[r * cols + start..r * cols + end];
        let m = row.iter().copied().fold(row[0], R::max);
        let mut z = R::ZERO;
        for (i, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            out[r * cols + start + i] = e;
            z += e;
        }
        for v in &mut out[r * cols + start..r * cols + end] {
            *v /= z;
        }
    }
    Tensor::new([rows, cols], out)
}

impl<'g, R: Real> Var<'g, R> {
    /// Softmax over the last axis of a `[rows, cols]` matrix. With `causal`,
    /// row `r` only attends to columns `0..=r`.
    pub fn softmax_rows(self, causal: bool) -> Var<'g, R> {
        let x = self.value();
        let (_, cols) = x.dims2();
        let out = if causal {
            softmax_rows_with(&x, |r| (0, r + 1))
        } else {
            softmax_rows_with(&x, |_| (0, cols))
        };
        self.softmax_node(out)
    }

    /// Causal softmax within consecutive diagonal blocks of size `block`:
    /// row `r` attends to columns `block * (r / block)..=r`. Equivalent to a
    /// causal softmax applied to each block independently.
    pub fn block_causal_softmax(self, block: usize) -> Var<'g, R> {
        assert!(block > 0, "block_causal_softmax: block must be positive");
        let out = softmax_rows_with(&self.value(), |r| (r / block * block, r + 1));
        self.softmax_node(out)
    }

    fn softmax_node(self, out: Tensor<R>) -> Var<'g, R> {
        let op: Option<Box<dyn BackwardOp<R>>> = self.graph.tracks(&[self]).then(|| {
            Box::new(SoftmaxRowsOp {
                output: out.clone(),
            }) as Box<dyn BackwardOp<R>>
        });
        self.graph.push("softmax_rows", out, &[self], op)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `[rows, classes]` logits.
    pub fn cross_entropy(self, targets: &[usize]) -> Var<'g, R> {
        let x = self.value();
        let (rows, cols) = x.dims2();
        assert_eq!(rows, targets.len(), "cross_entropy: one target per row");
        assert!(
            targets.iter().all(|&t| t < cols),
            "cross_entropy: target out of range"
        );
        let probs = softmax_rows_with(&x, |_| (0, cols));
        let d = x.data();
        let mut nll = R::ZERO;
        for (r, &t) in targets.iter().enumerate() {
            let row = &d[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(row[0], R::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<R>().ln();
            nll += lse - row[t];
        }
        let loss = nll / R::from_f64(rows as f64);
        let op: Option<Box<dyn BackwardOp<R>>> = self.graph.tracks(&[self]).then(|| {
            Box::new(CrossEntropyOp {
                probs,
                targets: targets.to_vec(),
            }) as Box<dyn BackwardOp<R>>
        });
        self.graph.push("cross_entropy", Tensor::scalar(loss), &[self], op)
    }
}

/// Plain row-wise softmax of a `[rows, cols]` tensor, outside any tape.
pub fn softmax<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    let (_, cols) = x.dims2();
    softmax_rows_with(x, |_| (0, cols))
}

#[cfg(test)]
mod tests {
    use crate::{Graph, Tensor};

    #[test]
    fn sum_gradient_is_ones() {
        let g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_f64([2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let grads = g.backward(x.sum()).unwrap();
        assert_eq!(grads.of(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn l1_gradient_is_sign() {
        let g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_f64([4], &[1.5, -2.0, 0.0, -0.1]));
        let grads = g.backward(x.l1_norm()).unwrap();
        assert_eq!(grads.of(x).unwrap().data(), &[1.0, -1.0, 0.0, -1.0]);
    }

    #[test]
    fn uniform_logits_cost_log_classes() {
        let g = Graph::<f64>::new();
        let x = g.variable(Tensor::zeros([3, 64]));
        let loss = x.cross_entropy(&[0, 5, 63]).item();
        assert_eq!(loss, (64.0f64).ln());
    }

    #[test]
    fn causal_softmax_masks_future() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64([2, 2], &[1.0, 9.0, 1.0, 1.0]));
        let y = x.softmax_rows(true).value();
        assert_eq!(y.data(), &[1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn block_causal_softmax_matches_per_block_causal() {
        let g = Graph::<f64>::new();
        let vals: Vec<f64> = (0..36).map(|i| ((i * 7) % 11) as f64 * 0.3).collect();
        let y = g.constant(Tensor::from_f64([6, 6], &vals)).block_causal_softmax(3).value();
        for b in 0..2 {
            let block: Vec<f64> = (0..3)
                .flat_map(|r| (0..3).map(move |c| (r, c)))
                .map(|(r, c)| vals[(3 * b + r) * 6 + 3 * b + c])
                .collect();
            let expect = g.constant(Tensor::from_f64([3, 3], &block)).softmax_rows(true).value();
            for r in 0..3 {
                for c in 0..6 {
                    let got = y.data()[(3 * b + r) * 6 + c];
                    let want = if c / 3 == b { expect.data()[r * 3 + c % 3] } else { 0.0 };
                    assert_eq!(got, want, "row {} col {c}", 3 * b + r);
                }
            }
        }
    }
}
