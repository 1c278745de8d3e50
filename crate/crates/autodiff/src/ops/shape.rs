use crate::graph::BackwardOp;
use crate::{Graph, Real, Tensor, Var};

/// `(outer, axis extent, inner)` decomposition used by concat/narrow.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct ConcatOp {
    axis: usize,
    extents: Vec<usize>,
    shapes: Vec<Vec<usize>>,
}

impl<R: Real> BackwardOp<R> for ConcatOp {
    fn backward(&self, grad: &Tensor<R>, needs: &[bool]) -> Vec<Option<Tensor<R>>> {
        let (outer, total, inner) = split_axis(grad.shape(), self.axis);
        let g = grad.data();
        let mut start = 0;
        let mut out = Vec::with_capacity(self.extents.len());
        for ((&ext, shape), &need) in self.extents.iter().zip(&self.shapes).zip(needs) {
            if need {
                let mut d = Vec::with_capacity(outer * ext * inner);
                for o in 0..outer {
                    let base = (o * total + start) * inner;
                    d.extend_from_slice(&g[base..base + ext * inner]);
                }
                out.push(Some(Tensor::new(shape.clone(), d)));
            } else {
                out.push(None);
            }
            start += ext;
        }
        out
    }
}

struct NarrowOp {
    axis: usize,
    start: usize,
    input_shape: Vec<usize>,
}

impl<R: Real> BackwardOp<R> for NarrowOp {
    fn backward(&self, grad: &Tensor<R>, _needs: &[bool]) -> Vec<Option<Tensor<R>>> {
        let (outer, total, inner) = split_axis(&self.input_shape, self.axis);
        let len = grad.shape()[self.axis];
        let mut d = vec![R::ZERO; outer * total * inner];
        for o in 0..outer {
            let dst = (o * total + self.start) * inner;
            let src = o * len * inner;
            d[dst..dst + len * inner].copy_from_slice(&grad.data()[src..src + len * inner]);
        }
        vec![Some(Tensor::new(self.input_shape.clone(), d))]
    }
}

struct ReshapeOp {
    input_shape: Vec<usize>,
}

impl<R: Real> BackwardOp<R> for ReshapeOp {
    fn backward(&self, grad: &Tensor<R>, _needs: &[bool]) -> Vec<Option<Tensor<R>>> {
        vec![Some(grad.clone().reshape(self.input_shape.clone()))]
    }
}

struct IdentityOp;

impl<R: Real> BackwardOp<R> for IdentityOp {
    fn backward(&self, grad: &Tensor<R>, _needs: &[bool]) -> Vec<Option<Tensor<R>>> {
        vec![Some(grad.clone())]
    }
}

struct GatherRowsOp {
    indices: Vec<usize>,
    rows: usize,
}

impl<R: Real> BackwardOp<R> for GatherRowsOp {
    fn backward(&self, grad: &Tensor<R>, _needs: &[bool]) -> Vec<Option<Tensor<R>>> {
        let (_, cols) = grad.dims2();
        let mut d = vec![R::ZERO; self.rows * cols];
        for (r, &i) in self.indices.iter().enumerate() {
            for (acc, &g) in d[i * cols..(i + 1) * cols]
                .iter_mut()
                .zip(&grad.data()[r * cols..(r + 1) * cols])
            {
                *acc += g;
            }
        }
        vec![Some(Tensor::new([self.rows, cols], d))]
    }
}

impl<R: Real> Graph<R> {
    /// Joins variables along `axis`; all other extents must agree.
    pub fn concat<'g>(&'g self, parts: &[Var<'g, R>], axis: usize) -> Var<'g, R> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let values: Vec<_> = parts.iter().map(Var::value).collect();
        let first = values[0].shape().to_vec();
        let mut extents = Vec::with_capacity(parts.len());
        for v in &values {
            let s = v.shape();
            assert_eq!(s.len(), first.len(), "concat: rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "concat: shapes {s:?} and {first:?} differ off-axis");
            }
            extents.push(s[axis]);
        }
        let total: usize = extents.iter().sum();
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &ext) in values.iter().zip(&extents) {
                let base = o * ext * inner;
                data.extend_from_slice(&v.data()[base..base + ext * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let op: Option<Box<dyn BackwardOp<R>>> = self.tracks(parts).then(|| {
            Box::new(ConcatOp {
                axis,
                extents,
                shapes: values.iter().map(|v| v.shape().to_vec()).collect(),
            }) as Box<dyn BackwardOp<R>>
        });
        self.push("concat", Tensor::new(shape, data), parts, op)
    }
}

impl<'g, R: Real> Var<'g, R> {
    /// Slice `start..start + len` of `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g, R> {
        let x = self.value();
        let (outer, total, inner) = split_axis(x.shape(), axis);
        assert!(len > 0 && start + len <= total, "narrow: {start}+{len} exceeds {total}");
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * total + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let op = Box::new(NarrowOp {
            axis,
            start,
            input_shape: x.shape().to_vec(),
        });
        self.graph.push("narrow", Tensor::new(shape, data), &[self], Some(op))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Var<'g, R> {
        let x = self.value();
        let out = (*x).clone().reshape(shape);
        let op = Box::new(ReshapeOp {
            input_shape: x.shape().to_vec(),
        });
        self.graph.push("reshape", out, &[self], Some(op))
    }

    /// Straight-through estimator: the forward value is `value`, the gradient
    /// passes to `self` unchanged.
    pub fn straight_through(self, value: Tensor<R>) -> Var<'g, R> {
        assert_eq!(value.shape(), &self.shape()[..], "straight_through: shape mismatch");
        self.graph.push("straight_through", value, &[self], Some(Box::new(IdentityOp)))
    }

    /// Embedding lookup: rows `indices` of a `[rows, cols]` table.
    pub fn gather_rows(self, indices: &[usize]) -> Var<'g, R> {
        let t = self.value();
        let (rows, cols) = t.dims2();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            assert!(i < rows, "gather_rows: index {i} out of {rows}");
            data.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
        }
        let op = Box::new(GatherRowsOp {
            indices: indices.to_vec(),
            rows,
        });
        self.graph
            .push("gather_rows", Tensor::new([indices.len(), cols], data), &[self], Some(op))
    }
}

#[cfg(test)]
mod tests {
    use crate::{Graph, Tensor};

    #[test]
    fn concat_channels_then_narrow_back() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_fn([2, 1, 2, 2], |i| i as f64));
        let b = g.constant(Tensor::from_fn([2, 2, 2, 2], |i| 100.0 + i as f64));
        let c = g.concat(&[a, b], 1);
        assert_eq!(c.shape(), vec![2, 3, 2, 2]);
        assert_eq!(*c.narrow(1, 0, 1).value(), *a.value());
        assert_eq!(*c.narrow(1, 1, 2).value(), *b.value());
    }

    #[test]
    fn straight_through_forwards_value_and_passes_gradient() {
        let g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_f64([2], &[0.3, -0.2]));
        let y = x.straight_through(Tensor::from_f64([2], &[1.0, 5.0]));
        assert_eq!(y.value().data(), &[1.0, 5.0]);
        let w = g.constant(Tensor::from_f64([2], &[3.0, 4.0]));
        let grads = g.backward((y * w).sum()).unwrap();
        assert_eq!(grads.of(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn gather_accumulates_repeated_rows() {
        let g = Graph::<f64>::new();
        let t = g.variable(Tensor::zeros([3, 2]));
        let loss = t.gather_rows(&[1, 1, 2]).sum();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.of(t).unwrap().data(), &[0., 0., 2., 2., 1., 1.]);
    }
}
