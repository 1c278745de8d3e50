use std::rc::Rc;

use crate::graph::BackwardOp;
use crate::{Real, Tensor, Var};

struct MatmulOp<R: Real> {
    a: Rc<Tensor<R>>,
    b: Rc<Tensor<R>>,
}

impl<R: Real> BackwardOp<R> for MatmulOp<R> {
    fn backward(&self, grad: &Tensor<R>, needs: &[bool]) -> Vec<Option<Tensor<R>>> {
        let (m, k) = self.a.dims2();
        let (_, n) = self.b.dims2();
        let da = needs[0].then(|| {
            // dA = dC · Bᵀ
            let mut out = vec![R::ZERO; m * k];
            R::gemm(m, n, k, R::ONE, grad.data(), n, 1, self.b.data(), 1, n, R::ZERO, &mut out, k, 1);
            Tensor::new([m, k], out)
        });
        let db = needs[1].then(|| {
            // dB = Aᵀ · dC
            let mut out = vec![R::ZERO; k * n];
            R::gemm(k, m, n, R::ONE, self.a.data(), 1, k, grad.data(), n, 1, R::ZERO, &mut out, n, 1);
            Tensor::new([k, n], out)
        });
        vec![da, db]
    }
}

struct TransposeOp;

impl<R: Real> BackwardOp<R> for TransposeOp {
    fn backward(&self, grad: &Tensor<R>, _needs: &[bool]) -> Vec<Option<Tensor<R>>> {
        vec![Some(transpose(grad))]
    }
}

struct LinearOp<R: Real> {
    x: Rc<Tensor<R>>,
    w: Rc<Tensor<R>>,
    has_bias: bool,
}

impl<R: Real> BackwardOp<R> for LinearOp<R> {
    fn backward(&self, grad: &Tensor<R>, needs: &[bool]) -> Vec<Option<Tensor<R>>> {
        let (n, fin) = self.x.dims2();
        let (fout, _) = self.w.dims2();
        let dy = grad.data();
        let dx = needs[0].then(|| {
            // dX = dY · W
            let mut out = vec![R::ZERO; n * fin];
            R::gemm(n, fout, fin, R::ONE, dy, fout, 1, self.w.data(), fin, 1, R::ZERO, &mut out, fin, 1);
            Tensor::new([n, fin], out)
        });
        let dw = needs[1].then(|| {
            // dW = dYᵀ · X
            let mut out = vec![R::ZERO; fout * fin];
            R::gemm(fout, n, fin, R::ONE, dy, 1, fout, self.x.data(), fin, 1, R::ZERO, &mut out, fin, 1);
            Tensor::new([fout, fin], out)
        });
        let mut grads = vec![dx, dw];
        if self.has_bias {
            grads.push(needs[2].then(|| {
                let mut db = vec![R::ZERO; fout];
                for row in dy.chunks_exact(fout) {
                    for (acc, &v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                Tensor::new([fout], db)
            }));
        }
        grads
    }
}

fn transpose<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    let (r, c) = x.dims2();
    let d = x.data();
    Tensor::from_fn([c, r], |i| {
        let (j, k) = (i / r, i % r);
        d[k * c + j]
    })
}

impl<'g, R: Real> Var<'g, R> {
    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, rhs: Var<'g, R>) -> Var<'g, R> {
        let (a, b) = (self.value(), rhs.value());
        let (m, k) = a.dims2();
        let (k2, n) = b.dims2();
        assert_eq!(k, k2, "matmul: inner dimensions {k} and {k2} differ");
        let mut out = vec![R::ZERO; m * n];
        R::gemm(m, k, n, R::ONE, a.data(), k, 1, b.data(), n, 1, R::ZERO, &mut out, n, 1);
        let op: Option<Box<dyn BackwardOp<R>>> = self
            .graph
            .tracks(&[self, rhs])
            .then(|| Box::new(MatmulOp { a, b }) as Box<dyn BackwardOp<R>>);
        self.graph.push("matmul", Tensor::new([m, n], out), &[self, rhs], op)
    }

    pub fn transpose(self) -> Var<'g, R> {
        let out = transpose(&self.value());
        let op: Option<Box<dyn BackwardOp<R>>> = Some(Box::new(TransposeOp));
        self.graph.push("transpose", out, &[self], op)
    }

    /// Affine map `x Wᵀ + b` of `[n, in]` rows with `W: [out, in]`, `b: [out]`.
    pub fn linear(self, weight: Var<'g, R>, bias: Option<Var<'g, R>>) -> Var<'g, R> {
        let (x, w) = (self.value(), weight.value());
        let (n, fin) = x.dims2();
        let (fout, fin2) = w.dims2();
        assert_eq!(fin, fin2, "linear: input width {fin} vs weight {fin2}");
        let mut out = vec![R::ZERO; n * fout];
        R::gemm(n, fin, fout, R::ONE, x.data(), fin, 1, w.data(), 1, fin, R::ZERO, &mut out, fout, 1);
        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            let bv = b.value();
            assert_eq!(bv.shape(), [fout], "linear: bias shape");
            for row in out.chunks_exact_mut(fout) {
                for (o, &bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
            inputs.push(b);
        }
        let op: Option<Box<dyn BackwardOp<R>>> = self.graph.tracks(&inputs).then(|| {
            Box::new(LinearOp {
                x,
                w,
                has_bias: bias.is_some(),
            }) as Box<dyn BackwardOp<R>>
        });
        self.graph.push("linear", Tensor::new([n, fout], out), &inputs, op)
    }
}
