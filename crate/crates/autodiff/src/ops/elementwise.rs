use std::ops::{Add, Mul, Neg, Sub};
use std::rc::Rc;

use crate::graph::BackwardOp;
use crate::{Real, Tensor, Var};

#[derive(Clone, Copy)]
enum Unary {
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Exp,
    Scale(f64),
    Shift,
}

struct UnaryOp<R: Real> {
    kind: Unary,
    input: Rc<Tensor<R>>,
    output: Tensor<R>,
}

impl<R: Real> BackwardOp<R> for UnaryOp<R> {
    fn backward(&self, grad: &Tensor<R>, _needs: &[bool]) -> Vec<Option<Tensor<R>>> {
        let g = match self.kind {
            Unary::LeakyRelu(slope) => {
                let slope = R::from_f64(slope);
                grad.zip_map(&self.input, |g, x| if x > R::ZERO { g } else { g * slope })
            }
            Unary::Sigmoid => grad.zip_map(&self.output, |g, y| g * y * (R::ONE - y)),
            Unary::Tanh => grad.zip_map(&self.output, |g, y| g * (R::ONE - y * y)),
            Unary::Exp => grad.zip_map(&self.output, |g, y| g * y),
            Unary::Scale(c) => {
                let c = R::from_f64(c);
                grad.map(|g| g * c)
            }
            Unary::Shift => grad.clone(),
        };
        vec![Some(g)]
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

struct BinaryOp<R: Real> {
    kind: Binary,
    lhs: Rc<Tensor<R>>,
    rhs: Rc<Tensor<R>>,
}

impl<R: Real> BackwardOp<R> for BinaryOp<R> {
    fn backward(&self, grad: &Tensor<R>, needs: &[bool]) -> Vec<Option<Tensor<R>>> {
        match self.kind {
            Binary::Add => vec![Some(grad.clone()), Some(grad.clone())],
            Binary::Sub => vec![Some(grad.clone()), Some(grad.map(|g| -g))],
            Binary::Mul => vec![
                needs[0].then(|| grad.zip_map(&self.rhs, |g, b| g * b)),
                needs[1].then(|| grad.zip_map(&self.lhs, |g, a| g * a)),
            ],
        }
    }
}

impl<'g, R: Real> Var<'g, R> {
    fn unary(self, name: &'static str, kind: Unary, f: impl Fn(R) -> R) -> Var<'g, R> {
        let input = self.value();
        let out = input.map(f);
        let op: Option<Box<dyn BackwardOp<R>>> = self.graph.tracks(&[self]).then(|| {
            let output = match kind {
                Unary::Sigmoid | Unary::Tanh | Unary::Exp => out.clone(),
                _ => Tensor::scalar(R::ZERO),
            };
            Box::new(UnaryOp {
                kind,
                input: Rc::clone(&input),
                output,
            }) as Box<dyn BackwardOp<R>>
        });
        self.graph.push(name, out, &[self], op)
    }

    fn binary(self, other: Var<'g, R>, name: &'static str, kind: Binary) -> Var<'g, R> {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "variables from different tapes"
        );
        let (a, b) = (self.value(), other.value());
        assert_eq!(
            a.shape(),
            b.shape(),
            "{name}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
        let out = match kind {
            Binary::Add => a.zip_map(&b, |x, y| x + y),
            Binary::Sub => a.zip_map(&b, |x, y| x - y),
            Binary::Mul => a.zip_map(&b, |x, y| x * y),
        };
        let op: Option<Box<dyn BackwardOp<R>>> = self.graph.tracks(&[self, other]).then(|| {
            Box::new(BinaryOp {
                kind,
                lhs: a,
                rhs: b,
            }) as Box<dyn BackwardOp<R>>
        });
        self.graph.push(name, out, &[self, other], op)
    }

    /// `x` for `x > 0`, `slope * x` otherwise. The derivative at 0 is `slope`.
    pub fn leaky_relu(self, slope: f64) -> Var<'g, R> {
        let s = R::from_f64(slope);
        self.unary("leaky_relu", Unary::LeakyRelu(slope), move |x| {
            if x > R::ZERO {
                x
            } else {
                x * s
            }
        })
    }

    pub fn sigmoid(self) -> Var<'g, R> {
        self.unary("sigmoid", Unary::Sigmoid, |x| {
            if x >= R::ZERO {
                R::ONE / (R::ONE + (-x).exp())
            } else {
                let e = x.exp();
                e / (R::ONE + e)
            }
        })
    }

    pub fn tanh(self) -> Var<'g, R> {
        self.unary("tanh", Unary::Tanh, |x| x.tanh())
    }

    pub fn exp(self) -> Var<'g, R> {
        self.unary("exp", Unary::Exp, |x| x.exp())
    }

    pub fn scale(self, c: f64) -> Var<'g, R> {
        let k = R::from_f64(c);
        self.unary("scale", Unary::Scale(c), move |x| x * k)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g, R> {
        let k = R::from_f64(c);
        self.unary("add_scalar", Unary::Shift, move |x| x + k)
    }

    pub fn square(self) -> Var<'g, R> {
        self * self
    }
}

impl<'g, R: Real> Add for Var<'g, R> {
    type Output = Var<'g, R>;
    fn add(self, rhs: Self) -> Self::Output {
        self.binary(rhs, "add", Binary::Add)
    }
}

impl<'g, R: Real> Sub for Var<'g, R> {
    type Output = Var<'g, R>;
    fn sub(self, rhs: Self) -> Self::Output {
        self.binary(rhs, "sub", Binary::Sub)
    }
}

impl<'g, R: Real> Mul for Var<'g, R> {
    type Output = Var<'g, R>;
    fn mul(self, rhs: Self) -> Self::Output {
        self.binary(rhs, "mul", Binary::Mul)
    }
}

impl<'g, R: Real> Neg for Var<'g, R> {
    type Output = Var<'g, R>;
    fn neg(self) -> Self::Output {
        self.scale(-1.0)
    }
}
