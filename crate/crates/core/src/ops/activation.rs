use crate::{BackwardOp, Graph, NodeId, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    /// Tanh approximation of GELU.
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Gelu => {
                let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
                let half = T::lit(0.5);
                half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
            }
        }
    }

    /// Derivative at input `x` with forward output `y`.
    pub fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
            Activation::Gelu => {
                let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
                let half = T::lit(0.5);
                let t = (c * (x + a * x * x * x)).tanh();
                let dt = (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x);
                half * (T::one() + t) + half * x * dt
            }
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

struct ActivationBack(Activation);

impl<T: Scalar> BackwardOp<T> for ActivationBack {
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let data = inputs[0]
            .data()
            .iter()
            .zip(output.data())
            .zip(grad.data())
            .map(|((&x, &y), &g)| g * self.0.derivative(x, y))
            .collect();
        vec![Some(Tensor::new(grad.shape(), data).expect("same length"))]
    }
}

impl<T: Scalar> Graph<'_, T> {
    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        let out = self.value(x).map(|v| kind.apply(v));
        self.record(out, &[x], ActivationBack(kind))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.activation(x, Activation::Tanh)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.activation(x, Activation::Gelu)
    }
}
