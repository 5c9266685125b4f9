use crate::model::SegModel;
use crate::scalar::Scalar;

/// Momentum gradient descent: `v <- m v + g`, `p <- p - lr v`.
#[derive(Debug, Clone)]
pub struct MomentumSgd<T> {
    pub lr: T,
    pub momentum: T,
    velocity: SegModel<T>,
}

impl<T: Scalar> MomentumSgd<T> {
    pub fn new(model: &SegModel<T>, lr: f64, momentum: f64) -> Self {
        Self { lr: T::lit(lr), momentum: T::lit(momentum), velocity: model.zeros_like() }
    }

    pub fn step(&mut self, model: &mut SegModel<T>, grads: &SegModel<T>) {
        let (lr, mu) = (self.lr, self.momentum);
        for (((_, mut p), (_, g)), (_, mut v)) in
            model.params_mut().into_iter().zip(grads.params()).zip(self.velocity.params_mut())
        {
            ndarray::Zip::from(&mut p).and(&g).and(&mut v).for_each(|p, &g, v| {
                *v = mu * *v + g;
                *p -= lr * *v;
            });
        }
    }
}
