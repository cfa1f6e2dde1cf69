//! Small classifiers with exact cross-entropy gradients.
//!
//! Parameters live in one flat vector. Softmax regression stores the
//! `dim × c` weight matrix column-major followed by `c` biases; the MLP
//! stores `W₁ (dim × h)`, `b₁ (h)`, `W₂ (h × c)`, `b₂ (c)` in that order.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::FedsimError;
use crate::datagen::LabeledDataset;
use crate::linalg::{Matrix, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Model {
    Softmax { dim: usize, classes: usize },
    /// One `tanh` hidden layer.
    Mlp { dim: usize, hidden: usize, classes: usize },
}

/// Proximal term `(μ/2)‖w − anchor‖²`.
#[derive(Clone, Copy, Debug)]
pub struct Prox<'a> {
    pub mu: f64,
    pub anchor: &'a [f64],
}

impl Model {
    pub fn dim(&self) -> usize {
        match *self {
            Model::Softmax { dim, .. } | Model::Mlp { dim, .. } => dim,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            Model::Softmax { classes, .. } | Model::Mlp { classes, .. } => classes,
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            Model::Softmax { dim, classes } => (dim + 1) * classes,
            Model::Mlp { dim, hidden, classes } => (dim + 1) * hidden + (hidden + 1) * classes,
        }
    }

    /// Softmax starts at zero (uniform predictions). The MLP draws weights
    /// from `N(0, 1/fan_in)` with zero biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        match *self {
            Model::Softmax { .. } => Vector::zeros(self.param_count()),
            Model::Mlp { dim, hidden, classes } => {
                let mut w = Vector::zeros(self.param_count());
                let first = Normal::new(0.0, (1.0 / dim as f64).sqrt()).expect("positive scale");
                let second = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).expect("positive scale");
                for x in w.rows_mut(0, dim * hidden).iter_mut() {
                    *x = first.sample(rng);
                }
                let off = (dim + 1) * hidden;
                for x in w.rows_mut(off, hidden * classes).iter_mut() {
                    *x = second.sample(rng);
                }
                w
            }
        }
    }

    fn check(&self, params: &[f64], data: &LabeledDataset) -> Result<(), FedsimError> {
        if params.len() != self.param_count() {
            return Err(FedsimError::DimensionMismatch { expected: self.param_count(), found: params.len() });
        }
        if data.dim() != self.dim() {
            return Err(FedsimError::DimensionMismatch { expected: self.dim(), found: data.dim() });
        }
        if params.iter().any(|x| !x.is_finite()) {
            return Err(FedsimError::NonFinite("model parameters".into()));
        }
        Ok(())
    }

    /// `samples × c` logits, plus the hidden activations for the MLP.
    fn forward(&self, params: &[f64], features: &Matrix) -> (Matrix, Option<Matrix>) {
        match *self {
            Model::Softmax { dim, classes } => {
                let w = Matrix::from_column_slice(dim, classes, &params[..dim * classes]);
                let b = &params[dim * classes..];
                let mut logits = features * w;
                add_bias(&mut logits, b);
                (logits, None)
            }
            Model::Mlp { dim, hidden, classes } => {
                let (w1, rest) = params.split_at(dim * hidden);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(hidden * classes);
                let mut h = features * Matrix::from_column_slice(dim, hidden, w1);
                add_bias(&mut h, b1);
                h.apply(|x| *x = x.tanh());
                let mut logits = &h * Matrix::from_column_slice(hidden, classes, w2);
                add_bias(&mut logits, b2);
                (logits, Some(h))
            }
        }
    }

    pub fn logits(&self, params: &[f64], features: &Matrix) -> Matrix {
        self.forward(params, features).0
    }

    /// Arg-max class per sample, ties to the lower class.
    pub fn predict(&self, params: &[f64], features: &Matrix) -> Vec<usize> {
        let logits = self.logits(params, features);
        (0..logits.nrows())
            .map(|r| {
                let mut best = 0;
                for z in 1..logits.ncols() {
                    if logits[(r, z)] > logits[(r, best)] {
                        best = z;
                    }
                }
                best
            })
            .collect()
    }

    /// Mean cross-entropy without the gradient.
    pub fn loss(&self, params: &[f64], data: &LabeledDataset) -> Result<f64, FedsimError> {
        self.check(params, data)?;
        if data.is_empty() {
            return Err(FedsimError::EmptyDataset);
        }
        let logits = self.logits(params, &data.features);
        let (loss, _) = softmax_cross_entropy(&logits, &data.labels);
        Ok(loss)
    }

    /// Mean cross-entropy and its exact gradient, optionally with a
    /// proximal term.
    pub fn loss_and_gradient(
        &self,
        params: &[f64],
        data: &LabeledDataset,
        prox: Option<Prox<'_>>,
    ) -> Result<(f64, Vector), FedsimError> {
        self.check(params, data)?;
        if data.is_empty() {
            return Err(FedsimError::EmptyDataset);
        }
        let x = &data.features;
        let (logits, hidden) = self.forward(params, x);
        let (mut loss, delta) = softmax_cross_entropy(&logits, &data.labels);
        let mut grad = Vector::zeros(self.param_count());
        match *self {
            Model::Softmax { dim, classes } => {
                let gw = x.transpose() * &delta;
                grad.rows_mut(0, dim * classes).copy_from_slice(gw.as_slice());
                grad.rows_mut(dim * classes, classes).copy_from(&column_sums(&delta));
            }
            Model::Mlp { dim, hidden: hs, classes } => {
                let h = hidden.expect("mlp forward keeps activations");
                let w2 = Matrix::from_column_slice(hs, classes, &params[(dim + 1) * hs..(dim + 1) * hs + hs * classes]);
                let gw2 = h.transpose() * &delta;
                let mut dh = &delta * w2.transpose();
                dh.zip_apply(&h, |g, a| *g *= 1.0 - a * a);
                let gw1 = x.transpose() * &dh;
                let mut off = 0;
                grad.rows_mut(off, dim * hs).copy_from_slice(gw1.as_slice());
                off += dim * hs;
                grad.rows_mut(off, hs).copy_from(&column_sums(&dh));
                off += hs;
                grad.rows_mut(off, hs * classes).copy_from_slice(gw2.as_slice());
                off += hs * classes;
                grad.rows_mut(off, classes).copy_from(&column_sums(&delta));
            }
        }
        if let Some(p) = prox {
            if p.anchor.len() != params.len() {
                return Err(FedsimError::DimensionMismatch { expected: params.len(), found: p.anchor.len() });
            }
            let mut sq = 0.0;
            for ((g, w), a) in grad.iter_mut().zip(params).zip(p.anchor) {
                *g += p.mu * (w - a);
                sq += (w - a) * (w - a);
            }
            loss += 0.5 * p.mu * sq;
        }
        Ok((loss, grad))
    }
}

fn add_bias(m: &mut Matrix, b: &[f64]) {
    for (j, &bj) in b.iter().enumerate() {
        m.column_mut(j).add_scalar_mut(bj);
    }
}

fn column_sums(m: &Matrix) -> Vector {
    Vector::from_fn(m.ncols(), |j, _| m.column(j).sum())
}

/// Mean cross-entropy and `(softmax − onehot)/n`.
fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let (n, c) = logits.shape();
    let mut delta = Matrix::zeros(n, c);
    let mut loss = 0.0;
    for r in 0..n {
        let max = (0..c).map(|z| logits[(r, z)]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for z in 0..c {
            let e = (logits[(r, z)] - max).exp();
            delta[(r, z)] = e;
            total += e;
        }
        loss += total.ln() + max - logits[(r, labels[r])];
        for z in 0..c {
            delta[(r, z)] /= total * n as f64;
        }
        delta[(r, labels[r])] -= 1.0 / n as f64;
    }
    (loss / n as f64, delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::make_gaussian_mixture_task;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn central_difference(model: &Model, w: &Vector, data: &LabeledDataset, prox: Option<Prox<'_>>) -> Vector {
        let h = 1e-5;
        Vector::from_fn(w.len(), |i, _| {
            let mut plus = w.clone();
            let mut minus = w.clone();
            plus[i] += h;
            minus[i] -= h;
            let lp = model.loss_and_gradient(plus.as_slice(), data, prox).unwrap().0;
            let lm = model.loss_and_gradient(minus.as_slice(), data, prox).unwrap().0;
            (lp - lm) / (2.0 * h)
        })
    }

    #[test]
    fn uniform_init_loss_is_log_c() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data = make_gaussian_mixture_task(7, 6, 5, 2.0, &mut rng).unwrap();
        let model = Model::Softmax { dim: 6, classes: 7 };
        let w = model.init(&mut rng);
        let (loss, _) = model.loss_and_gradient(w.as_slice(), &data, None).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = make_gaussian_mixture_task(3, 4, 6, 1.5, &mut rng).unwrap();
        for model in [Model::Softmax { dim: 4, classes: 3 }, Model::Mlp { dim: 4, hidden: 5, classes: 3 }] {
            for trial in 0..5 {
                let w = Vector::from_fn(model.param_count(), |_, _| rng.random_range(-1.0..1.0));
                let anchor = Vector::from_fn(model.param_count(), |_, _| rng.random_range(-1.0..1.0));
                let prox = (trial % 2 == 1).then_some(Prox { mu: 0.3, anchor: anchor.as_slice() });
                let (_, g) = model.loss_and_gradient(w.as_slice(), &data, prox).unwrap();
                let fd = central_difference(&model, &w, &data, prox);
                let rel = (&g - &fd).norm() / fd.norm().max(1e-12);
                assert!(rel < 1e-5, "{model:?} trial {trial}: relative error {rel}");
            }
        }
    }

    #[test]
    fn prox_at_anchor_leaves_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = make_gaussian_mixture_task(3, 4, 6, 1.5, &mut rng).unwrap();
        let model = Model::Softmax { dim: 4, classes: 3 };
        let w = Vector::from_fn(model.param_count(), |_, _| rng.random_range(-1.0..1.0));
        let plain = model.loss_and_gradient(w.as_slice(), &data, None).unwrap();
        let prox = model.loss_and_gradient(w.as_slice(), &data, Some(Prox { mu: 5.0, anchor: w.as_slice() })).unwrap();
        assert_eq!(plain, prox);
    }

    #[test]
    fn errors() {
        let model = Model::Softmax { dim: 2, classes: 2 };
        let empty = LabeledDataset::new(Matrix::zeros(0, 2), vec![], 2).unwrap();
        assert!(matches!(model.loss_and_gradient(&[0.0; 6], &empty, None), Err(FedsimError::EmptyDataset)));
        let one = LabeledDataset::new(Matrix::zeros(1, 2), vec![0], 2).unwrap();
        assert!(matches!(model.loss_and_gradient(&[f64::NAN; 6], &one, None), Err(FedsimError::NonFinite(_))));
        assert!(model.loss_and_gradient(&[0.0; 5], &one, None).is_err());
    }

    #[test]
    fn predict_breaks_ties_low() {
        let model = Model::Softmax { dim: 1, classes: 3 };
        let x = Matrix::from_column_slice(2, 1, &[1.0, -1.0]);
        // Weights (0, 1, 1) and zero bias: sample 1 ties classes 1 and 2.
        let w = [0.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        assert_eq!(model.predict(&w, &x), vec![1, 0]);
    }
}
