//! Scalar fields on R^d: closed-form benchmark functions and network-backed fields.

use ndarray::{Array1, ArrayView2};

use crate::nn::MlpParams;

pub trait Field {
    fn value(&self, x: &[f64]) -> f64;

    /// One value per row of `xs`.
    fn values(&self, xs: ArrayView2<'_, f64>) -> Vec<f64> {
        xs.rows()
            .into_iter()
            .map(|r| match r.as_slice() {
                Some(s) => self.value(s),
                None => self.value(&r.to_vec()),
            })
            .collect()
    }
}

impl<F: Field + ?Sized> Field for &F {
    fn value(&self, x: &[f64]) -> f64 {
        (**self).value(x)
    }

    fn values(&self, xs: ArrayView2<'_, f64>) -> Vec<f64> {
        (**self).values(xs)
    }
}

/// `x -> c`.
#[derive(Clone, Copy, Debug)]
pub struct Constant(pub f64);

impl Field for Constant {
    fn value(&self, _x: &[f64]) -> f64 {
        self.0
    }
}

/// Wraps a closure as a field.
pub struct FnField<F>(pub F);

impl<F: Fn(&[f64]) -> f64> Field for FnField<F> {
    fn value(&self, x: &[f64]) -> f64 {
        (self.0)(x)
    }
}

/// `(1 - |x|^2)_+`, the multiplier that imposes u = 0 outside the unit ball.
#[inline]
pub fn boundary_factor(x: &[f64]) -> f64 {
    (1.0 - x.iter().map(|c| c * c).sum::<f64>()).max(0.0)
}

/// A network evaluated as a field. With `hard_boundary` the output is
/// multiplied by [`boundary_factor`], so the field vanishes on and outside
/// the unit sphere and the network is never evaluated there.
#[derive(Clone, Copy, Debug)]
pub struct NetField<'a> {
    pub params: &'a MlpParams,
    pub hard_boundary: bool,
}

impl<'a> NetField<'a> {
    pub fn plain(params: &'a MlpParams) -> Self {
        NetField {
            params,
            hard_boundary: false,
        }
    }

    pub fn wrapped(params: &'a MlpParams) -> Self {
        NetField {
            params,
            hard_boundary: true,
        }
    }

    pub fn solution(params: &'a MlpParams, hard_boundary: bool) -> Self {
        NetField {
            params,
            hard_boundary,
        }
    }
}

impl Field for NetField<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        let w = if self.hard_boundary { boundary_factor(x) } else { 1.0 };
        if w == 0.0 {
            return 0.0;
        }
        w * self.params.forward(x).expect("field dimension matches network input")
    }

    fn values(&self, xs: ArrayView2<'_, f64>) -> Vec<f64> {
        if !self.hard_boundary {
            return self
                .params
                .forward_batch(xs)
                .expect("field dimension matches network input")
                .to_vec();
        }
        let factors: Vec<f64> = xs
            .rows()
            .into_iter()
            .map(|r| 1.0 - r.iter().map(|c| c * c).sum::<f64>())
            .map(|w| w.max(0.0))
            .collect();
        let active: Vec<usize> = (0..factors.len()).filter(|&i| factors[i] > 0.0).collect();
        let sub = xs.select(ndarray::Axis(0), &active);
        let net: Array1<f64> = self
            .params
            .forward_batch(sub.view())
            .expect("field dimension matches network input");
        let mut out = vec![0.0; factors.len()];
        for (k, &i) in active.iter().enumerate() {
            out[i] = factors[i] * net[k];
        }
        out
    }
}
