//! Tanh multilayer perceptron with exact reverse-mode gradients and Adam.
//!
//! A network with layer sizes `[n_0, ..., n_D]` computes
//! `T_{D-1}(tanh(T_{D-2}(... tanh(T_0(x)))))` with `T_l(z) = A_l z + b_l`.
//! Batches are stored one point per row, so each layer is a single
//! matrix-matrix product `Z = X A_l^T + b_l`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::sampling::{Purpose, RngStream};

pub mod activation;

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    layer_sizes: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// Accumulated derivatives, shape-congruent with an [`MlpParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradBuffer {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

fn check_layer_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::shape("a network needs at least an input and an output layer"));
    }
    if layer_sizes.iter().any(|&n| n == 0) {
        return Err(Error::shape(format!("zero layer width in {layer_sizes:?}")));
    }
    if *layer_sizes.last().unwrap() != 1 {
        return Err(Error::shape("output width must be 1"));
    }
    Ok(())
}

/// Glorot-uniform weights, zero biases. Deterministic in `seed`.
pub fn mlp_init(layer_sizes: &[usize], seed: u64) -> Result<MlpParams> {
    mlp_init_stream(layer_sizes, RngStream::for_purpose(seed, Purpose::InitSolution, 0, 0))
}

pub(crate) fn mlp_init_stream(layer_sizes: &[usize], mut rng: RngStream) -> Result<MlpParams> {
    check_layer_sizes(layer_sizes)?;
    let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
    let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
    for w in layer_sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let a = Array2::from_shape_simple_fn((fan_out, fan_in), || {
            limit * (2.0 * rng.uniform() - 1.0)
        });
        weights.push(a);
        biases.push(Array1::zeros(fan_out));
    }
    Ok(MlpParams {
        layer_sizes: layer_sizes.to_vec(),
        weights,
        biases,
    })
}

/// Post-activation values of every layer for one batch. `layers[0]` is the input.
pub struct ForwardCache {
    layers: Vec<Array2<f64>>,
    output: Array1<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array1<f64> {
        &self.output
    }
}

impl MlpParams {
    pub fn from_parts(
        layer_sizes: Vec<usize>,
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
    ) -> Result<Self> {
        check_layer_sizes(&layer_sizes)?;
        let layers = layer_sizes.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::shape(format!(
                "expected {layers} weight matrices and bias vectors, got {} and {}",
                weights.len(),
                biases.len()
            )));
        }
        for (l, (a, b)) in weights.iter().zip(&biases).enumerate() {
            let want = (layer_sizes[l + 1], layer_sizes[l]);
            if a.dim() != want || b.len() != want.0 {
                return Err(Error::shape(format!(
                    "layer {l}: weight {:?} / bias {} do not match {:?}",
                    a.dim(),
                    b.len(),
                    want
                )));
            }
        }
        let p = MlpParams {
            layer_sizes,
            weights,
            biases,
        };
        if !p.is_finite() {
            return Err(Error::param("non-finite parameter"));
        }
        Ok(p)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Parameters in layer order, each layer's weights row-major then its bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                flat.len()
            )));
        }
        let mut it = flat.iter();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.iter_mut().chain(b.iter_mut()).for_each(|v| *v = *it.next().unwrap());
        }
        Ok(())
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::shape(format!(
                "input has dimension {cols}, network expects {}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x.len())?;
        let mut h = ArrayView1::from(x).to_owned();
        let last = self.weights.len() - 1;
        for (l, (a, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = a.dot(&h) + b;
            if l < last {
                z.mapv_inplace(activation::tanh);
            }
            h = z;
        }
        Ok(h[0])
    }

    pub fn forward_batch(&self, xs: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.forward_cached(xs)?.output)
    }

    pub fn forward_cached(&self, xs: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        self.check_input(xs.ncols())?;
        let n = xs.nrows();
        let last = self.weights.len() - 1;
        let mut layers = Vec::with_capacity(self.weights.len());
        layers.push(xs.to_owned());
        let mut output = Array1::zeros(n);
        for (l, (a, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = Array2::from_shape_fn((n, a.nrows()), |(_, k)| b[k]);
            general_mat_mul(1.0, &layers[l], &a.t(), 1.0, &mut z);
            if l < last {
                activation::tanh_inplace(z.as_slice_mut().expect("standard layout"));
                layers.push(z);
            } else {
                output = z.column(0).to_owned();
            }
        }
        Ok(ForwardCache { layers, output })
    }

    /// `sum_i upstream[i] * d forward(xs[i]) / d params`.
    pub fn backward(&self, xs: ArrayView2<'_, f64>, upstream: &[f64]) -> Result<GradBuffer> {
        let cache = self.forward_cached(xs)?;
        let mut grad = GradBuffer::zeros_like(self);
        self.backward_cached(&cache, upstream, &mut grad)?;
        Ok(grad)
    }

    /// Adds the batch contribution to `grad` (accumulates, does not overwrite).
    pub fn backward_cached(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        grad: &mut GradBuffer,
    ) -> Result<()> {
        let n = cache.output.len();
        if upstream.len() != n {
            return Err(Error::shape(format!(
                "{} upstream values for a batch of {n}",
                upstream.len()
            )));
        }
        if n == 0 {
            return Ok(());
        }
        let mut delta = Array2::from_shape_vec((n, 1), upstream.to_vec()).expect("column");
        for l in (0..self.weights.len()).rev() {
            let prev = &cache.layers[l];
            general_mat_mul(1.0, &delta.t(), prev, 1.0, &mut grad.weights[l]);
            grad.biases[l] += &delta.sum_axis(Axis(0));
            if l > 0 {
                let mut d_prev = Array2::zeros(prev.dim());
                general_mat_mul(1.0, &delta, &self.weights[l], 0.0, &mut d_prev);
                ndarray::Zip::from(&mut d_prev)
                    .and(prev)
                    .for_each(|d, &t| *d *= 1.0 - t * t);
                delta = d_prev;
            }
        }
        Ok(())
    }
}

impl GradBuffer {
    pub fn zeros_like(p: &MlpParams) -> Self {
        GradBuffer {
            weights: p.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: p.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.iter_mut().for_each(|w| *w *= s);
        self.biases.iter_mut().for_each(|b| *b *= s);
    }

    pub fn add_assign(&mut self, other: &GradBuffer) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    fn congruent(&self, p: &MlpParams) -> bool {
        self.weights.len() == p.weights.len()
            && self.biases.len() == p.biases.len()
            && self.weights.iter().zip(&p.weights).all(|(g, w)| g.dim() == w.dim())
            && self.biases.iter().zip(&p.biases).all(|(g, b)| g.len() == b.len())
    }
}

/// Step decay: `base * factor^(floor(step / every))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub decay_factor: f64,
    pub decay_every: u64,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        LrSchedule {
            base,
            decay_factor: 1.0,
            decay_every: u64::MAX,
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        let k = if self.decay_every == 0 { 0 } else { step / self.decay_every };
        self.base * self.decay_factor.powi(k.min(i32::MAX as u64) as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: GradBuffer,
    pub v: GradBuffer,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub schedule: LrSchedule,
}

impl AdamState {
    pub fn new(p: &MlpParams, schedule: LrSchedule) -> Self {
        AdamState {
            m: GradBuffer::zeros_like(p),
            v: GradBuffer::zeros_like(p),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            schedule,
        }
    }

    /// Learning rate that the next step will use.
    pub fn current_lr(&self) -> f64 {
        self.schedule.at(self.step)
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients before
/// touching any state.
pub fn adam_step(p: &mut MlpParams, g: &GradBuffer, s: &mut AdamState) -> Result<()> {
    if !g.congruent(p) || !s.m.congruent(p) || !s.v.congruent(p) {
        return Err(Error::shape("gradient or optimizer state does not match parameters"));
    }
    if !g.is_finite() {
        return Err(Error::TrainingDivergence {
            epoch: s.step,
            reason: "non-finite gradient".into(),
        });
    }
    let lr = s.schedule.at(s.step);
    s.step += 1;
    let (b1, b2, eps) = (s.beta1, s.beta2, s.epsilon);
    let c1 = 1.0 - b1.powi(s.step.min(i32::MAX as u64) as i32);
    let c2 = 1.0 - b2.powi(s.step.min(i32::MAX as u64) as i32);
    let update = |w: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *w -= lr * m_hat / (v_hat.sqrt() + eps);
    };
    for l in 0..p.weights.len() {
        ndarray::Zip::from(&mut p.weights[l])
            .and(&g.weights[l])
            .and(&mut s.m.weights[l])
            .and(&mut s.v.weights[l])
            .for_each(|w, &g, m, v| update(w, g, m, v));
        ndarray::Zip::from(&mut p.biases[l])
            .and(&g.biases[l])
            .and(&mut s.m.biases[l])
            .and(&mut s.v.biases[l])
            .for_each(|w, &g, m, v| update(w, g, m, v));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    /// Plain-loop evaluator used as an independent oracle.
    fn naive_forward(p: &MlpParams, x: &[f64]) -> f64 {
        let mut h = x.to_vec();
        let last = p.weights().len() - 1;
        for (l, (a, b)) in p.weights().iter().zip(p.biases()).enumerate() {
            let mut z = vec![0.0; a.nrows()];
            for i in 0..a.nrows() {
                let mut s = b[i];
                for j in 0..a.ncols() {
                    s += a[[i, j]] * h[j];
                }
                z[i] = if l < last { s.tanh() } else { s };
            }
            h = z;
        }
        h[0]
    }

    fn random_points(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut r = RngStream::new(seed, 99);
        Array2::from_shape_simple_fn((n, d), || 2.0 * r.uniform() - 1.0)
    }

    fn randomize_biases(p: &mut MlpParams, seed: u64) {
        let mut r = RngStream::new(seed, 77);
        let mut flat = p.to_flat();
        flat.iter_mut().for_each(|v| *v += 0.3 * (2.0 * r.uniform() - 1.0));
        p.set_flat(&flat).unwrap();
    }

    #[test]
    fn init_shapes_and_zero_biases() {
        let p = mlp_init(&[2, 64, 64, 64, 64, 1], 7).unwrap();
        assert_eq!(p.weights().len(), 5);
        assert!(p.biases().iter().all(|b| b.iter().all(|&v| v == 0.0)));
        assert_eq!(p.weights()[0].dim(), (64, 2));
        assert_eq!(p.weights()[4].dim(), (1, 64));
        assert_eq!(p, mlp_init(&[2, 64, 64, 64, 64, 1], 7).unwrap());
        assert_ne!(p, mlp_init(&[2, 64, 64, 64, 64, 1], 8).unwrap());
    }

    #[test]
    fn init_rejects_bad_shapes() {
        assert!(mlp_init(&[], 0).is_err());
        assert!(mlp_init(&[2], 0).is_err());
        assert!(mlp_init(&[2, 0, 1], 0).is_err());
        assert!(mlp_init(&[2, 4, 2], 0).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut p = mlp_init(&[3, 5, 1], 1).unwrap();
        p.set_flat(&vec![0.0; p.n_params()]).unwrap();
        assert_eq!(p.forward(&[0.3, -1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn single_affine_layer() {
        let p = MlpParams::from_parts(vec![2, 1], vec![array![[1.0, 1.0]]], vec![array![0.5]])
            .unwrap();
        assert_eq!(p.forward(&[1.0, 2.0]).unwrap(), 3.5);
    }

    #[test]
    fn forward_matches_naive_loop() {
        let mut p = mlp_init(&[2, 7, 5, 1], 3).unwrap();
        randomize_biases(&mut p, 3);
        let xs = random_points(50, 2, 4);
        for x in xs.rows() {
            let x = x.to_vec();
            assert!((p.forward(&x).unwrap() - naive_forward(&p, &x)).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = mlp_init(&[2, 4, 1], 0).unwrap();
        assert!(p.forward(&[1.0]).is_err());
        assert!(p.forward_batch(Array2::zeros((3, 3)).view()).is_err());
        let xs = random_points(3, 2, 0);
        assert!(p.backward(xs.view(), &[1.0]).is_err());
    }

    #[test]
    fn batch_forward_edge_sizes() {
        let p = mlp_init(&[3, 8, 8, 1], 5).unwrap();
        let xs = random_points(256, 3, 6);
        let batch = p.forward_batch(xs.view()).unwrap();
        for (x, y) in xs.rows().into_iter().zip(batch.iter()) {
            assert!((p.forward(&x.to_vec()).unwrap() - y).abs() < 1e-12);
        }
        let one = p.forward_batch(xs.slice(ndarray::s![0..1, ..])).unwrap();
        assert_eq!(one.len(), 1);
        assert!((one[0] - batch[0]).abs() < 1e-12);
        assert_eq!(p.forward_batch(Array2::zeros((0, 3)).view()).unwrap().len(), 0);
    }

    #[test]
    fn backward_of_zero_upstream_is_zero() {
        let p = mlp_init(&[2, 6, 1], 2).unwrap();
        let xs = random_points(10, 2, 1);
        let g = p.backward(xs.view(), &[0.0; 10]).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
    }

    fn check_against_fd(p: &MlpParams, xs: &Array2<f64>, upstream: &[f64]) {
        let g = p.backward(xs.view(), upstream).unwrap().to_flat();
        let objective = |q: &MlpParams| -> f64 {
            xs.rows()
                .into_iter()
                .zip(upstream)
                .map(|(x, u)| u * q.forward(&x.to_vec()).unwrap())
                .sum()
        };
        let base = p.to_flat();
        let h = 1e-5;
        let mut q = p.clone();
        for k in 0..base.len() {
            let mut plus = base.clone();
            plus[k] += h;
            q.set_flat(&plus).unwrap();
            let fp = objective(&q);
            let mut minus = base.clone();
            minus[k] -= h;
            q.set_flat(&minus).unwrap();
            let fm = objective(&q);
            let fd = (fp - fm) / (2.0 * h);
            let tol = (1e-5 * g[k].abs()).max(1e-8);
            assert!((fd - g[k]).abs() <= tol, "coordinate {k}: fd {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn backward_matches_finite_differences_single_point() {
        let mut p = mlp_init(&[2, 5, 4, 1], 11).unwrap();
        randomize_biases(&mut p, 11);
        let xs = random_points(1, 2, 12);
        check_against_fd(&p, &xs, &[1.0]);
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let p = mlp_init(&[3, 6, 6, 1], 13).unwrap();
        let xs = random_points(20, 3, 14);
        let up: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let scaled: Vec<f64> = up.iter().map(|u| -2.5 * u).collect();
        let g1 = p.backward(xs.view(), &up).unwrap().to_flat();
        let g2 = p.backward(xs.view(), &scaled).unwrap().to_flat();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((-2.5 * a - b).abs() < 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut p = mlp_init(&[2, 4, 1], 1).unwrap();
        let before = p.clone();
        let mut s = AdamState::new(&p, LrSchedule::constant(1e-3));
        let z = GradBuffer::zeros_like(&p);
        adam_step(&mut p, &z, &mut s).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adam_first_step_by_hand() {
        // m_hat = g, v_hat = g^2 after bias correction, so the step is
        // lr * g / (|g| + 1e-8).
        let mut p =
            MlpParams::from_parts(vec![1, 1], vec![array![[0.0]]], vec![array![0.0]]).unwrap();
        let mut g = GradBuffer::zeros_like(&p);
        g.weights[0][[0, 0]] = 1.0;
        let mut s = AdamState::new(&p, LrSchedule::constant(0.1));
        adam_step(&mut p, &g, &mut s).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.weights()[0][[0, 0]] - expected).abs() < 1e-15);
        assert_eq!(p.biases()[0][0], 0.0);
    }

    #[test]
    fn adam_is_deterministic_and_rejects_nan() {
        let p0 = mlp_init(&[2, 3, 1], 4).unwrap();
        let xs = random_points(5, 2, 5);
        let g = p0.backward(xs.view(), &[1.0; 5]).unwrap();
        let (mut a, mut b) = (p0.clone(), p0.clone());
        let mut sa = AdamState::new(&p0, LrSchedule::constant(1e-2));
        let mut sb = sa.clone();
        adam_step(&mut a, &g, &mut sa).unwrap();
        adam_step(&mut b, &g, &mut sb).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);

        let mut bad = g.clone();
        bad.biases[0][0] = f64::NAN;
        let snapshot = a.clone();
        assert!(matches!(
            adam_step(&mut a, &bad, &mut sa),
            Err(Error::TrainingDivergence { .. })
        ));
        assert_eq!(a, snapshot);
    }

    #[test]
    fn step_decay_schedule() {
        let s = LrSchedule {
            base: 1e-3,
            decay_factor: 0.5,
            decay_every: 2000,
        };
        assert_eq!(s.at(0), 1e-3);
        assert_eq!(s.at(1999), 1e-3);
        assert_eq!(s.at(2000), 5e-4);
        assert_eq!(s.at(4500), 2.5e-4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn gradients_match_finite_differences(
            d in 1usize..4,
            widths in proptest::collection::vec(1usize..=16, 1..4),
            n in 1usize..5,
            seed in 0u64..1000,
        ) {
            let mut sizes = vec![d];
            sizes.extend(widths);
            sizes.push(1);
            let mut p = mlp_init(&sizes, seed).unwrap();
            randomize_biases(&mut p, seed);
            let xs = random_points(n, d, seed + 1);
            let up: Vec<f64> = (0..n).map(|i| 1.0 - 0.4 * i as f64).collect();
            check_against_fd(&p, &xs, &up);
        }

        #[test]
        fn output_bounded_by_last_layer(seed in 0u64..1000, x0 in -5.0f64..5.0, x1 in -5.0f64..5.0) {
            let mut p = mlp_init(&[2, 9, 9, 1], seed).unwrap();
            randomize_biases(&mut p, seed);
            let last = p.weights().len() - 1;
            let bound = p.weights()[last].iter().map(|w| w.abs()).sum::<f64>()
                + p.biases()[last][0].abs();
            prop_assert!(p.forward(&[x0, x1]).unwrap().abs() <= bound + 1e-12);
        }
    }
}
