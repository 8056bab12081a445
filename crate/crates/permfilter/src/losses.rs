//! Loss functions observed by the filter, one per time step.
//!
//! Four families: linear (exact weight algebra), quadratic (closed-form
//! convergence checks), binary logistic regression, and a small dense
//! network with hand-written backpropagation. All gradients are exact;
//! [`finite_diff_grad`] is the independent check.

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix { rows: rows.len(), cols, data }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// One observation `L_t`: an evaluable, differentiable loss over parameter
/// vectors of a fixed dimension.
pub trait LossTask: Send + Sync {
    fn dim(&self) -> usize;
    fn evaluate(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;

    /// Loss and gradient in one pass. Families where the two share work
    /// (the network loss) override this.
    fn eval_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        (self.evaluate(x), self.gradient(x))
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// `L(x) = g^T x + b`. The gradient is the constant `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLoss {
    pub g: Vec<f64>,
    pub b: f64,
}

impl LinearLoss {
    pub fn new(g: Vec<f64>, b: f64) -> Self {
        LinearLoss { g, b }
    }

    pub fn eval_grad_checked(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_dim(self.g.len(), x.len())?;
        Ok(self.eval_grad(x))
    }
}

impl LossTask for LinearLoss {
    fn dim(&self) -> usize {
        self.g.len()
    }

    fn evaluate(&self, x: &[f64]) -> f64 {
        self.g.iter().zip(x).map(|(g, x)| g * x).sum::<f64>() + self.b
    }

    fn gradient(&self, _x: &[f64]) -> Vec<f64> {
        self.g.clone()
    }
}

/// `L(x) = 1/2 * sum_j a_j (x_j - c_j)^2`; minimizer at `c` with `L(c) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticLoss {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl QuadraticLoss {
    pub fn new(center: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        check_dim(center.len(), scale.len())?;
        if scale.iter().any(|&a| a <= 0.0) {
            return Err(Error::InvalidInput("quadratic scale must be positive".into()));
        }
        Ok(QuadraticLoss { center, scale })
    }

    /// Isotropic unit-curvature bowl centered at `c`.
    pub fn isotropic(center: Vec<f64>) -> Self {
        let scale = vec![1.0; center.len()];
        QuadraticLoss { center, scale }
    }
}

impl LossTask for QuadraticLoss {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn evaluate(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.center.len() {
            let d = x[j] - self.center[j];
            acc += self.scale[j] * d * d;
        }
        0.5 * acc
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        (0..self.center.len())
            .map(|j| self.scale[j] * (x[j] - self.center[j]))
            .collect()
    }
}

/// `ln(1 + e^z)` without overflow for large `|z|`.
fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else if z < -30.0 {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary logistic loss over a minibatch for a linear model.
///
/// Labels are in `{-1, +1}`; the parameter vector is the weight vector with
/// the bias as its final coordinate, so `dim = features + 1`.
#[derive(Debug, Clone)]
pub struct LogisticLoss {
    pub inputs: Matrix,
    pub labels: Vec<i8>,
}

impl LogisticLoss {
    pub fn new(inputs: Matrix, labels: Vec<i8>) -> Result<Self> {
        if inputs.rows == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        check_dim(inputs.rows, labels.len())?;
        if labels.iter().any(|&y| y != 1 && y != -1) {
            return Err(Error::InvalidInput("logistic labels must be +/-1".into()));
        }
        Ok(LogisticLoss { inputs, labels })
    }
}

impl LossTask for LogisticLoss {
    fn dim(&self) -> usize {
        self.inputs.cols + 1
    }

    fn evaluate(&self, w: &[f64]) -> f64 {
        self.eval_grad(w).0
    }

    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        self.eval_grad(w).1
    }

    fn eval_grad(&self, w: &[f64]) -> (f64, Vec<f64>) {
        assert_eq!(w.len(), self.dim(), "parameter length mismatch");
        let n = self.inputs.rows;
        let d = self.inputs.cols;
        let bias = w[d];
        let mut loss = 0.0;
        let mut grad = vec![0.0; d + 1];
        for i in 0..n {
            let x = self.inputs.row(i);
            let y = f64::from(self.labels[i]);
            let margin = y * (x.iter().zip(&w[..d]).map(|(x, w)| x * w).sum::<f64>() + bias);
            loss += softplus(-margin);
            // d/dw ln(1+e^{-m}) = -y * sigmoid(-m) * x~
            let coef = -y * sigmoid(-margin);
            for j in 0..d {
                grad[j] += coef * x[j];
            }
            grad[d] += coef;
        }
        let inv = 1.0 / n as f64;
        for g in &mut grad {
            *g *= inv;
        }
        (loss * inv, grad)
    }
}

/// Fully-connected architecture: layer sizes from input to output, rectifier
/// hidden activations, softmax cross-entropy at the head.
///
/// The flat parameter vector is layer-major: for each layer, the `out x in`
/// weight matrix (row-major) followed by the `out` biases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub layers: Vec<usize>,
}

impl MlpSpec {
    pub fn new(layers: Vec<usize>) -> Result<Self> {
        if layers.len() < 2 || layers.iter().any(|&n| n == 0) {
            return Err(Error::InvalidConfig("need at least input and output layer, all nonzero".into()));
        }
        Ok(MlpSpec { layers })
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn n_classes(&self) -> usize {
        *self.layers.last().unwrap()
    }

    /// Seeded He-style initialization of a flat parameter vector.
    pub fn init_params<R: rand::Rng>(&self, rng: &mut R) -> Vec<f64> {
        use rand_distr::{Distribution, Normal};
        let mut params = Vec::with_capacity(self.param_count());
        for w in self.layers.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let std = (2.0 / n_in as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            for _ in 0..n_in * n_out {
                params.push(normal.sample(rng));
            }
            params.extend(std::iter::repeat(0.0).take(n_out));
        }
        params
    }

    /// Forward pass for a whole input matrix; returns per-row logits.
    pub fn logits(&self, params: &[f64], inputs: &Matrix) -> Matrix {
        assert_eq!(params.len(), self.param_count());
        assert_eq!(inputs.cols, self.layers[0]);
        let mut act = inputs.clone();
        let mut offset = 0;
        let n_layers = self.layers.len() - 1;
        for (l, w) in self.layers.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &params[offset..offset + n_in * n_out];
            let bias = &params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let mut next = Matrix::zeros(act.rows, n_out);
            matmul_bt(&act, weights, n_in, n_out, &mut next);
            for i in 0..next.rows {
                let row = next.row_mut(i);
                for (z, b) in row.iter_mut().zip(bias) {
                    *z += b;
                }
                if l + 1 < n_layers {
                    for z in row.iter_mut() {
                        if *z < 0.0 {
                            *z = 0.0;
                        }
                    }
                }
            }
            act = next;
        }
        act
    }

    /// Argmax class predictions for each input row.
    pub fn predict(&self, params: &[f64], inputs: &Matrix) -> Vec<usize> {
        let logits = self.logits(params, inputs);
        (0..logits.rows)
            .map(|i| {
                let row = logits.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Fraction of rows whose argmax prediction matches the label.
    pub fn accuracy(&self, params: &[f64], inputs: &Matrix, labels: &[usize]) -> f64 {
        let preds = self.predict(params, inputs);
        let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
        hits as f64 / labels.len().max(1) as f64
    }
}

/// `out[i][o] += sum_k act[i][k] * w[o][k]` with `w` row-major `n_out x n_in`.
fn matmul_bt(act: &Matrix, w: &[f64], n_in: usize, n_out: usize, out: &mut Matrix) {
    debug_assert_eq!(act.cols, n_in);
    debug_assert_eq!(out.cols, n_out);
    for i in 0..act.rows {
        let a = act.row(i);
        let o = out.row_mut(i);
        for (j, oj) in o.iter_mut().enumerate() {
            let wr = &w[j * n_in..(j + 1) * n_in];
            let mut acc = 0.0;
            for k in 0..n_in {
                acc += a[k] * wr[k];
            }
            *oj = acc;
        }
    }
}

/// Mean softmax cross-entropy over a minibatch through a fixed [`MlpSpec`].
#[derive(Debug, Clone)]
pub struct MlpLoss {
    pub spec: MlpSpec,
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl MlpLoss {
    pub fn new(spec: MlpSpec, inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        check_dim(inputs.rows, labels.len())?;
        check_dim(spec.layers[0], inputs.cols)?;
        let n_classes = spec.n_classes();
        if labels.iter().any(|&y| y >= n_classes) {
            return Err(Error::InvalidInput(format!("label out of range for {n_classes} classes")));
        }
        Ok(MlpLoss { spec, inputs, labels })
    }
}

impl LossTask for MlpLoss {
    fn dim(&self) -> usize {
        self.spec.param_count()
    }

    fn evaluate(&self, params: &[f64]) -> f64 {
        let logits = self.spec.logits(params, &self.inputs);
        let mut loss = 0.0;
        for i in 0..logits.rows {
            loss += log_softmax_nll(logits.row(i), self.labels[i]);
        }
        loss / logits.rows as f64
    }

    fn gradient(&self, params: &[f64]) -> Vec<f64> {
        self.eval_grad(params).1
    }

    fn eval_grad(&self, params: &[f64]) -> (f64, Vec<f64>) {
        assert_eq!(params.len(), self.dim(), "parameter length mismatch");
        let spec = &self.spec;
        let n = self.inputs.rows;
        let n_layers = spec.layers.len() - 1;

        // Forward, keeping post-activation outputs of every layer.
        let mut acts: Vec<Matrix> = Vec::with_capacity(n_layers + 1);
        acts.push(self.inputs.clone());
        let mut offset = 0;
        let mut offsets = Vec::with_capacity(n_layers);
        for (l, w) in spec.layers.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            offsets.push(offset);
            let weights = &params[offset..offset + n_in * n_out];
            let bias = &params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let mut next = Matrix::zeros(n, n_out);
            matmul_bt(acts.last().unwrap(), weights, n_in, n_out, &mut next);
            for i in 0..n {
                let row = next.row_mut(i);
                for (z, b) in row.iter_mut().zip(bias) {
                    *z += b;
                }
                if l + 1 < n_layers {
                    for z in row.iter_mut() {
                        if *z < 0.0 {
                            *z = 0.0;
                        }
                    }
                }
            }
            acts.push(next);
        }

        // Output delta: (softmax - onehot) / batch.
        let logits = acts.last().unwrap();
        let n_classes = spec.n_classes();
        let mut loss = 0.0;
        let mut delta = Matrix::zeros(n, n_classes);
        let inv_n = 1.0 / n as f64;
        for i in 0..n {
            let row = logits.row(i);
            loss += log_softmax_nll(row, self.labels[i]);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|&z| (z - max).exp()).sum();
            let d = delta.row_mut(i);
            for j in 0..n_classes {
                d[j] = (row[j] - max).exp() / denom * inv_n;
            }
            d[self.labels[i]] -= inv_n;
        }
        loss *= inv_n;

        // Backward through each layer.
        let mut grad = vec![0.0; params.len()];
        for l in (0..n_layers).rev() {
            let n_in = spec.layers[l];
            let n_out = spec.layers[l + 1];
            let off = offsets[l];
            let prev = &acts[l];
            // dW[o][k] = sum_i delta[i][o] * prev[i][k]; db[o] = sum_i delta[i][o]
            {
                let (gw, gb) = grad[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for i in 0..n {
                    let d = delta.row(i);
                    let a = prev.row(i);
                    for o in 0..n_out {
                        let di = d[o];
                        if di != 0.0 {
                            let gr = &mut gw[o * n_in..(o + 1) * n_in];
                            for k in 0..n_in {
                                gr[k] += di * a[k];
                            }
                            gb[o] += di;
                        }
                    }
                }
            }
            if l > 0 {
                // delta_prev = (delta . W) masked by the rectifier.
                let weights = &params[off..off + n_in * n_out];
                let mut prev_delta = Matrix::zeros(n, n_in);
                for i in 0..n {
                    let d = delta.row(i);
                    let pd = prev_delta.row_mut(i);
                    for o in 0..n_out {
                        let di = d[o];
                        if di != 0.0 {
                            let wr = &weights[o * n_in..(o + 1) * n_in];
                            for k in 0..n_in {
                                pd[k] += di * wr[k];
                            }
                        }
                    }
                    let a = prev.row(i);
                    for k in 0..n_in {
                        if a[k] <= 0.0 {
                            pd[k] = 0.0;
                        }
                    }
                }
                delta = prev_delta;
            }
        }
        (loss, grad)
    }
}

/// `-log softmax(logits)[label]`, stabilized by max subtraction.
fn log_softmax_nll(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    lse - logits[label]
}

/// Central-difference gradient: `(L(x + h e_j) - L(x - h e_j)) / 2h`.
pub fn finite_diff_grad(loss: &dyn LossTask, x: &[f64], h: f64) -> Result<Vec<f64>> {
    if h <= 0.0 {
        return Err(Error::InvalidInput("finite-difference step must be positive".into()));
    }
    let mut xp = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for j in 0..x.len() {
        let orig = xp[j];
        xp[j] = orig + h;
        let fp = loss.evaluate(&xp);
        xp[j] = orig - h;
        let fm = loss.evaluate(&xp);
        xp[j] = orig;
        grad[j] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn linear_eval_grad() {
        let loss = LinearLoss::new(vec![1.0, -2.0], 3.0);
        let (v, g) = loss.eval_grad(&[2.0, 1.0]);
        assert_eq!(v, 3.0);
        assert_eq!(g, vec![1.0, -2.0]);

        let zero = LinearLoss::new(vec![0.0, 0.0], -4.0);
        assert_eq!(zero.evaluate(&[9.0, -9.0]), -4.0);

        let half = LinearLoss::new(vec![0.5, 0.5], -1.0);
        let (v, g) = half.eval_grad(&[2.0, 2.0]);
        assert_relative_eq!(v, 1.0);
        assert_eq!(g, vec![0.5, 0.5]);
    }

    #[test]
    fn linear_dim_mismatch() {
        let loss = LinearLoss::new(vec![1.0, 2.0], 0.0);
        assert!(loss.eval_grad_checked(&[1.0]).is_err());
    }

    #[test]
    fn quadratic_eval_grad() {
        let loss = QuadraticLoss::new(vec![0.0], vec![1.0]).unwrap();
        let (v, g) = loss.eval_grad(&[2.0]);
        assert_relative_eq!(v, 2.0);
        assert_relative_eq!(g[0], 2.0);

        assert_eq!(loss.evaluate(&[0.0]), 0.0);
        assert_eq!(loss.gradient(&[0.0]), vec![0.0]);

        let loss = QuadraticLoss::new(vec![1.0, 1.0], vec![2.0, 1.0]).unwrap();
        let (v, g) = loss.eval_grad(&[2.0, 3.0]);
        assert_relative_eq!(v, 3.0);
        assert_eq!(g, vec![2.0, 2.0]);
    }

    #[test]
    fn quadratic_rejects_nonpositive_scale() {
        assert!(QuadraticLoss::new(vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn logistic_zero_weights_gives_ln2() {
        let inputs = Matrix::from_rows(&[vec![0.3, -2.0], vec![5.0, 1.0]]);
        let loss = LogisticLoss::new(inputs, vec![1, -1]).unwrap();
        assert_relative_eq!(loss.evaluate(&[0.0, 0.0, 0.0]), 2.0_f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn logistic_margin_limit() {
        // single sample x=(1), y=+1, w=(1,0) -> ln(1+e^{-1})
        let inputs = Matrix::from_rows(&[vec![1.0]]);
        let loss = LogisticLoss::new(inputs, vec![1]).unwrap();
        assert_relative_eq!(loss.evaluate(&[1.0, 0.0]), (1.0 + (-1.0_f64).exp()).ln(), epsilon = 1e-12);
        // large margin drives the loss to zero
        assert!(loss.evaluate(&[50.0, 0.0]) < 1e-20);
    }

    #[test]
    fn logistic_rejects_empty_batch_and_bad_labels() {
        assert!(LogisticLoss::new(Matrix::zeros(0, 2), vec![]).is_err());
        let inputs = Matrix::from_rows(&[vec![1.0]]);
        assert!(LogisticLoss::new(inputs, vec![0]).is_err());
    }

    #[test]
    fn mlp_all_zero_params_gives_ln_c() {
        let spec = MlpSpec::new(vec![4, 8, 3]).unwrap();
        let inputs = Matrix::from_rows(&[vec![0.1, 0.2, 0.3, 0.4], vec![1.0, 0.0, 1.0, 0.0]]);
        let loss = MlpLoss::new(spec.clone(), inputs, vec![0, 2]).unwrap();
        let params = vec![0.0; spec.param_count()];
        assert_relative_eq!(loss.evaluate(&params), 3.0_f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn mlp_batch_duplication_invariance() {
        let spec = MlpSpec::new(vec![3, 5, 2]).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let params = spec.init_params(&mut rng);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let row: Vec<f64> = (0..3).map(|_| normal.sample(&mut rng)).collect();
        let single = MlpLoss::new(spec.clone(), Matrix::from_rows(&[row.clone()]), vec![1]).unwrap();
        let doubled =
            MlpLoss::new(spec.clone(), Matrix::from_rows(&[row.clone(), row]), vec![1, 1]).unwrap();
        let (l1, g1) = single.eval_grad(&params);
        let (l2, g2) = doubled.eval_grad(&params);
        assert_relative_eq!(l1, l2, epsilon = 1e-15);
        for (a, b) in g1.iter().zip(&g2) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn mlp_deterministic() {
        let spec = MlpSpec::new(vec![3, 4, 2]).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let params = spec.init_params(&mut rng);
        let inputs = Matrix::from_rows(&[vec![0.5, -0.25, 1.5]]);
        let loss = MlpLoss::new(spec, inputs, vec![0]).unwrap();
        let a = loss.eval_grad(&params);
        let b = loss.eval_grad(&params);
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn mlp_rejects_out_of_range_label() {
        let spec = MlpSpec::new(vec![2, 2]).unwrap();
        let inputs = Matrix::from_rows(&[vec![1.0, 1.0]]);
        assert!(MlpLoss::new(spec, inputs, vec![2]).is_err());
    }

    #[test]
    fn finite_diff_recovers_linear_exactly() {
        let loss = LinearLoss::new(vec![2.0, -0.5, 7.0], 1.0);
        let g = finite_diff_grad(&loss, &[0.3, 0.4, -0.1], 0.1).unwrap();
        for (a, b) in g.iter().zip(&loss.g) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn finite_diff_quadratic() {
        let loss = QuadraticLoss::new(vec![0.0], vec![1.0]).unwrap();
        let g = finite_diff_grad(&loss, &[1.0], 1e-4).unwrap();
        assert_relative_eq!(g[0], 1.0, epsilon = 1e-8);
    }

    #[test]
    fn finite_diff_rejects_bad_step() {
        let loss = LinearLoss::new(vec![1.0], 0.0);
        assert!(finite_diff_grad(&loss, &[0.0], 0.0).is_err());
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let spec = MlpSpec::new(vec![4, 6, 3]).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let normal = Normal::new(0.0, 1.0).unwrap();
        for _ in 0..5 {
            let params = spec.init_params(&mut rng);
            let rows: Vec<Vec<f64>> =
                (0..3).map(|_| (0..4).map(|_| normal.sample(&mut rng)).collect()).collect();
            let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..3)).collect();
            let loss = MlpLoss::new(spec.clone(), Matrix::from_rows(&rows), labels).unwrap();
            let (_, analytic) = loss.eval_grad(&params);
            let numeric = finite_diff_grad(&loss, &params, 1e-5).unwrap();
            for (a, n) in analytic.iter().zip(&numeric) {
                let rel = (a - n).abs() / (a.abs() + 1e-8);
                assert!(rel < 1e-5, "rel err {rel} (analytic {a}, numeric {n})");
            }
        }
    }
}
