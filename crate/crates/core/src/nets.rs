//! Network building blocks: MLPs, diagonal-Gaussian weight blocks, stochastic
//! bottlenecks and closed-form KL divergences to the standard normal.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Initial pre-softplus scale of variational weights; softplus(-3) ≈ 0.049.
pub const RHO_INIT: f64 = -3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

/// Fully connected network.
///
/// The first layer may take several input blocks (for instance `[z, y]`);
/// each block gets its own weight matrix, which is equivalent to a single
/// matrix over the concatenated input. A block with a single row is
/// broadcast against blocks with more rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub inputs: Vec<usize>,
    pub widths: Vec<usize>,
    /// One activation per layer; the last entry is the output head's.
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    /// ReLU hidden layers and a linear output head.
    pub fn relu(inputs: Vec<usize>, widths: Vec<usize>) -> Self {
        let mut activations = vec![Activation::Relu; widths.len()];
        if let Some(last) = activations.last_mut() {
            *last = Activation::Identity;
        }
        MlpSpec {
            inputs,
            widths,
            activations,
        }
    }

    /// Every layer, the output included, followed by ReLU.
    pub fn relu_all(inputs: Vec<usize>, widths: Vec<usize>) -> Self {
        let activations = vec![Activation::Relu; widths.len()];
        MlpSpec {
            inputs,
            widths,
            activations,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.inputs.is_empty() {
            return Err(Error::invalid("an MLP needs at least one input block and one layer"));
        }
        if self.widths.iter().chain(&self.inputs).any(|&w| w == 0) {
            return Err(Error::invalid("MLP widths must be positive"));
        }
        if self.activations.len() != self.widths.len() {
            return Err(Error::invalid("one activation per layer is required"));
        }
        Ok(())
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated spec")
    }

    /// Shapes of all weight tensors in storage order: for each layer, one
    /// matrix per input block followed by the bias row.
    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::new();
        let mut fan_in: Vec<usize> = self.inputs.clone();
        for &w in &self.widths {
            for &f in &fan_in {
                shapes.push((f, w));
            }
            shapes.push((1, w));
            fan_in = vec![w];
        }
        shapes
    }

    pub fn num_params(&self) -> usize {
        self.param_shapes().iter().map(|(r, c)| r * c).sum()
    }

    /// Fan-in scaled uniform initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init(&self, rng: &mut impl Rng) -> Vec<Tensor> {
        let mut out = Vec::new();
        let mut fan_in: Vec<usize> = self.inputs.clone();
        for &w in &self.widths {
            let total: usize = fan_in.iter().sum();
            let bound = 1.0 / (total as f64).sqrt();
            for &f in fan_in.iter().chain(std::iter::once(&1)) {
                let data = (0..f * w).map(|_| rng.random_range(-bound..bound)).collect();
                out.push(Tensor::matrix(f, w, data).expect("positive shape"));
            }
            fan_in = vec![w];
        }
        out
    }
}

fn activate(g: &mut Graph, a: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Identity => Ok(a),
        Activation::Relu => g.relu(a),
        Activation::Tanh => g.tanh(a),
    }
}

/// Forward pass of `spec` with `weights` (in [`MlpSpec::param_shapes`] order).
pub fn mlp_forward(g: &mut Graph, spec: &MlpSpec, weights: &[Var], inputs: &[Var]) -> Result<Var> {
    if inputs.len() != spec.inputs.len() {
        return Err(Error::shape(
            "mlp_forward",
            format!("{} input blocks for a spec with {}", inputs.len(), spec.inputs.len()),
        ));
    }
    let shapes = spec.param_shapes();
    if weights.len() != shapes.len() {
        return Err(Error::shape(
            "mlp_forward",
            format!("{} weight tensors, expected {}", weights.len(), shapes.len()),
        ));
    }
    for (&x, &w) in inputs.iter().zip(&spec.inputs) {
        if g.value(x).cols() != w {
            return Err(Error::shape(
                "mlp_forward",
                format!("input block has width {}, expected {w}", g.value(x).cols()),
            ));
        }
    }
    let mut cursor = 0;
    let mut current: Vec<Var> = inputs.to_vec();
    for (layer, &act) in spec.activations.iter().enumerate() {
        let rows = current.iter().map(|&x| g.value(x).rows()).max().unwrap_or(1);
        let mut acc: Option<Var> = None;
        for &x in &current {
            let mut term = g.matmul(x, weights[cursor])?;
            cursor += 1;
            let r = g.value(term).rows();
            if r != rows {
                if r != 1 {
                    return Err(Error::shape(
                        "mlp_forward",
                        format!("layer {layer}: cannot broadcast {r} rows to {rows}"),
                    ));
                }
                term = g.broadcast_rows(term, rows)?;
            }
            acc = Some(match acc {
                Some(a) => g.add(a, term)?,
                None => term,
            });
        }
        let pre = g.add_row(acc.expect("at least one input"), weights[cursor])?;
        cursor += 1;
        current = vec![activate(g, pre, act)?];
    }
    Ok(current[0])
}

/// Diagonal Gaussian over a block of weights, `N(mu, softplus(rho)^2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalWeights {
    pub mu: Vec<Tensor>,
    pub rho: Vec<Tensor>,
}

impl VariationalWeights {
    pub fn new(mu: Vec<Tensor>, rho: Vec<Tensor>) -> Result<Self> {
        if mu.len() != rho.len() || mu.iter().zip(&rho).any(|(m, r)| m.shape() != r.shape()) {
            return Err(Error::shape("variational_weights", "mu and rho must have the same layout"));
        }
        Ok(VariationalWeights { mu, rho })
    }

    /// Means from `mu` with every scale set to `softplus(rho_init)`.
    pub fn with_rho(mu: Vec<Tensor>, rho_init: f64) -> Self {
        let rho = mu.iter().map(|m| m.map(|_| rho_init)).collect();
        VariationalWeights { mu, rho }
    }

    pub fn sigma(&self) -> Vec<Tensor> {
        self.rho.iter().map(|r| r.map(softplus)).collect()
    }

    pub fn len(&self) -> usize {
        self.mu.iter().map(Tensor::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Reparameterized sample `mu + softplus(rho) * eps`, differentiable in
/// `mu` and `rho`.
pub fn sample_weights(g: &mut Graph, mu: &[Var], rho: &[Var], eps: &[Tensor]) -> Result<Vec<Var>> {
    if mu.len() != rho.len() || mu.len() != eps.len() {
        return Err(Error::shape("sample_weights", "mu, rho and eps block counts differ"));
    }
    mu.iter()
        .zip(rho)
        .zip(eps)
        .map(|((&m, &r), e)| {
            if g.value(m).shape() != e.shape() {
                return Err(Error::shape(
                    "sample_weights",
                    format!("noise shape {:?} vs weight shape {:?}", e.shape(), g.value(m).shape()),
                ));
            }
            let sigma = g.softplus(r)?;
            let ev = g.constant(e.clone())?;
            let noise = g.mul(sigma, ev)?;
            g.add(m, noise)
        })
        .collect()
}

/// `sum_i ½(mu_i² + sigma_i² − log sigma_i² − 1)`, the KL divergence of
/// `N(mu, diag sigma²)` from `N(0, I)`.
pub fn kl_diag_gaussian_to_std(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::shape("kl_diag_gaussian_to_std", "mu and sigma lengths differ"));
    }
    let mut kl = 0.0;
    for (&m, &s) in mu.iter().zip(sigma) {
        if !(s > 0.0) {
            return Err(Error::invalid(format!("standard deviation must be positive, got {s}")));
        }
        kl += 0.5 * (m * m + s * s - (s * s).ln() - 1.0);
    }
    Ok(kl)
}

/// Graph version of [`kl_diag_gaussian_to_std`] with `sigma = softplus(rho)`.
pub fn kl_to_std_normal(g: &mut Graph, mu: &[Var], rho: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (&m, &r) in mu.iter().zip(rho) {
        let sigma = g.softplus(r)?;
        let term = kl_elementwise(g, m, sigma)?;
        let s = g.sum(term)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => g.constant(Tensor::scalar(0.0)),
    }
}

/// Elementwise `½(mu² + sigma² − 2 log sigma − 1)`.
fn kl_elementwise(g: &mut Graph, mu: Var, sigma: Var) -> Result<Var> {
    let m2 = g.square(mu)?;
    let s2 = g.square(sigma)?;
    let log_s = g.log(sigma)?;
    let two_log = g.scale(log_s, 2.0)?;
    let a = g.add(m2, s2)?;
    let b = g.sub(a, two_log)?;
    let c = g.add_scalar(b, -1.0)?;
    g.scale(c, 0.5)
}

/// Graph nodes of a stochastic bottleneck `z = z_mu + z_sigma * eps`.
#[derive(Clone, Copy, Debug)]
pub struct BottleneckNodes {
    pub z_mu: Var,
    pub z_sigma: Var,
    pub z: Var,
    /// Per-example KL to `N(0, I)`, shape `[n, 1]`.
    pub kl: Var,
}

/// Numeric snapshot of a bottleneck draw.
#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckSample {
    pub z_mu: Tensor,
    pub z_sigma: Tensor,
    pub z: Tensor,
    pub eps: Tensor,
}

/// Encoder weights of a bottleneck: a trunk and two linear heads emitting
/// the mean and the pre-softplus scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BottleneckSpec {
    pub trunk: MlpSpec,
    pub mean_head: MlpSpec,
    pub scale_head: MlpSpec,
}

impl BottleneckSpec {
    pub fn new(input: usize, hidden: usize, dim: usize) -> Self {
        BottleneckSpec {
            trunk: MlpSpec::relu_all(vec![input], vec![hidden]),
            mean_head: MlpSpec::relu(vec![hidden], vec![dim]),
            scale_head: MlpSpec::relu(vec![hidden], vec![dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean_head.output_width()
    }
}

/// Encodes `x`, samples `z` by reparameterization with noise `eps` and
/// exposes the per-example KL of `q(z | x)` from the standard normal.
pub fn bottleneck_encode(
    g: &mut Graph,
    spec: &BottleneckSpec,
    trunk: &[Var],
    mean_head: &[Var],
    scale_head: &[Var],
    x: Var,
    eps: &Tensor,
) -> Result<BottleneckNodes> {
    let h = mlp_forward(g, &spec.trunk, trunk, &[x])?;
    let z_mu = mlp_forward(g, &spec.mean_head, mean_head, &[h])?;
    let rho = mlp_forward(g, &spec.scale_head, scale_head, &[h])?;
    let z_sigma = g.softplus(rho)?;
    if g.value(z_mu).shape() != eps.shape() {
        return Err(Error::shape(
            "bottleneck_encode",
            format!("noise {:?} vs code {:?}", eps.shape(), g.value(z_mu).shape()),
        ));
    }
    let e = g.constant(eps.clone())?;
    let noise = g.mul(z_sigma, e)?;
    let z = g.add(z_mu, noise)?;
    let kl_el = kl_elementwise(g, z_mu, z_sigma)?;
    let kl = g.row_sum(kl_el)?;
    Ok(BottleneckNodes { z_mu, z_sigma, z, kl })
}

impl BottleneckNodes {
    pub fn snapshot(&self, g: &Graph, eps: &Tensor) -> BottleneckSample {
        BottleneckSample {
            z_mu: g.value(self.z_mu).clone(),
            z_sigma: g.value(self.z_sigma).clone(),
            z: g.value(self.z).clone(),
            eps: eps.clone(),
        }
    }
}

/// Serialized weights: `{spec, theta_mu, rho, theta_tilde}` with every
/// array flattened in row-major layer order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightCheckpoint<S> {
    pub spec: S,
    pub theta_mu: Vec<f64>,
    pub rho: Vec<f64>,
    pub theta_tilde: Vec<f64>,
}

pub fn flatten(tensors: &[Tensor]) -> Vec<f64> {
    tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Splits `flat` into tensors of the given shapes, consuming all of it.
pub fn unflatten(flat: &[f64], shapes: &[(usize, usize)]) -> Result<Vec<Tensor>> {
    let needed: usize = shapes.iter().map(|(r, c)| r * c).sum();
    if needed != flat.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} values, layout needs {needed}",
            flat.len()
        )));
    }
    let mut out = Vec::with_capacity(shapes.len());
    let mut at = 0;
    for &(r, c) in shapes {
        out.push(Tensor::matrix(r, c, flat[at..at + r * c].to_vec())?);
        at += r * c;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn forward(spec: &MlpSpec, weights: &[Tensor], x: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let w: Vec<Var> = weights.iter().map(|t| g.param(t.clone()).unwrap()).collect();
        let xv = g.constant(x.clone()).unwrap();
        let out = mlp_forward(&mut g, spec, &w, &[xv]).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn identity_linear_layer_is_identity() {
        let spec = MlpSpec::relu(vec![3], vec![3]);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        let weights = vec![Tensor::matrix(3, 3, eye).unwrap(), Tensor::zeros(1, 3)];
        let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.0, 4.0, -1.0]).unwrap();
        assert_eq!(forward(&spec, &weights, &x), x);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let spec = MlpSpec::relu(vec![4], vec![6, 2]);
        let weights: Vec<Tensor> = spec.param_shapes().iter().map(|&(r, c)| Tensor::zeros(r, c)).collect();
        let x = Tensor::filled(3, 4, 1.7);
        assert!(forward(&spec, &weights, &x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_network_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = MlpSpec::relu(vec![5], vec![7, 6, 2]);
        let weights = spec.init(&mut rng);
        let x = Tensor::matrix(4, 5, rng::normals(&mut rng, 20)).unwrap();
        let got = forward(&spec, &weights, &x);

        let mut act: Vec<Vec<f64>> = (0..4).map(|r| (0..5).map(|c| x.get(r, c)).collect()).collect();
        for (layer, a) in spec.activations.iter().enumerate() {
            let (w, b) = (&weights[2 * layer], &weights[2 * layer + 1]);
            act = act
                .iter()
                .map(|row| {
                    (0..w.cols())
                        .map(|j| {
                            let s = b.get(0, j) + row.iter().enumerate().map(|(i, v)| v * w.get(i, j)).sum::<f64>();
                            match a {
                                Activation::Relu => s.max(0.0),
                                _ => s,
                            }
                        })
                        .collect()
                })
                .collect();
        }
        let oracle: Vec<f64> = act.concat();
        let diff = got.data().iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn split_inputs_equal_concatenated_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let split = MlpSpec::relu(vec![3, 2], vec![4, 1]);
        let whole = MlpSpec::relu(vec![5], vec![4, 1]);
        let w = split.init(&mut rng);
        // Stack the two first-layer blocks into one matrix.
        let mut stacked = w[0].data().to_vec();
        stacked.extend_from_slice(w[1].data());
        let mut whole_w = vec![Tensor::matrix(5, 4, stacked).unwrap()];
        whole_w.extend(w[2..].iter().cloned());

        let a = Tensor::matrix(2, 3, rng::normals(&mut rng, 6)).unwrap();
        let b = Tensor::matrix(2, 2, rng::normals(&mut rng, 4)).unwrap();
        let mut cat = Vec::new();
        for r in 0..2 {
            cat.extend((0..3).map(|c| a.get(r, c)));
            cat.extend((0..2).map(|c| b.get(r, c)));
        }
        let cat = Tensor::matrix(2, 5, cat).unwrap();

        let mut g = Graph::new();
        let wv: Vec<Var> = w.iter().map(|t| g.param(t.clone()).unwrap()).collect();
        let (av, bv) = (g.constant(a).unwrap(), g.constant(b).unwrap());
        let out = mlp_forward(&mut g, &split, &wv, &[av, bv]).unwrap();
        let expect = forward(&whole, &whole_w, &cat);
        assert!(g.value(out).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn input_width_mismatch_is_an_error() {
        let spec = MlpSpec::relu(vec![3], vec![2]);
        let mut g = Graph::new();
        let w: Vec<Var> = spec.param_shapes().iter().map(|&(r, c)| g.param(Tensor::zeros(r, c)).unwrap()).collect();
        let x = g.constant(Tensor::zeros(2, 4)).unwrap();
        assert!(matches!(mlp_forward(&mut g, &spec, &w, &[x]), Err(Error::Shape { .. })));
    }

    fn sample_values(vw: &VariationalWeights, eps: &[Tensor]) -> Vec<Tensor> {
        let mut g = Graph::new();
        let mu: Vec<Var> = vw.mu.iter().map(|t| g.param(t.clone()).unwrap()).collect();
        let rho: Vec<Var> = vw.rho.iter().map(|t| g.param(t.clone()).unwrap()).collect();
        sample_weights(&mut g, &mu, &rho, eps)
            .unwrap()
            .into_iter()
            .map(|v| g.value(v).clone())
            .collect()
    }

    #[test]
    fn zero_noise_returns_the_mean() {
        let vw = VariationalWeights::with_rho(vec![Tensor::row(vec![0.3, -1.2, 2.0]).unwrap()], RHO_INIT);
        let out = sample_values(&vw, &[Tensor::zeros(1, 3)]);
        assert_eq!(out[0], vw.mu[0]);
    }

    #[test]
    fn vanishing_scale_returns_the_mean() {
        let vw = VariationalWeights::with_rho(vec![Tensor::row(vec![0.3, -1.2, 2.0]).unwrap()], -20.0);
        let out = sample_values(&vw, &[Tensor::row(vec![3.0, -4.0, 2.5]).unwrap()]);
        assert!(out[0].max_abs_diff(&vw.mu[0]) < 1e-6);
    }

    #[test]
    fn sample_mean_concentrates_on_mu() {
        let mu = Tensor::row(vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let rho = Tensor::row(vec![-1.0, 0.0, 0.5, -3.0]).unwrap();
        let vw = VariationalWeights::new(vec![mu.clone()], vec![rho]).unwrap();
        let sigma = vw.sigma()[0].clone();
        let draws = 100_000usize;
        let mut rng = rng::stream(5, "weights");
        // Stack all draws in one tensor per coordinate pass.
        let eps = Tensor::matrix(draws, 4, rng::normals(&mut rng, 4 * draws)).unwrap();
        let mut g = Graph::new();
        let m = g.param(mu.clone()).unwrap();
        let r = g.param(vw.rho[0].clone()).unwrap();
        let mb = g.broadcast_rows(m, draws).unwrap();
        let rb = g.broadcast_rows(r, draws).unwrap();
        let theta = sample_weights(&mut g, &[mb], &[rb], &[eps]).unwrap()[0];
        let mean = {
            let s = g.sum_rows(theta).unwrap();
            g.value(s).map(|v| v / draws as f64)
        };
        for i in 0..4 {
            let tol = 4.0 * sigma.data()[i] / (draws as f64).sqrt();
            assert!((mean.data()[i] - mu.data()[i]).abs() < tol, "coordinate {i}");
        }
    }

    #[test]
    fn mean_gradient_of_linear_functional_is_identity() {
        let vw = VariationalWeights::with_rho(vec![Tensor::row(vec![0.1, 0.2, 0.3]).unwrap()], -1.0);
        let mut g = Graph::new();
        let mu = g.param(vw.mu[0].clone()).unwrap();
        let rho = g.param(vw.rho[0].clone()).unwrap();
        let eps = Tensor::row(vec![0.7, -1.1, 0.4]).unwrap();
        let theta = sample_weights(&mut g, &[mu], &[rho], &[eps]).unwrap()[0];
        let c = g.constant(Tensor::row(vec![2.0, -3.0, 5.0]).unwrap()).unwrap();
        let lin = g.mul(theta, c).unwrap();
        let s = g.sum(lin).unwrap();
        let d = g.grad(s, &[mu]).unwrap()[0];
        assert_eq!(g.value(d).data(), &[2.0, -3.0, 5.0]);
    }

    #[test]
    fn sample_length_mismatch_is_an_error() {
        let mut g = Graph::new();
        let mu = g.param(Tensor::zeros(1, 3)).unwrap();
        let rho = g.param(Tensor::zeros(1, 3)).unwrap();
        assert!(sample_weights(&mut g, &[mu], &[rho], &[Tensor::zeros(1, 2)]).is_err());
        assert!(sample_weights(&mut g, &[mu], &[rho], &[]).is_err());
    }

    #[test]
    fn kl_closed_form_values() {
        assert_eq!(kl_diag_gaussian_to_std(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!((kl_diag_gaussian_to_std(&[1.0], &[1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(kl_diag_gaussian_to_std(&[0.0], &[0.0]).is_err());
        assert!(kl_diag_gaussian_to_std(&[0.0], &[-1.0]).is_err());
        assert!(kl_diag_gaussian_to_std(&[0.0, 1.0], &[1.0]).is_err());
    }

    #[test]
    fn kl_matches_monte_carlo_estimate() {
        let mut rng = rng::stream(9, "kl");
        let d = 8;
        let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let sigma: Vec<f64> = (0..d).map(|_| rng.random_range(0.3..2.0)).collect();
        let exact = kl_diag_gaussian_to_std(&mu, &sigma).unwrap();
        // Monte-Carlo E_q[log q(x) - log r(x)] with standard errors.
        let draws = 1_000_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..draws {
            let mut lr = 0.0;
            for i in 0..d {
                let e: f64 = rng.sample(rand_distr::StandardNormal);
                let x = mu[i] + sigma[i] * e;
                // log q - log r; the 2π constants cancel.
                lr += -0.5 * e * e - sigma[i].ln() + 0.5 * x * x;
            }
            sum += lr;
            sum_sq += lr * lr;
        }
        let n = draws as f64;
        let mean = sum / n;
        let se = ((sum_sq / n - mean * mean) / n).sqrt();
        assert!((mean - exact).abs() < 3.0 * se, "mc {mean} ± {se} vs exact {exact}");
    }

    #[test]
    fn graph_kl_matches_numeric_kl() {
        let mu = vec![Tensor::row(vec![0.3, -0.4]).unwrap(), Tensor::zeros(2, 2)];
        let rho = vec![Tensor::row(vec![-3.0, 1.0]).unwrap(), Tensor::filled(2, 2, 0.5)];
        let vw = VariationalWeights::new(mu, rho).unwrap();
        let mut g = Graph::new();
        let m: Vec<Var> = vw.mu.iter().map(|t| g.param(t.clone()).unwrap()).collect();
        let r: Vec<Var> = vw.rho.iter().map(|t| g.param(t.clone()).unwrap()).collect();
        let kl = kl_to_std_normal(&mut g, &m, &r).unwrap();
        let exact = kl_diag_gaussian_to_std(&flatten(&vw.mu), &flatten(&vw.sigma())).unwrap();
        assert!((g.scalar(kl) - exact).abs() < 1e-12);
    }

    fn bottleneck(
        x: &Tensor,
        eps: &Tensor,
        mean_bias: f64,
        scale_bias: f64,
    ) -> (Graph, BottleneckNodes) {
        let spec = BottleneckSpec::new(x.cols(), 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let trunk = spec.trunk.init(&mut rng);
        let zero_head = |bias: f64| -> Vec<Tensor> {
            spec.mean_head
                .param_shapes()
                .iter()
                .enumerate()
                .map(|(i, &(r, c))| if i == 1 { Tensor::filled(r, c, bias) } else { Tensor::zeros(r, c) })
                .collect()
        };
        let mut g = Graph::new();
        let t: Vec<Var> = trunk.iter().map(|w| g.param(w.clone()).unwrap()).collect();
        let m: Vec<Var> = zero_head(mean_bias).iter().map(|w| g.param(w.clone()).unwrap()).collect();
        let s: Vec<Var> = zero_head(scale_bias).iter().map(|w| g.param(w.clone()).unwrap()).collect();
        let xv = g.constant(x.clone()).unwrap();
        let nodes = bottleneck_encode(&mut g, &spec, &t, &m, &s, xv, eps).unwrap();
        (g, nodes)
    }

    #[test]
    fn bottleneck_at_standard_normal_has_zero_kl() {
        let x = Tensor::filled(2, 3, 0.5);
        // softplus(rho) = 1  <=>  rho = ln(e - 1)
        let rho_one = (std::f64::consts::E - 1.0).ln();
        let (g, nodes) = bottleneck(&x, &Tensor::filled(2, 3, 0.3), 0.0, rho_one);
        assert!(g.value(nodes.kl).data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn bottleneck_zero_noise_and_kl_identity() {
        let x = Tensor::matrix(2, 3, vec![0.1, -0.3, 0.8, 1.0, 0.2, -0.5]).unwrap();
        let zero = Tensor::zeros(2, 3);
        let (g, nodes) = bottleneck(&x, &zero, 0.4, -0.7);
        assert_eq!(g.value(nodes.z), g.value(nodes.z_mu));

        let eps = Tensor::matrix(2, 3, vec![0.5, -1.0, 0.2, 1.5, 0.0, -0.3]).unwrap();
        let (g, nodes) = bottleneck(&x, &eps, 0.4, -0.7);
        let sample = nodes.snapshot(&g, &eps);
        for i in 0..6 {
            let expect = sample.z_mu.data()[i] + sample.z_sigma.data()[i] * eps.data()[i];
            assert_eq!(sample.z.data()[i], expect);
        }
        for r in 0..2 {
            let mu: Vec<f64> = (0..3).map(|c| sample.z_mu.get(r, c)).collect();
            let sd: Vec<f64> = (0..3).map(|c| sample.z_sigma.get(r, c)).collect();
            let kl = kl_diag_gaussian_to_std(&mu, &sd).unwrap();
            assert!((g.value(nodes.kl).get(r, 0) - kl).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_reproducible_for_a_seed() {
        let draw = || rng::normals(&mut rng::stream(77, "weight_noise"), 16);
        let (a, b) = (draw(), draw());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn unflatten_round_trip_and_length_check() {
        let shapes = [(2, 3), (1, 3)];
        let flat: Vec<f64> = (0..9).map(f64::from).collect();
        let t = unflatten(&flat, &shapes).unwrap();
        assert_eq!(flatten(&t), flat);
        assert!(unflatten(&flat[..8], &shapes).is_err());
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative_and_zero_only_at_prior(
            mu in proptest::collection::vec(-3.0f64..3.0, 1..10),
            log_sigma in proptest::collection::vec(-2.0f64..2.0, 10),
        ) {
            let sigma: Vec<f64> = log_sigma[..mu.len()].iter().map(|l| l.exp()).collect();
            let kl = kl_diag_gaussian_to_std(&mu, &sigma).unwrap();
            prop_assert!(kl >= 0.0);
            let at_prior = mu.iter().all(|&m| m == 0.0) && sigma.iter().all(|&s| s == 1.0);
            if !at_prior {
                prop_assert!(kl > 0.0);
            }
        }

        #[test]
        fn outputs_are_finite_for_bounded_weights(
            seed in 0u64..10_000,
            scale in 1.0f64..1e3,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = MlpSpec::relu(vec![3], vec![8, 2]);
            let weights: Vec<Tensor> = spec
                .param_shapes()
                .iter()
                .map(|&(r, c)| Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-scale..scale)).collect()).unwrap())
                .collect();
            let x = Tensor::matrix(2, 3, rng::normals(&mut rng, 6)).unwrap();
            prop_assert!(forward(&spec, &weights, &x).is_finite());
        }
    }
}
