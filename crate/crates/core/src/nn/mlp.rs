use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use super::spectral::{self, l2, NormalizedWeight};
use crate::error::{Error, Result};

/// Hidden-layer nonlinearity. Both choices are 1-Lipschitz.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => x.mapv(|v| v.max(0.0)),
            Activation::Tanh => x.mapv(f64::tanh),
        }
    }

    /// Multiplies `grad` in place by the derivative at the pre-activation.
    fn backprop(self, pre: &Array2<f64>, grad: &mut Array2<f64>) {
        match self {
            Activation::Relu => grad.zip_mut_with(pre, |g, &p| {
                if p <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Tanh => grad.zip_mut_with(pre, |g, &p| {
                let t = p.tanh();
                *g *= 1.0 - t * t
            }),
        }
    }
}

/// Parameters of a fully connected network. Hidden layers use `activation`;
/// the last layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParameters {
    pub layer_weights: Vec<Array2<f64>>,
    pub layer_biases: Vec<Array1<f64>>,
    /// Persistent left singular-vector estimates, one per layer, empty
    /// unless `sn_enabled`.
    pub sn_u_vectors: Vec<Array1<f64>>,
    pub activation: Activation,
    pub sn_enabled: bool,
}

impl NetworkParameters {
    /// Fresh network with layer widths `sizes` (input first, output last).
    /// Weights and biases are uniform in `±1/√fan_in`.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        activation: Activation,
        sn_enabled: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Contract(format!(
                "network needs at least two positive layer sizes, got {sizes:?}"
            )));
        }
        let mut weights = Vec::with_capacity(sizes.len() - 1);
        let mut biases = Vec::with_capacity(sizes.len() - 1);
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            weights.push(Array2::from_shape_fn((fan_out, fan_in), |_| dist.sample(rng)));
            biases.push(Array1::from_shape_fn(fan_out, |_| dist.sample(rng)));
        }
        let sn_u_vectors = if sn_enabled {
            sizes[1..]
                .iter()
                .map(|&n| {
                    let u = Array1::from_shape_fn(n, |_| StandardNormal.sample(rng));
                    let norm = l2(u.view());
                    u / norm
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            layer_weights: weights,
            layer_biases: biases,
            sn_u_vectors,
            activation,
            sn_enabled,
        })
    }

    /// Builds a network from explicit layers. Singular-vector estimates start
    /// at the normalized all-ones vector.
    pub fn from_layers(
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
        activation: Activation,
        sn_enabled: bool,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::shape(
                "NetworkParameters::from_layers",
                format!("{} biases", weights.len()),
                biases.len(),
            ));
        }
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.nrows() != b.len() {
                return Err(Error::shape("layer bias", w.nrows(), b.len()));
            }
            if i > 0 && weights[i - 1].nrows() != w.ncols() {
                return Err(Error::shape("layer chain", weights[i - 1].nrows(), w.ncols()));
            }
        }
        let sn_u_vectors = if sn_enabled {
            weights
                .iter()
                .map(|w| Array1::from_elem(w.nrows(), 1.0 / (w.nrows() as f64).sqrt()))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            layer_weights: weights,
            layer_biases: biases,
            sn_u_vectors,
            activation,
            sn_enabled,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_weights[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layer_weights.last().map_or(0, |w| w.nrows())
    }

    pub fn num_layers(&self) -> usize {
        self.layer_weights.len()
    }

    pub fn num_parameters(&self) -> usize {
        self.layer_weights
            .iter()
            .zip(&self.layer_biases)
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    /// Advances every layer's singular-vector estimate by `iters` steps.
    /// No-op without spectral normalization.
    pub fn spectral_step(&mut self, iters: usize) -> Result<()> {
        if !self.sn_enabled {
            return Ok(());
        }
        for (w, u) in self.layer_weights.iter().zip(self.sn_u_vectors.iter_mut()) {
            let out = spectral::power_iteration(w.view(), u.view(), iters)?;
            if out.degenerate {
                log::warn!("spectral normalization hit a degenerate weight matrix");
            } else {
                *u = out.u;
            }
        }
        Ok(())
    }

    /// Current spectral-norm estimates `‖Wᵀu‖`, one per layer.
    pub fn spectral_sigmas(&self) -> Vec<f64> {
        self.sn_u_vectors
            .iter()
            .zip(&self.layer_weights)
            .map(|(u, w)| l2(w.t().dot(u).view()))
            .collect()
    }

    /// The weights the forward pass actually multiplies by.
    pub fn effective_weights(&self) -> Vec<Array2<f64>> {
        (0..self.num_layers())
            .map(|i| match self.normalized(i) {
                Some(n) => n.weight,
                None => self.layer_weights[i].clone(),
            })
            .collect()
    }

    fn normalized(&self, layer: usize) -> Option<NormalizedWeight> {
        self.sn_enabled
            .then(|| spectral::normalize(&self.layer_weights[layer], &self.sn_u_vectors[layer]))
    }

    /// Training-mode forward: one power-iteration step per layer, then the
    /// forward pass.
    pub fn mlp_forward(&mut self, input: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.spectral_step(1)?;
        self.forward(input)
    }

    /// Forward pass over a batch (one row per sample) with the current
    /// singular-vector estimates held fixed.
    pub fn forward(&self, input: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(input)?;
        let last = self.num_layers() - 1;
        let mut x = input.to_owned();
        for i in 0..=last {
            let z = self.affine(i, x.view(), None);
            x = if i < last { self.activation.apply(&z) } else { z };
        }
        Ok(x)
    }

    pub fn forward_vec(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|_| Error::shape("forward_vec", self.input_dim(), input.len()))?;
        Ok(self.forward(x)?.into_raw_vec_and_offset().0)
    }

    /// Forward pass that records what `backward` needs.
    pub fn forward_recorded(&self, input: ArrayView2<'_, f64>) -> Result<Tape> {
        self.check_input(input)?;
        let last = self.num_layers() - 1;
        let mut layer_inputs = Vec::with_capacity(last + 1);
        let mut pre_activations = Vec::with_capacity(last);
        let mut normalized = Vec::with_capacity(last + 1);
        let mut x = input.to_owned();
        for i in 0..=last {
            let norm = self.normalized(i);
            let z = self.affine(i, x.view(), norm.as_ref());
            layer_inputs.push(x);
            normalized.push(norm);
            if i < last {
                x = self.activation.apply(&z);
                pre_activations.push(z);
            } else {
                x = z;
            }
        }
        Ok(Tape {
            layer_inputs,
            pre_activations,
            normalized,
            output: x,
        })
    }

    fn affine(
        &self,
        layer: usize,
        x: ArrayView2<'_, f64>,
        norm: Option<&NormalizedWeight>,
    ) -> Array2<f64> {
        let owned;
        let w = match norm {
            Some(n) => &n.weight,
            None if self.sn_enabled => {
                owned = spectral::normalize(&self.layer_weights[layer], &self.sn_u_vectors[layer]);
                &owned.weight
            }
            None => &self.layer_weights[layer],
        };
        let mut z = x.dot(&w.t());
        z += &self.layer_biases[layer];
        z
    }

    fn check_input(&self, input: ArrayView2<'_, f64>) -> Result<()> {
        if input.ncols() != self.input_dim() {
            return Err(Error::shape("mlp input", self.input_dim(), input.ncols()));
        }
        Ok(())
    }

    /// Reverse pass. `upstream` is ∂loss/∂output for each row of the batch
    /// the tape recorded; the loss itself is the scalar those rows sum into.
    pub fn backward(&self, tape: &Tape, upstream: &Array2<f64>) -> Result<Gradients> {
        Ok(self.reverse(tape, upstream, true)?.0.expect("param grads requested"))
    }

    /// ∂loss/∂input only; parameter gradients are not formed.
    pub fn input_gradient(&self, tape: &Tape, upstream: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.reverse(tape, upstream, false)?.1)
    }

    /// Parameter and input gradients in one pass.
    pub fn backward_with_input(
        &self,
        tape: &Tape,
        upstream: &Array2<f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        let (g, x) = self.reverse(tape, upstream, true)?;
        Ok((g.expect("param grads requested"), x))
    }

    fn reverse(
        &self,
        tape: &Tape,
        upstream: &Array2<f64>,
        want_params: bool,
    ) -> Result<(Option<Gradients>, Array2<f64>)> {
        if upstream.dim() != tape.output.dim() {
            return Err(Error::shape(
                "backward upstream gradient",
                format!("{:?}", tape.output.dim()),
                format!("{:?}", upstream.dim()),
            ));
        }
        let n = self.num_layers();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut delta = upstream.clone();
        for i in (0..n).rev() {
            let norm = tape.normalized[i].as_ref();
            if want_params {
                let grad_eff = delta.t().dot(&tape.layer_inputs[i]);
                let grad_w = match norm {
                    Some(nw) => spectral::raw_weight_grad(
                        grad_eff,
                        &self.layer_weights[i],
                        &self.sn_u_vectors[i],
                        nw,
                    ),
                    None => grad_eff,
                };
                weights.push(grad_w.as_standard_layout().into_owned());
                biases.push(delta.sum_axis(Axis(0)));
            }
            let w = norm.map_or(&self.layer_weights[i], |nw| &nw.weight);
            delta = delta.dot(w);
            if i > 0 {
                self.activation.backprop(&tape.pre_activations[i - 1], &mut delta);
            }
        }
        let grads = want_params.then(|| {
            weights.reverse();
            biases.reverse();
            Gradients { weights, biases }
        });
        Ok((grads, delta))
    }

    /// Flat views of the trainable arrays: weight then bias, layer by layer.
    pub fn trainable_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layer_weights
            .iter_mut()
            .zip(self.layer_biases.iter_mut())
            .flat_map(|(w, b)| {
                [
                    w.as_slice_mut().expect("standard layout"),
                    b.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    /// Every stored array in a fixed order (weights, biases, then
    /// singular-vector estimates) for serialization.
    pub fn arrays(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (w, b) in self.layer_weights.iter().zip(&self.layer_biases) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        for u in &self.sn_u_vectors {
            out.push(u.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for (w, b) in self.layer_weights.iter_mut().zip(self.layer_biases.iter_mut()) {
            out.push(w.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        for u in self.sn_u_vectors.iter_mut() {
            out.push(u.as_slice_mut().expect("standard layout"));
        }
        out
    }

    /// `self ← (1−τ)·self + τ·source`, used for target networks.
    pub fn polyak_from(&mut self, source: &NetworkParameters, tau: f64) -> Result<()> {
        if self.layer_weights.len() != source.layer_weights.len() {
            return Err(Error::shape(
                "polyak_from",
                self.layer_weights.len(),
                source.layer_weights.len(),
            ));
        }
        for (dst, src) in self.arrays_mut().into_iter().zip(source.arrays()) {
            if dst.len() != src.len() {
                return Err(Error::shape("polyak_from", dst.len(), src.len()));
            }
            dst.iter_mut()
                .zip(src)
                .for_each(|(d, s)| *d = (1.0 - tau) * *d + tau * s);
        }
        Ok(())
    }
}

/// Everything the reverse pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    layer_inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    normalized: Vec<Option<NormalizedWeight>>,
    output: Array2<f64>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

/// Loss gradients shaped exactly like a network's weights and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &NetworkParameters) -> Self {
        Self {
            weights: params
                .layer_weights
                .iter()
                .map(|w| Array2::zeros(w.raw_dim()))
                .collect(),
            biases: params
                .layer_biases
                .iter()
                .map(|b| Array1::zeros(b.raw_dim()))
                .collect(),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| {
                [
                    w.as_slice().expect("standard layout"),
                    b.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }
}

/// Outcome of [`empirical_lipschitz`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzEstimate {
    pub max_ratio: f64,
    pub pairs_used: usize,
    pub pairs_skipped: usize,
}

/// Largest `‖f(x)−f(y)‖ / ‖x−y‖` over the given pairs. Identical pairs are
/// skipped with a warning.
pub fn empirical_lipschitz(
    params: &NetworkParameters,
    pairs: &[(Vec<f64>, Vec<f64>)],
) -> Result<LipschitzEstimate> {
    let dim = params.input_dim();
    let mut xs = Vec::with_capacity(pairs.len() * dim);
    let mut ys = Vec::with_capacity(pairs.len() * dim);
    let mut gaps = Vec::with_capacity(pairs.len());
    let mut skipped = 0;
    for (x, y) in pairs {
        if x.len() != dim || y.len() != dim {
            return Err(Error::shape("empirical_lipschitz pair", dim, x.len().max(y.len())));
        }
        let gap = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if gap == 0.0 {
            skipped += 1;
            continue;
        }
        xs.extend_from_slice(x);
        ys.extend_from_slice(y);
        gaps.push(gap);
    }
    if skipped > 0 {
        log::warn!("empirical_lipschitz skipped {skipped} identical pairs");
    }
    let n = gaps.len();
    if n == 0 {
        return Ok(LipschitzEstimate {
            max_ratio: 0.0,
            pairs_used: 0,
            pairs_skipped: skipped,
        });
    }
    let fx = params.forward(ArrayView2::from_shape((n, dim), &xs).expect("sized above"))?;
    let fy = params.forward(ArrayView2::from_shape((n, dim), &ys).expect("sized above"))?;
    let diff = fx - fy;
    let max_ratio = diff
        .rows()
        .into_iter()
        .zip(&gaps)
        .map(|(row, gap)| l2(row) / gap)
        .fold(0.0, f64::max);
    Ok(LipschitzEstimate {
        max_ratio,
        pairs_used: n,
        pairs_skipped: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear(w: Array2<f64>, sn: bool) -> NetworkParameters {
        let b = Array1::zeros(w.nrows());
        NetworkParameters::from_layers(vec![w], vec![b], Activation::Relu, sn).unwrap()
    }

    #[test]
    fn linear_layer_without_sn() {
        let net = linear(array![[2.0, 0.0], [0.0, 2.0]], false);
        assert_eq!(net.forward_vec(&[1.0, 1.0]).unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn linear_layer_with_sn_is_normalized() {
        let mut net = linear(array![[2.0, 0.0], [0.0, 2.0]], true);
        let out = net.mlp_forward(array![[1.0, 1.0]].view()).unwrap();
        assert!((out[[0, 0]] - 1.0).abs() < 1e-15);
        assert!((out[[0, 1]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn input_width_is_checked() {
        let net = linear(Array2::eye(2), false);
        assert!(matches!(
            net.forward_vec(&[1.0, 2.0, 3.0]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn from_layers_checks_chain() {
        let r = NetworkParameters::from_layers(
            vec![Array2::zeros((3, 2)), Array2::zeros((1, 4))],
            vec![Array1::zeros(3), Array1::zeros(1)],
            Activation::Relu,
            false,
        );
        assert!(r.is_err());
    }

    #[test]
    fn linear_loss_gradient_is_input() {
        // loss = wᵀx
        let net = linear(array![[0.3, -0.7, 1.1]], false);
        let x = array![[2.0, -1.0, 0.5]];
        let tape = net.forward_recorded(x.view()).unwrap();
        let g = net.backward(&tape, &array![[1.0]]).unwrap();
        assert_eq!(g.weights[0], x);
    }

    #[test]
    fn half_squared_norm_gradient_is_weight() {
        // feeding the basis vectors makes Σ ½ out² equal ½‖w‖²
        let w = array![[0.3, -0.7, 1.1]];
        let net = linear(w.clone(), false);
        let tape = net.forward_recorded(Array2::eye(3).view()).unwrap();
        let upstream = tape.output().clone();
        let g = net.backward(&tape, &upstream).unwrap();
        assert_eq!(g.weights[0], w);
    }

    #[test]
    fn wrong_upstream_shape_is_rejected() {
        let net = linear(Array2::eye(2), false);
        let tape = net.forward_recorded(array![[1.0, 1.0]].view()).unwrap();
        assert!(net.backward(&tape, &array![[1.0, 1.0, 1.0]]).is_err());
    }

    #[test]
    fn zero_network_has_zero_lipschitz_ratio() {
        let net = NetworkParameters::from_layers(
            vec![Array2::zeros((4, 2)), Array2::zeros((2, 4))],
            vec![Array1::zeros(4), Array1::zeros(2)],
            Activation::Relu,
            false,
        )
        .unwrap();
        let pairs = vec![(vec![0.0, 1.0], vec![3.0, -2.0]), (vec![1.0, 1.0], vec![1.0, 1.0])];
        let est = empirical_lipschitz(&net, &pairs).unwrap();
        assert_eq!(est.max_ratio, 0.0);
        assert_eq!(est.pairs_skipped, 1);
    }

    #[test]
    fn identity_layer_has_unit_ratio() {
        let net = linear(Array2::eye(2), false);
        let pairs = vec![(vec![0.0, 1.0], vec![3.0, -2.0]), (vec![5.0, 1.0], vec![1.0, 7.0])];
        let est = empirical_lipschitz(&net, &pairs).unwrap();
        assert!((est.max_ratio - 1.0).abs() < 1e-15);
    }

    #[test]
    fn polyak_with_unit_tau_copies() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = NetworkParameters::new(&[3, 5, 1], Activation::Relu, false, &mut rng).unwrap();
        let mut b = NetworkParameters::new(&[3, 5, 1], Activation::Relu, false, &mut rng).unwrap();
        b.polyak_from(&a, 1.0).unwrap();
        assert_eq!(a, b);
    }
}
