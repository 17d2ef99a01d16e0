//! Curvature of the negative log-likelihood at adapted parameters.
//!
//! K-FAC approximates each layer's Fisher block by `A ⊗ G`, where `A` is
//! the second moment of the layer input `[h, 1]` and `G` that of the
//! derivative of the per-example loss with respect to the pre-activation.
//! In the flat layout (row-major `(fan_in + 1) × fan_out` blocks) the
//! per-example gradient of a block is `ā gᵀ`, whose vectorization is
//! `ā ⊗ g`, so the block is exactly `kron(A, G)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{self, Examples, Likelihood, MlpSpec, ParamVector, Targets};
use crate::numcore::{cholesky, linalg, Matrix, Node, Tape};

/// Parameter count above which the dense path refuses to run.
pub const DENSE_MAX_PARAMS: usize = 2000;

/// Which targets drive the backpropagated derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FisherKind {
    /// Targets drawn from the model's own predictive distribution.
    True,
    /// The observed targets.
    Empirical,
}

impl std::str::FromStr for FisherKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "true" => Ok(FisherKind::True),
            "empirical" => Ok(FisherKind::Empirical),
            other => Err(Error::InvalidArgument(format!("unknown fisher kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for FisherKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FisherKind::True => "true",
            FisherKind::Empirical => "empirical",
        })
    }
}

/// How sampled targets are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FisherCfg {
    pub kind: FisherKind,
    /// Seed of the target-sampling stream.
    pub seed: u64,
}

impl Default for FisherCfg {
    fn default() -> Self {
        Self {
            kind: FisherKind::True,
            seed: 0,
        }
    }
}

/// Undamped Kronecker factors as graph nodes, one pair per layer.
pub struct KfacFactors<'t> {
    pub a: Vec<Node<'t>>,
    pub g: Vec<Node<'t>>,
}

/// Builds the factors at `phi` on `batch`.
///
/// With `differentiable` the factors stay connected to `phi` (through the
/// activations and through the backpropagated derivatives); sampled
/// targets are constants either way.
pub fn kfac_factors<'t>(
    spec: &MlpSpec,
    phi: &[Node<'t>],
    batch: &Examples,
    fisher: &FisherCfg,
    differentiable: bool,
) -> Result<KfacFactors<'t>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("curvature needs a nonempty batch".into()));
    }
    // validates shapes
    let tape = phi
        .first()
        .ok_or_else(|| Error::InvalidArgument("no parameter blocks".into()))?
        .tape();
    model::nll(spec, phi, batch)?;
    let fwd = model::forward(spec, phi, tape.constant(batch.inputs.clone()))?;
    let n = batch.len() as f64;
    let out = fwd.output.value();
    let mut rng = ChaCha8Rng::seed_from_u64(fisher.seed);
    // surrogate whose gradient w.r.t. the output rows is each example's loss gradient
    let surrogate = match (spec.likelihood, fisher.kind, &batch.targets) {
        (Likelihood::Gaussian, FisherKind::True, _) => {
            let eps = Matrix::from_fn(out.rows(), out.cols(), |_, _| -rng.sample::<f64, _>(StandardNormal));
            (fwd.output * tape.constant(eps)).sum()
        }
        (Likelihood::Gaussian, FisherKind::Empirical, Targets::Real(y)) => {
            let r = fwd.output - tape.constant(y.clone());
            (r * r).sum().scale(0.5)
        }
        (Likelihood::Categorical, kind, targets) => {
            let labels: Vec<usize> = match (kind, targets) {
                (FisherKind::Empirical, Targets::Class(c)) => c.clone(),
                _ => (0..out.rows())
                    .map(|i| sample_categorical(out.row_slice(i), rng.random::<f64>()))
                    .collect(),
            };
            let onehot = model::one_hot(&labels, spec.output_dim());
            (fwd.output.log_softmax() * tape.constant(onehot)).sum().scale(-1.0)
        }
        _ => unreachable!("targets validated against the likelihood"),
    };
    let grads = tape.grad(surrogate, &fwd.pre_activations, differentiable)?;
    let mut a = Vec::with_capacity(grads.len());
    let mut g = Vec::with_capacity(grads.len());
    for (l, (abar, gl)) in fwd.layer_inputs.iter().zip(&grads).enumerate() {
        let al = abar.matmul_tn(*abar).scale(1.0 / n);
        let gg = gl.matmul_tn(*gl).scale(1.0 / n);
        if !al.value().is_finite() || !gg.value().is_finite() {
            return Err(Error::NonFinite {
                context: format!("K-FAC statistics of layer {l}"),
            });
        }
        a.push(al);
        g.push(gg);
    }
    Ok(KfacFactors { a, g })
}

/// Inverse-CDF draw from `softmax(logits)` using uniform `u ∈ [0, 1)`.
fn sample_categorical(logits: &[f64], u: f64) -> usize {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut acc = 0.0;
    for (c, wc) in w.iter().enumerate() {
        acc += wc / total;
        if u < acc {
            return c;
        }
    }
    w.len() - 1
}

/// Per-layer Kronecker factors with a shared diagonal damping.
#[derive(Debug, Clone, PartialEq)]
pub struct KfacState {
    /// Undamped `(A_ℓ, G_ℓ)` pairs.
    pub factors: Vec<(Matrix, Matrix)>,
    /// Added to the diagonal of every factor.
    pub damping: f64,
    pub sample_count: usize,
}

impl KfacState {
    pub fn new(factors: Vec<(Matrix, Matrix)>, damping: f64, sample_count: usize) -> Result<Self> {
        if !(damping >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "damping must be non-negative, got {damping}"
            )));
        }
        let state = Self {
            factors,
            damping,
            sample_count,
        };
        state.damped_choleskys()?;
        Ok(state)
    }

    pub fn num_layers(&self) -> usize {
        self.factors.len()
    }

    /// Total number of parameters covered.
    pub fn dim(&self) -> usize {
        self.factors.iter().map(|(a, g)| a.rows() * g.rows()).sum()
    }

    pub fn damped(&self, layer: usize) -> (Matrix, Matrix) {
        let (a, g) = &self.factors[layer];
        (a.add_identity(self.damping), g.add_identity(self.damping))
    }

    /// Cholesky factors `(L_A, L_G)` of the damped factors.
    pub fn damped_choleskys(&self) -> Result<Vec<(Matrix, Matrix)>> {
        (0..self.factors.len())
            .map(|l| {
                let (a, g) = self.damped(l);
                let la = cholesky(&a).map_err(|_| Error::FactorNotPd { layer: l, factor: "A" })?;
                let lg = cholesky(&g).map_err(|_| Error::FactorNotPd { layer: l, factor: "G" })?;
                Ok((la, lg))
            })
            .collect()
    }

    /// Dense block-diagonal matrix `diag(kron(A_ℓ + δI, G_ℓ + δI))`.
    pub fn assemble(&self) -> Matrix {
        let blocks: Vec<Matrix> = (0..self.factors.len())
            .map(|l| {
                let (a, g) = self.damped(l);
                linalg::kron(&a, &g)
            })
            .collect();
        linalg::block_diag(&blocks)
    }
}

/// K-FAC factors of the NLL curvature at `phi_hat` on `batch`.
pub fn kfac_estimate(
    spec: &MlpSpec,
    phi_hat: &ParamVector,
    batch: &Examples,
    damping: f64,
    fisher: &FisherCfg,
) -> Result<KfacState> {
    let tape = Tape::new();
    let f = kfac_factors(spec, &phi_hat.to_nodes(&tape), batch, fisher, false)?;
    let factors =
        f.a.iter()
            .zip(&f.g)
            .map(|(a, g)| (a.value().as_ref().clone(), g.value().as_ref().clone()))
            .collect();
    KfacState::new(factors, damping, batch.len())
}

/// `log det` of the assembled block-diagonal Kronecker matrix, from the
/// factor determinants.
pub fn kfac_logdet(state: &KfacState) -> Result<f64> {
    let chols = state.damped_choleskys()?;
    Ok(chols
        .iter()
        .map(|(la, lg)| {
            let lda = 2.0 * la.diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let ldg = 2.0 * lg.diagonal().iter().map(|d| d.ln()).sum::<f64>();
            lg.rows() as f64 * lda + la.rows() as f64 * ldg
        })
        .sum())
}

/// [`kfac_logdet`] as a graph node over undamped factor nodes.
pub fn kfac_logdet_node<'t>(factors: &KfacFactors<'t>, damping: f64) -> Result<Node<'t>> {
    let mut total: Option<Node<'t>> = None;
    for (l, (a, g)) in factors.a.iter().zip(&factors.g).enumerate() {
        let (da, dg) = (a.shape().0 as f64, g.shape().0 as f64);
        let lda = a
            .add_identity(damping)
            .logdet_spd()
            .map_err(|e| factor_error(e, l, "A"))?;
        let ldg = g
            .add_identity(damping)
            .logdet_spd()
            .map_err(|e| factor_error(e, l, "G"))?;
        let term = lda.scale(dg) + ldg.scale(da);
        total = Some(match total {
            Some(t) => t + term,
            None => term,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("no layers".into()))
}

fn factor_error(e: Error, layer: usize, factor: &'static str) -> Error {
    match e {
        Error::NotPositiveDefinite { .. } => Error::FactorNotPd { layer, factor },
        other => other,
    }
}

/// Exact curvature over the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseCurvature {
    pub h: Matrix,
}

/// Gauss-Newton matrix `(1/N) Σ Jᵢᵀ Λᵢ Jᵢ + δI`, where `Jᵢ` is the Jacobian
/// of example `i`'s output and `Λᵢ` the Hessian of its loss in the output.
pub fn dense_ggn(spec: &MlpSpec, phi_hat: &ParamVector, batch: &Examples, damping: f64) -> Result<DenseCurvature> {
    if phi_hat.len() > DENSE_MAX_PARAMS {
        return Err(Error::InvalidArgument(format!(
            "dense curvature is limited to {DENSE_MAX_PARAMS} parameters (model has {}); use K-FAC",
            phi_hat.len()
        )));
    }
    if batch.is_empty() {
        return Err(Error::InvalidArgument("curvature needs a nonempty batch".into()));
    }
    model::nll_value(spec, phi_hat, batch)?;
    let out = model::predict(spec, phi_hat, &batch.inputs)?;
    let (n, c) = out.shape();
    let p = phi_hat.len();
    let mut h = Matrix::zeros(p, p);
    for i in 0..n {
        // rows of the Jacobian of example i's outputs, on a tape of its own
        let tape = Tape::new();
        let nodes = phi_hat.to_nodes(&tape);
        let x = Matrix::row(batch.inputs.row_slice(i));
        let fi = model::forward(spec, &nodes, tape.constant(x))?.output;
        let mut jac = Matrix::zeros(c, p);
        for o in 0..c {
            let mut sel = Matrix::zeros(1, c);
            sel[(0, o)] = 1.0;
            let gi = tape.grad_values((fi * tape.constant(sel)).sum(), &nodes)?;
            let flat: Vec<f64> = gi.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
            jac.as_mut_slice()[o * p..(o + 1) * p].copy_from_slice(&flat);
        }
        let lambda = match spec.likelihood {
            Likelihood::Gaussian => Matrix::identity(c),
            Likelihood::Categorical => {
                let row = out.row_slice(i);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                let pr: Vec<f64> = e.iter().map(|v| v / s).collect();
                Matrix::from_fn(c, c, |a, b| if a == b { pr[a] } else { 0.0 } - pr[a] * pr[b])
            }
        };
        h.add_assign(&jac.matmul_tn(&lambda.matmul(&jac)));
    }
    let h = h.scale(1.0 / n as f64).symmetrize().add_identity(damping);
    if !h.is_finite() {
        return Err(Error::NonFinite {
            context: "dense curvature".into(),
        });
    }
    Ok(DenseCurvature { h })
}

fn standard_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Draw from `N(mean, scale² · diag(kron(A_ℓ + δI, G_ℓ + δI))⁻¹)`.
///
/// Each block is `L_A⁻ᵀ Z L_G⁻¹` with `Z` standard normal.
pub fn kfac_sample(state: &KfacState, mean: &ParamVector, scale: f64, rng: &mut ChaCha8Rng) -> Result<ParamVector> {
    if !(scale >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "scale must be non-negative, got {scale}"
        )));
    }
    let chols = state.damped_choleskys()?;
    let mean_blocks = mean.blocks();
    if mean_blocks.len() != chols.len() {
        return Err(Error::shape("kfac_sample layers", chols.len(), mean_blocks.len()));
    }
    let mut blocks = Vec::with_capacity(chols.len());
    for ((la, lg), m) in chols.iter().zip(&mean_blocks) {
        if m.shape() != (la.rows(), lg.rows()) {
            return Err(Error::shape(
                "kfac_sample block",
                format!("{}x{}", la.rows(), lg.rows()),
                format!("{}x{}", m.rows(), m.cols()),
            ));
        }
        let z = standard_normal(rng, la.rows(), lg.rows());
        let left = linalg::solve_lower_transpose(la, &z);
        let e = linalg::solve_lower_transpose(lg, &left.transpose()).transpose();
        let mut b = m.clone();
        b.axpy(scale, &e);
        blocks.push(b);
    }
    Ok(ParamVector::from_blocks(&blocks))
}

/// Draw from `N(mean, scale² · H⁻¹)`.
pub fn dense_sample(
    curv: &DenseCurvature,
    mean: &ParamVector,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ParamVector> {
    if !(scale >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "scale must be non-negative, got {scale}"
        )));
    }
    if curv.h.rows() != mean.len() {
        return Err(Error::shape("dense_sample", curv.h.rows(), mean.len()));
    }
    let l = cholesky(&curv.h)?;
    let z = standard_normal(rng, mean.len(), 1);
    let e = linalg::solve_lower_transpose(&l, &z);
    let mut out = mean.clone();
    for (o, d) in out.as_mut_slice().iter_mut().zip(e.as_slice()) {
        *o += scale * d;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;
    use crate::quadprior::relative_error;
    use crate::tasks::rng_for;

    fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
        let a = Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        a.matmul_tn(&a).add_identity(0.3)
    }

    fn frob_rel(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).frobenius_norm() / b.frobenius_norm()
    }

    fn linear_spec(d: usize, out: usize) -> MlpSpec {
        MlpSpec {
            layer_sizes: vec![d, out],
            activation: Activation::Tanh,
            likelihood: Likelihood::Gaussian,
        }
    }

    fn regression_batch(rng: &mut ChaCha8Rng, n: usize, d: usize, out: usize) -> Examples {
        Examples {
            inputs: Matrix::from_fn(n, d, |_, _| rng.random_range(-1.5..1.5)),
            targets: Targets::Real(Matrix::from_fn(n, out, |_, _| rng.random_range(-1.0..1.0))),
        }
    }

    #[test]
    fn one_example_activation_moment() {
        let spec = linear_spec(2, 1);
        let phi = spec.init(&mut rng_for(0, &[]));
        let batch = Examples {
            inputs: Matrix::row(&[0.5, -2.0]),
            targets: Targets::Real(Matrix::scalar(1.0)),
        };
        let s = kfac_estimate(&spec, &phi, &batch, 1e-3, &FisherCfg::default()).unwrap();
        let abar = Matrix::column(&[0.5, -2.0, 1.0]);
        assert_eq!(s.factors[0].0, abar.matmul_nt(&abar));
        assert_eq!(s.sample_count, 1);
    }

    #[test]
    fn undamped_rank_deficient_factors_are_rejected() {
        let spec = linear_spec(3, 1);
        let phi = spec.init(&mut rng_for(0, &[]));
        let batch = regression_batch(&mut rng_for(1, &[]), 2, 3, 1);
        let err = kfac_estimate(&spec, &phi, &batch, 0.0, &FisherCfg::default()).unwrap_err();
        assert!(matches!(err, Error::FactorNotPd { layer: 0, factor: "A" }));
        assert!(err.to_string().contains("increase damping"));
        assert!(kfac_estimate(&spec, &phi, &batch, 1e-3, &FisherCfg::default()).is_ok());
    }

    #[test]
    fn kronecker_matches_dense_fisher_when_independent() {
        // linear Gaussian layer: sampled output noise is independent of the input
        let spec = linear_spec(2, 2);
        let mut rng = rng_for(2, &[]);
        let phi = spec.init(&mut rng);
        let batch = regression_batch(&mut rng, 10_000, 2, 2);
        let s = kfac_estimate(
            &spec,
            &phi,
            &batch,
            0.0,
            &FisherCfg {
                kind: FisherKind::True,
                seed: 3,
            },
        )
        .unwrap();
        let dense = dense_ggn(&spec, &phi, &batch, 0.0).unwrap();
        let err = frob_rel(&s.assemble(), &dense.h);
        assert!(err < 0.1, "{err}");
    }

    #[test]
    fn kfac_logdet_small_cases() {
        let ident = KfacState::new(vec![(Matrix::identity(3), Matrix::identity(2))], 0.0, 1).unwrap();
        assert_eq!(kfac_logdet(&ident).unwrap(), 0.0);
        let s = KfacState::new(
            vec![(Matrix::diag(&[2.0, 2.0]), Matrix::diag(&[3.0, 3.0, 3.0]))],
            0.0,
            1,
        )
        .unwrap();
        let expect = 3.0 * 4f64.ln() + 2.0 * 27f64.ln();
        assert!((kfac_logdet(&s).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn kfac_logdet_matches_dense_assembly() {
        let mut rng = rng_for(4, &[]);
        for _ in 0..20 {
            let layers = rng.random_range(1..=3);
            let factors = (0..layers)
                .map(|_| {
                    let (da, dg) = (rng.random_range(1..5), rng.random_range(1..5));
                    (random_spd(&mut rng, da), random_spd(&mut rng, dg))
                })
                .collect();
            let s = KfacState::new(factors, 0.01, 1).unwrap();
            let dense = linalg::logdet_spd(&s.assemble()).unwrap();
            let fast = kfac_logdet(&s).unwrap();
            assert!((dense - fast).abs() <= 1e-8 * dense.abs().max(1.0), "{dense} vs {fast}");
        }
    }

    #[test]
    fn logdet_increases_with_damping() {
        let mut rng = rng_for(5, &[]);
        let factors = vec![
            (random_spd(&mut rng, 3), random_spd(&mut rng, 2)),
            (random_spd(&mut rng, 3), random_spd(&mut rng, 1)),
        ];
        let values: Vec<f64> = [0.0, 1e-3, 1e-2, 0.1, 1.0]
            .iter()
            .map(|&d| kfac_logdet(&KfacState::new(factors.clone(), d, 1).unwrap()).unwrap())
            .collect();
        assert!(values.windows(2).all(|w| w[1] > w[0]), "{values:?}");
    }

    #[test]
    fn graph_logdet_matches_value_and_is_differentiable() {
        let spec = MlpSpec {
            layer_sizes: vec![2, 3, 1],
            activation: Activation::Tanh,
            likelihood: Likelihood::Gaussian,
        };
        let mut rng = rng_for(6, &[]);
        let phi = spec.init(&mut rng);
        let batch = regression_batch(&mut rng, 6, 2, 1);
        let fisher = FisherCfg {
            kind: FisherKind::True,
            seed: 9,
        };
        let value_of = |p: &ParamVector| kfac_logdet(&kfac_estimate(&spec, p, &batch, 0.05, &fisher).unwrap()).unwrap();
        let tape = Tape::new();
        let nodes = phi.to_nodes(&tape);
        let f = kfac_factors(&spec, &nodes, &batch, &fisher, true).unwrap();
        let ld = kfac_logdet_node(&f, 0.05).unwrap();
        assert!((ld.item() - value_of(&phi)).abs() < 1e-10);
        let g = ParamVector::from_blocks(&tape.grad_values(ld, &nodes).unwrap());
        let h = 1e-5;
        let num: Vec<f64> = (0..phi.len())
            .map(|k| {
                let (mut a, mut b) = (phi.clone(), phi.clone());
                a.as_mut_slice()[k] += h;
                b.as_mut_slice()[k] -= h;
                (value_of(&a) - value_of(&b)) / (2.0 * h)
            })
            .collect();
        assert!(relative_error(g.as_slice(), &num) < 1e-6);
    }

    #[test]
    fn categorical_true_fisher_is_label_independent() {
        let spec = MlpSpec {
            layer_sizes: vec![3, 4, 3],
            activation: Activation::Relu,
            likelihood: Likelihood::Categorical,
        };
        let mut rng = rng_for(7, &[]);
        let phi = spec.init(&mut rng);
        let x = Matrix::from_fn(8, 3, |_, _| rng.random_range(-1.0..1.0));
        let b1 = Examples {
            inputs: x.clone(),
            targets: Targets::Class(vec![0; 8]),
        };
        let b2 = Examples {
            inputs: x,
            targets: Targets::Class(vec![2; 8]),
        };
        let f = FisherCfg::default();
        assert_eq!(
            kfac_estimate(&spec, &phi, &b1, 1e-3, &f).unwrap(),
            kfac_estimate(&spec, &phi, &b2, 1e-3, &f).unwrap()
        );
        let e = FisherCfg {
            kind: FisherKind::Empirical,
            seed: 0,
        };
        assert_ne!(
            kfac_estimate(&spec, &phi, &b1, 1e-3, &e).unwrap(),
            kfac_estimate(&spec, &phi, &b2, 1e-3, &e).unwrap()
        );
    }

    #[test]
    fn linear_ggn_is_scaled_gram_matrix() {
        let spec = linear_spec(3, 1);
        let mut rng = rng_for(8, &[]);
        let phi = spec.init(&mut rng);
        let batch = regression_batch(&mut rng, 7, 3, 1);
        let xa = Matrix::from_fn(7, 4, |i, j| if j < 3 { batch.inputs[(i, j)] } else { 1.0 });
        let expect = xa.matmul_tn(&xa).scale(1.0 / 7.0).add_identity(0.01);
        let got = dense_ggn(&spec, &phi, &batch, 0.01).unwrap().h;
        assert!(got.sub(&expect).max_abs() < 1e-14);
        let empty = Examples {
            inputs: Matrix::zeros(0, 3),
            targets: Targets::Real(Matrix::zeros(0, 1)),
        };
        assert!(dense_ggn(&spec, &phi, &empty, 0.01).is_err());
        assert!(dense_ggn(&MlpSpec::sinusoid(), &MlpSpec::sinusoid().init(&mut rng), &empty, 0.0).is_err());
    }

    #[test]
    fn ggn_equals_hessian_at_interpolating_fit() {
        // targets generated by the network itself, so residuals vanish
        let spec = MlpSpec {
            layer_sizes: vec![2, 3, 1],
            activation: Activation::Tanh,
            likelihood: Likelihood::Gaussian,
        };
        let mut rng = rng_for(9, &[]);
        let phi = spec.init(&mut rng);
        let x = Matrix::from_fn(6, 2, |_, _| rng.random_range(-1.5..1.5));
        let y = model::predict(&spec, &phi, &x).unwrap();
        let batch = Examples {
            inputs: x,
            targets: Targets::Real(y),
        };
        let ggn = dense_ggn(&spec, &phi, &batch, 0.0).unwrap().h;
        let grad_at = |p: &ParamVector| {
            let t = Tape::new();
            let nodes = p.to_nodes(&t);
            let g = t
                .grad_values(model::nll(&spec, &nodes, &batch).unwrap(), &nodes)
                .unwrap();
            ParamVector::from_blocks(&g)
        };
        let h = 1e-5;
        let d = phi.len();
        let mut hess = Matrix::zeros(d, d);
        for k in 0..d {
            let (mut a, mut b) = (phi.clone(), phi.clone());
            a.as_mut_slice()[k] += h;
            b.as_mut_slice()[k] -= h;
            let (ga, gb) = (grad_at(&a), grad_at(&b));
            for j in 0..d {
                hess[(j, k)] = (ga.as_slice()[j] - gb.as_slice()[j]) / (2.0 * h);
            }
        }
        assert!(hess.sub(&ggn).max_abs() < 1e-4, "{}", hess.sub(&ggn).max_abs());
    }

    #[test]
    fn zero_scale_sample_is_mean() {
        let mut rng = rng_for(10, &[]);
        let s = KfacState::new(vec![(random_spd(&mut rng, 3), random_spd(&mut rng, 2))], 1e-3, 1).unwrap();
        let mean = ParamVector::new((0..6).map(f64::from).collect(), vec![(3, 2)]);
        assert_eq!(kfac_sample(&s, &mean, 0.0, &mut rng).unwrap(), mean);
    }

    #[test]
    fn identity_factors_give_unit_variance() {
        let s = KfacState::new(vec![(Matrix::identity(3), Matrix::identity(2))], 0.0, 1).unwrap();
        let mean = ParamVector::new(vec![0.0; 6], vec![(3, 2)]);
        let mut rng = rng_for(11, &[]);
        let n = 10_000;
        let mut sq = [0.0; 6];
        for _ in 0..n {
            let d = kfac_sample(&s, &mean, 1.0, &mut rng).unwrap();
            for (a, v) in sq.iter_mut().zip(d.as_slice()) {
                *a += v * v;
            }
        }
        for v in sq {
            assert!((v / n as f64 - 1.0).abs() < 0.05);
        }
    }

    fn empirical_covariance(draws: &[Vec<f64>]) -> Matrix {
        let d = draws[0].len();
        let n = draws.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| draws.iter().map(|x| x[j]).sum::<f64>() / n).collect();
        Matrix::from_fn(d, d, |a, b| {
            draws.iter().map(|x| (x[a] - mean[a]) * (x[b] - mean[b])).sum::<f64>() / (n - 1.0)
        })
    }

    #[test]
    fn sample_covariance_matches_kronecker_inverse() {
        let mut rng = rng_for(12, &[]);
        let s = KfacState::new(vec![(random_spd(&mut rng, 2), random_spd(&mut rng, 2))], 0.0, 1).unwrap();
        let mean = ParamVector::new(vec![1.0, -1.0, 0.5, 2.0], vec![(2, 2)]);
        let draws: Vec<Vec<f64>> = (0..100_000)
            .map(|_| kfac_sample(&s, &mean, 1.0, &mut rng).unwrap().as_slice().to_vec())
            .collect();
        let expect = linalg::inverse_spd(&s.assemble()).unwrap();
        let err = frob_rel(&empirical_covariance(&draws), &expect);
        assert!(err < 0.05, "{err}");
    }

    #[test]
    fn dense_sample_covariance_matches_inverse() {
        let mut rng = rng_for(13, &[]);
        let curv = DenseCurvature {
            h: random_spd(&mut rng, 4),
        };
        let mean = ParamVector::new(vec![0.0; 4], vec![(2, 2)]);
        let draws: Vec<Vec<f64>> = (0..100_000)
            .map(|_| dense_sample(&curv, &mean, 0.5, &mut rng).unwrap().as_slice().to_vec())
            .collect();
        let expect = linalg::inverse_spd(&curv.h).unwrap().scale(0.25);
        let err = frob_rel(&empirical_covariance(&draws), &expect);
        assert!(err < 0.1, "{err}");
    }
}
