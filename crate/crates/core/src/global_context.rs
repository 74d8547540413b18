//! Amortized Gaussian posterior over the global context proportion.
//!
//! The inference network mean-pools the item embeddings of a sequence, runs
//! one tanh layer of width `H`, and reads `μ` and `log σ` off two affine
//! heads. A reparameterized sample `θ̃ = μ + σ ⊙ ε` is squashed by softmax
//! into the proportion `θ` that weights the rows of the global memory.

use crate::autodiff::{Graph, Tensor, Var};
use crate::cells::linear;
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamSpec, Params};

pub fn posterior_param_specs(d: usize, h: usize, k: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new("inf_w", &[d, h], Init::Uniform),
        ParamSpec::new("inf_b", &[h], Init::Zeros),
        ParamSpec::new("q_mu_w", &[h, k], Init::Uniform),
        ParamSpec::new("q_mu_b", &[k], Init::Zeros),
        ParamSpec::new("q_sigma_w", &[h, k], Init::Uniform),
        ParamSpec::new("q_sigma_b", &[k], Init::Zeros),
    ]
}

/// Global context of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalContext {
    /// `M_global`, `[K, D]`.
    pub memory: Tensor,
    pub theta: Vec<f64>,
    pub theta_tilde: Vec<f64>,
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

impl GlobalContext {
    /// Posterior of `items` under `params`; `noise = None` uses `θ̃ = μ`.
    pub fn infer(items: &[usize], params: &Params, noise: Option<&[f64]>) -> Result<Self> {
        let (mu, log_sigma) = infer_posterior(items, params)?;
        let k = mu.len();
        let eps = match noise {
            Some(n) if n.len() != k => {
                return Err(Error::Shape(format!("noise of length {} for {k} components", n.len())))
            }
            Some(n) => n.to_vec(),
            None => vec![0.0; k],
        };
        let mut g = Graph::new();
        let m = g.constant(Tensor::new(&[1, k], mu.clone())?);
        let s = g.constant(Tensor::new(&[1, k], log_sigma.clone())?);
        let (tt, th) = sample_theta(&mut g, m, s, Tensor::new(&[1, k], eps)?)?;
        Ok(Self {
            memory: params.get("memory")?.clone(),
            theta: g.value(th).data().to_vec(),
            theta_tilde: g.value(tt).data().to_vec(),
            mu,
            log_sigma,
        })
    }
}

/// `(μ, log σ)` of one sequence, reading the `embedding` table in `params`.
pub fn infer_posterior(items: &[usize], params: &Params) -> Result<(Vec<f64>, Vec<f64>)> {
    if items.is_empty() {
        return Err(Error::Input("posterior of an empty sequence".into()));
    }
    let mut g = Graph::new();
    let w = params.bind(&mut g, false);
    let pooled = mean_pool(&mut g, w.get("embedding")?, &[items])?;
    let (mu, log_sigma) = posterior_heads(&mut g, &w, pooled)?;
    Ok((g.value(mu).data().to_vec(), g.value(log_sigma).data().to_vec()))
}

/// Mean of the embeddings of each sequence, `[batch, D]`. Sequences may
/// have different lengths.
pub fn mean_pool(g: &mut Graph, embedding: Var, seqs: &[&[usize]]) -> Result<Var> {
    let batch = seqs.len();
    let longest = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    if batch == 0 || seqs.iter().any(|s| s.is_empty()) {
        return Err(Error::Input("posterior of an empty sequence".into()));
    }
    let d = g.shape(embedding)[1];
    let mut ids = Vec::with_capacity(batch * longest);
    let mut weights = vec![0.0; batch * longest];
    for (b, s) in seqs.iter().enumerate() {
        for t in 0..longest {
            ids.push(s.get(t).copied().unwrap_or(0));
            if t < s.len() {
                weights[b * longest + t] = 1.0 / s.len() as f64;
            }
        }
    }
    let rows = g.gather_rows(embedding, &ids)?;
    let rows = g.reshape(rows, &[batch, longest, d])?;
    let weights = g.constant(Tensor::new(&[batch, 1, longest], weights)?);
    let pooled = g.bmm(weights, rows)?;
    g.reshape(pooled, &[batch, d])
}

/// Inference network on pooled embeddings: `f = tanh(pooled W + b)`,
/// `μ = f W_q1 + b_q1`, `log σ = f W_q2 + b_q2`.
pub fn posterior_heads(g: &mut Graph, w: &Bound, pooled: Var) -> Result<(Var, Var)> {
    let hidden = linear(g, &[(pooled, w.get("inf_w")?)], Some(w.get("inf_b")?))?;
    let hidden = g.tanh(hidden)?;
    let mu = linear(g, &[(hidden, w.get("q_mu_w")?)], Some(w.get("q_mu_b")?))?;
    let log_sigma = linear(g, &[(hidden, w.get("q_sigma_w")?)], Some(w.get("q_sigma_b")?))?;
    Ok((mu, log_sigma))
}

/// Reparameterized sample: `θ̃ = μ + exp(log σ) ⊙ noise`, `θ = softmax(θ̃)`.
pub fn sample_theta(g: &mut Graph, mu: Var, log_sigma: Var, noise: Tensor) -> Result<(Var, Var)> {
    if noise.shape() != g.shape(mu) {
        return Err(Error::Shape(format!("noise {:?} vs mu {:?}", noise.shape(), g.shape(mu))));
    }
    let sigma = g.exp(log_sigma)?;
    let eps = g.constant(noise);
    let spread = g.mul(sigma, eps)?;
    let theta_tilde = g.add(mu, spread)?;
    let theta = g.softmax(theta_tilde)?;
    Ok((theta_tilde, theta))
}

/// Closed-form `KL(N(μ, σ²) || N(0, I))` per row:
/// `0.5 Σ_k (μ_k² + σ_k² - 1 - 2 log σ_k)`.
pub fn kl_to_standard_normal(g: &mut Graph, mu: Var, log_sigma: Var) -> Result<Var> {
    let mu2 = g.mul(mu, mu)?;
    let two_log = g.scale(log_sigma, 2.0)?;
    let var = g.exp(two_log)?;
    let a = g.add(mu2, var)?;
    let b = g.sub(a, two_log)?;
    let c = g.affine(b, 0.5, -0.5)?;
    g.sum_last(c)
}

/// [`kl_to_standard_normal`] on plain vectors.
pub fn kl_divergence(mu: &[f64], log_sigma: &[f64]) -> f64 {
    mu.iter()
        .zip(log_sigma)
        .map(|(m, s)| 0.5 * (m * m + (2.0 * s).exp() - 1.0 - 2.0 * s))
        .sum()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::autodiff::numeric_grad_check;

    fn params(d: usize, h: usize, k: usize, items: usize, seed: u64) -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        for s in posterior_param_specs(d, h, k) {
            p.insert(s.name, Tensor::uniform(&s.shape, 0.8, &mut rng));
        }
        p.insert("embedding", Tensor::uniform(&[items, d], 1.0, &mut rng));
        p.insert("memory", Tensor::uniform(&[k, d], 1.0, &mut rng));
        p
    }

    #[test]
    fn zero_inference_weights_return_biases() {
        let mut p = params(4, 5, 3, 9, 1);
        for name in ["inf_w", "inf_b", "q_mu_w", "q_sigma_w"] {
            let shape = p.get(name).unwrap().shape().to_vec();
            p.insert(name, Tensor::zeros(&shape));
        }
        for seq in [vec![0], vec![3, 1, 8, 8]] {
            let (mu, ls) = infer_posterior(&seq, &p).unwrap();
            assert_eq!(mu, p.get("q_mu_b").unwrap().data());
            assert_eq!(ls, p.get("q_sigma_b").unwrap().data());
        }
    }

    #[test]
    fn posterior_is_order_invariant() {
        let p = params(4, 5, 3, 9, 2);
        let (m1, s1) = infer_posterior(&[1, 2, 7, 7, 4], &p).unwrap();
        let (m2, s2) = infer_posterior(&[7, 4, 1, 7, 2], &p).unwrap();
        for (a, b) in m1.iter().zip(&m2).chain(s1.iter().zip(&s2)) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn posterior_matches_straight_line_evaluation() {
        let (d, h, k) = (4, 5, 3);
        let p = params(d, h, k, 9, 3);
        let seq = [2usize, 5, 5, 0];
        let (mu, ls) = infer_posterior(&seq, &p).unwrap();

        let emb = p.get("embedding").unwrap();
        let mut pooled = vec![0.0; d];
        for &i in &seq {
            for j in 0..d {
                pooled[j] += emb.row(i)[j] / seq.len() as f64;
            }
        }
        let affine = |x: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
            let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
            (0..n_out).map(|o| b.data()[o] + (0..n_in).map(|i| x[i] * w.data()[i * n_out + o]).sum::<f64>()).collect()
        };
        let f: Vec<f64> = affine(&pooled, p.get("inf_w").unwrap(), p.get("inf_b").unwrap())
            .into_iter()
            .map(f64::tanh)
            .collect();
        let mu_ref = affine(&f, p.get("q_mu_w").unwrap(), p.get("q_mu_b").unwrap());
        let ls_ref = affine(&f, p.get("q_sigma_w").unwrap(), p.get("q_sigma_b").unwrap());
        for (a, b) in mu.iter().zip(&mu_ref).chain(ls.iter().zip(&ls_ref)) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let p = params(4, 5, 3, 9, 4);
        assert!(matches!(infer_posterior(&[], &p), Err(Error::Input(_))));
    }

    #[test]
    fn zero_noise_gives_posterior_mean() {
        let mut g = Graph::new();
        let mu = g.constant(Tensor::new(&[1, 3], vec![0.3, -1.0, 2.0]).unwrap());
        let ls = g.constant(Tensor::new(&[1, 3], vec![0.1, 0.2, -0.4]).unwrap());
        let (tt, th) = sample_theta(&mut g, mu, ls, Tensor::zeros(&[1, 3])).unwrap();
        assert_eq!(g.value(tt).data(), &[0.3, -1.0, 2.0]);
        assert!((g.value(th).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn standard_posterior_with_zero_noise_is_uniform() {
        let mut g = Graph::new();
        let mu = g.constant(Tensor::zeros(&[1, 4]));
        let ls = g.constant(Tensor::zeros(&[1, 4]));
        let (_, th) = sample_theta(&mut g, mu, ls, Tensor::zeros(&[1, 4])).unwrap();
        assert!(g.value(th).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn theta_sum_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Tensor::uniform(&[1, 4], 1.0, &mut rng);
        let ls = Tensor::uniform(&[1, 4], 0.5, &mut rng);
        let mu = Tensor::uniform(&[1, 4], 1.0, &mut rng);
        // weighted sum so the softmax constraint does not make the gradient trivially zero
        let err = numeric_grad_check(
            |g, mu| {
                let ls = g.constant(ls.clone());
                let (_, th) = sample_theta(g, mu, ls, noise.clone())?;
                let w = g.constant(Tensor::new(&[1, 4], vec![1.0, -2.0, 0.5, 3.0])?);
                let p = g.mul(th, w)?;
                g.sum(p)
            },
            &mu,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
        let err = numeric_grad_check(
            |g, mu| {
                let ls = g.constant(ls.clone());
                let (_, th) = sample_theta(g, mu, ls, noise.clone())?;
                g.sum(th)
            },
            &mu,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn kl_closed_form_values() {
        assert_eq!(kl_divergence(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((kl_divergence(&[1.0], &[0.0]) - 0.5).abs() < 1e-15);
        let mut g = Graph::new();
        let mu = g.constant(Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap());
        let ls = g.constant(Tensor::zeros(&[2, 1]));
        let kl = kl_to_standard_normal(&mut g, mu, ls).unwrap();
        assert_eq!(g.value(kl).data(), &[0.5, 0.0]);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mu: Vec<f64> = (0..4).map(|i| 0.4 * i as f64 - 0.5).collect();
        let ls: Vec<f64> = vec![-0.3, 0.2, 0.0, 0.4];
        let closed = kl_divergence(&mu, &ls);
        // E_q[log q(x) - log p(x)] with x ~ q
        let n = 100_000;
        let mut total = 0.0;
        for _ in 0..n {
            let mut log_ratio = 0.0;
            for k in 0..4 {
                let e: f64 = StandardNormal.sample(&mut rng);
                let s = ls[k].exp();
                let x = mu[k] + s * e;
                let log_q = -0.5 * e * e - ls[k];
                let log_p = -0.5 * x * x;
                log_ratio += log_q - log_p;
            }
            total += log_ratio;
        }
        let mc = total / n as f64;
        assert!((mc - closed).abs() / closed < 0.01, "mc {mc} vs closed {closed}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn kl_is_nonnegative(mu in prop::collection::vec(-5.0f64..5.0, 1..8), ls_seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(ls_seed);
            let ls: Vec<f64> = Tensor::uniform(&[mu.len()], 3.0, &mut rng).into_data();
            let kl = kl_divergence(&mu, &ls);
            prop_assert!(kl >= 0.0);
            let zero = kl_divergence(&vec![0.0; mu.len()], &vec![0.0; mu.len()]);
            prop_assert_eq!(zero, 0.0);
            if mu.iter().any(|m| m.abs() > 1e-3) {
                prop_assert!(kl > 0.0);
            }
        }

        #[test]
        fn sampling_is_reproducible_and_shift_invariant(seed in any::<u64>(), shift in -20.0f64..20.0) {
            let p = params(4, 5, 3, 9, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let noise: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
            let a = GlobalContext::infer(&[1, 4, 4], &p, Some(&noise)).unwrap();
            let b = GlobalContext::infer(&[1, 4, 4], &p, Some(&noise)).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!((a.theta.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(a.theta.iter().all(|&t| t >= 0.0));

            let mut g = Graph::new();
            let shifted = g.constant(Tensor::new(&[1, 3], a.theta_tilde.iter().map(|v| v + shift).collect()).unwrap());
            let th = g.softmax(shifted).unwrap();
            for (x, y) in g.value(th).data().iter().zip(&a.theta) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
