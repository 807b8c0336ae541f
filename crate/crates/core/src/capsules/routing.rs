use crate::tensor::{Graph, Real, Result, Tensor, TensorError, Var};

/// One routing iteration. `c_pre` produced `v`; `c_post` is the softmax of
/// the logits after this iteration's update.
#[derive(Clone, Copy, Debug)]
pub struct RoutingStep {
    pub c_pre: Var,
    pub c_post: Var,
    pub logits: Var,
    pub activations: Var,
}

/// Result of routing `lower` capsules into `upper` capsules.
///
/// Agreement and logit tensors are `[lower, upper]`; activations are
/// `[upper, dim]`.
#[derive(Clone, Debug)]
pub struct Routing {
    pub activations: Var,
    pub agreements: Var,
    pub logits: Var,
    pub steps: Vec<RoutingStep>,
}

impl Routing {
    pub fn iterations(&self) -> usize {
        self.steps.len()
    }
}

/// Routing-by-agreement over prediction vectors `p` (`[lower, upper, dim]`).
///
/// Logits start at zero. Each iteration takes `c = softmax_upper(b)`,
/// `s_j = Σ_i c_ij p_ij`, `v_j = squash(s_j)` and adds `p_ij·v_j` to `b_ij`.
/// When `bias` is given it is added to the logits after the agreement term
/// on every iteration.
pub fn route<F: Real>(g: &mut Graph<'_, F>, p: Var, iters: usize, bias: Option<Var>) -> Result<Routing> {
    if iters == 0 {
        return Err(TensorError::Invalid("routing needs at least one iteration"));
    }
    let (lower, upper) = match *g.shape(p) {
        [n, m, _] => (n, m),
        ref s => {
            return Err(TensorError::InvalidShape {
                shape: s.to_vec(),
                len: g.value(p).len(),
            })
        }
    };
    if let Some(b) = bias {
        if g.shape(b) != [lower, upper] {
            return Err(TensorError::ShapeMismatch {
                op: "route",
                left: g.shape(b).to_vec(),
                right: vec![lower, upper],
            });
        }
    }
    let zeros = g.constant(Tensor::zeros(&[lower, upper]));
    let mut c = g.softmax_rows(zeros)?;
    let mut logits = zeros;
    let mut steps = Vec::with_capacity(iters);
    for it in 0..iters {
        let s = g.route_sum(c, p)?;
        let v = g.squash_rows(s)?;
        let mut delta = g.agreement(p, v)?;
        if let Some(b) = bias {
            delta = g.add(delta, b)?;
        }
        logits = if it == 0 { delta } else { g.add(logits, delta)? };
        let c_post = g.softmax_rows(logits)?;
        // non-finite inputs are reported as divergence by the caller
        debug_assert!(
            !g.value(logits).iter().all(|x| x.as_f64().is_finite()) || check_invariants(g, c_post, v, 1e-6).is_ok()
        );
        steps.push(RoutingStep {
            c_pre: c,
            c_post,
            logits,
            activations: v,
        });
        c = c_post;
    }
    let last = steps[iters - 1];
    Ok(Routing {
        activations: last.activations,
        agreements: last.c_post,
        logits,
        steps,
    })
}

/// Violation of a routing invariant.
#[derive(Clone, Debug, PartialEq)]
pub enum InvariantViolation {
    AgreementSum { lower: usize, sum: f64 },
    AgreementRange { lower: usize, upper: usize, value: f64 },
    ActivationNorm { upper: usize, norm: f64 },
}

/// Checks that every row of `c` is a distribution (within `tol`) and that
/// every row of `v` has norm below one.
pub fn check_invariants<F: Real>(
    g: &Graph<'_, F>,
    c: Var,
    v: Var,
    tol: f64,
) -> std::result::Result<(), InvariantViolation> {
    let upper = *g.shape(c).last().unwrap_or(&1);
    for (i, row) in g.value(c).chunks(upper).enumerate() {
        let mut sum = 0.0;
        for (j, &x) in row.iter().enumerate() {
            let x = x.as_f64();
            if !(0.0..=1.0).contains(&x) {
                return Err(InvariantViolation::AgreementRange {
                    lower: i,
                    upper: j,
                    value: x,
                });
            }
            sum += x;
        }
        if (sum - 1.0).abs() > tol {
            return Err(InvariantViolation::AgreementSum { lower: i, sum });
        }
    }
    let dim = *g.shape(v).last().unwrap_or(&1);
    for (j, row) in g.value(v).chunks(dim).enumerate() {
        let norm = row.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
        if norm.is_nan() || norm >= 1.0 {
            return Err(InvariantViolation::ActivationNorm { upper: j, norm });
        }
    }
    Ok(())
}

/// Per-iteration values of one routing run, detached from the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingTrace<F: Real> {
    pub activations: Tensor<F>,
    pub agreements: Tensor<F>,
    pub logits: Tensor<F>,
    pub pre: Vec<Tensor<F>>,
    pub post: Vec<Tensor<F>>,
}

impl<F: Real> RoutingTrace<F> {
    pub fn from_graph(g: &Graph<'_, F>, r: &Routing) -> Self {
        Self {
            activations: g.tensor(r.activations),
            agreements: g.tensor(r.agreements),
            logits: g.tensor(r.logits),
            pre: r.steps.iter().map(|s| g.tensor(s.c_pre)).collect(),
            post: r.steps.iter().map(|s| g.tensor(s.c_post)).collect(),
        }
    }
}

/// Value-level routing without gradient tracking.
pub fn run_routing<F: Real>(p: &Tensor<F>, iters: usize) -> Result<RoutingTrace<F>> {
    let params = crate::tensor::ParamSet::new();
    let mut g = Graph::new(&params);
    let pv = g.constant(p.clone());
    let r = route(&mut g, pv, iters, None)?;
    Ok(RoutingTrace::from_graph(&g, &r))
}

/// Value-level re-routing: routing whose logit update also adds
/// `alpha · p_ijᵀ W u_hat`.
pub fn run_rerouting<F: Real>(
    p: &Tensor<F>,
    w_rr: &Tensor<F>,
    u_hat: &[F],
    alpha: F,
    iters: usize,
) -> Result<RoutingTrace<F>> {
    let params = crate::tensor::ParamSet::new();
    let mut g = Graph::new(&params);
    let pv = g.constant(p.clone());
    let w = g.constant(w_rr.clone());
    let u = g.constant(Tensor::vector(u_hat.to_vec()));
    let bias = g.bilinear(pv, w, u)?;
    let bias = g.scale(bias, alpha);
    let r = route(&mut g, pv, iters, Some(bias))?;
    Ok(RoutingTrace::from_graph(&g, &r))
}

/// Mean Shannon entropy (nats) of the rows of a `[lower, upper]` agreement
/// matrix.
pub fn mean_entropy<F: Real>(c: &Tensor<F>) -> f64 {
    let upper = *c.shape().last().unwrap_or(&1);
    let rows = c.numel() / upper;
    let total: f64 = c
        .data()
        .iter()
        .map(|&x| {
            let x = x.as_f64();
            if x > 0.0 {
                -x * x.ln()
            } else {
                0.0
            }
        })
        .sum();
    total / rows as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, squash, Gradients, ParamSet};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_p(n: usize, m: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let data = (0..n * m * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![n, m, d], data).unwrap()
    }

    #[test]
    fn zero_iterations_rejected() {
        let p = Tensor::<f64>::zeros(&[2, 2, 2]);
        assert!(run_routing(&p, 0).is_err());
    }

    #[test]
    fn single_upper_capsule_takes_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_p(4, 1, 3, &mut rng);
        let r = run_routing(&p, 3).unwrap();
        for c in r.pre.iter().chain(&r.post) {
            assert!(c.data().iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn first_iteration_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_p(3, 4, 2, &mut rng);
        let r = run_routing(&p, 2).unwrap();
        assert!(r.pre[0].data().iter().all(|&x| x == 0.25));
        assert_eq!(r.pre[1], r.post[0]);
    }

    #[test]
    fn one_iteration_squashes_uniform_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, m, d) = (3, 4, 2);
        let p = random_p(n, m, d, &mut rng);
        let r = run_routing(&p, 1).unwrap();
        for j in 0..m {
            let mut s = vec![0.0; d];
            for i in 0..n {
                for (x, e) in s.iter_mut().enumerate() {
                    *e += p.data()[(i * m + j) * d + x] / m as f64;
                }
            }
            let v = squash(&s);
            for (a, b) in r.activations.row(j).iter().zip(&v) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn reroute_without_bias_matches_routing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_p(3, 4, 2, &mut rng);
        let w = Tensor::new(vec![2, 3], (0..6).map(|i| i as f64 * 0.3 - 0.5).collect()).unwrap();
        let u = [0.2, -0.4, 0.3];
        let base = run_routing(&p, 3).unwrap();
        assert_eq!(run_rerouting(&p, &w, &u, 0.0, 3).unwrap(), base);
        let zero_w = Tensor::zeros(&[2, 3]);
        assert_eq!(run_rerouting(&p, &zero_w, &u, 0.1, 3).unwrap(), base);
    }

    #[test]
    fn bias_shape_checked() {
        let params = ParamSet::<f64>::new();
        let mut g = Graph::new(&params);
        let p = g.constant(Tensor::zeros(&[2, 3, 2]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        assert!(route(&mut g, p, 1, Some(b)).is_err());
    }

    #[test]
    fn entropy_of_uniform_and_one_hot() {
        let u = Tensor::new(vec![2, 4], vec![0.25; 8]).unwrap();
        assert!((mean_entropy(&u) - 4f64.ln()).abs() < 1e-12);
        let h = Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(mean_entropy(&h), 0.0);
    }

    #[test]
    fn gradient_through_routing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_p(3, 2, 3, &mut rng);
        let err = grad_check(
            |g, x| {
                let t = g.tanh(x);
                let r = route(g, t, 3, None)?;
                let n = g.row_norms(r.activations)?;
                let w = g.constant(Tensor::vector(vec![0.7, -1.3]));
                let a = g.dot(n, w)?;
                let c = g.constant(Tensor::new(vec![3, 2], vec![0.5, -0.2, 0.1, 0.9, -0.4, 0.3]).unwrap());
                let b = g.mul(r.agreements, c)?;
                let b = g.sum(b);
                g.add(a, b)
            },
            &p,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn gradient_through_rerouting_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_p(3, 2, 2, &mut rng);
        let w: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let err = grad_check(
            |g, x| {
                let w = g.constant(Tensor::new(vec![2, 3], w.clone()).unwrap());
                let u = g.constant(Tensor::vector(vec![0.4, -0.3, 0.6]));
                let bias = g.bilinear(x, w, u)?;
                let bias = g.scale(bias, 0.5);
                let r = route(g, x, 2, Some(bias))?;
                let mask = vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
                let sel = g.mul_const(r.agreements, mask)?;
                Ok(g.sum(sel))
            },
            &p,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
        let _ = Gradients::<f64>::zeros_like(&ParamSet::new());
    }

    proptest! {
        #[test]
        fn routing_invariants(seed in 0u64..1000, n in 1usize..6, m in 1usize..6, d in 1usize..5, iters in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_p(n, m, d, &mut rng).cast::<f64>();
            let params = ParamSet::new();
            let mut g = Graph::new(&params);
            let pv = g.constant(p);
            let r = route(&mut g, pv, iters, None).unwrap();
            for s in &r.steps {
                prop_assert!(check_invariants(&g, s.c_pre, s.activations, 1e-9).is_ok());
                prop_assert!(check_invariants(&g, s.c_post, s.activations, 1e-9).is_ok());
            }
        }

        #[test]
        fn permuting_upper_capsules_permutes_outputs(seed in 0u64..1000, n in 1usize..5, m in 2usize..5, d in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_p(n, m, d, &mut rng);
            let shift = |j: usize| (j + 1) % m;
            let mut q = Tensor::zeros(&[n, m, d]);
            for i in 0..n {
                for j in 0..m {
                    let src = &p.data()[(i * m + j) * d..(i * m + j + 1) * d];
                    q.data_mut()[(i * m + shift(j)) * d..(i * m + shift(j) + 1) * d].copy_from_slice(src);
                }
            }
            let a = run_routing(&p, 2).unwrap();
            let b = run_routing(&q, 2).unwrap();
            for i in 0..n {
                for j in 0..m {
                    prop_assert!((a.agreements.at(i, j) - b.agreements.at(i, shift(j))).abs() < 1e-12);
                }
            }
            for j in 0..m {
                for x in 0..d {
                    prop_assert!((a.activations.at(j, x) - b.activations.at(shift(j), x)).abs() < 1e-12);
                }
            }
        }
    }
}
