//! Reference computations written without the library's estimation code.

#![allow(dead_code)]

use mlta::Dataset;
use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng as StdRng;

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn lse(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|a| (a - m).exp()).sum::<f64>().ln()
}

/// Softmax with a zero first logit.
fn gating(beta: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    let mut logits = vec![0.0];
    for h in 0..beta.nrows() {
        logits.push((0..x.len()).map(|j| beta[(h, j)] * x[j]).sum());
    }
    let m = lse(&logits);
    logits.iter().map(|l| (l - m).exp()).collect()
}

/// Maximizes `sum_i sum_g z_ig ln eta_g(x_i)` by damped Newton on the full
/// Hessian.
pub fn fit_gating(x: &Array2<f64>, z: &Array2<f64>, start: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, p) = x.dim();
    let g = z.ncols();
    let q = (g - 1) * p;
    let obj = |b: &DMatrix<f64>| -> f64 {
        (0..n)
            .map(|i| {
                let eta = gating(b, x.row(i).as_slice().unwrap());
                (0..g).map(|h| z[[i, h]] * eta[h].max(1e-300).ln()).sum::<f64>()
            })
            .sum()
    };
    let mut beta = start.clone();
    let mut cur = obj(&beta);
    for _ in 0..100 {
        let mut grad = DVector::<f64>::zeros(q);
        let mut hess = DMatrix::<f64>::zeros(q, q);
        for i in 0..n {
            let xi = x.row(i);
            let eta = gating(&beta, xi.as_slice().unwrap());
            for a in 1..g {
                for j in 0..p {
                    grad[(a - 1) * p + j] += (z[[i, a]] - eta[a]) * xi[j];
                    for c in 1..g {
                        let w = eta[a] * ((a == c) as u8 as f64 - eta[c]);
                        for l in 0..p {
                            hess[((a - 1) * p + j, (c - 1) * p + l)] += w * xi[j] * xi[l];
                        }
                    }
                }
            }
        }
        if grad.norm() < 1e-11 {
            break;
        }
        let step = hess.lu().solve(&grad).expect("gating Hessian invertible");
        let mut t = 1.0;
        loop {
            let mut cand = beta.clone();
            for a in 0..g - 1 {
                for j in 0..p {
                    cand[(a, j)] += t * step[a * p + j];
                }
            }
            let v = obj(&cand);
            if v >= cur || t < 1e-10 {
                beta = cand;
                cur = v;
                break;
            }
            t *= 0.5;
        }
    }
    beta
}

#[derive(Debug, Clone)]
pub struct LcFit {
    pub loglik: f64,
    pub probs: Array2<f64>,
    pub beta: DMatrix<f64>,
}

fn lc_loglik_and_post(data: &Dataset, probs: &Array2<f64>, beta: &DMatrix<f64>) -> (f64, Array2<f64>) {
    let (n, g) = (data.n(), probs.nrows());
    let mut post = Array2::zeros((n, g));
    let mut ll = 0.0;
    for i in 0..n {
        let eta = gating(beta, data.x().row(i).as_slice().unwrap());
        let lj: Vec<f64> = (0..g)
            .map(|h| {
                eta[h].ln()
                    + (0..data.r())
                        .map(|k| {
                            let p = probs[[h, k]];
                            if data.y()[[i, k]] == 1 { p.ln() } else { (1.0 - p).ln() }
                        })
                        .sum::<f64>()
            })
            .collect();
        let m = lse(&lj);
        ll += m;
        for h in 0..g {
            post[[i, h]] = (lj[h] - m).exp();
        }
    }
    (ll, post)
}

/// Plain EM for a latent class model with a multinomial-logit prior,
/// best of `starts` random starts plus an optional warm start given as
/// `(tie probabilities, gating coefficients)`.
pub fn lc_em(data: &Dataset, g: usize, starts: usize, seed: u64, warm: Option<(&Array2<f64>, &DMatrix<f64>)>) -> LcFit {
    let (n, r, p) = (data.n(), data.r(), data.p());
    let mut rng = StdRng::seed_from_u64(seed);
    let mut best: Option<LcFit> = None;
    for s in 0..starts + warm.is_some() as usize {
        let mut beta = DMatrix::zeros(g - 1, p);
        let mut z = match warm {
            Some((pr, b)) if s == starts => {
                beta = b.clone();
                lc_loglik_and_post(data, pr, b).1
            }
            _ => {
                let mut z = Array2::from_shape_fn((n, g), |_| rng.random::<f64>() + 0.05);
                for mut row in z.rows_mut() {
                    let s = row.sum();
                    row /= s;
                }
                z
            }
        };
        let mut probs = Array2::zeros((g, r));
        let mut last = f64::NEG_INFINITY;
        for _ in 0..20_000 {
            for h in 0..g {
                let tot: f64 = z.column(h).sum();
                for k in 0..r {
                    let hit: f64 = (0..n).map(|i| z[[i, h]] * data.y()[[i, k]] as f64).sum();
                    probs[[h, k]] = hit / tot;
                }
            }
            if g > 1 {
                beta = fit_gating(data.x(), &z, &beta);
            }
            let (ll, post) = lc_loglik_and_post(data, &probs, &beta);
            z = post;
            if (ll - last).abs() < 1e-13 * ll.abs() {
                last = ll;
                break;
            }
            last = ll;
        }
        if best.as_ref().is_none_or(|b| last > b.loglik) {
            best = Some(LcFit {
                loglik: last,
                probs: probs.clone(),
                beta: beta.clone(),
            });
        }
    }
    best.unwrap()
}

/// Latent class log-likelihood by summing over every joint label vector.
pub fn lc_loglik_enumerated(data: &Dataset, probs: &Array2<f64>, beta: &DMatrix<f64>) -> f64 {
    let (n, g) = (data.n(), probs.nrows());
    let total = g.pow(n as u32);
    let mut terms = Vec::with_capacity(total);
    for code in 0..total {
        let mut c = code;
        let mut lp = 0.0;
        for i in 0..n {
            let h = c % g;
            c /= g;
            let eta = gating(beta, data.x().row(i).as_slice().unwrap());
            lp += eta[h].ln();
            for k in 0..data.r() {
                let pk = probs[[h, k]];
                lp += if data.y()[[i, k]] == 1 { pk.ln() } else { (1.0 - pk).ln() };
            }
        }
        terms.push(lp);
    }
    lse(&terms)
}

/// Gauss-Hermite rule (weight `exp(-t^2)`) from the Jacobi matrix
/// eigendecomposition.
pub fn golub_welsch(n: usize) -> (Vec<f64>, Vec<f64>) {
    let j = DMatrix::from_fn(n, n, |a, b| {
        if a.abs_diff(b) == 1 {
            ((a.max(b)) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let eig = j.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], std::f64::consts::PI.sqrt() * v * v)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Parameters of an unconstrained D = 1 model in plain containers.
#[derive(Debug, Clone)]
pub struct TraitModel {
    pub beta: DMatrix<f64>,
    /// G x R
    pub b: Array2<f64>,
    /// G x R
    pub w: Array2<f64>,
}

impl TraitModel {
    pub fn from_model(m: &mlta::MltaModel) -> Self {
        assert_eq!(m.trait_dim(), 1);
        let g = m.n_groups();
        let r = m.n_skills();
        Self {
            beta: DMatrix::from_fn(g - 1, m.n_covariates(), |a, j| m.gating.beta[[a, j]]),
            b: m.items.b.clone(),
            w: Array2::from_shape_fn((g, r), |(h, k)| m.items.slope(h, k)[0]),
        }
    }
}

/// Node posterior weights `(ln L, r[i, g, q])` under a D = 1 model.
fn quadrature_e_step(data: &Dataset, m: &TraitModel, u: &[f64], lw: &[f64]) -> (f64, Array3<f64>) {
    let (n, r) = (data.n(), data.r());
    let g = m.b.nrows();
    let nq = u.len();
    let mut post = Array3::zeros((n, g, nq));
    let mut ll = 0.0;
    let mut terms = vec![0.0; g * nq];
    for i in 0..n {
        let eta = gating(&m.beta, data.x().row(i).as_slice().unwrap());
        for h in 0..g {
            for q in 0..nq {
                let mut s = eta[h].ln() + lw[q];
                for k in 0..r {
                    let pr = logistic(m.b[[h, k]] + m.w[[h, k]] * u[q]);
                    s += if data.y()[[i, k]] == 1 { pr.ln() } else { (1.0 - pr).ln() };
                }
                terms[h * nq + q] = s;
            }
        }
        let tot = lse(&terms);
        ll += tot;
        for h in 0..g {
            for q in 0..nq {
                post[[i, h, q]] = (terms[h * nq + q] - tot).exp();
            }
        }
    }
    (ll, post)
}

/// Marginal log-likelihood of a D = 1 model by quadrature.
pub fn quadrature_loglik(data: &Dataset, m: &TraitModel, nodes: usize) -> f64 {
    let (t, w) = golub_welsch(nodes);
    let u: Vec<f64> = t.iter().map(|v| v * std::f64::consts::SQRT_2).collect();
    let lw: Vec<f64> = w.iter().map(|v| (v / std::f64::consts::PI.sqrt()).ln()).collect();
    quadrature_e_step(data, m, &u, &lw).0
}

/// Maximum likelihood for an unconstrained D = 1 model: EM with the trait
/// integrated by fixed quadrature, started at `init`.
pub fn quadrature_mle(data: &Dataset, init: &TraitModel, nodes: usize, tol: f64) -> (TraitModel, f64) {
    // a few Newton steps per M-step keep each iteration ascending
    let newton_steps = 4;
    let (t, w) = golub_welsch(nodes);
    let u: Vec<f64> = t.iter().map(|v| v * std::f64::consts::SQRT_2).collect();
    let lw: Vec<f64> = w.iter().map(|v| (v / std::f64::consts::PI.sqrt()).ln()).collect();
    let (n, r) = (data.n(), data.r());
    let g = init.b.nrows();
    let nq = u.len();
    let mut m = init.clone();
    let mut last = f64::NEG_INFINITY;
    for _ in 0..5000 {
        let (ll, post) = quadrature_e_step(data, &m, &u, &lw);
        if (ll - last).abs() < tol * ll.abs() {
            last = ll;
            break;
        }
        last = ll;
        // weighted logistic regressions of y_k on (1, u_q)
        for h in 0..g {
            for k in 0..r {
                let (mut b, mut s) = (m.b[[h, k]], m.w[[h, k]]);
                for _ in 0..newton_steps {
                    let (mut g0, mut g1, mut h00, mut h01, mut h11) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..n {
                        let y = data.y()[[i, k]] as f64;
                        for q in 0..nq {
                            let wt = post[[i, h, q]];
                            if wt < 1e-300 {
                                continue;
                            }
                            let pr = logistic(b + s * u[q]);
                            let e = wt * (y - pr);
                            let c = wt * pr * (1.0 - pr);
                            g0 += e;
                            g1 += e * u[q];
                            h00 += c;
                            h01 += c * u[q];
                            h11 += c * u[q] * u[q];
                        }
                    }
                    let det = h00 * h11 - h01 * h01;
                    let db = (h11 * g0 - h01 * g1) / det;
                    let ds = (h00 * g1 - h01 * g0) / det;
                    b += db;
                    s += ds;
                    if db.abs().max(ds.abs()) < 1e-12 {
                        break;
                    }
                }
                m.b[[h, k]] = b;
                m.w[[h, k]] = s;
            }
        }
        if g > 1 {
            let z = Array2::from_shape_fn((n, g), |(i, h)| (0..nq).map(|q| post[[i, h, q]]).sum());
            m.beta = fit_gating(data.x(), &z, &m.beta);
        }
    }
    (m, last)
}

/// Monte Carlo estimate of one sender's component likelihood with plain
/// independent draws.
pub fn mc_component(y: &[u8], b: &[f64], w: &[f64], draws: usize, seed: u64) -> f64 {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..draws {
        // Box-Muller
        let (a, c): (f64, f64) = (rng.random::<f64>().max(1e-300), rng.random());
        let u = (-2.0 * a.ln()).sqrt() * (std::f64::consts::TAU * c).cos();
        let mut l = 1.0;
        for k in 0..y.len() {
            let pr = logistic(b[k] + w[k] * u);
            l *= if y[k] == 1 { pr } else { 1.0 - pr };
        }
        acc += l;
    }
    acc / draws as f64
}
