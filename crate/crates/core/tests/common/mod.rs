//! Independent oracles: finite differences, a conjugate-gradient maximizer
//! for the merge objective, and random instance generators.

#![allow(dead_code)]

use fishmerge::fisher::{FisherDiagonal, FisherInfo};
use fishmerge::model::{forward, Activation, ModelSpec};
use fishmerge::{FisherMode, ParameterSet, Role, Tensor, TensorMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central-difference gradient of `log p(y|x)` for every parameter.
pub fn finite_difference_grad(spec: &ModelSpec, params: &ParameterSet, x: &[f64], y: usize, h: f64) -> TensorMap {
    let logp = |p: &ParameterSet| forward(spec, p, x).unwrap().log_probs[y];
    let mut out = TensorMap::new();
    for (name, t, _) in params.iter() {
        let mut g = Vec::with_capacity(t.len());
        for j in 0..t.len() {
            let mut plus = t.data().to_vec();
            let mut minus = t.data().to_vec();
            plus[j] += h;
            minus[j] -= h;
            let mut pp = params.clone();
            pp.replace_data(name, plus).unwrap();
            let mut pm = params.clone();
            pm.replace_data(name, minus).unwrap();
            g.push((logp(&pp) - logp(&pm)) / (2.0 * h));
        }
        out.insert(name.to_string(), Tensor::new(t.shape().to_vec(), g).unwrap());
    }
    out
}

/// Pass when within `rel` relative error or `abs_floor` absolute.
pub fn close(a: f64, b: f64, rel: f64, abs_floor: f64) -> bool {
    let d = (a - b).abs();
    d <= abs_floor || d <= rel * a.abs().max(b.abs())
}

pub fn random_spec(r: &mut ChaCha8Rng) -> ModelSpec {
    let acts = [Activation::Tanh, Activation::Relu, Activation::Identity];
    let depth = r.gen_range(0..3);
    let hidden: Vec<(usize, Activation)> = (0..depth).map(|_| (r.gen_range(1..7), acts[r.gen_range(0..3)])).collect();
    ModelSpec::new(r.gen_range(1..5), &hidden, r.gen_range(2..6))
}

/// Random parameters with weights on a scale that keeps logits moderate.
pub fn random_params(spec: &ModelSpec, r: &mut ChaCha8Rng) -> ParameterSet {
    let mut p = fishmerge::model::init_params(spec, r.gen()).unwrap();
    let names: Vec<String> = p.names().map(str::to_string).collect();
    for name in names {
        let n = p.get(&name).unwrap().len();
        p.replace_data(&name, (0..n).map(|_| r.gen_range(-1.2..1.2)).collect()).unwrap();
    }
    p
}

pub fn vector_params(lineage: &str, w: &[f64]) -> ParameterSet {
    let mut p = ParameterSet::new(lineage);
    p.insert("w", Tensor::from_vec(w.to_vec()).unwrap(), Role::Body).unwrap();
    p
}

pub fn vector_fisher(lineage: &str, f: &[f64]) -> FisherDiagonal {
    let info = FisherInfo { n_examples_used: 1, mode: FisherMode::Exact, seed: 0, dataset: String::new() };
    FisherDiagonal::new(vector_params(lineage, f), info).unwrap()
}

/// Random merge instance: `m` models of dimension `dim`.
#[derive(Clone)]
pub struct Instance {
    pub thetas: Vec<ParameterSet>,
    pub fishers: Vec<FisherDiagonal>,
    pub lambdas: Vec<f64>,
}

pub fn random_instance(r: &mut ChaCha8Rng, m: usize, dim: usize, f_lo: f64, f_hi: f64) -> Instance {
    let thetas =
        (0..m).map(|_| vector_params("l", &(0..dim).map(|_| r.gen_range(-2.0..2.0)).collect::<Vec<_>>())).collect();
    let fishers = (0..m)
        .map(|_| {
            let f: Vec<f64> = (0..dim).map(|_| r.gen_range(f_lo.ln()..f_hi.ln()).exp()).collect();
            vector_fisher("l", &f)
        })
        .collect();
    let e: Vec<f64> = (0..m).map(|_| -r.gen_range(1e-9f64..1.0).ln()).collect();
    let s: f64 = e.iter().sum();
    Instance { thetas, fishers, lambdas: e.into_iter().map(|v| v / s).collect() }
}

/// Maximizes `-1/2 sum_i l_i sum_j F_ij (t_j - theta_ij)^2` by restarted
/// conjugate gradient using only gradient evaluations.
pub fn maximize_objective_cg(inst: &Instance) -> Vec<f64> {
    let dim = inst.thetas[0].get("w").unwrap().len();
    let grad = |t: &[f64]| -> Vec<f64> {
        (0..dim)
            .map(|j| {
                -inst
                    .thetas
                    .iter()
                    .zip(&inst.fishers)
                    .zip(&inst.lambdas)
                    .map(|((th, f), l)| l * f.get("w").unwrap().data()[j] * (t[j] - th.get("w").unwrap().data()[j]))
                    .sum::<f64>()
            })
            .collect()
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut t = vec![0.0; dim];
    for _restart in 0..20 {
        let mut g = grad(&t);
        let mut d = g.clone();
        for _ in 0..(2 * dim) {
            let gg = dot(&g, &g);
            if gg == 0.0 {
                break;
            }
            // curvature along d from a gradient difference (objective is quadratic)
            let probe: Vec<f64> = t.iter().zip(&d).map(|(a, b)| a + b).collect();
            let gp = grad(&probe);
            let hd: Vec<f64> = g.iter().zip(&gp).map(|(a, b)| a - b).collect();
            let curv = dot(&d, &hd);
            if curv <= 0.0 {
                break;
            }
            let step = dot(&g, &d) / curv;
            for (ti, di) in t.iter_mut().zip(&d) {
                *ti += step * di;
            }
            let g_new = grad(&t);
            let beta = dot(&g_new, &g_new) / gg;
            d = g_new.iter().zip(&d).map(|(a, b)| a + beta * b).collect();
            g = g_new;
        }
    }
    t
}
