#![allow(dead_code)]

use quickest_intervention::ProblemSpec;
use rand::Rng;

/// Random spec whose post-change distributions are MLR ordered, with `betas[A] == alpha`.
///
/// `betas[a](z)` is proportional to `alpha(z) exp(s_a g(z))` with `g` increasing
/// and `s_0 >= s_1 >= ... >= s_A = 0`, so each likelihood ratio
/// `betas[a-1] / betas[a]` is nondecreasing in `z`.
/// Two observations, one intervention level, short horizon.
pub fn tiny_spec() -> ProblemSpec {
    ProblemSpec::new(
        2,
        1,
        vec![0.7, 0.3],
        vec![vec![0.4, 0.6], vec![0.7, 0.3]],
        vec![0.0, 1.0],
        vec![0.0, 0.1],
        0.5,
        0.2,
    )
    .unwrap()
}

pub fn random_mlr_spec<R: Rng>(rng: &mut R, z: usize, a: usize, scale: f64) -> ProblemSpec {
    let raw: Vec<f64> = (0..z).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let alpha: Vec<f64> = raw.iter().map(|x| x / total).collect();

    let mut g = vec![0.0];
    for _ in 1..z {
        let last = *g.last().unwrap();
        g.push(last + rng.gen_range(0.1..1.0));
    }
    let mut s = vec![0.0; a + 1];
    for i in (0..a).rev() {
        s[i] = s[i + 1] + rng.gen_range(0.05..1.0) * scale;
    }
    let betas = s
        .iter()
        .map(|si| {
            let w: Vec<f64> = alpha
                .iter()
                .zip(&g)
                .map(|(al, gz)| al * (si * gz).exp())
                .collect();
            let t: f64 = w.iter().sum();
            w.into_iter().map(|x| x / t).collect()
        })
        .collect();

    let mut c_p = vec![0.0];
    for _ in 1..z {
        let last = *c_p.last().unwrap();
        c_p.push(last + rng.gen_range(0.0..2.0));
    }
    let mut c_i = vec![0.0];
    for _ in 0..a {
        let last = *c_i.last().unwrap();
        c_i.push(last + rng.gen_range(0.0..0.3));
    }
    ProblemSpec::new(
        z,
        a,
        alpha,
        betas,
        c_p,
        c_i,
        rng.gen_range(0.5..0.995),
        rng.gen_range(0.001..0.5),
    )
    .unwrap()
}

/// Bayes posterior written out independently of the library.
pub fn bayes(spec: &ProblemSpec, pi: f64, a: usize, z: usize) -> (f64, f64) {
    let p = pi + spec.lambda * (1.0 - pi);
    let post = p * spec.betas[a][z];
    let pre = (1.0 - p) * spec.alpha[z];
    let sigma = post + pre;
    (sigma, post / sigma)
}

/// Discounted Bellman recursion over every observation path, truncated at `depth`.
pub fn discounted_tree(spec: &ProblemSpec, pi: f64, level: usize, depth: u32) -> f64 {
    if depth == 0 {
        return 0.0;
    }
    let hi = (level + 1).min(spec.num_actions);
    (level..=hi)
        .map(|a| {
            let mut v = spec.c_i[a];
            for z in 0..spec.num_obs {
                let (sigma, post) = bayes(spec, pi, a, z);
                v += spec.rho * sigma * (spec.c_p[z] + discounted_tree(spec, post, a, depth - 1));
            }
            v
        })
        .fold(f64::INFINITY, f64::min)
}

/// Optimal undiscounted cost over the remaining `steps` decision times.
pub fn finite_tree(spec: &ProblemSpec, pi: f64, level: usize, steps: u32, constrained: bool) -> f64 {
    let actions: Vec<usize> = if constrained {
        (level..=(level + 1).min(spec.num_actions)).collect()
    } else {
        (0..=spec.num_actions).collect()
    };
    actions
        .into_iter()
        .map(|a| {
            let mut v = spec.c_i[a];
            if steps > 1 {
                for z in 0..spec.num_obs {
                    let (sigma, post) = bayes(spec, pi, a, z);
                    v += sigma * (spec.c_p[z] + finite_tree(spec, post, a, steps - 1, constrained));
                }
            }
            v
        })
        .fold(f64::INFINITY, f64::min)
}
