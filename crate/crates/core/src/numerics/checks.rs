//! Gradient-check scenarios covering every differentiable op.

use super::{grad_check, GradCheckReport, NumericsError, ParamStore, Tape, Tensor, Var};
use crate::rng::XorShift64;

pub const DEFAULT_EPS: f64 = 1e-5;

fn random(rng: &mut XorShift64, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| rng.uniform(lo, hi))
}

type Scenario = (&'static str, ParamStore<f64>, Box<dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var, NumericsError>>);

/// Weighted sum with fixed random weights so every output coordinate
/// reaches the loss with a distinct sensitivity.
fn probe(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var, NumericsError> {
    let (r, c) = tape.shape(x);
    let mut rng = XorShift64::new(seed);
    let w = tape.constant(random(&mut rng, r, c, -1.0, 1.0));
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

fn scenarios(seed: u64) -> Vec<Scenario> {
    let mut rng = XorShift64::new(seed);
    let mut out: Vec<Scenario> = Vec::new();

    let mut ps = ParamStore::new();
    ps.insert("a", random(&mut rng, 4, 3, -1.0, 1.0));
    ps.insert("b", random(&mut rng, 3, 5, -1.0, 1.0));
    ps.insert("c", random(&mut rng, 3, 5, -1.0, 1.0));
    out.push((
        "matmul",
        ps,
        Box::new(|t, p| {
            let a = t.param("a", p.expect("a"));
            let b = t.param("b", p.expect("b"));
            let c = t.param("c", p.expect("c"));
            let ab = t.matmul(a, b)?;
            let abct = t.matmul_nt(ab, c)?;
            probe(t, abct, 1)
        }),
    ));

    let mut ps = ParamStore::new();
    ps.insert("x", random(&mut rng, 3, 4, -1.0, 1.0));
    ps.insert("row", random(&mut rng, 1, 4, -1.0, 1.0));
    ps.insert("col", random(&mut rng, 3, 1, -1.0, 1.0));
    ps.insert("s", random(&mut rng, 1, 1, -1.0, 1.0));
    out.push((
        "add_mul_scale",
        ps,
        Box::new(|t, p| {
            let x = t.param("x", p.expect("x"));
            let row = t.param("row", p.expect("row"));
            let col = t.param("col", p.expect("col"));
            let s = t.param("s", p.expect("s"));
            let a = t.add(x, row)?;
            let b = t.mul(a, col)?;
            let c = t.mul(b, s)?;
            let d = t.mul(c, x)?;
            let e = t.add(d, s)?;
            let f = t.scale(e, 0.7)?;
            probe(t, f, 2)
        }),
    ));

    let mut ps = ParamStore::new();
    ps.insert("x", random(&mut rng, 3, 4, -1.0, 1.0));
    ps.insert("y", random(&mut rng, 2, 4, -1.0, 1.0));
    ps.insert("z", random(&mut rng, 3, 2, -1.0, 1.0));
    out.push((
        "concat_slice",
        ps,
        Box::new(|t, p| {
            let x = t.param("x", p.expect("x"));
            let y = t.param("y", p.expect("y"));
            let z = t.param("z", p.expect("z"));
            let rows = t.concat_rows(&[x, y])?;
            let mid = t.slice_rows(rows, 1, 3)?;
            let cols = t.concat_cols(&[mid, z])?;
            let part = t.slice_cols(cols, 2, 4)?;
            probe(t, part, 3)
        }),
    ));

    let mut ps = ParamStore::new();
    ps.insert("table", random(&mut rng, 6, 4, -1.0, 1.0));
    out.push((
        "embedding",
        ps,
        Box::new(|t, p| {
            let table = t.param("table", p.expect("table"));
            let e = t.embedding(table, &[0, 3, 3, 5, 1])?;
            probe(t, e, 4)
        }),
    ));

    let mut ps = ParamStore::new();
    ps.insert("x", random(&mut rng, 3, 6, -2.0, 2.0));
    ps.insert("gamma", random(&mut rng, 1, 6, 0.5, 1.5));
    ps.insert("beta", random(&mut rng, 1, 6, -0.5, 0.5));
    out.push((
        "layer_norm",
        ps,
        Box::new(|t, p| {
            let x = t.param("x", p.expect("x"));
            let g = t.param("gamma", p.expect("gamma"));
            let b = t.param("beta", p.expect("beta"));
            let y = t.layer_norm(x, g, b)?;
            probe(t, y, 5)
        }),
    ));

    let mut ps = ParamStore::new();
    ps.insert("x", random(&mut rng, 4, 5, -3.0, 3.0));
    out.push((
        "gelu_sigmoid_softmax",
        ps,
        Box::new(|t, p| {
            let x = t.param("x", p.expect("x"));
            let a = t.gelu(x)?;
            let b = t.sigmoid(a)?;
            let c = t.softmax_rows(x)?;
            let d = t.add(b, c)?;
            probe(t, d, 6)
        }),
    ));

    let mut ps = ParamStore::new();
    ps.insert("x", random(&mut rng, 4, 6, -2.0, 2.0));
    ps.insert("row", random(&mut rng, 1, 6, -2.0, 2.0));
    ps.insert("col", random(&mut rng, 4, 1, -2.0, 2.0));
    out.push((
        "biased_softmax",
        ps,
        Box::new(|t, p| {
            let x = t.param("x", p.expect("x"));
            let row = t.param("row", p.expect("row"));
            let col = t.param("col", p.expect("col"));
            let a = t.softmax_rows_biased(x, row)?;
            let b = t.softmax_rows_biased(x, col)?;
            let pa = probe(t, a, 12)?;
            let pb = probe(t, b, 13)?;
            t.add(pa, pb)
        }),
    ));

    let mut ps = ParamStore::new();
    ps.insert("logits", random(&mut rng, 5, 3, -2.0, 2.0));
    out.push((
        "cross_entropy",
        ps,
        Box::new(|t, p| {
            let l = t.param("logits", p.expect("logits"));
            t.cross_entropy(l, &[0, 2, 1, 2, 2], &[1.0, 0.1, 1.0, 0.1, 0.1])
        }),
    ));

    let mut ps = ParamStore::new();
    ps.insert("x", random(&mut rng, 3, 4, -1.0, 1.0));
    let target = random(&mut rng, 3, 4, 1.5, 2.5);
    out.push((
        "l1_mean_sum",
        ps,
        Box::new(move |t, p| {
            let x = t.param("x", p.expect("x"));
            let l = t.l1(x, &target)?;
            let m = t.mean(x)?;
            let s = t.sum(x)?;
            let ms = t.mul(m, s)?;
            t.add(l, ms)
        }),
    ));

    let mut ps = ParamStore::new();
    ps.insert("box", Tensor::row_vector(&[0.42, 0.55, 0.3, 0.22]));
    out.push((
        "giou",
        ps,
        Box::new(|t, p| {
            let b = t.param("box", p.expect("box"));
            let overlap = t.giou(b, [0.5, 0.5, 0.25, 0.3])?;
            let disjoint = t.giou(b, [0.9, 0.1, 0.1, 0.1])?;
            let twice = t.scale(disjoint, 2.0)?;
            t.add(overlap, twice)
        }),
    ));
    out
}

/// Runs every op scenario; returns (scenario name, report).
pub fn op_gradient_suite(seed: u64, eps: f64) -> Vec<(&'static str, GradCheckReport)> {
    scenarios(seed)
        .into_iter()
        .map(|(name, params, f)| {
            let report = grad_check(|t, p| f(t, p), &params, eps, 64, seed ^ 0x5eed)
                .expect("scenario evaluates");
            (name, report)
        })
        .collect()
}

/// `f(p) = Σ c_i (p_i − m_i)²`, whose central differences are exact up to
/// roundoff.
pub fn quadratic_bowl_check(seed: u64, eps: f64) -> GradCheckReport {
    let mut rng = XorShift64::new(seed);
    let mut ps = ParamStore::new();
    ps.insert("p", random(&mut rng, 4, 4, -1.0, 1.0));
    let centre = random(&mut rng, 4, 4, -1.0, 1.0);
    let curvature = random(&mut rng, 4, 4, 0.5, 2.0);
    grad_check(
        |t, p| -> Result<Var, NumericsError> {
            let x = t.param("p", p.expect("p"));
            let m = t.constant(centre.map(|v| -v));
            let d = t.add(x, m)?;
            let sq = t.mul(d, d)?;
            let c = t.constant(curvature.clone());
            let w = t.mul(sq, c)?;
            t.sum(w)
        },
        &ps,
        eps,
        64,
        seed,
    )
    .expect("bowl evaluates")
}

/// Linear layer → softmax cross-entropy.
pub fn softmax_cross_entropy_check(seed: u64, eps: f64) -> GradCheckReport {
    let mut rng = XorShift64::new(seed);
    let mut ps = ParamStore::new();
    ps.insert("w", random(&mut rng, 5, 3, -1.0, 1.0));
    ps.insert("b", random(&mut rng, 1, 3, -0.1, 0.1));
    let x = random(&mut rng, 6, 5, -1.0, 1.0);
    grad_check(
        |t, p| -> Result<Var, NumericsError> {
            let w = t.param("w", p.expect("w"));
            let b = t.param("b", p.expect("b"));
            let xi = t.constant(x.clone());
            let h = t.matmul(xi, w)?;
            let logits = t.add(h, b)?;
            t.cross_entropy(logits, &[0, 1, 2, 0, 1, 2], &[1.0; 6])
        },
        &ps,
        eps,
        64,
        seed,
    )
    .expect("composite evaluates")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_central_differences() {
        for (name, report) in op_gradient_suite(7, DEFAULT_EPS) {
            let worst = report.worst().unwrap();
            assert!(report.passed(1e-4), "{name}: {worst:?}");
        }
    }

    #[test]
    fn quadratic_bowl_is_nearly_exact() {
        let r = quadratic_bowl_check(3, DEFAULT_EPS);
        assert!(r.passed(1e-8), "{:?}", r.worst());
    }

    #[test]
    fn softmax_cross_entropy_composite() {
        let r = softmax_cross_entropy_check(4, DEFAULT_EPS);
        assert!(r.passed(1e-6), "{:?}", r.worst());
    }
}
