//! Central finite-difference gradient checks.
//!
//! The output of the function under test is projected onto fixed random
//! weights so every output element contributes to the scalar being
//! differentiated. Only forward values are used on the numeric side.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` per input.
    pub rel_err: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.rel_err.iter().copied().fold(0.0, f64::max)
    }
}

fn projected<F>(f: &F, inputs: &[Tensor<f64>], weights: &mut Option<Vec<f64>>) -> Result<f64>
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars)?;
    let w = weights.get_or_insert_with(|| projection(tape.value(out).len()));
    let loss = tape.dot_const(out, w.clone())?;
    Ok(tape.value(loss).data()[0])
}

fn projection(n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Compares tape gradients of `f` at `inputs` with central differences of
/// step `h`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &[Var]) -> Result<Var>,
{
    let mut weights = None;
    projected(&f, inputs, &mut weights)?;

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars)?;
    let loss = tape.dot_const(out, weights.clone().unwrap_or_default())?;
    let grads = tape.backward(loss)?;

    let mut rel_err = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut probe = inputs.to_vec();
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let plus = projected(&f, &probe, &mut weights)?;
            probe[i].data_mut()[j] = orig - h;
            let minus = projected(&f, &probe, &mut weights)?;
            probe[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
        rel_err.push(relative_error(&analytic, &numeric));
    }
    Ok(GradCheck { rel_err })
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let denom = norm(a).max(norm(b));
    if denom == 0.0 {
        0.0
    } else {
        norm(&diff) / denom
    }
}

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Finite-difference check of every differentiable tape operation on random
/// 64-bit inputs, returned as `(operation, result)` pairs.
pub fn kernel_suite(seed: u64, h: f64) -> Result<Vec<(&'static str, GradCheck)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let a = random(&mut rng, vec![5, 7], -1.0, 1.0);
    let b = random(&mut rng, vec![7, 3], -1.0, 1.0);
    out.push(("matmul", check_gradients(&[a, b], h, |t, v| t.matmul(v[0], v[1]))?));

    let a = random(&mut rng, vec![3, 4], -1.0, 1.0);
    let b = random(&mut rng, vec![3, 4], -1.0, 1.0);
    out.push(("add", check_gradients(&[a.clone(), b.clone()], h, |t, v| t.add(v[0], v[1]))?));
    out.push(("mul", check_gradients(&[a.clone(), b], h, |t, v| t.mul(v[0], v[1]))?));
    out.push(("scale", check_gradients(std::slice::from_ref(&a), h, |t, v| t.scale(v[0], -1.7))?));
    out.push(("sum", check_gradients(&[a], h, |t, v| t.sum(v[0]))?));

    let x = random(&mut rng, vec![4, 6], -2.0, 2.0);
    let g = random(&mut rng, vec![6], 0.5, 1.5);
    out.push(("rms_norm", check_gradients(&[x, g], h, |t, v| t.rms_norm(v[0], v[1]))?));

    let table = random(&mut rng, vec![5, 3], -1.0, 1.0);
    out.push((
        "embedding",
        check_gradients(&[table], h, |t, v| t.embedding(v[0], &[4, 0, 4, 2]))?,
    ));

    let x = random(&mut rng, vec![3, 5], -3.0, 3.0);
    out.push(("silu", check_gradients(std::slice::from_ref(&x), h, |t, v| t.silu(v[0]))?));
    out.push(("gelu", check_gradients(std::slice::from_ref(&x), h, |t, v| t.gelu(v[0]))?));
    out.push(("softmax", check_gradients(std::slice::from_ref(&x), h, |t, v| t.softmax_rows(v[0]))?));
    out.push(("col_mean", check_gradients(std::slice::from_ref(&x), h, |t, v| t.col_mean(v[0]))?));
    out.push((
        "gather_rows",
        check_gradients(std::slice::from_ref(&x), h, |t, v| t.gather_rows(v[0], &[2, 0, 2]))?,
    ));
    out.push((
        "pick",
        check_gradients(std::slice::from_ref(&x), h, |t, v| t.pick(v[0], &[(0, 1), (2, 4), (0, 1)]))?,
    ));
    let c: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin()).collect();
    out.push((
        "dot_const",
        check_gradients(&[x], h, move |t, v| t.dot_const(v[0], c.clone()))?,
    ));

    let p1 = random(&mut rng, vec![2, 3], -1.0, 1.0);
    let p2 = random(&mut rng, vec![3, 3], -1.0, 1.0);
    out.push((
        "scatter_rows",
        check_gradients(&[p1, p2], h, |t, v| {
            t.scatter_rows(4, 3, vec![(v[0], vec![3, 0]), (v[1], vec![0, 1, 3])])
        })?,
    ));

    let x = random(&mut rng, vec![4, 3], -1.0, 1.0);
    let w = random(&mut rng, vec![4, 1], -1.0, 1.0);
    out.push(("mul_rows", check_gradients(&[x, w], h, |t, v| t.mul_rows(v[0], v[1]))?));

    let logits = random(&mut rng, vec![4, 6], -2.0, 2.0);
    out.push((
        "cross_entropy",
        check_gradients(&[logits], h, |t, v| t.cross_entropy_mean(v[0], &[1, 5, 0, 3]))?,
    ));

    // two sequences of length 3, two heads of width 2
    let q = random(&mut rng, vec![6, 4], -1.0, 1.0);
    let k = random(&mut rng, vec![6, 4], -1.0, 1.0);
    let v = random(&mut rng, vec![6, 4], -1.0, 1.0);
    out.push((
        "causal_attention",
        check_gradients(&[q, k, v], h, |t, v| t.causal_attention(v[0], v[1], v[2], 2, 3))?,
    ));

    Ok(out)
}
