//! Every primitive against central differences in f64, on random shapes.

use msync_autodiff::{kernels, primitive_suite, Graph64, Tensor64, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor64 {
    Tensor64::from_fn(shape, |_| rng.gen_range(-1.5..1.5))
}

fn project(g: &mut Graph64, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let w = g.constant(rand_tensor(&mut rng, shape));
    let p = g.mul(y, w);
    g.sum(p)
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..6), rng.gen_range(1..7))
}

#[test]
fn every_primitive_within_tolerance() {
    let results = primitive_suite(10);
    assert!(results.len() >= 29);
    for (name, worst) in &results {
        println!("{name:<16} max relative error {worst:.3e}");
    }
    let bad: Vec<_> = results.iter().filter(|(_, e)| !(*e < TOL)).collect();
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for _ in 0..50 {
        let (r, c) = dims(&mut rng);
        let x = Tensor64::from_fn(vec![r, c], |_| rng.gen_range(-30.0..30.0));
        let mut g = Graph64::new();
        let v = g.constant(x.clone());
        let s = g.softmax(v);
        let ls = g.log_softmax(v);
        for row in 0..r {
            let p = g.value(s).row(row);
            assert!(p.iter().all(|&q| q >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (a, b) in p.iter().zip(g.value(ls).row(row)) {
                if *a > 1e-300 {
                    assert!((a.ln() - b).abs() < 1e-6);
                }
            }
        }
        let lse = kernels::logsumexp(x.row(0));
        assert!(lse.is_finite());
    }
}

#[test]
fn doubling_a_function_doubles_its_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = rand_tensor(&mut rng, vec![3, 4]);
    let grad = |twice: bool| {
        let mut g = Graph64::new();
        let v = g.variable(x.clone());
        let f = |g: &mut Graph64| {
            let y = g.gelu(v);
            let y = g.softmax(y);
            project(g, y, 42)
        };
        let a = f(&mut g);
        let l = if twice {
            let b = f(&mut g);
            g.add(a, b)
        } else {
            a
        };
        g.backward(l).unwrap().wrt(v).unwrap().clone()
    };
    let (one, two) = (grad(false), grad(true));
    for (a, b) in one.data().iter().zip(two.data()) {
        assert_eq!(2.0 * a, *b);
    }
}
