//! Finite-difference checks of every differentiable primitive on random
//! shapes, each reduced to a scalar through a fixed random projection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gradcheck::{grad_check, relative_error};
use crate::tensor::sinusoidal_positions;
use crate::{Graph64, Tensor64, Var};

/// Finite-difference step used by the suite.
pub const EPS: f64 = 1e-5;

struct Suite {
    shapes: usize,
    results: Vec<(String, f64)>,
}

/// `(name, max relative error)` for every primitive, over `shapes` random
/// instances each. A failed evaluation reports an infinite error.
pub fn primitive_suite(shapes: usize) -> Vec<(String, f64)> {
    let mut s = Suite {
        shapes,
        results: Vec::new(),
    };
    add_sub_mul(&mut s);
    broadcasts_and_scaling(&mut s);
    matmul_both_sides(&mut s);
    concat_slice_gather_reshape(&mut s);
    normalizers(&mut s);
    activations(&mut s);
    convolution_and_pooling(&mut s);
    attention_with_mask(&mut s);
    positions_and_dropout_and_reductions(&mut s);
    s.results
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor64 {
    Tensor64::from_fn(shape, |_| rng.gen_range(-1.5..1.5))
}

/// Reduces `y` to a scalar through a fixed random projection, so no output
/// direction is privileged and constant-sum identities do not zero the gradient.
fn project(g: &mut Graph64, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let w = g.constant(rand_tensor(&mut rng, shape));
    let p = g.mul(y, w);
    g.sum(p)
}

impl Suite {
    fn check<F>(&mut self, name: &str, seed: u64, mut case: F)
    where
        F: FnMut(&mut ChaCha8Rng) -> (Tensor64, Box<dyn Fn(&mut Graph64, Var) -> Var>),
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..self.shapes {
            let (x, f) = case(&mut rng);
            let err = grad_check(|g, v| f(g, v), &x, EPS).unwrap_or(f64::INFINITY);
            worst = worst.max(err);
        }
        self.results.push((name.to_string(), worst));
    }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..6), rng.gen_range(1..7))
}

fn add_sub_mul(s: &mut Suite) {
    s.check("add", 1, |rng| {
        let (r, c) = dims(rng);
        let other = rand_tensor(rng, vec![r, c]);
        let x = rand_tensor(rng, vec![r, c]);
        (x, Box::new(move |g, v| {
            let o = g.variable(other.clone());
            let y = g.add(v, o);
            project(g, y, 7)
        }))
    });
    s.check("sub", 2, |rng| {
        let (r, c) = dims(rng);
        let other = rand_tensor(rng, vec![r, c]);
        (rand_tensor(rng, vec![r, c]), Box::new(move |g, v| {
            let o = g.constant(other.clone());
            let a = g.sub(o, v);
            let y = g.sub(a, v);
            project(g, y, 8)
        }))
    });
    s.check("multiply", 3, |rng| {
        let (r, c) = dims(rng);
        (rand_tensor(rng, vec![r, c]), Box::new(|g, v| {
            let y = g.mul(v, v);
            project(g, y, 9)
        }))
    });
}

fn broadcasts_and_scaling(s: &mut Suite) {
    s.check("add_row", 4, |rng| {
        let (r, c) = dims(rng);
        let m = rand_tensor(rng, vec![r, c]);
        (rand_tensor(rng, vec![c]), Box::new(move |g, b| {
            let x = g.constant(m.clone());
            let y = g.add_row(x, b);
            let y = g.mul(y, y);
            project(g, y, 10)
        }))
    });
    s.check("mul_scalar", 5, |rng| {
        let (r, c) = dims(rng);
        let m = rand_tensor(rng, vec![r, c]);
        (rand_tensor(rng, vec![1]), Box::new(move |g, s| {
            let x = g.variable(m.clone());
            let y = g.mul_scalar(x, s);
            let y = g.mul_scalar(y, s);
            project(g, y, 11)
        }))
    });
    s.check("scale", 6, |rng| {
        let (r, c) = dims(rng);
        (rand_tensor(rng, vec![r, c]), Box::new(|g, v| {
            let y = g.scale(v, -2.5);
            project(g, y, 12)
        }))
    });
}

fn matmul_both_sides(s: &mut Suite) {
    s.check("matmul(lhs)", 7, |rng| {
        let (m, k) = dims(rng);
        let n = rng.gen_range(1..5);
        let b = rand_tensor(rng, vec![k, n]);
        (rand_tensor(rng, vec![m, k]), Box::new(move |g, a| {
            let b = g.constant(b.clone());
            let y = g.matmul(a, b);
            project(g, y, 13)
        }))
    });
    s.check("matmul(rhs)", 8, |rng| {
        let (m, k) = dims(rng);
        let n = rng.gen_range(1..5);
        let a = rand_tensor(rng, vec![m, k]);
        (rand_tensor(rng, vec![k, n]), Box::new(move |g, b| {
            let a = g.constant(a.clone());
            let y = g.matmul(a, b);
            project(g, y, 14)
        }))
    });
    s.check("matmul_t", 9, |rng| {
        let (m, k) = dims(rng);
        (rand_tensor(rng, vec![m, k]), Box::new(|g, a| {
            let y = g.matmul_t(a, a);
            project(g, y, 15)
        }))
    });
}

fn concat_slice_gather_reshape(s: &mut Suite) {
    s.check("concat", 10, |rng| {
        let (r, c) = dims(rng);
        let other = rand_tensor(rng, vec![r, 3]);
        (rand_tensor(rng, vec![r, c]), Box::new(move |g, v| {
            let o = g.constant(other.clone());
            let y = g.concat(&[v, o, v]);
            project(g, y, 16)
        }))
    });
    s.check("concat_rows", 11, |rng| {
        let (r, c) = dims(rng);
        (rand_tensor(rng, vec![r, c]), Box::new(|g, v| {
            let y = g.concat_rows(&[v, v]);
            let y = g.mul(y, y);
            project(g, y, 17)
        }))
    });
    s.check("slice", 12, |rng| {
        let (r, c) = (rng.gen_range(2..6), rng.gen_range(2..7));
        let (cs, rs) = (rng.gen_range(0..c - 1), rng.gen_range(0..r - 1));
        (rand_tensor(rng, vec![r, c]), Box::new(move |g, v| {
            let a = g.slice_cols(v, cs, c - cs);
            let b = g.slice_rows(a, rs, r - rs);
            let y = g.mul(b, b);
            project(g, y, 18)
        }))
    });
    s.check("gather", 13, |rng| {
        let (r, c) = dims(rng);
        let ids: Vec<usize> = (0..rng.gen_range(1..8)).map(|_| rng.gen_range(0..r)).collect();
        (rand_tensor(rng, vec![r, c]), Box::new(move |g, t| {
            let y = g.gather(t, &ids);
            let y = g.mul(y, y);
            project(g, y, 19)
        }))
    });
    s.check("reshape", 14, |rng| {
        let (r, c) = dims(rng);
        (rand_tensor(rng, vec![r, c]), Box::new(move |g, v| {
            let y = g.reshape(v, vec![c, r]);
            let y = g.mul(y, y);
            project(g, y, 20)
        }))
    });
}

fn normalizers(s: &mut Suite) {
    s.check("softmax", 15, |rng| {
        let (r, c) = dims(rng);
        (rand_tensor(rng, vec![r, c]), Box::new(|g, v| {
            let y = g.softmax(v);
            project(g, y, 21)
        }))
    });
    s.check("log_softmax", 16, |rng| {
        let (r, c) = dims(rng);
        (rand_tensor(rng, vec![r, c]), Box::new(|g, v| {
            let y = g.log_softmax(v);
            project(g, y, 22)
        }))
    });
    s.check("logsumexp", 17, |rng| {
        let (r, c) = dims(rng);
        (rand_tensor(rng, vec![r, c]), Box::new(|g, v| {
            let y = g.logsumexp(v);
            project(g, y, 23)
        }))
    });
    s.check("cross_entropy", 18, |rng| {
        let (r, c) = dims(rng);
        let targets: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
        (rand_tensor(rng, vec![r, c]), Box::new(move |g, v| g.cross_entropy(v, &targets)))
    });
    // Two-wide rows normalize to (+1, -1) whatever the input, which leaves
    // only an eps-sized gradient; widths start at 3.
    s.check("layer_norm(x)", 19, |rng| {
        let (r, c) = (rng.gen_range(1..5), rng.gen_range(3..8));
        let gain = rand_tensor(rng, vec![c]);
        let bias = rand_tensor(rng, vec![c]);
        (rand_tensor(rng, vec![r, c]), Box::new(move |g, v| {
            let ga = g.constant(gain.clone());
            let b = g.constant(bias.clone());
            let y = g.layer_norm(v, ga, b, 1e-5);
            project(g, y, 24)
        }))
    });
    s.check("layer_norm(gain)", 20, |rng| {
        let (r, c) = (rng.gen_range(1..5), rng.gen_range(2..7));
        let x = rand_tensor(rng, vec![r, c]);
        let bias = rand_tensor(rng, vec![c]);
        (rand_tensor(rng, vec![c]), Box::new(move |g, ga| {
            let xv = g.constant(x.clone());
            let b = g.variable(bias.clone());
            let y = g.layer_norm(xv, ga, b, 1e-5);
            let y = g.mul(y, y);
            project(g, y, 25)
        }))
    });
}

fn activations(s: &mut Suite) {
    s.check("relu", 21, |rng| {
        let (r, c) = dims(rng);
        (rand_tensor(rng, vec![r, c]), Box::new(|g, v| {
            let y = g.relu(v);
            project(g, y, 26)
        }))
    });
    // GELU is stationary near -0.75; central differences cannot resolve a
    // relative error there, so inputs stay clear of it.
    s.check("gelu", 22, |rng| {
        let (r, c) = dims(rng);
        let x = Tensor64::from_fn(vec![r, c], |_| {
            let z: f64 = rng.gen_range(-0.5..1.5);
            if rng.gen_bool(0.5) { z } else { -1.0 - z }
        });
        (x, Box::new(|g, v| {
            let y = g.gelu(v);
            project(g, y, 27)
        }))
    });
    s.check("sigmoid", 23, |rng| {
        let (r, c) = dims(rng);
        (rand_tensor(rng, vec![r, c]), Box::new(|g, v| {
            let y = g.sigmoid(v);
            project(g, y, 28)
        }))
    });
    s.check("tanh", 24, |rng| {
        let (r, c) = dims(rng);
        (rand_tensor(rng, vec![r, c]), Box::new(|g, v| {
            let y = g.tanh(v);
            project(g, y, 29)
        }))
    });
}

fn convolution_and_pooling(s: &mut Suite) {
    s.check("conv1d(x)", 25, |rng| {
        let (len, c_in) = dims(rng);
        let width = rng.gen_range(1..5);
        let c_out = rng.gen_range(1..4);
        let w = rand_tensor(rng, vec![width * c_in, c_out]);
        let b = rand_tensor(rng, vec![c_out]);
        (rand_tensor(rng, vec![len, c_in]), Box::new(move |g, x| {
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            let y = g.conv1d(x, wv, bv, width);
            project(g, y, 30)
        }))
    });
    s.check("conv1d(w)", 26, |rng| {
        let (len, c_in) = dims(rng);
        let width = rng.gen_range(1..5);
        let c_out = rng.gen_range(1..4);
        let x = rand_tensor(rng, vec![len, c_in]);
        let b = rand_tensor(rng, vec![c_out]);
        (rand_tensor(rng, vec![width * c_in, c_out]), Box::new(move |g, w| {
            let xv = g.constant(x.clone());
            let bv = g.variable(b.clone());
            let y = g.conv1d(xv, w, bv, width);
            let y = g.mul(y, y);
            project(g, y, 31)
        }))
    });
    s.check("max_rows", 27, |rng| {
        let (r, c) = dims(rng);
        (rand_tensor(rng, vec![r, c]), Box::new(|g, v| {
            let y = g.max_rows(v);
            project(g, y, 32)
        }))
    });
}

fn attention_with_mask(s: &mut Suite) {
    s.check("attention", 28, |rng| {
        let (n, d) = (rng.gen_range(1..6), rng.gen_range(1..5));
        let causal = rng.gen_bool(0.5);
        let mask = Tensor64::from_fn(vec![n, n], |i| {
            let (r, c) = (i / n, i % n);
            if causal && c > r { -1e9 } else { 0.0 }
        });
        let k = rand_tensor(rng, vec![n, d]);
        (rand_tensor(rng, vec![n, d]), Box::new(move |g, q| {
            let kv = g.variable(k.clone());
            let y = g.attention(q, kv, q, &mask);
            project(g, y, 33)
        }))
    });
}

fn positions_and_dropout_and_reductions(s: &mut Suite) {
    s.check("positional+mean", 29, |rng| {
        let (r, c) = dims(rng);
        let pe = sinusoidal_positions::<f64>(r, c);
        (rand_tensor(rng, vec![r, c]), Box::new(move |g, v| {
            let y = g.add_const(v, &pe);
            let y = g.mul(y, y);
            g.mean(y)
        }))
    });
    // Dropout masks are fixed by the tape seed, so the same seed makes the
    // function deterministic and differentiable.
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    for _ in 0..s.shapes {
        let (r, c) = dims(&mut rng);
        let x = rand_tensor(&mut rng, vec![r, c]);
        let analytic = {
            let mut g = Graph64::training(5);
            let v = g.variable(x.clone());
            let y = g.dropout(v, 0.3);
            let l = project(&mut g, y, 34);
            g.backward(l).expect("scalar loss").wrt(v).expect("input gradient").clone()
        };
        for i in 0..x.len() {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph64::training(5);
                let v = g.constant(xp);
                let y = g.dropout(v, 0.3);
                let l = project(&mut g, y, 34);
                g.value(l).item()
            };
            let numeric = (eval(EPS) - eval(-EPS)) / (2.0 * EPS);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    s.results.push(("dropout(train)".to_string(), worst));
}
