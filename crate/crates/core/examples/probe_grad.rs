use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidtok::nn::Tape;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x_arr = ArrayD::from_shape_fn(IxDyn(&[1, 2, 4, 4]), |_| rng.gen_range(-1.0..1.0));
    let w_arr = ArrayD::from_shape_fn(IxDyn(&[4, 2, 3, 3]), |_| rng.gen_range(-0.5..0.5));
    let b_arr = ArrayD::from_shape_fn(IxDyn(&[4]), |_| rng.gen_range(-0.1..0.1));

    let eval = |w: &ArrayD<f64>| -> f64 {
        let t = Tape::new();
        let x = t.constant(x_arr.clone());
        let wv = t.leaf(w.clone());
        let b = t.constant(b_arr.clone());
        let y = t.conv2d(x, wv, b, 1, 1);
        let loss = t.sum_all(t.square(y));
        t.value(loss)[[]]
    };
    // analytic
    let t = Tape::new();
    let x = t.constant(x_arr.clone());
    let wv = t.leaf(w_arr.clone());
    let b = t.constant(b_arr.clone());
    let y = t.conv2d(x, wv, b, 1, 1);
    let loss = t.sum_all(t.square(y));
    let mut grads = t.backward(loss);
    let g = grads.take(wv).unwrap();
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for idx in 0..w_arr.len() {
        let mut wp = w_arr.clone();
        wp.as_slice_mut().unwrap()[idx] += eps;
        let up = eval(&wp);
        wp.as_slice_mut().unwrap()[idx] -= 2.0 * eps;
        let down = eval(&wp);
        let fd = (up - down) / (2.0 * eps);
        let a = g.as_slice().unwrap()[idx];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        if rel > worst { worst = rel; }
    }
    println!("stride-1 conv2d dW worst rel: {worst:.2e}");
}
