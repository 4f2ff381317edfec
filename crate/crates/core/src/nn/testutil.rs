//! Finite-difference gradient checking used across the op tests.

use super::tape::{Tape, Var};
use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn seed_from(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x1000_0000_01b3)
    })
}

/// Checks analytic gradients of `f` against central finite differences for
/// every element of every input. `f` must return a scalar Var.
pub fn grad_check(name: &str, shapes: &[Vec<usize>], f: impl Fn(&Tape, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_from(name));
    let mut inputs: Vec<ArrayD<f64>> = shapes
        .iter()
        .map(|s| ArrayD::from_shape_fn(s.as_slice(), |_| rng.gen_range(-0.9..0.9) + 0.05))
        .collect();

    let eval = |inputs: &[ArrayD<f64>]| -> f64 {
        let t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
        let out = f(&t, &vars);
        let v = t.value(out);
        assert_eq!(v.len(), 1, "{name}: loss must be scalar");
        *v.iter().next().unwrap()
    };

    // Analytic gradients.
    let t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
    let out = f(&t, &vars);
    let mut grads = t.backward(out);
    let analytic: Vec<ArrayD<f64>> = vars
        .iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| panic!("{name}: missing grad")))
        .collect();

    let eps = 1e-5;
    for i in 0..inputs.len() {
        for idx in 0..inputs[i].len() {
            let orig = inputs[i].as_slice().unwrap()[idx];
            inputs[i].as_slice_mut().unwrap()[idx] = orig + eps;
            let up = eval(&inputs);
            inputs[i].as_slice_mut().unwrap()[idx] = orig - eps;
            let down = eval(&inputs);
            inputs[i].as_slice_mut().unwrap()[idx] = orig;
            let fd = (up - down) / (2.0 * eps);
            let got = analytic[i].as_slice().unwrap()[idx];
            let scale = got.abs().max(fd.abs()).max(1.0);
            assert!(
                (got - fd).abs() / scale < 1e-5,
                "{name}: grad mismatch input {i} elem {idx}: analytic {got} vs fd {fd}"
            );
        }
    }
}
