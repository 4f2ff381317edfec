use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vidtok::decompose::{decompose, DecomposeParams};
use vidtok::synthetic::{gen_synthetic, sample_spec};

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..8 {
        let spec = sample_spec(32, 32, 3, 8, &mut rng);
        let (clip, masks) = gen_synthetic(&spec).unwrap();
        let comps = decompose(&clip, &DecomposeParams::default()).unwrap();
        let (mut agree, mut total) = (0usize, 0usize);
        for t in 0..spec.t {
            for y in 1..spec.h - 1 {
                for x in 1..spec.w - 1 {
                    if !masks[[t, y, x]] { continue; }
                    let interior = (-1..=1).all(|dy: isize| (-1..=1).all(|dx: isize| {
                        masks[[t, (y as isize + dy) as usize, (x as isize + dx) as usize]]
                    }));
                    if !interior { continue; }
                    total += 1;
                    if comps.object_mask[[t, y, x]] { agree += 1; }
                }
            }
        }
        println!("spec {i}: vel={:?} size={} agree {agree}/{total} = {:.3}", spec.sprites[0].vel, spec.sprites[0].size, agree as f64 / total as f64);
    }
}
