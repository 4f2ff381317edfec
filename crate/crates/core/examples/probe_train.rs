use std::time::Instant;
use vidtok::metrics::psnr;
use vidtok::synthetic::{gen_synthetic, sample_spec};
use vidtok::vqvae::{ContentInput, VqVae, VqvaeConfig};
use vidtok::vqvae_train::{VqvaeTrainConfig, VqvaeTrainer};
use vidtok::nn::LrSchedule;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ndarray::Array3;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2500);
    let f_m: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let d: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(48);
    let base: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(24);
    let n: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(512);
    let mut cfg = VqvaeConfig::desk32();
    cfg.f_m = f_m; cfg.d = d; cfg.base_channels = base; cfg.n = n;

    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut train = Vec::new();
    for _ in 0..300 { let spec = sample_spec(32,32,3,8,&mut rng); train.push(gen_synthetic(&spec).unwrap().0); }
    let mut rng2 = ChaCha8Rng::seed_from_u64(4242);
    let mut held = Vec::new();
    for _ in 0..8 { let spec = sample_spec(32,32,3,8,&mut rng2); held.push(gen_synthetic(&spec).unwrap()); }

    let eval = |m: &VqVae, content: ContentInput| -> (f64, f64, f64) {
        let mut acc = 0.0; let mut sprite_mse = 0.0; let mut bg_mse = 0.0;
        let mut ns = 0.0; let mut nb = 0.0;
        for (clip, masks) in &held {
            let recon = m.reconstruct(clip, content).unwrap();
            acc += psnr(&recon, clip).unwrap().aggregate;
            // dilate mask by union over time +-1 for ghost regions
            let (t_len, h, w, c) = clip.shape();
            let mut dil = Array3::from_elem((t_len, h, w), false);
            for t in 0..t_len {
                for y in 0..h { for x in 0..w {
                    let lo = t.saturating_sub(1); let hi = (t+1).min(t_len-1);
                    dil[[t,y,x]] = masks[[t,y,x]] || masks[[lo,y,x]] || masks[[hi,y,x]];
                }}
            }
            for t in 0..t_len { for y in 0..h { for x in 0..w {
                let mut e = 0.0;
                for ch in 0..c { let dd = clip.frames()[[t,y,x,ch]] - recon.frames()[[t,y,x,ch]]; e += dd*dd; }
                e /= c as f64;
                if dil[[t,y,x]] { sprite_mse += e; ns += 1.0; } else { bg_mse += e; nb += 1.0; }
            }}}
        }
        (acc / held.len() as f64, sprite_mse / ns, bg_mse / nb)
    };
    let model = VqVae::new(cfg, 7).unwrap();
    let (p0, _, _) = eval(&model, ContentInput::Components);
    println!("f_m={f_m} d={d} base={base} n={n} untrained={p0:.2}");

    let (s_sites, o_sites, m_sites) = cfg.token_counts();
    let tcfg = VqvaeTrainConfig {
        total_steps: steps, batch_size: 4,
        preproc_handoff_step: steps / 5, disc_start_step: steps,
        commit_component_weights: [1.0/(s_sites as f64), 1.0/(o_sites as f64), 1.0/(m_sites as f64)],
        lr_schedule: LrSchedule::Cosine, learning_rate: 1e-3,
        ..VqvaeTrainConfig::default()
    };
    let mut trainer = VqvaeTrainer::new(model, tcfg).unwrap();
    let t0 = Instant::now();
    for step in 0..steps {
        let batch: Vec<_> = (0..4).map(|i| train[(step * 4 + i) % train.len()].clone()).collect();
        let report = trainer.train_step(&batch).unwrap();
        if (step + 1) % 250 == 0 {
            let (p, sm, bm) = eval(&trainer.model, trainer.content_input());
            println!("step {}: l2={:.5} psnr={:.2} sprite_mse={:.5} bg_mse={:.5} [{:.0?}]",
                step + 1, report.l2, p, sm, bm, t0.elapsed());
        }
    }
}
