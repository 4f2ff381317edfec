// Mirrors the desk-scale acceptance path: stage-1 training with early stop,
// then stage-2 training and the best-of-10 win-rate evaluation.
use std::time::Instant;
use vidtok::checkpoint::{load_vqvae, save_vqvae};
use vidtok::clip::VideoClip;
use vidtok::config::FileConfig;
use vidtok::metrics::psnr;
use vidtok::synthetic::{gen_synthetic, sample_spec};
use vidtok::tokengen::train::{example_from_clip, Stage2Trainer, TrainExample};
use vidtok::tokengen::{predict, GenerateOptions, TokenPredictor};
use vidtok::vqvae::{ContentInput, VqVae};
use vidtok::vqvae_train::VqvaeTrainer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let stage = args.get(1).map(|s| s.as_str()).unwrap_or("all");
    let file = FileConfig::load(std::path::Path::new("configs/desk32.toml")).unwrap();
    let cfg = file.vqvae;
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let train_clips: Vec<VideoClip> = (0..500)
        .map(|_| gen_synthetic(&sample_spec(cfg.h, cfg.w, cfg.c, cfg.t, &mut rng)).unwrap().0)
        .collect();
    let mut held_rng = ChaCha8Rng::seed_from_u64(8888);
    let held_clips: Vec<VideoClip> = (0..50)
        .map(|_| gen_synthetic(&sample_spec(cfg.h, cfg.w, cfg.c, cfg.t, &mut held_rng)).unwrap().0)
        .collect();

    let eval = |model: &VqVae, content: ContentInput| -> f64 {
        held_clips
            .iter()
            .map(|clip| psnr(&model.reconstruct(clip, content).unwrap(), clip).unwrap().aggregate)
            .sum::<f64>()
            / held_clips.len() as f64
    };

    let ckpt = std::path::Path::new("/tmp/desk_vqvae.ckpt");
    let t0 = Instant::now();
    if stage == "all" || stage == "stage1" {
        let model = VqVae::new(cfg, file.vqvae_train.seed).unwrap();
        let untrained = eval(&model, ContentInput::Components);
        println!("untrained: {untrained:.2} dB (bar {:.2})", untrained + 10.0);
        let mut trainer = VqvaeTrainer::new(model, file.vqvae_train).unwrap();
        let bs = file.vqvae_train.batch_size;
        let max_steps = file.vqvae_train.total_steps.min(10_000);
        for step in 0..max_steps {
            let batch: Vec<VideoClip> = (0..bs)
                .map(|i| train_clips[(step * bs + i) % train_clips.len()].clone())
                .collect();
            trainer.train_step(&batch).unwrap();
            if (step + 1) % 250 == 0 {
                let p = eval(&trainer.model, trainer.content_input());
                println!("step {}: heldout {p:.2} dB (+{:.2}) [{:.0?}]", step + 1, p - untrained, t0.elapsed());
                if p >= untrained + 10.5 && step + 1 >= 1000 {
                    println!("early stop at {} steps", step + 1);
                    break;
                }
            }
        }
        save_vqvae(&trainer.model, 0, ckpt).unwrap();
    }
    if stage == "all" || stage == "stage2" {
        let (vqvae, _) = load_vqvae(ckpt).unwrap();
        let k = file.transformer_train.k;
        let c = file.transformer_train.c;
        let t_len = cfg.t;
        println!("tokenizing training clips... [{:.0?}]", t0.elapsed());
        let examples: Vec<TrainExample> = train_clips
            .iter()
            .map(|clip| example_from_clip(&vqvae, clip, k, c, ContentInput::RawFrames).unwrap())
            .collect();
        let model = TokenPredictor::new(file.token_model_config(), 0).unwrap();
        let mut trainer = Stage2Trainer::new(model, file.transformer_train).unwrap();
        let bs = file.transformer_train.batch_size;
        let t1 = Instant::now();
        for step in 0..file.transformer_train.total_steps {
            let batch: Vec<TrainExample> = (0..bs)
                .map(|i| examples[(step * bs + i) % examples.len()].clone())
                .collect();
            let report = trainer.train_step(&batch).unwrap();
            if (step + 1) % 200 == 0 {
                println!("s2 step {}: so={:.4} m={:.4} [{:.0?}]", step + 1, report.so_loss, report.m_loss, t1.elapsed());
            }
        }
        // Win-rate evaluation.
        let trials = 10;
        let mut wins = 0usize;
        let mut model_best_sum = 0.0;
        let mut base_sum = 0.0;
        for (idx, clip) in held_clips.iter().enumerate() {
            let previous = clip.slice_frames(0, k).unwrap();
            let truth = clip.slice_frames(k, t_len).unwrap();
            let mut best = f64::NEG_INFINITY;
            for trial in 0..trials {
                let options = GenerateOptions {
                    seed: (idx * 1000 + trial) as u64,
                    content: ContentInput::RawFrames,
                    ..Default::default()
                };
                let pred = predict(&vqvae, &trainer.model, &previous, c, &options).unwrap();
                best = best.max(psnr(&pred, &truth).unwrap().aggregate);
            }
            let last = previous.slice_frames(k - 1, k).unwrap();
            let repeats: Vec<VideoClip> = (0..t_len - k).map(|_| last.clone()).collect();
            let refs: Vec<&VideoClip> = repeats.iter().collect();
            let baseline = psnr(&VideoClip::concat_time(&refs).unwrap(), &truth).unwrap().aggregate;
            model_best_sum += best;
            base_sum += baseline;
            if best > baseline {
                wins += 1;
            }
        }
        println!(
            "win rate: {}/{} ({:.0}%)  model best-of-10 mean {:.2} dB vs baseline mean {:.2} dB  [{:.0?}]",
            wins,
            held_clips.len(),
            wins as f64 * 100.0 / held_clips.len() as f64,
            model_best_sum / held_clips.len() as f64,
            base_sum / held_clips.len() as f64,
            t0.elapsed()
        );
    }
}
