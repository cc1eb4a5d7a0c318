// diagnostic: kernel init scale sweep
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stdpgan_core::data::{make_windows, normalize, split, synth_dataset, WindowedSamples};
use stdpgan_core::eval::{fit_regressor, mse, DataMatrix, RegressorKind};
use stdpgan_core::generator::{generate, sample_noise};
use stdpgan_core::tensor::Tensor;
use stdpgan_core::training::{train, TrainConfig};

fn main() {
    let mut ds = synth_dataset(8, 2000, 7).unwrap();
    normalize(&mut ds).unwrap();
    let (train_ds, _, test_ds) = split(&ds, 0.7, 0.2, 0.1).unwrap();
    let samples = make_windows(&train_ds.observations, 9, 0, 1).unwrap().full_samples();
    let real_train = make_windows(&train_ds.observations, 6, 3, 1).unwrap();
    let real_test = DataMatrix::from_windows(&make_windows(&test_ds.observations, 6, 3, 1).unwrap()).unwrap();
    let tm = DataMatrix::from_windows(&real_train).unwrap();
    let base = {
        let m = fit_regressor(RegressorKind::Ols, &tm, 0).unwrap();
        mse(&m.predict(&real_test), &real_test.y).unwrap()
    };
    println!("real base OLS {:.3e}", base);

    for (sd0, anneal) in [
        (0.02f64, Some(120usize)),
        (0.02, Some(150)),
        (0.05, Some(120)),
        (0.1, Some(120)),
    ] {
        for seed in [1u64, 2, 3] {
            let cfg = TrainConfig {
                learning_rate: 3e-3,
                weight_clip: Some(0.05),
                critic_warmup: Some(true),
                attention_enabled: true,
                k_critic: 3,
                kd_len: Some(5),
                kernel_init_sd: Some(sd0),
                lr_anneal_after: anneal,
                lr_anneal: 0.96,
                max_epochs: 200,
                seed,
                ..TrainConfig::default()
            };
            let (state, _) = train(samples.clone(), ds.laplacian.clone(), cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut inputs = Vec::new();
            let mut targets = Vec::new();
            let mut sum = 0.0;
            let mut sq = 0.0;
            let mut cnum = 0.0;
            let mut cden = 0.0;
            for _ in 0..974 {
                let s = generate(&state.generator, &sample_noise(8, &mut rng)).unwrap();
                for v in s.data() {
                    sum += v;
                    sq += v * v;
                }
                for t in 0..8 {
                    for j in 0..8 {
                        cnum += s.at2(t, j) * s.at2(t + 1, j);
                        cden += s.at2(t, j) * s.at2(t, j);
                    }
                }
                inputs.push(Tensor::new(vec![6, 8], s.data()[..48].to_vec()).unwrap());
                targets.push(Tensor::new(vec![3, 8], s.data()[48..].to_vec()).unwrap());
            }
            let c = (974 * 72) as f64;
            let mean = sum / c;
            let sd = (sq / c - mean * mean).sqrt();
            let gw = WindowedSamples { inputs, targets, window_len: 6, horizon: 3 };
            let gm = DataMatrix::from_windows(&gw).unwrap();
            let model = fit_regressor(RegressorKind::Ols, &gm, 0).unwrap();
            let ratio = mse(&model.predict(&real_test), &real_test.y).unwrap() / base;
            println!(
                "sd0 {:<5} anneal {:?} seed {}: ratio {:>7.1} sd {:.3} lag1 {:+.3}",
                sd0, anneal, seed, ratio, sd, cnum / cden
            );
        }
    }
}
