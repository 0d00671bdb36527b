use maskdit::backbone::{Backbone, BackboneConfig, BackboneInput, Conditioning, ForwardTrace};
use maskdit::diffusion::{EdmConstants, NoiseLevel};
use maskdit::image::ImageBatch;
use maskdit::nn::init::Scheme;
use maskdit::patch::sample_mask;
use maskdit::sampler::ModelDenoiser;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> BackboneConfig {
    BackboneConfig {
        input_size: 8,
        encoder_depth: 2,
        encoder_width: 16,
        encoder_heads: 4,
        decoder_depth: 1,
        decoder_width: 8,
        decoder_heads: 2,
        time_freq_dim: 8,
        ..BackboneConfig::default()
    }
}

#[test]
fn fresh_model_denoises_by_skip_only() {
    let cfg = small();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (model, params) = Backbone::new::<f64, _>(&cfg, Scheme::Zero, &mut rng).unwrap();
    let n = 3 * cfg.input_size * cfg.input_size;
    let x = ImageBatch::new((0..n).map(|_| rng.random_range(-5.0..5.0)).collect(), 3, 1, 8, 8).unwrap();
    let consts = EdmConstants::default();
    let denoiser = ModelDenoiser {
        model: &model,
        params: &params,
        consts,
        chunk: 2,
    };
    for t in [0.002, 0.5, 80.0] {
        let d = denoiser.denoise(&x, t, &[0, 1, 2]).unwrap();
        let c_skip = consts.scalings(NoiseLevel::new(t).unwrap()).c_skip;
        for (dv, xv) in d.data.iter().zip(&x.data) {
            assert_eq!(*dv, c_skip * xv);
        }
    }
}

#[test]
fn label_out_of_range_is_rejected() {
    let cfg = small();
    let (model, params) = Backbone::new::<f32, _>(&cfg, Scheme::Zero, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let tokens = vec![0.0f32; cfg.num_tokens() * cfg.token_len()];
    let visible = vec![(0..cfg.num_tokens()).collect::<Vec<_>>()];
    let cond = [Conditioning {
        c_noise: 0.0,
        label: cfg.num_classes + 1,
    }];
    let input = BackboneInput {
        tokens: &tokens,
        visible: &visible,
        cond: &cond,
    };
    assert!(model.forward(&params, &input, None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn output_covers_every_token(seed in any::<u64>(), k in 0usize..16, samples in 1usize..4) {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (model, params) = Backbone::new::<f32, _>(&cfg, Scheme::Dense, &mut rng).unwrap();
        let n = cfg.num_tokens();
        let r = k as f64 / 16.0;
        let tokens: Vec<f32> = (0..samples * n * cfg.token_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let visible: Vec<Vec<usize>> = (0..samples)
            .map(|_| sample_mask(n, r, &mut rng).unwrap().visible_indices())
            .collect();
        let cond: Vec<Conditioning> = (0..samples)
            .map(|i| Conditioning { c_noise: 0.1 * i as f64, label: i % (cfg.num_classes + 1) })
            .collect();
        let input = BackboneInput { tokens: &tokens, visible: &visible, cond: &cond };
        let mut trace = ForwardTrace::default();
        let (out, _) = model.forward(&params, &input, Some(&mut trace)).unwrap();
        prop_assert_eq!(out.len(), tokens.len());
        prop_assert!(out.iter().all(|v| v.is_finite()));
        prop_assert!(trace.encoder_tokens.iter().all(|&t| t == n - k));
        prop_assert!(trace.decoder_tokens.iter().all(|&t| t == n));
    }
}
