//! Randomized invariants across the data, model, sampling and metric layers.

use latemu::autoencoder::{saturate, Autoencoder, AutoencoderConfig, PaddingKind, LATENT_BOUND};
use latemu::data::{
    load_trajectory, save_trajectory, split_of, trajectory_seed, Boundary, ChannelTransform, Field, FileMeta,
    Normalizer, Split, Trajectory,
};
use latemu::diffusion::{
    alpha, denoiser_to_score, sample_mask, sigma, snr, BundleShape, EmulatorKind, EmulatorNet, LatentScaler, Mask,
    NetConfig,
};
use latemu::metrics::{isotropic_spectrum, spectrum_band_rmse, vrmse};
use latemu::rollout::{rollout, Emulator, RolloutInput, RolloutKind, RolloutPlan};
use latemu::sampler::{ab3_solve, initial_state, GaussianDenoiser, OdeSolver};
use latemu_tensor::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn field_values(len: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-3.0f32..3.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn saturate_is_bounded_odd_and_monotone(a in -1e3f64..1e3, b in -1e3f64..1e3) {
        let bound = LATENT_BOUND as f64;
        prop_assert!(saturate(a, bound).abs() < bound);
        prop_assert_eq!(saturate(-a, bound), -saturate(a, bound));
        if a.abs() < b.abs() {
            prop_assert!(saturate(a, bound).abs() <= saturate(b, bound).abs());
        }
    }

    #[test]
    fn schedule_sums_to_one_and_snr_decreases(t in 0.0f64..1.0, dt in 1e-6f64..0.5) {
        prop_assert!((alpha(t) + sigma(t) - 1.0).abs() < 1e-12);
        let u = (t + dt).min(1.0);
        if u > t {
            prop_assert!(snr(u) < snr(t));
        }
        prop_assert_eq!(snr(1.0), 0.0);
    }

    #[test]
    fn gaussian_posterior_mean_gives_the_analytic_score(t in 0.01f64..0.99, z in field_values(16)) {
        // data ~ N(0, 1): E[x | z_t] = alpha z_t / (alpha^2 + sigma^2)
        let (a, s) = (alpha(t), sigma(t));
        let v = a * a + s * s;
        let d: Vec<f32> = z.iter().map(|&x| (a * x as f64 / v) as f32).collect();
        let score = denoiser_to_score(&d, &z, t).unwrap();
        for ((sc, &x), &dx) in score.iter().zip(&z).zip(&d) {
            let exact = -(x as f64) / v;
            // f32 rounding of the inputs, amplified by 1 / sigma^2
            let propagated = f32::EPSILON as f64 * (a * (dx as f64).abs() + (x as f64).abs()) / (s * s);
            let tol = 1e-5 * exact.abs().max(1.0) + propagated;
            prop_assert!((*sc as f64 - exact).abs() <= tol, "{sc} vs {exact}");
        }
    }

    #[test]
    fn sampled_masks_are_valid(n in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = sample_mask(n, 2.0, 0.33, &mut rng).unwrap();
        let bits = m.bits();
        prop_assert_eq!(bits.len(), n + 1);
        prop_assert!(m.known() >= 1 && m.known() <= n);
        let ones_first = bits[0];
        let switches = bits.windows(2).filter(|w| w[0] != w[1]).count();
        prop_assert_eq!(switches, 1, "{:?}", bits);
        prop_assert!(ones_first || bits[n]);
    }

    #[test]
    fn vrmse_ignores_shift_and_joint_scale(u in field_values(64), v in field_values(64), shift in -5.0f32..5.0, scale in 0.1f32..10.0) {
        let base = vrmse(&u, &v).unwrap();
        let us: Vec<f32> = u.iter().map(|x| x * scale + shift).collect();
        let vs: Vec<f32> = v.iter().map(|x| x * scale + shift).collect();
        let moved = vrmse(&us, &vs).unwrap();
        prop_assert!((base - moved).abs() <= 1e-3 * base.max(1e-3), "{base} vs {moved}");
        prop_assert!(vrmse(&u, &u).unwrap() == 0.0);
    }

    #[test]
    fn band_errors_are_translation_invariant(u in field_values(256), v in field_values(256), dy in 0usize..16, dx in 0usize..16) {
        let (h, w) = (16, 16);
        let rolled: Vec<f32> = (0..h * w).map(|i| v[((i / w + dy) % h) * w + (i % w + dx) % w]).collect();
        let pu = isotropic_spectrum(&u, h, w).unwrap();
        let a = spectrum_band_rmse(&pu.bins, &isotropic_spectrum(&v, h, w).unwrap().bins).unwrap();
        let b = spectrum_band_rmse(&pu.bins, &isotropic_spectrum(&rolled, h, w).unwrap().bins).unwrap();
        for j in 0..3 {
            prop_assert!((a[j] - b[j]).abs() <= 1e-6 * a[j].max(1.0), "band {j}: {} vs {}", a[j], b[j]);
        }
    }

    #[test]
    fn normalizer_round_trips(values in field_values(2 * 8 * 8), offset in 0.0f32..3.0) {
        let mut vals = values.clone();
        for x in &mut vals[64..] {
            *x = x.abs() + offset;
        }
        let f = Field::new(2, 8, 8, vals).unwrap();
        let t = Trajectory::new(vec![f.clone()], vec![], 1, Boundary::Periodic, vec!["a".into(), "b".into()]).unwrap();
        let n = Normalizer::fit(&[t], &[ChannelTransform::Identity, ChannelTransform::Log1p]).unwrap();
        let back = n.invert(&n.apply(&f).unwrap()).unwrap();
        for (x, y) in f.values().iter().zip(back.values()) {
            prop_assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn split_is_a_function_of_the_seed(base in any::<u64>(), index in 0usize..100_000) {
        for split in [Split::Train, Split::Val, Split::Test] {
            prop_assert_eq!(split_of(trajectory_seed(base, split, index)), Some(split));
        }
    }

    #[test]
    fn latent_scaler_round_trips(x in field_values(48)) {
        let s = LatentScaler::fit([x.as_slice()], 3).unwrap();
        let mut y = x.clone();
        s.apply(&mut y);
        s.invert(&mut y);
        for (a, b) in x.iter().zip(&y) {
            prop_assert!((a - b).abs() < 1e-4);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn trajectory_files_round_trip_bit_exactly(values in field_values(3 * 2 * 4 * 4), theta in prop::collection::vec(-1.0f32..1.0, 0..4)) {
        let frames = values.chunks(32).map(|c| Field::new(2, 4, 4, c.to_vec()).unwrap()).collect();
        let t = Trajectory::new(frames, theta, 3, Boundary::Open, vec!["u".into(), "v".into()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.traj");
        save_trajectory(&path, &t, &FileMeta::describe(&t)).unwrap();
        prop_assert_eq!(load_trajectory(&path).unwrap(), t);
    }

    #[test]
    fn rollout_frame_count_and_context_fidelity(n in 1usize..5, c_frac in 0.0f64..1.0, extra in 1usize..12, seed in any::<u64>()) {
        let c = 1 + ((n - 1) as f64 * c_frac) as usize;
        let frames = c + extra;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = RolloutInput { context: Tensor::randn(&[c, 2, 2, 3], 1.0, &mut rng), theta: vec![] };
        let plan = RolloutPlan { bundle: n, context: c, members: 2, frames, kind: RolloutKind::Persistence, sampler_steps: 4, solver: OdeSolver::Ab3 };
        let out = rollout(&Emulator::Persistence, &[input.clone()], &plan, seed).unwrap();
        prop_assert!(plan.steps() * plan.stride() + c >= frames);
        for m in &out[0].members {
            prop_assert_eq!(m.shape(), &[frames, 2, 2, 3][..]);
            prop_assert_eq!(&m.data()[..input.context.numel()], input.context.data());
        }
    }

    #[test]
    fn gaussian_sampling_is_deterministic_and_keeps_known_frames(seed in any::<u64>(), known in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [2, 4, 2, 2, 1];
        let masks = vec![Mask::context(3, known).unwrap(); 2];
        let data = Tensor::randn(&shape, 1.0, &mut rng);
        let z1 = initial_state(&data, &Tensor::randn(&shape, 1.0, &mut rng), &masks).unwrap();
        let theta = Tensor::zeros(&[2, 1]);
        let den = GaussianDenoiser { mean: 0.0, var: 1.0 };
        let a = ab3_solve(&den, &z1, &masks, &theta, 8).unwrap();
        let b = ab3_solve(&den, &z1, &masks, &theta, 8).unwrap();
        prop_assert_eq!(a.z.data(), b.z.data());
        let per_frame = 4;
        for r in 0..2 {
            let off = r * 4 * per_frame;
            prop_assert_eq!(&a.z.data()[off..off + known * per_frame], &data.data()[off..off + known * per_frame]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn autoencoder_preserves_shape(levels in 1usize..4, latent in 1usize..5, hx in 0u32..2, wx in 0u32..2, seed in any::<u64>()) {
        let channels: Vec<usize> = (0..levels).map(|l| 4 << l).collect();
        let cfg = AutoencoderConfig {
            pixel_channels: 2,
            latent_channels: latent,
            channels,
            blocks_per_level: 1,
            attention: vec![false; levels],
            heads: 1,
            dropout: 0.0,
            padding: PaddingKind::Periodic,
            identity_init: seed % 2 == 0,
        };
        let ae = Autoencoder::new(cfg.clone(), seed).unwrap();
        let (h, w) = (8usize << hx, 8usize << wx);
        let x = Tensor::randn(&[2, h, w, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let z = ae.encode(&x).unwrap();
        let r = cfg.reduction();
        prop_assert_eq!(z.shape(), &[2, h / r, w / r, latent][..]);
        let y = ae.decode(&z).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
    }
}

/// Member labels carry no information: the spread of per-member mean errors
/// is typical under random relabelling within each trajectory.
#[test]
fn diffusion_members_are_exchangeable() {
    let shape = BundleShape { frames: 3, height: 2, width: 2, channels: 2, cond_dim: 1 };
    let cfg = NetConfig { embed_dim: 12, blocks: 1, heads: 1, mlp_ratio: 2, ..NetConfig::default() };
    let net = EmulatorNet::new(EmulatorKind::Diffusion, cfg, shape, 3).unwrap();
    let scaler = LatentScaler::identity(2);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs: Vec<RolloutInput> = (0..24)
        .map(|_| RolloutInput { context: Tensor::randn(&[1, 2, 2, 2], 1.0, &mut rng), theta: vec![0.3] })
        .collect();
    let k = 6;
    let plan = RolloutPlan { bundle: 2, context: 1, members: k, frames: 5, kind: RolloutKind::Diffusion, sampler_steps: 4, solver: OdeSolver::Ab3 };
    let out = rollout(&Emulator::Network { net: &net, scaler: &scaler }, &inputs, &plan, 5).unwrap();
    // errors[traj][member]: mean squared deviation of the member's final frame from the context
    let errors: Vec<Vec<f64>> = out
        .iter()
        .zip(&inputs)
        .map(|(ens, inp)| {
            ens.members
                .iter()
                .map(|m| {
                    let last = m.index_axis0(4);
                    last.data().iter().zip(inp.context.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>()
                })
                .collect()
        })
        .collect();
    let stat = |e: &[Vec<f64>]| {
        let means: Vec<f64> = (0..k).map(|m| e.iter().map(|row| row[m]).sum::<f64>() / e.len() as f64).collect();
        let mu = means.iter().sum::<f64>() / k as f64;
        means.iter().map(|x| (x - mu).powi(2)).sum::<f64>()
    };
    let observed = stat(&errors);
    let mut perm_rng = ChaCha8Rng::seed_from_u64(99);
    let trials = 2000;
    let mut exceed = 0;
    for _ in 0..trials {
        let shuffled: Vec<Vec<f64>> = errors
            .iter()
            .map(|row| {
                let mut r = row.clone();
                r.shuffle(&mut perm_rng);
                r
            })
            .collect();
        if stat(&shuffled) >= observed {
            exceed += 1;
        }
    }
    let p = (exceed + 1) as f64 / (trials + 1) as f64;
    assert!(p > 0.01, "permutation p-value {p}");
}
