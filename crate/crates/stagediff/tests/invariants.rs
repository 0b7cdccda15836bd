//! Property tests for structural invariants that must hold on arbitrary
//! inputs, not just hand-picked examples.

use proptest::prelude::*;
use stagediff::autodiff::Tensor;
use stagediff::diffusion::{forward_noise, make_schedule, x0_from_eps};
use stagediff::guidance::{make_mask, GuidanceSchedule};
use stagediff::sampler::{beta_shapes, mode_from_progress};
use stagediff::ssl::ols_slope;
use stagediff::structure::{sp_loss_and_grad, AffinityOperator};

proptest! {
    #[test]
    fn schedule_is_monotone_and_bounded(
        t_steps in 2usize..300,
        beta_min in 1e-6f64..5e-3,
        spread in 1.5f64..50.0,
    ) {
        let s = make_schedule(t_steps, beta_min, beta_min * spread).unwrap();
        let mut prev = 1.0;
        for t in 0..t_steps {
            prop_assert!(s.beta[t] > 0.0 && s.beta[t] < 1.0);
            prop_assert!(s.alpha_bar[t] > 0.0 && s.alpha_bar[t] < prev);
            prev = s.alpha_bar[t];
        }
    }

    #[test]
    fn noising_round_trips_through_eps(
        x0 in prop::collection::vec(-10.0f64..10.0, 1..32),
        eps in prop::collection::vec(-4.0f64..4.0, 32),
        t in 0usize..100,
    ) {
        let n = x0.len();
        let x0 = Tensor::vector(x0);
        let eps = Tensor::vector(eps[..n].to_vec());
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let z = forward_noise(&x0, t, &eps, &s).unwrap();
        let back = x0_from_eps(&z, &eps, t, &s).unwrap();
        prop_assert!(back.max_abs_diff(&x0) < 1e-9);
    }

    #[test]
    fn gamma_is_a_nonincreasing_unit_ramp(
        rho in 0.05f64..1.0,
        k_tot in 10u64..100_000,
        k in 0u64..200_000,
    ) {
        let gs = GuidanceSchedule::new(rho, k_tot).unwrap();
        let g = gs.gamma(k);
        prop_assert!((0.0..=1.0).contains(&g));
        prop_assert!(gs.gamma(k + 1) <= g);
        prop_assert_eq!(gs.gamma(0), 1.0);
    }

    #[test]
    fn mask_is_binary_and_rank_one(
        rows in 1usize..12,
        cols in 1usize..12,
        gamma in 0.0f64..1.0,
        seed in any::<u64>(),
        k in any::<u64>(),
    ) {
        let m = make_mask(rows, cols, gamma, seed, k).unwrap();
        prop_assert!(m.data.iter().all(|v| *v == 0.0 || *v == 1.0));
        // Axis factorization: every 2x2 minor vanishes.
        for r1 in 0..rows {
            for r2 in (r1 + 1)..rows {
                for c1 in 0..cols {
                    for c2 in (c1 + 1)..cols {
                        let minor = m.at(r1, c1) * m.at(r2, c2) - m.at(r1, c2) * m.at(r2, c1);
                        prop_assert_eq!(minor, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn mode_is_preserved_and_shapes_concentrate(
        mu in 0.01f64..0.99,
        nu in 2.01f64..60.0,
    ) {
        let (a, b) = beta_shapes(mu, nu).unwrap();
        prop_assert!(a > 1.0 && b > 1.0);
        prop_assert!((a + b - nu).abs() < 1e-12);
        prop_assert!(((a - 1.0) / (a + b - 2.0) - mu).abs() < 1e-12);
    }

    #[test]
    fn mode_from_progress_bounds_and_antisymmetry(
        g in -50.0f64..50.0,
        s in 0.01f64..10.0,
    ) {
        let mu = mode_from_progress(g, s).unwrap();
        prop_assert!((0.0..=1.0).contains(&mu));
        let mirror = mode_from_progress(-g, s).unwrap();
        prop_assert!((mu + mirror - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampler_survives_extreme_regimes(
        g in -1e6f64..1e6,
        nu in 2.01f64..60.0,
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        let mut st = stagediff::sampler::SamplerState::new(nu, Some(0.01)).unwrap();
        st.update(g).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let t = st.draw(100, &mut rng).unwrap();
        prop_assert!(t < 100);
    }

    #[test]
    fn ols_slope_is_affine_equivariant(
        ys in prop::collection::vec(-5.0f64..5.0, 3..10),
        scale in -3.0f64..3.0,
        shift in -10.0f64..10.0,
    ) {
        let pts: Vec<(f64, f64)> = ys.iter().enumerate().map(|(i, y)| (i as f64, *y)).collect();
        let base = ols_slope(&pts);
        let moved: Vec<(f64, f64)> =
            pts.iter().map(|(x, y)| (*x, scale * y + shift)).collect();
        prop_assert!((ols_slope(&moved) - scale * base).abs() < 1e-8);
    }

    #[test]
    fn smoothness_penalty_nonnegative_and_blind_to_common_shifts(
        vals in prop::collection::vec(-2.0f64..2.0, 12),
        w01 in 0.0f64..1.0,
        w02 in 0.0f64..1.0,
        w12 in 0.0f64..1.0,
        shift in -5.0f64..5.0,
    ) {
        let l_b = 3;
        let w = vec![0.0, w01, w02, w01, 0.0, w12, w02, w12, 0.0];
        let degree: Vec<f64> =
            (0..l_b).map(|i| w[i * l_b..(i + 1) * l_b].iter().sum()).collect();
        let aff = AffinityOperator { l_b, w, degree };
        let omega = Tensor { shape: vec![4, 3], data: vals.clone() };
        let (loss, _) = sp_loss_and_grad(&omega, &aff).unwrap();
        prop_assert!(loss >= -1e-12);
        // Adding the same vector to every block column leaves the penalty
        // unchanged: it only sees pairwise differences.
        let mut shifted = omega.clone();
        for r in 0..4 {
            for c in 0..3 {
                shifted.data[r * 3 + c] += shift * (r as f64 + 1.0);
            }
        }
        let (loss2, _) = sp_loss_and_grad(&shifted, &aff).unwrap();
        prop_assert!((loss2 - loss).abs() < 1e-8 * (1.0 + loss.abs()));
    }

    #[test]
    fn identical_blocks_have_zero_penalty(
        col in prop::collection::vec(-3.0f64..3.0, 5),
        w01 in 0.01f64..1.0,
    ) {
        let l_b = 2;
        let w = vec![0.0, w01, w01, 0.0];
        let degree = vec![w01, w01];
        let aff = AffinityOperator { l_b, w, degree };
        let mut omega = Tensor::zeros(&[5, 2]);
        for r in 0..5 {
            omega.data[r * 2] = col[r];
            omega.data[r * 2 + 1] = col[r];
        }
        let (loss, grad) = sp_loss_and_grad(&omega, &aff).unwrap();
        prop_assert!(loss.abs() < 1e-12);
        prop_assert!(grad.data.iter().all(|g| g.abs() < 1e-12));
    }
}
