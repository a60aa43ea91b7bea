//! Randomized invariants across the operator and variational layers.

use dinozaur_core::bayes::{kl_divergence, BlockPosterior, TimePrior, VariationalPosterior};
use dinozaur_core::operator::{count_params, gradient_features, Activation, BlockKind, DinozaurBlock, FnoBlock, NetworkSpec};
use dinozaur_core::rng::SeededRng;
use dinozaur_core::spectral::{self, heat_factor, Complex64, Field, Grid, ModeSet};
use proptest::prelude::*;

fn random_field(grid: &Grid, c: usize, seed: u64) -> Field {
    let mut v = vec![0.0; grid.len() * c];
    SeededRng::new(seed, 0).fill_normal(&mut v);
    Field::new(grid.clone(), c, v).unwrap()
}

fn shape() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (1usize..=3).prop_flat_map(|d| {
        prop::collection::vec(2usize..=5, d).prop_map(|k| {
            let dims = k.iter().map(|&k| 2 * k + 2).collect();
            (dims, k)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn diagonal_multiplier_embeds_diffusion(
        (dims, kmax) in shape(),
        c in 1usize..4,
        seed in any::<u64>(),
    ) {
        let grid = Grid::new(dims).unwrap();
        let modes = ModeSet::new(kmax).unwrap();
        let mut rng = SeededRng::new(seed, 1);
        let mut dino = DinozaurBlock::zeros(c, modes.clone(), false);
        dino.w_skip = (0..c * c).map(|_| rng.normal()).collect();
        dino.bias = (0..c).map(|_| rng.normal()).collect();
        dino.w_mix = (0..c * c).map(|_| rng.normal()).collect();
        dino.log_tau = (0..c).map(|_| rng.uniform(-8.0, 0.0)).collect();
        let plan = spectral::plan(&grid, &modes).unwrap();
        let mut fno = FnoBlock::zeros(c, modes, &grid).unwrap();
        fno.w_skip = dino.w_skip.clone();
        fno.bias = dino.bias.clone();
        for m in 0..plan.num_modes() {
            for o in 0..c {
                for i in 0..c {
                    let e = heat_factor(plan.sq_norms()[m], dino.log_tau[i].exp());
                    fno.set_r(m, o, i, Complex64::new(dino.w_mix[o * c + i] * e, 0.0));
                }
            }
        }
        let v = random_field(&grid, c, seed ^ 0x5a5a);
        let a = dino.forward(&v).unwrap();
        let b = fno.forward(&v).unwrap();
        let scale = a.values().iter().fold(1e-300f64, |m, x| m.max(x.abs()));
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn gradient_features_are_bounded(
        (dims, kmax) in shape(),
        c in 1usize..3,
        log_amp in -4.0f64..3.0,
        seed in any::<u64>(),
    ) {
        let grid = Grid::new(dims).unwrap();
        let amp = 10f64.powf(log_amp);
        let mut v = random_field(&grid, c, seed);
        v.values_mut().iter_mut().for_each(|x| *x *= amp);
        let mut rng = SeededRng::new(seed, 2);
        let w: Vec<f64> = (0..c * c).map(|_| rng.normal()).collect();
        let f = gradient_features(&v, &w, &ModeSet::new(kmax).unwrap()).unwrap();
        // tanh rounds to ±1 in f64 only once its argument passes ~19
        let strict = amp < 1e-2;
        let bounded = f.values().iter().all(|x| if strict { x.abs() < 1.0 } else { x.abs() <= 1.0 });
        prop_assert!(bounded);
    }

    #[test]
    fn diffusion_block_count_ignores_grid((dims, kmax) in shape(), width in 1usize..48, blocks in 1usize..6) {
        let spec = NetworkSpec::new(dims, kmax, width, blocks, 1, 1, BlockKind::Diffusion);
        let t = count_params(&spec).unwrap();
        prop_assert_eq!(t.per_block, 4 * width * width + 2 * width);
        prop_assert_eq!(t.blocks, blocks * t.per_block);
        let base = count_params(&NetworkSpec::new(vec![8], vec![2], width, blocks, 1, 1, BlockKind::Diffusion)).unwrap();
        prop_assert_eq!(t.total, base.total);
    }

    #[test]
    fn kl_is_nonnegative_and_vanishes_only_at_prior(
        mean in -8.0f64..0.0,
        std in 0.1f64..3.0,
        shift in prop::collection::vec(-1.0f64..1.0, 3),
        seed in any::<u64>(),
    ) {
        let prior = TimePrior::new(mean, std).unwrap();
        let c = 3;
        let mut chol = vec![0.0; c * c];
        (0..c).for_each(|i| chol[i * c + i] = std);
        let at_prior = VariationalPosterior::new(c, vec![BlockPosterior { mean: vec![mean; c], chol: chol.clone() }]).unwrap();
        prop_assert!(kl_divergence(&at_prior, &prior).abs() <= 1e-12);

        let mut rng = SeededRng::new(seed, 3);
        for i in 0..c {
            for k in 0..i {
                chol[i * c + k] = 0.3 * rng.normal();
            }
        }
        let moved: Vec<f64> = shift.iter().map(|s| mean + s).collect();
        let q = VariationalPosterior::new(c, vec![BlockPosterior { mean: moved, chol }]).unwrap();
        let kl = kl_divergence(&q, &prior);
        prop_assert!(kl >= 0.0);
        let off_prior = shift.iter().any(|s| s.abs() > 1e-3) || (0..c).any(|i| (0..i).any(|k| q.blocks()[0].chol[i * c + k] != 0.0));
        if off_prior {
            prop_assert!(kl > 0.0);
        }
    }

    #[test]
    fn heat_identity_block_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0, log_tau in -9.0f64..-1.0) {
        let grid = Grid::new(vec![24]).unwrap();
        let mut b = DinozaurBlock::zeros(2, ModeSet::new(vec![8]).unwrap(), false);
        b.w_mix = vec![1.0, 0.0, 0.0, 1.0];
        b.activation = Activation::Identity;
        b.log_tau = vec![log_tau; 2];
        let f = random_field(&grid, 2, seed);
        let h = random_field(&grid, 2, seed.wrapping_add(1));
        let comb = Field::new(grid.clone(), 2, f.values().iter().zip(h.values()).map(|(a, b)| alpha * a + b).collect()).unwrap();
        let (bf, bh, bc) = (b.forward(&f).unwrap(), b.forward(&h).unwrap(), b.forward(&comb).unwrap());
        for ((x, y), z) in bf.values().iter().zip(bh.values()).zip(bc.values()) {
            prop_assert!((alpha * x + y - z).abs() < 1e-12);
        }
    }
}
