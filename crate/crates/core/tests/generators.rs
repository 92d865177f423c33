use reiil_core::datagen::{
    gen_color_spurious, gen_proxy_cbmnist, gen_sem, regroup_shuffled, shuffled_fraction, CbVariant, ColorBase,
    ColorParams, ColorProxySpec, ProxySpec,
};
use reiil_core::metrics::{mi_diagnostics, mutual_info_discrete};
use reiil_core::{Dataset, RngSeed};

fn real_labels(d: &Dataset) -> &[f64] {
    d.labels().as_real().unwrap()
}

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            let pivot = a[c].clone();
            for (v, p) in a[r][c..].iter_mut().zip(&pivot[c..]) {
                *v -= f * p;
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

fn ols(sets: &[Dataset]) -> Vec<f64> {
    let p = sets[0].dim();
    let mut xtx = vec![vec![0.0; p]; p];
    let mut xty = vec![0.0; p];
    for d in sets {
        for (row, &y) in d.features().rows().into_iter().zip(real_labels(d)) {
            for i in 0..p {
                xty[i] += row[i] * y;
                for j in 0..p {
                    xtx[i][j] += row[i] * row[j];
                }
            }
        }
    }
    solve(xtx, xty)
}

#[test]
fn sem_anticausal_residual_has_unit_variance() {
    let d = 3;
    let (sets, truth) = gen_sem("FOU".parse().unwrap(), d, 50_000, &[2.0], RngSeed(3)).unwrap();
    let data = &sets[0];
    let y = real_labels(data);
    let x = data.features();
    for j in 0..d {
        let r: Vec<f64> = (0..data.len()).map(|i| x[[i, d + j]] - y[i] * truth.w_anticausal[j]).collect();
        let v = variance(&r);
        assert!((v - 1.0).abs() < 0.05, "Var(Z{j} | Y) = {v}");
    }
    let ry: Vec<f64> = (0..data.len())
        .map(|i| y[i] - (0..d).map(|j| x[[i, j]] * truth.w_causal[j]).sum::<f64>())
        .collect();
    let v = variance(&ry);
    assert!((v - 4.0).abs() < 0.2, "Var(Y | X) = {v}");
}

#[test]
fn sem_heteroskedastic_moves_noise_to_anticausal_block() {
    let d = 2;
    let (sets, truth) = gen_sem("FEU".parse().unwrap(), d, 40_000, &[3.0], RngSeed(4)).unwrap();
    let data = &sets[0];
    let y = real_labels(data);
    let x = data.features();
    let ry: Vec<f64> = (0..data.len())
        .map(|i| y[i] - (0..d).map(|j| x[[i, j]] * truth.w_causal[j]).sum::<f64>())
        .collect();
    assert!((variance(&ry) - 1.0).abs() < 0.05);
    let rz: Vec<f64> = (0..data.len()).map(|i| x[[i, d]] - y[i] * truth.w_anticausal[0]).collect();
    assert!((variance(&rz) - 9.0).abs() < 0.45);
}

#[test]
fn pooled_ols_leans_on_anticausal_features() {
    let d = 3;
    let (sets, _) = gen_sem("FOU".parse().unwrap(), d, 5_000, &[0.2, 2.0], RngSeed(5)).unwrap();
    let w = ols(&sets);
    let anti: f64 = w[d..].iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(anti > 0.1, "anti-causal weight norm {anti}");
}

#[test]
fn scrambled_sem_preserves_labels_and_norms() {
    let d = 3;
    let seed = RngSeed(6);
    let (plain, _) = gen_sem("FOU".parse().unwrap(), d, 200, &[1.0], seed).unwrap();
    let (mixed, truth) = gen_sem("FOS".parse().unwrap(), d, 200, &[1.0], seed).unwrap();
    assert_eq!(real_labels(&plain[0]), real_labels(&mixed[0]));
    let back = mixed[0].features().dot(&truth.scramble);
    let diff = (&back - plain[0].features()).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    assert!(diff < 1e-9, "unscrambled features differ by {diff}");
}

fn proxy_color(label_noise: f64, flips: Vec<f64>, n: usize, seed: u64) -> Vec<Dataset> {
    let params = ColorParams {
        label_noise,
        env_color_flips: flips,
        test_color_flip: 0.9,
        n_per_env: n,
        n_test: 100,
    };
    gen_color_spurious(ColorBase::Proxy(&ColorProxySpec::default()), &params, RngSeed(seed))
        .unwrap()
        .train
}

fn labels_i32(d: &Dataset) -> Vec<i32> {
    d.class_labels().unwrap().iter().map(|&c| c as i32).collect()
}

fn agreement(d: &Dataset) -> f64 {
    let y = labels_i32(d);
    let c = d.spurious_id().unwrap();
    y.iter().zip(c).filter(|(a, b)| a == b).count() as f64 / y.len() as f64
}

#[test]
fn noiseless_colour_carries_one_bit() {
    let env = &proxy_color(0.0, vec![0.0], 20_000, 7)[0];
    assert_eq!(agreement(env), 1.0);
    let mi = mutual_info_discrete(&labels_i32(env), env.spurious_id().unwrap());
    assert!((mi - 2f64.ln()).abs() < 1e-3, "I(Y;colour) = {mi}");
    let parity: Vec<i32> = env.causal_id().unwrap().iter().map(|c| c % 2).collect();
    assert_eq!(parity, labels_i32(env));
}

#[test]
fn coin_flip_colour_agrees_half_the_time() {
    let env = &proxy_color(0.25, vec![0.5], 10_000, 8)[0];
    assert!((agreement(env) - 0.5).abs() < 0.02);
}

#[test]
fn colour_only_accuracy_matches_flip_rates() {
    let envs = proxy_color(0.25, vec![0.1, 0.2], 25_000, 9);
    let pool = Dataset::concat(&envs.iter().collect::<Vec<_>>()).unwrap();
    assert!((agreement(&pool) - 0.85).abs() < 0.01);
    let parity: Vec<i32> = pool.causal_id().unwrap().iter().map(|c| c % 2).collect();
    let y = labels_i32(&pool);
    let digit = parity.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64;
    assert!((digit - 0.75).abs() < 0.01, "digit-only accuracy {digit}");
}

fn proxy(shuffle: (f64, f64), variant: CbVariant, n: usize, seed: u64) -> reiil_core::datagen::BackgroundBenchmark {
    let spec = ProxySpec {
        n_per_env: n,
        shuffle_probs: shuffle,
        variant,
        ..ProxySpec::default()
    };
    gen_proxy_cbmnist(&spec, RngSeed(seed)).unwrap()
}

#[test]
fn unshuffled_proxy_background_determines_label() {
    let b = proxy((0.0, 0.0), CbVariant::I, 10_000, 10);
    let pool = Dataset::concat(&[&b.env1, &b.env2]).unwrap();
    assert_eq!(shuffled_fraction(&pool).unwrap(), 0.0);
    for (&y, &z) in pool.class_labels().unwrap().iter().zip(pool.spurious_id().unwrap()) {
        assert_eq!(b.mapping.train_map[y as usize] as i32, z);
    }
    let mi = mi_diagnostics(&pool).unwrap();
    assert!((mi.i_yz - 10f64.ln()).abs() < 0.02, "I(Y;Z) = {}", mi.i_yz);
    assert!(mi.gap > 0.0);
}

#[test]
fn default_shuffle_rate_pools_to_one_and_a_half_percent() {
    let b = proxy((0.01, 0.02), CbVariant::I, 25_000, 11);
    let pool = Dataset::concat(&[&b.env1, &b.env2]).unwrap();
    let f = shuffled_fraction(&pool).unwrap();
    assert!((f - 0.015).abs() < 0.002, "shuffled fraction {f}");
    assert!(shuffled_fraction(&b.env1).unwrap() < shuffled_fraction(&b.env2).unwrap());
}

#[test]
fn shuffled_backgrounds_avoid_train_and_test_maps() {
    let b = proxy((0.3, 0.3), CbVariant::I, 2_000, 12);
    let m = &b.mapping;
    for env in [&b.env1, &b.env2] {
        let y = env.class_labels().unwrap();
        let z = env.spurious_id().unwrap();
        for ((&y, &z), &s) in y.iter().zip(z).zip(env.is_shuffled().unwrap()) {
            let (tr, te) = (m.train_map[y as usize] as i32, m.test_map[y as usize] as i32);
            if s {
                assert!(z != tr && z != te);
            } else {
                assert_eq!(z, tr);
            }
        }
    }
}

#[test]
fn test_split_uses_the_test_mapping() {
    let b = proxy((0.01, 0.02), CbVariant::II, 1_000, 13);
    for c in 0..10 {
        assert_ne!(b.mapping.train_map[c], b.mapping.test_map[c]);
    }
    let y = b.test.class_labels().unwrap();
    for (&y, &z) in y.iter().zip(b.test.spurious_id().unwrap()) {
        assert_eq!(b.mapping.test_map[y as usize] as i32, z);
    }
}

#[test]
fn regrouping_conserves_rows_and_sorts_by_flag() {
    let b = proxy((0.1, 0.2), CbVariant::III, 1_000, 14);
    let s = regroup_shuffled(&b.env1, &b.env2).unwrap();
    let (n0, n1) = s.sizes();
    assert_eq!(n0 + n1, 2_000);
    assert!(s.env0.as_ref().unwrap().is_shuffled().unwrap().iter().all(|&f| !f));
    assert!(s.env1.as_ref().unwrap().is_shuffled().unwrap().iter().all(|&f| f));

    let clean = proxy((0.0, 0.0), CbVariant::I, 500, 15);
    let s = regroup_shuffled(&clean.env1, &clean.env2).unwrap();
    assert_eq!(s.sizes(), (1_000, 0));
    assert!(s.env1.is_none());
}
