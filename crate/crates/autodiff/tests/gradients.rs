use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spm_autodiff::{
    adamw_step, grad_check, load_spmw, save_spmw, AutodiffError, OptimizerState, ParamStore, Tape, Tensor, Var,
};

const TOL: f64 = 1e-6;
const H: f64 = 1e-5;

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Weighted sum against fixed weights of magnitude in [0.5, 1.5] and random
/// sign, so every output element gets a distinct, non-vanishing adjoint.
fn project(t: &mut Tape, y: Var, seed: u64) -> Result<Var, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = t.value(y).len();
    let w = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.5..1.5);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    let r = t.constant(t.shape(y).to_vec().as_slice(), w)?;
    let p = t.mul(y, r)?;
    Ok(t.sum(p))
}

#[test]
fn conv2d_matches_finite_differences() {
    let x = rand_t(&[1, 2, 5, 5], 1);
    let w = rand_t(&[3, 2, 3, 3], 2);
    let b = rand_t(&[3], 3);
    for stride in [1, 2] {
        let r = grad_check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), stride)?;
                project(t, y, 9)
            },
            &[x.clone(), w.clone(), b.clone()],
            H,
        )
        .unwrap();
        assert!(r.max_rel_err < TOL, "stride {stride}: {r:?}");
    }
}

#[test]
fn pointwise_conv_and_batches() {
    let x = rand_t(&[3, 4, 3, 2], 4);
    let w = rand_t(&[2, 4, 1, 1], 5);
    let r = grad_check(
        |t, v| {
            let y = t.conv2d(v[0], v[1], None, 1)?;
            project(t, y, 6)
        },
        &[x, w],
        H,
    )
    .unwrap();
    assert!(r.max_rel_err < TOL, "{r:?}");
}

#[test]
fn linear_matmul_reshape() {
    let x = rand_t(&[3, 4], 7);
    let w = rand_t(&[5, 4], 8);
    let b = rand_t(&[5], 9);
    let a = rand_t(&[5, 2], 10);
    let r = grad_check(
        |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            let z = t.matmul(y, v[3])?;
            let z = t.reshape(z, &[2, 3])?;
            project(t, z, 11)
        },
        &[x, w, b, a],
        H,
    )
    .unwrap();
    assert!(r.max_rel_err < TOL, "{r:?}");
}

#[test]
fn channel_add_and_upsample() {
    let x = rand_t(&[2, 3, 2, 3], 12);
    let e = rand_t(&[2, 3], 13);
    let r = grad_check(
        |t, v| {
            let y = t.add_channel(v[0], v[1])?;
            let y = t.upsample2(y)?;
            let y = t.silu(y);
            project(t, y, 14)
        },
        &[x, e],
        H,
    )
    .unwrap();
    assert!(r.max_rel_err < TOL, "{r:?}");
}

#[test]
fn clamp_away_from_kinks() {
    let x = Tensor::new(&[5], vec![-0.3, 0.2, 0.45, 0.9, 1.4]).unwrap();
    let r = grad_check(
        |t, v| {
            let y = t.clamp01(v[0]);
            project(t, y, 15)
        },
        &[x],
        H,
    )
    .unwrap();
    assert!(r.max_rel_err < TOL, "{r:?}");
}

fn elementwise_loss(t: &mut Tape, v: &[Var], which: u8) -> Result<Var, AutodiffError> {
    let y = match which {
        0 => t.add(v[0], v[1])?,
        1 => t.sub(v[0], v[1])?,
        2 => t.mul(v[0], v[1])?,
        3 => t.scale(v[0], -1.7),
        4 => t.silu(v[0]),
        5 => t.mul(v[0], v[2])?,
        _ => {
            let s = t.mean(v[0]);
            t.add(v[1], s)?
        }
    };
    project(t, y, 99)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn elementwise_ops_random_shapes(d0 in 1usize..4, d1 in 1usize..5, which in 0u8..7, seed in 0u64..1000) {
        let a = rand_t(&[d0, d1], seed);
        let b = rand_t(&[d0, d1], seed + 1);
        let s = rand_t(&[], seed + 2);
        let r = grad_check(|t, v| elementwise_loss(t, v, which), &[a, b, s], H).unwrap();
        prop_assert!(r.max_rel_err < TOL, "{:?}", r);
    }

    #[test]
    fn conv_random_shapes(c in 1usize..3, o in 1usize..3, hw in 2usize..6, k in prop::sample::select(vec![1usize, 3, 5]), stride in 1usize..3, seed in 0u64..1000) {
        let x = rand_t(&[2, c, hw, hw + 1], seed);
        let w = rand_t(&[o, c, k, k], seed + 1);
        let b = rand_t(&[o], seed + 2);
        let r = grad_check(|t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride)?;
            let y = t.silu(y);
            project(t, y, seed + 3)
        }, &[x, w, b], H).unwrap();
        prop_assert!(r.max_rel_err < TOL, "{:?}", r);
    }
}

#[test]
fn masked_mse_ignores_pixels_outside_omega() {
    let pred = rand_t(&[1, 1, 4, 4], 20).trainable();
    let target = rand_t(&[1, 1, 4, 4], 21).trainable();
    let omega: Vec<bool> = (0..16).map(|i| i % 3 != 0).collect();
    let run = |target: &Tensor| {
        let mut t = Tape::new();
        let p = t.leaf(&pred);
        let q = t.leaf(target);
        let l = t.masked_mse(p, q, &omega).unwrap();
        let g = t.backward(l).unwrap();
        (t.scalar(l).unwrap(), g.get(p).unwrap().to_vec(), g.get(q).unwrap().to_vec())
    };
    let base = run(&target);
    for i in (0..16).filter(|i| !omega[*i]) {
        assert_eq!(base.1[i], 0.0);
        let mut moved = target.clone();
        moved.data[i] += 123.456;
        let other = run(&moved);
        assert_eq!(base.0.to_bits(), other.0.to_bits());
        assert!(base.1.iter().zip(&other.1).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(base.2.iter().zip(&other.2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    // all-pixel Ω is the plain mean squared error
    let mut t = Tape::new();
    let p = t.leaf(&pred);
    let q = t.leaf(&target);
    let l = t.masked_mse(p, q, &[true; 16]).unwrap();
    let d = t.sub(p, q).unwrap();
    let sq = t.mul(d, d).unwrap();
    let m = t.mean(sq);
    assert!((t.scalar(l).unwrap() - t.scalar(m).unwrap()).abs() < 1e-15);
    let r = grad_check(|t, v| t.masked_mse(v[0], v[1], &omega), &[pred, target], H).unwrap();
    assert!(r.max_rel_err < TOL, "{r:?}");
}

fn train_run(seed: u64) -> ParamStore {
    let mut p = ParamStore::new();
    p.insert("w", rand_t(&[2, 1, 3, 3], seed).trainable());
    p.insert("b", Tensor::zeros(&[2]).trainable());
    let mut state = OptimizerState::new(&p, 0.01);
    let x = rand_t(&[1, 1, 6, 6], seed + 1);
    let y = rand_t(&[1, 2, 6, 6], seed + 2);
    for _ in 0..100 {
        let mut t = Tape::new();
        let vars = p.record(&mut t);
        let xv = t.leaf(&x);
        let yv = t.leaf(&y);
        let out = t.conv2d(xv, vars["w"], Some(vars["b"]), 1).unwrap();
        let l = t.masked_mse(out, yv, &[true; 72]).unwrap();
        let g = t.backward(l).unwrap();
        p.accumulate_grads(&vars, &g);
        adamw_step(&mut p, &mut state, 0.01).unwrap();
    }
    p
}

#[test]
fn training_is_bit_reproducible() {
    let a = train_run(30);
    let b = train_run(30);
    for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
        assert!(x.data.iter().zip(&y.data).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    assert_ne!(a, train_run(31));
}

#[test]
fn checkpoint_file_roundtrip() {
    let p = train_run(5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.spmw");
    save_spmw(&p, &path).unwrap();
    let back = load_spmw(&path).unwrap();
    for ((na, a), (nb, b)) in p.iter().zip(back.iter()) {
        assert_eq!(na, nb);
        assert_eq!(a.shape, b.shape);
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
