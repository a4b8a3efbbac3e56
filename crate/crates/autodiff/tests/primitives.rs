use priorscan_autodiff::kernels::masked_softmax;
use priorscan_autodiff::{finite_diff_check, AttentionMask, Graph, Result, SeededRng, Tensor, Var};
use proptest::prelude::*;

fn random(rng: &mut SeededRng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap()
}

/// Reduces any output to a scalar with fixed random weights, so every
/// output entry contributes a distinct coefficient to the gradient.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let v = g.value(out).clone();
    let mut rng = SeededRng::new(seed);
    let w = Tensor::new(v.shape().to_vec(), (0..v.len()).map(|_| rng.normal(0.0, 1.0)).collect())?;
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    g.sum(p)
}

type Build = fn(&mut Graph, &[Var]) -> Result<Var>;

fn check_primitive(name: &str, shapes: &[(usize, usize)], build: Build) {
    for point in 0..10u64 {
        let mut rng = SeededRng::new(1000 + point);
        let params: Vec<Tensor> = shapes.iter().map(|&(r, c)| random(&mut rng, r, c)).collect();
        let err = finite_diff_check(&params, 1e-5, |g, v| {
            let out = build(g, v)?;
            project(g, out, 77)
        })
        .unwrap();
        assert!(err < 1e-4, "{name} at point {point}: rel err {err}");
    }
}

#[test]
fn every_primitive_passes_finite_differences() {
    check_primitive("matmul", &[(3, 4), (4, 2)], |g, v| g.matmul(v[0], v[1]));
    check_primitive("matmul_nt", &[(3, 4), (5, 4)], |g, v| g.matmul_nt(v[0], v[1]));
    check_primitive("transpose", &[(3, 2)], |g, v| g.transpose(v[0]));
    check_primitive("add", &[(2, 3), (2, 3)], |g, v| g.add(v[0], v[1]));
    check_primitive("add_row", &[(3, 4), (1, 4)], |g, v| g.add_row(v[0], v[1]));
    check_primitive("mul", &[(2, 3), (2, 3)], |g, v| g.mul(v[0], v[1]));
    check_primitive("scale", &[(2, 2)], |g, v| g.scale(v[0], -1.7));
    check_primitive("mean_rows", &[(4, 3)], |g, v| g.mean_rows(v[0]));
    check_primitive("slice_rows", &[(5, 2)], |g, v| g.slice_rows(v[0], 1, 4));
    check_primitive("slice_cols", &[(3, 5)], |g, v| g.slice_cols(v[0], 2, 5));
    check_primitive("concat_rows", &[(2, 3), (1, 3)], |g, v| g.concat_rows(&[v[0], v[1], v[0]]));
    check_primitive("concat_cols", &[(2, 3), (2, 1)], |g, v| g.concat_cols(&[v[1], v[0]]));
    check_primitive("gather_rows", &[(4, 3)], |g, v| g.gather_rows(v[0], &[2, 0, 2, 3]));
    check_primitive("gelu", &[(3, 3)], |g, v| g.gelu(v[0]));
    check_primitive("l2_normalize_rows", &[(3, 4)], |g, v| g.l2_normalize_rows(v[0]));
    check_primitive("layer_norm", &[(3, 5), (1, 5), (1, 5)], |g, v| g.layer_norm(v[0], v[1], v[2]));
    check_primitive("masked_softmax", &[(3, 4)], |g, v| {
        let mask = AttentionMask::from_fn(3, 4, |r, c| c <= r + 1)?;
        g.masked_softmax(v[0], &mask, 0.5)
    });
    check_primitive("cross_entropy", &[(4, 5)], |g, v| {
        Ok(g.cross_entropy(v[0], &[1, 0, 9, 4], 9)?.loss)
    });
}

#[test]
fn cross_entropy_softmax_path_on_two_by_three_toy() {
    let logits = Tensor::matrix(2, 3, vec![0.2, -1.0, 0.7, 1.5, 0.1, -0.4]).unwrap();
    let w = Tensor::matrix(3, 3, vec![0.3, -0.2, 0.1, 0.05, 0.4, -0.3, -0.1, 0.2, 0.25]).unwrap();
    let err = finite_diff_check(&[logits, w], 1e-5, |g, v| {
        let h = g.matmul(v[0], v[1])?;
        Ok(g.cross_entropy(h, &[2, 0], 99)?.loss)
    })
    .unwrap();
    assert!(err < 1e-6, "rel err {err}");
}

proptest! {
    #[test]
    fn sum_backward_is_all_ones(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let mut g = Graph::new();
        let x = g.leaf(random(&mut rng, rows, cols), true);
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        prop_assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn masked_softmax_is_a_distribution(
        logits in prop::collection::vec(-30.0f64..30.0, 1..12),
        bits in any::<u16>(),
        shift in -50.0f64..50.0,
    ) {
        let n = logits.len();
        let mut allow: Vec<bool> = (0..n).map(|i| bits >> i & 1 == 1).collect();
        allow[bits as usize % n] = true;
        let p = masked_softmax(&logits, &allow).unwrap();
        let total: f64 = p.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        for (&pi, &ok) in p.iter().zip(&allow) {
            if ok { prop_assert!(pi >= 0.0) } else { prop_assert_eq!(pi, 0.0) }
        }
        let shifted: Vec<f64> = logits.iter().zip(&allow).map(|(&x, &ok)| if ok { x + shift } else { x }).collect();
        let q = masked_softmax(&shifted, &allow).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
