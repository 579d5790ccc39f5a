use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(17)
}

/// Checks `f` by reducing its output against a fixed random weighting.
fn check_op(inputs: &[(&str, (usize, usize))], f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let mut r = rng();
    let mut params = ParamStore::new();
    for (name, (rows, cols)) in inputs {
        params.insert(*name, uniform(&mut r, *rows, *cols, 1.0));
    }
    let weights = {
        let mut g = Graph::new(&params);
        let vars: Vec<Var> = inputs.iter().map(|(n, _)| g.param(n).unwrap()).collect();
        let out = f(&mut g, &vars);
        let (rows, cols) = g.shape(out);
        uniform(&mut r, rows, cols, 1.0)
    };
    let eval = |p: &ParamStore| -> (f64, Option<std::collections::BTreeMap<String, Mat>>) {
        let mut g = Graph::new(p);
        let vars: Vec<Var> = inputs.iter().map(|(n, _)| g.param(n).unwrap()).collect();
        let out = f(&mut g, &vars);
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w);
        let loss = g.sum_all(prod);
        (g.scalar(loss), Some(g.backward(loss).into_params(p)))
    };
    let (_, grads) = eval(&params);
    let names: Vec<String> = inputs.iter().map(|(n, _)| n.to_string()).collect();
    let report = check_gradients(&params, &grads.unwrap(), &names, 12, 1e-6, 1e-6, &mut r, |p| Ok(eval(p).0)).unwrap();
    assert!(report.max_rel_error() < 1e-5, "{:?}", report.worst());
}

#[test]
fn matmul_and_transpose() {
    check_op(&[("a", (3, 4)), ("b", (4, 2))], |g, v| g.matmul(v[0], v[1]));
    check_op(&[("a", (3, 4))], |g, v| g.transpose(v[0]));
}

#[test]
fn broadcast_arithmetic() {
    for shape in [(3, 4), (1, 4), (3, 1), (1, 1)] {
        check_op(&[("a", (3, 4)), ("b", shape)], |g, v| g.add(v[0], v[1]));
        check_op(&[("a", (3, 4)), ("b", shape)], |g, v| g.sub(v[0], v[1]));
        check_op(&[("a", (3, 4)), ("b", shape)], |g, v| g.mul(v[0], v[1]));
        check_op(&[("a", (3, 4)), ("b", shape)], |g, v| {
            let b = g.square(v[1]);
            let b = g.add_scalar(b, 0.5);
            g.div(v[0], b)
        });
    }
}

#[test]
fn pointwise() {
    check_op(&[("a", (3, 4))], |g, v| g.tanh(v[0]));
    check_op(&[("a", (3, 4))], |g, v| g.sigmoid(v[0]));
    check_op(&[("a", (3, 4))], |g, v| g.exp(v[0]));
    check_op(&[("a", (3, 4))], |g, v| {
        let s = g.square(v[0]);
        let s = g.add_scalar(s, 0.1);
        g.ln(s)
    });
    check_op(&[("a", (3, 4))], |g, v| g.abs(v[0]));
    check_op(&[("a", (3, 4))], |g, v| g.relu(v[0]));
    check_op(&[("a", (3, 4))], |g, v| g.scale(v[0], -2.5));
}

#[test]
fn normalizations_and_softmax() {
    check_op(&[("a", (3, 5))], |g, v| g.softmax_rows(v[0]));
    check_op(&[("a", (3, 5))], |g, v| g.norm_rows(v[0], 1e-5));
    check_op(&[("a", (6, 3))], |g, v| g.norm_cols(v[0], 1e-5).0);
    check_op(&[("a", (4, 3))], |g, v| g.norm_all(v[0], 1e-8));
}

#[test]
fn reductions_and_slicing() {
    check_op(&[("a", (3, 4))], |g, v| g.sum_all(v[0]));
    check_op(&[("a", (3, 4))], |g, v| g.mean_all(v[0]));
    check_op(&[("a", (3, 4))], |g, v| g.mean_rows(v[0]));
    check_op(&[("a", (3, 6))], |g, v| g.slice_cols(v[0], 1, 4));
    check_op(&[("a", (5, 2))], |g, v| g.slice_rows(v[0], 2, 5));
    check_op(&[("a", (3, 2)), ("b", (3, 3))], |g, v| g.concat_cols(&[v[0], v[1], v[0]]));
    check_op(&[("a", (2, 3)), ("b", (1, 3))], |g, v| g.concat_rows(&[v[1], v[0]]));
    check_op(&[("a", (4, 3))], |g, v| g.gather_rows(v[0], vec![0, 0, 3, 1, 3]));
    check_op(&[("a", (4, 3))], |g, v| g.reshape(v[0], 2, 6));
}

#[test]
fn convolution_helpers() {
    check_op(&[("a", (7, 2))], |g, v| g.im2col1d(v[0], &[3, 4], 3, 1));
    check_op(&[("a", (9, 2))], |g, v| g.im2col1d(v[0], &[9], 3, 2));
    check_op(&[("a", (20, 1))], |g, v| g.frames(v[0], 8, 4, 5));
    check_op(&[("a", (5, 8))], |g, v| g.overlap_add(v[0], 4, 20));
    check_op(&[("a", (15, 2))], |g, v| g.im2col2d_s2(v[0], 5, 3).0);
    check_op(&[("x", (10, 3)), ("w", (3, 3))], |g, v| g.depthwise_conv(v[0], v[1], 2));
    check_op(&[("x", (4, 3)), ("w", (3, 3))], |g, v| g.depthwise_conv(v[0], v[1], 4));
}

#[test]
fn im2col_matches_direct_convolution() {
    let mut r = rng();
    let mut params = ParamStore::new();
    params.insert("x", uniform(&mut r, 6, 2, 1.0));
    let mut g = Graph::new(&params);
    let x = g.param("x").unwrap();
    let cols = g.im2col1d(x, &[6], 3, 1);
    let xv = params.get("x").unwrap();
    let c = g.value(cols);
    for t in 0..6 {
        for j in 0..3 {
            for ch in 0..2 {
                let src = t as isize + j as isize - 1;
                let expected = if (0..6).contains(&src) { xv[[src as usize, ch]] } else { 0.0 };
                assert_eq!(c[[t, j * 2 + ch]], expected);
            }
        }
    }
}

#[test]
fn depthwise_matches_im2col_diagonal() {
    let mut r = rng();
    let mut params = ParamStore::new();
    params.insert("x", uniform(&mut r, 12, 3, 1.0));
    params.insert("w", uniform(&mut r, 3, 3, 1.0));
    let mut g = Graph::new(&params);
    let x = g.param("x").unwrap();
    let w = g.param("w").unwrap();
    let y = g.depthwise_conv(x, w, 2);
    let cols = g.im2col1d(x, &[12], 3, 2);
    let (xv, wv) = (g.value(cols).clone(), params.get("w").unwrap().clone());
    for t in 0..12 {
        for c in 0..3 {
            let expected: f64 = (0..3).map(|j| xv[[t, j * 3 + c]] * wv[[j, c]]).sum();
            assert!((g.value(y)[[t, c]] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn transformer_block_gradients() {
    let mut r = rng();
    let mut params = ParamStore::new();
    layers::init_transformer_block(&mut params, &mut r, "blk", 8, 12, 3);
    params.insert("x", uniform(&mut r, 5, 8, 1.0));
    let eval = |p: &ParamStore| {
        let mut g = Graph::new(p);
        let x = g.param("x").unwrap();
        let y = layers::transformer_block(&mut g, x, "blk", 2, 3).unwrap();
        let s = g.square(y);
        let t = g.tanh(s);
        let loss = g.mean_all(t);
        (g.scalar(loss), g.backward(loss).into_params(p))
    };
    let (_, grads) = eval(&params);
    let names: Vec<String> = params.names().cloned().collect();
    let report = check_gradients(&params, &grads, &names, 4, 1e-6, 1e-7, &mut r, |p| Ok(eval(p).0)).unwrap();
    assert!(report.max_rel_error() < 1e-4, "{:?}", report.worst());
}
