use super::gradcheck::{check_gradients, GradCheckOptions};
use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random_store(shapes: &[(&str, &[usize])], seed: u64) -> (ParamStore<f32>, Vec<ParamId>) {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed);
    let ids = shapes
        .iter()
        .map(|(name, shape)| {
            let v = Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0) as f32);
            store.add(name, v).unwrap()
        })
        .collect();
    (store, ids)
}

/// Project an arbitrary tensor to a scalar with fixed pseudo-random weights so
/// every output coordinate receives a distinct upstream gradient.
fn project(tape: &mut Tape<'_, f64>, y: Var) -> Result<Var, NumericsError> {
    let shape = tape.shape(y).to_vec();
    let w = Tensor::from_fn(&shape, |i| ((i as f64 + 1.0) * 0.7311).sin());
    let w = tape.input(w)?;
    let prod = tape.mul(y, w)?;
    tape.sum(prod)
}

fn assert_gradcheck<F>(name: &str, store: &ParamStore<f32>, f: F)
where
    F: FnMut(&mut Tape<'_, f64>) -> Result<Var, NumericsError>,
{
    let report = check_gradients(name, store, &GradCheckOptions::default(), f).unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn sum_of_squares_gradient() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let x = tape.variable(t(&[2], &[1.0, 2.0])).unwrap();
    let sq = tape.square(x).unwrap();
    let loss = tape.sum(sq).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn sigmoid_at_zero() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let x = tape.variable(t(&[1], &[0.0])).unwrap();
    let y = tape.sigmoid(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5]);
    let loss = tape.sum(y).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.25]);
}

#[test]
fn stopgrad_is_identity_forward_and_zero_backward() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let x = tape.variable(t(&[3], &[1.0, -2.0, 0.5])).unwrap();
    let s = tape.stopgrad(x).unwrap();
    assert_eq!(tape.value(s), tape.value(x));
    let y = tape.square(s).unwrap();
    let loss = tape.sum(y).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.get(x).is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn straight_through_copies_gradient_exactly() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let z = tape.variable(t(&[2, 2], &[0.1, 0.2, 0.3, 0.4])).unwrap();
    let e = tape.variable(t(&[2, 2], &[1.0, 0.0, -1.0, 2.0])).unwrap();
    let st = tape.straight_through(z, e).unwrap();
    assert_eq!(tape.value(st), tape.value(e));
    let y = tape.tanh(st).unwrap();
    let loss = project(&mut tape, y).unwrap();
    let g = tape.backward_retain_all(loss).unwrap();
    assert_eq!(g.get(z).unwrap(), g.get(st).unwrap());
    assert!(g.get(e).is_none());
}

#[test]
fn conv1d_output_length() {
    let store = ParamStore::<f32>::new();
    let mut tape = Tape::new(&store);
    let x = tape.input(Tensor::zeros(&[1, 32, 3])).unwrap();
    let w = tape.input(Tensor::zeros(&[4, 3, 5])).unwrap();
    let b = tape.input(Tensor::zeros(&[5])).unwrap();
    let y = tape.conv1d(x, w, b, 2, 1, 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 16, 5]);
    let w2 = tape_input_w(&mut tape, 5);
    let b2 = tape_input_b(&mut tape);
    let y2 = tape.conv1d(y, w2, b2, 1, 2, 1).unwrap();
    assert_eq!(tape.shape(y2), &[1, 16, 2]);
}

fn tape_input_w(tape: &mut Tape<'_, f32>, cin: usize) -> Var {
    tape.input(Tensor::zeros(&[4, cin, 2])).unwrap()
}

fn tape_input_b(tape: &mut Tape<'_, f32>) -> Var {
    tape.input(Tensor::zeros(&[2])).unwrap()
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let store = ParamStore::<f32>::new();
    let mut tape = Tape::new(&store);
    let a = tape.input(Tensor::zeros(&[2, 3])).unwrap();
    let b = tape.input(Tensor::zeros(&[4, 5])).unwrap();
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    assert!(tape.add(a, b).is_err());
}

#[test]
fn non_finite_values_are_errors() {
    let store = ParamStore::<f32>::new();
    let mut tape = Tape::new(&store);
    let a = tape.input(Tensor::zeros(&[2])).unwrap();
    assert_eq!(tape.log(a).unwrap_err(), NumericsError::NonFinite("log"));
}

#[test]
fn non_scalar_loss_rejected() {
    let store = ParamStore::<f32>::new();
    let mut tape = Tape::new(&store);
    let a = tape.variable(Tensor::zeros(&[2])).unwrap();
    assert!(matches!(tape.backward(a), Err(NumericsError::NotScalar(_))));
}

#[test]
fn unreachable_parameter_gets_no_gradient() {
    let (store, ids) = random_store(&[("used", &[3]), ("unused", &[3])], 1);
    let mut tape = Tape::new(&store);
    let u = tape.param(ids[0]);
    let _ = tape.param(ids[1]);
    let loss = tape.sum(u).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.param(ids[1]).is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
    assert_eq!(g.param(ids[0]).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn gradcheck_matmul_and_broadcast_add() {
    let (store, ids) = random_store(&[("a", &[3, 4]), ("b", &[4, 5]), ("c", &[5])], 2);
    assert_gradcheck("matmul+add", &store, |tape| {
        let (a, b, c) = (tape.param(ids[0]), tape.param(ids[1]), tape.param(ids[2]));
        let ab = tape.matmul(a, b)?;
        let y = tape.add(ab, c)?;
        project(tape, y)
    });
}

#[test]
fn gradcheck_sub_mul_affine() {
    let (store, ids) = random_store(&[("a", &[2, 3, 4]), ("b", &[3, 4]), ("c", &[4])], 3);
    assert_gradcheck("sub/mul/affine", &store, |tape| {
        let (a, b, c) = (tape.param(ids[0]), tape.param(ids[1]), tape.param(ids[2]));
        let d = tape.sub(a, b)?;
        let e = tape.mul(d, c)?;
        let f = tape.affine(e, -1.5, 0.25)?;
        let g = tape.mul(f, f)?;
        project(tape, g)
    });
}

#[test]
fn gradcheck_concat_slice_reshape_sum_axis() {
    let (store, ids) = random_store(&[("a", &[2, 3, 4]), ("b", &[2, 2, 4])], 4);
    assert_gradcheck("concat/slice/reshape", &store, |tape| {
        let (a, b) = (tape.param(ids[0]), tape.param(ids[1]));
        let c = tape.concat(&[a, b], 1)?;
        let s = tape.slice(c, 1, 1, 4)?;
        let s2 = tape.slice(s, 2, 1, 3)?;
        let r = tape.reshape(s2, &[3, 4])?;
        let q = tape.sum_axis(r, 0)?;
        let sq = tape.square(q)?;
        project(tape, sq)
    });
}

#[test]
fn gradcheck_activations() {
    let (store, ids) = random_store(&[("x", &[3, 5])], 5);
    assert_gradcheck("sigmoid/tanh/exp/relu", &store, |tape| {
        let x = tape.param(ids[0]);
        let a = tape.sigmoid(x)?;
        let b = tape.tanh(x)?;
        let c = tape.exp(x)?;
        let d = tape.relu(x)?;
        let l = tape.log(a)?;
        let ab = tape.mul(a, b)?;
        let cd = tape.add(c, d)?;
        let y = tape.add(ab, cd)?;
        let y = tape.add(y, l)?;
        project(tape, y)
    });
}

#[test]
fn gradcheck_softmax_and_cross_entropy() {
    let (store, ids) = random_store(&[("x", &[4, 6])], 6);
    assert_gradcheck("softmax", &store, |tape| {
        let x = tape.param(ids[0]);
        let y = tape.softmax(x)?;
        project(tape, y)
    });
    assert_gradcheck("cross_entropy", &store, |tape| {
        let x = tape.param(ids[0]);
        tape.cross_entropy(x, &[0, 5, 2, 2])
    });
}

#[test]
fn gradcheck_bce_mean() {
    let (store, ids) = random_store(&[("x", &[3, 7])], 7);
    let target = Tensor::from_fn(&[3, 7], |i| (i % 3 == 0) as u8 as f64);
    assert_gradcheck("bce", &store, |tape| {
        let x = tape.param(ids[0]);
        let p = tape.sigmoid(x)?;
        let l = tape.bce(p, &target)?;
        let m = tape.mean(x)?;
        let m2 = tape.square(m)?;
        tape.add(l, m2)
    });
}

#[test]
fn gradcheck_embedding() {
    let (store, ids) = random_store(&[("table", &[5, 3])], 8);
    assert_gradcheck("embedding", &store, |tape| {
        let tbl = tape.param(ids[0]);
        let e = tape.embedding(tbl, &[4, 0, 4, 2])?;
        let y = tape.tanh(e)?;
        project(tape, y)
    });
}

#[test]
fn gradcheck_conv_and_transposed_conv() {
    let (store, ids) = random_store(
        &[
            ("x", &[2, 9, 3]),
            ("w", &[4, 3, 5]),
            ("b", &[5]),
            ("wt", &[5, 4, 2]),
            ("bt", &[2]),
        ],
        9,
    );
    assert_gradcheck("conv1d", &store, |tape| {
        let (x, w, b) = (tape.param(ids[0]), tape.param(ids[1]), tape.param(ids[2]));
        let y = tape.conv1d(x, w, b, 2, 1, 2)?;
        let (wt, bt) = (tape.param(ids[3]), tape.param(ids[4]));
        let z = tape.conv_transpose1d(y, wt, bt, 2, 1, 1)?;
        project(tape, z)
    });
}

#[test]
fn transposed_conv_is_adjoint_of_conv() {
    // <conv(x), y> == <x, conv_t(y)> with shared weights and zero bias.
    let mut rng = Rng::new(11);
    let (b, l, cin, cout, k) = (2, 8, 3, 4, 4);
    let x = Tensor::<f64>::from_fn(&[b, l, cin], |_| rng.normal());
    let w = Tensor::<f64>::from_fn(&[k, cin, cout], |_| rng.normal());
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let xv = tape.input(x.clone()).unwrap();
    let wv = tape.input(w.clone()).unwrap();
    let zb = tape.input(Tensor::zeros(&[cout])).unwrap();
    let y = tape.conv1d(xv, wv, zb, 2, 1, 1).unwrap();
    let lout = tape.shape(y)[1];
    let ydual = Tensor::<f64>::from_fn(&[b, lout, cout], |_| rng.normal());
    // Transposed weight layout [Cout, K, Cin].
    let mut wt = Tensor::<f64>::zeros(&[cout, k, cin]);
    for kk in 0..k {
        for ci in 0..cin {
            for co in 0..cout {
                wt.data_mut()[(co * k + kk) * cin + ci] = w.data()[(kk * cin + ci) * cout + co];
            }
        }
    }
    let yd = tape.input(ydual.clone()).unwrap();
    let wtv = tape.input(wt).unwrap();
    let zc = tape.input(Tensor::zeros(&[cin])).unwrap();
    let xt = tape.conv_transpose1d(yd, wtv, zc, 2, 1, 1).unwrap();
    assert_eq!(tape.shape(xt), &[b, l, cin]);
    let lhs: f64 = tape.value(y).data().iter().zip(ydual.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = tape.value(xt).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
}

#[test]
fn random_three_layer_composition_matches_finite_differences() {
    let (store, ids) = random_store(
        &[("w1", &[5, 8]), ("b1", &[8]), ("w2", &[8, 6]), ("b2", &[6]), ("w3", &[6, 1]), ("x", &[4, 5])],
        12,
    );
    let opts = GradCheckOptions { step: 1e-3, ..GradCheckOptions::default() };
    let report = check_gradients::<NumericsError, _>("mlp3", &store, &opts, |tape| {
        let x = tape.param(ids[5]);
        let w1 = tape.param(ids[0]);
        let h = tape.matmul(x, w1)?;
        let b1 = tape.param(ids[1]);
        let h = tape.add(h, b1)?;
        let h = tape.tanh(h)?;
        let w2 = tape.param(ids[2]);
        let h = tape.matmul(h, w2)?;
        let b2 = tape.param(ids[3]);
        let h = tape.add(h, b2)?;
        let h = tape.sigmoid(h)?;
        let w3 = tape.param(ids[4]);
        let y = tape.matmul(h, w3)?;
        let y2 = tape.square(y)?;
        tape.mean(y2)
    })
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn f32_and_f64_forward_agree() {
    let (store, ids) = random_store(&[("w", &[4, 3])], 13);
    let store64: ParamStore<f64> = store.cast();
    let run32 = {
        let mut tape = Tape::new(&store);
        let w = tape.param(ids[0]);
        let y = tape.tanh(w).unwrap();
        let l = tape.sum(y).unwrap();
        tape.value(l).item().unwrap() as f64
    };
    let run64 = {
        let mut tape = Tape::new(&store64);
        let w = tape.param(ids[0]);
        let y = tape.tanh(w).unwrap();
        let l = tape.sum(y).unwrap();
        tape.value(l).item().unwrap()
    };
    assert!((run32 - run64).abs() < 1e-5);
}

#[test]
fn gradcheck_select_and_stack() {
    let (store, ids) = random_store(&[("x", &[2, 3, 4])], 21);
    assert_gradcheck("select/stack", &store, |tape| {
        let x = tape.param(ids[0]);
        let a = tape.select(x, 1, 2)?;
        let b = tape.select(x, 0, 1)?;
        let b = tape.slice(b, 0, 0, 2)?;
        let s = tape.stack(&[a, b, a], 1)?;
        assert_eq!(tape.shape(s), &[2, 3, 4]);
        let s2 = tape.stack(&[a, a], 0)?;
        let s2 = tape.tanh(s2)?;
        let p = project(tape, s)?;
        let q = project(tape, s2)?;
        tape.add(p, q)
    });
}

/// GRU step assembled from primitive ops; an independent route to `gru_cell`.
fn composed_gru(tape: &mut Tape<'_, f64>, xg: Var, h: Var, wh: Var, bh: Var) -> Result<Var, NumericsError> {
    let hd = tape.shape(h)[1];
    let a = tape.matmul(h, wh)?;
    let a = tape.add(a, bh)?;
    let xr = tape.slice(xg, 1, 0, hd)?;
    let xz = tape.slice(xg, 1, hd, 2 * hd)?;
    let xn = tape.slice(xg, 1, 2 * hd, 3 * hd)?;
    let ar = tape.slice(a, 1, 0, hd)?;
    let az = tape.slice(a, 1, hd, 2 * hd)?;
    let an = tape.slice(a, 1, 2 * hd, 3 * hd)?;
    let r = tape.add(xr, ar)?;
    let r = tape.sigmoid(r)?;
    let z = tape.add(xz, az)?;
    let z = tape.sigmoid(z)?;
    let rn = tape.mul(r, an)?;
    let n = tape.add(xn, rn)?;
    let n = tape.tanh(n)?;
    let d = tape.sub(h, n)?;
    let zd = tape.mul(z, d)?;
    tape.add(n, zd)
}

#[test]
fn gru_cell_matches_composition() {
    let (store, ids) = random_store(&[("xg", &[3, 12]), ("h", &[3, 4]), ("wh", &[4, 12]), ("bh", &[12])], 22);
    let store64: ParamStore<f64> = store.cast();
    let mut tape = Tape::new(&store64);
    let (xg, h, wh, bh) = (tape.param(ids[0]), tape.param(ids[1]), tape.param(ids[2]), tape.param(ids[3]));
    let fused = tape.gru_cell(xg, h, wh, bh).unwrap();
    let composed = composed_gru(&mut tape, xg, h, wh, bh).unwrap();
    for (a, b) in tape.value(fused).data().iter().zip(tape.value(composed).data()) {
        assert!((a - b).abs() < 1e-12);
    }
    let pf = project(&mut tape, fused).unwrap();
    let g_fused = tape.backward(pf).unwrap();
    let pc = project(&mut tape, composed).unwrap();
    let g_comp = tape.backward(pc).unwrap();
    for id in &ids {
        let (a, b) = (g_fused.param(*id).unwrap(), g_comp.param(*id).unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }
}

#[test]
fn gradcheck_gru_cell_unrolled() {
    let (store, ids) = random_store(&[("xg", &[2, 5, 9]), ("h0", &[2, 3]), ("wh", &[3, 9]), ("bh", &[9])], 23);
    assert_gradcheck("gru_cell", &store, |tape| {
        let (xs, wh, bh) = (tape.param(ids[0]), tape.param(ids[2]), tape.param(ids[3]));
        let mut h = tape.param(ids[1]);
        let mut outs = Vec::new();
        for t in 0..5 {
            let x = tape.select(xs, 1, t)?;
            h = tape.gru_cell(x, h, wh, bh)?;
            outs.push(h);
        }
        let y = tape.stack(&outs, 1)?;
        project(tape, y)
    });
}

#[test]
fn gru_cell_zero_weights_fixed_point() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let xg = tape.input(Tensor::zeros(&[1, 6])).unwrap();
    let h = tape.input(Tensor::zeros(&[1, 2])).unwrap();
    let wh = tape.input(Tensor::zeros(&[2, 6])).unwrap();
    let bh = tape.input(Tensor::zeros(&[6])).unwrap();
    let out = tape.gru_cell(xg, h, wh, bh).unwrap();
    assert_eq!(tape.value(out).data(), &[0.0, 0.0]);
    assert!(tape.gru_cell(xg, h, bh, bh).is_err());
}
