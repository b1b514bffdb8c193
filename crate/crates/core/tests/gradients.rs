//! Finite-difference checks of the reverse-mode tape.

use geomt::network::{BnMode, Graph, Heads, Mode, NodeId, ParamStore, SegModel, SegNetConfig, Tensor};
use geomt::network::{GeoHeadConfig, TimeHeadConfig};
use geomt::rng::seeded;
use rand::seq::index::sample;
use rand::Rng as _;

const STEP: f64 = 1e-4;
const REL_TOL: f64 = 1e-3;
// Below this magnitude both sides are treated as zero; central differences of
// order-1 losses carry ~1e-8 of rounding noise at this step.
const ABS_FLOOR: f64 = 1e-5;

fn close(analytic: f64, numeric: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs());
    scale < ABS_FLOOR || (analytic - numeric).abs() <= REL_TOL * scale
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded(seed, 99);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds a scalar loss from leaf tensors. Called once for the analytic
/// gradient and twice per checked element.
type Build = dyn Fn(&mut Graph, &[NodeId]) -> NodeId;

fn check_op(name: &str, inputs: Vec<Tensor>, build: &Build) {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = build(&mut g, &ids);
    let grads = g.backward(loss).unwrap();
    let eval = |inputs: &[Tensor]| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let loss = build(&mut g, &ids);
        g.value(loss).item()
    };
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.of(*id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for e in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[e] += STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[e] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            assert!(
                close(analytic[e], numeric),
                "{name}: input {k} element {e}: analytic {} numeric {numeric}",
                analytic[e]
            );
        }
    }
}

fn mse_to(g: &mut Graph, x: NodeId, seed: u64) -> NodeId {
    let target = random(g.value(x).shape(), seed);
    g.mse(x, target.data()).unwrap()
}

#[test]
fn conv2d_matches_finite_differences() {
    check_op("conv3x3", vec![random(&[2, 3, 5, 5], 1), random(&[4, 3, 3, 3], 2), random(&[4], 3)], &|g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2])).unwrap();
        mse_to(g, y, 4)
    });
    check_op("conv1x1", vec![random(&[2, 3, 4, 4], 5), random(&[2, 3, 1, 1], 6)], &|g, v| {
        let y = g.conv2d(v[0], v[1], None).unwrap();
        mse_to(g, y, 7)
    });
}

#[test]
fn transposed_conv_matches_finite_differences() {
    check_op("up2x2", vec![random(&[2, 3, 3, 3], 8), random(&[3, 2, 2, 2], 9), random(&[2], 10)], &|g, v| {
        let y = g.conv_transpose2x2(v[0], v[1], v[2]).unwrap();
        mse_to(g, y, 11)
    });
}

#[test]
fn batch_norm_matches_finite_differences() {
    let inputs = vec![random(&[3, 2, 3, 3], 12), random(&[2], 13), random(&[2], 14)];
    check_op("bn-train-4d", inputs, &|g, v| {
        let y = g.batch_norm(v[0], v[1], v[2], BnMode::Train, "bn").unwrap();
        mse_to(g, y, 15)
    });
    check_op("bn-train-2d", vec![random(&[4, 3], 16), random(&[3], 17), random(&[3], 18)], &|g, v| {
        let y = g.batch_norm(v[0], v[1], v[2], BnMode::Train, "bn").unwrap();
        mse_to(g, y, 19)
    });
    let eval = BnMode::Eval { mean: vec![0.1, -0.2], var: vec![0.5, 2.0] };
    check_op("bn-eval", vec![random(&[2, 2, 2, 2], 20), random(&[2], 21), random(&[2], 22)], &move |g, v| {
        let y = g.batch_norm(v[0], v[1], v[2], eval.clone(), "bn").unwrap();
        mse_to(g, y, 23)
    });
}

#[test]
fn pointwise_and_shape_ops_match_finite_differences() {
    check_op("relu", vec![random(&[2, 2, 3, 3], 24)], &|g, v| {
        let y = g.relu(v[0]);
        mse_to(g, y, 25)
    });
    check_op("maxpool", vec![random(&[2, 2, 4, 4], 26)], &|g, v| {
        let y = g.max_pool(v[0], 2).unwrap();
        mse_to(g, y, 27)
    });
    check_op("concat", vec![random(&[2, 1, 3, 3], 28), random(&[2, 2, 3, 3], 29)], &|g, v| {
        let y = g.concat(v[0], v[1]).unwrap();
        mse_to(g, y, 30)
    });
    check_op("flatten+linear", vec![random(&[3, 2, 2, 2], 31), random(&[8, 5], 32), random(&[5], 33)], &|g, v| {
        let f = g.flatten(v[0]);
        let y = g.linear(f, v[1], Some(v[2])).unwrap();
        mse_to(g, y, 34)
    });
}

#[test]
fn softmax_and_losses_match_finite_differences() {
    check_op("softmax+nll", vec![random(&[2, 3, 2, 2], 35)], &|g, v| {
        let p = g.softmax(v[0]);
        let pixels = vec![Some((0, 1.0)), Some((2, 0.5)), None, Some((1, 2.0)), Some((1, 1.0)), None, Some((0, 0.3)), Some((2, 1.0))];
        g.weighted_nll(p, pixels).unwrap()
    });
    check_op("sum", vec![random(&[3], 36), random(&[2, 2], 37)], &|g, v| {
        let a = mse_to(g, v[0], 38);
        let b = mse_to(g, v[1], 39);
        g.sum(&[a, b, a]).unwrap()
    });
}

#[test]
fn linear_mse_gradient_has_closed_form() {
    let (n, fin, fout) = (6, 4, 3);
    let x = random(&[n, fin], 40);
    let w = random(&[fin, fout], 41);
    let y = random(&[n, fout], 42);
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let wn = g.variable(w.clone());
    let out = g.linear(xn, wn, None).unwrap();
    let loss = g.mse(out, y.data()).unwrap();
    let grads = g.backward(loss).unwrap();
    let got = grads.of(wn).unwrap().data();

    let (xd, wd, yd) = (x.data(), w.data(), y.data());
    for a in 0..fin {
        for b in 0..fout {
            let mut expected = 0.0;
            for i in 0..n {
                let pred: f64 = (0..fin).map(|k| xd[i * fin + k] * wd[k * fout + b]).sum();
                expected += xd[i * fin + a] * (pred - yd[i * fout + b]);
            }
            expected *= 2.0 / (n * fout) as f64;
            assert!((got[a * fout + b] - expected).abs() < 1e-12, "({a},{b}) {} vs {expected}", got[a * fout + b]);
        }
    }
}

#[test]
fn unused_parameter_gets_no_gradient() {
    let mut store = ParamStore::default();
    store.params.insert("used".into(), random(&[3], 43));
    store.params.insert("unused".into(), random(&[3], 44));
    let mut g = Graph::new();
    let used = g.param(&store, "used").unwrap();
    let _unused = g.param(&store, "unused").unwrap();
    let loss = g.mse(used, &[0.0; 3]).unwrap();
    let grads = g.backward(loss).unwrap();
    let zero = grads.params().get("unused").map_or(true, |t| t.data().iter().all(|&v| v == 0.0));
    assert!(zero);
    assert!(grads.params()["used"].data().iter().any(|&v| v != 0.0));
}

/// Desk-scale model with both auxiliary heads on a 16x16 batch, so every
/// parameter group is reachable from the loss.
fn full_model() -> SegModel {
    let net = SegNetConfig { num_classes: 4, input_size: 16, ..SegNetConfig::default() };
    let geo = GeoHeadConfig { pool_output: 1, hidden_widths: vec![16, 16, 12, 8], out_dim: 8, ..Default::default() };
    let time = TimeHeadConfig { pool_output: 1, hidden_width: 8, ..Default::default() };
    SegModel::new(net, Some(geo), Some(time)).unwrap()
}

struct Problem {
    source: Tensor,
    target: Tensor,
    pixels: Vec<Option<(usize, f64)>>,
    coords: Vec<f64>,
    coords_t: Vec<f64>,
    times: Vec<f64>,
}

fn objective(model: &SegModel, store: &ParamStore, pr: &Problem) -> (Graph, NodeId) {
    let heads = Heads { segmentation: true, geo: true, time: true };
    let mut g = Graph::new();
    let s = model.forward(&mut g, store, pr.source.clone(), Mode::Train, heads).unwrap();
    let seg = g.weighted_nll(s.probs.unwrap(), pr.pixels.clone()).unwrap();
    let cs = g.mse(s.geo.unwrap(), &pr.coords).unwrap();
    let ts = g.mse(s.time.unwrap(), &pr.times).unwrap();
    let t = model
        .forward(&mut g, store, pr.target.clone(), Mode::Train, Heads { segmentation: false, ..heads })
        .unwrap();
    let ct = g.mse(t.geo.unwrap(), &pr.coords_t).unwrap();
    let total = g.sum(&[seg, cs, ts, ct]).unwrap();
    (g, total)
}

#[test]
fn full_model_matches_finite_differences() {
    let model = full_model();
    let mut rng = seeded(7, 1);
    let store = model.init(&mut rng);
    let (n, side) = (2, 16);
    let pixels = (0..n * side * side)
        .map(|_| {
            let c = rng.gen_range(0..4usize);
            // Class 3 plays "other" and is ignored.
            (c < 3).then(|| (c, rng.gen_range(0.5..2.0)))
        })
        .collect();
    let pr = Problem {
        source: random(&[n, 5, side, side], 50),
        target: random(&[n, 5, side, side], 51),
        pixels,
        coords: random(&[n, 8], 52).into_data(),
        coords_t: random(&[n, 8], 53).into_data(),
        times: random(&[n, 4], 54).into_data(),
    };
    let (g, loss) = objective(&model, &store, &pr);
    let pattern = g.activation_pattern();
    let grads = g.backward(loss).unwrap().into_params();

    let coords: Vec<(String, usize)> = store.params.iter().flat_map(|(k, t)| (0..t.len()).map(move |i| (k.clone(), i))).collect();
    let mut failures = Vec::new();
    let mut checked = 0;
    for idx in sample(&mut rng, coords.len(), 1000).iter() {
        if checked == 100 {
            break;
        }
        let (name, i) = &coords[idx];
        let eval = |delta: f64| {
            let mut s = store.clone();
            s.params.get_mut(name).unwrap().data_mut()[*i] += delta;
            let (g, l) = objective(&model, &s, &pr);
            (g.value(l).item(), g.activation_pattern())
        };
        let ((plus, pp), (minus, pm)) = (eval(STEP), eval(-STEP));
        // Not differentiable inside the interval: a ReLU or pooling switch flipped.
        if pp != pattern || pm != pattern {
            continue;
        }
        checked += 1;
        let numeric = (plus - minus) / (2.0 * STEP);
        let analytic = grads.get(name).map_or(0.0, |t| t.data()[*i]);
        if !close(analytic, numeric) {
            failures.push(format!("{name}[{i}]: analytic {analytic:e} numeric {numeric:e}"));
        }
    }
    assert_eq!(checked, 100);
    assert!(failures.is_empty(), "{} of 100 coordinates disagree:\n{}", failures.len(), failures.join("\n"));
}
