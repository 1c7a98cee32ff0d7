#![allow(dead_code)]

use phenokit_core::objectives::{loss_cls, loss_con, loss_mse};
use phenokit_core::tensor::{grad_check_inputs, Rng, Tape, Tensor, Var};
use phenokit_core::Result;

pub fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Contract `y` with a fixed random tensor so the check covers the whole
/// Jacobian rather than only its column sums.
fn contract(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::new(seed ^ 0x9e37_79b9);
    let r = random(tape.shape(y), &mut rng);
    let r = tape.constant(r);
    let prod = tape.mul(y, r)?;
    tape.sum(prod)
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One randomly drawn instance of every differentiable operation.
pub fn op_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor<f64>>, OpFn)> {
    let mut rng = Rng::new(seed);
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, OpFn)> = Vec::new();
    let s = seed;

    let theta = rng.uniform();
    let stride = 1 + rng.below(2);
    cases.push((
        "diff_conv2d",
        vec![random(&[2, 2, 5, 5], &mut rng), random(&[3, 2, 3, 3], &mut rng)],
        Box::new(move |t, v| {
            let y = t.diff_conv2d(v[0], v[1], theta, stride, 1)?;
            contract(t, y, s)
        }),
    ));
    cases.push((
        "conv2d",
        vec![random(&[1, 3, 4, 4], &mut rng), random(&[2, 3, 3, 3], &mut rng)],
        Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], 1, 0)?;
            contract(t, y, s)
        }),
    ));
    let shape = [2 + rng.below(2), 3];
    cases.push((
        "add_sub_mul",
        vec![random(&shape, &mut rng), random(&shape, &mut rng)],
        Box::new(move |t, v| {
            let a = t.add(v[0], v[1])?;
            let b = t.sub(a, v[1])?;
            let c = t.mul(b, v[1])?;
            let d = t.scale(c, -1.3)?;
            contract(t, d, s)
        }),
    ));
    cases.push((
        "add_bias",
        vec![random(&[3, 4], &mut rng), random(&[4], &mut rng)],
        Box::new(move |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            contract(t, y, s)
        }),
    ));
    cases.push((
        "add_channel_bias",
        vec![random(&[2, 3, 2, 2], &mut rng), random(&[3], &mut rng)],
        Box::new(move |t, v| {
            let y = t.add_channel_bias(v[0], v[1])?;
            contract(t, y, s)
        }),
    ));
    cases.push((
        "relu",
        vec![random(&[4, 5], &mut rng)],
        Box::new(move |t, v| {
            let y = t.relu(v[0])?;
            contract(t, y, s)
        }),
    ));
    cases.push((
        "gelu",
        vec![random(&[4, 5], &mut rng)],
        Box::new(move |t, v| {
            let y = t.gelu(v[0])?;
            contract(t, y, s)
        }),
    ));
    cases.push((
        "dropout",
        vec![random(&[3, 6], &mut rng)],
        Box::new(move |t, v| {
            let mut r = Rng::new(s);
            let y = t.dropout(v[0], 0.4, &mut r)?;
            contract(t, y, s)
        }),
    ));
    cases.push((
        "mean_reshape_permute",
        vec![random(&[2, 3, 4], &mut rng)],
        Box::new(move |t, v| {
            let p = t.permute(v[0], &[2, 0, 1])?;
            let r = t.reshape(p, &[4, 6])?;
            let y = contract(t, r, s)?;
            let m = t.mean(v[0])?;
            t.add(y, m)
        }),
    ));
    cases.push((
        "concat",
        vec![random(&[2, 1, 2, 2], &mut rng), random(&[2, 3, 2, 2], &mut rng)],
        Box::new(move |t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            contract(t, y, s)
        }),
    ));
    cases.push((
        "global_avg_pool",
        vec![random(&[2, 3, 3, 2], &mut rng)],
        Box::new(move |t, v| {
            let y = t.global_avg_pool(v[0])?;
            contract(t, y, s)
        }),
    ));
    cases.push((
        "matmul",
        vec![random(&[3, 4], &mut rng), random(&[4, 2], &mut rng)],
        Box::new(move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            contract(t, y, s)
        }),
    ));
    cases.push((
        "linear",
        vec![random(&[3, 4], &mut rng), random(&[5, 4], &mut rng), random(&[5], &mut rng)],
        Box::new(move |t, v| {
            let y = t.linear(v[0], v[1], v[2])?;
            contract(t, y, s)
        }),
    ));
    cases.push((
        "bmm",
        vec![random(&[2, 3, 4], &mut rng), random(&[2, 4, 2], &mut rng), random(&[2, 5, 4], &mut rng)],
        Box::new(move |t, v| {
            let a = t.bmm(v[0], v[1], false)?;
            let b = t.bmm(v[0], v[2], true)?;
            let ya = contract(t, a, s)?;
            let yb = contract(t, b, s + 1)?;
            t.add(ya, yb)
        }),
    ));
    cases.push((
        "softmax",
        vec![random(&[3, 5], &mut rng)],
        Box::new(move |t, v| {
            let y = t.softmax_last(v[0])?;
            contract(t, y, s)
        }),
    ));
    cases.push((
        "layer_norm",
        vec![random(&[3, 6], &mut rng), random(&[6], &mut rng), random(&[6], &mut rng)],
        Box::new(move |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            contract(t, y, s)
        }),
    ));
    cases.push((
        "batch_norm2d",
        vec![random(&[2, 3, 3, 3], &mut rng), random(&[3], &mut rng), random(&[3], &mut rng)],
        Box::new(move |t, v| {
            let (y, _) = t.batch_norm2d(v[0], v[1], v[2], 1e-5)?;
            contract(t, y, s)
        }),
    ));
    let running_mean: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
    let running_var: Vec<f64> = (0..3).map(|_| 0.5 + rng.uniform()).collect();
    cases.push((
        "batch_norm2d_eval",
        vec![random(&[2, 3, 2, 2], &mut rng), random(&[3], &mut rng), random(&[3], &mut rng)],
        Box::new(move |t, v| {
            let y = t.batch_norm2d_eval(v[0], v[1], v[2], &running_mean, &running_var, 1e-5)?;
            contract(t, y, s)
        }),
    ));
    cases.push((
        "normalize_rows",
        vec![random(&[3, 4], &mut rng)],
        Box::new(move |t, v| {
            let y = t.normalize_rows(v[0])?;
            contract(t, y, s)
        }),
    ));
    let labels: Vec<usize> = (0..4).map(|_| rng.below(3)).collect();
    cases.push(("loss_cls", vec![random(&[4, 3], &mut rng)], Box::new(move |t, v| loss_cls(t, v[0], &labels))));
    cases.push((
        "loss_mse",
        vec![random(&[3, 4], &mut rng), random(&[3, 4], &mut rng)],
        Box::new(|t, v| loss_mse(t, v[0], v[1])),
    ));
    let tau = 0.3 + rng.uniform();
    cases.push((
        "loss_con",
        vec![random(&[4, 3], &mut rng), random(&[4, 3], &mut rng)],
        Box::new(move |t, v| loss_con(t, v[0], v[1], tau, false)),
    ));
    cases
}

/// Max relative gradient error per operation for one random draw.
pub fn check_ops(seed: u64) -> Vec<(&'static str, f64)> {
    op_cases(seed)
        .into_iter()
        .map(|(name, inputs, f)| {
            let report =
                grad_check_inputs(|t, v| f(t, v), &inputs, 1e-5, None).unwrap_or_else(|e| panic!("{name}: {e}"));
            (name, report.max_rel_error)
        })
        .collect()
}
