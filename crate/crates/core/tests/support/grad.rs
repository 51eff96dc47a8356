//! Central finite-difference checks in double precision.

use chanmap::model::{masked_loss, ChannelMapNet, NetConfig, ResBlock};
use chanmap::nn::{conv3d_backward, conv3d_forward, relu, relu_backward, BatchNormLayer, Mode, Tensor};
use chanmap::protocol::{build_masks, select_positions};
use chanmap::rng::Rng;
use rand::{Rng as _, SeedableRng};

use super::{random_tensor as random, rel_err};

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// Comparison of one analytic gradient tensor with its numeric estimate.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub rel_err: f64,
    /// Entries whose one-sided differences disagree (a ReLU kink lies
    /// within the step); excluded from `rel_err`.
    pub skipped: usize,
    pub len: usize,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.rel_err < TOL && self.skipped <= (self.len / 20).max(1) && self.skipped < self.len
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: rel err {:.2e}, {} of {} on kinks",
            self.name, self.rel_err, self.skipped, self.len
        )
    }
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Central differences of `f` at every entry of `x`. Where the one-sided
/// slopes disagree the step shrinks tenfold, up to twice; an entry still
/// straddling a kink yields NaN.
pub fn numeric(x: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut x = x.clone();
    let center = f(&x);
    let mut slopes = |x: &mut Tensor<f64>, i: usize, h: f64| {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let plus = f(x);
        x.data_mut()[i] = orig - h;
        let minus = f(x);
        x.data_mut()[i] = orig;
        ((plus - center) / h, (center - minus) / h)
    };
    (0..x.len())
        .map(|i| {
            [STEP, STEP / 10.0, STEP / 100.0]
                .into_iter()
                .map(|h| slopes(&mut x, i, h))
                .find(|(fwd, bwd)| (fwd - bwd).abs() <= 1e-4 * fwd.abs().max(bwd.abs()).max(1.0))
                .map_or(f64::NAN, |(fwd, bwd)| 0.5 * (fwd + bwd))
        })
        .collect()
}

pub fn compare(name: impl Into<String>, analytic: &Tensor<f64>, numeric: &[f64]) -> Check {
    let keep: Vec<usize> = (0..numeric.len()).filter(|&i| numeric[i].is_finite()).collect();
    let a: Vec<f64> = keep.iter().map(|&i| analytic.data()[i]).collect();
    let n: Vec<f64> = keep.iter().map(|&i| numeric[i]).collect();
    Check {
        name: name.into(),
        rel_err: rel_err(&a, &n),
        skipped: numeric.len() - keep.len(),
        len: numeric.len(),
    }
}

/// Random shape no larger than 2×4×5×5×5.
fn small_shape(rng: &mut Rng) -> (usize, usize, [usize; 3]) {
    (
        rng.random_range(1..=2),
        rng.random_range(1..=4),
        [
            rng.random_range(3..=5),
            rng.random_range(3..=5),
            rng.random_range(3..=5),
        ],
    )
}

pub fn conv_instance(seed: u64) -> Vec<Check> {
    let mut rng = Rng::seed_from_u64(seed);
    let (b, c_in, [d, h, w]) = small_shape(&mut rng);
    let c_out = rng.random_range(1..=4);
    let k = if seed % 4 == 0 { 1 } else { 3 };
    let pad = (k - 1) / 2;
    let x = random(&[b, c_in, d, h, w], &mut rng);
    let wt = random(&[c_out, c_in, k, k, k], &mut rng);
    let bias = random(&[c_out], &mut rng);
    let r = random(&[b, c_out, d, h, w], &mut rng);
    let grads = conv3d_backward(&r, &x, &wt, pad, true).unwrap();
    let loss =
        |x: &Tensor<f64>, wt: &Tensor<f64>, bias: &Tensor<f64>| dot(&r, &conv3d_forward(x, wt, bias, pad).unwrap());
    vec![
        compare(
            "conv input",
            grads.input.as_ref().unwrap(),
            &numeric(&x, |x| loss(x, &wt, &bias)),
        ),
        compare("conv weight", &grads.weight, &numeric(&wt, |wt| loss(&x, wt, &bias))),
        compare("conv bias", &grads.bias, &numeric(&bias, |bias| loss(&x, &wt, bias))),
    ]
}

pub fn batchnorm_instance(seed: u64) -> Vec<Check> {
    let mut rng = Rng::seed_from_u64(seed);
    let (_, c, [d, h, w]) = small_shape(&mut rng);
    let mode = if seed % 2 == 0 { Mode::Train } else { Mode::Eval };
    let mut layer = BatchNormLayer::<f64>::new("bn", c);
    layer.gamma.value = random(&[c], &mut rng);
    layer.beta.value = random(&[c], &mut rng);
    layer.running_mean = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
    layer.running_var = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
    let x = random(&[2, c, d, h, w], &mut rng);
    let r = random(&[2, c, d, h, w], &mut rng);
    let probe = layer.clone();
    let loss = |x: &Tensor<f64>, gamma: &Tensor<f64>, beta: &Tensor<f64>| {
        let mut l = probe.clone();
        l.gamma.value = gamma.clone();
        l.beta.value = beta.clone();
        dot(&r, &l.forward(x, mode, false).unwrap())
    };
    layer.forward(&x, mode, true).unwrap();
    let gx = layer.backward(&r).unwrap();
    let (gamma, beta) = (probe.gamma.value.clone(), probe.beta.value.clone());
    vec![
        compare("bn input", &gx, &numeric(&x, |x| loss(x, &gamma, &beta))),
        compare("bn gamma", &layer.gamma.grad, &numeric(&gamma, |g| loss(&x, g, &beta))),
        compare("bn beta", &layer.beta.grad, &numeric(&beta, |bt| loss(&x, &gamma, bt))),
    ]
}

pub fn relu_instance(seed: u64) -> Vec<Check> {
    let mut rng = Rng::seed_from_u64(seed);
    let (b, c, [d, h, w]) = small_shape(&mut rng);
    let x = random(&[b, c, d, h, w], &mut rng);
    let r = random(&[b, c, d, h, w], &mut rng);
    vec![compare(
        "relu",
        &relu_backward(&r, &x),
        &numeric(&x, |x| dot(&r, &relu(x))),
    )]
}

fn block_param(b: &mut ResBlock<f64>, i: usize) -> &mut chanmap::nn::Param<f64> {
    match i {
        0 => &mut b.bn1.gamma,
        1 => &mut b.bn1.beta,
        2 => &mut b.conv2.weight,
        3 => &mut b.conv2.bias,
        4 => &mut b.conv3.weight,
        _ => &mut b.conv3.bias,
    }
}

pub fn resblock_instance(seed: u64) -> Vec<Check> {
    let mut rng = Rng::seed_from_u64(seed);
    let (_, c, [d, h, w]) = small_shape(&mut rng);
    let mode = if seed % 2 == 0 { Mode::Train } else { Mode::Eval };
    let mut block = ResBlock::<f64>::new("block", c, 3, &mut rng).unwrap();
    for i in 0..6 {
        let p = block_param(&mut block, i);
        let shape = p.value.shape().to_vec();
        p.value = random(&shape, &mut rng).map(|v| 0.5 * v);
    }
    let x = random(&[2, c, d, h, w], &mut rng);
    let r = random(&[2, c, d, h, w], &mut rng);
    let probe = block.clone();
    block.forward(&x, mode, true).unwrap();
    let gx = block.backward(&r).unwrap();
    let mut out = vec![compare(
        "block input",
        &gx,
        &numeric(&x, |x| dot(&r, &probe.clone().forward(x, mode, false).unwrap())),
    )];
    for i in 0..6 {
        let mut b = probe.clone();
        let value = block_param(&mut b, i).value.clone();
        let num = numeric(&value, |v| {
            let mut b = probe.clone();
            block_param(&mut b, i).value = v.clone();
            dot(&r, &b.forward(&x, mode, false).unwrap())
        });
        let p = block_param(&mut block, i);
        out.push(compare(p.name.clone(), &p.grad, &num));
    }
    out
}

/// Whole-network masked loss on a `batch×3×4×4×4` input with labels on
/// the 2×2×2 subgrid.
pub fn network_instance(batch: usize, mode: Mode, hidden: usize, seed: u64) -> Vec<Check> {
    let mut rng = Rng::seed_from_u64(seed);
    let grid = select_positions(4, 2).unwrap();
    let masks = build_masks(&grid, 0.5, &mut rng).unwrap();
    let mut net = ChannelMapNet::<f64>::new(NetConfig::with_hidden(hidden), &mut rng).unwrap();
    for p in net.params_mut() {
        if p.name.contains("bn1") {
            let shape = p.value.shape().to_vec();
            p.value = random(&shape, &mut rng).map(|v| 1.0 + 0.3 * v);
        }
    }
    let x = random(&[batch, 3, 4, 4, 4], &mut rng);
    let labels: Vec<f64> = (0..batch * 3 * grid.q).map(|_| rng.random_range(-1.0..1.0)).collect();
    let probe = net.clone();
    let loss_of = |net: &mut ChannelMapNet<f64>, x: &Tensor<f64>| {
        let y = net.forward_cached(x, mode, false).unwrap();
        masked_loss(&y, &labels, &masks, &grid).unwrap().sum_sq
    };

    net.zero_grad();
    let y = net.forward_cached(&x, mode, true).unwrap();
    let loss = masked_loss(&y, &labels, &masks, &grid).unwrap();
    let gx = net.backward(&loss.grad, true).unwrap().unwrap();
    let mut out = vec![compare(
        "net input",
        &gx,
        &numeric(&x, |x| loss_of(&mut probe.clone(), x)),
    )];
    let analytic: Vec<(String, Tensor<f64>)> = net.params().iter().map(|p| (p.name.clone(), p.grad.clone())).collect();
    for (i, (name, grad)) in analytic.iter().enumerate() {
        let value = probe.params()[i].value.clone();
        let num = numeric(&value, |v| {
            let mut n = probe.clone();
            n.params_mut()[i].value = v.clone();
            loss_of(&mut n, &x)
        });
        out.push(compare(name.clone(), grad, &num));
    }
    out
}
