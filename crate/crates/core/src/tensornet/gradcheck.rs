use super::network::Network;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Largest relative error between backpropagated and central-difference
/// gradients over every parameter of `net`. `loss` maps the network output
/// to a value and its gradient.
pub fn grad_check(net: &mut Network, x: &Tensor, loss: impl Fn(&Tensor) -> (f64, Tensor), eps: f64) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("grad check step {eps} outside [1e-6, 1e-3]")));
    }
    net.zero_grad();
    let y = net.forward(x)?;
    let (_, g) = loss(&y);
    net.backward(&g)?;
    let analytic: Vec<Vec<f64>> = net.params().map(|p| p.grad.data().to_vec()).collect();
    net.zero_grad();

    let mut worst: f64 = 0.0;
    let n_params = analytic.len();
    for pi in 0..n_params {
        let len = analytic[pi].len();
        for i in 0..len {
            let orig = net.params().nth(pi).unwrap().value.data()[i];
            let mut eval = |v: f64| -> Result<f64> {
                net.params_mut().nth(pi).unwrap().value.data_mut()[i] = v;
                Ok(loss(&net.infer(x)?).0)
            };
            let up = eval(orig + eps)?;
            let down = eval(orig - eps)?;
            eval(orig)?;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[pi][i], numeric));
        }
    }
    Ok(worst)
}

/// Half squared norm of the output, the usual probe loss.
pub fn l2_loss(y: &Tensor) -> (f64, Tensor) {
    (0.5 * y.data().iter().map(|v| v * v).sum::<f64>(), y.clone())
}
