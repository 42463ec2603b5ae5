use super::network::{Batch, Network};
use crate::error::{Error, Result};

/// Central finite-difference estimate of one diagonal Hessian entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdEstimate {
    pub value: f64,
    /// Set when the perturbed losses equal the base loss in working
    /// precision, i.e. the step is too small to resolve curvature.
    pub underflow: bool,
}

/// `(f(w + step) - 2 f(w) + f(w - step)) / step^2` for the mean batch loss,
/// perturbing only `weight_id`. The network is restored bit-for-bit.
pub fn fd_second_derivative(net: &mut Network, batch: &Batch<'_>, weight_id: usize, step: f64) -> Result<FdEstimate> {
    fd_second_derivative_with(|n| n.loss(batch), net, weight_id, step)
}

/// Same estimate over an arbitrary scalar objective of the network.
pub fn fd_second_derivative_with<F>(mut f: F, net: &mut Network, weight_id: usize, step: f64) -> Result<FdEstimate>
where
    F: FnMut(&Network) -> Result<f64>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::arg(format!("finite-difference step must be positive, got {step}")));
    }
    let original = net.param(weight_id)?;
    let base = f(net)?;
    net.set_param(weight_id, original + step)?;
    let plus = f(net);
    net.set_param(weight_id, original - step)?;
    let minus = f(net);
    net.set_param(weight_id, original)?;
    let (plus, minus) = (plus?, minus?);
    Ok(FdEstimate {
        value: (plus - 2.0 * base + minus) / (step * step),
        underflow: plus == base && minus == base,
    })
}

/// Second derivative of a scalar function of one variable.
pub fn fd_second_derivative_scalar(f: impl Fn(f64) -> f64, x: f64, step: f64) -> FdEstimate {
    let (plus, base, minus) = (f(x + step), f(x), f(x - step));
    FdEstimate {
        value: (plus - 2.0 * base + minus) / (step * step),
        underflow: plus == base && minus == base,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nngraph::{Layer, LossKind, Tensor};

    #[test]
    fn exact_for_quadratic() {
        let est = fd_second_derivative_scalar(|w| w * w, 3.0, 0.1);
        assert!((est.value - 2.0).abs() < 1e-9);
        assert!(!est.underflow);
    }

    #[test]
    fn cubic_at_one() {
        let est = fd_second_derivative_scalar(|w| w * w * w, 1.0, 1e-3);
        assert!((est.value - 6.0).abs() < 1e-5, "{}", est.value);
    }

    #[test]
    fn flags_unresolvable_step() {
        let est = fd_second_derivative_scalar(|w| w * w, 1e8, 1e-12);
        assert!(est.underflow);
    }

    #[test]
    fn restores_network() {
        let mut net = Network::mlp(&[3, 5, 2], LossKind::SoftmaxCrossEntropy, 4, 7).unwrap();
        let before = net.params();
        let x = vec![Tensor::vector(vec![0.3, -0.2, 0.9])];
        let y = vec![1];
        let batch = Batch::classes(&x, &y).unwrap();
        for id in [0, 7, net.param_count() - 1] {
            fd_second_derivative(&mut net, &batch, id, 1e-3).unwrap();
        }
        let after = net.params();
        assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn rejects_bad_step_and_index() {
        let mut net = Network::new(
            vec![1],
            vec![Layer::dense(Tensor::new(vec![1, 1], vec![1.0]).unwrap(), None)],
            LossKind::L2,
            4,
        )
        .unwrap();
        let x = vec![Tensor::vector(vec![1.0])];
        let t = vec![Tensor::vector(vec![0.0])];
        let batch = Batch::new(&x, crate::nngraph::Labels::Values(&t)).unwrap();
        assert!(fd_second_derivative(&mut net, &batch, 0, 0.0).is_err());
        assert!(fd_second_derivative(&mut net, &batch, 1, 1e-3).is_err());
        // f(w) = (w * 1 - 0)^2 so f'' = 2 exactly.
        let est = fd_second_derivative(&mut net, &batch, 0, 0.1).unwrap();
        assert!((est.value - 2.0).abs() < 1e-9);
    }
}
