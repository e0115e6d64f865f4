//! The three training objectives as scalar nodes on a tape:
//! cross-entropy `O_d`, reconstruction error `O_g`, and the mix
//! `O_a = lambda * O_d - (1 - lambda) * O_g`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::loss::Reduction;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTag {
    Discriminative,
    Generative,
    Adversarial,
}

/// A scalar loss node and what produced it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub var: Var,
    pub tag: LossTag,
    pub lambda: Option<f64>,
}

impl LossValue {
    pub fn value<T: Scalar>(&self, tape: &Tape<T>) -> f64 {
        tape.value(self.var).item().to_f64().unwrap()
    }
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// Mean (or summed) cross-entropy between labels and classifier logits.
pub fn discriminative_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    reduction: Reduction,
) -> Result<LossValue> {
    let var = tape.log_softmax_nll(logits, labels, reduction)?;
    Ok(LossValue { var, tag: LossTag::Discriminative, lambda: None })
}

/// Squared reconstruction error. [`Reduction::Mean`] divides by the total
/// element count: per-element MSE averaged over the batch.
pub fn generative_loss<T: Scalar>(
    tape: &mut Tape<T>,
    original: Var,
    reconstruction: Var,
    reduction: Reduction,
) -> Result<LossValue> {
    let var = tape.mse(reconstruction, original, reduction)?;
    Ok(LossValue { var, tag: LossTag::Generative, lambda: None })
}

/// `lambda * o_d - (1 - lambda) * o_g` on the tape that holds both terms.
pub fn lagrangian<T: Scalar>(tape: &mut Tape<T>, o_d: &LossValue, o_g: &LossValue, lambda: f64) -> Result<LossValue> {
    check_lambda(lambda)?;
    let d = tape.scale(o_d.var, T::lit(lambda));
    let g = tape.scale(o_g.var, T::lit(1.0 - lambda));
    let var = tape.sub(d, g)?;
    Ok(LossValue { var, tag: LossTag::Adversarial, lambda: Some(lambda) })
}

/// All three objectives for one batch; `O_a` is built from the other two.
pub struct AdversarialLoss {
    pub o_d: LossValue,
    pub o_g: LossValue,
    pub o_a: LossValue,
}

pub fn adversarial_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    original: Var,
    reconstruction: Var,
    lambda: f64,
    reduction: Reduction,
) -> Result<AdversarialLoss> {
    check_lambda(lambda)?;
    let o_d = discriminative_loss(tape, logits, labels, reduction)?;
    let o_g = generative_loss(tape, original, reconstruction, reduction)?;
    let o_a = lagrangian(tape, &o_d, &o_g, lambda)?;
    Ok(AdversarialLoss { o_d, o_g, o_a })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn setup(logits: Vec<f64>, labels_k: usize) -> (Tape<f64>, Var, Var, Var) {
        let n = logits.len() / labels_k;
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::new(&[n, labels_k], logits).unwrap());
        let orig = tape.constant(Tensor::ones(&[n, 1, 2, 2]));
        let rec = tape.leaf(Tensor::from_fn(&[n, 1, 2, 2], |i| 0.1 * i as f64));
        (tape, l, orig, rec)
    }

    #[test]
    fn confident_correct_is_near_zero() {
        let (mut tape, l, _, _) = setup(vec![1e3, 0.0, 0.0, 0.0, 1e3, 0.0], 3);
        let od = discriminative_loss(&mut tape, l, &[0, 1], Reduction::Mean).unwrap();
        assert!(od.value(&tape) < 1e-6);
    }

    #[test]
    fn uniform_is_ln_k() {
        let (mut tape, l, _, _) = setup(vec![0.0; 20], 10);
        let od = discriminative_loss(&mut tape, l, &[3, 7], Reduction::Mean).unwrap();
        assert!((od.value(&tape) - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn endpoints_are_exact() {
        let (mut tape, l, orig, rec) = setup(vec![0.3, -1.2, 2.0, 0.5, 0.1, -0.7], 3);
        let one = adversarial_loss(&mut tape, l, &[2, 0], orig, rec, 1.0, Reduction::Mean).unwrap();
        assert_eq!(one.o_a.value(&tape).to_bits(), one.o_d.value(&tape).to_bits());
        let zero = adversarial_loss(&mut tape, l, &[2, 0], orig, rec, 0.0, Reduction::Mean).unwrap();
        assert_eq!(zero.o_a.value(&tape).to_bits(), (-zero.o_g.value(&tape)).to_bits());
    }

    #[test]
    fn half_lambda_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let d = tape.constant(Tensor::scalar(2.0));
        let g = tape.constant(Tensor::scalar(0.5));
        let od = LossValue { var: d, tag: LossTag::Discriminative, lambda: None };
        let og = LossValue { var: g, tag: LossTag::Generative, lambda: None };
        let oa = lagrangian(&mut tape, &od, &og, 0.5).unwrap();
        assert_eq!(oa.value(&tape), 0.75);
        assert_eq!(oa.lambda, Some(0.5));
    }

    #[test]
    fn lambda_out_of_range() {
        let (mut tape, l, orig, rec) = setup(vec![0.0; 6], 3);
        for bad in [-0.1, 1.5, f64::NAN] {
            let r = adversarial_loss(&mut tape, l, &[0, 0], orig, rec, bad, Reduction::Mean);
            assert!(matches!(r, Err(Error::Config(_))), "{bad}");
        }
    }
}
