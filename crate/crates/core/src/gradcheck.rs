//! Central-difference gradient checking over a [`ParamStore`].

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::optim::{Bound, ParamStore};

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`, 0 when both vanish.
    pub rel_error: f64,
    pub analytic_norm: f64,
}

/// Compares the tape gradient of `loss` against fourth-order central
/// differences with step `h` for every parameter tensor in `store`.
pub fn check_params<F>(store: &ParamStore, h: f64, loss: F) -> Result<Vec<TensorCheck>>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = store.attach(&mut g, true);
    let out = loss(&mut g, &bound)?;
    let mut grads = g.backward(out);
    let analytic = store.collect_grads(&bound, &mut grads);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let b = s.attach(&mut g, false);
        let out = loss(&mut g, &b)?;
        Ok(g.scalar(out))
    };

    let mut probe = store.clone();
    let mut report = Vec::new();
    for (id, grad) in store.ids().zip(&analytic) {
        let mut diff2 = 0.0;
        let mut num2 = 0.0;
        for e in 0..grad.data().len() {
            let orig = probe.get(id).data()[e];
            let mut at = |offset: f64| -> Result<f64> {
                probe.get_mut(id).data_mut()[e] = orig + offset;
                eval(&probe)
            };
            let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            probe.get_mut(id).data_mut()[e] = orig;
            let fd = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            diff2 += (fd - grad.data()[e]).powi(2);
            num2 += fd * fd;
        }
        let an = grad.frobenius_norm();
        let scale = an.max(num2.sqrt());
        report.push(TensorCheck {
            name: store.name(id).to_string(),
            rel_error: if scale == 0.0 { 0.0 } else { diff2.sqrt() / scale },
            analytic_norm: an,
        });
    }
    Ok(report)
}
