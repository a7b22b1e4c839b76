//! Adam optimization and finite-difference gradient verification.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer state: step count plus first/second moment accumulators per
/// parameter. The parameter registry is fixed at the first step; later steps
/// must supply gradients for exactly the registered set.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first_moment: BTreeMap<String, Vec<f64>>,
    second_moment: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> AdamState {
        AdamState {
            config,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update, in place.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<()> {
        if self.step == 0 {
            for (name, g) in grads.iter() {
                let n = params.get(name)?.len();
                if g.len() != n {
                    return Err(Error::dim(
                        format!("adam_step({name})"),
                        format!("{n} coefficients"),
                        format!("{}", g.len()),
                    ));
                }
                self.first_moment.insert(name.to_string(), vec![0.0; n]);
                self.second_moment.insert(name.to_string(), vec![0.0; n]);
            }
        } else {
            for name in self.first_moment.keys() {
                if grads.get(name).is_none() {
                    return Err(Error::Consistency(format!(
                        "missing gradient for registered parameter {name:?}"
                    )));
                }
            }
            for (name, _) in grads.iter() {
                if !self.first_moment.contains_key(name) {
                    return Err(Error::Consistency(format!(
                        "gradient for unregistered parameter {name:?}"
                    )));
                }
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);

        for (name, g) in grads.iter() {
            let m = self.first_moment.get_mut(name).expect("registered");
            let v = self.second_moment.get_mut(name).expect("registered");
            let old = params.get(name)?;
            let mut data = old.data().to_vec();
            for (((p, &gv), mv), vv) in data.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / bias1;
                let v_hat = *vv / bias2;
                *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
            let shape = old.shape().to_vec();
            params.update(name, Tensor::new_unchecked(shape, data))?;
        }
        Ok(())
    }
}

/// Worst relative disagreement between tape gradients and central finite
/// differences of `lossfn`, over every coefficient of every parameter.
///
/// The denominator is floored at 1e-3 so coefficients whose true gradient is
/// below finite-difference resolution do not dominate the report.
pub fn grad_check<F>(lossfn: F, params: &ParamSet, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    if epsilon <= 0.0 {
        return Err(Error::Config(format!("grad_check epsilon must be > 0, got {epsilon}")));
    }

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let root = lossfn(&mut tape, p)?;
        let value = tape.value(root);
        if value.len() != 1 {
            return Err(Error::dim("grad_check", "scalar loss", format!("{:?}", value.shape())));
        }
        let v = value.item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss evaluated to non-finite value {v}")));
        }
        Ok(v)
    };

    // Analytic gradients from one recorded pass.
    let mut tape = Tape::new();
    let root = lossfn(&mut tape, params)?;
    eval(params)?; // finiteness check on the unperturbed point
    let analytic = tape.backward(root)?.param_grads();

    let mut worst: f64 = 0.0;
    for (name, value) in params.iter() {
        let zero = Tensor::zeros(value.shape().to_vec());
        let tape_grad = analytic.get(name).unwrap_or(&zero);
        for i in 0..value.len() {
            let mut plus = value.data().to_vec();
            plus[i] += epsilon;
            let mut minus = value.data().to_vec();
            minus[i] -= epsilon;

            let mut p_plus = params.clone();
            p_plus.update(name, Tensor::new_unchecked(value.shape().to_vec(), plus))?;
            let mut p_minus = params.clone();
            p_minus.update(name, Tensor::new_unchecked(value.shape().to_vec(), minus))?;

            let numeric = (eval(&p_plus)? - eval(&p_minus)?) / (2.0 * epsilon);
            let a = tape_grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}
