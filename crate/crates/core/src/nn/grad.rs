//! Differentiable objectives and the finite-difference gradient checker.

use super::tensor::Params;
use crate::error::{Error, Result};

/// A scalar loss over a parameter set with an analytic gradient.
pub trait Objective {
    fn loss(&self, params: &Params) -> Result<f64>;

    /// Loss and dL/dparams, shaped like `params`.
    fn loss_and_grad(&self, params: &Params) -> Result<(f64, Params)>;
}

/// Analytic gradient of `objective` at `params`.
pub fn grad<O: Objective + ?Sized>(objective: &O, params: &Params) -> Result<Params> {
    let (loss, g) = objective.loss_and_grad(params)?;
    if !loss.is_finite() || !g.all_finite() {
        return Err(Error::NonFiniteLoss { batch: 0 });
    }
    Ok(g)
}

/// Gradients smaller than this (times `max(1, |loss|)`) are compared
/// absolutely rather than relatively. A central difference cannot resolve
/// much below `ε_mach · |loss| / eps`, so the floor follows the loss scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Worst per-coordinate relative error `|a − n| / max(|a|, |n|, floor)`
/// between the analytic gradient `a` and the central difference `n`, with
/// `floor = RELATIVE_ERROR_FLOOR · max(1, |loss|)`.
pub fn grad_check<O: Objective + ?Sized>(objective: &O, params: &Params, eps: f64) -> Result<f64> {
    grad_check_with_floor(objective, params, eps, None)
}

/// [`grad_check`] with an explicit absolute floor instead of the loss-scaled one.
pub fn grad_check_with_floor<O: Objective + ?Sized>(
    objective: &O,
    params: &Params,
    eps: f64,
    floor: Option<f64>,
) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::InvalidConfig(format!("finite-difference step {eps}")));
    }
    let (loss, analytic) = objective.loss_and_grad(params)?;
    let floor = floor.unwrap_or(RELATIVE_ERROR_FLOOR * loss.abs().max(1.0));
    let analytic = analytic.flat();
    let base = params.flat();
    let mut probe = params.clone();
    let mut shifted = base.clone();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        shifted[i] = base[i] + eps;
        probe.set_flat(&shifted)?;
        let up = objective.loss(&probe)?;
        shifted[i] = base[i] - eps;
        probe.set_flat(&shifted)?;
        let down = objective.loss(&probe)?;
        shifted[i] = base[i];

        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(floor);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{Activation, Dense, Lstm};
    use crate::nn::tensor::Tensor;
    use crate::nn::vae::{self, LatentDist};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Linear {
        c: Vec<f64>,
    }

    impl Objective for Linear {
        fn loss(&self, p: &Params) -> Result<f64> {
            Ok(p.values("w")?.iter().zip(&self.c).map(|(a, b)| a * b).sum())
        }
        fn loss_and_grad(&self, p: &Params) -> Result<(f64, Params)> {
            let mut g = p.zeros_like();
            g.values_mut("w")?.copy_from_slice(&self.c);
            Ok((self.loss(p)?, g))
        }
    }

    struct Constant;

    impl Objective for Constant {
        fn loss(&self, _: &Params) -> Result<f64> {
            Ok(4.2)
        }
        fn loss_and_grad(&self, p: &Params) -> Result<(f64, Params)> {
            Ok((4.2, p.zeros_like()))
        }
    }

    /// ½‖Wx − y‖² through a Dense layer, optionally with a sign-flipped backward.
    struct LeastSquares {
        layer: Dense,
        x: Vec<f64>,
        y: Vec<f64>,
        corrupt: bool,
    }

    impl Objective for LeastSquares {
        fn loss(&self, p: &Params) -> Result<f64> {
            let out = self.layer.forward(p, &self.x)?;
            Ok(0.5 * out.iter().zip(&self.y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        }
        fn loss_and_grad(&self, p: &Params) -> Result<(f64, Params)> {
            let out = self.layer.forward(p, &self.x)?;
            let d: Vec<f64> = out.iter().zip(&self.y).map(|(a, b)| a - b).collect();
            let mut g = p.zeros_like();
            self.layer.backward(p, &self.x, &out, &d, &mut g)?;
            if self.corrupt {
                g.scale(-1.0);
            }
            Ok((self.loss(p)?, g))
        }
    }

    fn least_squares(corrupt: bool) -> (LeastSquares, Params) {
        let layer = Dense::new("d", 2, 2, Activation::Identity);
        let mut p = Params::new();
        p.insert("d.w", Tensor::from_vec(&[2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap());
        p.insert("d.b", Tensor::zeros(&[2]));
        let obj = LeastSquares {
            layer,
            x: vec![1.5, -0.5],
            y: vec![0.2, 1.0],
            corrupt,
        };
        (obj, p)
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut p = Params::new();
        p.insert("w", Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        assert!(grad(&Constant, &p).unwrap().flat().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn least_squares_gradient_is_outer_product() {
        let (obj, p) = least_squares(false);
        let g = grad(&obj, &p).unwrap();
        // Hand calculus: dL/dW = (Wx − y) xᵀ.
        let w = p.values("d.w").unwrap();
        let r = [
            w[0] * 1.5 + w[1] * -0.5 - 0.2,
            w[2] * 1.5 + w[3] * -0.5 - 1.0,
        ];
        let expected = [r[0] * 1.5, r[0] * -0.5, r[1] * 1.5, r[1] * -0.5];
        for (a, b) in g.values("d.w").unwrap().iter().zip(expected) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(g.values("d.b").unwrap(), &r);
    }

    #[test]
    fn checker_is_exact_on_linear_and_catches_sign_flips() {
        let mut p = Params::new();
        p.insert("w", Tensor::from_vec(&[3], vec![0.3, -1.2, 2.0]).unwrap());
        let lin = Linear { c: vec![1.0, -2.0, 0.5] };
        assert!(grad_check(&lin, &p, 1e-5).unwrap() < 1e-10);

        let (obj, p) = least_squares(true);
        let err = grad_check(&obj, &p, 1e-5).unwrap();
        assert!((err - 2.0).abs() < 1e-6, "sign flip gave {err}");
        assert!(grad_check(&obj, &p, 0.0).is_err());
    }

    /// LSTM encoder → (μ, logvar) heads → reparameterised z → dense decoder → ELBO.
    struct TinyVae {
        enc: Lstm,
        mu: Dense,
        logvar: Dense,
        dec: Dense,
        seq: Vec<f64>,
        noise: Vec<f64>,
    }

    impl TinyVae {
        fn forward(&self, p: &Params) -> Result<(f64, crate::nn::layers::LstmTrace, LatentDist, Vec<f64>, Vec<f64>)> {
            let h = self.enc.hidden;
            let trace = self.enc.forward(p, &self.seq, &vec![0.0; h], &vec![0.0; h])?;
            let dist = LatentDist::new(self.mu.forward(p, trace.final_h())?, self.logvar.forward(p, trace.final_h())?)?;
            let z = vae::reparameterize(&dist, &self.noise)?;
            let recon = self.dec.forward(p, &z)?;
            let loss = vae::elbo_loss(&self.seq, &recon, &dist)?.total;
            Ok((loss, trace, dist, z, recon))
        }
    }

    impl Objective for TinyVae {
        fn loss(&self, p: &Params) -> Result<f64> {
            Ok(self.forward(p)?.0)
        }

        fn loss_and_grad(&self, p: &Params) -> Result<(f64, Params)> {
            let (loss, trace, dist, z, recon) = self.forward(p)?;
            let mut g = p.zeros_like();
            let d_recon = vae::gaussian_nll_gradient(&self.seq, &recon);
            let dz = self.dec.backward(p, &z, &recon, &d_recon, &mut g)?;
            let (mut dmu, mut dlv) = vae::kl_gradient(&dist);
            for j in 0..dz.len() {
                dmu[j] += dz[j];
                dlv[j] += dz[j] * 0.5 * (0.5 * dist.logvar[j]).exp() * self.noise[j];
            }
            let h_final = trace.final_h();
            let mut dh = self.mu.backward(p, h_final, &dist.mu, &dmu, &mut g)?;
            let dh2 = self.logvar.backward(p, h_final, &dist.logvar, &dlv, &mut g)?;
            dh.iter_mut().zip(dh2).for_each(|(a, b)| *a += b);
            let hsz = self.enc.hidden;
            self.enc.backward(p, &trace, None, &dh, &vec![0.0; hsz], &mut g)?;
            Ok((loss, g))
        }
    }

    #[test]
    fn composite_lstm_vae_passes_gradient_check() {
        let (d, h, latent, steps) = (2, 3, 2, 4);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let enc = Lstm::new("enc", d, h);
            let mu = Dense::new("mu", h, latent, Activation::Identity);
            let logvar = Dense::new("lv", h, latent, Activation::Identity);
            let dec = Dense::new("dec", latent, d * steps, Activation::Tanh);
            let mut p = Params::new();
            enc.init(&mut p, &mut rng);
            mu.init(&mut p, &mut rng);
            logvar.init(&mut p, &mut rng);
            dec.init(&mut p, &mut rng);
            // Non-zero biases exercise every path.
            for (_, t) in p.iter_mut() {
                t.values.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
            }
            let obj = TinyVae {
                enc,
                mu,
                logvar,
                dec,
                seq: (0..d * steps).map(|_| rng.random_range(-1.0..1.0)).collect(),
                noise: (0..latent).map(|_| rng.random_range(-1.0..1.0)).collect(),
            };
            let err = grad_check(&obj, &p, 1e-5).unwrap();
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }
}
