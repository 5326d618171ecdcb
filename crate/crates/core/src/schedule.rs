//! DDIM noise schedule, deterministic sampling step and its exact inverse.
//!
//! Timesteps are train-step indices. The inference loop walks
//! [`DiffusionSchedule::timesteps`] in order (highest noise first); the
//! level below the smallest timestep is the clean image with `alpha_bar = 1`.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub num_train_steps: usize,
    pub num_inference_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub eta: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_train_steps: 1000,
            num_inference_steps: 50,
            beta_start: 1e-4,
            beta_end: 2e-2,
            eta: 0.0,
        }
    }
}

impl ScheduleConfig {
    pub fn noise_levels(&self) -> NoiseLevels {
        NoiseLevels {
            num_train_steps: self.num_train_steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }

    pub fn build(&self) -> Result<DiffusionSchedule> {
        make_schedule(
            self.num_train_steps,
            self.num_inference_steps,
            self.beta_start,
            self.beta_end,
            self.eta,
        )
    }
}

/// The train-time noise levels a denoiser is tied to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseLevels {
    pub num_train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for NoiseLevels {
    fn default() -> Self {
        ScheduleConfig::default().noise_levels()
    }
}

impl NoiseLevels {
    pub fn alpha_bar(&self) -> Result<Vec<f64>> {
        Ok(make_schedule(self.num_train_steps, 1, self.beta_start, self.beta_end, 0.0)?.alpha_bar)
    }
}

/// A diffusion latent: an image-shaped `(B, C, H, W)` tensor at a noise level.
#[derive(Debug, Clone)]
pub struct LatentFrame {
    pub data: Tensor,
    pub frame_index: usize,
    /// Train-step index of the noise level, `None` for the clean level.
    pub timestep: Option<usize>,
}

impl LatentFrame {
    pub fn new(data: Tensor, frame_index: usize, timestep: Option<usize>) -> Self {
        Self {
            data,
            frame_index,
            timestep,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    num_train_steps: usize,
    alpha_bar: Vec<f64>,
    timesteps: Vec<usize>,
    eta: f64,
    config: Option<ScheduleConfig>,
}

/// Linear-beta schedule with evenly strided inference timesteps.
pub fn make_schedule(
    num_train_steps: usize,
    num_inference_steps: usize,
    beta_start: f64,
    beta_end: f64,
    eta: f64,
) -> Result<DiffusionSchedule> {
    if num_inference_steps == 0 || num_inference_steps > num_train_steps {
        return Err(Error::param(format!(
            "need 0 < num_inference_steps ({num_inference_steps}) <= num_train_steps ({num_train_steps})"
        )));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::param(format!(
            "need 0 < beta_start ({beta_start}) <= beta_end ({beta_end}) < 1"
        )));
    }
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::param(format!("eta must be >= 0, got {eta}")));
    }
    let mut alpha_bar = Vec::with_capacity(num_train_steps);
    let mut acc = 1.0f64;
    for i in 0..num_train_steps {
        let beta = if num_train_steps == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * i as f64 / (num_train_steps - 1) as f64
        };
        acc *= 1.0 - beta;
        alpha_bar.push(acc);
    }
    let mut sched = DiffusionSchedule::from_alpha_bar(alpha_bar, num_inference_steps, eta)?;
    sched.config = Some(ScheduleConfig {
        num_train_steps,
        num_inference_steps,
        beta_start,
        beta_end,
        eta,
    });
    Ok(sched)
}

/// Scalar DDIM coefficients `(c_x0, c_eps, c_noise)` for one step from a level
/// with `alpha_bar_t` to one with `alpha_bar_prev`.
pub fn ddim_coefficients(alpha_bar_prev: f64, sigma: f64) -> (f64, f64, f64) {
    let c_x0 = alpha_bar_prev.sqrt();
    let c_eps = (1.0 - alpha_bar_prev - sigma * sigma).max(0.0).sqrt();
    (c_x0, c_eps, sigma)
}

impl DiffusionSchedule {
    /// Builds a schedule from an explicit cumulative-alpha table. Only
    /// monotonicity and range are checked; [`make_schedule`] additionally
    /// guarantees the near-clean / near-noise endpoints.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>, num_inference_steps: usize, eta: f64) -> Result<Self> {
        let n = alpha_bar.len();
        if n == 0 || num_inference_steps == 0 || num_inference_steps > n {
            return Err(Error::param(format!(
                "need 0 < num_inference_steps ({num_inference_steps}) <= table length ({n})"
            )));
        }
        if alpha_bar.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::param("alpha_bar values must lie in (0, 1]"));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::param("alpha_bar must be strictly decreasing"));
        }
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::param(format!("eta must be >= 0, got {eta}")));
        }
        let ratio = n / num_inference_steps;
        let timesteps = (0..num_inference_steps).rev().map(|i| i * ratio).collect();
        Ok(Self {
            num_train_steps: n,
            alpha_bar,
            timesteps,
            eta,
            config: None,
        })
    }

    pub fn config(&self) -> Option<&ScheduleConfig> {
        self.config.as_ref()
    }

    pub fn num_train_steps(&self) -> usize {
        self.num_train_steps
    }

    pub fn num_inference_steps(&self) -> usize {
        self.timesteps.len()
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn alpha_bar_table(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Inference timesteps, strictly decreasing.
    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    /// Position of `t` in the inference loop (0 is the noisiest step).
    pub fn position(&self, t: usize) -> Option<usize> {
        self.timesteps.iter().position(|&s| s == t)
    }

    fn check_inference(&self, t: usize) -> Result<usize> {
        self.position(t)
            .ok_or_else(|| Error::param(format!("{t} is not an inference timestep")))
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::param(format!("timestep {t} out of range 0..{}", self.num_train_steps)))
    }

    /// The inference timestep one level less noisy than `t`, `None` for the clean level.
    pub fn prev_timestep(&self, t: usize) -> Result<Option<usize>> {
        let pos = self.check_inference(t)?;
        Ok(self.timesteps.get(pos + 1).copied())
    }

    pub fn alpha_bar_prev(&self, t: usize) -> Result<f64> {
        match self.prev_timestep(t)? {
            Some(p) => self.alpha_bar(p),
            None => Ok(1.0),
        }
    }

    /// `sigma_t = eta * sqrt((1 - a_prev) / (1 - a_t)) * sqrt(1 - a_t / a_prev)`.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        if self.eta == 0.0 {
            self.check_inference(t)?;
            return Ok(0.0);
        }
        let a_t = self.alpha_bar(t)?;
        let a_prev = self.alpha_bar_prev(t)?;
        Ok(self.eta * ((1.0 - a_prev) / (1.0 - a_t)).sqrt() * (1.0 - a_t / a_prev).sqrt())
    }

    /// Forward noising `sqrt(a_t) x0 + sqrt(1 - a_t) noise` at any train step.
    pub fn add_noise(&self, x0: &Tensor, noise: &Tensor, t: usize) -> Result<Tensor> {
        same_shape(x0, noise)?;
        let a = self.alpha_bar(t)?;
        Ok(((x0 * a.sqrt())? + (noise * (1.0 - a).sqrt())?)?)
    }

    /// `x0_hat = (x_t - sqrt(1 - a_t) eps) / sqrt(a_t)`. Accepts any train step.
    pub fn predict_x0(&self, x_t: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        same_shape(x_t, eps)?;
        let a = self.alpha_bar(t)?;
        Ok(((x_t - (eps * (1.0 - a).sqrt())?)? * (1.0 / a.sqrt()))?)
    }

    /// One DDIM step from timestep `t` to its predecessor level. Returns the
    /// new latent and the `x0_hat` it was built from.
    pub fn ddim_step(
        &self,
        x_t: &LatentFrame,
        eps: &Tensor,
        t: usize,
        noise: Option<&Tensor>,
    ) -> Result<(LatentFrame, Tensor)> {
        let prev = self.prev_timestep(t)?;
        let x0 = self.predict_x0(&x_t.data, eps, t)?;
        let a_prev = self.alpha_bar_prev(t)?;
        let sigma = self.sigma(t)?;
        let (c_x0, c_eps, c_noise) = ddim_coefficients(a_prev, sigma);
        let mut next = ((&x0 * c_x0)? + (eps * c_eps)?)?;
        if sigma > 0.0 {
            let noise = noise.ok_or_else(|| {
                Error::param(format!("sigma_t = {sigma} > 0 at t={t} but no noise was supplied"))
            })?;
            same_shape(&next, noise)?;
            next = (next + (noise * c_noise)?)?;
        }
        Ok((LatentFrame::new(next, x_t.frame_index, prev), x0))
    }

    /// Algebraic inverse of the deterministic step: maps a latent at the level
    /// just below `t` up to `t`, so that `ddim_step(ddim_invert_step(x, eps, t), eps, t)`
    /// returns `x`.
    pub fn ddim_invert_step(&self, x: &LatentFrame, eps: &Tensor, t: usize) -> Result<LatentFrame> {
        if self.eta != 0.0 {
            return Err(Error::Unsupported(format!(
                "DDIM inversion requires eta = 0 (got {})",
                self.eta
            )));
        }
        same_shape(&x.data, eps)?;
        let a_prev = self.alpha_bar_prev(t)?;
        let a_t = self.alpha_bar(t)?;
        let x0 = ((&x.data - (eps * (1.0 - a_prev).sqrt())?)? * (1.0 / a_prev.sqrt()))?;
        let next = ((x0 * a_t.sqrt())? + (eps * (1.0 - a_t).sqrt())?)?;
        Ok(LatentFrame::new(next, x.frame_index, Some(t)))
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() == b.dims() {
        Ok(())
    } else {
        Err(Error::shape(format!("{:?} vs {:?}", a.dims(), b.dims())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        let v: Vec<f32> = (0..n).map(|_| rng.random_range(-1.5f32..1.5)).collect();
        Tensor::from_vec(v, (1, 1, 1, n), &Device::Cpu).unwrap()
    }

    fn vals(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
    }

    fn two_level(a_t: f64, a_prev: f64) -> (DiffusionSchedule, usize) {
        // Table [a_prev, a_t] with both entries as inference steps: t = 1, prev = 0.
        // The last sampling step then goes from a_prev to 1.
        (DiffusionSchedule::from_alpha_bar(vec![a_prev, a_t], 2, 0.0).unwrap(), 1)
    }

    #[test]
    fn default_schedule_shape() {
        let s = make_schedule(1000, 50, 1e-4, 2e-2, 0.0).unwrap();
        assert_eq!(s.timesteps().len(), 50);
        assert_eq!(s.timesteps()[0], 980);
        assert_eq!(*s.timesteps().last().unwrap(), 0);
        for &t in s.timesteps() {
            assert_eq!(s.sigma(t).unwrap(), 0.0);
        }
    }

    #[test]
    fn full_stride_timesteps() {
        let s = make_schedule(10, 10, 1e-4, 2e-2, 0.0).unwrap();
        assert_eq!(s.timesteps(), &[9, 8, 7, 6, 5, 4, 3, 2, 1, 0]);
    }

    #[test]
    fn alpha_bar_matches_scalar_loop() {
        let s = make_schedule(1000, 50, 1e-4, 2e-2, 0.0).unwrap();
        // independent product over explicit betas
        let mut prod = 1.0f64;
        let mut expected = Vec::new();
        for i in 0..1000 {
            let beta = 1e-4 + (2e-2 - 1e-4) * (i as f64) / 999.0;
            prod *= 1.0 - beta;
            expected.push(prod);
        }
        for (a, b) in s.alpha_bar_table().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((s.alpha_bar(0).unwrap() - 0.9999).abs() < 1e-12);
        assert!(s.alpha_bar(999).unwrap() < 1e-3);
        assert!(s.alpha_bar_table().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn invalid_parameters() {
        assert!(matches!(make_schedule(10, 0, 1e-4, 2e-2, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(make_schedule(10, 11, 1e-4, 2e-2, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(make_schedule(10, 5, 0.0, 2e-2, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(make_schedule(10, 5, 3e-2, 2e-2, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(make_schedule(10, 5, 1e-4, 1.0, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn predict_x0_zero_eps() {
        let s = make_schedule(1000, 50, 1e-4, 2e-2, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, 16);
        let zeros = x.zeros_like().unwrap();
        let a = s.alpha_bar(500).unwrap();
        let x0 = s.predict_x0(&x, &zeros, 500).unwrap();
        for (p, q) in vals(&x0).iter().zip(vals(&x)) {
            assert!((*p as f64 - q as f64 / a.sqrt()).abs() < 1e-4);
        }
    }

    #[test]
    fn predict_x0_inverts_forward_noising() {
        let s = make_schedule(1000, 50, 1e-4, 2e-2, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = rand_tensor(&mut rng, 32);
        let e = rand_tensor(&mut rng, 32);
        for t in [0, 240, 500] {
            let x = s.add_noise(&c, &e, t).unwrap();
            let x0 = s.predict_x0(&x, &e, t).unwrap();
            for (p, q) in vals(&x0).iter().zip(vals(&c)) {
                assert!((p - q).abs() < 1e-4, "t={t}: {p} vs {q}");
            }
        }
    }

    #[test]
    fn predict_x0_scalar_oracle() {
        let (s, t) = two_level(0.25, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, 64);
        let e = rand_tensor(&mut rng, 64);
        let got = vals(&s.predict_x0(&x, &e, t).unwrap());
        let (xv, ev) = (vals(&x), vals(&e));
        for i in [0usize, 7, 19, 40, 63] {
            let oracle = (xv[i] as f64 - (0.75f64).sqrt() * ev[i] as f64) / 0.5;
            assert!((got[i] as f64 - oracle).abs() < 1e-5);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let s = make_schedule(1000, 50, 1e-4, 2e-2, 0.0).unwrap();
        let a = Tensor::zeros((1, 1, 2, 2), candle_core::DType::F32, &Device::Cpu).unwrap();
        let b = Tensor::zeros((1, 1, 2, 3), candle_core::DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(s.predict_x0(&a, &b, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn final_step_collapses_to_x0() {
        let s = make_schedule(1000, 50, 1e-4, 2e-2, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = LatentFrame::new(rand_tensor(&mut rng, 16), 0, Some(0));
        let e = rand_tensor(&mut rng, 16);
        let (next, x0) = s.ddim_step(&x, &e, 0, None).unwrap();
        assert_eq!(next.timestep, None);
        assert_eq!(vals(&next.data), vals(&x0));
    }

    #[test]
    fn zero_eps_step_rescales() {
        let s = make_schedule(1000, 50, 1e-4, 2e-2, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = LatentFrame::new(rand_tensor(&mut rng, 16), 0, Some(500));
        let z = x.data.zeros_like().unwrap();
        let (next, _) = s.ddim_step(&x, &z, 500, None).unwrap();
        let ratio = (s.alpha_bar(480).unwrap() / s.alpha_bar(500).unwrap()).sqrt();
        for (p, q) in vals(&next.data).iter().zip(vals(&x.data)) {
            assert!((*p as f64 - ratio * q as f64).abs() < 1e-5);
        }
        assert_eq!(next.timestep, Some(480));
    }

    #[test]
    fn ddim_step_scalar_oracle() {
        let (s, t) = two_level(0.5, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = LatentFrame::new(rand_tensor(&mut rng, 32), 0, Some(t));
        let e = rand_tensor(&mut rng, 32);
        let (next, _) = s.ddim_step(&x, &e, t, None).unwrap();
        let (xv, ev, nv) = (vals(&x.data), vals(&e), vals(&next.data));
        for i in 0..32 {
            let x0 = (xv[i] as f64 - 0.5f64.sqrt() * ev[i] as f64) / 0.5f64.sqrt();
            let oracle = 0.7f64.sqrt() * x0 + 0.3f64.sqrt() * ev[i] as f64;
            assert!((nv[i] as f64 - oracle).abs() < 1e-6);
        }
    }

    #[test]
    fn stochastic_step_requires_noise() {
        let s = make_schedule(1000, 50, 1e-4, 2e-2, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = LatentFrame::new(rand_tensor(&mut rng, 8), 0, Some(500));
        let e = rand_tensor(&mut rng, 8);
        assert!(s.sigma(500).unwrap() > 0.0);
        assert!(matches!(s.ddim_step(&x, &e, 500, None), Err(Error::Parameter(_))));
        let n = rand_tensor(&mut rng, 8);
        assert!(s.ddim_step(&x, &e, 500, Some(&n)).is_ok());
        assert!(matches!(s.ddim_invert_step(&x, &e, 500), Err(Error::Unsupported(_))));
    }

    #[test]
    fn invert_then_step_is_identity() {
        let s = make_schedule(1000, 50, 1e-4, 2e-2, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for &t in s.timesteps() {
            let x = LatentFrame::new(rand_tensor(&mut rng, 16), 0, s.prev_timestep(t).unwrap());
            let e = rand_tensor(&mut rng, 16);
            let up = s.ddim_invert_step(&x, &e, t).unwrap();
            let (down, _) = s.ddim_step(&up, &e, t, None).unwrap();
            for (p, q) in vals(&down.data).iter().zip(vals(&x.data)) {
                assert!((p - q).abs() < 1e-5, "t={t}: {p} vs {q}");
            }
        }
    }

    #[test]
    fn zero_eps_inversion_rescales() {
        let s = make_schedule(1000, 50, 1e-4, 2e-2, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = LatentFrame::new(rand_tensor(&mut rng, 16), 0, Some(480));
        let z = x.data.zeros_like().unwrap();
        let up = s.ddim_invert_step(&x, &z, 500).unwrap();
        let ratio = (s.alpha_bar(500).unwrap() / s.alpha_bar(480).unwrap()).sqrt();
        for (p, q) in vals(&up.data).iter().zip(vals(&x.data)) {
            assert!((*p as f64 - ratio * q as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn non_inference_timestep_rejected() {
        let s = make_schedule(1000, 50, 1e-4, 2e-2, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = LatentFrame::new(rand_tensor(&mut rng, 4), 0, Some(7));
        let e = rand_tensor(&mut rng, 4);
        assert!(matches!(s.ddim_step(&x, &e, 7, None), Err(Error::Parameter(_))));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn step_then_invert_is_identity(seed in 0u64..1000, pos in 0usize..50) {
            let s = make_schedule(1000, 50, 1e-4, 2e-2, 0.0).unwrap();
            let t = s.timesteps()[pos];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = LatentFrame::new(rand_tensor(&mut rng, 8), 0, Some(t));
            let e = rand_tensor(&mut rng, 8);
            let (down, _) = s.ddim_step(&x, &e, t, None).unwrap();
            let up = s.ddim_invert_step(&down, &e, t).unwrap();
            for (p, q) in vals(&up.data).iter().zip(vals(&x.data)) {
                proptest::prop_assert!((p - q).abs() < 1e-5 * (1.0 + q.abs()));
            }
        }

        #[test]
        fn x0_from_true_noise_is_step_independent(seed in 0u64..1000, pos in 0usize..50) {
            let s = make_schedule(1000, 50, 1e-4, 2e-2, 0.0).unwrap();
            let t = s.timesteps()[pos];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = rand_tensor(&mut rng, 16);
            let e = rand_tensor(&mut rng, 16);
            let x = s.add_noise(&c, &e, t).unwrap();
            let x0 = s.predict_x0(&x, &e, t).unwrap();
            let norm = |v: Vec<f32>| v.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
            let (n0, nc) = (norm(vals(&x0)), norm(vals(&c)));
            // f32 cancellation grows like 1/sqrt(alpha_bar) at the noisiest steps
            let tol = 1e-6 / s.alpha_bar(t).unwrap().sqrt() * nc.max(1.0) * 8.0;
            proptest::prop_assert!((n0 - nc).abs() < tol, "{n0} vs {nc} (tol {tol})");
        }
    }
}
