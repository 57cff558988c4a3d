//! Noise schedules, forward noising, training targets and samplers.
//!
//! Two processes are supported. `DdpmLinear` is the discrete ε-prediction
//! process with a linear β schedule; `FlowLinear` is the rectified-flow
//! straight path `x_t = (1-t)·x0 + t·ε` with a uniform time grid, where the
//! model predicts the velocity `ε - x0`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::conditioning::ReferenceSpec;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_SAMPLE_STEPS: usize = 50;

/// Scale applied to flow times before the timestep embedding, so both
/// processes feed the embedding values on the same `[0, 1000]` range.
pub const FLOW_TIME_SCALE: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScheduleKind {
    DdpmLinear,
    FlowLinear,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::DdpmLinear => "ddpm-linear",
            ScheduleKind::FlowLinear => "flow-linear",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm-linear" | "ddpm" => Ok(ScheduleKind::DdpmLinear),
            "flow-linear" | "flow" => Ok(ScheduleKind::FlowLinear),
            other => Err(Error::config(format!("unknown schedule kind {other}"))),
        }
    }
}

/// How training draws noise levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum TimeSampling {
    #[default]
    Uniform,
    /// `t = sigmoid(u)`, `u ~ N(0, 1)`: fewer nearly clean and nearly pure
    /// noise levels than uniform.
    LogitNormal,
}

impl fmt::Display for TimeSampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TimeSampling::Uniform => "uniform",
            TimeSampling::LogitNormal => "logit-normal",
        })
    }
}

impl FromStr for TimeSampling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(TimeSampling::Uniform),
            "logit-normal" => Ok(TimeSampling::LogitNormal),
            other => Err(Error::config(format!("unknown time sampling {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Objective {
    Epsilon,
    VelocityFlow,
}

impl Objective {
    /// The schedule family this objective is trained with.
    pub fn schedule_kind(self) -> ScheduleKind {
        match self {
            Objective::Epsilon => ScheduleKind::DdpmLinear,
            Objective::VelocityFlow => ScheduleKind::FlowLinear,
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Epsilon => "epsilon",
            Objective::VelocityFlow => "velocity-flow",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epsilon" | "epsilon-prediction" => Ok(Objective::Epsilon),
            "velocity-flow" | "flow" => Ok(Objective::VelocityFlow),
            other => Err(Error::config(format!("unknown objective {other}"))),
        }
    }
}

/// A noise level: a discrete step for DDPM, a time in `[0, 1]` for flow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Timestep {
    Step(usize),
    Time(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    steps: usize,
    /// `betas[t-1]` is β_t (ddpm only).
    betas: Vec<f64>,
    /// `alpha_bars[t]` is ᾱ_t with ᾱ_0 = 1 (ddpm only), length `steps + 1`.
    alpha_bars: Vec<f64>,
    /// Original training step of each step of a respaced schedule; identity
    /// otherwise. `model_steps[0] = 0`.
    model_steps: Vec<usize>,
}

/// Linear schedule with the default β range.
pub fn build_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(kind, steps, DEFAULT_BETA_START, DEFAULT_BETA_END)
}

impl NoiseSchedule {
    pub fn linear(kind: ScheduleKind, steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::contract("schedule needs at least one step"));
        }
        let model_steps = (0..=steps).collect();
        match kind {
            ScheduleKind::FlowLinear => Ok(Self { kind, steps, betas: Vec::new(), alpha_bars: Vec::new(), model_steps }),
            ScheduleKind::DdpmLinear => {
                if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
                    return Err(Error::config(format!("beta range {beta_start}..{beta_end}")));
                }
                let betas: Vec<f64> = (0..steps)
                    .map(|i| {
                        if steps == 1 {
                            beta_start
                        } else {
                            beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                        }
                    })
                    .collect();
                let mut alpha_bars = Vec::with_capacity(steps + 1);
                alpha_bars.push(1.0);
                for &b in &betas {
                    let last = *alpha_bars.last().unwrap();
                    alpha_bars.push(last * (1.0 - b));
                }
                Ok(Self { kind, steps, betas, alpha_bars, model_steps })
            }
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Uniform flow time grid `t_i = i / steps`, `i = 0..=steps`.
    pub fn time_grid(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| i as f64 / self.steps as f64).collect()
    }

    /// A `steps`-step sampling schedule on the subsequence
    /// `τ_i = round(i·T/steps)` of this one, with
    /// `β'_i = 1 - ᾱ_{τ_i}/ᾱ_{τ_{i-1}}`. Flow schedules just get a new grid.
    pub fn respace(&self, steps: usize) -> Result<Self> {
        if steps == 0 || steps > self.steps {
            return Err(Error::contract(format!("cannot respace {} steps to {steps}", self.steps)));
        }
        if self.kind == ScheduleKind::FlowLinear {
            return build_schedule(ScheduleKind::FlowLinear, steps);
        }
        let taus: Vec<usize> = (0..=steps)
            .map(|i| ((i * self.steps) as f64 / steps as f64).round() as usize)
            .collect();
        let alpha_bars: Vec<f64> = taus.iter().map(|&t| self.alpha_bars[t]).collect();
        let betas = alpha_bars.windows(2).map(|w| 1.0 - w[1] / w[0]).collect();
        let model_steps = taus.iter().map(|&t| self.model_steps[t]).collect();
        Ok(Self { kind: self.kind, steps, betas, alpha_bars, model_steps })
    }

    /// Value fed to the timestep embedding.
    pub fn model_time(&self, t: Timestep) -> Result<f64> {
        match (self.kind, t) {
            (ScheduleKind::DdpmLinear, Timestep::Step(s)) => {
                self.check_step(s)?;
                Ok(self.model_steps[s] as f64)
            }
            (ScheduleKind::FlowLinear, Timestep::Time(tt)) => {
                check_time(tt)?;
                Ok(FLOW_TIME_SCALE * tt)
            }
            (kind, t) => Err(mismatch(kind, t)),
        }
    }

    /// Training noise level: uniform step in `1..=T`, or uniform time.
    pub fn sample_training_time<R: Rng + ?Sized>(&self, rng: &mut R) -> Timestep {
        match self.kind {
            ScheduleKind::DdpmLinear => Timestep::Step(rng.gen_range(1..=self.steps)),
            ScheduleKind::FlowLinear => Timestep::Time(rng.gen::<f64>()),
        }
    }

    /// Training noise level drawn per `sampling`. Logit-normal draws map to
    /// the step `ceil(t·T)` on a DDPM schedule.
    pub fn sample_training_time_with<R: Rng + ?Sized>(&self, sampling: TimeSampling, rng: &mut R) -> Timestep {
        match sampling {
            TimeSampling::Uniform => self.sample_training_time(rng),
            TimeSampling::LogitNormal => {
                let u: f64 = rng.sample(StandardNormal);
                let t = 1.0 / (1.0 + (-u).exp());
                match self.kind {
                    ScheduleKind::DdpmLinear => {
                        Timestep::Step(((t * self.steps as f64).ceil() as usize).clamp(1, self.steps))
                    }
                    ScheduleKind::FlowLinear => Timestep::Time(t),
                }
            }
        }
    }

    /// Noise levels visited by a sampler, from pure noise to the last step.
    pub fn sampling_times(&self) -> Vec<Timestep> {
        match self.kind {
            ScheduleKind::DdpmLinear => (1..=self.steps).rev().map(Timestep::Step).collect(),
            ScheduleKind::FlowLinear => {
                let grid = self.time_grid();
                (1..=self.steps).rev().map(|i| Timestep::Time(grid[i])).collect()
            }
        }
    }

    /// Plain-text table, one row per step.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        match self.kind {
            ScheduleKind::DdpmLinear => {
                s.push_str("t\tbeta\talpha_bar\n");
                for t in 1..=self.steps {
                    s.push_str(&format!("{}\t{:.9e}\t{:.9e}\n", self.model_steps[t], self.beta(t), self.alpha_bar(t)));
                }
            }
            ScheduleKind::FlowLinear => {
                s.push_str("i\tt\n");
                for (i, t) in self.time_grid().iter().enumerate() {
                    s.push_str(&format!("{i}\t{t:.9}\n"));
                }
            }
        }
        s
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::contract(format!("step {t} outside 1..={}", self.steps)));
        }
        Ok(())
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::contract(format!("flow time {t} outside [0, 1]")));
    }
    Ok(())
}

fn mismatch(kind: ScheduleKind, t: Timestep) -> Error {
    Error::contract(format!("timestep {t:?} does not fit a {kind} schedule"))
}

fn same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn axpby<S: Scalar>(a: f64, x: &Tensor<S>, b: f64, y: &Tensor<S>) -> Tensor<S> {
    let (a, b) = (S::lit(a), S::lit(b));
    let data = x.data().iter().zip(y.data()).map(|(&u, &v)| a * u + b * v).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shapes checked by caller")
}

/// Standard normal tensor.
pub fn standard_normal<S: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<S> {
    Tensor::from_fn(shape.to_vec(), |_| S::lit(rng.sample::<f64, _>(StandardNormal)))
}

/// Forward noising of `x0` to level `t` with noise `eps`.
pub fn q_sample<S: Scalar>(x0: &Tensor<S>, t: Timestep, eps: &Tensor<S>, sched: &NoiseSchedule) -> Result<Tensor<S>> {
    same_shape("q_sample", x0, eps)?;
    match (sched.kind, t) {
        (ScheduleKind::DdpmLinear, Timestep::Step(s)) => {
            sched.check_step(s)?;
            let ab = sched.alpha_bar(s);
            Ok(axpby(ab.sqrt(), x0, (1.0 - ab).sqrt(), eps))
        }
        (ScheduleKind::FlowLinear, Timestep::Time(tt)) => {
            check_time(tt)?;
            Ok(axpby(1.0 - tt, x0, tt, eps))
        }
        (kind, t) => Err(mismatch(kind, t)),
    }
}

/// What the model regresses onto: `ε`, or the velocity `ε - x0`.
pub fn training_target<S: Scalar>(x0: &Tensor<S>, eps: &Tensor<S>, objective: Objective) -> Result<Tensor<S>> {
    same_shape("training_target", x0, eps)?;
    Ok(match objective {
        Objective::Epsilon => eps.clone(),
        Objective::VelocityFlow => axpby(1.0, eps, -1.0, x0),
    })
}

/// One ancestral step `x_t -> x_{t-1}` from a predicted ε. The posterior
/// variance is `β̃_t = (1-ᾱ_{t-1})/(1-ᾱ_t)·β_t`; the step from `t = 1`
/// is deterministic.
pub fn ddpm_ancestral_step<S: Scalar, R: Rng + ?Sized>(
    x_t: &Tensor<S>,
    model_eps: &Tensor<S>,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<S>> {
    if sched.kind != ScheduleKind::DdpmLinear {
        return Err(Error::contract("ancestral step on a flow schedule"));
    }
    sched.check_step(t)?;
    same_shape("ddpm_ancestral_step", x_t, model_eps)?;
    let beta = sched.beta(t);
    let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t - 1));
    let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
    let mean = axpby(inv_sqrt_alpha, x_t, -inv_sqrt_alpha * beta / (1.0 - ab).sqrt(), model_eps);
    if t == 1 {
        return Ok(mean);
    }
    let sigma = ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt();
    let noise: Tensor<S> = standard_normal(x_t.shape(), rng);
    Ok(axpby(1.0, &mean, sigma, &noise))
}

/// Euler step of the flow ODE from `t` to `t - dt`.
pub fn flow_euler_step<S: Scalar>(x_t: &Tensor<S>, model_v: &Tensor<S>, t: f64, dt: f64) -> Result<Tensor<S>> {
    if !(dt > 0.0 && dt <= t + 1e-12) {
        return Err(Error::contract(format!("euler step dt={dt} from t={t}")));
    }
    same_shape("flow_euler_step", x_t, model_v)?;
    Ok(axpby(1.0, x_t, -dt, model_v))
}

/// Overwrites every reference member's latent with its clean reference
/// noised to level `t`. Consumes no randomness when there are no references.
pub fn sdedit_replace<S: Scalar, R: Rng + ?Sized>(
    latents: &mut [Tensor<S>],
    refs: &ReferenceSpec<S>,
    t: Timestep,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<()> {
    if latents.len() != refs.n() {
        return Err(Error::contract(format!("{} latents for {} reference flags", latents.len(), refs.n())));
    }
    for i in refs.indices() {
        let clean = refs.image(i)?;
        let eps = standard_normal(clean.shape(), rng);
        latents[i] = q_sample(clean, t, &eps, sched)?;
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for signals in `[-1, 1]`.
pub fn psnr<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    same_shape("psnr", a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / a.numel().max(1) as f64;
    Ok(10.0 * (4.0 / mse).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ddpm() -> NoiseSchedule {
        build_schedule(ScheduleKind::DdpmLinear, DEFAULT_TRAIN_STEPS).unwrap()
    }

    fn image(seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([3, 8, 8], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn single_step_and_zero_steps() {
        let s = build_schedule(ScheduleKind::DdpmLinear, 1).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - DEFAULT_BETA_START);
        assert!(build_schedule(ScheduleKind::DdpmLinear, 0).is_err());
        assert!(build_schedule(ScheduleKind::FlowLinear, 0).is_err());
    }

    #[test]
    fn alpha_bar_matches_direct_product() {
        let s = ddpm();
        // independent product with betas recomputed from the closed form
        let mut prod = 1.0f64;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * (i as f64) / 999.0);
        }
        let got = s.alpha_bar(1000);
        assert!(((got - prod) / prod).abs() < 1e-10, "{got} vs {prod}");
        assert!(got > 0.0 && got < 1.0);
    }

    #[test]
    fn invariants_hold_original_and_respaced() {
        for sched in [ddpm(), ddpm().respace(50).unwrap(), ddpm().respace(7).unwrap()] {
            let b = sched.betas();
            assert!(b[0] > 0.0 && *b.last().unwrap() < 1.0);
            assert!(b.windows(2).all(|w| w[0] <= w[1] + 1e-15));
            assert!(sched.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            assert_eq!(sched.alpha_bar(0), 1.0);
        }
        let flow = build_schedule(ScheduleKind::FlowLinear, 50).unwrap();
        let grid = flow.time_grid();
        assert_eq!((grid[0], grid[50]), (0.0, 1.0));
        assert!(grid.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn respaced_schedule_keeps_endpoint_and_maps_steps() {
        let base = ddpm();
        let r = base.respace(50).unwrap();
        assert_eq!(r.alpha_bar(50), base.alpha_bar(1000));
        assert_eq!(r.model_time(Timestep::Step(50)).unwrap(), 1000.0);
        assert_eq!(r.model_time(Timestep::Step(1)).unwrap(), 20.0);
    }

    #[test]
    fn flow_endpoints_are_exact() {
        let s = build_schedule(ScheduleKind::FlowLinear, 10).unwrap();
        let (x0, eps) = (image(1), image(2));
        assert_eq!(q_sample(&x0, Timestep::Time(0.0), &eps, &s).unwrap(), x0);
        assert_eq!(q_sample(&x0, Timestep::Time(1.0), &eps, &s).unwrap(), eps);
        assert!(q_sample(&x0, Timestep::Time(1.5), &eps, &s).is_err());
        assert!(q_sample(&x0, Timestep::Step(3), &eps, &s).is_err());
        assert!(q_sample(&x0, Timestep::Step(0), &eps, &ddpm()).is_err());
        assert!(q_sample(&x0, Timestep::Step(1001), &eps, &ddpm()).is_err());
    }

    #[test]
    fn terminal_ddpm_statistics_match_monte_carlo() {
        let s = ddpm();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::<f64>::from_fn([10_000], |i| if i % 2 == 0 { 0.8 } else { -0.2 });
        let eps = standard_normal(&[10_000], &mut rng);
        let xt = q_sample(&x0, Timestep::Step(1000), &eps, &s).unwrap();
        let n = 10_000.0;
        let mean = xt.data().iter().sum::<f64>() / n;
        let var = xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let ab = s.alpha_bar(1000);
        let (m0, v0) = (0.3, 0.25);
        let want_mean = ab.sqrt() * m0;
        let want_var = 1.0 - ab + ab * v0;
        let se_mean = (want_var / n).sqrt();
        let se_var = want_var * (2.0 / (n - 1.0)).sqrt();
        assert!((mean - want_mean).abs() < 3.0 * se_mean, "{mean} vs {want_mean}");
        assert!((var - want_var).abs() < 3.0 * se_var, "{var} vs {want_var}");
    }

    #[test]
    fn training_targets() {
        let (x0, eps) = (image(4), image(5));
        assert_eq!(training_target(&x0, &eps, Objective::Epsilon).unwrap(), eps);
        let v = training_target(&x0, &x0, Objective::VelocityFlow).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn last_ancestral_step_inverts_exactly() {
        let s = ddpm();
        let (x0, eps) = (image(6), image(7));
        let x1 = q_sample(&x0, Timestep::Step(1), &eps, &s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let back = ddpm_ancestral_step(&x1, &eps, 1, &s, &mut rng).unwrap();
        assert!(back.max_abs_diff(&x0).unwrap() < 1e-4);
        // zero ε at t=1 is a pure rescale by 1/√α_1
        let zero = Tensor::zeros([3, 8, 8]);
        let r = ddpm_ancestral_step(&x1, &zero, 1, &s, &mut rng).unwrap();
        let k = 1.0 / (1.0 - 1e-4f64).sqrt();
        assert!(r.max_abs_diff(&x1.map(|v| v * k)).unwrap() < 1e-15);
    }

    #[test]
    fn oracle_ddpm_chain_recovers_x0() {
        let s = ddpm().respace(DEFAULT_SAMPLE_STEPS).unwrap();
        let x0 = image(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut x: Tensor<f64> = standard_normal(x0.shape(), &mut rng);
        for t in (1..=s.steps()).rev() {
            let ab = s.alpha_bar(t);
            let eps = axpby(1.0 / (1.0 - ab).sqrt(), &x, -ab.sqrt() / (1.0 - ab).sqrt(), &x0);
            x = ddpm_ancestral_step(&x, &eps, t, &s, &mut rng).unwrap();
        }
        assert!(psnr(&x, &x0).unwrap() > 40.0);
    }

    #[test]
    fn oracle_flow_chain_recovers_x0() {
        let (x0, eps) = (image(10), image(11));
        let s = build_schedule(ScheduleKind::FlowLinear, 1).unwrap();
        let x1 = q_sample(&x0, Timestep::Time(1.0), &eps, &s).unwrap();
        let v = training_target(&x0, &eps, Objective::VelocityFlow).unwrap();
        assert!(flow_euler_step(&x1, &v, 1.0, 1.0).unwrap().max_abs_diff(&x0).unwrap() < 1e-12);
        assert!(flow_euler_step(&x1, &v, 1.0, 0.0).is_err());

        let s = build_schedule(ScheduleKind::FlowLinear, 50).unwrap();
        let grid = s.time_grid();
        let mut x = x1;
        for i in (1..=50).rev() {
            let t = grid[i];
            // velocity recovered from the current point on the straight path
            let x0_hat = &x0;
            let eps_hat = axpby(1.0 / t, &x, -(1.0 - t) / t, x0_hat);
            let v = training_target(x0_hat, &eps_hat, Objective::VelocityFlow).unwrap();
            x = flow_euler_step(&x, &v, t, t - grid[i - 1]).unwrap();
        }
        assert!(x.max_abs_diff(&x0).unwrap() < 1e-5);
    }

    #[test]
    fn sdedit_replace_cases() {
        let flow = build_schedule(ScheduleKind::FlowLinear, 10).unwrap();
        let (a, b) = (image(12), image(13));
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut lat = vec![a.clone(), b.clone()];
        let none = ReferenceSpec::none(2);
        let before = rng.clone();
        sdedit_replace(&mut lat, &none, Timestep::Time(0.5), &flow, &mut rng).unwrap();
        assert_eq!(lat, vec![a.clone(), b.clone()]);
        assert_eq!(rng, before);

        let clean = image(15);
        let refs = ReferenceSpec::with_images(vec![true, false], &[clean.clone(), b.clone()]).unwrap();
        sdedit_replace(&mut lat, &refs, Timestep::Time(0.0), &flow, &mut rng).unwrap();
        assert_eq!(lat[0], clean);
        assert_eq!(lat[1], b);

        let bare = ReferenceSpec::<f64>::from_flags(vec![true, false]).unwrap();
        assert!(sdedit_replace(&mut lat, &bare, Timestep::Time(0.5), &flow, &mut rng).is_err());
    }

    #[test]
    fn sdedit_at_terminal_step_is_near_pure_noise() {
        let s = ddpm();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let clean = Tensor::<f64>::full([4, 50, 50], 0.9);
        let refs = ReferenceSpec::with_images(vec![true, false], &[clean.clone(), clean.clone()]).unwrap();
        let mut lat = vec![Tensor::zeros([4, 50, 50]), Tensor::zeros([4, 50, 50])];
        sdedit_replace(&mut lat, &refs, Timestep::Step(1000), &s, &mut rng).unwrap();
        let d = lat[0].data();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 3.0 / n.sqrt() + s.alpha_bar(1000).sqrt() * 0.9);
        assert!((var - 1.0).abs() < 0.05);
        assert!(lat[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dumps_are_tables() {
        let d = ddpm().dump();
        assert_eq!(d.lines().count(), 1001);
        assert!(d.starts_with("t\tbeta\talpha_bar\n"));
        let f = build_schedule(ScheduleKind::FlowLinear, 4).unwrap().dump();
        assert_eq!(f.lines().count(), 6);
    }

    #[test]
    fn sampling_times_descend() {
        let s = ddpm().respace(5).unwrap();
        assert_eq!(s.sampling_times(), (1..=5).rev().map(Timestep::Step).collect::<Vec<_>>());
        let f = build_schedule(ScheduleKind::FlowLinear, 4).unwrap();
        assert_eq!(f.sampling_times()[0], Timestep::Time(1.0));
    }
}
