//! Time-varying quantities: timestep annealing, dynamic FreeU and CFG
//! ramps, and the render resolution step schedule.
//!
//! Every schedule is a pure function; the only stateful input anywhere is
//! the seeded generator handed to [`sample_timestep`]. FreeU factors ramp
//! over the diffusion timestep, the guidance weight ramps over the
//! optimization iteration.

use rand::Rng;

use crate::error::{Error, Result};
use crate::freeu::FreeUParams;

/// Clamped linear ramp between two domain points.
///
/// Evaluation at a domain endpoint returns the configured value bitwise;
/// inputs outside the domain return the nearer endpoint value when
/// `clamp` is set and extrapolate otherwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleSpec {
    pub domain_start: f64,
    pub domain_end: f64,
    pub value_start: f64,
    pub value_end: f64,
    pub clamp: bool,
}

impl ScheduleSpec {
    pub fn new(
        domain_start: f64,
        domain_end: f64,
        value_start: f64,
        value_end: f64,
        clamp: bool,
    ) -> Result<Self> {
        if ![domain_start, domain_end, value_start, value_end]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::InvalidSchedule("endpoints must be finite".into()));
        }
        if domain_start == domain_end {
            return Err(Error::InvalidSchedule(format!(
                "degenerate domain [{domain_start}, {domain_end}]"
            )));
        }
        Ok(ScheduleSpec {
            domain_start,
            domain_end,
            value_start,
            value_end,
            clamp,
        })
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "schedule evaluated at non-finite {x}"
            )));
        }
        if x == self.domain_start {
            return Ok(self.value_start);
        }
        if x == self.domain_end {
            return Ok(self.value_end);
        }
        if self.clamp {
            // The domain may run in either direction (980 -> 20 counts
            // down); clamp toward whichever endpoint is nearer.
            let forward = self.domain_start < self.domain_end;
            let (lo, lo_v, hi, hi_v) = if forward {
                (
                    self.domain_start,
                    self.value_start,
                    self.domain_end,
                    self.value_end,
                )
            } else {
                (
                    self.domain_end,
                    self.value_end,
                    self.domain_start,
                    self.value_start,
                )
            };
            if x < lo {
                return Ok(lo_v);
            }
            if x > hi {
                return Ok(hi_v);
            }
        }
        let u = (x - self.domain_start) / (self.domain_end - self.domain_start);
        Ok(self.value_start + (self.value_end - self.value_start) * u)
    }
}

/// Normalized timestep window that widens as optimization progresses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealRange {
    pub t_min: f64,
    pub t_max: f64,
}

/// Diffusion timestep endpoints of the dynamic FreeU ramp.
pub const FREEU_T_HIGH: f64 = 980.0;
pub const FREEU_T_LOW: f64 = 20.0;
/// `(b1, s1, b2, s2)` at the high-noise end of the ramp.
pub const FREEU_AT_T_HIGH: [f64; 4] = [0.6, 1.1, 0.4, 1.8];
/// `(b1, s1, b2, s2)` at the low-noise end.
pub const FREEU_AT_T_LOW: [f64; 4] = [1.4, 0.9, 1.6, 0.2];

/// FreeU factors for a diffusion timestep: each factor ramps linearly
/// over t in [980, 20] and clamps outside. Backbone factors sit below 1
/// at high noise and above 1 at low noise; skip factors run the other
/// way. `r_threshold` is not scheduled and passes through unchanged.
pub fn freeu_schedule(t: usize, r_threshold: f64) -> FreeUParams {
    let ramp = |hi: f64, lo: f64| {
        ScheduleSpec::new(FREEU_T_HIGH, FREEU_T_LOW, hi, lo, true)
            .expect("static endpoints")
            .eval(t as f64)
            .expect("t is finite")
    };
    FreeUParams {
        b1: ramp(FREEU_AT_T_HIGH[0], FREEU_AT_T_LOW[0]),
        s1: ramp(FREEU_AT_T_HIGH[1], FREEU_AT_T_LOW[1]),
        b2: ramp(FREEU_AT_T_HIGH[2], FREEU_AT_T_LOW[2]),
        s2: ramp(FREEU_AT_T_HIGH[3], FREEU_AT_T_LOW[3]),
        r_threshold,
    }
}

/// Guidance weight endpoints of the dynamic CFG ramp.
pub const CFG_W_START: f64 = 100.0;
pub const CFG_W_END: f64 = 10.0;

/// Guidance weight for an optimization iteration: linear from 100 at
/// iteration 1 down to 10 at `total_iters`, clamped outside.
pub fn cfg_schedule(iter: u64, total_iters: u64) -> Result<f64> {
    if total_iters < 2 {
        return Err(Error::InvalidSchedule(format!(
            "cfg schedule needs total_iters >= 2, got {total_iters}"
        )));
    }
    ScheduleSpec::new(1.0, total_iters as f64, CFG_W_START, CFG_W_END, true)?.eval(iter as f64)
}

/// Normalized annealing window endpoints.
pub const ANNEAL_START: AnnealRange = AnnealRange {
    t_min: 0.98,
    t_max: 0.98,
};
pub const ANNEAL_END: AnnealRange = AnnealRange {
    t_min: 0.02,
    t_max: 0.5,
};
/// Iterations over which the window expands; constant afterwards.
pub const ANNEAL_HORIZON: u64 = 8000;

/// Annealing window after `iter` iterations of an `horizon`-iteration
/// expansion. A zero horizon means the window is already fully open.
pub fn anneal_timestep_range_over(iter: u64, horizon: u64) -> AnnealRange {
    if horizon == 0 {
        return ANNEAL_END;
    }
    let ramp = |a: f64, b: f64| {
        ScheduleSpec::new(0.0, horizon as f64, a, b, true)
            .expect("static endpoints")
            .eval(iter as f64)
            .expect("iter is finite")
    };
    AnnealRange {
        t_min: ramp(ANNEAL_START.t_min, ANNEAL_END.t_min),
        t_max: ramp(ANNEAL_START.t_max, ANNEAL_END.t_max),
    }
}

/// [`anneal_timestep_range_over`] with the stock 8000-iteration horizon.
pub fn anneal_timestep_range(iter: u64) -> AnnealRange {
    anneal_timestep_range_over(iter, ANNEAL_HORIZON)
}

/// Draws a timestep index: u uniform in [t_min, t_max], mapped to
/// round(u * (T - 1)). Consumes exactly one f64 from the generator.
pub fn sample_timestep<R: Rng + ?Sized>(
    range: AnnealRange,
    rng: &mut R,
    t_count: usize,
) -> Result<usize> {
    if !(range.t_min > 0.0 && range.t_min <= range.t_max && range.t_max <= 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "anneal range ({}, {}) outside 0 < t_min <= t_max <= 1",
            range.t_min, range.t_max
        )));
    }
    if t_count < 2 {
        return Err(Error::InvalidSchedule(format!(
            "schedule length {t_count} below 2"
        )));
    }
    let u = range.t_min + (range.t_max - range.t_min) * rng.random::<f64>();
    let idx = (u * (t_count - 1) as f64).round() as usize;
    Ok(idx.min(t_count - 1))
}

/// Render resolution step schedule: `low` pixels per side before
/// `switch_iter`, `high` from `switch_iter` on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolutionSchedule {
    pub low: usize,
    pub high: usize,
    pub switch_iter: u64,
}

impl ResolutionSchedule {
    pub fn new(low: usize, high: usize, switch_iter: u64) -> Result<Self> {
        if low == 0 || high == 0 {
            return Err(Error::InvalidSchedule(format!(
                "resolutions must be positive, got {low} and {high}"
            )));
        }
        Ok(ResolutionSchedule {
            low,
            high,
            switch_iter,
        })
    }

    pub fn at(&self, iter: u64) -> usize {
        if iter < self.switch_iter {
            self.low
        } else {
            self.high
        }
    }
}
