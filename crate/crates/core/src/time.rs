use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MINUTES_PER_DAY: u32 = 24 * 60;

/// Discretised day: timestep `t` starts at minute `t * step_minutes`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeAxis {
    step_minutes: u32,
}

impl TimeAxis {
    pub fn new(step_minutes: u32) -> Result<Self> {
        if step_minutes == 0 || MINUTES_PER_DAY % step_minutes != 0 {
            return Err(Error::InvalidParameter(format!(
                "g_t = {step_minutes} must be positive and divide 1440"
            )));
        }
        Ok(Self { step_minutes })
    }

    pub fn step_minutes(&self) -> u32 {
        self.step_minutes
    }

    /// |T| = 1440 / g_t.
    pub fn num_steps(&self) -> u32 {
        MINUTES_PER_DAY / self.step_minutes
    }

    pub fn minute_of(&self, t: u32) -> u32 {
        t * self.step_minutes
    }

    pub fn contains(&self, t: u32) -> bool {
        t < self.num_steps()
    }

    /// Gap in minutes between two timesteps (`later - earlier`).
    pub fn gap_minutes(&self, earlier: u32, later: u32) -> u32 {
        (later - earlier) * self.step_minutes
    }

    /// Timesteps whose start minute falls in `[start, end)`.
    pub fn steps_in(&self, start_minute: u32, end_minute: u32) -> std::ops::Range<u32> {
        let first = start_minute.div_ceil(self.step_minutes);
        let last = end_minute.div_ceil(self.step_minutes).min(self.num_steps());
        first..last.max(first)
    }
}

/// Shorter-arc distance in hours between two minutes-of-day.
pub fn circular_hours(a_minute: f64, b_minute: f64) -> f64 {
    let day = MINUTES_PER_DAY as f64;
    let diff = (a_minute - b_minute).rem_euclid(day);
    diff.min(day - diff) / 60.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_divisor() {
        assert!(TimeAxis::new(7).is_err());
        assert!(TimeAxis::new(0).is_err());
        assert_eq!(TimeAxis::new(10).unwrap().num_steps(), 144);
        assert_eq!(TimeAxis::new(1440).unwrap().num_steps(), 1);
    }

    #[test]
    fn steps_in_hour() {
        let axis = TimeAxis::new(10).unwrap();
        assert_eq!(axis.steps_in(60, 120), 6..12);
        assert_eq!(axis.steps_in(1380, 1440), 138..144);
        let coarse = TimeAxis::new(480).unwrap();
        assert_eq!(coarse.steps_in(60, 120), 1..1);
    }

    #[test]
    fn circular_arc() {
        assert!((circular_hours(60.0, 1380.0) - 2.0).abs() < 1e-12);
        assert!((circular_hours(900.0, 1080.0) - 3.0).abs() < 1e-12);
        assert_eq!(circular_hours(0.0, 720.0), 12.0);
    }
}
