use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_AUTO_MULTIPLIER: f64 = 1.5;
pub const DEFAULT_AUTO_COOLDOWN: usize = 20;

fn default_multiplier() -> f64 {
    DEFAULT_AUTO_MULTIPLIER
}

fn default_cooldown() -> usize {
    DEFAULT_AUTO_COOLDOWN
}

fn default_max_raises() -> usize {
    usize::MAX
}

/// Learning rate as a function of the iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant {
        lr: f64,
    },
    /// Starts at `initial`; from iteration `steps[i].0` on the rate is `steps[i].1`.
    StepIncrease {
        initial: f64,
        steps: Vec<(usize, f64)>,
    },
    /// Triangular wave: `min` at multiples of `period`, `max` half way between.
    Cyclical {
        min: f64,
        max: f64,
        period: usize,
    },
    /// Starts at `initial`. Once a spike has re-descended below its pre-spike
    /// loss and `cooldown` more steps have passed, the rate is reset to
    /// `multiplier · η̃_crit` whenever that exceeds the current rate.
    AutoCatapult {
        initial: f64,
        #[serde(default = "default_multiplier")]
        multiplier: f64,
        #[serde(default = "default_cooldown")]
        cooldown: usize,
        #[serde(default = "default_max_raises")]
        max_raises: usize,
    },
}

impl Schedule {
    pub fn auto(initial: f64, max_raises: usize) -> Self {
        Schedule::AutoCatapult {
            initial,
            multiplier: DEFAULT_AUTO_MULTIPLIER,
            cooldown: DEFAULT_AUTO_COOLDOWN,
            max_raises,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("schedule.{field}"), format!("must be a positive finite rate, got {v}")))
            }
        };
        match self {
            Schedule::Constant { lr } => positive("lr", *lr),
            Schedule::StepIncrease { initial, steps } => {
                positive("initial", *initial)?;
                let mut last: Option<usize> = None;
                for &(it, lr) in steps {
                    positive("steps", lr)?;
                    if last.is_some_and(|l| it <= l) || it == 0 {
                        return Err(Error::config(
                            "schedule.steps",
                            "iterations must be positive and strictly increasing",
                        ));
                    }
                    last = Some(it);
                }
                Ok(())
            }
            Schedule::Cyclical { min, max, period } => {
                positive("min", *min)?;
                positive("max", *max)?;
                if min >= max {
                    return Err(Error::config("schedule.max", "need 0 < min < max"));
                }
                if *period < 2 {
                    return Err(Error::config("schedule.period", "must be >= 2"));
                }
                Ok(())
            }
            Schedule::AutoCatapult {
                initial, multiplier, ..
            } => {
                positive("initial", *initial)?;
                if !(*multiplier > 1.0 && multiplier.is_finite()) {
                    return Err(Error::config("schedule.multiplier", "must be > 1"));
                }
                Ok(())
            }
        }
    }

    pub fn initial_lr(&self) -> f64 {
        self.lr_at(0)
    }

    /// The scheduled rate at iteration `t`. For `AutoCatapult` this is only the
    /// starting rate; raises happen inside the training loop.
    pub fn lr_at(&self, t: usize) -> f64 {
        match self {
            Schedule::Constant { lr } => *lr,
            Schedule::StepIncrease { initial, steps } => {
                steps.iter().take_while(|(it, _)| *it <= t).last().map_or(*initial, |(_, lr)| *lr)
            }
            Schedule::Cyclical { min, max, period } => {
                let u = (t % period) as f64 / *period as f64;
                min + (max - min) * (1.0 - (2.0 * u - 1.0).abs())
            }
            Schedule::AutoCatapult { initial, .. } => *initial,
        }
    }

    /// Whether `t` begins a new piecewise-constant segment. Iteration 0 always
    /// does; cyclical schedules change every step and report only `t = 0`.
    pub fn is_change_point(&self, t: usize) -> bool {
        t == 0
            || match self {
                Schedule::StepIncrease { steps, .. } => steps.iter().any(|(it, _)| *it == t),
                _ => false,
            }
    }

    /// Iterations after 0 where the rate changes (`StepIncrease` only).
    pub fn pending_changes_after(&self, t: usize) -> bool {
        match self {
            Schedule::StepIncrease { steps, .. } => steps.iter().any(|(it, _)| *it > t),
            _ => false,
        }
    }

    /// Multiplies every rate by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        match self.clone() {
            Schedule::Constant { lr } => Schedule::Constant { lr: lr * c },
            Schedule::StepIncrease { initial, steps } => Schedule::StepIncrease {
                initial: initial * c,
                steps: steps.into_iter().map(|(it, lr)| (it, lr * c)).collect(),
            },
            Schedule::Cyclical { min, max, period } => Schedule::Cyclical {
                min: min * c,
                max: max * c,
                period,
            },
            Schedule::AutoCatapult {
                initial,
                multiplier,
                cooldown,
                max_raises,
            } => Schedule::AutoCatapult {
                initial: initial * c,
                multiplier,
                cooldown,
                max_raises,
            },
        }
    }
}
