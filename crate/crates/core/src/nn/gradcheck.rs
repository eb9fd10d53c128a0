//! Central finite-difference verification of analytic gradients (float64).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::param::{Grads, ParamStore};

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.groups.iter().filter(|g| !g.passed).map(|g| g.name.as_str()).collect()
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for g in &self.groups {
            writeln!(
                f,
                "{:<40} {:>6} checked  max rel err {:.3e}  {}",
                g.name,
                g.checked,
                g.max_rel_err,
                if g.passed { "ok" } else { "FAIL" }
            )?;
        }
        write!(f, "tolerance {:.1e}: {}", self.tolerance, if self.passed() { "PASS" } else { "FAIL" })
    }
}

/// Relative error with a small absolute floor so vanishing gradients do not
/// blow up the ratio.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares `analytic` with central differences of `loss` for every
/// parameter, one group per parameter name. At most `max_entries` randomly
/// chosen coordinates are probed per parameter.
pub fn grad_check(
    ps: &mut ParamStore<f64>,
    analytic: &Grads<f64>,
    mut loss: impl FnMut(&ParamStore<f64>) -> f64,
    tolerance: f64,
    max_entries: usize,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6a7d);
    let ids: Vec<_> = ps.iter().map(|(id, _)| id).collect();
    let mut groups = Vec::new();
    for id in ids {
        let len = ps.get(id).len();
        let picks: Vec<usize> = if len <= max_entries {
            (0..len).collect()
        } else {
            sample(&mut rng, len, max_entries).into_vec()
        };
        let mut worst = 0.0f64;
        for &i in &picks {
            let orig = ps.get(id)[i];
            ps.get_mut(id)[i] = orig + FD_STEP;
            let up = loss(ps);
            ps.get_mut(id)[i] = orig - FD_STEP;
            let down = loss(ps);
            ps.get_mut(id)[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.get(id)[i], numeric));
        }
        groups.push(GroupResult {
            name: ps.param(id).name.clone(),
            checked: picks.len(),
            max_rel_err: worst,
            passed: worst < tolerance,
        });
    }
    GradCheckReport { tolerance, groups }
}
