//! Instance packing under a fixed memory or CPU budget.
//!
//! Instances are launched `launch_gap_s` apart until the first launch that
//! would break the budget. A booting instance holds its peak memory for the
//! boot window; after that it holds its steady memory, less whatever the
//! page-merging scanner has reclaimed. Admission therefore sees the peaks of
//! everything still booting, which the scanner cannot shave.

use alloc::string::String;
use alloc::vec::Vec;
use core::time::Duration;

/// Timeline sample spacing.
pub const SAMPLE_INTERVAL: Duration = Duration::from_millis(100);
pub const DEFAULT_PAGE_SIZE_KB: f64 = 4.0;
pub const DEFAULT_LAUNCH_GAP_S: f64 = 0.1;
pub const DEFAULT_RUN_DURATION_S: f64 = 60.0;

/// Upper bound on simulated instances; anything beyond is treated as
/// unbounded.
pub const MAX_INSTANCES: usize = 1_000_000;

const REL_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BudgetError {
    #[error("profile `{name}`: {reason}")]
    Profile { name: String, reason: &'static str },
    #[error("budget: {0}")]
    Config(&'static str),
    #[error("profile `{0}` has zero demand, instance count is unbounded")]
    Unbounded(String),
    #[error("no profiles to compare")]
    NoProfiles,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ResourceProfile {
    pub name: String,
    pub image_size_mb: f64,
    pub deploy_time_s: f64,
    pub boot_exec_time_s: f64,
    pub mem_peak_mb: f64,
    pub mem_steady_mb: f64,
    /// Fraction of steady-state pages identical to pages elsewhere.
    pub shareable_page_fraction: f64,
    /// Fraction of merged pages re-dirtied per second.
    pub page_volatility: f64,
    /// Sustained demand in (fractional) cores.
    pub cpu_demand_cores: f64,
}

impl ResourceProfile {
    /// Profile with only timing set; memory and CPU are zero.
    pub fn uniform(name: &str, deploy_time_s: f64, boot_exec_time_s: f64) -> Self {
        Self {
            name: name.into(),
            image_size_mb: 0.0,
            deploy_time_s,
            boot_exec_time_s,
            mem_peak_mb: 0.0,
            mem_steady_mb: 0.0,
            shareable_page_fraction: 0.0,
            page_volatility: 0.0,
            cpu_demand_cores: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), BudgetError> {
        let bad = |reason| {
            Err(BudgetError::Profile {
                name: self.name.clone(),
                reason,
            })
        };
        let quantities = [
            self.image_size_mb,
            self.deploy_time_s,
            self.boot_exec_time_s,
            self.mem_peak_mb,
            self.mem_steady_mb,
            self.cpu_demand_cores,
        ];
        if quantities.iter().any(|q| !(q.is_finite() && *q >= 0.0)) {
            return bad("quantities must be finite and non-negative");
        }
        if self.mem_steady_mb > self.mem_peak_mb {
            return bad("mem_steady_mb exceeds mem_peak_mb");
        }
        if !(0.0..=1.0).contains(&self.shareable_page_fraction) {
            return bad("shareable_page_fraction must be within [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.page_volatility) {
            return bad("page_volatility must be within [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KsmModel {
    pub scan_rate_pages_per_s: f64,
    pub page_size_kb: f64,
}

impl KsmModel {
    pub fn new(scan_rate_pages_per_s: f64) -> Self {
        Self {
            scan_rate_pages_per_s,
            page_size_kb: DEFAULT_PAGE_SIZE_KB,
        }
    }

    fn pages_per_mb(&self) -> f64 {
        1024.0 / self.page_size_kb
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BudgetConfig {
    pub mem_budget_mb: f64,
    pub cpu_cap_fraction: f64,
    pub cores: f64,
    pub launch_gap_s: f64,
    pub run_duration_s: f64,
    /// How long a fresh instance holds its peak memory; defaults to the
    /// profile's `boot_exec_time_s`.
    pub boot_window_s: Option<f64>,
    pub ksm: Option<KsmModel>,
}

impl BudgetConfig {
    pub fn new(mem_budget_mb: f64, cpu_cap_fraction: f64, cores: f64) -> Self {
        Self {
            mem_budget_mb,
            cpu_cap_fraction,
            cores,
            launch_gap_s: DEFAULT_LAUNCH_GAP_S,
            run_duration_s: DEFAULT_RUN_DURATION_S,
            boot_window_s: None,
            ksm: None,
        }
    }

    pub fn cpu_capacity(&self) -> f64 {
        self.cpu_cap_fraction * self.cores
    }

    pub fn validate(&self) -> Result<(), BudgetError> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.mem_budget_mb) {
            return Err(BudgetError::Config("memory budget must be non-negative"));
        }
        if !(self.cpu_cap_fraction > 0.0 && self.cpu_cap_fraction <= 1.0) {
            return Err(BudgetError::Config("cpu cap must be within (0, 1]"));
        }
        if !(self.cores.is_finite() && self.cores > 0.0) {
            return Err(BudgetError::Config("cores must be positive"));
        }
        if !finite_nonneg(self.launch_gap_s) {
            return Err(BudgetError::Config("launch gap must be non-negative"));
        }
        if !finite_nonneg(self.run_duration_s) {
            return Err(BudgetError::Config("run duration must be non-negative"));
        }
        if self.boot_window_s.is_some_and(|b| !finite_nonneg(b)) {
            return Err(BudgetError::Config("boot window must be non-negative"));
        }
        if let Some(k) = &self.ksm {
            if !finite_nonneg(k.scan_rate_pages_per_s) {
                return Err(BudgetError::Config("scan rate must be non-negative"));
            }
            if !(k.page_size_kb.is_finite() && k.page_size_kb > 0.0) {
                return Err(BudgetError::Config("page size must be positive"));
            }
        }
        Ok(())
    }
}

/// Page counts tracked by the merging scanner.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KsmState {
    /// Pages eligible for merging across co-resident instances.
    pub shareable_pages: f64,
    pub merged_pages: f64,
}

/// Advances the scanner by `dt_s` seconds: first `volatility * dt_s` of the
/// merged pages are re-dirtied, then up to `scan_rate * dt_s` of the
/// remaining shareable pages are merged.
pub fn ksm_step(state: KsmState, model: &KsmModel, volatility: f64, dt_s: f64) -> KsmState {
    let redirtied = (volatility * dt_s).clamp(0.0, 1.0) * state.merged_pages;
    let kept = (state.merged_pages - redirtied).min(state.shareable_pages);
    let room = (state.shareable_pages - kept).max(0.0);
    let merged = kept + (model.scan_rate_pages_per_s * dt_s).min(room);
    KsmState {
        shareable_pages: state.shareable_pages,
        merged_pages: merged,
    }
}

/// Fixed point of [`ksm_step`]: every shareable page when nothing is
/// re-dirtied, otherwise where merging and re-dirtying balance.
pub fn ksm_steady_state(shareable_pages: f64, model: &KsmModel, volatility: f64) -> f64 {
    if volatility <= 0.0 {
        shareable_pages
    } else {
        (model.scan_rate_pages_per_s / volatility).min(shareable_pages)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MemorySample {
    pub t_s: f64,
    pub total_mb: f64,
    pub booting: usize,
    pub running: usize,
    pub merged_mb: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryRun {
    pub instance_count: usize,
    /// When the first launch was refused, if one was.
    pub denied_at: Option<Duration>,
    pub timeline: Vec<MemorySample>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CpuSample {
    pub t_s: f64,
    pub instances: usize,
    pub used_cores: f64,
    /// Share of all cores in use.
    pub utilization: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpuRun {
    pub instance_count: usize,
    pub denied_at: Option<Duration>,
    pub timeline: Vec<CpuSample>,
}

fn fits(used: f64, capacity: f64) -> bool {
    used <= capacity * (1.0 + REL_EPS)
}

/// Interleaves launch attempts (every `gap`) and timeline samples (every
/// [`SAMPLE_INTERVAL`]) up to `horizon`; launches go first on ties. `launch`
/// returns false to end the launch sequence.
fn drive(
    gap: Duration,
    horizon: Duration,
    mut launch: impl FnMut(Duration) -> Result<bool, BudgetError>,
    mut sample: impl FnMut(Duration),
) -> Result<(), BudgetError> {
    let mut next_launch = Some(Duration::ZERO);
    let mut next_sample = Duration::ZERO;
    loop {
        match next_launch {
            Some(t) if t <= next_sample && t <= horizon => {
                next_launch = if launch(t)? { Some(t + gap) } else { None };
            }
            _ if next_sample <= horizon => {
                sample(next_sample);
                next_sample += SAMPLE_INTERVAL;
            }
            _ => return Ok(()),
        }
    }
}

fn secs(v: f64) -> Duration {
    Duration::from_secs_f64(v)
}

pub fn simulate_memory_budget(profile: &ResourceProfile, budget: &BudgetConfig) -> Result<MemoryRun, BudgetError> {
    profile.validate()?;
    budget.validate()?;
    if profile.mem_peak_mb <= 0.0 {
        return Err(BudgetError::Unbounded(profile.name.clone()));
    }
    let boot = secs(budget.boot_window_s.unwrap_or(profile.boot_exec_time_s));
    let dt = SAMPLE_INTERVAL.as_secs_f64();
    let shareable_mb = profile.mem_steady_mb * profile.shareable_page_fraction;

    let mut launches: Vec<Duration> = Vec::new();
    let mut ksm = KsmState::default();
    let mut denied_at = None;
    let mut timeline = Vec::new();

    // (booting, running) at time t
    let census = |launches: &[Duration], t: Duration| {
        let booting = launches.iter().filter(|&&l| t < l + boot).count();
        (booting, launches.len() - booting)
    };
    let usage = |booting: usize, running: usize, merged_mb: f64| {
        booting as f64 * profile.mem_peak_mb + running as f64 * profile.mem_steady_mb - merged_mb
    };
    let merged_mb = |ksm: &KsmState| match &budget.ksm {
        Some(k) => ksm.merged_pages / k.pages_per_mb(),
        None => 0.0,
    };

    let launches_ref = core::cell::RefCell::new(&mut launches);
    let ksm_ref = core::cell::RefCell::new(&mut ksm);
    drive(
        secs(budget.launch_gap_s),
        secs(budget.run_duration_s),
        |t| {
            let mut launches = launches_ref.borrow_mut();
            let (b, r) = census(&launches, t);
            let now = usage(b, r, merged_mb(&ksm_ref.borrow()));
            if fits(now + profile.mem_peak_mb, budget.mem_budget_mb) {
                if launches.len() >= MAX_INSTANCES {
                    return Err(BudgetError::Unbounded(profile.name.clone()));
                }
                launches.push(t);
                Ok(true)
            } else {
                denied_at = Some(t);
                Ok(false)
            }
        },
        |t| {
            let launches = launches_ref.borrow();
            let (b, r) = census(&launches, t);
            let mut ksm = ksm_ref.borrow_mut();
            if let Some(model) = &budget.ksm {
                ksm.shareable_pages = r as f64 * shareable_mb * model.pages_per_mb();
                if t > Duration::ZERO {
                    **ksm = ksm_step(**ksm, model, profile.page_volatility, dt);
                }
            }
            let m = merged_mb(&ksm);
            timeline.push(MemorySample {
                t_s: t.as_secs_f64(),
                total_mb: usage(b, r, m),
                booting: b,
                running: r,
                merged_mb: m,
            });
        },
    )?;

    Ok(MemoryRun {
        instance_count: launches.len(),
        denied_at,
        timeline,
    })
}

pub fn simulate_cpu_budget(profile: &ResourceProfile, budget: &BudgetConfig) -> Result<CpuRun, BudgetError> {
    profile.validate()?;
    budget.validate()?;
    let demand = profile.cpu_demand_cores;
    if demand <= 0.0 {
        return Err(BudgetError::Unbounded(profile.name.clone()));
    }
    let capacity = budget.cpu_capacity();
    let mut count = 0usize;
    let mut denied_at = None;
    let mut launched_at: Vec<Duration> = Vec::new();
    let mut timeline = Vec::new();
    let launched = core::cell::RefCell::new(&mut launched_at);

    drive(
        secs(budget.launch_gap_s),
        secs(budget.run_duration_s),
        |t| {
            if fits((count + 1) as f64 * demand, capacity) {
                if count >= MAX_INSTANCES {
                    return Err(BudgetError::Unbounded(profile.name.clone()));
                }
                count += 1;
                launched.borrow_mut().push(t);
                Ok(true)
            } else {
                denied_at = Some(t);
                Ok(false)
            }
        },
        |t| {
            let n = launched.borrow().iter().filter(|&&l| l <= t).count();
            let used = n as f64 * demand;
            timeline.push(CpuSample {
                t_s: t.as_secs_f64(),
                instances: n,
                used_cores: used,
                utilization: used / budget.cores,
            });
        },
    )?;

    Ok(CpuRun {
        instance_count: launched_at.len(),
        denied_at,
        timeline,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum BudgetResource {
    Memory,
    Cpu,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProfileCount {
    pub profile: String,
    pub instance_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CountRatio {
    pub numerator: String,
    pub denominator: String,
    /// `None` when the denominator admitted no instances.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ComparisonReport {
    pub resource: BudgetResource,
    pub counts: Vec<ProfileCount>,
    /// Every ordered pair, self-pairs included.
    pub ratios: Vec<CountRatio>,
}

impl ComparisonReport {
    pub fn ratio(&self, numerator: &str, denominator: &str) -> Option<f64> {
        self.ratios
            .iter()
            .find(|r| r.numerator == numerator && r.denominator == denominator)
            .and_then(|r| r.ratio)
    }

    pub fn count(&self, profile: &str) -> Option<usize> {
        self.counts
            .iter()
            .find(|c| c.profile == profile)
            .map(|c| c.instance_count)
    }
}

pub fn compare_profiles(
    profiles: &[ResourceProfile],
    budget: &BudgetConfig,
    resource: BudgetResource,
) -> Result<ComparisonReport, BudgetError> {
    if profiles.is_empty() {
        return Err(BudgetError::NoProfiles);
    }
    let counts = profiles
        .iter()
        .map(|p| {
            let n = match resource {
                BudgetResource::Memory => simulate_memory_budget(p, budget)?.instance_count,
                BudgetResource::Cpu => simulate_cpu_budget(p, budget)?.instance_count,
            };
            Ok(ProfileCount {
                profile: p.name.clone(),
                instance_count: n,
            })
        })
        .collect::<Result<Vec<_>, BudgetError>>()?;
    let ratios = counts
        .iter()
        .flat_map(|a| {
            counts.iter().map(move |b| CountRatio {
                numerator: a.profile.clone(),
                denominator: b.profile.clone(),
                ratio: (b.instance_count > 0).then(|| a.instance_count as f64 / b.instance_count as f64),
            })
        })
        .collect();
    Ok(ComparisonReport {
        resource,
        counts,
        ratios,
    })
}
