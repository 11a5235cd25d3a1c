//! Analytic ground-truth gas fields, a noisy point sensor and sweep driving.
//!
//! Each source emits an advected Gaussian plume: spread grows linearly with
//! downwind distance, the ground (world `z = 0`) reflects, and the upwind side
//! decays on the source scale `σ0`. Occupied voxels hold zero; points without
//! line of sight to a source receive nothing from it.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Measurement;
use crate::occupancy::{OccupancyError, VoxelGrid};

#[derive(Debug, Error)]
pub enum PlumeError {
    #[error(transparent)]
    Occupancy(#[from] OccupancyError),
    #[error("invalid field: {0}")]
    Invalid(String),
    #[error("measurement sink failed: {0}")]
    Sink(String),
}

/// Strength takes `strength` from time `t` onwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrengthStep {
    pub t: f64,
    pub strength: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Source {
    pub position: [f64; 3],
    pub strength: f64,
    /// Piecewise-constant strength changes, sorted by time.
    #[serde(default)]
    pub schedule: Vec<StrengthStep>,
}

impl Source {
    pub fn strength_at(&self, t: f64) -> f64 {
        self.schedule
            .iter()
            .take_while(|s| s.t <= t)
            .last()
            .map_or(self.strength, |s| s.strength)
    }
}

/// Spread `σ(d) = sigma0 + a·d` at downwind distance `d`, per axis group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Dispersion {
    pub sigma0: f64,
    pub a_horizontal: f64,
    pub a_vertical: f64,
}

impl Default for Dispersion {
    fn default() -> Self {
        Self {
            sigma0: 0.5,
            a_horizontal: 0.25,
            a_vertical: 0.15,
        }
    }
}

const MIN_WIND: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct GroundTruthField {
    pub sources: Vec<Source>,
    pub wind: [f64; 2],
    pub dispersion: Dispersion,
    pub grid: VoxelGrid,
    pub background: f64,
}

impl GroundTruthField {
    pub fn new(
        sources: Vec<Source>,
        wind: [f64; 2],
        dispersion: Dispersion,
        grid: VoxelGrid,
        background: f64,
    ) -> Result<Self, PlumeError> {
        if !(dispersion.sigma0 > 0.0) || dispersion.a_horizontal < 0.0 || dispersion.a_vertical < 0.0 {
            return Err(PlumeError::Invalid("dispersion needs sigma0 > 0 and non-negative growth".into()));
        }
        if !(background >= 0.0) {
            return Err(PlumeError::Invalid("background must be >= 0".into()));
        }
        for s in &sources {
            if !grid.contains_point(s.position) {
                return Err(PlumeError::Invalid(format!("source at {:?} lies outside the grid", s.position)));
            }
            if s.strength < 0.0 || s.schedule.iter().any(|x| x.strength < 0.0) {
                return Err(PlumeError::Invalid("source strength must be >= 0".into()));
            }
        }
        Ok(Self {
            sources,
            wind,
            dispersion,
            grid,
            background,
        })
    }

    fn kernel(&self, s: &Source, strength: f64, p: [f64; 3]) -> f64 {
        let speed = self.wind[0].hypot(self.wind[1]).max(MIN_WIND);
        let (ux, uy) = if self.wind[0].hypot(self.wind[1]) > 0.0 {
            let n = self.wind[0].hypot(self.wind[1]);
            (self.wind[0] / n, self.wind[1] / n)
        } else {
            (1.0, 0.0)
        };
        let dx = p[0] - s.position[0];
        let dy = p[1] - s.position[1];
        let down = dx * ux + dy * uy;
        let cross = -dx * uy + dy * ux;
        let d = self.dispersion;
        let along = down.max(0.0);
        let sh = d.sigma0 + d.a_horizontal * along;
        let sv = d.sigma0 + d.a_vertical * along;
        let zs = s.position[2];
        let vertical = (-(p[2] - zs).powi(2) / (2.0 * sv * sv)).exp() + (-(p[2] + zs).powi(2) / (2.0 * sv * sv)).exp();
        let upwind = if down < 0.0 {
            (-down * down / (2.0 * d.sigma0 * d.sigma0)).exp()
        } else {
            1.0
        };
        strength / (2.0 * std::f64::consts::PI * speed * sh * sv)
            * (-cross * cross / (2.0 * sh * sh)).exp()
            * vertical
            * upwind
    }

    /// Segment from `a` to `b` crosses no occupied voxel.
    fn line_of_sight(&self, a: [f64; 3], b: [f64; 3]) -> bool {
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt();
        let steps = (len / (0.25 * self.grid.resolution())).ceil() as usize;
        (0..=steps).all(|k| {
            let f = if steps == 0 { 0.0 } else { k as f64 / steps as f64 };
            let q = [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1]), a[2] + f * (b[2] - a[2])];
            match self.grid.voxel_of(q) {
                Ok(v) => self.grid.is_free(v),
                Err(_) => true,
            }
        })
    }

    /// Concentration at `p` with every source at its base strength.
    pub fn concentration_at(&self, p: [f64; 3]) -> Result<f64, PlumeError> {
        self.eval(p, None)
    }

    /// Concentration at `p` with source strengths at time `t`.
    pub fn concentration_at_time(&self, p: [f64; 3], t: f64) -> Result<f64, PlumeError> {
        self.eval(p, Some(t))
    }

    fn eval(&self, p: [f64; 3], t: Option<f64>) -> Result<f64, PlumeError> {
        let v = self.grid.voxel_of(p)?;
        if !self.grid.is_free(v) {
            return Ok(0.0);
        }
        let mut c = self.background;
        for s in &self.sources {
            let strength = t.map_or(s.strength, |t| s.strength_at(t));
            if strength == 0.0 || !self.line_of_sight(s.position, p) {
                continue;
            }
            c += self.kernel(s, strength, p);
        }
        Ok(c)
    }

    /// Concentration at every voxel centre in linear grid order.
    pub fn voxel_values(&self, t: Option<f64>) -> Vec<f64> {
        (0..self.grid.len())
            .map(|i| {
                let v = self.grid.voxel_at(i);
                self.eval(self.grid.world_of(v), t).expect("voxel centre is inside the grid")
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorModel {
    pub noise_sd: f64,
    pub rate_hz: f64,
    /// First-order lag time constant in seconds; zero disables the lag.
    pub lag_tau: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        Self {
            noise_sd: 0.05,
            rate_hz: 2.0,
            lag_tau: 0.0,
        }
    }
}

/// A seeded sensor instance carrying its lag state.
#[derive(Clone, Debug)]
pub struct Sensor {
    pub model: SensorModel,
    rng: ChaCha8Rng,
    state: Option<(f64, f64)>,
}

impl Sensor {
    pub fn new(model: SensorModel, seed: u64) -> Self {
        Self {
            model,
            rng: ChaCha8Rng::seed_from_u64(seed),
            state: None,
        }
    }

    /// Lagged, noisy reading at `p` and time `t`, clamped at zero.
    pub fn sample(&mut self, field: &GroundTruthField, p: [f64; 3], t: f64) -> Result<Measurement, PlumeError> {
        let truth = field.concentration_at_time(p, t)?;
        let voxel = field.grid.voxel_of(p)?;
        let lagged = match self.state {
            Some((prev, t_prev)) if self.model.lag_tau > 0.0 => {
                let k = 1.0 - (-(t - t_prev).max(0.0) / self.model.lag_tau).exp();
                prev + k * (truth - prev)
            }
            _ => truth,
        };
        self.state = Some((lagged, t));
        let noise = if self.model.noise_sd > 0.0 {
            Normal::new(0.0, self.model.noise_sd)
                .map_err(|e| PlumeError::Invalid(e.to_string()))?
                .sample(&mut self.rng)
        } else {
            0.0
        };
        Ok(Measurement::new((lagged + noise).max(0.0), t, voxel))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub waypoints: Vec<[f64; 3]>,
    /// Metres per second.
    pub speed: f64,
    /// Take sensor-rate readings while travelling between waypoints.
    pub en_route: bool,
}

impl SweepPlan {
    /// Boustrophedon lanes along x, stepping `spacing` in y, at height `z`.
    /// Waypoints are placed every `spacing` along each lane.
    pub fn lawnmower(x: (f64, f64), y: (f64, f64), spacing: f64, z: f64, speed: f64) -> Self {
        Self::sawtooth(x, y, spacing, &[z], speed)
    }

    /// Like [`lawnmower`](Self::lawnmower), with the waypoint height cycling
    /// up and down through `z_levels`.
    pub fn sawtooth(x: (f64, f64), y: (f64, f64), spacing: f64, z_levels: &[f64], speed: f64) -> Self {
        let steps = |lo: f64, hi: f64| -> Vec<f64> {
            let n = ((hi - lo) / spacing).floor().max(0.0) as usize;
            (0..=n).map(|k| lo + k as f64 * spacing).collect()
        };
        let cycle: Vec<f64> = if z_levels.len() > 1 {
            z_levels.iter().chain(z_levels[1..z_levels.len() - 1].iter().rev()).copied().collect()
        } else {
            z_levels.to_vec()
        };
        let mut waypoints = Vec::new();
        let mut k = 0usize;
        for (lane, yv) in steps(y.0, y.1).into_iter().enumerate() {
            let mut xs = steps(x.0, x.1);
            if lane % 2 == 1 {
                xs.reverse();
            }
            for xv in xs {
                let z = if cycle.is_empty() { 0.0 } else { cycle[k % cycle.len()] };
                waypoints.push([xv, yv, z]);
                k += 1;
            }
        }
        Self {
            waypoints,
            speed,
            en_route: true,
        }
    }
}

/// Consumer of a measurement stream under the gating rule.
pub trait MeasurementSink {
    /// Takes a measurement at time `m.timestamp`. Returns the simulated
    /// seconds until it counts as resolved.
    fn insert(&mut self, m: Measurement) -> Result<f64, PlumeError>;

    /// The solver has been idle since its last resolve and simulated time
    /// advances to `t`.
    fn idle_until(&mut self, _t: f64) -> Result<(), PlumeError> {
        Ok(())
    }
}

/// Sink that resolves every measurement instantly.
#[derive(Clone, Debug, Default)]
pub struct InstantSink;

impl MeasurementSink for InstantSink {
    fn insert(&mut self, _m: Measurement) -> Result<f64, PlumeError> {
        Ok(0.0)
    }
}

/// Sink with a fixed resolve time per measurement.
#[derive(Clone, Debug)]
pub struct FixedDelaySink(pub f64);

impl MeasurementSink for FixedDelaySink {
    fn insert(&mut self, _m: Measurement) -> Result<f64, PlumeError> {
        Ok(self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Waypoint,
    EnRoute,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepEvent {
    pub position: [f64; 3],
    pub measurement: Measurement,
    pub kind: SampleKind,
    /// Passed to the sink; `false` means dropped because the solver was busy.
    pub accepted: bool,
    /// Simulated resolve time, for accepted samples.
    pub resolve_s: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SweepLog {
    pub events: Vec<SweepEvent>,
    pub end_time: f64,
    pub skipped_waypoints: usize,
}

impl SweepLog {
    pub fn accepted(&self) -> impl Iterator<Item = &SweepEvent> {
        self.events.iter().filter(|e| e.accepted)
    }

    pub fn processed(&self) -> usize {
        self.accepted().count()
    }

    pub fn dropped(&self) -> usize {
        self.events.len() - self.processed()
    }
}

/// Flies `plan`, sampling with `sensor` and feeding `sink`.
///
/// En-route readings fall on the sensor clock `k / rate`; any reading taken
/// while the sink is still resolving is dropped. At a waypoint the vehicle
/// waits until the previous reading is resolved, samples and moves on.
/// Waypoints inside obstacles are skipped, as are en-route points inside
/// obstacles. The sweep ends once the last reading is resolved.
pub fn run_sweep(
    plan: &SweepPlan,
    field: &GroundTruthField,
    sensor: &mut Sensor,
    sink: &mut dyn MeasurementSink,
) -> Result<SweepLog, PlumeError> {
    let mut log = SweepLog::default();
    let grid = &field.grid;
    let usable = |p: [f64; 3]| grid.voxel_of(p).map(|v| grid.is_free(v)).unwrap_or(false);
    let waypoints: Vec<[f64; 3]> = plan
        .waypoints
        .iter()
        .copied()
        .filter(|&p| {
            let ok = usable(p);
            if !ok {
                warn!("skipping unreachable waypoint {p:?}");
                log.skipped_waypoints += 1;
            }
            ok
        })
        .collect();
    if waypoints.is_empty() {
        return Ok(log);
    }
    if !(plan.speed > 0.0) {
        return Err(PlumeError::Invalid("sweep speed must be positive".into()));
    }
    let period = 1.0 / sensor.model.rate_hz;
    let mut t = 0.0f64;
    let mut busy_until = 0.0f64;
    let mut tick = 1u64;

    let mut take = |p: [f64; 3], at: f64, kind: SampleKind, busy_until: &mut f64, log: &mut SweepLog| {
        let m = sensor.sample(field, p, at)?;
        let accepted = at >= *busy_until;
        let mut resolve_s = None;
        if accepted {
            sink.idle_until(at)?;
            let r = sink.insert(m)?;
            *busy_until = at + r;
            resolve_s = Some(r);
        }
        log.events.push(SweepEvent {
            position: p,
            measurement: m,
            kind,
            accepted,
            resolve_s,
        });
        Ok::<(), PlumeError>(())
    };

    for (i, &wp) in waypoints.iter().enumerate() {
        if i > 0 {
            let from = waypoints[i - 1];
            let dist = ((wp[0] - from[0]).powi(2) + (wp[1] - from[1]).powi(2) + (wp[2] - from[2]).powi(2)).sqrt();
            let arrive = t + dist / plan.speed;
            while (tick as f64) * period < arrive {
                let at = tick as f64 * period;
                tick += 1;
                if at <= t || !plan.en_route {
                    continue;
                }
                let f = (at - t) / (arrive - t);
                let p = [
                    from[0] + f * (wp[0] - from[0]),
                    from[1] + f * (wp[1] - from[1]),
                    from[2] + f * (wp[2] - from[2]),
                ];
                if usable(p) {
                    take(p, at, SampleKind::EnRoute, &mut busy_until, &mut log)?;
                }
            }
            t = arrive;
        }
        t = t.max(busy_until);
        take(wp, t, SampleKind::Waypoint, &mut busy_until, &mut log)?;
        while (tick as f64) * period <= t {
            tick += 1;
        }
    }
    t = t.max(busy_until);
    sink.idle_until(t)?;
    log.end_time = t;
    Ok(log)
}
