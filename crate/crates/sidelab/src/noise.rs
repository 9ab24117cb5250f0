//! Reproducible noise: truncated Wiener modes and exact-time Poisson jump
//! streams over finite atomic mark spaces.
//!
//! Every random quantity is drawn from a counter-based substream keyed by
//! (seed, path, stream), so realizations are identical across runs and
//! worker counts, and independent paths can be sampled in any order. Jump
//! times are kept exactly (exponential inter-arrivals, no binning); the
//! compensator of a stream with mark weights w is t * sum_z w(z) mass(z).

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use crate::error::{Error, Result};

/// Finite atomic measure: labelled atoms with positive masses.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkSpace {
    labels: Vec<String>,
    weights: Vec<f64>,
}

impl MarkSpace {
    pub fn new(labels: Vec<String>, weights: Vec<f64>) -> Result<Self> {
        if labels.len() != weights.len() {
            return Err(Error::config("mark labels and weights differ in length"));
        }
        for l in &labels {
            if l.is_empty() || l.contains([',', '=', '\n']) {
                return Err(Error::config(format!("bad mark label {l:?}")));
            }
        }
        if weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(Error::config("mark weights must be finite and positive"));
        }
        Ok(MarkSpace { labels, weights })
    }

    /// `count` atoms sharing `total_mass` equally, labelled z0, z1, ...
    pub fn uniform(count: usize, total_mass: f64) -> Result<Self> {
        let labels = (0..count).map(|i| format!("z{i}")).collect();
        let weights = vec![total_mass / count.max(1) as f64; count];
        MarkSpace::new(labels, weights)
    }

    /// The empty measure (no atoms, never jumps).
    pub fn empty() -> Self {
        MarkSpace {
            labels: Vec::new(),
            weights: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, mark: usize) -> &str {
        &self.labels[mark]
    }

    pub fn weight(&self, mark: usize) -> f64 {
        self.weights[mark]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Uniform partition of [0, t_end] into `steps` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_end: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, steps: usize) -> Result<Self> {
        if !t_end.is_finite() || t_end <= 0.0 {
            return Err(Error::config(format!("horizon must be positive, got {t_end}")));
        }
        if steps == 0 {
            return Err(Error::config("need at least one time step"));
        }
        Ok(TimeGrid { t_end, steps })
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.steps as f64
    }

    /// Boundary time of step `k`; exact at both ends.
    pub fn t(&self, k: usize) -> f64 {
        self.t_end * (k as f64 / self.steps as f64)
    }
}

/// One exact-time jump: when, and which atom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpEvent {
    pub time: f64,
    pub mark: usize,
}

/// Time-ordered jump events of one point process.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct JumpStream {
    pub events: Vec<JumpEvent>,
}

impl JumpStream {
    /// Events with time in (t0, t1].
    pub fn events_in(&self, t0: f64, t1: f64) -> &[JumpEvent] {
        let a = self.events.partition_point(|e| e.time <= t0);
        let b = self.events.partition_point(|e| e.time <= t1);
        &self.events[a..b]
    }
}

/// Independent N(0, dt) increments, step-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WienerIncrements {
    modes: usize,
    steps: usize,
    dw: Vec<f64>,
}

impl WienerIncrements {
    /// Step-major raw increments: `dw[step * modes + mode]`.
    pub fn from_values(modes: usize, steps: usize, dw: Vec<f64>) -> Result<WienerIncrements> {
        if dw.len() != modes * steps {
            return Err(Error::config(format!(
                "expected {} increments for {modes} modes over {steps} steps, got {}",
                modes * steps,
                dw.len()
            )));
        }
        if dw.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite Wiener increment"));
        }
        Ok(WienerIncrements { modes, steps, dw })
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dw(&self, step: usize, mode: usize) -> f64 {
        self.dw[step * self.modes + mode]
    }

    /// Sums groups of `factor` consecutive increments, producing the same
    /// Wiener path on a coarser time grid (for strong-refinement studies).
    pub fn coarsen(&self, factor: usize) -> Result<WienerIncrements> {
        if factor == 0 || self.steps % factor != 0 {
            return Err(Error::config(format!(
                "cannot coarsen {} steps by a factor of {factor}",
                self.steps
            )));
        }
        let steps = self.steps / factor;
        let mut dw = vec![0.0; steps * self.modes];
        for s in 0..self.steps {
            for m in 0..self.modes {
                dw[(s / factor) * self.modes + m] += self.dw(s, m);
            }
        }
        Ok(WienerIncrements {
            modes: self.modes,
            steps,
            dw,
        })
    }
}

/// A full driving-noise realization for one path.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRealization {
    pub seed: u64,
    pub path: u64,
    pub time: TimeGrid,
    pub wiener: WienerIncrements,
    pub mark_spaces: Vec<MarkSpace>,
    pub streams: Vec<JumpStream>,
}

/// Substream ids: 0 is the Wiener block, 1 + i the i-th jump stream.
const STREAMS_PER_PATH: u64 = 64;

pub(crate) fn substream(seed: u64, path: u64, kind: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path * STREAMS_PER_PATH + kind);
    rng
}

impl NoiseRealization {
    /// Samples the realization for (`seed`, `path`): `modes` Wiener modes on
    /// `time`, plus one jump stream per mark space.
    pub fn sample(
        time: TimeGrid,
        modes: usize,
        mark_spaces: &[MarkSpace],
        seed: u64,
        path: u64,
    ) -> Result<NoiseRealization> {
        if mark_spaces.len() as u64 + 1 > STREAMS_PER_PATH {
            return Err(Error::config("too many jump streams"));
        }
        let sqrt_dt = time.dt().sqrt();
        let mut rng = substream(seed, path, 0);
        let mut dw = Vec::with_capacity(time.steps() * modes);
        for _ in 0..time.steps() * modes {
            let z: f64 = StandardNormal.sample(&mut rng);
            dw.push(z * sqrt_dt);
        }
        let wiener = WienerIncrements {
            modes,
            steps: time.steps(),
            dw,
        };
        let mut streams = Vec::with_capacity(mark_spaces.len());
        for (i, marks) in mark_spaces.iter().enumerate() {
            streams.push(sample_stream(marks, time.t_end(), substream(seed, path, 1 + i as u64)));
        }
        Ok(NoiseRealization {
            seed,
            path,
            time,
            wiener,
            mark_spaces: mark_spaces.to_vec(),
            streams,
        })
    }

    pub fn stream(&self, i: usize) -> &JumpStream {
        &self.streams[i]
    }

    /// Writes a replayable textual dump: a header carrying everything needed
    /// to regenerate the Wiener block, then one `stream,time,mark` row per
    /// jump event.
    pub fn dump_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(
            w,
            "# seed={} path={} modes={} steps={} t_end={}",
            self.seed,
            self.path,
            self.wiener.modes(),
            self.time.steps(),
            self.time.t_end()
        )?;
        for (i, marks) in self.mark_spaces.iter().enumerate() {
            let atoms: Vec<String> = (0..marks.len())
                .map(|z| format!("{}={}", marks.label(z), marks.weight(z)))
                .collect();
            writeln!(w, "# marks{i} {}", atoms.join(","))?;
        }
        writeln!(w, "stream,time,mark")?;
        for (i, s) in self.streams.iter().enumerate() {
            for e in &s.events {
                writeln!(w, "{i},{},{}", e.time, e.mark)?;
            }
        }
        Ok(())
    }

    /// Reads a dump written by [`dump_csv`](Self::dump_csv) back into an
    /// identical realization (the Wiener block is regenerated from the seed).
    pub fn load_csv<R: BufRead>(r: R) -> Result<NoiseRealization> {
        let mut seed = None;
        let mut path = None;
        let mut modes = None;
        let mut steps = None;
        let mut t_end = None;
        let mut mark_spaces: Vec<MarkSpace> = Vec::new();
        let mut events: Vec<(usize, JumpEvent)> = Vec::new();
        let bad = |l: &str| Error::Parse(format!("bad noise dump line: {l}"));
        for line in r.lines() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t == "stream,time,mark" {
                continue;
            }
            if let Some(rest) = t.strip_prefix("# marks") {
                let (_, atoms) = rest.split_once(' ').ok_or_else(|| bad(t))?;
                let mut labels = Vec::new();
                let mut weights = Vec::new();
                if !atoms.is_empty() {
                    for atom in atoms.split(',') {
                        let (l, w) = atom.split_once('=').ok_or_else(|| bad(t))?;
                        labels.push(l.to_string());
                        weights.push(w.parse().map_err(|_| bad(t))?);
                    }
                }
                mark_spaces.push(MarkSpace::new(labels, weights)?);
            } else if let Some(rest) = t.strip_prefix("# ") {
                for kv in rest.split_whitespace() {
                    let (k, v) = kv.split_once('=').ok_or_else(|| bad(t))?;
                    match k {
                        "seed" => seed = Some(v.parse().map_err(|_| bad(t))?),
                        "path" => path = Some(v.parse().map_err(|_| bad(t))?),
                        "modes" => modes = Some(v.parse().map_err(|_| bad(t))?),
                        "steps" => steps = Some(v.parse().map_err(|_| bad(t))?),
                        "t_end" => t_end = Some(v.parse().map_err(|_| bad(t))?),
                        _ => return Err(bad(t)),
                    }
                }
            } else {
                let mut parts = t.split(',');
                let stream: usize = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad(t))?;
                let time: f64 = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad(t))?;
                let mark: usize = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad(t))?;
                events.push((stream, JumpEvent { time, mark }));
            }
        }
        let (seed, path, modes, steps, t_end) = match (seed, path, modes, steps, t_end) {
            (Some(a), Some(b), Some(c), Some(d), Some(e)) => (a, b, c, d, e),
            _ => return Err(Error::Parse("noise dump header incomplete".into())),
        };
        let mut out = NoiseRealization::sample(
            TimeGrid::new(t_end, steps)?,
            modes,
            &mark_spaces,
            seed,
            path,
        )?;
        let mut streams = vec![JumpStream::default(); mark_spaces.len()];
        for (i, e) in events {
            if i >= streams.len() {
                return Err(Error::Parse(format!("event for unknown stream {i}")));
            }
            streams[i].events.push(e);
        }
        out.streams = streams;
        Ok(out)
    }
}

fn sample_stream(marks: &MarkSpace, t_end: f64, mut rng: ChaCha8Rng) -> JumpStream {
    let rate = marks.total_mass();
    let mut events = Vec::new();
    if rate > 0.0 {
        let exp = Exp::new(rate).expect("positive rate");
        let mut t = 0.0;
        loop {
            t += exp.sample(&mut rng);
            if t > t_end {
                break;
            }
            let mut u: f64 = rng.gen::<f64>() * rate;
            let mut mark = marks.len() - 1;
            for z in 0..marks.len() {
                u -= marks.weight(z);
                if u < 0.0 {
                    mark = z;
                    break;
                }
            }
            events.push(JumpEvent { time: t, mark });
        }
    }
    JumpStream { events }
}

/// Path of the compensated sum int w d(N - compensator) evaluated at the step
/// boundaries of `time`: value at t is sum_{events <= t} w(mark) minus
/// t * sum_z w(z) mass(z).
pub fn compensated_integral(
    stream: &JumpStream,
    marks: &MarkSpace,
    weight: &[f64],
    time: &TimeGrid,
) -> Result<Vec<f64>> {
    if weight.len() != marks.len() {
        return Err(Error::config("one weight per mark required"));
    }
    let drift: f64 = (0..marks.len()).map(|z| weight[z] * marks.weight(z)).sum();
    let mut out = Vec::with_capacity(time.steps() + 1);
    let mut jump_sum = 0.0;
    let mut next = 0usize;
    for k in 0..=time.steps() {
        let t = time.t(k);
        while next < stream.events.len() && stream.events[next].time <= t {
            jump_sum += weight[stream.events[next].mark];
            next += 1;
        }
        out.push(jump_sum - t * drift);
    }
    Ok(out)
}
