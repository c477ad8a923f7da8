//! Propagation models, radio environment maps and RSS sampling.
//!
//! Model-based maps come from the log-distance law plus per-wall penetration
//! losses. Measurement-based maps interpolate sampled RSS by inverse distance
//! weighting. The fused map blends the two with a Gaussian kernel on the
//! distance to the nearest measurement.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factory::{FactoryLayout, Point, Rect};
use crate::sim::RngStream;

pub mod fusion;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagationParams {
    /// Path loss (dB) at the reference distance.
    pub pl0: f64,
    /// Reference distance (m).
    #[serde(default = "default_d0")]
    pub d0: f64,
    pub exponent: f64,
    /// Log-normal shadowing standard deviation (dB).
    #[serde(default)]
    pub shadowing_sigma: f64,
    /// i.i.d. fast-fading standard deviation (dB).
    #[serde(default)]
    pub fast_fading_sigma: f64,
    /// Exponential decorrelation distance of the shadowing process (m).
    #[serde(default = "default_decorrelation")]
    pub decorrelation_distance: f64,
    /// dBm.
    pub tx_power: f64,
    /// dBm.
    pub noise_floor: f64,
    /// Distances below this are clamped to it; 0 disables the clamp.
    #[serde(default = "default_d_min")]
    pub d_min: f64,
}

fn default_d0() -> f64 {
    1.0
}

fn default_decorrelation() -> f64 {
    5.0
}

fn default_d_min() -> f64 {
    0.1
}

impl Default for PropagationParams {
    fn default() -> Self {
        PropagationParams {
            pl0: 40.0,
            d0: 1.0,
            exponent: 2.0,
            shadowing_sigma: 0.0,
            fast_fading_sigma: 0.0,
            decorrelation_distance: default_decorrelation(),
            tx_power: 20.0,
            noise_floor: -95.0,
            d_min: default_d_min(),
        }
    }
}

impl PropagationParams {
    pub fn total_sigma(&self) -> f64 {
        self.shadowing_sigma.hypot(self.fast_fading_sigma)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transmitter {
    pub id: String,
    pub position: Point,
    pub params: PropagationParams,
}

pub fn path_loss_log_distance(d: f64, p: &PropagationParams) -> Result<f64> {
    let d = if p.d_min > 0.0 { d.max(p.d_min) } else { d };
    if !(d > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "distance {d} must be positive when the clamp is disabled"
        )));
    }
    Ok(p.pl0 + 10.0 * p.exponent * (d / p.d0).log10())
}

fn cross(a: Point, b: Point) -> f64 {
    a.x * b.y - a.y * b.x
}

fn sub(a: Point, b: Point) -> Point {
    Point::new(a.x - b.x, a.y - b.y)
}

fn dot(a: Point, b: Point) -> f64 {
    a.x * b.x + a.y * b.y
}

/// Whether the open segment `(p, q)` meets the closed wall segment `[a, b]`.
/// Touching a wall endpoint and collinear overlap each count as one crossing.
pub fn crosses_wall(p: Point, q: Point, a: Point, b: Point) -> bool {
    const EPS: f64 = 1e-9;
    let r = sub(q, p);
    let s = sub(b, a);
    let ap = sub(a, p);
    let rr = dot(r, r);
    if rr == 0.0 {
        return false;
    }
    let scale = rr.sqrt() * dot(s, s).sqrt().max(1e-300);
    let denom = cross(r, s);
    if denom.abs() > 1e-12 * scale {
        let t = cross(ap, s) / denom;
        let u = cross(ap, r) / denom;
        return t > EPS && t < 1.0 - EPS && u >= -EPS && u <= 1.0 + EPS;
    }
    // Parallel: only collinear walls can touch the path.
    if cross(ap, r).abs() > 1e-12 * rr.sqrt() * (dot(ap, ap).sqrt() + 1.0) {
        return false;
    }
    let ta = dot(ap, r) / rr;
    let tb = dot(sub(b, p), r) / rr;
    ta.max(tb) > EPS && ta.min(tb) < 1.0 - EPS
}

pub fn wall_loss(tx: Point, rx: Point, layout: &FactoryLayout) -> f64 {
    layout
        .walls
        .iter()
        .filter(|w| crosses_wall(tx, rx, w.a, w.b))
        .map(|w| w.penetration_loss)
        .sum()
}

pub fn path_loss_motley_keenan(
    tx: Point,
    rx: Point,
    layout: &FactoryLayout,
    p: &PropagationParams,
) -> Result<f64> {
    Ok(path_loss_log_distance(tx.distance(rx), p)? + wall_loss(tx, rx, layout))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: Point,
    pub cell_size: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn covering(bounds: &Rect, cell_size: f64) -> Result<Self> {
        if !(cell_size > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cell size {cell_size} must be positive"
            )));
        }
        let n = |extent: f64| ((extent / cell_size) - 1e-9).ceil().max(1.0) as usize;
        Ok(GridSpec {
            origin: bounds.min,
            cell_size,
            nx: n(bounds.width()),
            ny: n(bounds.height()),
        })
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn center(&self, ix: usize, iy: usize) -> Point {
        Point::new(
            self.origin.x + (ix as f64 + 0.5) * self.cell_size,
            self.origin.y + (iy as f64 + 0.5) * self.cell_size,
        )
    }

    pub fn centers(&self) -> impl Iterator<Item = Point> + '_ {
        (0..self.ny).flat_map(move |iy| (0..self.nx).map(move |ix| self.center(ix, iy)))
    }

    pub fn extent(&self) -> Rect {
        Rect::new(
            self.origin,
            Point::new(
                self.origin.x + self.nx as f64 * self.cell_size,
                self.origin.y + self.ny as f64 * self.cell_size,
            ),
        )
    }

    pub fn congruent(&self, other: &GridSpec) -> bool {
        self.nx == other.nx
            && self.ny == other.ny
            && (self.cell_size - other.cell_size).abs() < 1e-12
            && self.origin.distance(other.origin) < 1e-12
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadioEnvironmentMap {
    pub transmitter_id: String,
    pub grid: GridSpec,
    /// Row-major (y outer), dBm.
    pub values: Vec<f64>,
}

impl RadioEnvironmentMap {
    pub fn value(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.grid.nx + ix]
    }

    /// Bilinear interpolation between cell centers, held constant beyond the
    /// outermost centers.
    pub fn interpolate(&self, pos: Point) -> Result<f64> {
        if !self.grid.extent().contains(pos) {
            return Err(Error::OutOfBounds { x: pos.x, y: pos.y });
        }
        let axis = |coord: f64, origin: f64, n: usize| {
            let mut f = ((coord - origin) / self.grid.cell_size - 0.5).clamp(0.0, (n - 1) as f64);
            if (f - f.round()).abs() < 1e-9 {
                f = f.round();
            }
            let i0 = f.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, f - i0 as f64)
        };
        let (x0, x1, fx) = axis(pos.x, self.grid.origin.x, self.grid.nx);
        let (y0, y1, fy) = axis(pos.y, self.grid.origin.y, self.grid.ny);
        let lerp = |a: f64, b: f64, f: f64| if f == 0.0 { a } else { a + (b - a) * f };
        let bottom = lerp(self.value(x0, y0), self.value(x1, y0), fx);
        let top = lerp(self.value(x0, y1), self.value(x1, y1), fx);
        Ok(lerp(bottom, top, fy))
    }

    pub fn to_csv(&self) -> String {
        let g = &self.grid;
        let mut out = String::new();
        out.push_str("# schema: rem v1; header origin_x,origin_y,cell_size,nx,ny then ny rows of nx dBm values\n");
        out.push_str("origin_x,origin_y,cell_size,nx,ny\n");
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            crate::output::fmt_f64(g.origin.x),
            crate::output::fmt_f64(g.origin.y),
            crate::output::fmt_f64(g.cell_size),
            g.nx,
            g.ny
        );
        for row in self.values.chunks(g.nx) {
            let line: Vec<String> = row.iter().map(|v| crate::output::fmt_f64(*v)).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(transmitter_id: &str, text: &str) -> Result<Self> {
        let bad = |m: &str| Error::SchemaMismatch(format!("rem csv: {m}"));
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        if lines.next() != Some("origin_x,origin_y,cell_size,nx,ny") {
            return Err(bad("missing header"));
        }
        let head: Vec<&str> = lines.next().ok_or_else(|| bad("missing grid line"))?.split(',').collect();
        if head.len() != 5 {
            return Err(bad("grid line needs 5 fields"));
        }
        let f = |s: &str| s.trim().parse::<f64>().map_err(|_| bad("number"));
        let u = |s: &str| s.trim().parse::<usize>().map_err(|_| bad("integer"));
        let grid = GridSpec {
            origin: Point::new(f(head[0])?, f(head[1])?),
            cell_size: f(head[2])?,
            nx: u(head[3])?,
            ny: u(head[4])?,
        };
        let mut values = Vec::with_capacity(grid.len());
        for line in lines {
            for v in line.split(',') {
                values.push(f(v)?);
            }
        }
        if values.len() != grid.len() {
            return Err(bad("value count does not match nx*ny"));
        }
        Ok(RadioEnvironmentMap {
            transmitter_id: transmitter_id.to_string(),
            grid,
            values,
        })
    }
}

pub fn build_model_rem(
    layout: &FactoryLayout,
    tx: &Transmitter,
    cell_size: f64,
) -> Result<RadioEnvironmentMap> {
    let grid = GridSpec::covering(&layout.bounds, cell_size)?;
    let values = grid
        .centers()
        .map(|c| {
            path_loss_motley_keenan(tx.position, c, layout, &tx.params)
                .map(|pl| tx.params.tx_power - pl)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RadioEnvironmentMap {
        transmitter_id: tx.id.clone(),
        grid,
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RssSample {
    pub position: Point,
    pub transmitter_id: String,
    /// dBm.
    pub rss: f64,
    pub t: f64,
}

const COINCIDENT: f64 = 1e-9;

fn samples_for<'a>(samples: &'a [RssSample], tx_id: &str) -> Vec<&'a RssSample> {
    samples.iter().filter(|s| s.transmitter_id == tx_id).collect()
}

/// Inverse-distance-weighted value at `at`; a coincident sample wins outright.
pub fn idw_at(samples: &[&RssSample], at: Point, power: f64) -> f64 {
    if let [only] = samples {
        return only.rss;
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for s in samples {
        let d = s.position.distance(at);
        if d <= COINCIDENT {
            return s.rss;
        }
        let w = d.powf(-power);
        num += w * s.rss;
        den += w;
    }
    num / den
}

pub fn build_measured_rem(
    samples: &[RssSample],
    transmitter_id: &str,
    layout: &FactoryLayout,
    cell_size: f64,
    idw_power: f64,
) -> Result<RadioEnvironmentMap> {
    let mine = samples_for(samples, transmitter_id);
    if mine.is_empty() {
        return Err(Error::EmptySamples(format!(
            "no RSS samples for transmitter `{transmitter_id}`"
        )));
    }
    let grid = GridSpec::covering(&layout.bounds, cell_size)?;
    let values = grid.centers().map(|c| idw_at(&mine, c, idw_power)).collect();
    Ok(RadioEnvironmentMap {
        transmitter_id: transmitter_id.to_string(),
        grid,
        values,
    })
}

/// Weight given to the measured map at distance `d_near` from the closest
/// measurement.
pub fn fusion_weight(d_near: f64, bandwidth: f64) -> f64 {
    if d_near <= COINCIDENT {
        return 1.0;
    }
    if bandwidth <= 0.0 {
        return 0.0;
    }
    if bandwidth.is_infinite() {
        return 1.0;
    }
    (-(d_near * d_near) / (2.0 * bandwidth * bandwidth)).exp()
}

pub fn nearest_distance(samples: &[&RssSample], at: Point) -> f64 {
    samples
        .iter()
        .map(|s| s.position.distance(at))
        .fold(f64::INFINITY, f64::min)
}

pub fn fuse_rem(
    model: &RadioEnvironmentMap,
    measured: &RadioEnvironmentMap,
    samples: &[RssSample],
    bandwidth: f64,
) -> Result<RadioEnvironmentMap> {
    if !model.grid.congruent(&measured.grid) {
        return Err(Error::GridMismatch(format!(
            "model grid {:?} vs measured grid {:?}",
            model.grid, measured.grid
        )));
    }
    if model.transmitter_id != measured.transmitter_id {
        return Err(Error::GridMismatch(format!(
            "transmitters `{}` and `{}` differ",
            model.transmitter_id, measured.transmitter_id
        )));
    }
    let mine = samples_for(samples, &model.transmitter_id);
    let values = model
        .grid
        .centers()
        .zip(model.values.iter().zip(&measured.values))
        .map(|(c, (&m, &s))| {
            let w = fusion_weight(nearest_distance(&mine, c), bandwidth);
            let v = w * s + (1.0 - w) * m;
            // Keep the convex combination inside [min, max] despite rounding.
            v.clamp(m.min(s), m.max(s))
        })
        .collect();
    Ok(RadioEnvironmentMap {
        transmitter_id: model.transmitter_id.clone(),
        grid: model.grid,
        values,
    })
}

/// Source of the expected (noise-free) RSS at a point.
pub trait MeanRss {
    fn mean_rss(&self, pos: Point) -> Result<f64>;
}

impl MeanRss for RadioEnvironmentMap {
    fn mean_rss(&self, pos: Point) -> Result<f64> {
        self.interpolate(pos)
    }
}

/// Direct Motley-Keenan evaluation, bypassing any grid.
pub struct ModelRss<'a> {
    pub layout: &'a FactoryLayout,
    pub transmitter: &'a Transmitter,
}

impl MeanRss for ModelRss<'_> {
    fn mean_rss(&self, pos: Point) -> Result<f64> {
        if !self.layout.bounds.contains(pos) {
            return Err(Error::OutOfBounds { x: pos.x, y: pos.y });
        }
        let p = &self.transmitter.params;
        Ok(p.tx_power - path_loss_motley_keenan(self.transmitter.position, pos, self.layout, p)?)
    }
}

/// Gauss-Markov shadowing along one device's path.
#[derive(Debug, Clone, Default)]
pub struct ShadowingProcess {
    state: Option<(Point, f64)>,
}

impl ShadowingProcess {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn current(&self) -> Option<f64> {
        self.state.map(|(_, s)| s)
    }

    pub fn advance(&mut self, pos: Point, p: &PropagationParams, rng: &mut RngStream) -> f64 {
        let sigma = p.shadowing_sigma;
        let s = match self.state {
            None => sigma * rng.normal(),
            Some((last, prev)) => {
                let rho = if p.decorrelation_distance > 0.0 {
                    (-last.distance(pos) / p.decorrelation_distance).exp()
                } else {
                    0.0
                };
                if rho >= 1.0 {
                    prev
                } else {
                    rho * prev + (1.0 - rho * rho).sqrt() * sigma * rng.normal()
                }
            }
        };
        self.state = Some((pos, s));
        s
    }
}

/// Mean RSS plus correlated shadowing plus i.i.d. fast fading.
pub fn sample_rss(
    source: &dyn MeanRss,
    pos: Point,
    shadowing: &mut ShadowingProcess,
    rng: &mut RngStream,
    p: &PropagationParams,
) -> Result<f64> {
    let mean = source.mean_rss(pos)?;
    let mut v = mean;
    if p.shadowing_sigma > 0.0 {
        v += shadowing.advance(pos, p, rng);
    }
    if p.fast_fading_sigma > 0.0 {
        v += p.fast_fading_sigma * rng.normal();
    }
    Ok(v)
}

pub fn rmse(errors: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = errors
        .into_iter()
        .fold((0.0, 0usize), |(s, n), e| (s + e * e, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}
