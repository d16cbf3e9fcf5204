//! Time representation, toroidal distance, map projection, geodesic
//! distance and the time prediction score.
//!
//! Everything here is pure `f64` math with no model state.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Days per month in the fixed non-leap calendar used for time-of-year.
const DAYS_IN_MONTH: [u32; 12] = [31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];

const SECONDS_PER_DAY: i64 = 86_400;

/// Mean Earth radius used by [`geodesic_km`].
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Largest cyclic month error (half a year).
pub const MAX_MONTH_ERROR: f64 = 6.0;
/// Largest cyclic hour error (half a day).
pub const MAX_HOUR_ERROR: f64 = 12.0;

/// Number of days in month `m` (1-based) of a non-leap year.
pub fn days_in_month(month: u32) -> Result<u32> {
    if !(1..=12).contains(&month) {
        return Err(Error::invalid(format!("month {month} out of range 1..=12")));
    }
    Ok(DAYS_IN_MONTH[(month - 1) as usize])
}

/// Civil date-time with the year discarded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DateTuple {
    month: u32,
    day: u32,
    hour: u32,
    minute: u32,
    second: u32,
}

impl DateTuple {
    pub fn new(month: u32, day: u32, hour: u32, minute: u32, second: u32) -> Result<Self> {
        let dim = days_in_month(month)?;
        if day == 0 || day > dim {
            return Err(Error::invalid(format!("day {day} out of range for month {month}")));
        }
        if hour > 23 || minute > 59 || second > 59 {
            return Err(Error::invalid(format!("time {hour:02}:{minute:02}:{second:02} out of range")));
        }
        Ok(Self { month, day, hour, minute, second })
    }

    pub fn month(&self) -> u32 {
        self.month
    }
    pub fn day(&self) -> u32 {
        self.day
    }
    pub fn hour(&self) -> u32 {
        self.hour
    }
    pub fn minute(&self) -> u32 {
        self.minute
    }
    pub fn second(&self) -> u32 {
        self.second
    }

    /// Zero-based day of the (non-leap) year.
    pub fn day_of_year(&self) -> u32 {
        DAYS_IN_MONTH[..(self.month - 1) as usize].iter().sum::<u32>() + self.day - 1
    }
}

impl fmt::Display for DateTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02}-{:02} {:02}:{:02}:{:02}", self.month, self.day, self.hour, self.minute, self.second)
    }
}

/// Converts days since 1970-01-01 to a proleptic Gregorian (month, day).
///
/// Howard Hinnant's `civil_from_days`; the year is computed but discarded.
fn civil_from_days(days: i64) -> (u32, u32, bool) {
    let z = days + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let year = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let day = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let month = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    let year = if month <= 2 { year + 1 } else { year };
    let leap = (year % 4 == 0 && year % 100 != 0) || year % 400 == 0;
    (month, day, leap)
}

/// Decomposes a unix timestamp (UTC) into a [`DateTuple`].
///
/// Feb 29 is clamped to Feb 28 so every result lives in the 365-day calendar.
pub fn unix2tuple(ts: i64) -> Result<DateTuple> {
    if ts < 0 {
        return Err(Error::invalid(format!("negative timestamp {ts}")));
    }
    let days = ts.div_euclid(SECONDS_PER_DAY);
    let secs = ts.rem_euclid(SECONDS_PER_DAY) as u32;
    let (month, mut day, _) = civil_from_days(days);
    if month == 2 && day == 29 {
        day = 28;
    }
    DateTuple::new(month, day, secs / 3600, (secs / 60) % 60, secs % 60)
}

/// Normalized cyclic month-hour pair on the unit torus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CyclicTime {
    theta: f64,
    phi: f64,
}

fn wrap_unit(x: f64) -> f64 {
    let w = x.rem_euclid(1.0);
    // rem_euclid can round up to exactly 1.0 for tiny negative inputs
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

impl CyclicTime {
    /// Builds a time from arbitrary reals, wrapping both components into [0, 1).
    pub fn new(theta: f64, phi: f64) -> Result<Self> {
        if !theta.is_finite() || !phi.is_finite() {
            return Err(Error::invalid("non-finite cyclic time"));
        }
        Ok(Self { theta: wrap_unit(theta), phi: wrap_unit(phi) })
    }

    /// Normalized time of year.
    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Normalized time of day.
    pub fn phi(&self) -> f64 {
        self.phi
    }

    /// Adds an offset to each component modulo 1.
    pub fn shifted(&self, d_theta: f64, d_phi: f64) -> Self {
        Self { theta: wrap_unit(self.theta + d_theta), phi: wrap_unit(self.phi + d_phi) }
    }

    /// Fractional month in [0, 12).
    pub fn months(&self) -> f64 {
        self.theta * 12.0
    }

    /// Fractional hour in [0, 24).
    pub fn hours(&self) -> f64 {
        self.phi * 24.0
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.theta, self.phi]
    }
}

/// How the time-of-year component is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyScale {
    /// Fractional month over a 12-month period.
    #[default]
    Monthly,
    /// Days elapsed since Jan 1 over 365 days.
    Daily,
}

fn day_fraction(d: &DateTuple) -> f64 {
    (d.hour as f64 + d.minute as f64 / 60.0 + d.second as f64 / 3600.0) / 24.0
}

/// Monthly-scale cyclic time: θ = ((m-1) + (d-1)/D(m)) / 12, φ = fraction of day.
pub fn tuple2cyclic(d: &DateTuple) -> CyclicTime {
    let dim = DAYS_IN_MONTH[(d.month - 1) as usize] as f64;
    let theta = ((d.month - 1) as f64 + (d.day - 1) as f64 / dim) / 12.0;
    CyclicTime { theta: wrap_unit(theta), phi: wrap_unit(day_fraction(d)) }
}

/// Daily-scale cyclic time: θ = day-of-year / 365.
pub fn tuple2cyclic_daily(d: &DateTuple) -> CyclicTime {
    let theta = d.day_of_year() as f64 / 365.0;
    CyclicTime { theta: wrap_unit(theta), phi: wrap_unit(day_fraction(d)) }
}

pub fn unix2cyclic(ts: i64, scale: ToyScale) -> Result<CyclicTime> {
    let d = unix2tuple(ts)?;
    Ok(match scale {
        ToyScale::Monthly => tuple2cyclic(&d),
        ToyScale::Daily => tuple2cyclic_daily(&d),
    })
}

fn cyclic_delta(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    d.min(1.0 - d)
}

/// Flat-torus distance: Euclidean distance to the nearest periodic copy.
pub fn toroidal_distance(a: &CyclicTime, b: &CyclicTime) -> f64 {
    let dt = cyclic_delta(a.theta, b.theta);
    let dp = cyclic_delta(a.phi, b.phi);
    (dt * dt + dp * dp).sqrt()
}

/// Plain Euclidean distance on the raw (θ, φ) coordinates, ignoring wrap-around.
pub fn l2_time_distance(a: &CyclicTime, b: &CyclicTime) -> f64 {
    let dt = a.theta - b.theta;
    let dp = a.phi - b.phi;
    (dt * dt + dp * dp).sqrt()
}

/// Per-axis wrap-around error in months and hours.
pub fn cyclic_abs_error(pred: &CyclicTime, truth: &CyclicTime) -> (f64, f64) {
    (12.0 * cyclic_delta(pred.theta, truth.theta), 24.0 * cyclic_delta(pred.phi, truth.phi))
}

/// Time prediction score from mean month and hour errors, in [0, 1].
pub fn tps(mean_month_err: f64, mean_hour_err: f64) -> Result<f64> {
    if !(0.0..=MAX_MONTH_ERROR).contains(&mean_month_err) {
        return Err(Error::invalid(format!("month error {mean_month_err} outside [0, 6]")));
    }
    if !(0.0..=MAX_HOUR_ERROR).contains(&mean_hour_err) {
        return Err(Error::invalid(format!("hour error {mean_hour_err} outside [0, 12]")));
    }
    let m = mean_month_err / MAX_MONTH_ERROR;
    let h = mean_hour_err / MAX_HOUR_ERROR;
    Ok(1.0 - ((m * m + h * h) / 2.0).sqrt())
}

/// Latitude/longitude in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoCoord {
    lat: f64,
    lon: f64,
}

impl GeoCoord {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) || !lat.is_finite() {
            return Err(Error::invalid(format!("latitude {lat} outside [-90, 90]")));
        }
        if !(-180.0..=180.0).contains(&lon) || !lon.is_finite() {
            return Err(Error::invalid(format!("longitude {lon} outside [-180, 180]")));
        }
        Ok(Self { lat, lon })
    }

    /// Clamps latitude and wraps longitude into the valid ranges.
    pub fn normalized(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(Error::invalid("non-finite coordinate"));
        }
        let lat = lat.clamp(-90.0, 90.0);
        let mut lon = (lon + 180.0).rem_euclid(360.0) - 180.0;
        if lon < -180.0 {
            lon = -180.0;
        }
        Ok(Self { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }
    pub fn lon(&self) -> f64 {
        self.lon
    }
}

/// Equal Earth plane coordinates on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedCoord {
    pub x: f64,
    pub y: f64,
}

const EE_A1: f64 = 1.340264;
const EE_A2: f64 = -0.081106;
const EE_A3: f64 = 0.000893;
const EE_A4: f64 = 0.003796;

fn ee_param(lat_rad: f64) -> f64 {
    (3f64.sqrt() / 2.0 * lat_rad.sin()).asin()
}

fn ee_y(t: f64) -> f64 {
    let t2 = t * t;
    let t6 = t2 * t2 * t2;
    t * (EE_A1 + EE_A2 * t2 + t6 * (EE_A3 + EE_A4 * t2))
}

/// Forward Equal Earth projection (unit sphere, radians-scaled).
pub fn equal_earth_project(g: &GeoCoord) -> ProjectedCoord {
    let lam = g.lon.to_radians();
    let t = ee_param(g.lat.to_radians());
    let t2 = t * t;
    let t6 = t2 * t2 * t2;
    let denom = 3.0 * (EE_A1 + 3.0 * EE_A2 * t2 + t6 * (7.0 * EE_A3 + 9.0 * EE_A4 * t2));
    let x = 2.0 * 3f64.sqrt() * lam * t.cos() / denom;
    ProjectedCoord { x, y: ee_y(t) }
}

/// Largest |x| of the projection (equator, ±180°).
pub fn equal_earth_x_max() -> f64 {
    2.0 * 3f64.sqrt() * std::f64::consts::PI / (3.0 * EE_A1)
}

/// Largest |y| of the projection (the poles).
pub fn equal_earth_y_max() -> f64 {
    ee_y(ee_param(std::f64::consts::FRAC_PI_2))
}

impl ProjectedCoord {
    /// Rescales so the projected globe spans [-1, 1] on both axes.
    pub fn unit_scaled(&self) -> [f64; 2] {
        [self.x / equal_earth_x_max(), self.y / equal_earth_y_max()]
    }
}

/// Haversine great-circle distance in kilometres.
pub fn geodesic_km(a: &GeoCoord, b: &GeoCoord) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}
