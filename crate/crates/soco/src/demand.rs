//! Datacenter demand-response data pipeline: renewable power models, weather
//! CSV ingestion, context construction, augmentation, and episode splitting.
//!
//! Contexts are the microgrid's power shortfall `y_t = max(P_s - P_r, 0)`
//! where `P_r` sums wind and solar supply. Everything is converted to MW and
//! then divided by a dataset-level scale (the 95th percentile) so a small
//! relu net sees inputs around [0, 1.2].

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ProblemInstance;

pub const WEATHER_CSV_HEADER: &str = "timestamp,wind_speed_mps,ghi_kw_m2,temp_c,base_shortage_mw";
pub const DATASET_CSV_HEADER: &str = "episode_id,step,y";

/// Calendar timestamp at hour granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Timestamp {
    pub year: i32,
    pub month: u32,
    pub day: u32,
    pub hour: u32,
    pub minute: u32,
}

impl Timestamp {
    pub fn parse(s: &str) -> Option<Timestamp> {
        // YYYY-MM-DDTHH:MM with an optional :SS suffix
        let (date, time) = s.split_once('T')?;
        let mut dp = date.split('-');
        let year: i32 = dp.next()?.parse().ok()?;
        let month: u32 = dp.next()?.parse().ok()?;
        let day: u32 = dp.next()?.parse().ok()?;
        if dp.next().is_some() {
            return None;
        }
        let mut tp = time.split(':');
        let hour: u32 = tp.next()?.parse().ok()?;
        let minute: u32 = tp.next()?.parse().ok()?;
        if let Some(sec) = tp.next() {
            if sec.parse::<u32>().ok()? != 0 {
                return None;
            }
        }
        if !(1..=12).contains(&month) || !(1..=31).contains(&day) || hour > 23 || minute > 59 {
            return None;
        }
        Some(Timestamp {
            year,
            month,
            day,
            hour,
            minute,
        })
    }

    /// Days since 1970-01-01 (proleptic Gregorian).
    fn days_from_civil(&self) -> i64 {
        let y = if self.month <= 2 {
            self.year as i64 - 1
        } else {
            self.year as i64
        };
        let era = if y >= 0 { y } else { y - 399 } / 400;
        let yoe = (y - era * 400) as u64;
        let m = self.month as u64;
        let d = self.day as u64;
        let doy = (153 * (if m > 2 { m - 3 } else { m + 9 }) + 2) / 5 + d - 1;
        let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
        era * 146_097 + doe as i64 - 719_468
    }

    /// Absolute hour index used for cadence checks.
    pub fn hour_index(&self) -> i64 {
        self.days_from_civil() * 24 + self.hour as i64
    }

    /// Months since year zero, for chronological splits.
    pub fn month_index(&self) -> i64 {
        self.year as i64 * 12 + (self.month as i64 - 1)
    }

    pub fn plus_hours(&self, hours: i64) -> Timestamp {
        let total = self.hour_index() + hours;
        let days = total.div_euclid(24);
        let hour = total.rem_euclid(24) as u32;
        let (year, month, day) = civil_from_days(days);
        Timestamp {
            year,
            month,
            day,
            hour,
            minute: 0,
        }
    }
}

fn civil_from_days(z: i64) -> (i32, u32, u32) {
    let z = z + 719_468;
    let era = if z >= 0 { z } else { z - 146_096 } / 146_097;
    let doe = (z - era * 146_097) as u64;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe as i64 + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    let y = if m <= 2 { y + 1 } else { y };
    (y as i32, m, d)
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:04}-{:02}-{:02}T{:02}:{:02}",
            self.year, self.month, self.day, self.hour, self.minute
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeatherRecord {
    pub timestamp: Timestamp,
    /// m/s
    pub wind_speed: f64,
    /// kW/m^2
    pub ghi: f64,
    /// degrees C
    pub temperature: f64,
    /// MW
    pub base_shortage: f64,
}

/// Renewable conversion parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RenewableParams {
    /// Wind conversion efficiency, fraction.
    pub kappa_wind: f64,
    /// Air density, kg/m^3.
    pub rho_air: f64,
    /// Turbine swept area, m^2.
    pub a_swept: f64,
    /// Solar conversion efficiency, fraction.
    pub kappa_solar: f64,
    /// Panel array area, m^2.
    pub a_array: f64,
}

impl Default for RenewableParams {
    fn default() -> Self {
        RenewableParams {
            kappa_wind: 0.30,
            rho_air: 1.23,
            a_swept: 500_000.0,
            kappa_solar: 0.10,
            a_array: 10_000.0,
        }
    }
}

impl RenewableParams {
    pub fn validate(&self) -> Result<()> {
        let fractions_ok = (0.0..=1.0).contains(&self.kappa_wind)
            && self.kappa_wind > 0.0
            && (0.0..=1.0).contains(&self.kappa_solar)
            && self.kappa_solar > 0.0;
        if !fractions_ok || self.rho_air <= 0.0 || self.a_swept <= 0.0 || self.a_array <= 0.0 {
            return Err(Error::InvalidParameter(
                "renewable parameters must be positive (efficiencies in (0, 1])".into(),
            ));
        }
        Ok(())
    }
}

/// Cubic wind law `P = 1/2 k rho A v^3`, watts for SI inputs.
pub fn wind_power(params: &RenewableParams, wind_speed: f64) -> Result<f64> {
    if wind_speed < 0.0 || !wind_speed.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "wind speed must be >= 0, got {wind_speed}"
        )));
    }
    Ok(0.5 * params.kappa_wind * params.rho_air * params.a_swept * wind_speed.powi(3))
}

/// Solar model `P = 1/2 k A I (1 - 0.05 (T - 25))`, kW for irradiance in
/// kW/m^2, clamped at zero where the linear derating would go negative.
pub fn solar_power(params: &RenewableParams, irradiance: f64, temperature: f64) -> f64 {
    let raw = 0.5
        * params.kappa_solar
        * params.a_array
        * irradiance.max(0.0)
        * (1.0 - 0.05 * (temperature - 25.0));
    raw.max(0.0)
}

/// Total renewable supply in MW.
pub fn renewable_power_mw(params: &RenewableParams, record: &WeatherRecord) -> Result<f64> {
    let wind_mw = wind_power(params, record.wind_speed)? / 1e6;
    let solar_mw = solar_power(params, record.ghi, record.temperature) / 1e3;
    Ok(wind_mw + solar_mw)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Normalization {
    /// Keep MW units.
    Raw,
    /// Divide by a fixed scale.
    Scale(f64),
    /// Divide by this percentile of the shortfall distribution.
    Percentile(f64),
}

/// Per-record shortfall contexts. Returns the contexts and the scale that was
/// divided out.
pub fn build_contexts(
    records: &[WeatherRecord],
    params: &RenewableParams,
    normalization: Normalization,
) -> Result<(Vec<f64>, f64)> {
    params.validate()?;
    if records.is_empty() {
        return Err(Error::InvalidParameter("no weather records".into()));
    }
    let mut shortfalls = Vec::with_capacity(records.len());
    let mut shortage_sum = 0.0;
    let mut renewable_sum = 0.0;
    for rec in records {
        let supply = renewable_power_mw(params, rec)?;
        shortage_sum += rec.base_shortage.abs();
        renewable_sum += supply;
        shortfalls.push((rec.base_shortage - supply).max(0.0));
    }
    let mean_shortage = shortage_sum / records.len() as f64;
    let mean_renewable = renewable_sum / records.len() as f64;
    if mean_shortage > 0.0
        && mean_renewable > 0.0
        && (mean_shortage / mean_renewable > 1e3 || mean_renewable / mean_shortage > 1e3)
    {
        return Err(Error::UnitMismatch {
            shortage: mean_shortage,
            renewable: mean_renewable,
        });
    }

    let scale = match normalization {
        Normalization::Raw => 1.0,
        Normalization::Scale(s) => {
            if s <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "normalization scale must be positive, got {s}"
                )));
            }
            s
        }
        Normalization::Percentile(p) => {
            let mut sorted = shortfalls.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let v = crate::eval::percentile_nearest_rank(&sorted, p);
            if v <= 0.0 {
                return Err(Error::InvalidParameter(
                    "shortfall percentile is zero; cannot normalize".into(),
                ));
            }
            v
        }
    };
    for v in &mut shortfalls {
        *v /= scale;
    }
    Ok((shortfalls, scale))
}

pub fn write_weather_csv(path: &Path, records: &[WeatherRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{WEATHER_CSV_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.timestamp, r.wind_speed, r.ghi, r.temperature, r.base_shortage
        )?;
    }
    Ok(())
}

pub fn load_weather_csv(path: &Path) -> Result<Vec<WeatherRecord>> {
    let file = File::open(path).map_err(|e| Error::csv(path, format!("cannot open: {e}")))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::csv(path, "empty file"))?;
    let header = header?;
    if header.trim_end() != WEATHER_CSV_HEADER {
        return Err(Error::csv(
            path,
            format!("bad header: expected {WEATHER_CSV_HEADER:?}, got {header:?}"),
        ));
    }

    let columns = ["timestamp", "wind_speed_mps", "ghi_kw_m2", "temp_c", "base_shortage_mw"];
    let mut records: Vec<WeatherRecord> = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        let row = idx + 1; // 1-based file line number
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::csv(
                path,
                format!("line {row}: expected 5 columns, got {}", fields.len()),
            ));
        }
        let timestamp = Timestamp::parse(fields[0])
            .ok_or_else(|| Error::csv_row(path, row, columns[0], "unparseable timestamp"))?;
        let mut nums = [0.0f64; 4];
        for (i, v) in nums.iter_mut().enumerate() {
            *v = fields[i + 1].trim().parse().map_err(|_| {
                Error::csv_row(path, row, columns[i + 1], format!("non-numeric {:?}", fields[i + 1]))
            })?;
            if !v.is_finite() {
                return Err(Error::csv_row(path, row, columns[i + 1], "non-finite value"));
            }
        }
        let [wind_speed, ghi, temperature, base_shortage] = nums;
        if wind_speed < 0.0 {
            return Err(Error::csv_row(
                path,
                row,
                columns[1],
                format!("negative wind speed {wind_speed}"),
            ));
        }
        if ghi < 0.0 {
            return Err(Error::csv_row(path, row, columns[2], "negative irradiance"));
        }
        if let Some(prev) = records.last() {
            let delta = timestamp.hour_index() - prev.timestamp.hour_index();
            if delta <= 0 {
                return Err(Error::csv_row(path, row, columns[0], "non-monotone timestamp"));
            }
            if delta != 1 || timestamp.minute != 0 {
                return Err(Error::csv_row(path, row, columns[0], "cadence is not hourly"));
            }
        }
        records.push(WeatherRecord {
            timestamp,
            wind_speed,
            ghi,
            temperature,
            base_shortage,
        });
    }
    if records.is_empty() {
        return Err(Error::csv(path, "no data rows"));
    }
    Ok(records)
}

/// Training-set augmentation: multiplicative scaling, additive jitter, and a
/// circular time shift, all clamped at zero.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Scale drawn from U(1 - a, 1 + a).
    pub scale_amplitude: f64,
    /// Jitter sigma in normalized context units.
    pub jitter_sigma: f64,
    /// Circular shift drawn from 0..=max_shift.
    pub max_shift: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale_amplitude: 0.2,
            jitter_sigma: 0.02,
            max_shift: 23,
        }
    }
}

/// Chronological split: the first `train_months` calendar months train, the
/// next `val_months` validate, everything after tests.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_months: usize,
    pub val_months: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_months: 2,
            val_months: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DemandDataset {
    pub train: Vec<ProblemInstance>,
    pub val: Vec<ProblemInstance>,
    pub test: Vec<ProblemInstance>,
    /// MW scale divided out of every context.
    pub scale: f64,
}

fn episodes_from(contexts: &[f64], episode_len: usize, prefix: &str) -> Vec<ProblemInstance> {
    contexts
        .chunks_exact(episode_len)
        .enumerate()
        .map(|(i, chunk)| {
            ProblemInstance::new(
                format!("{prefix}-{i:04}"),
                vec![0.0],
                chunk.iter().map(|y| vec![*y]).collect(),
            )
            .expect("episode construction")
        })
        .collect()
}

/// Build train/val/test episode sets from hourly weather records.
///
/// `augment_target` is the total number of training sequences to produce;
/// zero keeps the raw episodes only. Deterministic for a fixed seed.
pub fn make_dataset(
    records: &[WeatherRecord],
    params: &RenewableParams,
    episode_len: usize,
    split: &SplitConfig,
    augment_target: usize,
    augment: &AugmentConfig,
    seed: u64,
) -> Result<DemandDataset> {
    if episode_len == 0 {
        return Err(Error::InvalidParameter("episode_len must be positive".into()));
    }
    // raw MW shortfalls first; the normalization scale comes from the
    // training months alone so the test range stays untouched by it
    let (raw, _) = build_contexts(records, params, Normalization::Raw)?;

    let first_month = records[0].timestamp.month_index();
    let mut train_ctx = Vec::new();
    let mut val_ctx = Vec::new();
    let mut test_ctx = Vec::new();
    for (rec, y) in records.iter().zip(&raw) {
        let offset = (rec.timestamp.month_index() - first_month) as usize;
        if offset < split.train_months {
            train_ctx.push(*y);
        } else if offset < split.train_months + split.val_months {
            val_ctx.push(*y);
        } else {
            test_ctx.push(*y);
        }
    }
    if train_ctx.is_empty() {
        return Err(Error::InvalidParameter("no records in the training months".into()));
    }
    let mut sorted = train_ctx.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let scale = crate::eval::percentile_nearest_rank(&sorted, 95.0);
    if scale <= 0.0 {
        return Err(Error::InvalidParameter(
            "training-month shortfall percentile is zero; cannot normalize".into(),
        ));
    }
    for y in train_ctx
        .iter_mut()
        .chain(val_ctx.iter_mut())
        .chain(test_ctx.iter_mut())
    {
        *y /= scale;
    }

    let raw_train = episodes_from(&train_ctx, episode_len, "train-raw");
    let val = episodes_from(&val_ctx, episode_len, "val");
    let test = episodes_from(&test_ctx, episode_len, "test");
    if raw_train.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "not enough records for a single {episode_len}-step training episode"
        )));
    }

    let train = if augment_target == 0 || augment_target == raw_train.len() {
        raw_train
    } else if augment_target < raw_train.len() {
        raw_train.into_iter().take(augment_target).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let jitter = Normal::new(0.0, augment.jitter_sigma.max(f64::MIN_POSITIVE)).unwrap();
        let mut out = raw_train.clone();
        let mut aug_idx = 0usize;
        while out.len() < augment_target {
            let base = &raw_train[rng.random_range(0..raw_train.len())];
            let scale_factor = 1.0 + augment.scale_amplitude * rng.random_range(-1.0..1.0);
            let shift = if augment.max_shift == 0 {
                0
            } else {
                rng.random_range(0..=augment.max_shift.min(episode_len - 1))
            };
            let t_len = base.horizon();
            let mut ys = Vec::with_capacity(t_len);
            for t in 0..t_len {
                let src = (t + shift) % t_len;
                let mut v = base.contexts[src][0] * scale_factor;
                if augment.jitter_sigma > 0.0 {
                    v += jitter.sample(&mut rng);
                }
                ys.push(vec![v.max(0.0)]);
            }
            out.push(ProblemInstance::new(
                format!("train-aug-{aug_idx:05}"),
                vec![0.0],
                ys,
            )?);
            aug_idx += 1;
        }
        out
    };

    Ok(DemandDataset {
        train,
        val,
        test,
        scale,
    })
}

/// One scalar-context episode per block: `episode_id,step,y`.
pub fn write_dataset_csv(path: &Path, instances: &[ProblemInstance]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{DATASET_CSV_HEADER}")?;
    for inst in instances {
        if inst.context_dim() != 1 {
            return Err(Error::InvalidParameter(
                "dataset CSV only stores scalar contexts".into(),
            ));
        }
        for (t, y) in inst.contexts.iter().enumerate() {
            writeln!(w, "{},{},{}", inst.id, t + 1, y[0])?;
        }
    }
    Ok(())
}

pub fn load_dataset_csv(path: &Path) -> Result<Vec<ProblemInstance>> {
    let file = File::open(path).map_err(|e| Error::csv(path, format!("cannot open: {e}")))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::csv(path, "empty file"))?;
    let header = header?;
    if header.trim_end() != DATASET_CSV_HEADER {
        return Err(Error::csv(
            path,
            format!("bad header: expected {DATASET_CSV_HEADER:?}"),
        ));
    }
    let mut instances = Vec::new();
    let mut current: Option<(String, Vec<Vec<f64>>)> = None;
    for (idx, line) in lines {
        let line = line?;
        let row = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::csv(path, format!("line {row}: expected 3 columns")));
        }
        let id = fields[0].to_string();
        let step: usize = fields[1]
            .parse()
            .map_err(|_| Error::csv_row(path, row, "step", "non-integer step"))?;
        let y: f64 = fields[2]
            .parse()
            .map_err(|_| Error::csv_row(path, row, "y", "non-numeric context"))?;
        if !y.is_finite() {
            return Err(Error::csv_row(path, row, "y", "non-finite context"));
        }
        match &mut current {
            Some((cur_id, ys)) if *cur_id == id => {
                if step != ys.len() + 1 {
                    return Err(Error::csv_row(path, row, "step", "steps not contiguous"));
                }
                ys.push(vec![y]);
            }
            _ => {
                if let Some((done_id, ys)) = current.take() {
                    instances.push(ProblemInstance::new(done_id, vec![0.0], ys)?);
                }
                if step != 1 {
                    return Err(Error::csv_row(path, row, "step", "episode must start at step 1"));
                }
                current = Some((id, vec![vec![y]]));
            }
        }
    }
    if let Some((done_id, ys)) = current.take() {
        instances.push(ProblemInstance::new(done_id, vec![0.0], ys)?);
    }
    if instances.is_empty() {
        return Err(Error::csv(path, "no episodes"));
    }
    Ok(instances)
}

/// Synthetic weather generator for demos and tests: diurnal solar bell,
/// slowly drifting wind, seasonal temperature, and a sinusoidal base
/// shortage, all with seeded noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthWeatherConfig {
    pub days: usize,
    pub seed: u64,
    pub start_year: i32,
    /// MW
    pub shortage_base: f64,
    /// MW
    pub shortage_amplitude: f64,
    /// MW
    pub shortage_noise: f64,
    /// m/s
    pub wind_mean: f64,
    pub wind_amplitude: f64,
    pub wind_noise: f64,
}

impl Default for SynthWeatherConfig {
    fn default() -> Self {
        SynthWeatherConfig {
            days: 365,
            seed: 0,
            start_year: 2015,
            shortage_base: 35.0,
            shortage_amplitude: 25.0,
            shortage_noise: 1.5,
            wind_mean: 4.5,
            wind_amplitude: 1.2,
            wind_noise: 0.35,
        }
    }
}

pub fn synth_weather(cfg: &SynthWeatherConfig) -> Vec<WeatherRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = Timestamp {
        year: cfg.start_year,
        month: 1,
        day: 1,
        hour: 0,
        minute: 0,
    };
    // persistent states keep the hour-to-hour changes mostly structural
    let mut wind_drift = 0.0f64;
    let mut cloud_state = 0.0f64;
    let mut shortage_drift = 0.0f64;
    let mut records = Vec::with_capacity(cfg.days * 24);
    for h in 0..(cfg.days as i64 * 24) {
        let ts = start.plus_hours(h);
        let hour = ts.hour as f64;
        let day = (h / 24) as f64;

        // +1 in late June, -1 at the turn of the year
        let summer = (2.0 * std::f64::consts::PI * (day - 172.0) / 365.0).cos();
        // clear-sky bell between 6:00 and 18:00
        let sun = ((hour - 6.0) / 12.0 * std::f64::consts::PI).sin().max(0.0);
        cloud_state = 0.97 * cloud_state + 0.08 * rng.random_range(-1.0..1.0);
        let cloud = (0.85 + cloud_state).clamp(0.3, 1.0);
        let ghi = (sun * (0.55 + 0.2 * summer) * cloud).max(0.0);

        let temperature = 12.0 + 10.0 * summer
            + 5.0 * ((hour - 14.0) / 24.0 * 2.0 * std::f64::consts::PI).cos()
            + rng.random_range(-0.5..0.5);

        // winters are windy, summers calm
        wind_drift = 0.97 * wind_drift + cfg.wind_noise * rng.random_range(-1.0..1.0);
        let wind = (cfg.wind_mean - 1.2 * summer
            + cfg.wind_amplitude * (2.0 * std::f64::consts::PI * day / 19.0).sin()
            + wind_drift)
            .max(0.0);

        // sharp evening demand peak on top of the base load
        let peak = |center: f64, width: f64| {
            let d = (hour - center) / width;
            (-d * d).exp()
        };
        let profile = peak(18.0, 3.0);
        shortage_drift = 0.97 * shortage_drift + cfg.shortage_noise * rng.random_range(-1.0..1.0);
        let shortage = (cfg.shortage_base
            + cfg.shortage_amplitude * 2.2 * profile
            + 2.0 * summer
            + shortage_drift)
            .max(1.0);

        records.push(WeatherRecord {
            timestamp: ts,
            wind_speed: wind,
            ghi,
            temperature,
            base_shortage: shortage,
        });
    }
    records
}
