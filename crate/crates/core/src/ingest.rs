//! Meter and survey parsing, weekday/weekend splitting, per-day min-max
//! normalization and ordinal encoding of the socioeconomic survey.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike, Weekday};
use serde::{Deserialize, Serialize};

/// Hourly slots per day.
pub const HOURS: usize = 24;

/// Canonical order of the eight socioeconomic features.
pub const FEATURE_NAMES: [&str; 8] = [
    "age_u12",
    "age_13_24",
    "age_25_49",
    "age_50_64",
    "age_65p",
    "income",
    "education",
    "sqft",
];

/// Index of the square-footage column, the only continuous feature.
pub const SQFT_INDEX: usize = 7;

const METER_HEADER: [&str; 3] = ["household_id", "timestamp", "kwh"];
const SURVEY_HEADER: [&str; 9] = [
    "household_id",
    "age_u12",
    "age_13_24",
    "age_25_49",
    "age_50_64",
    "age_65p",
    "income",
    "education",
    "sqft",
];

const INCOME_LABELS: [(&str, u8); 10] = [
    ("Less than $10,000", 1),
    ("$10,000 - 19,999", 2),
    ("$20,000 - 34,999", 3),
    ("$35,000 - 49,999", 4),
    ("$50,000 - 74,999", 5),
    ("$75,000 - 99,999", 6),
    ("$100,000 - 149,999", 7),
    ("$150,000 - 299,000", 8),
    // The survey instrument's own label for bracket 8 is sometimes written this way.
    ("$150,000 - 299,999", 8),
    ("$300,000 - 1,000,000", 9),
];

const EDUCATION_LABELS: [(&str, u8); 4] = [
    ("High School graduate", 1),
    ("Some college/trade/vocational school", 2),
    ("College graduate", 3),
    ("Postgraduate degree", 4),
];

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("malformed row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("duplicate reading for household {household_id} at {timestamp} (row {row})")]
    DuplicateReading {
        row: usize,
        household_id: String,
        timestamp: String,
    },
    #[error("negative load {kwh} at row {row}")]
    NegativeLoad { row: usize, kwh: f64 },
    #[error("degenerate day: all {HOURS} readings equal {value}")]
    DegenerateDay { value: f64 },
    #[error("unknown {field} category {label:?} at row {row}")]
    UnknownCategory {
        row: usize,
        field: &'static str,
        label: String,
    },
    #[error("missing field {field} at row {row}")]
    MissingField { row: usize, field: &'static str },
    #[error("expected {expected} values, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DayClass {
    Weekday,
    Weekend,
}

impl DayClass {
    pub const ALL: [DayClass; 2] = [DayClass::Weekday, DayClass::Weekend];

    pub fn of(date: NaiveDate) -> Self {
        match date.weekday() {
            Weekday::Sat | Weekday::Sun => DayClass::Weekend,
            _ => DayClass::Weekday,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DayClass::Weekday => "weekday",
            DayClass::Weekend => "weekend",
        }
    }
}

impl fmt::Display for DayClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Reading {
    pub timestamp: NaiveDateTime,
    pub kwh: f64,
}

/// One household's hourly readings, strictly increasing in time.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMeterSeries {
    pub household_id: String,
    pub readings: Vec<Reading>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayProfile {
    pub household_id: String,
    pub date: NaiveDate,
    pub day_class: DayClass,
    pub values: [f64; HOURS],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SocioRecord {
    pub household_id: String,
    /// Residents under 12, 13-24, 25-49, 50-64 and over 65.
    pub age_counts: [u32; 5],
    pub income_code: u8,
    pub education_code: u8,
    pub sqft: u32,
}

impl SocioRecord {
    /// Feature values in [`FEATURE_NAMES`] order.
    pub fn feature_vector(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.age_counts.iter().map(|&c| f64::from(c)).collect();
        v.push(f64::from(self.income_code));
        v.push(f64::from(self.education_code));
        v.push(f64::from(self.sqft));
        v
    }
}

/// Raw 24-hour vectors of one household split by calendar type.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitDays {
    pub weekday: Vec<(NaiveDate, [f64; HOURS])>,
    pub weekend: Vec<(NaiveDate, [f64; HOURS])>,
    /// Dates without full 24-hour coverage.
    pub dropped: usize,
}

/// Counters surfaced in the run report.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub meter_rows: usize,
    pub survey_rows: usize,
    pub meter_households: usize,
    pub survey_households: usize,
    pub joined_households: usize,
    pub excluded_households: Vec<String>,
    pub incomplete_days: usize,
    pub degenerate_days: usize,
    pub weekday_profiles: usize,
    pub weekend_profiles: usize,
}

fn parse_timestamp(raw: &str) -> Option<NaiveDateTime> {
    let raw = raw.trim();
    const FORMATS: [&str; 5] = [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%dT%H",
    ];
    let parsed = FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(raw, f).ok())
        .or_else(|| {
            // Offsets are dropped: the wall-clock hour decides the day.
            chrono::DateTime::parse_from_rfc3339(raw)
                .ok()
                .map(|dt| dt.naive_local())
        })
        .or_else(|| {
            // "%Y-%m-%dT%H" is not accepted by chrono without minutes.
            let (date, hour) = raw.split_once('T')?;
            let date = NaiveDate::parse_from_str(date, "%Y-%m-%d").ok()?;
            date.and_hms_opt(hour.parse().ok()?, 0, 0)
        })?;
    (parsed.minute() == 0 && parsed.second() == 0 && parsed.nanosecond() == 0).then_some(parsed)
}

pub fn format_timestamp(ts: NaiveDateTime) -> String {
    ts.format("%Y-%m-%dT%H:00:00").to_string()
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<(), IngestError> {
    let ok = found.len() == expected.len()
        && found.iter().zip(expected).all(|(a, b)| a.trim() == *b);
    if ok {
        Ok(())
    } else {
        Err(IngestError::MalformedRow {
            row: 0,
            reason: format!("expected header {}", expected.join(",")),
        })
    }
}

/// Parses `household_id,timestamp,kwh` rows into one series per household,
/// ordered by household id and, within a household, by timestamp.
pub fn parse_meter<R: Read>(input: R) -> Result<Vec<RawMeterSeries>, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    check_header(reader.headers()?, &METER_HEADER)?;

    let mut grouped: BTreeMap<String, BTreeMap<NaiveDateTime, (usize, f64)>> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        if record.len() != METER_HEADER.len() {
            return Err(IngestError::MalformedRow {
                row,
                reason: format!("expected 3 columns, found {}", record.len()),
            });
        }
        let household_id = record[0].trim().to_string();
        if household_id.is_empty() {
            return Err(IngestError::MissingField {
                row,
                field: "household_id",
            });
        }
        let timestamp = parse_timestamp(&record[1]).ok_or_else(|| IngestError::MalformedRow {
            row,
            reason: format!("unparseable hourly timestamp {:?}", &record[1]),
        })?;
        let kwh: f64 = record[2]
            .trim()
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| IngestError::MalformedRow {
                row,
                reason: format!("unparseable load {:?}", &record[2]),
            })?;
        if kwh < 0.0 {
            return Err(IngestError::NegativeLoad { row, kwh });
        }
        let series = grouped.entry(household_id.clone()).or_default();
        if series.insert(timestamp, (row, kwh)).is_some() {
            return Err(IngestError::DuplicateReading {
                row,
                household_id,
                timestamp: format_timestamp(timestamp),
            });
        }
    }

    Ok(grouped
        .into_iter()
        .map(|(household_id, readings)| RawMeterSeries {
            household_id,
            readings: readings
                .into_iter()
                .map(|(timestamp, (_, kwh))| Reading { timestamp, kwh })
                .collect(),
        })
        .collect())
}

pub fn write_meter<W: Write>(series: &[RawMeterSeries], out: W) -> Result<(), IngestError> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(METER_HEADER)?;
    for s in series {
        for r in &s.readings {
            writer.write_record([
                s.household_id.as_str(),
                &format_timestamp(r.timestamp),
                &r.kwh.to_string(),
            ])?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Groups readings by calendar date. Dates with all 24 hours become one raw
/// vector in the weekday (Mon-Fri) or weekend list; the rest are counted as
/// dropped.
pub fn split_days(series: &RawMeterSeries) -> SplitDays {
    let mut by_date: BTreeMap<NaiveDate, [Option<f64>; HOURS]> = BTreeMap::new();
    for r in &series.readings {
        let slots = by_date.entry(r.timestamp.date()).or_insert([None; HOURS]);
        slots[r.timestamp.hour() as usize] = Some(r.kwh);
    }

    let mut out = SplitDays::default();
    for (date, slots) in by_date {
        if slots.iter().any(Option::is_none) {
            out.dropped += 1;
            continue;
        }
        let raw = slots.map(|v| v.unwrap_or_default());
        match DayClass::of(date) {
            DayClass::Weekday => out.weekday.push((date, raw)),
            DayClass::Weekend => out.weekend.push((date, raw)),
        }
    }
    out
}

/// Min-max scales one day to [0, 1]. Flat days have no shape and are rejected.
pub fn normalize_day(raw: &[f64]) -> Result<[f64; HOURS], IngestError> {
    if raw.len() != HOURS {
        return Err(IngestError::WrongLength {
            expected: HOURS,
            got: raw.len(),
        });
    }
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if !(range > 0.0) {
        return Err(IngestError::DegenerateDay { value: min });
    }
    let mut out = [0.0; HOURS];
    for (o, &v) in out.iter_mut().zip(raw) {
        *o = (v - min) / range;
    }
    Ok(out)
}

fn label_key(label: &str) -> String {
    label
        .chars()
        .filter(|c| !c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect()
}

fn lookup_code(
    raw: &str,
    table: &[(&str, u8)],
    max_code: u8,
    field: &'static str,
    row: usize,
) -> Result<u8, IngestError> {
    let raw = raw.trim();
    if let Ok(code) = raw.parse::<u8>() {
        if (1..=max_code).contains(&code) {
            return Ok(code);
        }
    }
    let key = label_key(raw);
    table
        .iter()
        .find(|(label, _)| label_key(label) == key)
        .map(|&(_, code)| code)
        .ok_or_else(|| IngestError::UnknownCategory {
            row,
            field,
            label: raw.to_string(),
        })
}

/// Maps an annual-income label (or its 1-9 code) to the ordinal code.
pub fn income_code(label: &str) -> Result<u8, IngestError> {
    lookup_code(label, &INCOME_LABELS, 9, "income", 0)
}

/// Maps an education label (or its 1-4 code) to the ordinal code.
pub fn education_code(label: &str) -> Result<u8, IngestError> {
    lookup_code(label, &EDUCATION_LABELS, 4, "education", 0)
}

fn parse_count<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    row: usize,
) -> Result<T, IngestError> {
    let field = SURVEY_HEADER[idx];
    let raw = record
        .get(idx)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .ok_or(IngestError::MissingField { row, field })?;
    raw.parse().map_err(|_| IngestError::MalformedRow {
        row,
        reason: format!("{field}: expected a non-negative integer, got {raw:?}"),
    })
}

/// Parses the household survey, encoding income and education labels to
/// their ordinal codes.
pub fn parse_survey<R: Read>(input: R) -> Result<Vec<SocioRecord>, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    check_header(reader.headers()?, &SURVEY_HEADER)?;

    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let get = |idx: usize| {
            record
                .get(idx)
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .ok_or(IngestError::MissingField {
                    row,
                    field: SURVEY_HEADER[idx],
                })
        };
        let household_id = get(0)?.to_string();
        let mut age_counts = [0u32; 5];
        for (j, slot) in age_counts.iter_mut().enumerate() {
            *slot = parse_count(&record, j + 1, row)?;
        }
        let income_code = lookup_code(get(6)?, &INCOME_LABELS, 9, "income", row)?;
        let education_code = lookup_code(get(7)?, &EDUCATION_LABELS, 4, "education", row)?;
        let sqft: u32 = parse_count(&record, 8, row)?;
        if sqft == 0 {
            return Err(IngestError::MalformedRow {
                row,
                reason: "sqft must be positive".into(),
            });
        }
        if record.len() > SURVEY_HEADER.len() {
            return Err(IngestError::MalformedRow {
                row,
                reason: format!("expected 9 columns, found {}", record.len()),
            });
        }
        out.push(SocioRecord {
            household_id,
            age_counts,
            income_code,
            education_code,
            sqft,
        });
    }
    Ok(out)
}

/// Writes records with numeric codes in place of labels.
pub fn write_survey<W: Write>(records: &[SocioRecord], out: W) -> Result<(), IngestError> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(SURVEY_HEADER)?;
    for r in records {
        let mut row = vec![r.household_id.clone()];
        row.extend(r.age_counts.iter().map(u32::to_string));
        row.push(r.income_code.to_string());
        row.push(r.education_code.to_string());
        row.push(r.sqft.to_string());
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Normalized profiles of the joined cohort, per day class.
#[derive(Debug, Clone, Default)]
pub struct Cohort {
    pub socio: Vec<SocioRecord>,
    pub weekday: Vec<DayProfile>,
    pub weekend: Vec<DayProfile>,
}

impl Cohort {
    pub fn profiles(&self, class: DayClass) -> &[DayProfile] {
        match class {
            DayClass::Weekday => &self.weekday,
            DayClass::Weekend => &self.weekend,
        }
    }
}

/// Joins meter and survey data on household id, splits and normalizes days.
/// Households lacking either side are excluded and listed in the report.
pub fn build_cohort(meter: &[RawMeterSeries], survey: &[SocioRecord]) -> (Cohort, IngestReport) {
    let mut report = IngestReport {
        meter_rows: meter.iter().map(|s| s.readings.len()).sum(),
        survey_rows: survey.len(),
        meter_households: meter.len(),
        survey_households: survey.len(),
        ..Default::default()
    };
    let by_id: BTreeMap<&str, &RawMeterSeries> =
        meter.iter().map(|s| (s.household_id.as_str(), s)).collect();
    let surveyed: BTreeMap<&str, &SocioRecord> =
        survey.iter().map(|r| (r.household_id.as_str(), r)).collect();

    let mut cohort = Cohort::default();
    for (id, socio) in &surveyed {
        let Some(series) = by_id.get(id) else {
            report.excluded_households.push((*id).to_string());
            continue;
        };
        let split = split_days(series);
        report.incomplete_days += split.dropped;
        let mut kept = 0;
        for (class, days) in [
            (DayClass::Weekday, &split.weekday),
            (DayClass::Weekend, &split.weekend),
        ] {
            for (date, raw) in days {
                match normalize_day(raw) {
                    Ok(values) => {
                        kept += 1;
                        let profile = DayProfile {
                            household_id: (*id).to_string(),
                            date: *date,
                            day_class: class,
                            values,
                        };
                        match class {
                            DayClass::Weekday => cohort.weekday.push(profile),
                            DayClass::Weekend => cohort.weekend.push(profile),
                        }
                    }
                    Err(_) => {
                        log::debug!("household {id}: flat day {date} dropped");
                        report.degenerate_days += 1;
                    }
                }
            }
        }
        if kept == 0 {
            report.excluded_households.push((*id).to_string());
        } else {
            cohort.socio.push((*socio).clone());
        }
    }
    for id in by_id.keys() {
        if !surveyed.contains_key(id) {
            report.excluded_households.push((*id).to_string());
        }
    }
    report.excluded_households.sort();
    report.joined_households = cohort.socio.len();
    report.weekday_profiles = cohort.weekday.len();
    report.weekend_profiles = cohort.weekend.len();
    (cohort, report)
}
