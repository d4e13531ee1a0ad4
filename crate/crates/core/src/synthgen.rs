//! Synthetic cohorts with planted ground truth.
//!
//! Each household gets socioeconomic attributes drawn from configured
//! categorical distributions and a true pattern distribution given by a
//! softmax over linked features. Every day samples an archetype from that
//! distribution, adds Gaussian noise and is rescaled into kWh. The generator
//! is a pure function of its config: same config, same bytes.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::ingest::{self, DayClass, SocioRecord, FEATURE_NAMES, HOURS};
use crate::neural::softmax;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    ConfigInvalid(String),
}

fn invalid(msg: impl Into<String>) -> SynthError {
    SynthError::ConfigInvalid(msg.into())
}

/// A planted dependence: `feature` raises the logit of `archetype` by
/// `strength` times the feature's position within its support (0 to 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub feature: String,
    pub archetype: usize,
    pub strength: f64,
}

/// Categorical weights over counts 0, 1, 2, ... for the age columns and over
/// codes 1.. for income and education; sqft is uniform on a 50 sq ft grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributeDistributions {
    pub age_counts: [Vec<f64>; 5],
    pub income: Vec<f64>,
    pub education: Vec<f64>,
    pub sqft: (u32, u32),
}

impl Default for AttributeDistributions {
    fn default() -> Self {
        Self {
            age_counts: [
                vec![0.55, 0.25, 0.15, 0.05],
                vec![0.65, 0.2, 0.15],
                vec![0.3, 0.3, 0.4],
                vec![0.5, 0.3, 0.2],
                vec![0.5, 0.3, 0.2],
            ],
            income: vec![0.03, 0.04, 0.08, 0.1, 0.17, 0.16, 0.2, 0.15, 0.07],
            education: vec![0.2, 0.3, 0.3, 0.2],
            sqft: (800, 4000),
        }
    }
}

impl AttributeDistributions {
    /// Smallest and largest value each feature can take.
    pub fn support(&self, feature: usize) -> (f64, f64) {
        match feature {
            0..=4 => (0.0, (self.age_counts[feature].len() - 1) as f64),
            5 => (1.0, self.income.len() as f64),
            6 => (1.0, self.education.len() as f64),
            _ => (f64::from(self.sqft.0), f64::from(self.sqft.1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub households: usize,
    pub days: usize,
    pub start_date: NaiveDate,
    /// Weekday shape templates (24 values each, min 0, max 1).
    pub archetypes: Vec<Vec<f64>>,
    /// Weekend templates; the weekday ones are reused when absent.
    pub weekend_archetypes: Option<Vec<Vec<f64>>>,
    pub links: Vec<Link>,
    /// Standard deviation of the per-hour Gaussian perturbation.
    pub noise: f64,
    pub seed: u64,
    pub attributes: AttributeDistributions,
    /// Uniform range of the per-household base load (kWh).
    pub base_load: (f64, f64),
    /// Uniform range of the per-household peak-to-base amplitude (kWh).
    pub amplitude: (f64, f64),
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let t = templates();
        let shape = |name: &str| {
            t.iter()
                .find(|(n, _)| *n == name)
                .map(|(_, s)| s.to_vec())
                .expect("known template")
        };
        Self {
            households: 60,
            days: 90,
            start_date: NaiveDate::from_ymd_opt(2019, 1, 7).expect("valid date"),
            archetypes: ["evening_early", "evening_late", "morning_evening", "afternoon_evening"]
                .iter()
                .map(|n| shape(n))
                .collect(),
            weekend_archetypes: Some(
                ["midday", "dual_daytime", "morning_evening", "evening_late"]
                    .iter()
                    .map(|n| shape(n))
                    .collect(),
            ),
            links: vec![
                Link {
                    feature: "age_65p".into(),
                    archetype: 0,
                    strength: 0.9,
                },
                Link {
                    feature: "education".into(),
                    archetype: 1,
                    strength: 0.9,
                },
                Link {
                    feature: "income".into(),
                    archetype: 2,
                    strength: 0.9,
                },
                Link {
                    feature: "age_u12".into(),
                    archetype: 3,
                    strength: 0.9,
                },
            ],
            noise: 0.02,
            seed: 0,
            attributes: AttributeDistributions::default(),
            base_load: (0.2, 0.6),
            amplitude: (1.0, 3.0),
        }
    }
}

fn bumps(spec: &[(f64, f64, f64)], floor: f64) -> [f64; HOURS] {
    let mut raw = [0.0; HOURS];
    for (t, v) in raw.iter_mut().enumerate() {
        *v = floor
            + spec
                .iter()
                .map(|&(center, width, height)| {
                    let d = t as f64 - center;
                    height * (-d * d / (2.0 * width * width)).exp()
                })
                .sum::<f64>();
    }
    ingest::normalize_day(&raw).expect("template has shape")
}

/// The six built-in shape templates. The first four peak in the evening; the
/// last two peak during the day.
pub fn templates() -> Vec<(&'static str, [f64; HOURS])> {
    vec![
        ("evening_early", bumps(&[(18.0, 1.5, 1.0)], 0.0)),
        ("evening_late", bumps(&[(21.5, 1.2, 1.0)], 0.0)),
        ("morning_evening", bumps(&[(7.0, 1.2, 0.8), (19.5, 1.5, 1.0)], 0.0)),
        ("afternoon_evening", bumps(&[(15.5, 3.5, 1.0)], 0.0)),
        ("midday", bumps(&[(12.5, 2.0, 1.0)], 0.0)),
        ("dual_daytime", bumps(&[(9.5, 1.3, 1.0), (16.0, 1.3, 0.9)], 0.0)),
    ]
}

impl GeneratorConfig {
    pub fn weekend(&self) -> &[Vec<f64>] {
        self.weekend_archetypes.as_deref().unwrap_or(&self.archetypes)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.households < 10 {
            return Err(invalid(format!("households must be >= 10, got {}", self.households)));
        }
        if self.days == 0 {
            return Err(invalid("days must be positive"));
        }
        if self.archetypes.is_empty() {
            return Err(invalid("at least one archetype required"));
        }
        if self.weekend().len() != self.archetypes.len() {
            return Err(invalid("weekend archetype count must match weekday count"));
        }
        for a in self.archetypes.iter().chain(self.weekend()) {
            if a.len() != HOURS {
                return Err(invalid(format!("archetype needs {HOURS} values, got {}", a.len())));
            }
            let min = a.iter().copied().fold(f64::INFINITY, f64::min);
            let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if min != 0.0 || max != 1.0 {
                return Err(invalid("archetype values must span exactly [0, 1]"));
            }
        }
        for l in &self.links {
            if !FEATURE_NAMES.contains(&l.feature.as_str()) {
                return Err(invalid(format!("unknown feature {:?}", l.feature)));
            }
            if l.archetype >= self.archetypes.len() {
                return Err(invalid(format!("link references archetype {}", l.archetype)));
            }
            if !l.strength.is_finite() {
                return Err(invalid("link strength must be finite"));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(invalid("noise must be a non-negative number"));
        }
        let attrs = &self.attributes;
        for w in attrs
            .age_counts
            .iter()
            .chain([&attrs.income, &attrs.education])
        {
            if w.is_empty() || w.iter().any(|x| !(*x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(invalid("categorical weights must be non-negative with positive sum"));
            }
        }
        if attrs.income.len() > 9 || attrs.education.len() > 4 {
            return Err(invalid("income has at most 9 codes, education at most 4"));
        }
        if attrs.sqft.0 == 0 || attrs.sqft.1 < attrs.sqft.0 {
            return Err(invalid("sqft range must be positive and ordered"));
        }
        for (lo, hi) in [self.base_load, self.amplitude] {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return Err(invalid("load ranges must be positive and ordered"));
            }
        }
        Ok(())
    }

    /// Feature names linked to each archetype.
    pub fn planted(&self) -> Vec<Vec<String>> {
        let mut out = vec![Vec::new(); self.archetypes.len()];
        for l in &self.links {
            if !out[l.archetype].contains(&l.feature) {
                out[l.archetype].push(l.feature.clone());
            }
        }
        out
    }

    /// True pattern distribution implied by the links for one household.
    pub fn true_distribution(&self, socio: &SocioRecord) -> Vec<f64> {
        let x = socio.feature_vector();
        let mut logits = vec![0.0; self.archetypes.len()];
        for l in &self.links {
            let f = FEATURE_NAMES
                .iter()
                .position(|n| *n == l.feature)
                .expect("validated");
            let (lo, hi) = self.attributes.support(f);
            let pos = if hi > lo { ((x[f] - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 };
            logits[l.archetype] += l.strength * pos;
        }
        softmax(&logits)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticHousehold {
    pub socio: SocioRecord,
    pub true_distribution: Vec<f64>,
    /// Archetype drawn for each day, in date order.
    pub labels: Vec<(NaiveDate, usize)>,
}

impl SyntheticHousehold {
    pub fn label_counts(&self, class: DayClass, k: usize) -> Vec<usize> {
        let mut c = vec![0; k];
        for (d, l) in &self.labels {
            if DayClass::of(*d) == class {
                c[*l] += 1;
            }
        }
        c
    }

    /// Share of the household's days of `class` drawn from each archetype.
    pub fn empirical_distribution(&self, class: DayClass, k: usize) -> Option<Vec<f64>> {
        let c = self.label_counts(class, k);
        let total: usize = c.iter().sum();
        (total > 0).then(|| c.iter().map(|&x| x as f64 / total as f64).collect())
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn draw(weights: &[f64], rng: &mut impl Rng) -> usize {
    WeightedIndex::new(weights).expect("validated weights").sample(rng)
}

fn sample_household(cfg: &GeneratorConfig, i: usize) -> SyntheticHousehold {
    let mut rng = stream(cfg.seed, 2 * i as u64);
    let a = &cfg.attributes;
    let mut age_counts = [0u32; 5];
    for (slot, w) in age_counts.iter_mut().zip(&a.age_counts) {
        *slot = draw(w, &mut rng) as u32;
    }
    let income_code = draw(&a.income, &mut rng) as u8 + 1;
    let education_code = draw(&a.education, &mut rng) as u8 + 1;
    let steps = (a.sqft.1 - a.sqft.0) / 50;
    let sqft = a.sqft.0 + 50 * rng.random_range(0..=steps);
    let socio = SocioRecord {
        household_id: format!("h{:04}", i + 1),
        age_counts,
        income_code,
        education_code,
        sqft,
    };
    let true_distribution = cfg.true_distribution(&socio);
    let pick = WeightedIndex::new(&true_distribution).expect("softmax weights are positive");
    let labels = (0..cfg.days)
        .map(|d| {
            let date = cfg.start_date + chrono::Duration::days(d as i64);
            (date, pick.sample(&mut rng))
        })
        .collect();
    SyntheticHousehold {
        socio,
        true_distribution,
        labels,
    }
}

/// Attributes, true distributions and daily archetype draws, without hourly data.
pub fn sample_cohort(cfg: &GeneratorConfig) -> Result<Vec<SyntheticHousehold>, SynthError> {
    cfg.validate()?;
    Ok((0..cfg.households).map(|i| sample_household(cfg, i)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub household_id: String,
    pub true_distribution: Vec<f64>,
    pub weekday_counts: Vec<usize>,
    pub weekend_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub archetypes: Vec<Vec<f64>>,
    pub weekend_archetypes: Vec<Vec<f64>>,
    /// Linked feature names per archetype.
    pub planted: Vec<Vec<String>>,
    pub households: Vec<TruthRecord>,
}

impl GroundTruth {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("truth serializes")
    }
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub meter_csv: Vec<u8>,
    pub survey_csv: Vec<u8>,
    pub truth: GroundTruth,
    pub households: Vec<SyntheticHousehold>,
}

/// Full generation: cohort sampling plus hourly meter rows and the survey file.
pub fn generate(cfg: &GeneratorConfig) -> Result<Generated, SynthError> {
    let households = sample_cohort(cfg)?;
    let k = cfg.archetypes.len();
    let normal = Normal::new(0.0, cfg.noise).map_err(|e| invalid(e.to_string()))?;

    let mut meter = String::from("household_id,timestamp,kwh\n");
    for (i, h) in households.iter().enumerate() {
        let mut rng = stream(cfg.seed, 2 * i as u64 + 1);
        let base = rng.random_range(cfg.base_load.0..=cfg.base_load.1);
        let amp = rng.random_range(cfg.amplitude.0..=cfg.amplitude.1);
        for (date, label) in &h.labels {
            let shape = match DayClass::of(*date) {
                DayClass::Weekday => &cfg.archetypes[*label],
                DayClass::Weekend => &cfg.weekend()[*label],
            };
            for (hour, v) in shape.iter().enumerate() {
                let noisy = if cfg.noise > 0.0 { v + normal.sample(&mut rng) } else { *v };
                let kwh = (base + amp * noisy).max(0.0);
                meter.push_str(&format!(
                    "{},{}T{:02}:00:00,{}\n",
                    h.socio.household_id, date, hour, kwh
                ));
            }
        }
    }

    let socio: Vec<SocioRecord> = households.iter().map(|h| h.socio.clone()).collect();
    let mut survey = Vec::new();
    ingest::write_survey(&socio, &mut survey).map_err(|e| invalid(e.to_string()))?;

    let truth = GroundTruth {
        seed: cfg.seed,
        archetypes: cfg.archetypes.clone(),
        weekend_archetypes: cfg.weekend().to_vec(),
        planted: cfg.planted(),
        households: households
            .iter()
            .map(|h| TruthRecord {
                household_id: h.socio.household_id.clone(),
                true_distribution: h.true_distribution.clone(),
                weekday_counts: h.label_counts(DayClass::Weekday, k),
                weekend_counts: h.label_counts(DayClass::Weekend, k),
            })
            .collect(),
    };
    Ok(Generated {
        meter_csv: meter.into_bytes(),
        survey_csv: survey,
        truth,
        households,
    })
}

/// Matches each recovered medoid to a distinct archetype, minimizing the
/// worst distance. Returns the matched distances in medoid order, or `None`
/// when the counts differ.
pub fn match_medoids(medoids: &[Vec<f64>], archetypes: &[Vec<f64>]) -> Option<Vec<f64>> {
    if medoids.len() != archetypes.len() || medoids.len() > 8 {
        return None;
    }
    let k = medoids.len();
    let d: Vec<Vec<f64>> = medoids
        .iter()
        .map(|m| {
            archetypes
                .iter()
                .map(|a| crate::cluster::distance(m, a).unwrap_or(f64::INFINITY))
                .collect()
        })
        .collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut perm: Vec<usize> = (0..k).collect();
    permutations(&mut perm, 0, &mut |p| {
        let worst = (0..k).map(|i| d[i][p[i]]).fold(0.0, f64::max);
        if best.as_ref().is_none_or(|(w, _)| worst < *w) {
            best = Some((worst, p.to_vec()));
        }
    });
    best.map(|(_, p)| (0..k).map(|i| d[i][p[i]]).collect())
}

fn permutations(items: &mut Vec<usize>, at: usize, visit: &mut impl FnMut(&[usize])) {
    if at == items.len() {
        visit(items);
        return;
    }
    for i in at..items.len() {
        items.swap(at, i);
        permutations(items, at + 1, visit);
        items.swap(at, i);
    }
}

/// Household id to index map over a sampled cohort.
pub fn index_by_id(households: &[SyntheticHousehold]) -> BTreeMap<String, usize> {
    households
        .iter()
        .enumerate()
        .map(|(i, h)| (h.socio.household_id.clone(), i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{distance, kmedoids_fit, Distances};

    #[test]
    fn templates_are_normalized_and_distinct() {
        let t = templates();
        assert_eq!(t.len(), 6);
        for (_, s) in &t {
            assert_eq!(s.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
            assert_eq!(s.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
        }
        for i in 0..t.len() {
            for j in i + 1..t.len() {
                let d = distance(&t[i].1, &t[j].1).unwrap();
                assert!(d > 1.2, "{} vs {}: {d}", t[i].0, t[j].0);
            }
        }
        for (name, s) in &t[..4] {
            let peak = s.iter().position(|&v| v == 1.0).unwrap();
            assert!(peak >= 15, "{name} peaks at {peak}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GeneratorConfig {
            households: 12,
            days: 10,
            seed: 3,
            ..GeneratorConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.meter_csv, b.meter_csv);
        assert_eq!(a.survey_csv, b.survey_csv);
        assert_eq!(a.truth.to_json(), b.truth.to_json());
        let other = generate(&GeneratorConfig { seed: 4, ..cfg }).unwrap();
        assert_ne!(a.meter_csv, other.meter_csv);
    }

    #[test]
    fn noiseless_single_archetype_round_trips() {
        let shape = templates()[0].1.to_vec();
        let cfg = GeneratorConfig {
            households: 10,
            days: 14,
            archetypes: vec![shape.clone()],
            weekend_archetypes: None,
            links: vec![],
            noise: 0.0,
            ..GeneratorConfig::default()
        };
        let g = generate(&cfg).unwrap();
        let meter = ingest::parse_meter(g.meter_csv.as_slice()).unwrap();
        let survey = ingest::parse_survey(g.survey_csv.as_slice()).unwrap();
        let (cohort, report) = ingest::build_cohort(&meter, &survey);
        assert_eq!(report.incomplete_days + report.degenerate_days, 0);
        assert_eq!(cohort.weekday.len() + cohort.weekend.len(), 140);
        for p in cohort.weekday.iter().chain(&cohort.weekend) {
            for (a, b) in p.values.iter().zip(&shape) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let values: Vec<[f64; HOURS]> = cohort.weekday.iter().map(|p| p.values).collect();
        let dist = Distances::new(&values).unwrap();
        let fit = kmedoids_fit(&dist, 1, 0, 10).unwrap();
        assert!(fit.cluster_score < 1e-9);
    }

    #[test]
    fn config_validation() {
        let ok = GeneratorConfig::default();
        assert!(ok.validate().is_ok());
        let bad = [
            GeneratorConfig { households: 5, ..ok.clone() },
            GeneratorConfig { archetypes: vec![vec![0.5; 24]], weekend_archetypes: None, ..ok.clone() },
            GeneratorConfig {
                links: vec![Link { feature: "pets".into(), archetype: 0, strength: 1.0 }],
                ..ok.clone()
            },
            GeneratorConfig {
                links: vec![Link { feature: "income".into(), archetype: 9, strength: 1.0 }],
                ..ok.clone()
            },
            GeneratorConfig { noise: -1.0, ..ok.clone() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(SynthError::ConfigInvalid(_))));
        }
    }

    #[test]
    fn medoid_matching() {
        let a = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let m = vec![vec![1.0, 0.9], vec![0.1, 0.0]];
        let d = match_medoids(&m, &a).unwrap();
        assert!((d[0] - 0.1).abs() < 1e-12 && (d[1] - 0.1).abs() < 1e-12);
        assert!(match_medoids(&m[..1], &a).is_none());
    }
}
