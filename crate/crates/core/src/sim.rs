//! Seeded Monte Carlo generation of calibration datasets.
//!
//! Every pulse draws a photon-pair number from the source, a tomographer click
//! from the binomial loss model, and a DUT outcome from the detector's POVM
//! column. Pulses are grouped into fixed-size blocks; each block has its own
//! ChaCha8 stream keyed by `(kind, setting, block)`, so a run is reproducible
//! bit-for-bit from its seed regardless of how blocks are scheduled.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Hypergeometric};
use serde::{Deserialize, Serialize};

use crate::error::{check_unit_interval, Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::model::{
    coherent_response, no_click_powers, theoretical_tree_povm, DetectorTreeSpec,
    EfficiencySchedule, PoissonSource, PovmMatrix, SIMULATION_TRUNCATION,
};

/// Pulses per RNG block.
pub const BLOCK_PULSES: u64 = 1 << 18;

const STREAM_TWIN: u64 = 0;
const STREAM_COHERENT: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_BOOTSTRAP: u64 = 3;

fn stream_id(kind: u64, setting: usize, block: u64) -> u64 {
    (kind << 60) | ((setting as u64 & 0xFFF) << 48) | (block & 0xFFFF_FFFF_FFFF)
}

fn block_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One simulated event: DUT outcome paired with the tomographer verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TrialOutcome {
    pub dut_outcome: usize,
    pub tomo_click: bool,
}

/// Tallies at one tomographer efficiency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingCounts {
    pub eta: f64,
    pub trials: u64,
    /// `yes[n]`: DUT outcome `n` with a tomographer click.
    pub yes: Vec<u64>,
    /// `no[n]`: DUT outcome `n` without a click.
    pub no: Vec<u64>,
}

impl SettingCounts {
    pub fn n_outcomes(&self) -> usize {
        self.yes.len()
    }

    pub fn count(&self, outcome: TrialOutcome) -> u64 {
        if outcome.tomo_click {
            self.yes[outcome.dut_outcome]
        } else {
            self.no[outcome.dut_outcome]
        }
    }

    /// Total events without a tomographer click.
    pub fn no_click_total(&self) -> u64 {
        self.no.iter().sum()
    }

    fn cells(&self) -> Vec<u64> {
        self.yes.iter().chain(&self.no).copied().collect()
    }

    fn from_cells(eta: f64, cells: &[u64]) -> Self {
        let k = cells.len() / 2;
        Self {
            eta,
            trials: cells.iter().sum(),
            yes: cells[..k].to_vec(),
            no: cells[k..].to_vec(),
        }
    }
}

/// Parameters the data was generated with, when known.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub mu: Option<f64>,
    pub eta_dut: Option<f64>,
    pub seed: Option<u64>,
    pub pulses_per_setting: Option<u64>,
    pub simulation_truncation: Option<usize>,
}

/// Twin-beam counts for every efficiency of a schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct CountsDataset {
    schedule: EfficiencySchedule,
    settings: Vec<SettingCounts>,
    pub metadata: DatasetMetadata,
}

impl CountsDataset {
    pub fn new(settings: Vec<SettingCounts>, metadata: DatasetMetadata) -> Result<Self> {
        let schedule = EfficiencySchedule::new(settings.iter().map(|s| s.eta).collect())?;
        let n_outcomes = settings[0].n_outcomes();
        for (i, s) in settings.iter().enumerate() {
            if s.yes.len() != n_outcomes || s.no.len() != n_outcomes {
                return Err(Error::DimensionMismatch(format!(
                    "setting {i} has {}/{} outcome cells, expected {n_outcomes}",
                    s.yes.len(),
                    s.no.len()
                )));
            }
            let total: u64 = s.yes.iter().chain(&s.no).sum();
            if total != s.trials {
                return Err(Error::InvalidInput(format!(
                    "setting {i} (eta = {}): counts sum to {total} but trials = {}",
                    s.eta, s.trials
                )));
            }
        }
        Ok(Self {
            schedule,
            settings,
            metadata,
        })
    }

    pub fn schedule(&self) -> &EfficiencySchedule {
        &self.schedule
    }

    pub fn settings(&self) -> &[SettingCounts] {
        &self.settings
    }

    pub fn n_outcomes(&self) -> usize {
        self.settings[0].n_outcomes()
    }

    pub fn total_trials(&self) -> u64 {
        self.settings.iter().map(|s| s.trials).sum()
    }

    /// Unconditional no-click frequency per efficiency.
    pub fn no_click_frequencies(&self) -> Vec<f64> {
        self.settings
            .iter()
            .map(|s| s.no_click_total() as f64 / s.trials as f64)
            .collect()
    }

    pub fn trials(&self) -> Vec<u64> {
        self.settings.iter().map(|s| s.trials).collect()
    }
}

/// Coherent-probe counts per intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherentCounts {
    pub alpha_sq: f64,
    pub trials: u64,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherentDataset {
    pub settings: Vec<CoherentCounts>,
    pub seed: Option<u64>,
}

impl CoherentDataset {
    pub fn new(settings: Vec<CoherentCounts>, seed: Option<u64>) -> Result<Self> {
        if settings.is_empty() {
            return Err(Error::InvalidInput("coherent dataset is empty".into()));
        }
        for (i, s) in settings.iter().enumerate() {
            if s.counts.iter().sum::<u64>() != s.trials {
                return Err(Error::InvalidInput(format!(
                    "coherent setting {i}: counts do not sum to trials"
                )));
            }
        }
        Ok(Self { settings, seed })
    }

    pub fn intensities(&self) -> Vec<f64> {
        self.settings.iter().map(|s| s.alpha_sq).collect()
    }
}

/// Knobs shared by the simulators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    /// Photon-number truncation of the simulated source.
    pub truncation: usize,
    pub execution: Execution,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            truncation: SIMULATION_TRUNCATION,
            execution: Execution::default(),
        }
    }
}

fn cumulative(p: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut cdf: Vec<f64> = p
        .iter()
        .map(|x| {
            acc += x;
            acc
        })
        .collect();
    if let Some(last) = cdf.last_mut() {
        *last = f64::INFINITY;
    }
    cdf
}

#[inline]
fn sample_cdf(cdf: &[f64], u: f64) -> usize {
    cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1)
}

fn blocks(pulses: u64) -> Vec<u64> {
    let full = pulses / BLOCK_PULSES;
    let rest = pulses % BLOCK_PULSES;
    let mut sizes = vec![BLOCK_PULSES; full as usize];
    if rest > 0 {
        sizes.push(rest);
    }
    sizes
}

fn check_pulses(pulses: u64) -> Result<()> {
    if pulses == 0 {
        return Err(Error::InvalidInput("pulses per setting must be at least 1".into()));
    }
    Ok(())
}

/// Simulates the twin-beam experiment at every efficiency of `schedule`.
pub fn simulate_twin_beam_run(
    source: &PoissonSource,
    tree: &DetectorTreeSpec,
    schedule: &EfficiencySchedule,
    pulses_per_setting: u64,
    seed: u64,
) -> Result<CountsDataset> {
    simulate_twin_beam_run_with(
        source,
        tree,
        schedule,
        pulses_per_setting,
        seed,
        SimOptions::default(),
    )
}

pub fn simulate_twin_beam_run_with(
    source: &PoissonSource,
    tree: &DetectorTreeSpec,
    schedule: &EfficiencySchedule,
    pulses_per_setting: u64,
    seed: u64,
    options: SimOptions,
) -> Result<CountsDataset> {
    check_pulses(pulses_per_setting)?;
    let truncation = options.truncation;
    let povm = theoretical_tree_povm(tree, truncation)?;
    let photon_cdf = cumulative(source.distribution(truncation).probs());
    let dut_cdfs: Vec<Vec<f64>> = (0..=truncation).map(|m| cumulative(&povm.column(m))).collect();
    let n_outcomes = povm.n_outcomes();

    let block_sizes = blocks(pulses_per_setting);
    let n_blocks = block_sizes.len();
    let tasks = schedule.len() * n_blocks;

    let partials = map_indexed(options.execution, tasks, |task| {
        let setting = task / n_blocks;
        let block = task % n_blocks;
        let no_click = no_click_powers(schedule.etas()[setting], truncation);
        let mut rng = block_rng(seed, stream_id(STREAM_TWIN, setting, block as u64));
        let mut cells = vec![0u64; 2 * n_outcomes];
        for _ in 0..block_sizes[block] {
            let m = sample_cdf(&photon_cdf, rng.random::<f64>());
            let click = rng.random::<f64>() >= no_click[m];
            let n = sample_cdf(&dut_cdfs[m], rng.random::<f64>());
            cells[if click { n } else { n_outcomes + n }] += 1;
        }
        cells
    });

    let settings = schedule
        .etas()
        .iter()
        .enumerate()
        .map(|(i, &eta)| {
            let mut cells = vec![0u64; 2 * n_outcomes];
            for part in &partials[i * n_blocks..(i + 1) * n_blocks] {
                for (c, p) in cells.iter_mut().zip(part) {
                    *c += p;
                }
            }
            SettingCounts::from_cells(eta, &cells)
        })
        .collect();

    CountsDataset::new(
        settings,
        DatasetMetadata {
            mu: Some(source.mu()),
            eta_dut: Some(tree.eta_dut()),
            seed: Some(seed),
            pulses_per_setting: Some(pulses_per_setting),
            simulation_truncation: Some(truncation),
        },
    )
}

/// Simulates coherent-state probing of `povm` at each intensity.
pub fn simulate_coherent_run(
    povm: &PovmMatrix,
    probe_intensities: &[f64],
    pulses_per_setting: u64,
    seed: u64,
) -> Result<CoherentDataset> {
    simulate_coherent_run_with(
        povm,
        probe_intensities,
        pulses_per_setting,
        seed,
        Execution::default(),
    )
}

pub fn simulate_coherent_run_with(
    povm: &PovmMatrix,
    probe_intensities: &[f64],
    pulses_per_setting: u64,
    seed: u64,
    execution: Execution,
) -> Result<CoherentDataset> {
    check_pulses(pulses_per_setting)?;
    let cdfs = probe_intensities
        .iter()
        .map(|&a| coherent_response(povm, a).map(|p| cumulative(&p)))
        .collect::<Result<Vec<_>>>()?;
    let n_outcomes = povm.n_outcomes();
    let block_sizes = blocks(pulses_per_setting);
    let n_blocks = block_sizes.len();

    let partials = map_indexed(execution, cdfs.len() * n_blocks, |task| {
        let setting = task / n_blocks;
        let block = task % n_blocks;
        let mut rng = block_rng(seed, stream_id(STREAM_COHERENT, setting, block as u64));
        let mut counts = vec![0u64; n_outcomes];
        for _ in 0..block_sizes[block] {
            counts[sample_cdf(&cdfs[setting], rng.random::<f64>())] += 1;
        }
        counts
    });

    let settings = probe_intensities
        .iter()
        .enumerate()
        .map(|(i, &alpha_sq)| {
            let mut counts = vec![0u64; n_outcomes];
            for part in &partials[i * n_blocks..(i + 1) * n_blocks] {
                for (c, p) in counts.iter_mut().zip(part) {
                    *c += p;
                }
            }
            CoherentCounts {
                alpha_sq,
                trials: pulses_per_setting,
                counts,
            }
        })
        .collect();
    CoherentDataset::new(settings, Some(seed))
}

/// Largest photon number accepted by [`enumerate_tree_outcome_probs`].
pub const MAX_ENUMERATION_PHOTONS: usize = 12;

/// Exact joint distribution of `(DUT outcome, tomographer click)` for a pair
/// state with exactly `m` photons per arm, by enumerating every assignment of
/// the DUT-arm photons to {lost, SPAD A, SPAD B} and every number of photons
/// the tomographer detects.
pub fn enumerate_tree_outcome_probs(
    m: usize,
    eta_dut: f64,
    eta_tomo: f64,
) -> Result<BTreeMap<TrialOutcome, f64>> {
    if m > MAX_ENUMERATION_PHOTONS {
        return Err(Error::InvalidInput(format!(
            "enumeration over 3^{m} routings exceeds the limit m <= {MAX_ENUMERATION_PHOTONS}"
        )));
    }
    check_unit_interval("eta_dut", eta_dut)?;
    check_unit_interval("eta_tomo", eta_tomo)?;

    let mut dut = [0.0f64; 3];
    let mut routing = vec![0u8; m];
    loop {
        let mut prob = 1.0;
        let (mut a, mut b) = (false, false);
        for &r in &routing {
            match r {
                0 => prob *= 1.0 - eta_dut,
                1 => {
                    prob *= eta_dut / 2.0;
                    a = true;
                }
                _ => {
                    prob *= eta_dut / 2.0;
                    b = true;
                }
            }
        }
        dut[a as usize + b as usize] += prob;

        // Advance the base-3 counter; stop after wrapping around.
        let mut i = 0;
        while i < m {
            routing[i] += 1;
            if routing[i] < 3 {
                break;
            }
            routing[i] = 0;
            i += 1;
        }
        if i == m {
            break;
        }
    }

    let mut detected = vec![0.0f64; m + 1];
    let mut binom = 1.0f64;
    for (k, d) in detected.iter_mut().enumerate() {
        *d = binom * eta_tomo.powi(k as i32) * (1.0 - eta_tomo).powi((m - k) as i32);
        binom = binom * (m - k) as f64 / (k + 1) as f64;
    }
    let p_no = detected[0];
    let p_yes: f64 = detected[1..].iter().sum();

    let mut out = BTreeMap::new();
    for (n, &p) in dut.iter().enumerate() {
        out.insert(
            TrialOutcome {
                dut_outcome: n,
                tomo_click: true,
            },
            p * p_yes,
        );
        out.insert(
            TrialOutcome {
                dut_outcome: n,
                tomo_click: false,
            },
            p * p_no,
        );
    }
    Ok(out)
}

/// Relative frequencies at one efficiency. Conditional frequencies are `None`
/// for outcomes that never occurred.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyRow {
    pub eta: f64,
    pub trials: u64,
    pub f_outcome: Vec<f64>,
    pub f_yes_given: Vec<Option<f64>>,
    pub f_no_given: Vec<Option<f64>>,
}

impl FrequencyRow {
    /// `f(n) f(yes | n)`, the observed joint probability (zero for empty cells).
    pub fn p_exp_yes(&self, n: usize) -> f64 {
        self.f_yes_given[n].map_or(0.0, |f| f * self.f_outcome[n])
    }

    pub fn p_exp_no(&self, n: usize) -> f64 {
        self.f_no_given[n].map_or(0.0, |f| f * self.f_outcome[n])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub rows: Vec<FrequencyRow>,
}

impl FrequencyTable {
    pub fn n_outcomes(&self) -> usize {
        self.rows[0].f_outcome.len()
    }
}

/// Relative frequencies `f(n)`, `f(yes | n)` and `f(no | n)` per efficiency.
pub fn tally_frequencies(dataset: &CountsDataset) -> Result<FrequencyTable> {
    if dataset.settings().is_empty() {
        return Err(Error::InvalidInput("dataset has no settings".into()));
    }
    let rows = dataset
        .settings()
        .iter()
        .map(|s| {
            if s.trials == 0 {
                return Err(Error::InvalidInput(format!(
                    "efficiency {} has no trials",
                    s.eta
                )));
            }
            let trials = s.trials as f64;
            let mut f_outcome = Vec::with_capacity(s.n_outcomes());
            let mut f_yes_given = Vec::with_capacity(s.n_outcomes());
            let mut f_no_given = Vec::with_capacity(s.n_outcomes());
            for n in 0..s.n_outcomes() {
                let total = s.yes[n] + s.no[n];
                f_outcome.push(total as f64 / trials);
                if total == 0 {
                    f_yes_given.push(None);
                    f_no_given.push(None);
                } else {
                    f_yes_given.push(Some(s.yes[n] as f64 / total as f64));
                    f_no_given.push(Some(s.no[n] as f64 / total as f64));
                }
            }
            Ok(FrequencyRow {
                eta: s.eta,
                trials: s.trials,
                f_outcome,
                f_yes_given,
                f_no_given,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FrequencyTable { rows })
}

/// Draws a subsample of `take` events without replacement from `cells`
/// (multivariate hypergeometric, by sequential conditioning).
fn draw_without_replacement(rng: &mut ChaCha8Rng, cells: &[u64], take: u64) -> Vec<u64> {
    let mut remaining_pop: u64 = cells.iter().sum();
    let mut remaining_take = take;
    let mut out = Vec::with_capacity(cells.len());
    for &c in cells {
        let x = if remaining_take == 0 || c == 0 {
            0
        } else if c == remaining_pop {
            remaining_take
        } else {
            sample_hypergeometric(rng, remaining_pop, c, remaining_take)
        };
        out.push(x);
        remaining_pop -= c;
        remaining_take -= x;
    }
    out
}

/// Number of marked items in a draw of `take` from `population` items of
/// which `marked` are marked.
fn sample_hypergeometric(rng: &mut ChaCha8Rng, population: u64, marked: u64, take: u64) -> u64 {
    match Hypergeometric::new(population, marked, take) {
        Ok(d) => d.sample(rng),
        // rand_distr rejects some moderate parameter sets (for example
        // N = 2000, K = n = 100) as underflowing. Fall back to inverse
        // transform over the support, built from the pmf ratio in log space.
        Err(_) => {
            let lo = take.saturating_sub(population - marked);
            let hi = marked.min(take);
            let mut log_w = Vec::with_capacity((hi - lo + 1) as usize);
            let mut acc = 0.0f64;
            log_w.push(acc);
            for x in lo..hi {
                let (x, k, n, rest) = (x as f64, marked as f64, take as f64, (population - marked) as f64);
                acc += ((k - x) * (n - x)).ln() - ((x + 1.0) * (rest - n + x + 1.0)).ln();
                log_w.push(acc);
            }
            let peak = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = log_w.iter().map(|l| (l - peak).exp()).collect();
            let u = rng.random::<f64>() * w.iter().sum::<f64>();
            let mut cum = 0.0;
            for (i, wi) in w.iter().enumerate() {
                cum += wi;
                if u < cum {
                    return lo + i as u64;
                }
            }
            hi
        }
    }
}

/// Multinomial resample of `trials` events with cell probabilities `cells / total`.
fn resample_with_replacement(rng: &mut ChaCha8Rng, cells: &[u64]) -> Vec<u64> {
    let total: u64 = cells.iter().sum();
    let mut remaining_n = total;
    let mut remaining_mass = total;
    let mut out = Vec::with_capacity(cells.len());
    for &c in cells {
        let x = if remaining_n == 0 || c == 0 {
            0
        } else if c >= remaining_mass {
            remaining_n
        } else {
            Binomial::new(remaining_n, c as f64 / remaining_mass as f64)
                .expect("valid binomial parameters")
                .sample(rng)
        };
        out.push(x);
        remaining_n -= x;
        remaining_mass -= c;
    }
    out
}

fn split_sizes(trials: u64, parts: usize) -> Vec<u64> {
    let base = trials / parts as u64;
    let extra = (trials % parts as u64) as usize;
    (0..parts).map(|i| base + u64::from(i < extra)).collect()
}

/// Randomly partitions each setting's events into `parts` disjoint subsets of
/// near-equal size, as if the pulses had been dealt into separate runs.
pub fn split_counts(dataset: &CountsDataset, parts: usize, seed: u64) -> Result<Vec<CountsDataset>> {
    if parts == 0 {
        return Err(Error::InvalidInput("cannot split into zero parts".into()));
    }
    let mut per_part: Vec<Vec<SettingCounts>> = vec![Vec::new(); parts];
    for (i, s) in dataset.settings().iter().enumerate() {
        if s.trials < parts as u64 {
            return Err(Error::InvalidInput(format!(
                "efficiency {} has {} trials, fewer than {parts} replicates",
                s.eta, s.trials
            )));
        }
        let mut rng = block_rng(seed, stream_id(STREAM_SPLIT, i, 0));
        let mut remaining = s.cells();
        for (r, size) in split_sizes(s.trials, parts).into_iter().enumerate() {
            let part = if r + 1 == parts {
                remaining.clone()
            } else {
                draw_without_replacement(&mut rng, &remaining, size)
            };
            for (rem, p) in remaining.iter_mut().zip(&part) {
                *rem -= p;
            }
            per_part[r].push(SettingCounts::from_cells(s.eta, &part));
        }
    }
    per_part
        .into_iter()
        .map(|settings| CountsDataset::new(settings, dataset.metadata.clone()))
        .collect()
}

/// Bootstrap replicate `index` of a dataset.
pub fn bootstrap_counts(dataset: &CountsDataset, index: usize, seed: u64) -> Result<CountsDataset> {
    let settings = dataset
        .settings()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = block_rng(seed, stream_id(STREAM_BOOTSTRAP, i, index as u64));
            SettingCounts::from_cells(s.eta, &resample_with_replacement(&mut rng, &s.cells()))
        })
        .collect();
    CountsDataset::new(settings, dataset.metadata.clone())
}

/// Disjoint split of a coherent dataset, per intensity.
pub fn split_coherent(dataset: &CoherentDataset, parts: usize, seed: u64) -> Result<Vec<CoherentDataset>> {
    if parts == 0 {
        return Err(Error::InvalidInput("cannot split into zero parts".into()));
    }
    let mut per_part: Vec<Vec<CoherentCounts>> = vec![Vec::new(); parts];
    for (i, s) in dataset.settings.iter().enumerate() {
        if s.trials < parts as u64 {
            return Err(Error::InvalidInput(format!(
                "intensity {} has {} trials, fewer than {parts} replicates",
                s.alpha_sq, s.trials
            )));
        }
        let mut rng = block_rng(seed, stream_id(STREAM_SPLIT, i, 1));
        let mut remaining = s.counts.clone();
        for (r, size) in split_sizes(s.trials, parts).into_iter().enumerate() {
            let part = if r + 1 == parts {
                remaining.clone()
            } else {
                draw_without_replacement(&mut rng, &remaining, size)
            };
            for (rem, p) in remaining.iter_mut().zip(&part) {
                *rem -= p;
            }
            per_part[r].push(CoherentCounts {
                alpha_sq: s.alpha_sq,
                trials: part.iter().sum(),
                counts: part,
            });
        }
    }
    per_part
        .into_iter()
        .map(|settings| CoherentDataset::new(settings, dataset.seed))
        .collect()
}

pub fn bootstrap_coherent(dataset: &CoherentDataset, index: usize, seed: u64) -> Result<CoherentDataset> {
    let settings = dataset
        .settings
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = block_rng(seed, stream_id(STREAM_BOOTSTRAP, i, (1 << 40) | index as u64));
            CoherentCounts {
                alpha_sq: s.alpha_sq,
                trials: s.trials,
                counts: resample_with_replacement(&mut rng, &s.counts),
            }
        })
        .collect();
    CoherentDataset::new(settings, dataset.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setting(eta: f64, yes: Vec<u64>, no: Vec<u64>) -> SettingCounts {
        let trials = yes.iter().chain(&no).sum();
        SettingCounts { eta, trials, yes, no }
    }

    #[test]
    fn vacuum_source_never_clicks() {
        let ds = simulate_twin_beam_run(
            &PoissonSource::new(1e-12).unwrap(),
            &DetectorTreeSpec::two_spad(0.5).unwrap(),
            &EfficiencySchedule::default_grid(),
            10_000,
            7,
        )
        .unwrap();
        for s in ds.settings() {
            assert_eq!(s.no[0], s.trials);
        }
    }

    #[test]
    fn zero_pulses_rejected() {
        let err = simulate_twin_beam_run(
            &PoissonSource::new(0.6).unwrap(),
            &DetectorTreeSpec::two_spad(0.5).unwrap(),
            &EfficiencySchedule::default_grid(),
            0,
            1,
        );
        assert!(err.is_err());
    }

    #[test]
    fn vacuum_probe_gives_outcome_zero() {
        let tree = theoretical_tree_povm(&DetectorTreeSpec::two_spad(0.5).unwrap(), 10).unwrap();
        let ds = simulate_coherent_run(&tree, &[0.0], 5000, 3).unwrap();
        assert_eq!(ds.settings[0].counts, vec![5000, 0, 0]);
        assert!(simulate_coherent_run(&tree, &[-0.1], 10, 3).is_err());
    }

    #[test]
    fn enumeration_small_cases() {
        let p = enumerate_tree_outcome_probs(0, 0.4, 0.3).unwrap();
        let vac = TrialOutcome { dut_outcome: 0, tomo_click: false };
        assert_eq!(p[&vac], 1.0);
        assert_eq!(p.values().sum::<f64>(), 1.0);

        let p = enumerate_tree_outcome_probs(1, 0.7, 0.0).unwrap();
        assert!((p[&vac] - 0.3).abs() < 1e-15);
        let one = TrialOutcome { dut_outcome: 1, tomo_click: false };
        assert!((p[&one] - 0.7).abs() < 1e-15);

        let p = enumerate_tree_outcome_probs(2, 0.5, 0.37).unwrap();
        let marginal: Vec<f64> = (0..3)
            .map(|n| {
                p[&TrialOutcome { dut_outcome: n, tomo_click: true }]
                    + p[&TrialOutcome { dut_outcome: n, tomo_click: false }]
            })
            .collect();
        assert!((marginal[0] - 0.25).abs() < 1e-15);
        assert!((marginal[1] - 0.625).abs() < 1e-15);
        assert!((marginal[2] - 0.125).abs() < 1e-15);

        assert!(enumerate_tree_outcome_probs(13, 0.5, 0.5).is_err());
    }

    #[test]
    fn tally_examples() {
        let ds = CountsDataset::new(
            vec![setting(0.1, vec![0, 0, 0], vec![100, 0, 0])],
            DatasetMetadata::default(),
        )
        .unwrap();
        let t = tally_frequencies(&ds).unwrap();
        assert_eq!(t.rows[0].f_outcome[0], 1.0);
        assert_eq!(t.rows[0].f_no_given[0], Some(1.0));
        assert_eq!(t.rows[0].f_yes_given[1], None);

        let ds = CountsDataset::new(
            vec![setting(0.1, vec![0, 30, 0], vec![60, 10, 0])],
            DatasetMetadata::default(),
        )
        .unwrap();
        let t = tally_frequencies(&ds).unwrap();
        assert!((t.rows[0].f_outcome[1] - 0.4).abs() < 1e-15);
        assert_eq!(t.rows[0].f_yes_given[1], Some(0.75));
        assert!((t.rows[0].p_exp_yes(1) - 0.3).abs() < 1e-15);
        assert_eq!(t.rows[0].p_exp_yes(2), 0.0);
    }

    #[test]
    fn inconsistent_counts_rejected() {
        let bad = SettingCounts {
            eta: 0.1,
            trials: 10,
            yes: vec![1, 0, 0],
            no: vec![1, 0, 0],
        };
        assert!(CountsDataset::new(vec![bad], DatasetMetadata::default()).is_err());
    }

    #[test]
    fn hypergeometric_fallback_matches_mean() {
        let mut rng = block_rng(1, 0);
        assert!(Hypergeometric::new(2000, 100, 100).is_err());
        let draws = 20_000;
        let total: u64 = (0..draws).map(|_| sample_hypergeometric(&mut rng, 2000, 100, 100)).sum();
        let mean = total as f64 / draws as f64;
        // E = nK/N = 5, Var ~ 4.5
        assert!((mean - 5.0).abs() < 5.0 * (4.5f64 / draws as f64).sqrt(), "{mean}");
        assert_eq!(sample_hypergeometric(&mut rng, 10, 10, 4), 4);
    }

    #[test]
    fn split_conserves_counts() {
        let ds = simulate_twin_beam_run(
            &PoissonSource::new(0.6).unwrap(),
            &DetectorTreeSpec::two_spad(0.5).unwrap(),
            &EfficiencySchedule::linspace(0.1, 0.5, 3).unwrap(),
            10_007,
            11,
        )
        .unwrap();
        let parts = split_counts(&ds, 7, 5).unwrap();
        assert_eq!(parts.len(), 7);
        for (i, s) in ds.settings().iter().enumerate() {
            let mut cells = vec![0u64; 6];
            for p in &parts {
                for (c, x) in cells.iter_mut().zip(p.settings()[i].cells()) {
                    *c += x;
                }
                let t = p.settings()[i].trials;
                assert!(t == 1429 || t == 1430);
            }
            assert_eq!(cells, s.cells());
        }
        let boot = bootstrap_counts(&ds, 0, 1).unwrap();
        assert_eq!(boot.trials(), ds.trials());
    }
}
