//! Panel data, treatment-history encoding and causal estimands.
//!
//! A length-`k` treatment window `(a_{t-k+1}, …, a_t)` is encoded as the
//! integer `p = Σ_j a_j 2^{k-1-j}`: the oldest treatment is the most
//! significant bit. Periods before the start of the panel count as untreated.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::DenseTensor3;

/// Largest supported history length (the tensor has `2^k` slices).
pub const MAX_HISTORY: usize = 20;

/// Observed longitudinal data. Arrays are unit-major: cell `(i, t)` is at
/// `i·T + t`, covariate `c` of that cell at `(i·T + t)·d + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelData {
    n_units: usize,
    n_periods: usize,
    covariate_dim: usize,
    treatments: Vec<u8>,
    covariates: Vec<f64>,
    outcomes: Vec<f64>,
}

impl PanelData {
    pub fn new(
        n_units: usize,
        n_periods: usize,
        covariate_dim: usize,
        treatments: Vec<u8>,
        covariates: Vec<f64>,
        outcomes: Vec<f64>,
    ) -> Result<Self> {
        if n_units == 0 || n_periods == 0 {
            return Err(invalid(format!(
                "panel needs at least one unit and one period, got N={n_units}, T={n_periods}"
            )));
        }
        let cells = n_units * n_periods;
        let expect = |name: &'static str, want: usize, got: usize| {
            if want == got {
                Ok(())
            } else {
                Err(Error::ShapeMismatch {
                    context: name,
                    expected: vec![want],
                    actual: vec![got],
                })
            }
        };
        expect("panel treatments", cells, treatments.len())?;
        expect("panel outcomes", cells, outcomes.len())?;
        expect("panel covariates", cells * covariate_dim, covariates.len())?;
        if let Some((position, &value)) = treatments.iter().enumerate().find(|(_, &a)| a > 1) {
            return Err(Error::NonBinary { position, value });
        }
        if outcomes.iter().chain(&covariates).any(|v| !v.is_finite()) {
            return Err(invalid("panel outcomes and covariates must be finite"));
        }
        Ok(Self {
            n_units,
            n_periods,
            covariate_dim,
            treatments,
            covariates,
            outcomes,
        })
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariate_dim
    }

    pub fn n_cells(&self) -> usize {
        self.n_units * self.n_periods
    }

    pub fn treatments(&self) -> &[u8] {
        &self.treatments
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn covariates(&self) -> &[f64] {
        &self.covariates
    }

    pub fn treatment(&self, i: usize, t: usize) -> u8 {
        self.treatments[i * self.n_periods + t]
    }

    pub fn outcome(&self, i: usize, t: usize) -> f64 {
        self.outcomes[i * self.n_periods + t]
    }

    /// Covariate vector of cell `(i, t)`.
    pub fn covariate(&self, i: usize, t: usize) -> &[f64] {
        let d = self.covariate_dim;
        let at = (i * self.n_periods + t) * d;
        &self.covariates[at..at + d]
    }

    /// Treatments of unit `i` over all periods.
    pub fn unit_treatments(&self, i: usize) -> &[u8] {
        &self.treatments[i * self.n_periods..(i + 1) * self.n_periods]
    }

    /// Same panel with outcomes replaced.
    pub fn with_outcomes(&self, outcomes: Vec<f64>) -> Result<Self> {
        Self::new(
            self.n_units,
            self.n_periods,
            self.covariate_dim,
            self.treatments.clone(),
            self.covariates.clone(),
            outcomes,
        )
    }

    /// Treatment window ending at `t`, zero-padded before the first period.
    pub fn window(&self, i: usize, t: usize, k: usize) -> Vec<u8> {
        (0..k)
            .map(|j| {
                let s = t as isize - (k - 1 - j) as isize;
                if s < 0 {
                    0
                } else {
                    self.treatment(i, s as usize)
                }
            })
            .collect()
    }

    /// Encoded history of cell `(i, t)`.
    pub fn history(&self, i: usize, t: usize, k: usize) -> usize {
        let row = self.unit_treatments(i);
        let start = (t + 1).saturating_sub(k);
        row[start..=t].iter().fold(0usize, |p, &a| (p << 1) | a as usize)
    }

    /// Long-form CSV: `unit,period,treatment,y,l1..ld`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["unit".to_string(), "period".into(), "treatment".into(), "y".into()];
        header.extend((1..=self.covariate_dim).map(|c| format!("l{c}")));
        w.write_record(&header)?;
        for i in 0..self.n_units {
            for t in 0..self.n_periods {
                let mut rec = vec![
                    i.to_string(),
                    t.to_string(),
                    self.treatment(i, t).to_string(),
                    fmt_f64(self.outcome(i, t)),
                ];
                rec.extend(self.covariate(i, t).iter().map(|&v| fmt_f64(v)));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Parse the long-form CSV written by [`PanelData::write_csv`]. Rows may
    /// appear in any order but must cover every `(unit, period)` exactly once.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let header = rdr.headers()?.clone();
        let col = |name: &str| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingColumn(name.to_string()))
        };
        let (cu, cp, ca, cy) = (col("unit")?, col("period")?, col("treatment")?, col("y")?);
        let mut cov_cols = Vec::new();
        while let Some(pos) = header.iter().position(|h| h == format!("l{}", cov_cols.len() + 1)) {
            cov_cols.push(pos);
        }
        if let Some(stray) = header
            .iter()
            .find(|h| h.starts_with('l') && h[1..].parse::<usize>().is_ok() && !cov_cols.iter().any(|&c| &header[c] == *h))
        {
            return Err(Error::MissingColumn(format!(
                "l{} (found `{stray}` but covariate columns must be numbered from l1 without gaps)",
                cov_cols.len() + 1
            )));
        }
        let d = cov_cols.len();

        let mut rows: HashMap<(usize, usize), (u8, f64, Vec<f64>)> = HashMap::new();
        let (mut max_unit, mut max_period) = (0usize, 0usize);
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            let field = |c: usize| rec.get(c).unwrap_or("");
            let parse_usize = |c: usize, what: &str| {
                field(c).parse::<usize>().map_err(|_| Error::Parse {
                    line,
                    message: format!("{what} `{}` is not a nonnegative integer", field(c)),
                })
            };
            let parse_f64 = |c: usize, what: &str| {
                let v = field(c).parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("{what} `{}` is not a number", field(c)),
                })?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::Parse {
                        line,
                        message: format!("{what} is not finite"),
                    })
                }
            };
            let unit = parse_usize(cu, "unit")?;
            let period = parse_usize(cp, "period")?;
            let a = match field(ca) {
                "0" => 0u8,
                "1" => 1u8,
                other => {
                    return Err(Error::Parse {
                        line,
                        message: format!("treatment `{other}` is not 0 or 1"),
                    })
                }
            };
            let y = parse_f64(cy, "y")?;
            let l = cov_cols
                .iter()
                .enumerate()
                .map(|(c, &pos)| parse_f64(pos, &format!("l{}", c + 1)))
                .collect::<Result<Vec<_>>>()?;
            if rows.insert((unit, period), (a, y, l)).is_some() {
                return Err(Error::Parse {
                    line,
                    message: format!("duplicate row for unit {unit}, period {period}"),
                });
            }
            max_unit = max_unit.max(unit);
            max_period = max_period.max(period);
        }
        if rows.is_empty() {
            return Err(invalid("panel CSV has no data rows"));
        }
        let (n, t) = (max_unit + 1, max_period + 1);
        if rows.len() != n * t {
            return Err(invalid(format!(
                "panel CSV has {} rows but units 0..{n} and periods 0..{t} need {}",
                rows.len(),
                n * t
            )));
        }
        let mut treatments = vec![0u8; n * t];
        let mut outcomes = vec![0.0; n * t];
        let mut covariates = vec![0.0; n * t * d];
        for ((i, s), (a, y, l)) in rows {
            let cell = i * t + s;
            treatments[cell] = a;
            outcomes[cell] = y;
            covariates[cell * d..(cell + 1) * d].copy_from_slice(&l);
        }
        Self::new(n, t, d, treatments, covariates, outcomes)
    }

    pub fn read_csv_path(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    /// JSON form; goes through [`PanelData::new`] so invariants are checked.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: PanelData = serde_json::from_str(text)?;
        Self::new(
            raw.n_units,
            raw.n_periods,
            raw.covariate_dim,
            raw.treatments,
            raw.covariates,
            raw.outcomes,
        )
    }
}

/// Machine-readable float formatting: 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// A length-`k` history encoded as an integer in `[0, 2^k)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HistoryIndex {
    k: usize,
    p: usize,
}

impl HistoryIndex {
    pub fn new(k: usize, p: usize) -> Result<Self> {
        check_k(k)?;
        if p >= 1 << k {
            return Err(invalid(format!("history index {p} out of range for k={k}")));
        }
        Ok(Self { k, p })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn index(&self) -> usize {
        self.p
    }

    /// The window this index encodes, oldest treatment first.
    pub fn decode(&self) -> Vec<u8> {
        (0..self.k).map(|j| ((self.p >> (self.k - 1 - j)) & 1) as u8).collect()
    }

    /// The same history with the most recent treatment set to 0.
    pub fn last_zeroed(&self) -> Self {
        Self { k: self.k, p: self.p & !1 }
    }
}

pub(crate) fn check_k(k: usize) -> Result<()> {
    if k == 0 || k > MAX_HISTORY {
        return Err(invalid(format!("history length k must be in 1..={MAX_HISTORY}, got {k}")));
    }
    Ok(())
}

fn check_k_panel(panel: &PanelData, k: usize) -> Result<()> {
    check_k(k)?;
    if k > panel.n_periods() {
        return Err(invalid(format!(
            "history length k={k} exceeds the number of periods T={}",
            panel.n_periods()
        )));
    }
    Ok(())
}

/// Encode a treatment window, oldest entry first.
pub fn history_index(window: &[u8]) -> Result<HistoryIndex> {
    check_k(window.len())?;
    let mut p = 0usize;
    for (position, &a) in window.iter().enumerate() {
        if a > 1 {
            return Err(Error::NonBinary { position, value: a });
        }
        p = (p << 1) | a as usize;
    }
    Ok(HistoryIndex { k: window.len(), p })
}

/// Realized history index of every cell, unit-major (`N·T` entries).
pub fn realized_histories(panel: &PanelData, k: usize) -> Result<Vec<usize>> {
    check_k_panel(panel, k)?;
    let t = panel.n_periods();
    Ok((0..panel.n_cells()).map(|c| panel.history(c / t, c % t, k)).collect())
}

/// Partition of all cells by realized history: entry `p` lists the `(i, t)`
/// whose last `k` treatments encode to `p`.
pub fn slice_sets(panel: &PanelData, k: usize) -> Result<Vec<Vec<(usize, usize)>>> {
    let hist = realized_histories(panel, k)?;
    let t = panel.n_periods();
    let mut sets = vec![Vec::new(); 1 << k];
    for (c, &p) in hist.iter().enumerate() {
        sets[p].push((c / t, c % t));
    }
    Ok(sets)
}

fn check_estimate(t_hat: &DenseTensor3, panel: &PanelData, k: usize) -> Result<()> {
    let want = [panel.n_units(), panel.n_periods(), 1 << k];
    if t_hat.dims() != want {
        return Err(Error::ShapeMismatch {
            context: "estimated tensor vs panel",
            expected: want.to_vec(),
            actual: t_hat.dims().to_vec(),
        });
    }
    Ok(())
}

/// ATET together with the number of treated cells it averages over.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtetSummary {
    pub atet: f64,
    pub treated_cells: usize,
}

/// Average effect on treated cells: realized history vs. the same history
/// with the current treatment withheld.
pub fn atet(t_hat: &DenseTensor3, panel: &PanelData, k: usize) -> Result<f64> {
    atet_summary(t_hat, panel, k).map(|s| s.atet)
}

pub fn atet_summary(t_hat: &DenseTensor3, panel: &PanelData, k: usize) -> Result<AtetSummary> {
    check_k_panel(panel, k)?;
    check_estimate(t_hat, panel, k)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..panel.n_units() {
        for t in 0..panel.n_periods() {
            if panel.treatment(i, t) == 1 {
                let p = panel.history(i, t, k);
                sum += t_hat.get(i, t, p) - t_hat.get(i, t, p & !1);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::NoTreatedCells);
    }
    Ok(AtetSummary {
        atet: sum / count as f64,
        treated_cells: count,
    })
}

/// Which history slice a contrast reads for a given cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HistorySpec {
    Fixed(HistoryIndex),
    Realized,
    RealizedLastZeroed,
}

impl HistorySpec {
    fn resolve(&self, panel: &PanelData, i: usize, t: usize, k: usize) -> Result<usize> {
        match self {
            HistorySpec::Fixed(h) if h.k() != k => Err(invalid(format!(
                "history index built for k={} used with k={k}",
                h.k()
            ))),
            HistorySpec::Fixed(h) => Ok(h.index()),
            HistorySpec::Realized => Ok(panel.history(i, t, k)),
            HistorySpec::RealizedLastZeroed => Ok(panel.history(i, t, k) & !1),
        }
    }
}

/// Mean of `t_hat[i,t,h1] − t_hat[i,t,h2]` over cells accepted by `filter`.
pub fn general_contrast<F>(
    t_hat: &DenseTensor3,
    panel: &PanelData,
    k: usize,
    h1: HistorySpec,
    h2: HistorySpec,
    filter: F,
) -> Result<f64>
where
    F: Fn(&PanelData, usize, usize) -> bool,
{
    check_k_panel(panel, k)?;
    check_estimate(t_hat, panel, k)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..panel.n_units() {
        for t in 0..panel.n_periods() {
            if filter(panel, i, t) {
                let p1 = h1.resolve(panel, i, t, k)?;
                let p2 = h2.resolve(panel, i, t, k)?;
                sum += t_hat.get(i, t, p1) - t_hat.get(i, t, p2);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptySelection("cell filter selected no cells".into()));
    }
    Ok(sum / count as f64)
}

/// Cell filter selecting treated cells.
pub fn treated(panel: &PanelData, i: usize, t: usize) -> bool {
    panel.treatment(i, t) == 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(super) fn random_panel(n: usize, t: usize, seed: u64) -> PanelData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = (0..n * t).map(|_| rng.random_range(0..2u8)).collect();
        let y = (0..n * t).map(|_| rng.random::<f64>() * 10.0).collect();
        let l = (0..n * t * 2).map(|_| rng.random::<f64>()).collect();
        PanelData::new(n, t, 2, a, l, y).unwrap()
    }

    fn random_tensor(dims: [usize; 3], seed: u64) -> DenseTensor3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseTensor3::from_fn(dims, |_, _, _| rng.random::<f64>() * 4.0 - 2.0)
    }

    #[test]
    fn encoding_examples() {
        assert_eq!(history_index(&[0, 0, 0]).unwrap().index(), 0);
        assert_eq!(history_index(&[1, 0, 1]).unwrap().index(), 5);
        assert!(matches!(
            history_index(&[0, 2, 1]),
            Err(Error::NonBinary { position: 1, value: 2 })
        ));
    }

    #[test]
    fn encoding_round_trips_exhaustively() {
        for k in 1..=10 {
            for p in 0..(1usize << k) {
                let h = HistoryIndex::new(k, p).unwrap();
                assert_eq!(history_index(&h.decode()).unwrap(), h);
            }
        }
    }

    #[test]
    fn panel_history_matches_window() {
        let panel = random_panel(5, 7, 1);
        for k in 1..=4 {
            for i in 0..5 {
                for t in 0..7 {
                    let w = panel.window(i, t, k);
                    assert_eq!(history_index(&w).unwrap().index(), panel.history(i, t, k));
                }
            }
        }
    }

    #[test]
    fn early_periods_are_zero_padded() {
        let panel = PanelData::new(1, 3, 0, vec![1, 1, 0], vec![], vec![0.0; 3]).unwrap();
        assert_eq!(panel.window(0, 0, 3), vec![0, 0, 1]);
        assert_eq!(panel.history(0, 1, 3), 0b011);
        assert_eq!(panel.history(0, 2, 3), 0b110);
    }

    #[test]
    fn all_zero_panel_fills_slice_zero() {
        let panel = PanelData::new(3, 4, 0, vec![0; 12], vec![], vec![1.0; 12]).unwrap();
        let sets = slice_sets(&panel, 2).unwrap();
        assert_eq!(sets[0].len(), 12);
        assert!(sets[1..].iter().all(Vec::is_empty));
    }

    #[test]
    fn single_step_slices_split_on_treatment() {
        let panel = random_panel(4, 6, 2);
        let sets = slice_sets(&panel, 1).unwrap();
        for &(i, t) in &sets[0] {
            assert_eq!(panel.treatment(i, t), 0);
        }
        for &(i, t) in &sets[1] {
            assert_eq!(panel.treatment(i, t), 1);
        }
        assert_eq!(sets[0].len() + sets[1].len(), 24);
    }

    #[test]
    fn slice_sets_match_per_cell_oracle() {
        let panel = random_panel(4, 6, 3);
        let sets = slice_sets(&panel, 2).unwrap();
        let mut seen = [0; 24];
        for (p, cells) in sets.iter().enumerate() {
            for &(i, t) in cells {
                let prev = if t == 0 { 0 } else { panel.treatment(i, t - 1) };
                let want = 2 * prev as usize + panel.treatment(i, t) as usize;
                assert_eq!(p, want);
                seen[i * 6 + t] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn k_larger_than_t_is_rejected() {
        let panel = random_panel(2, 3, 4);
        assert!(slice_sets(&panel, 4).is_err());
        assert!(slice_sets(&panel, 0).is_err());
    }

    #[test]
    fn atet_single_cell() {
        let panel = PanelData::new(1, 1, 0, vec![1], vec![], vec![0.0]).unwrap();
        let t_hat = DenseTensor3::from_vec([1, 1, 2], vec![4.0, 7.0]).unwrap();
        assert_eq!(atet(&t_hat, &panel, 1).unwrap(), 3.0);
    }

    #[test]
    fn atet_needs_treated_cells() {
        let panel = PanelData::new(2, 2, 0, vec![0; 4], vec![], vec![0.0; 4]).unwrap();
        let t_hat = DenseTensor3::zeros([2, 2, 2]);
        assert!(matches!(atet(&t_hat, &panel, 1), Err(Error::NoTreatedCells)));
    }

    #[test]
    fn atet_zero_for_history_invariant_tensor() {
        let panel = random_panel(3, 4, 5);
        let t_hat = DenseTensor3::from_fn([3, 4, 4], |i, t, _| (i * 10 + t) as f64);
        assert_eq!(atet(&t_hat, &panel, 2).unwrap(), 0.0);
    }

    #[test]
    fn atet_matches_enumeration() {
        let panel = random_panel(3, 3, 6);
        let t_hat = random_tensor([3, 3, 4], 7);
        let mut sum = 0.0;
        let mut n = 0;
        for i in 0..3 {
            for t in 0..3 {
                let a = panel.treatment(i, t);
                if a == 1 {
                    let prev = if t == 0 { 0 } else { panel.treatment(i, t - 1) } as usize;
                    sum += t_hat.get(i, t, 2 * prev + 1) - t_hat.get(i, t, 2 * prev);
                    n += 1;
                }
            }
        }
        let got = atet(&t_hat, &panel, 2).unwrap();
        assert!((got - sum / n as f64).abs() < 1e-12);
        let shifted = atet(&t_hat.add_scalar(123.5), &panel, 2).unwrap();
        assert!((got - shifted).abs() < 1e-10);
    }

    #[test]
    fn contrast_specializes_to_atet() {
        let panel = random_panel(4, 5, 8);
        let t_hat = random_tensor([4, 5, 8], 9);
        let a = atet(&t_hat, &panel, 3).unwrap();
        let c = general_contrast(
            &t_hat,
            &panel,
            3,
            HistorySpec::Realized,
            HistorySpec::RealizedLastZeroed,
            treated,
        )
        .unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn contrast_of_identical_histories_is_zero() {
        let panel = random_panel(3, 4, 10);
        let t_hat = random_tensor([3, 4, 4], 11);
        let h = HistorySpec::Fixed(HistoryIndex::new(2, 3).unwrap());
        assert_eq!(general_contrast(&t_hat, &panel, 2, h, h, |_, _, _| true).unwrap(), 0.0);
        assert!(matches!(
            general_contrast(&t_hat, &panel, 2, h, h, |_, _, _| false),
            Err(Error::EmptySelection(_))
        ));
    }

    #[test]
    fn contrast_matches_loop() {
        let panel = random_panel(4, 4, 12);
        let t_hat = random_tensor([4, 4, 4], 13);
        let h1 = HistoryIndex::new(2, 3).unwrap();
        let h2 = HistoryIndex::new(2, 0).unwrap();
        let got = general_contrast(
            &t_hat,
            &panel,
            2,
            HistorySpec::Fixed(h1),
            HistorySpec::Fixed(h2),
            |_, _, t| t >= 2,
        )
        .unwrap();
        let mut s = 0.0;
        for i in 0..4 {
            for t in 2..4 {
                s += t_hat.get(i, t, 3) - t_hat.get(i, t, 0);
            }
        }
        assert!((got - s / 8.0).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let panel = random_panel(3, 4, 14);
        let mut buf = Vec::new();
        panel.write_csv(&mut buf).unwrap();
        let back = PanelData::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, panel);
        let json = serde_json::to_string(&panel).unwrap();
        assert_eq!(PanelData::from_json(&json).unwrap(), panel);
    }

    #[test]
    fn csv_errors_cite_line_and_column() {
        let missing = "unit,period,y\n0,0,1.0\n";
        match PanelData::read_csv(missing.as_bytes()) {
            Err(Error::MissingColumn(c)) => assert_eq!(c, "treatment"),
            other => panic!("unexpected {other:?}"),
        }
        let bad = "unit,period,treatment,y\n0,0,1,1.0\n0,1,x,2.0\n";
        match PanelData::read_csv(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let hole = "unit,period,treatment,y\n0,0,1,1.0\n1,1,0,2.0\n";
        assert!(PanelData::read_csv(hole.as_bytes()).is_err());
    }

    #[test]
    fn panel_rejects_bad_input() {
        assert!(PanelData::new(0, 3, 0, vec![], vec![], vec![]).is_err());
        assert!(matches!(
            PanelData::new(1, 2, 0, vec![0, 3], vec![], vec![0.0; 2]),
            Err(Error::NonBinary { position: 1, value: 3 })
        ));
        assert!(PanelData::new(1, 1, 0, vec![0], vec![], vec![f64::NAN]).is_err());
    }
}
