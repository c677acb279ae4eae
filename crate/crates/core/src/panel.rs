//! Range-based volatility panels.
//!
//! A [`VolatilityPanel`] holds a balanced `T × n` matrix of strictly positive
//! volatility proxies `y`, its elementwise logarithm `x`, and the training
//! window mean `x̄`. Rows are trading dates in increasing order, columns are
//! tickers. Everything downstream (factor extraction, filtering, estimation)
//! reads from this type.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parkinson high-low range proxy in percentage-point units:
/// `100 · (ln high − ln low)² / (4 ln 2)`.
///
/// ```
/// let v = vmemsec::panel::compute_parkinson_hlr(101.0, 100.0).unwrap();
/// assert!((v - 0.0035710).abs() < 1e-7);
/// ```
pub fn compute_parkinson_hlr(high: f64, low: f64) -> Result<f64> {
    if !(high.is_finite() && low.is_finite()) || low <= 0.0 || high < low {
        return Err(Error::Domain(format!(
            "Parkinson range requires high >= low > 0, got high={high}, low={low}"
        )));
    }
    let r = high.ln() - low.ln();
    Ok(100.0 * r * r / (4.0 * std::f64::consts::LN_2))
}

/// One daily observation for one ticker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OhlcRecord {
    pub date: NaiveDate,
    pub ticker: String,
    pub high: f64,
    pub low: f64,
}

/// Layout of a panel CSV file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CsvFormat {
    /// `date,ticker,high,low` with one row per (date, ticker).
    Long,
    /// `date,<ticker1>,...,<tickern>` with precomputed proxies.
    Wide,
}

impl std::str::FromStr for CsvFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "long" => Ok(CsvFormat::Long),
            "wide" => Ok(CsvFormat::Wide),
            other => Err(Error::InvalidInput(format!(
                "unknown panel format `{other}` (expected long or wide)"
            ))),
        }
    }
}

/// Balanced panel of positive volatility proxies.
///
/// Immutable once built. `split` is the zero-based index of the first
/// out-of-sample row; it equals `T` when the whole sample is in-sample.
/// `x_bar` is computed over rows `0..split` only.
#[derive(Debug, Clone, PartialEq)]
pub struct VolatilityPanel {
    tickers: Vec<String>,
    dates: Vec<NaiveDate>,
    y: DMatrix<f64>,
    x: DMatrix<f64>,
    x_bar: DVector<f64>,
    split: usize,
}

impl VolatilityPanel {
    /// Builds a panel from proxy levels. `split` is the first out-of-sample
    /// row (`None` keeps every row in-sample).
    pub fn new(
        tickers: Vec<String>,
        dates: Vec<NaiveDate>,
        y: DMatrix<f64>,
        split: Option<usize>,
    ) -> Result<Self> {
        let (t_len, n) = y.shape();
        if tickers.len() != n {
            return Err(Error::Dimension(format!(
                "{} tickers for {} columns",
                tickers.len(),
                n
            )));
        }
        if dates.len() != t_len {
            return Err(Error::Dimension(format!(
                "{} dates for {} rows",
                dates.len(),
                t_len
            )));
        }
        if n == 0 || t_len < 2 {
            return Err(Error::InsufficientData(format!(
                "panel needs at least 2 rows and 1 column, got {t_len}x{n}"
            )));
        }
        if let Some(w) = dates.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(format!(
                "dates not strictly increasing at {} -> {}",
                dates[w],
                dates[w + 1]
            )));
        }
        let mut seen = HashSet::new();
        for tk in &tickers {
            if !seen.insert(tk.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate ticker {tk}")));
            }
        }
        for t in 0..t_len {
            for i in 0..n {
                let v = y[(t, i)];
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::Domain(format!(
                        "volatility for {} on {} must be positive and finite, got {v}",
                        tickers[i], dates[t]
                    )));
                }
            }
        }
        let split = split.unwrap_or(t_len);
        if split == 0 || split > t_len {
            return Err(Error::InvalidInput(format!(
                "split index {split} leaves an empty training window"
            )));
        }
        let x = y.map(f64::ln);
        let x_bar = column_means(&x, split);
        Ok(Self {
            tickers,
            dates,
            y,
            x,
            x_bar,
            split,
        })
    }

    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    /// Proxy levels, `T × n`.
    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    /// Log proxies, `T × n`.
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// Training-window mean of `x`.
    pub fn x_bar(&self) -> &DVector<f64> {
        &self.x_bar
    }

    /// Number of rows `T`.
    pub fn len(&self) -> usize {
        self.y.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.y.nrows() == 0
    }

    /// Number of series `n`.
    pub fn n_series(&self) -> usize {
        self.y.ncols()
    }

    /// Zero-based index of the first out-of-sample row (`T` if none).
    pub fn split_index(&self) -> usize {
        self.split
    }

    /// Number of training rows.
    pub fn n_train(&self) -> usize {
        self.split
    }

    pub fn has_holdout(&self) -> bool {
        self.split < self.len()
    }

    /// Same data with a new split date: the first row dated on or after
    /// `date` becomes out-of-sample.
    pub fn with_split_date(&self, date: Option<NaiveDate>) -> Result<Self> {
        let split = date.map(|d| self.dates.partition_point(|x| *x < d));
        Self::new(
            self.tickers.clone(),
            self.dates.clone(),
            self.y.clone(),
            split,
        )
    }

    /// Same data treated entirely as in-sample.
    pub fn without_split(&self) -> Self {
        let mut p = self.clone();
        p.split = p.len();
        p.x_bar = column_means(&p.x, p.split);
        p
    }

    /// Panel with every level multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Result<Self> {
        Self::new(
            self.tickers.clone(),
            self.dates.clone(),
            &self.y * k,
            Some(self.split),
        )
    }

    /// Keeps only the listed columns, in the given order.
    pub fn select(&self, columns: &[usize]) -> Result<Self> {
        let tickers = columns.iter().map(|&j| self.tickers[j].clone()).collect();
        let y = self.y.select_columns(columns);
        Self::new(tickers, self.dates.clone(), y, Some(self.split))
    }
}

fn column_means(x: &DMatrix<f64>, rows: usize) -> DVector<f64> {
    DVector::from_fn(x.ncols(), |i, _| {
        x.column(i).rows(0, rows).iter().sum::<f64>() / rows as f64
    })
}

/// Assembles a balanced panel from daily records.
///
/// Dates not observed for every ticker are dropped. Columns follow the order
/// in which tickers first appear; rows are sorted by date.
pub fn build_panel(records: &[OhlcRecord], split_date: Option<NaiveDate>) -> Result<VolatilityPanel> {
    let mut tickers: Vec<String> = Vec::new();
    let mut col_of: HashMap<&str, usize> = HashMap::new();
    for r in records {
        if !col_of.contains_key(r.ticker.as_str()) {
            col_of.insert(r.ticker.as_str(), tickers.len());
            tickers.push(r.ticker.clone());
        }
    }
    let n = tickers.len();

    let mut cells: HashMap<(NaiveDate, usize), f64> = HashMap::with_capacity(records.len());
    let mut per_date: HashMap<NaiveDate, usize> = HashMap::new();
    for r in records {
        let hlr = compute_parkinson_hlr(r.high, r.low).map_err(|_| Error::InvalidRange {
            date: r.date,
            ticker: r.ticker.clone(),
            high: r.high,
            low: r.low,
        })?;
        let col = col_of[r.ticker.as_str()];
        if cells.insert((r.date, col), hlr).is_some() {
            return Err(Error::DuplicateRecord {
                date: r.date,
                ticker: r.ticker.clone(),
            });
        }
        *per_date.entry(r.date).or_default() += 1;
    }

    let mut dates: Vec<NaiveDate> = per_date
        .into_iter()
        .filter(|&(_, count)| count == n)
        .map(|(d, _)| d)
        .collect();
    dates.sort_unstable();
    if dates.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "only {} dates are common to all {} tickers",
            dates.len(),
            n
        )));
    }

    let mut y = DMatrix::zeros(dates.len(), n);
    for (t, d) in dates.iter().enumerate() {
        for i in 0..n {
            let v = cells[&(*d, i)];
            if v == 0.0 {
                return Err(Error::ZeroRange {
                    date: *d,
                    ticker: tickers[i].clone(),
                });
            }
            y[(t, i)] = v;
        }
    }
    let split = split_date.map(|sd| dates.partition_point(|d| *d < sd));
    VolatilityPanel::new(tickers, dates, y, split)
}

fn parse_date(path: &Path, line: u64, s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("bad date `{s}`: {e}"),
    })
}

fn parse_num(path: &Path, line: u64, field: &str, s: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("bad {field} `{s}`: {e}"),
    })
}

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(file))
}

/// Reads long-format OHLC records (`date,ticker,high,low`, extra columns
/// ignored).
pub fn read_long_records(path: impl AsRef<Path>) -> Result<Vec<OhlcRecord>> {
    let path = path.as_ref();
    let mut rdr = open_reader(path)?;
    let headers = rdr.headers()?.clone();
    let idx = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("missing column `{name}`"),
            })
    };
    let (di, ti, hi, li) = (idx("date")?, idx("ticker")?, idx("high")?, idx("low")?);

    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let get = |i: usize| rec.get(i).unwrap_or("");
        let date = parse_date(path, line, get(di))?;
        let ticker = get(ti).to_string();
        let high = parse_num(path, line, "high", get(hi))?;
        let low = parse_num(path, line, "low", get(li))?;
        if ticker.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: "empty ticker".into(),
            });
        }
        if compute_parkinson_hlr(high, low).is_err() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("invalid range for {ticker} on {date}: high={high}, low={low}"),
            });
        }
        if !seen.insert((date, ticker.clone())) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("duplicate record for ({date}, {ticker})"),
            });
        }
        out.push(OhlcRecord {
            date,
            ticker,
            high,
            low,
        });
    }
    Ok(out)
}

/// Loads a panel from either CSV layout.
pub fn load_panel_csv(
    path: impl AsRef<Path>,
    format: CsvFormat,
    split_date: Option<NaiveDate>,
) -> Result<VolatilityPanel> {
    let path = path.as_ref();
    match format {
        CsvFormat::Long => build_panel(&read_long_records(path)?, split_date),
        CsvFormat::Wide => load_wide(path, split_date),
    }
}

fn load_wide(path: &Path, split_date: Option<NaiveDate>) -> Result<VolatilityPanel> {
    let mut rdr = open_reader(path)?;
    let headers = rdr.headers()?.clone();
    if headers.len() < 2 || !headers[0].eq_ignore_ascii_case("date") {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "wide header must be `date,<ticker1>,...`".into(),
        });
    }
    let tickers: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let n = tickers.len();
    let mut dates = Vec::new();
    let mut values = Vec::new();
    let mut seen = HashSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != n + 1 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected {} fields, found {}", n + 1, rec.len()),
            });
        }
        let date = parse_date(path, line, &rec[0])?;
        if !seen.insert(date) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("duplicate date {date}"),
            });
        }
        for (j, field) in rec.iter().skip(1).enumerate() {
            let v = parse_num(path, line, &tickers[j], field)?;
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("non-positive volatility {v} for {}", tickers[j]),
                });
            }
            values.push(v);
        }
        dates.push(date);
    }
    // Sort rows by date while keeping each row intact.
    let mut order: Vec<usize> = (0..dates.len()).collect();
    order.sort_by_key(|&r| dates[r]);
    let t_len = dates.len();
    let y = DMatrix::from_fn(t_len, n, |t, i| values[order[t] * n + i]);
    let dates: Vec<NaiveDate> = order.iter().map(|&r| dates[r]).collect();
    let split = split_date.map(|sd| dates.partition_point(|d| *d < sd));
    VolatilityPanel::new(tickers, dates, y, split)
}

/// Renders the panel in the wide layout. `f64` values use the shortest
/// representation that parses back to the same bits.
pub fn panel_to_csv_string(panel: &VolatilityPanel) -> String {
    let mut s = String::from("date");
    for tk in panel.tickers() {
        s.push(',');
        s.push_str(tk);
    }
    s.push('\n');
    for (t, d) in panel.dates().iter().enumerate() {
        let _ = write!(s, "{}", d.format("%Y-%m-%d"));
        for i in 0..panel.n_series() {
            let _ = write!(s, ",{}", panel.y()[(t, i)]);
        }
        s.push('\n');
    }
    s
}

/// Writes the panel in the wide layout.
pub fn save_panel_csv(panel: &VolatilityPanel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, panel_to_csv_string(panel)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn rec(date: &str, ticker: &str, high: f64, low: f64) -> OhlcRecord {
        OhlcRecord {
            date: d(date),
            ticker: ticker.into(),
            high,
            low,
        }
    }

    #[test]
    fn parkinson_examples() {
        assert_eq!(compute_parkinson_hlr(100.0, 100.0).unwrap(), 0.0);
        let e = compute_parkinson_hlr(271.8281828, 100.0).unwrap();
        assert!((e - 36.067_376_010_042_45).abs() < 1e-6, "{e}");
        let small = compute_parkinson_hlr(101.0, 100.0).unwrap();
        assert!((small - 0.003_570_997_865_400_178).abs() < 1e-7);
    }

    #[test]
    fn parkinson_rejects_bad_inputs() {
        assert!(compute_parkinson_hlr(99.0, 100.0).is_err());
        assert!(compute_parkinson_hlr(1.0, 0.0).is_err());
        assert!(compute_parkinson_hlr(-1.0, -2.0).is_err());
        assert!(compute_parkinson_hlr(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn build_small_panel_without_split() {
        let recs = vec![
            rec("2020-01-03", "AAA", 11.0, 10.0),
            rec("2020-01-02", "AAA", 12.0, 10.0),
            rec("2020-01-02", "BBB", 21.0, 20.0),
            rec("2020-01-03", "BBB", 22.0, 20.0),
            rec("2020-01-06", "AAA", 10.5, 10.0),
            rec("2020-01-06", "BBB", 20.5, 20.0),
        ];
        let p = build_panel(&recs, None).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p.n_series(), 2);
        assert_eq!(p.split_index(), 3);
        assert!(!p.has_holdout());
        assert_eq!(p.tickers(), &["AAA".to_string(), "BBB".to_string()]);
        assert_eq!(p.dates()[0], d("2020-01-02"));
        let expect = compute_parkinson_hlr(12.0, 10.0).unwrap();
        assert_eq!(p.y()[(0, 0)], expect);
    }

    #[test]
    fn intersection_join_drops_ragged_dates() {
        let recs = vec![
            rec("2020-01-02", "AAA", 12.0, 10.0),
            rec("2020-01-02", "BBB", 21.0, 20.0),
            rec("2020-01-03", "AAA", 11.0, 10.0),
            rec("2020-01-06", "AAA", 10.5, 10.0),
            rec("2020-01-06", "BBB", 20.5, 20.0),
        ];
        let p = build_panel(&recs, None).unwrap();
        assert_eq!(p.dates(), &[d("2020-01-02"), d("2020-01-06")]);
    }

    #[test]
    fn too_few_common_rows() {
        let recs = vec![
            rec("2020-01-02", "AAA", 12.0, 10.0),
            rec("2020-01-03", "BBB", 21.0, 20.0),
            rec("2020-01-06", "AAA", 10.5, 10.0),
            rec("2020-01-06", "BBB", 20.5, 20.0),
        ];
        assert!(matches!(
            build_panel(&recs, None),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn zero_range_names_date_and_ticker() {
        let recs = vec![
            rec("2020-01-02", "AAA", 12.0, 10.0),
            rec("2020-01-03", "AAA", 10.0, 10.0),
        ];
        match build_panel(&recs, None) {
            Err(Error::ZeroRange { date, ticker }) => {
                assert_eq!(date, d("2020-01-03"));
                assert_eq!(ticker, "AAA");
            }
            other => panic!("expected zero-range error, got {other:?}"),
        }
    }

    #[test]
    fn inverted_record_is_rejected() {
        let recs = vec![
            rec("2020-01-02", "AAA", 12.0, 10.0),
            rec("2020-01-03", "AAA", 9.0, 10.0),
        ];
        match build_panel(&recs, None) {
            Err(Error::InvalidRange { ticker, date, .. }) => {
                assert_eq!(ticker, "AAA");
                assert_eq!(date, d("2020-01-03"));
            }
            other => panic!("expected range error, got {other:?}"),
        }
    }

    #[test]
    fn split_date_sets_first_holdout_row() {
        let dates: Vec<_> = ["2022-12-29", "2022-12-30", "2023-01-03", "2023-01-04"]
            .iter()
            .map(|s| d(s))
            .collect();
        let y = DMatrix::from_fn(4, 2, |t, i| 1.0 + t as f64 + i as f64);
        let p = VolatilityPanel::new(vec!["A".into(), "B".into()], dates, y, None)
            .unwrap()
            .with_split_date(Some(d("2023-01-02")))
            .unwrap();
        assert_eq!(p.split_index(), 2);
        assert_eq!(p.len() - p.split_index(), 2);
        // x_bar only over the first two rows
        let expect = (1.0f64.ln() + 2.0f64.ln()) / 2.0;
        assert!((p.x_bar()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn wide_round_trip_text() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        std::fs::write(&path, "date,AAA,BBB\n2020-01-02,1.5,0.25\n2020-01-03,0.125,3\n").unwrap();
        let p = load_panel_csv(&path, CsvFormat::Wide, None).unwrap();
        assert_eq!((p.len(), p.n_series()), (2, 2));
        assert_eq!(p.y()[(1, 1)], 3.0);
    }

    #[test]
    fn long_file_with_inverted_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.csv");
        std::fs::write(
            &path,
            "date,ticker,open,high,low,close\n\
             2020-01-02,AAA,1,12,10,11\n\
             2020-01-03,AAA,1,9,10,11\n",
        )
        .unwrap();
        match load_panel_csv(&path, CsvFormat::Long, None) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("AAA"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn long_file_duplicate_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.csv");
        std::fs::write(
            &path,
            "date,ticker,high,low\n2020-01-02,AAA,12,10\n2020-01-02,AAA,12,10\n",
        )
        .unwrap();
        assert!(matches!(
            load_panel_csv(&path, CsvFormat::Long, None),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn wide_malformed_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        std::fs::write(&path, "date,AAA\n2020-01-02,1.0\n2020-01-03,abc\n").unwrap();
        assert!(matches!(
            load_panel_csv(&path, CsvFormat::Wide, None),
            Err(Error::Parse { line: 3, .. })
        ));
    }
}
