//! CSV ingestion onto one aligned timestamp grid.
//!
//! Three headered files, documented schemas:
//! - `lob.csv`: `ts,bid_px_1..m,bid_qty_1..m,ask_px_1..m,ask_qty_1..m`
//! - `trades.csv`: `ts,price,qty,side` (many rows per timestamp allowed)
//! - `mark.csv`: `ts,mark,funding_rate`
//!
//! A timestamp survives only if it is complete in all three files; incomplete
//! or absent timestamps are dropped and counted. Empty fields mean "missing"
//! (drop the timestamp); malformed non-empty fields are hard errors carrying
//! the file and line number.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, LobSnapshot, MarkPoint, Side, TradeRecord};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataPaths {
    pub lob: PathBuf,
    pub trades: PathBuf,
    pub mark: PathBuf,
}

impl DataPaths {
    /// The three conventional file names under one directory.
    pub fn in_dir(dir: &Path) -> DataPaths {
        DataPaths {
            lob: dir.join("lob.csv"),
            trades: dir.join("trades.csv"),
            mark: dir.join("mark.csv"),
        }
    }
}

/// Column-name map, for files whose headers deviate from the defaults.
/// Book columns are matched by prefix plus 1-based level number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoadSchema {
    pub ts: String,
    pub price: String,
    pub qty: String,
    pub side: String,
    pub mark: String,
    pub funding_rate: String,
    pub bid_px_prefix: String,
    pub bid_qty_prefix: String,
    pub ask_px_prefix: String,
    pub ask_qty_prefix: String,
}

impl Default for LoadSchema {
    fn default() -> LoadSchema {
        LoadSchema {
            ts: "ts".into(),
            price: "price".into(),
            qty: "qty".into(),
            side: "side".into(),
            mark: "mark".into(),
            funding_rate: "funding_rate".into(),
            bid_px_prefix: "bid_px_".into(),
            bid_qty_prefix: "bid_qty_".into(),
            ask_px_prefix: "ask_px_".into(),
            ask_qty_prefix: "ask_qty_".into(),
        }
    }
}

pub fn load_dataset(paths: &DataPaths, schema: &LoadSchema) -> Result<Dataset> {
    let mut seen: BTreeSet<u64> = BTreeSet::new();
    let lob = read_lob(&paths.lob, schema, &mut seen)?;
    let trades = read_trades(&paths.trades, schema, &mut seen)?;
    let mark = read_mark(&paths.mark, schema, &mut seen)?;

    let kept: Vec<u64> = seen
        .iter()
        .copied()
        .filter(|ts| lob.contains_key(ts) && trades.contains_key(ts) && mark.contains_key(ts))
        .collect();
    if kept.is_empty() {
        return Err(CoreError::InvalidData(
            "no timestamp is complete in all three input files".into(),
        ));
    }

    let mut ds = Dataset { dropped: seen.len() - kept.len(), ..Dataset::default() };
    for ts in kept {
        ds.lob.push(lob[&ts].clone());
        ds.trades.push(trades[&ts].clone());
        let (mark_px, funding_rate) = mark[&ts];
        ds.mark.push(MarkPoint { ts, mark: mark_px, funding_rate, seconds_to_funding: 0 });
    }
    fill_funding_countdown(&mut ds.mark);
    ds.validate()?;
    Ok(ds)
}

/// Write a dataset's raw market series as the three conventional CSV files
/// (default column names) under `dir`, creating it if needed. Floats use
/// shortest round-trip formatting, so `load_dataset` reproduces the values
/// bit for bit; `seconds_to_funding` is not stored — the loader re-derives it
/// from the settlement rows.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<DataPaths> {
    ds.validate()?;
    // The loader keeps only timestamps present in every file, so a bar with
    // no trade rows would silently vanish on reload. Refuse to write one.
    if let Some(i) = ds.trades.iter().position(Vec::is_empty) {
        return Err(CoreError::InvalidData(format!(
            "bar at ts {} has no trades; the CSV layout cannot represent it",
            ds.mark[i].ts
        )));
    }
    std::fs::create_dir_all(dir)?;
    let paths = DataPaths::in_dir(dir);
    let depth = ds.lob.first().map_or(0, LobSnapshot::depth);

    let mut lob = String::from("ts");
    for prefix in ["bid_px_", "bid_qty_", "ask_px_", "ask_qty_"] {
        for level in 1..=depth {
            lob.push_str(&format!(",{prefix}{level}"));
        }
    }
    lob.push('\n');
    for snap in &ds.lob {
        lob.push_str(&snap.ts.to_string());
        for (px, _) in &snap.bids {
            lob.push_str(&format!(",{px}"));
        }
        for (_, qty) in &snap.bids {
            lob.push_str(&format!(",{qty}"));
        }
        for (px, _) in &snap.asks {
            lob.push_str(&format!(",{px}"));
        }
        for (_, qty) in &snap.asks {
            lob.push_str(&format!(",{qty}"));
        }
        lob.push('\n');
    }
    std::fs::write(&paths.lob, lob)?;

    let mut trades = String::from("ts,price,qty,side\n");
    for bar in &ds.trades {
        for t in bar {
            let side = match t.side {
                Side::Buy => "buy",
                Side::Sell => "sell",
            };
            trades.push_str(&format!("{},{},{},{side}\n", t.ts, t.price, t.qty));
        }
    }
    std::fs::write(&paths.trades, trades)?;

    let mut mark = String::from("ts,mark,funding_rate\n");
    for m in &ds.mark {
        mark.push_str(&format!("{},{},{}\n", m.ts, m.mark, m.funding_rate));
    }
    std::fs::write(&paths.mark, mark)?;
    Ok(paths)
}

/// Derive `seconds_to_funding` from the observed settlement timestamps
/// (rows with a nonzero funding rate). Past the last settlement the typical
/// settlement gap is extrapolated; with no settlements at all it stays 0.
fn fill_funding_countdown(mark: &mut [MarkPoint]) {
    let settlements: Vec<u64> =
        mark.iter().filter(|m| m.funding_rate != 0.0).map(|m| m.ts).collect();
    if settlements.is_empty() {
        return;
    }
    let mut gaps: Vec<u64> = settlements.windows(2).map(|w| w[1] - w[0]).collect();
    gaps.sort_unstable();
    let period = gaps.get(gaps.len() / 2).copied().unwrap_or(0);
    for point in mark.iter_mut() {
        // First settlement strictly after this row; at a settlement row the
        // countdown refers to the next one.
        let next = settlements.iter().copied().find(|&s| s > point.ts).or_else(|| {
            (period > 0).then(|| {
                let last = *settlements.last().unwrap();
                let k = (point.ts - last) / period + 1;
                last + k * period
            })
        });
        point.seconds_to_funding = next.map_or(0, |n| n - point.ts);
    }
}

struct FileReader {
    path: String,
    reader: csv::Reader<std::fs::File>,
    header: Vec<String>,
}

impl FileReader {
    fn open(path: &Path) -> Result<FileReader> {
        let reader = csv::ReaderBuilder::new()
            .flexible(true)
            .from_path(path)
            .map_err(|e| CoreError::InvalidData(format!("{}: {e}", path.display())))?;
        let mut fr = FileReader { path: path.display().to_string(), reader, header: Vec::new() };
        fr.header = fr
            .reader
            .headers()
            .map_err(|e| CoreError::InvalidData(format!("{}: {e}", fr.path)))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        Ok(fr)
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.header.iter().position(|h| h == name).ok_or_else(|| {
            CoreError::InvalidData(format!("{}: missing required column '{name}'", self.path))
        })
    }

    /// All data records with their 1-based line numbers; low-level CSV errors
    /// become parse errors carrying the offending line.
    fn records(&mut self) -> Result<Vec<(u64, csv::StringRecord)>> {
        let mut out = Vec::new();
        for rec in self.reader.records() {
            match rec {
                Ok(r) => {
                    let line = r.position().map_or(0, |p| p.line());
                    out.push((line, r));
                }
                Err(e) => {
                    let line = e.position().map_or(0, |p| p.line());
                    return Err(CoreError::Parse {
                        path: self.path.clone(),
                        line,
                        msg: e.to_string(),
                    });
                }
            }
        }
        Ok(out)
    }
}

/// Empty field -> `None` (drop the timestamp); malformed -> hard error.
fn parse_f64(raw: Option<&str>, path: &str, line: u64) -> Result<Option<f64>> {
    match raw.map(str::trim) {
        None | Some("") => Ok(None),
        Some(s) => s.parse::<f64>().map(Some).map_err(|_| CoreError::Parse {
            path: path.to_string(),
            line,
            msg: format!("expected a number, got '{s}'"),
        }),
    }
}

fn parse_ts(raw: Option<&str>, path: &str, line: u64) -> Result<u64> {
    match raw.map(str::trim) {
        None | Some("") => Err(CoreError::Parse {
            path: path.to_string(),
            line,
            msg: "row has no timestamp".into(),
        }),
        Some(s) => s.parse::<u64>().map_err(|_| CoreError::Parse {
            path: path.to_string(),
            line,
            msg: format!("expected an integer timestamp, got '{s}'"),
        }),
    }
}

fn read_lob(
    path: &Path,
    schema: &LoadSchema,
    seen: &mut BTreeSet<u64>,
) -> Result<BTreeMap<u64, LobSnapshot>> {
    let mut fr = FileReader::open(path)?;
    let ts_col = fr.column(&schema.ts)?;
    let mut depth = 0;
    while fr.column(&format!("{}{}", schema.bid_px_prefix, depth + 1)).is_ok() {
        depth += 1;
    }
    if depth == 0 {
        return Err(CoreError::InvalidData(format!(
            "{}: no '{}1' column found",
            fr.path, schema.bid_px_prefix
        )));
    }
    let mut cols = Vec::with_capacity(depth * 4);
    for prefix in
        [&schema.bid_px_prefix, &schema.bid_qty_prefix, &schema.ask_px_prefix, &schema.ask_qty_prefix]
    {
        for level in 1..=depth {
            cols.push(fr.column(&format!("{prefix}{level}"))?);
        }
    }

    let path_str = fr.path.clone();
    let mut out = BTreeMap::new();
    for (line, rec) in fr.records()? {
        let ts = parse_ts(rec.get(ts_col), &path_str, line)?;
        if out.contains_key(&ts) {
            return Err(CoreError::InvalidData(format!(
                "{path_str}: duplicate timestamp {ts} at line {line}"
            )));
        }
        seen.insert(ts);
        let mut values = Vec::with_capacity(cols.len());
        let mut complete = true;
        for &c in &cols {
            match parse_f64(rec.get(c), &path_str, line)? {
                Some(v) => values.push(v),
                None => {
                    complete = false;
                    break;
                }
            }
        }
        if !complete {
            continue;
        }
        let bids = (0..depth).map(|i| (values[i], values[depth + i])).collect();
        let asks = (0..depth).map(|i| (values[2 * depth + i], values[3 * depth + i])).collect();
        out.insert(ts, LobSnapshot { ts, bids, asks });
    }
    Ok(out)
}

fn read_trades(
    path: &Path,
    schema: &LoadSchema,
    seen: &mut BTreeSet<u64>,
) -> Result<BTreeMap<u64, Vec<TradeRecord>>> {
    let mut fr = FileReader::open(path)?;
    let ts_col = fr.column(&schema.ts)?;
    let price_col = fr.column(&schema.price)?;
    let qty_col = fr.column(&schema.qty)?;
    let side_col = fr.column(&schema.side)?;

    let path_str = fr.path.clone();
    let mut out: BTreeMap<u64, Vec<TradeRecord>> = BTreeMap::new();
    let mut incomplete: BTreeSet<u64> = BTreeSet::new();
    for (line, rec) in fr.records()? {
        let ts = parse_ts(rec.get(ts_col), &path_str, line)?;
        seen.insert(ts);
        let price = parse_f64(rec.get(price_col), &path_str, line)?;
        let qty = parse_f64(rec.get(qty_col), &path_str, line)?;
        let side = match rec.get(side_col).map(str::trim) {
            None | Some("") => None,
            Some(s) => match s.to_ascii_lowercase().as_str() {
                "buy" | "b" => Some(Side::Buy),
                "sell" | "s" => Some(Side::Sell),
                other => {
                    return Err(CoreError::Parse {
                        path: path_str.clone(),
                        line,
                        msg: format!("expected side buy/sell, got '{other}'"),
                    })
                }
            },
        };
        match (price, qty, side) {
            (Some(price), Some(qty), Some(side)) => {
                out.entry(ts).or_default().push(TradeRecord { ts, price, qty, side });
            }
            // Any missing field poisons the whole timestamp, including trades
            // from other complete rows at the same ts.
            _ => {
                incomplete.insert(ts);
            }
        }
    }
    for ts in incomplete {
        out.remove(&ts);
    }
    Ok(out)
}

fn read_mark(
    path: &Path,
    schema: &LoadSchema,
    seen: &mut BTreeSet<u64>,
) -> Result<BTreeMap<u64, (f64, f64)>> {
    let mut fr = FileReader::open(path)?;
    let ts_col = fr.column(&schema.ts)?;
    let mark_col = fr.column(&schema.mark)?;
    let rate_col = fr.column(&schema.funding_rate)?;

    let path_str = fr.path.clone();
    let mut out = BTreeMap::new();
    for (line, rec) in fr.records()? {
        let ts = parse_ts(rec.get(ts_col), &path_str, line)?;
        if out.contains_key(&ts) {
            return Err(CoreError::InvalidData(format!(
                "{path_str}: duplicate timestamp {ts} at line {line}"
            )));
        }
        seen.insert(ts);
        let mark = parse_f64(rec.get(mark_col), &path_str, line)?;
        let rate = parse_f64(rec.get(rate_col), &path_str, line)?;
        if let (Some(mark), Some(rate)) = (mark, rate) {
            out.insert(ts, (mark, rate));
        }
    }
    Ok(out)
}
