//! Panel data model: market x quarter observations, treatment bookkeeping,
//! CSV ingestion, and treated/control market classification.
//!
//! The quarter axis is a dense integer index; mapping an index back to a
//! calendar quarter (e.g. "2008Q4") is presentation-layer concern and never
//! enters any formula. Units are carried in [`PanelMetadata`] and data is
//! never rescaled silently.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Opaque identifier for a city-pair market.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MarketId(pub String);

impl MarketId {
    pub fn new(id: impl Into<String>) -> Self {
        MarketId(id.into())
    }
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for MarketId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Integer index of a year-quarter on a contiguous axis (0 = first observed quarter).
pub type QuarterIndex = i64;

/// One market-quarter row of the panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub market: MarketId,
    pub quarter: QuarterIndex,
    /// Price level in the units declared by the dataset metadata.
    pub price: f64,
    pub quantity: f64,
    /// Optional capacity outcome.
    pub seats: Option<f64>,
    /// Demand shifters.
    pub z: Vec<f64>,
    /// Cost shifters.
    pub w: Vec<f64>,
    /// Optional extra controls.
    pub x: Vec<f64>,
}

/// Treatment-window bookkeeping for a single merger event.
///
/// `merger_quarter` is the first post-merger quarter: the treatment indicator
/// is one for treated markets at every `t >= merger_quarter`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentPlan {
    pub merger_quarter: QuarterIndex,
    pub pre_window: u32,
    pub post_window: u32,
    pub treated_markets: BTreeSet<MarketId>,
}

impl TreatmentPlan {
    pub fn new(
        merger_quarter: QuarterIndex,
        treated_markets: impl IntoIterator<Item = MarketId>,
    ) -> Self {
        TreatmentPlan {
            merger_quarter,
            pre_window: 8,
            post_window: 8,
            treated_markets: treated_markets.into_iter().collect(),
        }
    }

    pub fn is_treated(&self, market: &MarketId) -> bool {
        self.treated_markets.contains(market)
    }

    /// Event step of a post-merger quarter: 1 for the first post-merger
    /// quarter, 2 for the next, ... ; 0 for pre-merger quarters.
    pub fn event_step(&self, quarter: QuarterIndex) -> i64 {
        if quarter >= self.merger_quarter {
            quarter - self.merger_quarter + 1
        } else {
            0
        }
    }
}

/// Units and provenance carried alongside the panel.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PanelMetadata {
    pub price_unit: String,
    pub quantity_unit: String,
    /// Free-form sidecar values (e.g. simulator ground truth).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// A validated rectangular (possibly unbalanced) market x quarter panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelDataset {
    observations: Vec<Observation>,
    pub plan: TreatmentPlan,
    pub metadata: PanelMetadata,
    #[serde(skip)]
    index: HashMap<(MarketId, QuarterIndex), usize>,
}

impl PanelDataset {
    /// Build a dataset, checking every documented invariant.
    pub fn new(
        mut observations: Vec<Observation>,
        plan: TreatmentPlan,
        metadata: PanelMetadata,
    ) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::Validation("panel has no observations".into()));
        }
        observations.sort_by(|a, b| (&a.market, a.quarter).cmp(&(&b.market, b.quarter)));

        let (zdim, wdim) = (observations[0].z.len(), observations[0].w.len());
        let mut index = HashMap::with_capacity(observations.len());
        for (i, obs) in observations.iter().enumerate() {
            if obs.market.as_str().is_empty() {
                return Err(Error::Validation(format!("row {i}: empty market id")));
            }
            if !(obs.price > 0.0) {
                return Err(Error::Validation(format!(
                    "row {i} ({}, q{}): non-positive price {}",
                    obs.market, obs.quarter, obs.price
                )));
            }
            if !(obs.quantity > 0.0) {
                return Err(Error::Validation(format!(
                    "row {i} ({}, q{}): non-positive quantity {}",
                    obs.market, obs.quarter, obs.quantity
                )));
            }
            if obs.z.len() != zdim || obs.w.len() != wdim {
                return Err(Error::Validation(format!(
                    "row {i} ({}, q{}): inconsistent shifter dimensions",
                    obs.market, obs.quarter
                )));
            }
            if index.insert((obs.market.clone(), obs.quarter), i).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate (market, quarter) key ({}, q{})",
                    obs.market, obs.quarter
                )));
            }
        }
        for m in &plan.treated_markets {
            let has_pre = observations
                .iter()
                .any(|o| &o.market == m && o.quarter < plan.merger_quarter);
            let has_post = observations
                .iter()
                .any(|o| &o.market == m && o.quarter >= plan.merger_quarter);
            if !has_pre || !has_post {
                return Err(Error::Validation(format!(
                    "treated market {m} lacks {} observations",
                    if has_pre { "post-merger" } else { "pre-merger" }
                )));
            }
        }
        Ok(PanelDataset {
            observations,
            plan,
            metadata,
            index,
        })
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn n_obs(&self) -> usize {
        self.observations.len()
    }

    /// Sorted unique market ids.
    pub fn markets(&self) -> Vec<MarketId> {
        let mut out: Vec<MarketId> = self
            .observations
            .iter()
            .map(|o| o.market.clone())
            .collect();
        out.dedup();
        out
    }

    /// Sorted unique quarter indices.
    pub fn quarters(&self) -> Vec<QuarterIndex> {
        let mut qs: BTreeSet<QuarterIndex> =
            self.observations.iter().map(|o| o.quarter).collect();
        std::mem::take(&mut qs).into_iter().collect()
    }

    pub fn get(&self, market: &MarketId, quarter: QuarterIndex) -> Option<&Observation> {
        self.index
            .get(&(market.clone(), quarter))
            .map(|&i| &self.observations[i])
    }

    pub fn z_dim(&self) -> usize {
        self.observations[0].z.len()
    }

    pub fn w_dim(&self) -> usize {
        self.observations[0].w.len()
    }

    /// Treatment indicator I_mt = Treated_m x PostMerger_mt.
    pub fn treatment_indicator(&self, market: &MarketId, quarter: QuarterIndex) -> Result<u8> {
        if !self.index.contains_key(&(market.clone(), quarter)) {
            return Err(Error::Validation(format!(
                "unknown observation ({market}, q{quarter})"
            )));
        }
        Ok(u8::from(
            self.plan.is_treated(market) && quarter >= self.plan.merger_quarter,
        ))
    }

    /// Rebuild the lookup index (needed after deserialization).
    pub fn reindex(&mut self) {
        self.index = self
            .observations
            .iter()
            .enumerate()
            .map(|(i, o)| ((o.market.clone(), o.quarter), i))
            .collect();
    }
}

/// Column mapping and treatment parameters used by [`load_panel`].
///
/// The expected header is `market, quarter, price, quantity, seats,
/// z_1..z_p, w_1..w_q, treated`; shifter columns are discovered by prefix.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadSchema {
    pub merger_quarter: QuarterIndex,
    #[serde(default = "default_window")]
    pub pre_window: u32,
    #[serde(default = "default_window")]
    pub post_window: u32,
}

fn default_window() -> u32 {
    8
}

/// Load and validate a panel CSV.
pub fn load_panel(path: impl AsRef<Path>, schema: &LoadSchema) -> Result<PanelDataset> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Validation(format!("missing column '{name}'")))
    };
    let c_market = col("market")?;
    let c_quarter = col("quarter")?;
    let c_price = col("price")?;
    let c_quantity = col("quantity")?;
    let c_seats = headers.iter().position(|h| h == "seats");
    let c_treated = col("treated")?;
    let z_cols: Vec<usize> = (1..)
        .map(|i| headers.iter().position(|h| h == format!("z_{i}")))
        .take_while(Option::is_some)
        .flatten()
        .collect();
    let w_cols: Vec<usize> = (1..)
        .map(|i| headers.iter().position(|h| h == format!("w_{i}")))
        .take_while(Option::is_some)
        .flatten()
        .collect();

    let mut observations = Vec::new();
    let mut treated = BTreeSet::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let parse = |idx: usize, name: &str| -> Result<f64> {
            record[idx].trim().parse::<f64>().map_err(|_| {
                Error::Validation(format!(
                    "row {row_idx}: unparseable {name} value '{}'",
                    &record[idx]
                ))
            })
        };
        let market = MarketId::new(record[c_market].trim());
        let quarter: QuarterIndex = record[c_quarter].trim().parse().map_err(|_| {
            Error::Validation(format!(
                "row {row_idx}: unparseable quarter '{}'",
                &record[c_quarter]
            ))
        })?;
        let price = parse(c_price, "price")?;
        if !(price > 0.0) {
            return Err(Error::Validation(format!(
                "row {row_idx}: non-positive price {price}"
            )));
        }
        let quantity = parse(c_quantity, "quantity")?;
        let seats = match c_seats {
            Some(c) if !record[c].trim().is_empty() => Some(parse(c, "seats")?),
            _ => None,
        };
        let z = z_cols
            .iter()
            .map(|&c| parse(c, "z"))
            .collect::<Result<Vec<_>>>()?;
        let w = w_cols
            .iter()
            .map(|&c| parse(c, "w"))
            .collect::<Result<Vec<_>>>()?;
        if record[c_treated].trim() == "1" {
            treated.insert(market.clone());
        }
        observations.push(Observation {
            market,
            quarter,
            price,
            quantity,
            seats,
            z,
            w,
            x: Vec::new(),
        });
    }

    let plan = TreatmentPlan {
        merger_quarter: schema.merger_quarter,
        pre_window: schema.pre_window,
        post_window: schema.post_window,
        treated_markets: treated,
    };
    PanelDataset::new(observations, plan, PanelMetadata::default())
}

/// Serialize a panel back to the CSV schema accepted by [`load_panel`].
pub fn save_panel(dataset: &PanelDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    let (p, q) = (dataset.z_dim(), dataset.w_dim());
    let mut header = vec![
        "market".to_string(),
        "quarter".to_string(),
        "price".to_string(),
        "quantity".to_string(),
        "seats".to_string(),
    ];
    header.extend((1..=p).map(|i| format!("z_{i}")));
    header.extend((1..=q).map(|i| format!("w_{i}")));
    header.push("treated".to_string());
    writer.write_record(&header)?;
    for obs in dataset.observations() {
        let mut row = vec![
            obs.market.as_str().to_string(),
            obs.quarter.to_string(),
            fmt_f64(obs.price),
            fmt_f64(obs.quantity),
            obs.seats.map(fmt_f64).unwrap_or_default(),
        ];
        row.extend(obs.z.iter().copied().map(fmt_f64));
        row.extend(obs.w.iter().copied().map(fmt_f64));
        row.push(if dataset.plan.is_treated(&obs.market) {
            "1".into()
        } else {
            "0".into()
        });
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Shortest round-trippable decimal representation.
fn fmt_f64(v: f64) -> String {
    let mut s = format!("{v}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}

/// Pre-merger presence of one carrier in one market.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CarrierPresence {
    pub market: MarketId,
    pub carrier: String,
    pub nonstop_ops_per_quarter: u32,
    /// Share of market passengers carried by this carrier, in [0, 1].
    pub passenger_share: f64,
    /// Share of this carrier's passengers in the market carried via connections.
    pub connect_share: f64,
}

/// Three-way market label produced by [`classify_markets`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MarketClass {
    Treated,
    Control,
    Excluded,
}

/// Minimum nonstop operations per quarter (five round trips) for a carrier to
/// count as a nonstop competitor.
pub const NONSTOP_OPS_THRESHOLD: u32 = 10;
/// Connecting-presence share at or above which a merging carrier taints a market.
pub const CONNECT_SHARE_THRESHOLD: f64 = 0.10;
/// Per-party passenger share in the connecting-overlap exclusion.
pub const OVERLAP_EACH_THRESHOLD: f64 = 0.10;
/// Joint passenger share in the connecting-overlap exclusion.
pub const OVERLAP_JOINT_THRESHOLD: f64 = 0.40;

/// Classify every market in the presence table as treated, control, or excluded.
///
/// Treated: both merging carriers operate nonstop (>= 10 ops/quarter) and no
/// exclusion rule fires. Excluded: connecting-overlap (each party present via
/// connections with >= 10% of passengers and jointly >= 40%) or a merging
/// carrier with a substantial connecting presence (>= 10% of its traffic via
/// connections). Everything
/// else is a control: at most one merging carrier is nonstop, so the nonstop
/// carrier count is unchanged by the merger.
pub fn classify_markets(
    presence: &[CarrierPresence],
    merging: (&str, &str),
) -> Result<BTreeMap<MarketId, MarketClass>> {
    if presence.is_empty() {
        return Err(Error::Validation("empty presence table".into()));
    }
    let known: BTreeSet<&str> = presence.iter().map(|p| p.carrier.as_str()).collect();
    for carrier in [merging.0, merging.1] {
        if !known.contains(carrier) {
            return Err(Error::Validation(format!(
                "unknown carrier code '{carrier}'"
            )));
        }
    }

    let mut by_market: BTreeMap<MarketId, Vec<&CarrierPresence>> = BTreeMap::new();
    for p in presence {
        if !(0.0..=1.0).contains(&p.passenger_share) || !(0.0..=1.0).contains(&p.connect_share) {
            return Err(Error::Validation(format!(
                "carrier {} in market {}: share outside [0, 1]",
                p.carrier, p.market
            )));
        }
        by_market.entry(p.market.clone()).or_default().push(p);
    }

    let mut out = BTreeMap::new();
    for (market, rows) in by_market {
        let party = |code: &str| rows.iter().find(|r| r.carrier == code).copied();
        let a = party(merging.0);
        let b = party(merging.1);

        // A party's presence is "connecting" when it is not a nonstop operator.
        let connect_pax = |p: Option<&CarrierPresence>| {
            p.filter(|r| r.nonstop_ops_per_quarter < NONSTOP_OPS_THRESHOLD)
                .map_or(0.0, |r| r.passenger_share)
        };
        let connecting_overlap = connect_pax(a) >= OVERLAP_EACH_THRESHOLD
            && connect_pax(b) >= OVERLAP_EACH_THRESHOLD
            && connect_pax(a) + connect_pax(b) >= OVERLAP_JOINT_THRESHOLD;
        let substantial_connecting = [a, b]
            .iter()
            .flatten()
            .any(|r| r.connect_share >= CONNECT_SHARE_THRESHOLD);

        let nonstop =
            |p: Option<&CarrierPresence>| p.is_some_and(|r| r.nonstop_ops_per_quarter >= NONSTOP_OPS_THRESHOLD);
        let both_nonstop = nonstop(a) && nonstop(b);

        let class = if connecting_overlap || substantial_connecting {
            MarketClass::Excluded
        } else if both_nonstop {
            MarketClass::Treated
        } else {
            MarketClass::Control
        };
        out.insert(market, class);
    }
    Ok(out)
}

/// Load a classification input CSV (`market, carrier, nonstop_ops, pax_share, connect_share`).
pub fn load_presence(path: impl AsRef<Path>) -> Result<Vec<CarrierPresence>> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let mut out = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() < 5 {
            return Err(Error::Validation(format!(
                "presence row {row_idx}: expected 5 columns"
            )));
        }
        let parse = |idx: usize| -> Result<f64> {
            record[idx]
                .trim()
                .parse()
                .map_err(|_| Error::Validation(format!("presence row {row_idx}: bad number")))
        };
        out.push(CarrierPresence {
            market: MarketId::new(record[0].trim()),
            carrier: record[1].trim().to_string(),
            nonstop_ops_per_quarter: record[2].trim().parse().map_err(|_| {
                Error::Validation(format!("presence row {row_idx}: bad nonstop_ops"))
            })?,
            passenger_share: parse(3)?,
            connect_share: parse(4)?,
        });
    }
    Ok(out)
}
