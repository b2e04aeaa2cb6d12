//! Verification metrics over masked fields and their aggregation by target
//! month and lead time.
//!
//! Masks are `true` where a cell is evaluated. Sums run in f64 in row-major
//! cell order.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Zip};

use crate::calendar::Month;
use crate::data::grid::GridSeries;
use crate::data::preprocess::Climatology;
use crate::error::{Error, Result};
use crate::forecast::ForecastSet;

/// SIC threshold separating ice from open water.
pub const ICE_EDGE_THRESHOLD: f64 = 0.15;
/// Interannual standard deviation above which a cell counts as variable.
pub const VARIABILITY_THRESHOLD: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Mae,
    Rmse,
}

fn check_pair<A, B>(ctx: &'static str, a: &ArrayView2<'_, A>, b: &ArrayView2<'_, B>, mask: &Array2<bool>) -> Result<()> {
    if a.dim() != b.dim() || a.dim() != mask.dim() {
        return Err(Error::shape(ctx, format!("fields {:?} and {:?}, mask {:?}", a.dim(), b.dim(), mask.dim())));
    }
    Ok(())
}

/// Mean absolute or root-mean-square difference over the mask, in percent.
pub fn masked_error<A, B>(pred: ArrayView2<'_, A>, obs: ArrayView2<'_, B>, mask: &Array2<bool>, kind: ErrorKind) -> Result<f64>
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    check_pair("masked_error", &pred, &obs, mask)?;
    let (mut sum, mut n) = (0.0f64, 0usize);
    Zip::from(&pred).and(&obs).and(mask).for_each(|&p, &o, &m| {
        if m {
            let d: f64 = p.into() - o.into();
            sum += match kind {
                ErrorKind::Mae => d.abs(),
                ErrorKind::Rmse => d * d,
            };
            n += 1;
        }
    });
    if n == 0 {
        return Err(Error::invalid("mask", "no cell selected"));
    }
    let mean = sum / n as f64;
    Ok(100.0 * match kind {
        ErrorKind::Mae => mean,
        ErrorKind::Rmse => mean.sqrt(),
    })
}

/// Integrated ice-edge error split into over- and underestimation, in the
/// units of `cell_area`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IceEdgeError {
    pub iiee: f64,
    pub overestimate: f64,
    pub underestimate: f64,
}

pub fn iiee<A, B>(
    pred: ArrayView2<'_, A>,
    obs: ArrayView2<'_, B>,
    mask: &Array2<bool>,
    threshold: f64,
    cell_area: f64,
) -> Result<IceEdgeError>
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    check_pair("iiee", &pred, &obs, mask)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("ice edge threshold", format!("{threshold} is outside (0, 1)")));
    }
    let (mut over, mut under) = (0usize, 0usize);
    Zip::from(&pred).and(&obs).and(mask).for_each(|&p, &o, &m| {
        if m {
            let (pi, oi) = (p.into() >= threshold, o.into() >= threshold);
            over += (pi && !oi) as usize;
            under += (!pi && oi) as usize;
        }
    });
    let (overestimate, underestimate) = (over as f64 * cell_area, under as f64 * cell_area);
    Ok(IceEdgeError { iiee: (over + under) as f64 * cell_area, overestimate, underestimate })
}

/// Spatial Pearson correlation of two anomaly fields over the mask.
pub fn acc<A, B>(pred_anomaly: ArrayView2<'_, A>, obs_anomaly: ArrayView2<'_, B>, mask: &Array2<bool>) -> Result<f64>
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    check_pair("acc", &pred_anomaly, &obs_anomaly, mask)?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    Zip::from(&pred_anomaly).and(&obs_anomaly).and(mask).for_each(|&p, &o, &m| {
        if m {
            xs.push(p.into());
            ys.push(o.into());
        }
    });
    if xs.len() < 2 {
        return Err(Error::invalid("mask", format!("correlation needs 2 cells, mask selects {}", xs.len())));
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        let which = if sxx == 0.0 { "forecast" } else { "observed" };
        return Err(Error::invalid("anomaly correlation", format!("{which} anomaly has zero variance over the mask")));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Non-land cells whose interannual standard deviation of `calendar_month`
/// (1..=12) SIC exceeds `threshold`, using the years in `series`.
pub fn variability_mask(series: &GridSeries, calendar_month: u32, threshold: f64) -> Result<Array2<bool>> {
    let idx: Vec<usize> = (0..series.len()).filter(|&t| series.months[t].calendar() == calendar_month).collect();
    if idx.len() < 3 {
        return Err(Error::InsufficientHistory(format!(
            "variability of month {calendar_month} needs 3 years, found {}",
            idx.len()
        )));
    }
    let n = idx.len() as f64;
    let (h, w) = series.grid_shape();
    Ok(Array2::from_shape_fn((h, w), |(i, j)| {
        if series.land_mask[[i, j]] {
            return false;
        }
        let vals: Vec<f64> = idx.iter().map(|&t| series.data[[t, i, j]] as f64).collect();
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        var.sqrt() > threshold
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Mae,
    Rmse,
    Iiee,
    Overestimate,
    Underestimate,
    Acc,
}

impl Metric {
    pub const ALL: [Metric; 6] =
        [Metric::Mae, Metric::Rmse, Metric::Iiee, Metric::Overestimate, Metric::Underestimate, Metric::Acc];

    pub fn id(self) -> &'static str {
        match self {
            Metric::Mae => "mae",
            Metric::Rmse => "rmse",
            Metric::Iiee => "iiee",
            Metric::Overestimate => "oe",
            Metric::Underestimate => "ue",
            Metric::Acc => "acc",
        }
    }

    pub fn units(self) -> &'static str {
        match self {
            Metric::Mae | Metric::Rmse => "percent",
            Metric::Iiee | Metric::Overestimate | Metric::Underestimate => "km2",
            Metric::Acc => "dimensionless",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricEntry {
    pub metric: Metric,
    pub init: Month,
    pub lead: usize,
    pub value: f64,
}

impl MetricEntry {
    pub fn target(&self) -> Month {
        self.init.offset(self.lead as i32 - 1)
    }
}

/// Scores keyed by metric, initialization and lead; the target month and
/// year follow from those two.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    pub mask_id: String,
    pub cell_area_km2: f64,
    pub threshold: f64,
    pub entries: Vec<MetricEntry>,
}

/// Means by target month and lead, stored as `cells[lead - 1][month - 1]`;
/// `None` marks a cell with no entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub metric: Metric,
    pub cells: Vec<[Option<f64>; 12]>,
}

impl Heatmap {
    pub fn get(&self, calendar_month: u32, lead: usize) -> Option<f64> {
        self.cells[lead - 1][calendar_month as usize - 1]
    }

    pub fn lead_count(&self) -> usize {
        self.cells.len()
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x}"))
}

impl MetricTable {
    pub fn new(mask_id: impl Into<String>, cell_area_km2: f64) -> Self {
        MetricTable { mask_id: mask_id.into(), cell_area_km2, threshold: ICE_EDGE_THRESHOLD, entries: Vec::new() }
    }

    pub fn push(&mut self, metric: Metric, init: Month, lead: usize, value: f64) {
        self.entries.push(MetricEntry { metric, init, lead, value });
    }

    /// Scores every lead of `forecast` against `obs`. ACC is added when a
    /// climatology is given; `mask` defaults to the non-land cells.
    pub fn evaluate(
        &mut self,
        forecast: &ForecastSet,
        obs: &GridSeries,
        mask: Option<&Array2<bool>>,
        climatology: Option<&Climatology>,
    ) -> Result<()> {
        let sea = obs.land_mask.mapv(|l| !l);
        let mask = mask.unwrap_or(&sea);
        for lead in 1..=forecast.lead_count() {
            let target = forecast.target_month(lead);
            let (p, o) = (forecast.map(lead), obs.require(target)?);
            let init = forecast.init;
            self.push(Metric::Mae, init, lead, masked_error(p, o, mask, ErrorKind::Mae)?);
            self.push(Metric::Rmse, init, lead, masked_error(p, o, mask, ErrorKind::Rmse)?);
            let e = iiee(p, o, mask, self.threshold, self.cell_area_km2)?;
            self.push(Metric::Iiee, init, lead, e.iiee);
            self.push(Metric::Overestimate, init, lead, e.overestimate);
            self.push(Metric::Underestimate, init, lead, e.underestimate);
            if let Some(clim) = climatology {
                let c = clim.for_month(target);
                let (pa, oa) = (&p - &c, &o - &c);
                self.push(Metric::Acc, init, lead, acc(pa.view(), oa.view(), mask)?);
            }
        }
        Ok(())
    }

    pub fn values(&self, metric: Metric) -> impl Iterator<Item = &MetricEntry> {
        self.entries.iter().filter(move |e| e.metric == metric)
    }

    pub fn mean(&self, metric: Metric) -> Option<f64> {
        mean(&self.values(metric).map(|e| e.value).collect::<Vec<_>>())
    }

    pub fn max_lead(&self) -> usize {
        self.entries.iter().map(|e| e.lead).max().unwrap_or(0)
    }

    /// Target month × lead means over initializations and years.
    pub fn heatmap(&self, metric: Metric, leads: usize) -> Heatmap {
        let mut groups: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
        for e in self.values(metric) {
            groups.entry((e.lead, e.target().calendar_index())).or_default().push(e.value);
        }
        let cells = (1..=leads)
            .map(|lead| std::array::from_fn(|m| groups.get(&(lead, m)).and_then(|v| mean(v))))
            .collect();
        Heatmap { metric, cells }
    }

    /// Means by target month over all leads and years.
    pub fn seasonal_cycle(&self, metric: Metric) -> [Option<f64>; 12] {
        let mut groups: [Vec<f64>; 12] = Default::default();
        for e in self.values(metric) {
            groups[e.target().calendar_index()].push(e.value);
        }
        std::array::from_fn(|m| mean(&groups[m]))
    }

    /// Means by lead over all initializations.
    pub fn lead_means(&self, metric: Metric, leads: usize) -> Vec<Option<f64>> {
        (1..=leads)
            .map(|l| mean(&self.values(metric).filter(|e| e.lead == l).map(|e| e.value).collect::<Vec<_>>()))
            .collect()
    }

    /// `metrics.csv`: one row per entry.
    pub fn write_entries(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["metric", "init_month", "lead", "target_month", "year", "value", "units", "mask", "threshold"])?;
        for e in &self.entries {
            w.write_record([
                e.metric.id().to_string(),
                e.init.to_string(),
                e.lead.to_string(),
                e.target().calendar().to_string(),
                e.target().year().to_string(),
                format!("{}", e.value),
                e.metric.units().to_string(),
                self.mask_id.clone(),
                format!("{}", self.threshold),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `heatmap.csv`: a 12 × `leads` block per metric, `NA` where empty.
    pub fn write_heatmaps(&self, path: &Path, leads: usize) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["metric".to_string(), "units".into(), "target_month".into()];
        header.extend((1..=leads).map(|l| format!("lead_{l}")));
        w.write_record(&header)?;
        for metric in Metric::ALL {
            if self.values(metric).next().is_none() {
                continue;
            }
            let hm = self.heatmap(metric, leads);
            for m in 1..=12u32 {
                let mut row = vec![metric.id().to_string(), metric.units().to_string(), m.to_string()];
                row.extend((1..=leads).map(|l| cell(hm.get(m, l))));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// `seasonal.csv`: the 12-month cycle of every metric present.
    pub fn write_seasonal(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["metric", "units", "target_month", "value"])?;
        for metric in Metric::ALL {
            if self.values(metric).next().is_none() {
                continue;
            }
            for (m, v) in self.seasonal_cycle(metric).iter().enumerate() {
                w.write_record([metric.id().to_string(), metric.units().to_string(), (m + 1).to_string(), cell(*v)])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Masked MAE (percent) of each lead of `forecast` against `obs`.
pub fn lead_mae(forecast: &ForecastSet, obs: &GridSeries, mask: &Array2<bool>) -> Result<Vec<f64>> {
    (1..=forecast.lead_count())
        .map(|l| masked_error(forecast.map(l), obs.require(forecast.target_month(l))?, mask, ErrorKind::Mae))
        .collect()
}
