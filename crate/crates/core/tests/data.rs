//! Grid files, preprocessing, projection, regridding, sample assembly,
//! splits and the synthetic generator.

use icemamba::data::grid::GridSeries;
use icemamba::data::preprocess::{apply_land_mask, clean_sic, NormStats};
use icemamba::data::projection::spherical_cap_area;
use icemamba::data::*;
use icemamba::{Error, Month, MonthRange};
use ndarray::{Array2, Array3, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn series(var: &str, start: Month, data: Array3<f32>) -> GridSeries {
    let (t, h, w) = data.dim();
    let months = (0..t).map(|i| start.offset(i as i32)).collect();
    GridSeries::new(var, "1", months, data, Array2::from_elem((h, w), false)).unwrap()
}

#[test]
fn imgr_round_trip_through_a_file_with_pole_mask() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut s = series("t2m", Month::new(1990, 3), Array3::from_shape_fn((5, 3, 4), |_| rng.gen::<f32>() * 300.0));
    s.land_mask[[0, 1]] = true;
    s.pole_hole = Some(Array2::from_shape_fn((3, 4), |(i, j)| i == 1 && j == 2));
    let path = dir.path().join("t2m.imgr");
    s.save(&path).unwrap();
    let back = GridSeries::load(&path).unwrap();
    assert_eq!(back, s);
    let bits = |g: &GridSeries| g.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&s));
}

#[test]
fn imgr_layout_matches_the_documented_format() {
    let s = series("siconc", Month::new(2000, 1), Array3::from_elem((2, 2, 3), 0.5));
    let mut bytes = Vec::new();
    s.write_to(&mut bytes).unwrap();
    assert_eq!(&bytes[..6], b"IMGR1\n");
    let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[10..10 + len]).unwrap();
    assert_eq!(header["shape"], serde_json::json!([2, 2, 3]));
    assert_eq!(header["months"], serde_json::json!(["2000-01", "2000-02"]));
    assert_eq!(header["variable"], "siconc");
    // land mask (6 bytes) then 12 little-endian f32 values
    assert_eq!(bytes.len(), 10 + len + 6 + 12 * 4);
    assert_eq!(&bytes[bytes.len() - 4..], &0.5f32.to_le_bytes());
}

#[test]
fn imgr_errors_are_distinct() {
    let s = series("siconc", Month::new(2000, 1), Array3::from_elem((12, 2, 2), 0.5));
    let mut bytes = Vec::new();
    s.write_to(&mut bytes).unwrap();
    assert!(matches!(GridSeries::from_bytes(b"NOTIMGR"), Err(Error::BadMagic(_))));
    assert!(matches!(GridSeries::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::TruncatedPayload { .. })));
    // Drop one whole field: header says 12, payload holds 11.
    assert!(matches!(GridSeries::from_bytes(&bytes[..bytes.len() - 16]), Err(Error::HeaderMismatch(_))));
}

#[test]
fn stats_manifest_round_trip_and_tamper_detection() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = series("ohc300", Month::new(1979, 1), Array3::from_shape_fn((36, 3, 3), |_| rng.gen_range(-2.0..5.0)));
    let window = MonthRange::years(1979, 1980);
    let stats = vec![NormStats::fit(&s, window, true, true).unwrap()];
    let saved = StatsManifest::default().save(dir.path(), &stats, &s.land_mask).unwrap();
    let (manifest, loaded) = StatsManifest::load(dir.path()).unwrap();
    assert_eq!(manifest, saved);
    assert_eq!(loaded[0].id(), stats[0].id());
    assert_eq!(normalize(&s, &loaded[0]).unwrap(), normalize(&s, &stats[0]).unwrap());
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("stats.json")).unwrap()).unwrap();
    assert_eq!(json["ohc300"]["climatology_file"], "ohc300_climatology.imgr");
    assert!(json["ohc300"]["mean"].is_number() && json["ohc300"]["std"].is_number());

    let text = std::fs::read_to_string(dir.path().join("stats.json")).unwrap();
    let tampered = text.replacen("\"mean\": ", "\"mean\": 1", 1);
    std::fs::write(dir.path().join("stats.json"), tampered).unwrap();
    assert!(StatsManifest::load(dir.path()).is_err());
}

#[test]
fn uniform_ring_fills_hole_and_empty_hole_changes_nothing() {
    let mut field = Array2::from_elem((5, 5), 0.9f32);
    let hole = Array2::from_shape_fn((5, 5), |(i, j)| (1..4).contains(&i) && (1..4).contains(&j));
    field.zip_mut_with(&hole, |v, &h| if h { *v = -1.0 });
    let land = Array2::from_elem((5, 5), false);
    let filled = fill_pole_hole(field.view(), &hole, &land).unwrap();
    assert!(filled.iter().all(|&v| (v - 0.9).abs() < 1e-6));
    let none = Array2::from_elem((5, 5), false);
    assert_eq!(fill_pole_hole(field.view(), &none, &land).unwrap(), field);
}

#[test]
fn preprocessing_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data = Array3::from_shape_fn((3, 6, 6), |_| rng.gen_range(-0.2f32..1.2));
    let mut s = series("siconc", Month::new(1985, 1), data);
    s.land_mask[[0, 0]] = true;
    s.land_mask[[5, 5]] = true;
    s.pole_hole = Some(Array2::from_shape_fn((6, 6), |(i, j)| (2..4).contains(&i) && (2..4).contains(&j)));
    let once = clean_sic(&s, None).unwrap();
    let twice = clean_sic(&once, None).unwrap();
    assert_eq!(once.data, twice.data);
    assert!(once.data.iter().all(|v| (0.0..=1.0).contains(v)));
    for t in 0..3 {
        assert_eq!(once.data[[t, 0, 0]], 0.0);
    }
    let mut f = s.data.index_axis(Axis(0), 0).to_owned();
    apply_land_mask(&mut f, &s.land_mask);
    let g = f.clone();
    apply_land_mask(&mut f, &s.land_mask);
    assert_eq!(f, g);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn anomaly_plus_climatology_reconstructs(seed in any::<u64>(), years in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = series("t2m", Month::new(1990, 1), Array3::from_shape_fn((12 * years, 2, 3), |_| rng.gen_range(-3.0f32..3.0)));
        let (clim, anom) = climatology_and_anomaly(&s, MonthRange::years(1990, 1989 + years as i32)).unwrap();
        let back = clim.reconstruct(&anom);
        for (a, b) in back.data.iter().zip(s.data.iter()) {
            prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn channel_count_formula(lags in proptest::collection::vec(prop_oneof![Just(1usize), Just(3usize)], 0..14)) {
        let vars = [Variable::T2m, Variable::T500, Variable::Sst, Variable::Ohc300, Variable::Ohc700, Variable::Mld001,
            Variable::Mld003, Variable::Ussr, Variable::Dssr, Variable::Gp500, Variable::Gp250, Variable::U10m, Variable::V10m, Variable::U10];
        let specs: Vec<VariableSpec> = lags.iter().zip(vars).map(|(&l, v)| VariableSpec::default_for(v).with_lags(l).unwrap()).collect();
        let layout = SampleLayout::new(specs).unwrap();
        prop_assert_eq!(layout.channels(), 12 + lags.iter().sum::<usize>());
        prop_assert_eq!(layout.labels().len(), layout.channels());
    }

    #[test]
    fn rolling_splits_never_reach_the_target_year(y in 1984i32..2030) {
        let s = make_splits(SplitMode::Rolling, Some(y)).unwrap();
        prop_assert!(s.train.end < Month::new(y, 1) && s.valid.end < Month::new(y, 1));
        prop_assert_eq!(s.valid.end.offset(1), Month::new(y, 1));
        prop_assert_eq!(s.train.end.offset(1), s.valid.start);
        prop_assert!(!s.train.overlaps(&s.valid));
    }

    #[test]
    fn projection_round_trips(lat in 1.0f64..90.0, lon in -180.0f64..180.0) {
        let (x, y) = laea_project(lat, lon).unwrap();
        let (lat2, lon2) = laea_inverse(x, y);
        prop_assert!((lat - lat2).abs() < 1e-9);
        if lat < 89.999 {
            let d = (lon - lon2).rem_euclid(360.0);
            prop_assert!(d.min(360.0 - d) < 1e-8);
        }
    }
}

#[test]
fn fourteen_variables_at_three_lags_give_54_channels() {
    let specs: Vec<VariableSpec> = Variable::OBSERVED
        .iter()
        .filter(|&&v| v != Variable::Siconc)
        .map(|&v| VariableSpec::default_for(v))
        .collect();
    assert_eq!(specs.len(), 14);
    assert_eq!(SampleLayout::new(specs).unwrap().channels(), 54);
}

#[test]
fn projection_rejects_southern_latitudes() {
    assert!(laea_project(-10.0, 0.0).is_err());
    assert!(laea_project(0.0, 0.0).is_err());
}

/// Shoelace area of the projected latitude circle against the cap area.
#[test]
fn projected_rings_preserve_area() {
    for lat in [40.0, 55.0, 66.5, 80.0, 89.0] {
        let n = 20_000;
        let pts: Vec<(f64, f64)> =
            (0..n).map(|k| laea_project(lat, -180.0 + 360.0 * k as f64 / n as f64).unwrap()).collect();
        let mut twice = 0.0;
        for k in 0..n {
            let (x1, y1) = pts[k];
            let (x2, y2) = pts[(k + 1) % n];
            twice += x1 * y2 - x2 * y1;
        }
        let area = twice.abs() / 2.0;
        let cap = spherical_cap_area(lat);
        assert!((area / cap - 1.0).abs() < 1e-3, "lat {lat}: {area} vs {cap}");
        // Band between this latitude and the next degree up.
        let inner = spherical_cap_area(lat + 1.0);
        let (xi, yi) = laea_project(lat + 1.0, 0.0).unwrap();
        let (xo, yo) = pts[n / 2];
        let band = std::f64::consts::PI * (xo.hypot(yo).powi(2) - xi.hypot(yi).powi(2));
        assert!((band / (cap - inner) - 1.0).abs() < 1e-3);
    }
}

fn source(f: impl Fn(f64, f64) -> f64) -> LatLonField {
    let (lat0, dlat, lon0, dlon) = (30.0, 0.25, -180.0, 0.25);
    let data = Array2::from_shape_fn((241, 1440), |(r, c)| f(lat0 + r as f64 * dlat, lon0 + c as f64 * dlon));
    LatLonField { lat0, dlat, lon0, dlon, data }
}

fn small_grid() -> TargetGrid {
    TargetGrid { rows: 12, cols: 10, x0: -2_500_000.0, y0: 3_000_000.0, cell_m: 500_000.0 }
}

#[test]
fn constant_source_regrids_to_constant() {
    let out = regrid_bilinear(&source(|_, _| 0.37), &small_grid()).unwrap();
    assert!(out.field.iter().all(|v| (v - 0.37).abs() < 1e-14));
    assert!(!out.filled.iter().any(|&f| f));
}

#[test]
fn linear_fields_are_reproduced_at_interior_points() {
    let f = |lat: f64, lon: f64| 0.01 * lon - 0.3 * lat + 2.0;
    let out = regrid_bilinear(&source(f), &small_grid()).unwrap();
    let coords = small_grid().cell_latlon();
    let mut checked = 0;
    for ((i, j), &(lat, lon)) in coords.indexed_iter() {
        if lon.abs() < 179.5 {
            assert!((out.field[[i, j]] - f(lat, lon)).abs() < 1e-9);
            checked += 1;
        }
    }
    assert!(checked > 100);
}

/// Independent two-stage interpolation: along longitude on the bracketing
/// rows, then along latitude.
fn two_stage(src: &LatLonField, lat: f64, lon: f64) -> f64 {
    let (nr, nc) = src.data.dim();
    let r = ((lat - src.lat0) / src.dlat).floor() as usize;
    let r = r.min(nr - 2);
    let lonw = (lon - src.lon0).rem_euclid(360.0);
    let c = (lonw / src.dlon).floor() as usize % nc;
    let c1 = (c + 1) % nc;
    let tc = (lonw - c as f64 * src.dlon) / src.dlon;
    let row = |r: usize| src.data[[r, c]] + (src.data[[r, c1]] - src.data[[r, c]]) * tc;
    let tr = (lat - (src.lat0 + r as f64 * src.dlat)) / src.dlat;
    row(r) + (row(r + 1) - row(r)) * tr
}

#[test]
fn spot_values_match_an_independent_interpolator() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut src = source(|_, _| 0.0);
    src.data.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
    let grid = small_grid();
    let out = regrid_bilinear(&src, &grid).unwrap();
    let coords = grid.cell_latlon();
    for _ in 0..5 {
        let (i, j) = (rng.gen_range(0..grid.rows), rng.gen_range(0..grid.cols));
        let (lat, lon) = coords[[i, j]];
        assert!((out.field[[i, j]] - two_stage(&src, lat, lon)).abs() < 1e-12);
    }
}

#[test]
fn cells_outside_coverage_take_the_nearest_value() {
    // Coverage from 75°N only: outer cells are filled.
    let data = Array2::from_shape_fn((61, 1440), |(r, _)| 75.0 + 0.25 * r as f64);
    let src = LatLonField { lat0: 75.0, dlat: 0.25, lon0: -180.0, dlon: 0.25, data };
    let out = regrid_bilinear(&src, &small_grid()).unwrap();
    assert!(out.filled.iter().any(|&f| f));
    assert!(out.field.iter().all(|v| v.is_finite() && *v >= 75.0 - 1e-9));
}

#[test]
fn sample_channels_match_their_source_fields() {
    let set = generate_synthetic(8, 8, 15, 1).unwrap();
    let extra = Variable::SYNTHETIC.iter().map(|&v| VariableSpec::default_for(v).with_lags(3).unwrap()).collect();
    let layout = SampleLayout::new(extra).unwrap();
    let init = Month::new(1985, 6);
    let stack = assemble_sample(init, &layout, &set).unwrap();
    assert_eq!(stack.dim().0, 21);
    for (c, (var, lag)) in layout.labels().into_iter().enumerate() {
        let want = set[&var].field(init.offset(-(lag as i32))).unwrap();
        assert_eq!(stack.index_axis(Axis(0), c), want, "channel {c}");
    }
    assert_eq!(layout.channel(Variable::Siconc, 1), Some(0));
    assert_eq!(layout.channel(Variable::SynCausal, 1), Some(12));
    // Twelve months of history are needed before the first init.
    let err = assemble_sample(Month::new(1979, 6), &layout, &set).unwrap_err();
    assert!(matches!(err, Error::MissingMonth { .. }), "{err}");
}

#[test]
fn statistics_are_fitted_on_training_years_and_reused() {
    let set = generate_synthetic(8, 8, 20, 5).unwrap();
    let layout = SampleLayout::new(vec![VariableSpec::default_for(Variable::SynNoise)]).unwrap();
    let train = MonthRange::years(1979, 1988);
    let a = Dataset::prepare(&set, layout.clone(), 1, train).unwrap();
    assert_eq!(a.stats.len(), 1);
    assert_eq!(a.stats[0].fit_window, train);
    let refit = NormStats::fit(&set[&Variable::SynNoise], train, false, true).unwrap();
    assert_eq!(a.stats[0].id(), refit.id());
    // Changing test-period data leaves the statistics unchanged.
    let mut altered = set.clone();
    let noise = altered.get_mut(&Variable::SynNoise).unwrap();
    let t = noise.index_of(Month::new(1995, 1)).unwrap();
    noise.data.index_axis_mut(Axis(0), t).fill(100.0);
    let b = Dataset::prepare(&altered, layout, 1, train).unwrap();
    assert_eq!(a.stats_id(), b.stats_id());
    let m = Month::new(1996, 1);
    let s = a.sample(m).unwrap();
    let raw = set[&Variable::SynNoise].field(m.offset(-1)).unwrap();
    let c = a.layout.channel(Variable::SynNoise, 1).unwrap();
    for (got, &r) in s.input.index_axis(Axis(0), c).iter().zip(raw.iter()) {
        let want = ((r as f64 - refit.mean) / refit.std) as f32;
        assert!((got - want).abs() < 1e-5);
    }
}

#[test]
fn synthetic_causal_covariate_leads_sic_by_two_months() {
    let set = generate_synthetic(24, 24, 30, 3).unwrap();
    let sic = &set[&Variable::Siconc];
    let causal = &set[&Variable::SynCausal];
    let (clim, anom) = climatology_and_anomaly(sic, MonthRange::years(1979, 2008)).unwrap();
    drop(clim);
    let t = sic.len();
    let mut total = 0.0;
    let mut cells = 0;
    for ((i, j), &land) in sic.land_mask.indexed_iter() {
        if land {
            continue;
        }
        let xs: Vec<f64> = (0..t - 2).map(|k| causal.data[[k, i, j]] as f64).collect();
        let ys: Vec<f64> = (2..t).map(|k| anom.data[[k, i, j]] as f64).collect();
        total += pearson(&xs, &ys);
        cells += 1;
    }
    let mean = total / cells as f64;
    assert!(mean > 0.5, "basin-mean lagged correlation {mean}");
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn detrend_oracle_and_degenerate_cases() {
    let s = series("u10", Month::new(2000, 1), Array3::from_shape_vec((3, 1, 1), vec![1.0, 2.0, 4.0]).unwrap());
    let d = detrend_linear(&s).unwrap();
    let want = [1.0 / 6.0, -1.0 / 3.0, 1.0 / 6.0];
    for (got, w) in d.data.iter().zip(want) {
        assert!((*got as f64 - w).abs() < 1e-6);
    }
    let flat = series("u10", Month::new(2000, 1), Array3::from_elem((5, 2, 2), 3.0));
    assert!(detrend_linear(&flat).unwrap().data.iter().all(|v| v.abs() < 1e-6));
    let line = series("u10", Month::new(2000, 1), Array3::from_shape_fn((6, 1, 2), |(t, _, j)| (t as f32) * 0.5 + j as f32));
    assert!(detrend_linear(&line).unwrap().data.iter().all(|v| v.abs() < 1e-5));
    let short = series("u10", Month::new(2000, 1), Array3::from_elem((2, 1, 1), 1.0));
    assert!(detrend_linear(&short).is_err());
}

#[test]
fn fixed_and_rolling_examples() {
    let r = make_splits(SplitMode::Rolling, Some(2001)).unwrap();
    assert_eq!((r.train, r.valid), (MonthRange::years(1979, 1996), MonthRange::years(1997, 2000)));
    let r = make_splits(SplitMode::Rolling, Some(2002)).unwrap();
    assert_eq!((r.train, r.valid), (MonthRange::years(1979, 1997), MonthRange::years(1998, 2001)));
    let f = make_splits(SplitMode::Fixed, None).unwrap();
    let inits = init_months(f.test, 12, 1);
    assert_eq!(inits.first().copied(), Some(Month::new(2016, 1)));
    assert_eq!(inits.last().copied(), Some(Month::new(2022, 12)));
    assert!(make_splits(SplitMode::Rolling, Some(1983)).is_err());
}
