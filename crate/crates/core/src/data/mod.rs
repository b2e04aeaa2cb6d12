//! Grid IO, preprocessing, projection, sample assembly, splits and synthetic
//! data.

pub mod grid;
pub mod preprocess;
pub mod projection;
pub mod sample;
pub mod splits;
pub mod synthetic;
pub mod variables;

pub use grid::GridSeries;
pub use preprocess::{
    climatology_and_anomaly, detrend_linear, fill_pole_hole, normalize, Climatology, NormStats, StatsManifest,
};
pub use projection::{laea_inverse, laea_project, regrid_bilinear, LatLonField, TargetGrid};
pub use sample::{assemble_sample, Dataset, Sample, SampleLayout, SeriesSet};
pub use splits::{init_months, make_splits, SplitMode, Splits};
pub use synthetic::generate_synthetic;
pub use variables::{Variable, VariableSpec};
