//! Hold-out metrics, raster roughness, resource metering and the
//! comparison report.

mod meter;
mod metrics;
mod raster;
mod report;

pub use meter::{meter, MemoryMethod, Metering};
pub use metrics::{lag1_semivariogram, pmcc, rste, PmccSign};
pub use raster::RasterSpec;
pub use report::{compare, trend_surface, CompareConfig, ComparisonReport, MetricRow, SplitDescriptor, REPORT_COLUMNS};
