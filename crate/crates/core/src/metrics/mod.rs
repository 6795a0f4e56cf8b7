//! Image similarity, segmentation overlap and cohort aggregation.

mod overlap;
mod report;
mod ssim;

pub use overlap::{
    boundary, compose_regions, dice, dice_binary, dice_with, hd95, hd95_binary, quantile_sorted,
    region_mask, squared_distance_transform, EmptyDice, Region, RegionMasks,
};
pub use report::{aggregate, Aggregate, MetricRecord, MetricReport, Stats, ALL_GROUP};
pub use ssim::{ssim, ssim_arrays, SsimConfig};
