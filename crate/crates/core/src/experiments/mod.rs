//! End-to-end pipelines shared by the command line and the acceptance
//! suite: caption datasets, generated observation banks, the two-domain
//! Fréchet experiment and the mix-ratio, rank and mask sweeps.

mod data;
mod domain;
mod nav;
mod report;

pub use data::{
    caption_pairs, generated_observations, outpaint_node, pairs_to_train, view_caption, world_train_pairs,
    GenerationStats,
};
pub use domain::{domain_gap, rank_sweep, two_domain_views, DomainConfig, DomainViews};
pub use nav::{evaluate_policy, mask_sweep, mix_sweep, prepare_nav, NavConfig, NavSetup, Policy};
pub use report::{median, validate_report, DomainRow, MaskRow, MixRow, RankRow, Report};
