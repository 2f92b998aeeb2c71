//! Similarity transforms, backward warping and cluster-preserving
//! augmentation.

mod cluster;
mod similarity;
mod warp;

pub use cluster::{
    augment_cluster, cross_cluster_rejection, same_cluster_rejection, synthesize_candidate, AugmentConfig,
    AugmentStats, Router,
};
pub use similarity::{estimate_similarity, SimilarityFit, SimilarityTransform};
pub use warp::warp_image;
