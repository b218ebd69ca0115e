//! Cascaded regression for joint facial landmark detection, landmark
//! visibility, head pose and non-rigid deformation.

// NaN-rejecting range checks read best as negated comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cascade;
pub mod dataset;
pub mod deformable;
pub mod error;
pub mod features;
pub mod geometry;
pub mod metrics;
pub mod model_io;
pub mod regression;
pub mod solver;
pub mod synth;

pub use cascade::{
    initialize, predict, predict_trajectory, predict_with, train, train_traced, train_with,
    CascadeModel, CascadeStage, InstanceState, TrainConfig, TrainTrace,
};
pub use dataset::{
    read_dataset, write_dataset, Dataset, DatasetMeta, FaceBox, PoseTruth, TrainingSample,
};
pub use deformable::{fit_pca, DeformCoeffs, DeformableModel};
pub use error::{Error, Result};
pub use features::{DescriptorKind, DescriptorSpec, FeatureVector, ImageRaster};
pub use geometry::{PoseAngles, Shape2D, Shape3D, VisibilityVector, WeakPerspectivePose};
pub use metrics::{evaluate, EvalReport, PoseMetrics, StageCurve};
pub use model_io::{load_model, save_model};
pub use regression::AnnotationMask;
pub use solver::{solve_pose_deform, SolverConfig};
pub use synth::{generate_dataset, GenConfig, OcclusionMode};
