//! Pre-training losses, their stage compositions and the centroid machinery
//! behind cross-task pseudo labels.

mod centroids;
mod losses;

pub use centroids::{assign_pseudo_labels, build_centroids, label_centroids, nearest_label, CentroidIndex, LabelledVector, PseudoLabelSet};
pub use losses::{
    generation_loss, label_target, loss_ccl, loss_cep, loss_mcm, loss_spp, stage1_loss, stage2_loss, CepHeads,
    LossReport, LossWeights, PolarityTokens, Stage1Batch, Stage2Batch, TaskHead,
};
