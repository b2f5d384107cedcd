//! Self-supervised objectives, augmentation and the training loop.

mod augment;
mod loss;
mod train;

pub use augment::{images_to_tensor, make_views, pixel_to_input, AugmentationPolicy, ViewBatch};
pub use loss::{byol_loss, simclr_loss, simsiam_loss, symmetric_neg_cosine};
pub use train::{collapse_std, train, train_with, write_epoch_log, EpochLog, EpochObserver, TrainConfig, TrainOutcome};
