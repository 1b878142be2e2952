//! Stacked LSTM next-location model.

mod cv;
mod io;
mod lstm;
mod model;
mod softmax;
mod train;

pub use cv::{folds, grid_search_cv, Candidate, CvOutcome};
pub use io::{load_model, load_model_for, save_model};
pub use lstm::{Linear, LstmLayer};
pub use model::{dense_inputs, init_model, ArchConfig, Gradients, Params, Role, SeqModel, SEQ_LEN};
pub use softmax::{argsort_desc, log_softmax_with_temperature, softmax_with_temperature, topk};
pub use train::{loss_and_grads, mean_loss, train, GradTarget, History, TrainConfig};

pub(crate) use softmax::softmax_rows;
pub(crate) use train::loss_and_grads_dense;
