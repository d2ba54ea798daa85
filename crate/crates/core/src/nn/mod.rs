//! Small classifiers built from a fixed layer set, with exact reverse-mode
//! gradients with respect to both parameters and inputs.

mod gradcheck;
mod io;
mod layers;
mod model;

pub use gradcheck::{
    grad_check, grad_check_with, relative_error, GradCheck, GradCheckOptions, TensorCheck,
    REL_ERROR_FLOOR,
};
pub use io::{decode_model, encode_model, load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use layers::{Conv2d, Layer, Linear};
pub use model::{argmax_rows, widened, Arch, Gradients, LossValue, Model, Wrt, LENET_WIDENS};
