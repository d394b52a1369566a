//! Modality encoders, classification heads and the parameter bundle.

mod bundle;
mod heads;
mod img;
mod labels;
mod seq;

pub use bundle::{
    kaiming_bound, ImgEncoderSpec, ImgParams, ImgStage, Linear, LstmParams, ModelBundle, ModelSpec, ParamGroup, ResBlock,
    SeqEncoderSpec, StageParams, EHR_INPUT_DIM,
};
pub use heads::{head_forward, Head};
pub use img::{img_encode, img_encode_batch};
pub use labels::{LabelGroup, LabelSpace, TaskLabel, AUX_LABELS, TASK_LABELS};
pub use seq::{seq_encode, seq_encode_batch, SeqBatch};
