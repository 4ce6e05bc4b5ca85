pub mod autodiff;
pub mod config;
pub mod data;
pub mod densenet;
pub mod dicom;
pub mod gradcheck;
pub mod image;
pub mod kernels;
pub mod phantom;
pub mod saliency;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod weights;
