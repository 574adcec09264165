//! File formats: the tensor container, PGM/PPM images, datasets on disk and
//! `key=value` configuration files.

mod config;
mod container;
mod dataset;
mod pnm;

pub use config::{parse_key_values, read_key_values, write_key_values, KeyValues};
pub use container::{
    latents_from_container, latents_to_container, model_from_container, model_to_container, Container, Tensor, CONTAINER_MAGIC, CONTAINER_VERSION,
};
pub use dataset::{
    load_dataset, load_yale_b, parse_yale_b_name, write_dataset, yale_b_subset, Dataset, DatasetSubject, YALE_SUBSET_BOUNDS,
};
pub use pnm::{normals_to_rgb, read_gray_image, resize_area, write_pgm, write_ppm};
