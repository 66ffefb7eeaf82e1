//! Synthetic closed-world facts, the chat grammar, and edit datasets.

mod dataset;
pub mod grammar;
mod world;

pub use dataset::{
    edit_dataset_json, load_edit_dataset, parse_edit_dataset, save_edit_dataset, DatasetSchema,
    EditRecord, EditRequest, LocalityProbe,
};
pub use world::{fill_template, generate_world, FactTriple, Relation, World, SUBJECT_SLOT};
