//! Composition spaces, world persistence and checkpoints.

mod checkpoint;
mod io;
mod space;
mod world;

pub use checkpoint::{read_checkpoint_header, Checkpoint, CheckpointHeader, TensorEntry};
pub use io::{load_world, save_world, WORLD_FORMAT_VERSION};
pub use space::{build_prediction_space, CompositionSpace, Mode, Pair, PredictionSpace};
pub use world::{SampleRecord, Split, SplitTag, World};
