//! Rasters, tiling, resampling, augmentation, synthetic scenes and
//! prompt-degradation simulation.

pub mod augment;
pub mod io;
pub mod prompt_sim;
pub mod raster;
pub mod regulate;
pub mod synthetic;
pub mod tiling;

pub use augment::{augment, Augmentation};
pub use io::{read_image, read_manifest, read_mask, write_manifest, ManifestRecord, Split};
pub use prompt_sim::{simulate_prompt, PromptKind, PromptSimSpec, SimulatedPrompt};
pub use raster::{RasterSample, Window};
pub use regulate::{regulate, Regulated};
pub use synthetic::{generate_synthetic, SceneClass, SyntheticSceneSpec};
pub use tiling::{stitch, tile, PadMode, TilingSpec};
