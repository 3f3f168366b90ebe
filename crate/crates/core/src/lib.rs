//! Joint optimization of sparse q-space sampling directions and a signal
//! reconstructor for diffusion MRI.
//!
//! The pipeline: a fully sampled signal is expanded in a real symmetric
//! spherical-harmonic basis ([`qspace`]), resampled at a small set of learnable
//! directions, and mapped back to the full protocol by a reconstructor
//! ([`recon`]). Training ([`train`]) updates both the directions and the
//! reconstructor under an L1 + total-variation loss.

use std::io::Write;
use std::path::Path;

pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod phantom;
pub mod qspace;
pub mod recon;
pub mod seed;
pub mod shbasis;
pub mod sphere;
pub mod train;

pub use error::{Error, Result};
pub use phantom::{Dataset, DatasetSpec, PhantomConfig, PhantomImage, Split};
pub use shbasis::BasisSpec;
pub use sphere::{Direction, Protocol};
pub use train::{SamplingMode, TrainConfig, TrainedModel};

/// Writes bytes to `path` through a temporary sibling and a rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
