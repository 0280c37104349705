//! Writes the built-in silhouette library as PNGs.
//!
//! cargo run -p cmgan --example export_silhouettes -- assets/silhouettes

use std::path::PathBuf;

use cmgan::imageio::save_mask;
use cmgan::maskgen::SilhouetteLibrary;

fn main() -> cmgan::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "assets/silhouettes".into()));
    std::fs::create_dir_all(&dir).map_err(|e| cmgan::Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let library = SilhouetteLibrary::builtin();
    for (i, shape) in library.shapes().iter().enumerate() {
        save_mask(&dir.join(format!("silhouette_{i:02}.png")), shape)?;
    }
    println!("wrote {} silhouettes to {}", library.len(), dir.display());
    Ok(())
}
