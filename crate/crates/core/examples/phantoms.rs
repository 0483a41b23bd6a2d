//! Generate a few phantom cases, print their contrast palette and chamber
//! volumes, and write one case to disk as HUV1 volumes.
//!
//! ```text
//! cargo run --release --example phantoms -- /tmp/phantom_case
//! ```

use std::path::PathBuf;

use cect_forge::image::{save_volume, Volume};
use cect_forge::phantom::{build_dataset, PhantomConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map(PathBuf::from);
    let cfg = PhantomConfig::default();
    let cases = build_dataset(&cfg, 4, 3, 64, 11)?;
    for c in &cases {
        let s = &c.slices[0];
        println!(
            "case {}: left {:.0} HU, right {:.0} HU, chamber px per slice {:?}, volume {:.2} ml",
            c.index,
            s.hu_left,
            s.hu_right,
            c.slices.iter().map(|p| p.chamber_area_px).collect::<Vec<_>>(),
            c.chamber_volume_ml(cfg.slice_thickness_mm)
        );
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)?;
        let case = &cases[0];
        let ct: Vec<_> = case.slices.iter().map(|p| p.ct.clone()).collect();
        let cect: Vec<_> = case.slices.iter().map(|p| p.cect.clone()).collect();
        save_volume(&Volume::from_slices(&ct, cfg.slice_thickness_mm)?, dir.join("ct.huv"))?;
        save_volume(&Volume::from_slices(&cect, cfg.slice_thickness_mm)?, dir.join("cect.huv"))?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}
