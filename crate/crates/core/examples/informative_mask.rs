//! Which fine voxels and image patches survive the near-surface masks.

use lsrm::scene::{render_view, SceneFile};
use lsrm::tokenizer::{foreground_patch_mask, informative_voxel_mask, MASK_SAMPLES_PER_AXIS, PATCH};

fn main() -> lsrm::Result<()> {
    let scene = SceneFile::preset("union", 4).build()?;
    for s in [16, 32, 64] {
        let mask = informative_voxel_mask(&scene.field, s, 1.0 / s as f64, MASK_SAMPLES_PER_AXIS)?;
        let total = s * s * s;
        println!("S_vol {s:>3}: {:>6} of {:>6} voxels kept ({:.1}%)", mask.count(), total, 100.0 * mask.count() as f64 / total as f64);
    }
    for (v, cam) in scene.cameras.iter().enumerate() {
        let (_, alpha) = render_view(&scene.field, cam);
        let m = foreground_patch_mask(&alpha, PATCH)?;
        println!("view {v}: {} of {} patches cover foreground", m.count(), m.rows * m.cols);
    }
    Ok(())
}
