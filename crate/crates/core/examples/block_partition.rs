//! Spatial block partitions of sparse token sets and their occupancy.

use lsrm::blocks::{occupancy_stats, partition, BLOCK};
use lsrm::harness::checks::routing_scene;
use lsrm::scene::SceneFile;

fn main() -> lsrm::Result<()> {
    let scene = SceneFile::preset("sphere", 4).build()?;
    let rs = routing_scene(&scene, 48, 32)?;
    for (name, tokens) in [("volume", &rs.vol), ("image", &rs.img)] {
        let part = partition(tokens, BLOCK)?;
        let stats = occupancy_stats(&part);
        println!(
            "{name}: {} tokens in {} of {} blocks, occupancy {}..{} (mean {:.1}, max/mean {:.2}, gini {:.2})",
            stats.total, stats.occupied, part.num_blocks(), stats.min, stats.max, stats.mean, stats.max_over_mean, stats.gini
        );
        let b = part.occupied[0];
        println!("  first occupied block {b}: centre {:.3?}, {} tokens", part.centers[b as usize], part.occupancy(b));
    }
    Ok(())
}
