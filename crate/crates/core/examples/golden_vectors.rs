//! Golden tensor files: write, read back, and locate a corrupted byte.

use lsrm::golden;
use lsrm::rng::SeedStream;

fn main() -> lsrm::Result<()> {
    let s = SeedStream::new(5);
    let a = s.child("a").uniform(&[4, 3], 1.0);
    let b = s.child("b").uniform(&[2, 2, 2], 1.0);
    let dir = std::env::temp_dir().join("lsrm-golden-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("pair.gv");
    golden::write(&path, &[&a, &b])?;
    let back = golden::read(&path)?;
    golden::compare_tensors(&[a, b], &back, 0.0)?;
    println!("{} round trips: {} tensors", path.display(), back.len());

    let good = std::fs::read(&path)?;
    let mut bad = good.clone();
    bad[40] ^= 1;
    match golden::compare_bytes(&good, &bad) {
        Ok(()) => println!("corruption went unnoticed"),
        Err(e) => println!("corrupted copy: {e}"),
    }
    Ok(())
}
