//! Generate a small phantom dataset and write it to disk.
//!
//!     cargo run --example phantom_dataset -- /tmp/phantoms

use std::path::PathBuf;

use thermoseg::phantom::{generate_dataset, read_dataset, write_dataset, PhantomParams};

fn main() -> thermoseg::Result<()> {
    let root = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("phantoms"));
    let params = PhantomParams::default();
    let subjects = generate_dataset(5, 5, 7, &params)?;

    println!("{:<4} {:<10} {:>6} {:>8} {:>8}  crop", "id", "kind", "small", "area", "frame0");
    for s in &subjects {
        let area = s.mask.pixels.iter().filter(|&&p| p == 255).count() as f64 / s.mask.pixels.len() as f64;
        let mean0 = s.frames[0].pixels.iter().map(|&p| p as f64).sum::<f64>() / s.frames[0].pixels.len() as f64;
        println!(
            "{:<4} {:<10} {:>6} {:>8.3} {:>8.0}  {}",
            s.subject_id, s.kind, s.small_breast, area, mean0, s.recommended_crop
        );
    }

    write_dataset(&root, &subjects)?;
    // round trip
    let back = read_dataset(&root)?;
    assert_eq!(back, subjects);
    println!("wrote {} subjects to {}", subjects.len(), root.display());
    Ok(())
}
