//! Tanimoto and IoU on a few hand-made masks.

use thermoseg::eval::{iou, tanimoto};

fn main() -> thermoseg::Result<()> {
    let truth = [0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
    let cases: [(&str, [f64; 8]); 4] = [
        ("exact", truth),
        ("shifted", [0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]),
        // soft output close to the truth
        ("soft", [0.1, 0.9, 0.8, 0.95, 0.7, 0.2, 0.0, 0.05]),
        ("empty", [0.0; 8]),
    ];
    println!("{:<8} {:>9} {:>6}", "pred", "tanimoto", "iou");
    for (name, pred) in cases {
        println!("{name:<8} {:>9.4} {:>6.3}", tanimoto(&pred, &truth)?, iou(&pred, &truth, 0.5)?);
    }
    Ok(())
}
