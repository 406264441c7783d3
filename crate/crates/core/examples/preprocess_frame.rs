//! Run the thermal preprocessing chain on one phantom frame and save the
//! intermediate images as PGM.

use thermoseg::pgm;
use thermoseg::phantom::{generate_subject, PhantomParams, SubjectKind};
use thermoseg::prep::{box_filter, otsu_threshold, preprocess, remap_to_8bit, PreprocessConfig};

fn main() -> thermoseg::Result<()> {
    let out = std::env::temp_dir().join("thermoseg_prep");
    std::fs::create_dir_all(&out).map_err(|e| thermoseg::Error::Io { path: out.clone(), source: e })?;

    let subject = generate_subject(21, &PhantomParams::default(), SubjectKind::Patient)?;
    let frame = &subject.frames[0];
    let cfg = PreprocessConfig::for_height(frame.height);
    println!("{}x{} frame, box filter {}x{}", frame.width, frame.height, cfg.smooth_kernel, cfg.smooth_kernel);

    let smoothed = box_filter(frame, cfg.smooth_kernel)?;
    let otsu = otsu_threshold(&smoothed);
    println!("otsu threshold {} (degenerate: {})", otsu.threshold, otsu.degenerate);

    let p = preprocess(frame, &cfg)?;
    let zero = p.image.pixels.iter().filter(|&&v| v == 0).count();
    println!("{zero} of {} pixels are background after remap", p.image.pixels.len());

    let raw8 = remap_to_8bit(frame);
    pgm::write_gray8(out.join("raw.pgm"), raw8.width, raw8.height, &raw8.pixels)?;
    let sm8 = remap_to_8bit(&smoothed);
    pgm::write_gray8(out.join("smoothed.pgm"), sm8.width, sm8.height, &sm8.pixels)?;
    pgm::write_gray8(out.join("preprocessed.pgm"), p.image.width, p.image.height, &p.image.pixels)?;
    pgm::write_gray8(out.join("mask.pgm"), subject.mask.width, subject.mask.height, &subject.mask.pixels)?;
    println!("images in {}", out.display());
    Ok(())
}
