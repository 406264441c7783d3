//! The desk-scale experiment: ten phantom subjects, leave-one-subject-out.
//!
//!     cargo run --release --example loocv_desk [-- --all] [out_dir]
//!
//! `--all` also trains C-DCNN and U-Net for the comparison table. Expect
//! tens of minutes per architecture on one core.

use std::path::PathBuf;

use thermoseg::loocv::{prepare, run_loocv, LoocvConfig};
use thermoseg::nets::{Arch, NetConfig};
use thermoseg::phantom::{generate_dataset, PhantomParams};
use thermoseg::prep::PreprocessConfig;
use thermoseg::train::TrainConfig;

fn main() -> thermoseg::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let all = args.iter().any(|a| a == "--all");
    let out = args.iter().find(|a| !a.starts_with("--")).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("loocv_desk"));

    let subjects = generate_dataset(5, 5, 7, &PhantomParams::default())?;
    let data = prepare(&subjects, &PreprocessConfig::for_height(64))?;
    let archs = if all { Arch::ALL.to_vec() } else { vec![Arch::MultiResUnet] };
    let cfg = LoocvConfig {
        archs,
        net: NetConfig { depth: 3, base_width: 12, input_hw: 64, ..NetConfig::default() },
        train: TrainConfig { epochs: 30, ..TrainConfig::default() },
        seed: 7,
        single_thread: false,
    };

    let outcome = run_loocv(&data, &cfg, &|f| {
        let mean = f.scores.iter().map(|s| s.tanimoto).sum::<f64>() / f.scores.len() as f64;
        println!("{:<12} {:<3} tanimoto {mean:.4}  {:.0}s", f.arch.name(), f.subject_id, f.seconds);
    })?;
    outcome.write(&out)?;

    print!("\n{}", outcome.report.summary_csv());
    println!("\n{}", outcome.report.per_subject_csv());
    println!("{:.1} min, results in {}", outcome.seconds / 60.0, out.display());
    Ok(())
}
