//! Train each architecture on a single image/mask pair and watch the loss
//! collapse. A quick way to see that the whole training stack works.

use thermoseg::loocv::prepare;
use thermoseg::nets::{count_params, Arch, Model, NetConfig};
use thermoseg::phantom::{generate_dataset, PhantomParams};
use thermoseg::prep::PreprocessConfig;
use thermoseg::train::{train_with, TrainConfig, TrainPair};

fn main() -> thermoseg::Result<()> {
    let params = PhantomParams { frames_per_subject: 1, ..PhantomParams::default() };
    let subjects = generate_dataset(1, 1, 11, &params)?;
    let data = prepare(&subjects, &PreprocessConfig::for_height(64))?;
    let pair = TrainPair { image: data[0].images[0].clone(), mask: data[0].mask.clone() };

    for arch in Arch::ALL {
        let cfg = NetConfig { arch, depth: 3, base_width: 12, seed: 1, ..NetConfig::default() };
        let mut model = Model::from_config(&cfg)?;
        println!("{} ({} parameters)", arch.label(), count_params(&model.graph));
        let tc = TrainConfig { epochs: 60, batch_size: 1, seed: 1, ..TrainConfig::default() };
        train_with(&mut model, std::slice::from_ref(&pair), &tc, |e| {
            if e.epoch % 10 == 0 {
                println!("  epoch {:>3}  bce {:.4}", e.epoch, e.loss);
            }
        })?;
    }
    Ok(())
}
