//! Parameter counts of the three architectures and their building blocks.

use thermoseg::nets::{build, multires_block_graph, res_path_graph, Arch, MultiResBlockSpec, NetConfig};

fn main() -> thermoseg::Result<()> {
    let block = MultiResBlockSpec::new(1, 6)?;
    println!("MultiRes block W=6 in=1: {} parameters", multires_block_graph(&block, 16)?.count_params());
    println!("Res-Path ch=2 len=1:     {} parameters", res_path_graph(2, 1, 16)?.count_params());

    for (depth, width) in [(3, 12), (4, 16)] {
        println!("depth {depth}, base width {width}, 64x64:");
        for arch in Arch::ALL {
            let g = build(&NetConfig { arch, depth, base_width: width, ..NetConfig::default() })?;
            println!("  {:<13} {:>9}", arch.label(), g.count_params());
        }
    }
    Ok(())
}
