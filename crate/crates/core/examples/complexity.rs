//! Self-attention cost of local-window and channel attention as the feature
//! map grows.

use fair_denoise::attention::{sa_complexity, ComplexityKind};

fn main() -> fair_denoise::Result<()> {
    println!("{:>5} {:>14} {:>14}", "size", "window M=8", "channel L=4");
    for size in [32, 64, 128, 256] {
        let local = sa_complexity(ComplexityKind::LocalSpatial, size, size, 16, 8, 1)?;
        let channel = sa_complexity(ComplexityKind::Channel, size, size, 16, 1, 4)?;
        println!("{size:>5} {:>14} {:>14}", local.total, channel.total);
    }
    Ok(())
}
