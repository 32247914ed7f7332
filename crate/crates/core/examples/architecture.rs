//! Layer-by-layer shapes, parameter counts and the channel split for each
//! built-in preset, without allocating any weights.
//!
//!     cargo run --example architecture [preset]

use ensnet::config::{RunConfig, PRESETS};
use ensnet::model::{describe, split_ranges, trace_shapes};

fn main() -> ensnet::Result<()> {
    let wanted = std::env::args().nth(1);
    for (name, _) in PRESETS {
        if wanted.as_deref().is_some_and(|w| w != name) {
            continue;
        }
        let cfg = RunConfig::preset(name)?;
        println!("== {name}");
        print!("{}", describe(&cfg.model)?);
        let trace = trace_shapes(&cfg.model)?;
        let ranges = split_ranges(trace.feature_shape[0], cfg.model.split_count);
        let first = &ranges[0];
        let last = ranges.last().unwrap();
        println!(
            "channels {}..{} go to subnet 0, {}..{} to subnet {}\n",
            first.start,
            first.end,
            last.start,
            last.end,
            ranges.len() - 1
        );
    }
    Ok(())
}
