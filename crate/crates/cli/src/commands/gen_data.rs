use cfalign::data::{empirical_label_correlation, generate_dataset, DatasetConfig};

use crate::artifacts::correlation_csv;
use crate::context::Context;
use crate::exit::CliResult;

pub fn run(ctx: &Context) -> CliResult<()> {
    let mut cfg: DatasetConfig = ctx.load()?;
    if let Some(seed) = ctx.seed {
        cfg.seed = seed;
    }
    cfg.materialize_defaults();
    log::info!("generating {} samples with seed {}", cfg.n_samples, cfg.seed);
    let ds = generate_dataset(&cfg)?;
    ds.save(&ctx.out)?;
    let corr = empirical_label_correlation(&ds)?;
    ctx.write("label_correlation.csv", correlation_csv(&corr))?;
    ctx.record(&ds.config)?;

    println!("label correlation over {} samples", ds.len());
    print!("{:>12}", "");
    for n in &corr.names {
        print!("{n:>12}");
    }
    println!();
    for (n, row) in corr.names.iter().zip(&corr.values) {
        print!("{n:>12}");
        for v in row {
            print!("{v:>12.3}");
        }
        println!();
    }
    Ok(())
}
