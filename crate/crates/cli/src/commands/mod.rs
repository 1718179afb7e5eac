pub mod align;
pub mod bias;
pub mod cf;
pub mod gen_data;
pub mod rectify;
pub mod train;

use cfalign::cf::{search_lambdas, sweep, sweep_at, CFResult, SweepTrace};
use cfalign::models::Predictor;
use cfalign::nn::Mlp;
use serde::{Deserialize, Serialize};

use crate::exit::CliResult;

/// Lambdas at which sweep plots are evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepGrid {
    /// The steps the search visited, up to lambda*.
    #[default]
    Search,
    /// Evenly spaced points in `[0, lambda*]`.
    Uniform(usize),
}

pub fn sweep_on(
    grid: SweepGrid,
    f_b: &dyn Predictor,
    downstream: &[&dyn Predictor],
    decoder: &Mlp,
    cf: &CFResult,
) -> CliResult<SweepTrace> {
    Ok(match grid {
        SweepGrid::Search => sweep_at(f_b, downstream, decoder, cf, search_lambdas(cf))?,
        SweepGrid::Uniform(n) => sweep(f_b, downstream, decoder, cf, n)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_json_forms() {
        assert_eq!(serde_json::from_str::<SweepGrid>("\"search\"").unwrap(), SweepGrid::Search);
        assert_eq!(
            serde_json::from_str::<SweepGrid>("{\"uniform\": 21}").unwrap(),
            SweepGrid::Uniform(21)
        );
    }
}
