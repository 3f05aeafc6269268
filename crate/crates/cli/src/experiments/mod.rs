//! One function per experiment: `(seed, params) -> ExperimentOutput`.

mod equivalence;
mod moments;
mod sde_order;
mod theorem1;
mod train_toy;

pub use equivalence::{equivalence, EquivalenceParams};
pub use moments::{moments, MomentsParams};
pub use sde_order::{sde_order, SdeOrderParams};
pub use theorem1::{theorem1, CurveSpec, Theorem1Params};
pub use train_toy::{train_toy, ToyMethod, TrainToyParams};

/// `metric,value,threshold,pass` rows for experiments whose results are scalars.
fn assertions_csv(rows: &[crate::Assertion]) -> String {
    let mut out = String::from("metric,value,threshold,pass\n");
    for a in rows {
        out.push_str(&format!("{},{},{},{}\n", a.name, a.value, a.threshold, a.pass));
    }
    out
}
