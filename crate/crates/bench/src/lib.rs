//! Fixtures shared by the benchmarks.

use olps_core::synth::{self, SdcCase, SynthSpec};
use olps_core::PriceRelativeMatrix;

/// Synthetic relatives of the drifting case with `m` assets and `t` periods.
pub fn fixture(m: usize, t: usize) -> PriceRelativeMatrix {
    let spec = SynthSpec {
        n_assets: m,
        n_periods: t,
        ..SynthSpec::new(SdcCase::Sdc3, 42)
    };
    synth::generate(&spec).expect("valid synthetic spec")
}
