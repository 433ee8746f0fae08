//! Shared fixtures for the benchmarks in `benches/`.

use stimtrain::data::{make_mixture, SplitSizes};
use stimtrain::{Dataset, NetworkSpec, ResidualNet};

/// The desk-scale network: (2,3,4,2,3) blocks of width 32 on 16 features.
pub fn desk_spec() -> NetworkSpec {
    NetworkSpec::uniform(16, 10, &[2, 3, 4, 2, 3], 32)
}

pub fn desk_net() -> ResidualNet {
    ResidualNet::build(&desk_spec(), 0).expect("valid spec")
}

/// Ten-class mixture with `train` rows per class.
pub fn desk_data(train: usize) -> Dataset {
    let sizes = SplitSizes {
        train,
        calib: 50,
        eval: 100,
    };
    make_mixture(10, 16, sizes, 1.5, 0.3, 0).expect("valid generator parameters")
}
