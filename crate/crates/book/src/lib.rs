//! The chapters of the guide in `book/src`, compiled as documentation so
//! that `cargo test` runs every code sample against the current library.

macro_rules! chapters {
    ($($name:ident => $file:literal),* $(,)?) => {
        $(
            #[doc = include_str!(concat!("../../../book/src/", $file))]
            pub mod $name {}
        )*
    };
}

chapters! {
    introduction => "introduction.md",
    cohorts => "cohorts.md",
    survival => "survival.md",
    propensity => "propensity.md",
    horizon_effects => "horizon-effects.md",
    trajectories => "trajectories.md",
    heterogeneity => "heterogeneity.md",
    refutation => "refutation.md",
    simulation => "simulation.md",
    cli => "cli.md",
}
