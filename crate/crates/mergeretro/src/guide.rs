//! The user guide, embedded so that every code example in the rendered book
//! (`book/`) is compiled and executed as a doc-test.

macro_rules! chapter {
    ($name:ident, $path:literal) => {
        #[doc = include_str!($path)]
        pub mod $name {}
    };
}

chapter!(intro, "../../../book/src/intro.md");
chapter!(panels, "../../../book/src/panel.md");
chapter!(did, "../../../book/src/did.md");
chapter!(structural, "../../../book/src/structural.md");
chapter!(estimation, "../../../book/src/estimation.md");
chapter!(synthetic, "../../../book/src/sgmm.md");
chapter!(simulation, "../../../book/src/simulation.md");
chapter!(cli, "../../../book/src/cli.md");
