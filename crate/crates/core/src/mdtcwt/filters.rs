//! Dual-tree filter banks.
//!
//! Coefficients are Kingsbury's published sets as distributed with the
//! open-source `dtcwt` package (`near_sym_a.npz`, `qshift_a.npz`):
//! the (5,7)-tap near-symmetric biorthogonal pair for level 1 and the
//! 10-tap quarter-shift orthonormal pair for deeper levels.

/// Level-1 biorthogonal filters (analysis `h`, synthesis `g`).
pub struct Biort {
    pub h0o: &'static [f64],
    pub g0o: &'static [f64],
    pub h1o: &'static [f64],
    pub g1o: &'static [f64],
}

/// Quarter-shift filters for levels >= 2; tree b is tree a time-reversed.
pub struct Qshift {
    pub h0a: &'static [f64],
    pub h0b: &'static [f64],
    pub g0a: &'static [f64],
    pub g0b: &'static [f64],
    pub h1a: &'static [f64],
    pub h1b: &'static [f64],
    pub g1a: &'static [f64],
    pub g1b: &'static [f64],
}

pub const NEAR_SYM_A: Biort = Biort {
    h0o: &[-0.05, 0.25, 0.6, 0.25, -0.05],
    g0o: &[
        -0.010714285714285713,
        -0.05357142857142857,
        0.26071428571428573,
        0.6071428571428571,
        0.26071428571428573,
        -0.05357142857142857,
        -0.010714285714285713,
    ],
    h1o: &[
        0.010714285714285713,
        -0.05357142857142857,
        -0.26071428571428573,
        0.6071428571428571,
        -0.26071428571428573,
        -0.05357142857142857,
        0.010714285714285713,
    ],
    g1o: &[-0.05, -0.25, 0.6, -0.25, -0.05],
};

const QA_H0A: [f64; 10] = [
    0.051130405283831656,
    -0.013975370246888838,
    -0.10983605166597087,
    0.26383956105893763,
    0.7666284677930372,
    0.5636557101270515,
    0.0008736226952170968,
    -0.1002312195074762,
    -0.0016896812725281543,
    -0.006181881892116438,
];
const QA_H0B: [f64; 10] = [
    -0.006181881892116438,
    -0.0016896812725281543,
    -0.1002312195074762,
    0.0008736226952170968,
    0.5636557101270515,
    0.7666284677930372,
    0.26383956105893763,
    -0.10983605166597087,
    -0.013975370246888838,
    0.051130405283831656,
];
const QA_H1A: [f64; 10] = [
    -0.006181881892116438,
    0.0016896812725281543,
    -0.1002312195074762,
    -0.0008736226952170968,
    0.5636557101270515,
    -0.7666284677930372,
    0.26383956105893763,
    0.10983605166597087,
    -0.013975370246888838,
    -0.051130405283831656,
];
const QA_H1B: [f64; 10] = [
    -0.051130405283831656,
    -0.013975370246888838,
    0.10983605166597087,
    0.26383956105893763,
    -0.7666284677930372,
    0.5636557101270515,
    -0.0008736226952170968,
    -0.1002312195074762,
    0.0016896812725281543,
    -0.006181881892116438,
];

// Orthonormal pair: synthesis filters are the time-reversed analysis filters.
pub const QSHIFT_A: Qshift =
    Qshift { h0a: &QA_H0A, h0b: &QA_H0B, g0a: &QA_H0B, g0b: &QA_H0A, h1a: &QA_H1A, h1b: &QA_H1B, g1a: &QA_H1B, g1b: &QA_H1A };
