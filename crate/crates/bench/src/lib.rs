//! Shared inputs for the pipeline benchmarks.

use osmee::basis::{BasisDesign, BasisKind};
use osmee::family::FamilySpec;
use osmee::predictor::{estimate_prior_moments, sample_gaussian_posterior, ErrorModel, PosteriorSampleSet};
use osmee::simlab::{case_by_id, generate_dataset, PredictorLaw, SimData};

pub struct Fixture {
    pub data: SimData,
    pub err: ErrorModel,
    pub design: BasisDesign,
    pub samples: PosteriorSampleSet,
}

/// Case 1 Poisson data of size `n` with `s` posterior draws per observation.
pub fn poisson_fixture(n: usize, s: usize) -> Fixture {
    let case = case_by_id(1).expect("case 1 exists");
    let data = generate_dataset(&case, &FamilySpec::poisson(), n, PredictorLaw::Gaussian, 7).expect("valid case");
    let err = ErrorModel::new(case.sigma_w2).expect("positive variance");
    let design = BasisDesign::build(BasisKind::default(), &data.w).expect("enough distinct points");
    let prior = estimate_prior_moments(&data.w, &err).expect("enough points");
    let samples = sample_gaussian_posterior(&prior, &err, &data.w, s, 11).expect("s >= 2");
    Fixture {
        data,
        err,
        design,
        samples,
    }
}
