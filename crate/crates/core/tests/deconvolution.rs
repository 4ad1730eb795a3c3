mod oracles;

use osmee::predictor::{deconvolve_density, ErrorModel, DEFAULT_GRID_SIZE};
use oracles::{gaussian_kde, normal_pdf, trapezoid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[test]
fn deconvolution_beats_the_naive_kernel_estimate() {
    let (mu, sd, sigma_w) = (0.5, 0.25, 0.141);
    let err = ErrorModel::from_sd(sigma_w).unwrap();
    let mut ise_deconv = 0.0;
    let mut ise_kde = 0.0;
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Normal::new(mu, sd).unwrap();
        let e = Normal::new(0.0, sigma_w).unwrap();
        let w: Vec<f64> = (0..1000).map(|_| x.sample(&mut rng) + e.sample(&mut rng)).collect();
        let dens = deconvolve_density(&w, &err, DEFAULT_GRID_SIZE).unwrap();
        assert!((dens.integral() - 1.0).abs() < 0.01);
        assert!(dens.density.iter().all(|f| *f >= 0.0));
        let truth: Vec<f64> = dens.grid.iter().map(|&g| normal_pdf(g, mu, sd)).collect();
        let kde = gaussian_kde(&w, &dens.grid);
        let sq = |f: &[f64]| -> Vec<f64> { f.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).collect() };
        ise_deconv += trapezoid(&dens.grid, &sq(&dens.density));
        ise_kde += trapezoid(&dens.grid, &sq(&kde));
    }
    assert!(ise_deconv < ise_kde, "deconvolution {ise_deconv}, kde {ise_kde}");
}
