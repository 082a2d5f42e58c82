//! Runs the simulation grid on one generated population and prints timings.

use std::time::Instant;
use surveyel::estimators::{estimate, ElOptions, EstimatorSpec, ModelCatalog, SummarySpec};
use surveyel::sim::{draw_external_mean, generate_population, GeneratorParams};
use surveyel::Estimand;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let params = GeneratorParams { seed, ..Default::default() };
    let data = generate_population(&params)?;
    println!("N = {}, n = {}, m = {}", data.population_size(), data.n_sampled(), data.n_respondents());
    let catalog = ModelCatalog::default();
    let ext = draw_external_mean(&params, 10_000, seed, 0)?;
    let summary = SummarySpec::mean_of("x");
    let ids = [
        "HT1", "HT0", "KH11", "KH10", "KH01", "KH00", "MM11", "EL10|10", "EL10|00", "EL00|10", "EL00|00",
        "EL10|10@S2", "EL10|10^(10000)", "MM11@S2",
    ];
    for id in ids {
        let spec = EstimatorSpec::parse(id)?;
        let t = Instant::now();
        let r = estimate(&data, &spec, &catalog, &Estimand::mean(), Some((&ext, &summary)), &ElOptions::default());
        match r {
            Ok(r) => println!("{id:>16} {:>10.5} iters {:>3} {:>8.1?}", r.theta_hat[0], r.diagnostics.iterations, t.elapsed()),
            Err(e) => println!("{id:>16} failed: {e}"),
        }
    }
    Ok(())
}
