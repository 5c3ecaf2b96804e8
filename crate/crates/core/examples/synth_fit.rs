//! Fit the synthetic three-cluster suite off-line and on-line and print
//! the agreement with the generating labels.

use hdpgpc::inference::{fit_offline, fit_online, InferenceConfig};
use hdpgpc::metrics::{adjusted_rand_index, cluster_count};
use hdpgpc::synth::{synth_generate_full, SynthSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seeds: Vec<u64> = std::env::args().skip(1).map(|s| s.parse()).collect::<Result<_, _>>()?;
    let seeds = if seeds.is_empty() { vec![0] } else { seeds };
    for seed in seeds {
        let data = synth_generate_full(&SynthSpec {
            seed,
            ..SynthSpec::default()
        })?;
        let t0 = std::time::Instant::now();
        let off = fit_offline(&data.segments, &InferenceConfig::default())?;
        let t_off = t0.elapsed().as_secs_f64();
        let on = fit_online(&data.segments, &InferenceConfig::streaming())?;
        let ari_off = adjusted_rand_index(&off.assignments(), &data.labels)?;
        let ari_on = adjusted_rand_index(&on.assignments(), &data.labels)?;
        let trace = &off.elbo_trace;
        let worst = trace
            .windows(2)
            .map(|w| (w[0] - w[1]) / w[1].abs())
            .fold(f64::NEG_INFINITY, f64::max);
        println!(
            "seed {seed}: offline ARI {ari_off:.3} K {} count {} iters {} conv {} ({t_off:.1}s, worst rel drop {worst:.2e}) | online ARI {ari_on:.3} K {} count {}",
            off.k(),
            cluster_count(&off),
            off.iterations,
            off.converged,
            on.k(),
            cluster_count(&on)
        );
    }
    Ok(())
}
