//! Prints selected rows of the standard and rescaled noise schedules.
//!
//! cargo run --example noise_schedule -- 200

use platesr::NoiseSchedule;

fn main() -> platesr::Result<()> {
    let steps: usize = std::env::args().nth(1).map_or(Ok(200), |s| s.parse()).expect("timesteps must be an integer");
    for (name, schedule) in [("standard", NoiseSchedule::standard()), ("rescaled", NoiseSchedule::rescaled(steps)?)] {
        let t_max = schedule.timesteps();
        println!("{name} (T = {t_max})");
        println!("{:>6} {:>10} {:>12} {:>12} {:>10}", "t", "beta", "alpha_bar", "beta_tilde", "snr");
        for t in [1, t_max / 10, t_max / 2, t_max].into_iter().filter(|&t| t >= 1) {
            let row = schedule.lookup(t)?;
            println!(
                "{t:>6} {:>10.3e} {:>12.4e} {:>12.4e} {:>10.3e}",
                row.beta,
                row.alpha_bar,
                row.posterior_variance,
                schedule.snr(t)?
            );
        }
    }
    Ok(())
}
