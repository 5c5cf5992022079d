//! Compare BPTT gradients of the LSTM against central finite differences.
//!
//! cargo run --release --example gradient_check

use drivelab::rnn::{mse_loss, ModelConfig, SeqModel, Sequence};
use drivelab::world::seeded_rng;
use rand::Rng;

fn main() -> drivelab::Result<()> {
    let mut rng = seeded_rng(5);
    for trial in 0..8 {
        let (t, d, h, o) = (
            rng.gen_range(1..=5),
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
        );
        let model = SeqModel::new(ModelConfig {
            input_dim: d,
            hidden_dim: h,
            output_dim: o,
            seed: trial,
        })?;
        let mut seq = |width: usize| -> Sequence {
            (0..t)
                .map(|_| (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect()
        };
        let xs = seq(d);
        let ys = seq(o);

        let (_, cache) = model.forward(&xs)?;
        let analytic: Vec<f64> = model.backward(&cache, &ys)?.iter().copied().collect();
        let mut probe = model.clone();
        let step = 1e-5;
        let mut worst = 0.0f64;
        for (i, &a) in analytic.iter().enumerate() {
            let orig = *probe.params.iter().nth(i).unwrap();
            *probe.params.iter_mut().nth(i).unwrap() = orig + step;
            let up = mse_loss(&probe.predict(&xs)?, &ys)?;
            *probe.params.iter_mut().nth(i).unwrap() = orig - step;
            let down = mse_loss(&probe.predict(&xs)?, &ys)?;
            *probe.params.iter_mut().nth(i).unwrap() = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6));
        }
        println!(
            "T={t} d={d} h={h} o={o}: {} params, max relative error {worst:.2e}",
            analytic.len()
        );
    }
    Ok(())
}
