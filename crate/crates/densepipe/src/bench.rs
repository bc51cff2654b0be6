//! Single-image inference latency measurement.

use std::time::Instant;

use densepipe_core::error::{Error, Result};
use densepipe_core::graph::ModelGraph;
use densepipe_core::ops::Mode;
use densepipe_core::rng::Rng;
use densepipe_core::tensor::Tensor;
use densepipe_core::train::Sample;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyReport {
    pub images_per_run: usize,
    pub runs: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

impl LatencyReport {
    pub fn render(&self) -> String {
        format!(
            "images_per_run = {}\nruns = {}\nmean_ms = {:.6}\nstd_ms = {:.6}\nmin_ms = {:.6}\nmax_ms = {:.6}\n",
            self.images_per_run, self.runs, self.mean_ms, self.std_ms, self.min_ms, self.max_ms
        )
    }
}

/// Wall-clock forward time per image over single-image eval batches.
/// `warmup` full passes run first and are excluded; per-image times are
/// aggregated across `runs` timed passes.
pub fn bench_inference(
    model: &mut ModelGraph,
    set: &[Sample],
    warmup: usize,
    runs: usize,
) -> Result<LatencyReport> {
    if runs < 1 {
        return Err(Error::Param("bench runs must be >= 1".into()));
    }
    if set.is_empty() {
        return Err(Error::Data("bench needs at least one image".into()));
    }
    let mut rng = Rng::new(0); // eval mode draws nothing
    let singles: Vec<Tensor> = set
        .iter()
        .map(|s| {
            let sh = s.input.shape();
            Tensor::from_vec(&[1, sh[0], sh[1], sh[2]], s.input.data().to_vec())
        })
        .collect();
    let mut times_ms = Vec::with_capacity(runs * singles.len());
    for pass in 0..warmup + runs {
        for single in &singles {
            let start = Instant::now();
            model.forward(single, Mode::Eval, &mut rng)?;
            let elapsed = start.elapsed().as_secs_f64() * 1e3;
            if pass >= warmup {
                times_ms.push(elapsed);
            }
        }
    }
    let n = times_ms.len() as f64;
    let mean = times_ms.iter().sum::<f64>() / n;
    let var = times_ms.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
    let min = times_ms.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = times_ms.iter().cloned().fold(0.0f64, f64::max);
    Ok(LatencyReport {
        images_per_run: singles.len(),
        runs,
        mean_ms: mean,
        std_ms: var.sqrt(),
        min_ms: min,
        max_ms: max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use densepipe_core::graph::{DenseNetConfig, ModelKind};

    #[test]
    fn report_fields_ordered_and_nonnegative() {
        let mut model =
            ModelGraph::build(DenseNetConfig::toy(32), ModelKind::Dense, 1).unwrap();
        let set: Vec<Sample> = (0..3)
            .map(|i| Sample {
                input: Tensor::filled(&[1, 32, 32], i as f64 * 0.1),
                label: i % 2,
            })
            .collect();
        let r = bench_inference(&mut model, &set, 1, 2).unwrap();
        assert_eq!(r.images_per_run, 3);
        assert!(r.min_ms >= 0.0);
        assert!(r.min_ms <= r.mean_ms && r.mean_ms <= r.max_ms);
        assert!(r.std_ms >= 0.0);
        assert!(bench_inference(&mut model, &set, 0, 0).is_err());
    }
}
