//! Inference-mode evaluation over whole clouds.

use codecforge_core::metrics::{ConfusionMatrix, MetricsReport};
use codecforge_core::point::{build_hierarchy, PointCloud};
use codecforge_core::rng::derive_seed;
use codecforge_core::{Model, ModelInput, Scalar};

use crate::config::TrainConfig;
use crate::error::{HarnessError, Result};

const EVAL_STREAM: u64 = 0xE7A1;

/// Predicted class of every point of `cloud`, using all of its points.
/// The hierarchy of cloud `index` is seeded from `(seed, index)`.
pub fn predict<T: Scalar>(
    model: &Model<T>,
    config: &TrainConfig,
    cloud: &PointCloud,
    index: usize,
    threads: usize,
) -> Result<Vec<usize>> {
    if cloud.len() < config.min_points() {
        return Err(HarnessError::Config(format!(
            "cloud {index} has {} points, fewer than the {} the hierarchy needs",
            cloud.len(),
            config.min_points()
        )));
    }
    let seed = derive_seed(derive_seed(config.seed, EVAL_STREAM), index as u64);
    let hier = build_hierarchy(&cloud.coords, config.hierarchy_ratios(), config.k, seed, threads)?;
    let features = cloud.features::<T>(config.features)?;
    let input = ModelInput {
        features: &features,
        hierarchy: &hier,
        labels: None,
    };
    Ok(model.evaluate(&input, false, 0, false)?.logits.argmax_rows())
}

/// Confusion matrix over every point of every cloud, dropout off and batch
/// norm on running statistics. Clouds are spread over up to `threads`
/// workers; the result does not depend on the count.
pub fn confusion<T: Scalar>(
    model: &Model<T>,
    config: &TrainConfig,
    data: &[PointCloud],
    threads: usize,
) -> Result<ConfusionMatrix> {
    for (i, cloud) in data.iter().enumerate() {
        if cloud.num_classes != model.classes {
            return Err(HarnessError::Config(format!(
                "cloud {i} has {} classes, the model predicts {}",
                cloud.num_classes, model.classes
            )));
        }
        cloud.labels()?;
    }
    let one = |i: usize| -> Result<ConfusionMatrix> {
        let mut cm = ConfusionMatrix::new(model.classes);
        let pred = predict(model, config, &data[i], i, 0)?;
        cm.accumulate(&pred, data[i].labels()?)?;
        Ok(cm)
    };
    let parts: Vec<Result<ConfusionMatrix>> = if threads > 1 && data.len() > 1 {
        let workers = threads.min(data.len());
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let one = &one;
                    s.spawn(move || (w..data.len()).step_by(workers).map(one).collect::<Vec<_>>())
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    } else {
        (0..data.len()).map(one).collect()
    };
    let mut total = ConfusionMatrix::new(model.classes);
    for part in parts {
        total.merge(&part?)?;
    }
    Ok(total)
}

pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    config: &TrainConfig,
    data: &[PointCloud],
    threads: usize,
) -> Result<MetricsReport> {
    Ok(confusion(model, config, data, threads)?.report()?)
}
