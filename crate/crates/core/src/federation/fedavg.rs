use serde::{Deserialize, Serialize};

use crate::classifier::ModelParameters;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AggregationWeighting {
    #[default]
    Uniform,
    BySampleCount,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ModelParameters,
    pub sample_count: usize,
}

/// Federated averaging of client parameter vectors.
///
/// Updates are processed in ascending client id. The mean is accumulated as
/// an offset from the first update, `x_0 + sum(w_i * (x_i - x_0))`, so
/// averaging identical models returns them bit for bit.
pub fn fedavg(
    updates: &[ClientUpdate],
    weighting: AggregationWeighting,
) -> Result<ModelParameters> {
    if updates.is_empty() {
        return Err(Error::invalid("fedavg over an empty update list"));
    }
    let mut ordered: Vec<&ClientUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    if let Some(w) = ordered
        .windows(2)
        .find(|w| w[0].client_id == w[1].client_id)
    {
        return Err(Error::Protocol(format!(
            "two updates from client {}",
            w[0].client_id
        )));
    }
    let base = &ordered[0].params;
    for u in &ordered[1..] {
        if u.params.shapes != base.shapes || u.params.values.len() != base.values.len() {
            return Err(Error::Protocol(format!(
                "client {} sent layer shapes {:?}, expected {:?}",
                u.client_id, u.params.shapes, base.shapes
            )));
        }
    }
    if ordered.len() == 1 {
        return Ok(base.clone());
    }

    let weights: Vec<f64> = match weighting {
        AggregationWeighting::Uniform => vec![1.0 / ordered.len() as f64; ordered.len()],
        AggregationWeighting::BySampleCount => {
            let total: usize = ordered.iter().map(|u| u.sample_count).sum();
            if total == 0 {
                return Err(Error::invalid(
                    "sample-count weighting with zero total samples",
                ));
            }
            ordered
                .iter()
                .map(|u| u.sample_count as f64 / total as f64)
                .collect()
        }
    };

    let mut values = base.values.clone();
    for (i, v) in values.iter_mut().enumerate() {
        let x0 = base.values[i];
        let offset: f64 = ordered[1..]
            .iter()
            .zip(&weights[1..])
            .map(|(u, w)| w * (u.params.values[i] - x0))
            .sum();
        *v = x0 + offset;
    }
    Ok(ModelParameters {
        shapes: base.shapes.clone(),
        values,
    })
}
