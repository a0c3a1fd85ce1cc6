//! Synthetic identities as Gaussian clusters, split IID across clients, plus
//! a delimited text format for labeled feature vectors.
//!
//! Text format: one sample per line, `label, x_1, ..., x_D`, where `label`
//! is a class id or the token `unknown`. Blank lines and lines starting with
//! `#` are ignored.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::classifier::LabeledSample;
use crate::error::{Error, Result};
use crate::label::Label;
use crate::numerics::euclidean;

/// Consecutive rejected draws after which an unknown center is declared infeasible.
pub const MAX_REJECTIONS: usize = 10_000;

/// Unknown centers must lie at least this many `cluster_std` from every known center.
pub const DEFAULT_SEPARATION: f64 = 3.0;

fn default_separation() -> f64 {
    DEFAULT_SEPARATION
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(rename = "K")]
    pub num_classes: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    pub num_clients: usize,
    pub train_per_class_per_client: usize,
    pub test_per_class: usize,
    pub num_unknown: usize,
    pub cluster_std: f64,
    pub cluster_center_scale: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_separation")]
    pub separation_stds: f64,
}

impl DatasetSpec {
    /// Desk-scale defaults: 10 identities, 5 clients, 20 train / 30 test
    /// samples per class, 500 unknowns.
    pub fn desk_scale() -> Self {
        Self {
            num_classes: 10,
            dim: 16,
            num_clients: 5,
            train_per_class_per_client: 20,
            test_per_class: 30,
            num_unknown: 500,
            cluster_std: 0.5,
            cluster_center_scale: 5.0,
            seed: 0,
            separation_stds: DEFAULT_SEPARATION,
        }
    }

    /// Face-recognition-sized counts: 70 identities,
    /// 5 clients with 60 images each per identity, 50 test images per
    /// identity, 8000 unknown singletons.
    pub fn large_scale() -> Self {
        Self {
            num_classes: 70,
            num_clients: 5,
            train_per_class_per_client: 60,
            test_per_class: 50,
            num_unknown: 8000,
            ..Self::desk_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("K", self.num_classes),
            ("D", self.dim),
            ("num_clients", self.num_clients),
            (
                "train_per_class_per_client",
                self.train_per_class_per_client,
            ),
            ("test_per_class", self.test_per_class),
            ("num_unknown", self.num_unknown),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("dataset.{name} must be at least 1")));
        }
        if !(self.cluster_std > 0.0 && self.cluster_std.is_finite()) {
            return Err(Error::invalid("dataset.cluster_std must be positive"));
        }
        if !(self.cluster_center_scale > 0.0 && self.cluster_center_scale.is_finite()) {
            return Err(Error::invalid(
                "dataset.cluster_center_scale must be positive",
            ));
        }
        if !(self.separation_stds >= 0.0 && self.separation_stds.is_finite()) {
            return Err(Error::invalid(
                "dataset.separation_stds must be non-negative",
            ));
        }
        Ok(())
    }
}

/// A test sample whose true label may be unknown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenSetSample {
    pub features: Vec<f64>,
    pub true_label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedData {
    pub clients: Vec<Vec<LabeledSample>>,
    pub closed_test: Vec<LabeledSample>,
    /// Closed test samples followed by one sample per unknown identity.
    pub open_test: Vec<OpenSetSample>,
    pub known_centers: Vec<Vec<f64>>,
    pub unknown_centers: Vec<Vec<f64>>,
}

fn uniform_point(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-scale..=scale)).collect()
}

fn gaussian_around(rng: &mut ChaCha8Rng, noise: &Normal<f64>, center: &[f64]) -> Vec<f64> {
    center.iter().map(|c| c + noise.sample(rng)).collect()
}

/// Generates the federated dataset. Deterministic in `spec.seed` (ChaCha8).
///
/// Draw order: known centers, unknown centers, client training sets (client
/// by client, class by class), closed test set, unknown samples.
pub fn generate(spec: &DatasetSpec) -> Result<GeneratedData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.cluster_std).map_err(|e| Error::invalid(e.to_string()))?;
    let margin = spec.separation_stds * spec.cluster_std;

    let known_centers: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| uniform_point(&mut rng, spec.dim, spec.cluster_center_scale))
        .collect();

    let mut unknown_centers = Vec::with_capacity(spec.num_unknown);
    for i in 0..spec.num_unknown {
        let mut rejected = 0;
        loop {
            let candidate = uniform_point(&mut rng, spec.dim, spec.cluster_center_scale);
            if known_centers
                .iter()
                .all(|k| euclidean(k, &candidate) >= margin)
            {
                unknown_centers.push(candidate);
                break;
            }
            rejected += 1;
            if rejected >= MAX_REJECTIONS {
                return Err(Error::InfeasibleSpec(format!(
                    "could not place unknown identity {i} at least {margin} from every known center \
                     after {MAX_REJECTIONS} draws"
                )));
            }
        }
    }

    let clients = (0..spec.num_clients)
        .map(|_| {
            known_centers
                .iter()
                .enumerate()
                .flat_map(|(label, center)| {
                    (0..spec.train_per_class_per_client)
                        .map(|_| {
                            LabeledSample::new(gaussian_around(&mut rng, &noise, center), label)
                        })
                        .collect::<Vec<_>>()
                })
                .collect::<Vec<_>>()
        })
        .collect();

    let closed_test: Vec<LabeledSample> = known_centers
        .iter()
        .enumerate()
        .flat_map(|(label, center)| {
            (0..spec.test_per_class)
                .map(|_| LabeledSample::new(gaussian_around(&mut rng, &noise, center), label))
                .collect::<Vec<_>>()
        })
        .collect();

    let mut open_test: Vec<OpenSetSample> = closed_test
        .iter()
        .map(|s| OpenSetSample {
            features: s.features.clone(),
            true_label: Label::Known(s.label),
        })
        .collect();
    for center in &unknown_centers {
        open_test.push(OpenSetSample {
            features: gaussian_around(&mut rng, &noise, center),
            true_label: Label::Unknown,
        });
    }

    Ok(GeneratedData {
        clients,
        closed_test,
        open_test,
        known_centers,
        unknown_centers,
    })
}

/// Parses the delimited sample format.
pub fn parse_samples(text: &str, delimiter: char) -> Result<Vec<OpenSetSample>> {
    let mut samples = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let mut fields = line.split(delimiter).map(str::trim);
        let label: Label = fields
            .next()
            .unwrap_or_default()
            .parse()
            .map_err(parse_err)?;
        let features = fields
            .enumerate()
            .map(|(j, f)| match f.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(parse_err(format!(
                    "field {} (`{f}`) is not a finite number",
                    j + 2
                ))),
            })
            .collect::<Result<Vec<f64>>>()?;
        if features.is_empty() {
            return Err(parse_err("row has a label but no features".into()));
        }
        match dim {
            None => dim = Some(features.len()),
            Some(d) if d != features.len() => {
                return Err(parse_err(format!(
                    "row has {} features, earlier rows have {d}",
                    features.len()
                )))
            }
            Some(_) => {}
        }
        samples.push(OpenSetSample {
            features,
            true_label: label,
        });
    }
    if samples.is_empty() {
        return Err(Error::Parse {
            line: 0,
            message: "no samples in input".into(),
        });
    }
    Ok(samples)
}

/// Reads a comma-delimited sample file.
pub fn load_external(path: impl AsRef<Path>) -> Result<Vec<OpenSetSample>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
    parse_samples(&text, ',').map_err(|e| e.in_file(path))
}

/// Renders samples in the delimited format, with optional `#` header lines.
pub fn format_samples<'a>(
    samples: impl IntoIterator<Item = (Label, &'a [f64])>,
    header: &[String],
) -> String {
    let mut out = String::new();
    for h in header {
        let _ = writeln!(out, "# {h}");
    }
    for (label, features) in samples {
        let _ = write!(out, "{label}");
        for v in features {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    out
}

/// Known-only samples for training or closed-set evaluation.
pub fn known_only(samples: &[OpenSetSample]) -> Result<Vec<LabeledSample>> {
    samples
        .iter()
        .map(|s| match s.true_label {
            Label::Known(c) => Ok(LabeledSample::new(s.features.clone(), c)),
            Label::Unknown => Err(Error::invalid(
                "unknown-labeled sample where only known classes are allowed",
            )),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec {
            num_classes: 4,
            dim: 6,
            num_clients: 3,
            train_per_class_per_client: 7,
            test_per_class: 5,
            num_unknown: 40,
            seed: 17,
            ..DatasetSpec::desk_scale()
        }
    }

    #[test]
    fn counts_and_iid_split() {
        let spec = small();
        let data = generate(&spec).unwrap();
        assert_eq!(data.clients.len(), 3);
        for client in &data.clients {
            assert_eq!(client.len(), 4 * 7);
            for c in 0..4 {
                assert_eq!(client.iter().filter(|s| s.label == c).count(), 7);
            }
        }
        assert_eq!(data.closed_test.len(), 4 * 5);
        assert_eq!(data.open_test.len(), 4 * 5 + 40);
        assert_eq!(
            data.open_test
                .iter()
                .filter(|s| s.true_label.is_unknown())
                .count(),
            40
        );
        assert!(data.clients.iter().flatten().all(|s| s.features.len() == 6));
    }

    #[test]
    fn unknown_centers_keep_their_distance() {
        let spec = small();
        let data = generate(&spec).unwrap();
        let margin = 3.0 * spec.cluster_std;
        for u in &data.unknown_centers {
            for k in &data.known_centers {
                assert!(euclidean(u, k) >= margin);
            }
        }
    }

    #[test]
    fn deterministic_in_seed() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = DatasetSpec {
            seed: 18,
            ..small()
        };
        assert_ne!(generate(&small()).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn large_scale_counts() {
        let spec = DatasetSpec::large_scale();
        assert_eq!(
            spec.num_classes * spec.test_per_class + spec.num_unknown,
            11_500
        );
    }

    #[test]
    fn infeasible_spec() {
        let spec = DatasetSpec {
            dim: 1,
            num_classes: 50,
            cluster_center_scale: 1.0,
            cluster_std: 1.0,
            ..small()
        };
        assert!(matches!(generate(&spec), Err(Error::InfeasibleSpec(_))));
    }

    #[test]
    fn invalid_spec() {
        assert!(generate(&DatasetSpec {
            num_clients: 0,
            ..small()
        })
        .is_err());
        assert!(generate(&DatasetSpec {
            cluster_std: 0.0,
            ..small()
        })
        .is_err());
    }

    #[test]
    fn parses_known_and_unknown_rows() {
        let s = parse_samples("0, 1.0, 2.0\nunknown, 0.5, 0.5\n", ',').unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].true_label, Label::Known(0));
        assert_eq!(s[0].features, vec![1.0, 2.0]);
        assert_eq!(s[1].true_label, Label::Unknown);
    }

    #[test]
    fn parse_errors_name_the_line() {
        assert!(matches!(parse_samples("", ','), Err(Error::Parse { .. })));
        assert!(matches!(
            parse_samples("# only a comment\n", ','),
            Err(Error::Parse { .. })
        ));
        let ragged = parse_samples("0, 1.0, 2.0\n1, 1.0, 2.0, 3.0\n", ',');
        assert!(
            matches!(ragged, Err(Error::Parse { line: 2, .. })),
            "{ragged:?}"
        );
        assert!(matches!(
            parse_samples("0, 1.0\n1, abc\n", ','),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_samples("Unknown, 1.0\n", ','),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_samples("0, NaN\n", ','),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_samples("3\n", ','),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn format_roundtrips_exactly() {
        let data = generate(&small()).unwrap();
        let text = format_samples(
            data.open_test
                .iter()
                .map(|s| (s.true_label, s.features.as_slice())),
            &["seed=17".to_string()],
        );
        assert!(text.starts_with("# seed=17\n"));
        assert_eq!(parse_samples(&text, ',').unwrap(), data.open_test);
    }
}
