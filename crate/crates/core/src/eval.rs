//! Test-set evaluation and plot-ready exports.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::LatentLocation;
use crate::model::{
    argmax_lowest, predict, representation, LabeledExample, PartBank, PartWeights, PoolingGrid, ViewTable,
};
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PartUsage {
    pub part: usize,
    /// Mean over images of the part's responses, averaged over regions.
    pub response_mean: f64,
    /// Frobenius norm of the part's `n × R` block of `u`.
    pub weight_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub n_examples: usize,
    /// `None` for classes without test images.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Mean over classes that have test images.
    pub mean_class_accuracy: f64,
    pub overall_accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub part_usage: Vec<PartUsage>,
}

/// Report from precomputed representations.
pub fn evaluate_responses(u: &PartWeights, responses: &[Vec<f64>], labels: &[usize]) -> Result<EvalReport> {
    if responses.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: responses.len(),
            actual: labels.len(),
        });
    }
    let n = u.n_classes;
    let mut confusion = vec![vec![0usize; n]; n];
    for (r, &y) in responses.iter().zip(labels) {
        if y >= n {
            return Err(Error::InvalidParameter(format!(
                "label {y} out of range for {n} classes"
            )));
        }
        confusion[y][predict(r, u)?] += 1;
    }
    let per_class_accuracy: Vec<Option<f64>> = confusion
        .iter()
        .enumerate()
        .map(|(y, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[y] as f64 / total as f64)
        })
        .collect();
    let present: Vec<f64> = per_class_accuracy.iter().flatten().copied().collect();
    let mean_class_accuracy = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    let correct: usize = (0..n).map(|y| confusion[y][y]).sum();
    let overall_accuracy = if labels.is_empty() {
        0.0
    } else {
        correct as f64 / labels.len() as f64
    };

    let rr = u.n_regions;
    let part_usage = (0..u.n_parts)
        .map(|j| {
            let cols = j * rr..(j + 1) * rr;
            let mut sum = 0.0;
            for r in responses {
                sum += r[cols.clone()].iter().sum::<f64>();
            }
            let response_mean = if responses.is_empty() {
                0.0
            } else {
                sum / (responses.len() * rr) as f64
            };
            let weight_norm = (0..n)
                .map(|y| u.row(y)[cols.clone()].iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            PartUsage {
                part: j,
                response_mean,
                weight_norm,
            }
        })
        .collect();

    Ok(EvalReport {
        n_examples: labels.len(),
        per_class_accuracy,
        mean_class_accuracy,
        overall_accuracy,
        confusion,
        part_usage,
    })
}

/// Scores every example with flip-averaged responses and predicts the top
/// class.
pub fn evaluate(
    u: &PartWeights,
    bank: &PartBank,
    grid: &PoolingGrid,
    examples: &[LabeledExample],
) -> Result<EvalReport> {
    if u.n_parts != bank.len() || u.n_regions != grid.len() {
        return Err(Error::DimensionMismatch {
            expected: bank.len() * grid.len(),
            actual: u.cols(),
        });
    }
    let responses: Vec<Vec<f64>> = par::map(examples, |ex| representation(ex, bank, grid))
        .into_iter()
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    evaluate_responses(u, &responses, &labels)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Detection {
    pub image_id: String,
    pub image: usize,
    pub location: LatentLocation,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PartDetections {
    pub part: usize,
    pub detections: Vec<Detection>,
}

/// For each part, the `top_k` images with the highest part score (anywhere in
/// the unmirrored pyramid), each with its best location. Ties go to the
/// lowest image index.
pub fn top_detections(bank: &PartBank, examples: &[LabeledExample], top_k: usize) -> Result<Vec<PartDetections>> {
    let grid = PoolingGrid::global();
    let tables: Vec<ViewTable> = par::map(examples, |ex| ViewTable::build(&ex.pyramid, bank.window(), &grid))
        .into_iter()
        .collect::<Result<_>>()?;
    let best: Vec<Vec<Option<(f64, LatentLocation)>>> = par::map(&bank.parts, |part| {
        tables
            .iter()
            .map(|t| {
                let scores = t.scores(&part.weights);
                (!scores.is_empty()).then(|| {
                    let i = argmax_lowest(&scores);
                    (scores[i], t.locs[i])
                })
            })
            .collect()
    });
    Ok(best
        .into_iter()
        .enumerate()
        .map(|(j, per_image)| {
            let mut hits: Vec<(usize, f64, LatentLocation)> = per_image
                .into_iter()
                .enumerate()
                .filter_map(|(i, b)| b.map(|(s, z)| (i, s, z)))
                .collect();
            hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            hits.truncate(top_k);
            PartDetections {
                part: j,
                detections: hits
                    .into_iter()
                    .map(|(i, score, location)| Detection {
                        image_id: examples[i].pyramid.source_id.clone(),
                        image: i,
                        location,
                        score,
                    })
                    .collect(),
            }
        })
        .collect())
}
