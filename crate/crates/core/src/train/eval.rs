//! Full-volume inference by tiling and per-case metric evaluation.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::metrics::{dice_metric, hd95};
use crate::net::DabsegNet;
use crate::real::Real;
use crate::report::{CaseMetrics, EvalReport};
use crate::volume::{voxels, Dims, Mask, Region};

use super::data::PreparedCase;

/// Maps a `[4, D, H, W]` patch to `[3, D, H, W]` region probabilities.
pub trait PatchPredictor {
    fn patch_size(&self) -> Dims;
    fn predict_patch(&self, input: &[f64]) -> Result<Vec<f64>>;
}

/// A network evaluated at a fixed patch size.
pub struct NetPredictor<'a, T: Real> {
    pub net: &'a DabsegNet<T>,
    pub patch: Dims,
}

impl<T: Real> PatchPredictor for NetPredictor<'_, T> {
    fn patch_size(&self) -> Dims {
        self.patch
    }

    fn predict_patch(&self, input: &[f64]) -> Result<Vec<f64>> {
        let [d, h, w] = self.patch;
        let x = Tensor::<T>::from_f64(&[1, 4, d, h, w], input)?;
        Ok(self.net.infer(&x)?.to_f64())
    }
}

/// Non-overlapping tiling at the predictor's patch size. Edge tiles are
/// zero-padded and their predictions cropped back to the volume.
pub fn tiled_predict(model: &dyn PatchPredictor, input: &[f64], dims: Dims) -> Result<Vec<f64>> {
    let n = voxels(dims);
    if input.len() != 4 * n {
        return Err(Error::shape(format!(
            "tiled inference: {} values for [4, {dims:?}]",
            input.len()
        )));
    }
    let p = model.patch_size();
    let pn = voxels(p);
    let tiles: [usize; 3] = std::array::from_fn(|a| dims[a].div_ceil(p[a]));
    let mut out = vec![0.0; 3 * n];
    let mut buf = vec![0.0; 4 * pn];
    for tz in 0..tiles[0] {
        for ty in 0..tiles[1] {
            for tx in 0..tiles[2] {
                let o = [tz * p[0], ty * p[1], tx * p[2]];
                let ext: [usize; 3] = std::array::from_fn(|a| p[a].min(dims[a] - o[a]));
                buf.fill(0.0);
                for c in 0..4 {
                    for z in 0..ext[0] {
                        for y in 0..ext[1] {
                            let src = c * n + ((o[0] + z) * dims[1] + o[1] + y) * dims[2] + o[2];
                            let dst = c * pn + (z * p[1] + y) * p[2];
                            buf[dst..dst + ext[2]].copy_from_slice(&input[src..src + ext[2]]);
                        }
                    }
                }
                let pred = model.predict_patch(&buf)?;
                if pred.len() != 3 * pn {
                    return Err(Error::shape(format!(
                        "predictor returned {} values for a {p:?} patch",
                        pred.len()
                    )));
                }
                for c in 0..3 {
                    for z in 0..ext[0] {
                        for y in 0..ext[1] {
                            let dst = c * n + ((o[0] + z) * dims[1] + o[1] + y) * dims[2] + o[2];
                            let src = c * pn + (z * p[1] + y) * p[2];
                            out[dst..dst + ext[2]].copy_from_slice(&pred[src..src + ext[2]]);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Dice and HD95 per region for one case from thresholded probabilities.
pub fn case_metrics(case: &PreparedCase, probs: &[f64], threshold: f64) -> Result<CaseMetrics> {
    let n = voxels(case.dims);
    let mut dice = [0.0; 3];
    let mut hd = [0.0; 3];
    for r in Region::ALL {
        let i = r.index();
        let pred = Mask::from_probs(case.dims, &probs[i * n..(i + 1) * n], threshold)?;
        let gt = case.regions.get(r);
        dice[i] = dice_metric(&pred, gt);
        hd[i] = hd95(&pred, gt, case.spacing);
    }
    Ok(CaseMetrics {
        case_id: case.case_id.clone(),
        dice,
        hd95: hd,
    })
}

/// Evaluates every case in order.
pub fn evaluate(
    model: &dyn PatchPredictor,
    cases: &[PreparedCase],
    threshold: f64,
) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::Data("no cases to evaluate".into()));
    }
    let mut rows = Vec::with_capacity(cases.len());
    for case in cases {
        let probs =
            tiled_predict(model, &case.input, case.dims).map_err(|e| e.in_case(&case.case_id))?;
        rows.push(case_metrics(case, &probs, threshold)?);
    }
    let mut report = EvalReport::new(rows);
    report.metadata.insert("threshold".into(), threshold.into());
    report
        .metadata
        .insert("patch_size".into(), serde_json::json!(model.patch_size()));
    report.metadata.insert(
        "inference".into(),
        "non-overlapping tiles, zero-padded at the edges".into(),
    );
    Ok(report)
}
