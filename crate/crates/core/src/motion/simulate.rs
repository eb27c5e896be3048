use super::fft::{fft3, ifft3, ComplexSpectrum};
use super::rigid::resample_rigid;
use super::MotionTimeline;
use crate::error::{Error, Result};
use crate::volume::ScalarVolume;

/// Segment index owning each of the `n` frequency planes along the axis.
///
/// Planes are acquired in a linear sweep from the most negative to the most
/// positive frequency, so plane `f` sits at acquisition position
/// `(f + n/2) mod n`; segment `i` covers positions
/// `[round(n * c_i), round(n * c_{i+1}))` where `c` are the cumulative fractions.
pub fn plane_owners(n: usize, fractions: &[f64]) -> Vec<usize> {
    let mut bounds = Vec::with_capacity(fractions.len());
    let mut cum = 0.0;
    for f in fractions {
        cum += f;
        bounds.push(((cum * n as f64).round() as usize).min(n));
    }
    if let Some(last) = bounds.last_mut() {
        *last = n;
    }
    (0..n)
        .map(|f| {
            let pos = (f + n / 2) % n;
            bounds
                .iter()
                .position(|&b| pos < b)
                .unwrap_or(fractions.len() - 1)
        })
        .collect()
}

/// Assembles the composite spectrum, taking each plane along `axis` from the
/// segment that owns it. Returns the composite and the owner of every plane.
pub fn composite_spectrum(
    spectra: &[ComplexSpectrum],
    timeline: &MotionTimeline,
) -> Result<(ComplexSpectrum, Vec<usize>)> {
    timeline.validate()?;
    if spectra.len() != timeline.segments.len() {
        return Err(Error::Parameter(format!(
            "{} spectra for {} segments",
            spectra.len(),
            timeline.segments.len()
        )));
    }
    let dims = spectra[0].dims;
    if spectra.iter().any(|s| s.dims != dims) {
        return Err(Error::shape("segment spectra differ in shape"));
    }
    let axis = timeline.axis;
    let fractions: Vec<f64> = timeline.segments.iter().map(|s| s.0).collect();
    let owners = plane_owners(dims[axis], &fractions);
    let stride: usize = dims[axis + 1..].iter().product();
    let n = dims[axis];
    let data = (0..spectra[0].data.len())
        .map(|i| spectra[owners[(i / stride) % n]].data[i])
        .collect();
    Ok((ComplexSpectrum { dims, data }, owners))
}

/// Moves the volume through each segment's rigid state, composites the
/// segment spectra plane by plane and returns the magnitude image.
pub fn simulate_motion(volume: &ScalarVolume, timeline: &MotionTimeline) -> Result<ScalarVolume> {
    timeline.validate()?;
    if volume.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("simulate_motion: non-finite input".into()));
    }
    let dims = volume.dims;
    // segments sharing a state share a spectrum
    let mut spectra: Vec<ComplexSpectrum> = Vec::with_capacity(timeline.segments.len());
    for (i, (_, state)) in timeline.segments.iter().enumerate() {
        let earlier = timeline.segments[..i].iter().position(|(_, s)| s == state);
        let spectrum = match earlier {
            Some(j) => spectra[j].clone(),
            None => fft3(&resample_rigid(&volume.data, dims, state), dims),
        };
        spectra.push(spectrum);
    }
    let (composite, _) = composite_spectrum(&spectra, timeline)?;
    Ok(ScalarVolume {
        dims,
        spacing: volume.spacing,
        data: ifft3(&composite).iter().map(|c| c.norm()).collect(),
    })
}
