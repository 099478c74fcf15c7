use super::{LabelMap, Volume};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Global standardization followed by a unit max-magnitude rescale, so that an
/// attack budget given as a fraction of the maximum voxel magnitude is absolute.
pub fn standardize(volume: &Volume) -> Result<Volume> {
    let t = volume.tensor();
    let n = t.len() as f64;
    let mean = t.sum() / n;
    let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if !(sd > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "cannot standardize constant volume {}",
            volume.subject_id
        )));
    }
    let centred = t.map(|v| (v - mean) / sd);
    let peak = centred.max_abs();
    volume.with_tensor(centred.map(|v| v / peak))
}

/// Trilinear resize of intensities and nearest-neighbour resize of labels to a
/// cubic `target` extent, using align-corners-free (half-pixel) sampling.
pub fn resize(volume: &Volume, labels: &LabelMap, target: usize) -> Result<(Volume, LabelMap)> {
    if target == 0 {
        return Err(Error::InvalidArgument("resize target must be positive".into()));
    }
    let src = volume.spatial();
    if labels.extents() != src {
        return Err(Error::shape(
            "resize",
            format!("volume {src:?} vs labels {:?}", labels.extents()),
        ));
    }
    if src == [target; 3] {
        return Ok((volume.clone(), labels.clone()));
    }
    let channels = volume.channels();
    let t = volume.tensor();
    let n_src: usize = src.iter().product();
    let axes: [Vec<(usize, usize, f64)>; 3] = std::array::from_fn(|a| linear_taps(src[a], target));
    let mut out = Vec::with_capacity(channels * target * target * target);
    for c in 0..channels {
        let ch = &t.data()[c * n_src..(c + 1) * n_src];
        for &(z0, z1, fz) in &axes[0] {
            for &(y0, y1, fy) in &axes[1] {
                for &(x0, x1, fx) in &axes[2] {
                    let at = |z: usize, y: usize, x: usize| ch[(z * src[1] + y) * src[2] + x];
                    let lerp = |a: f64, b: f64, f: f64| a + (b - a) * f;
                    let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), fx);
                    let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), fx);
                    let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), fx);
                    let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), fx);
                    out.push(lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fz));
                }
            }
        }
    }
    let resized = volume.with_tensor(Tensor::new(vec![channels, target, target, target], out)?)?;

    let nearest: [Vec<usize>; 3] = std::array::from_fn(|a| {
        (0..target)
            .map(|i| {
                let pos = (i as f64 + 0.5) * src[a] as f64 / target as f64;
                (pos.floor() as usize).min(src[a] - 1)
            })
            .collect()
    });
    let codes = labels.codes();
    let mut out_codes = Vec::with_capacity(target * target * target);
    for &z in &nearest[0] {
        for &y in &nearest[1] {
            for &x in &nearest[2] {
                out_codes.push(codes[(z * src[1] + y) * src[2] + x]);
            }
        }
    }
    Ok((resized, LabelMap::new([target; 3], out_codes)?))
}

/// Source indices and interpolation weight for each output sample.
fn linear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}
