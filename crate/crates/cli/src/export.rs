//! 8-bit grayscale previews.

use std::fs;
use std::io::Write;

use anyhow::{Context, Result};

use mulog_core::filters::quantile;
use mulog_core::image::{CovarianceImage, Plane};

use crate::{read_container, usage, ExportArgs};

/// Amplitude: `sqrt(I)` for one channel, `sqrt(trace)` otherwise.
fn amplitude(c: &CovarianceImage) -> Plane {
    let p = if c.dim() == 1 {
        c.intensity(0)
    } else {
        c.trace_plane()
    };
    p.map(|v| v.max(0.0).sqrt())
}

/// Saturates at the given quantile, applies `v^(1/gamma)` and quantises.
pub fn to_gray(p: &Plane, saturation: f64, gamma: f64) -> Vec<u8> {
    let top = quantile(p.data(), saturation);
    p.data()
        .iter()
        .map(|&v| {
            let t = if top > 0.0 {
                (v / top).clamp(0.0, 1.0)
            } else {
                0.0
            };
            (255.0 * t.powf(1.0 / gamma)).round() as u8
        })
        .collect()
}

pub fn export(a: &ExportArgs) -> Result<()> {
    if !(a.saturation > 0.0 && a.saturation <= 1.0) {
        return usage(format!(
            "--saturation must be in (0, 1], got {}",
            a.saturation
        ));
    }
    if !(a.gamma > 0.0 && a.gamma.is_finite()) {
        return usage(format!("--gamma must be positive, got {}", a.gamma));
    }
    let c = read_container(&a.input)?;
    let amp = amplitude(&c.image);
    let mut bytes = format!("P5\n{} {}\n255\n", amp.width(), amp.height()).into_bytes();
    bytes.write_all(&to_gray(&amp, a.saturation, a.gamma))?;
    fs::write(&a.out, bytes).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saturation_and_gamma() {
        let p = Plane::new(4, 1, vec![0.0, 0.25, 1.0, 4.0]).unwrap();
        assert_eq!(to_gray(&p, 1.0, 1.0), vec![0, 16, 64, 255]);
        assert_eq!(to_gray(&p, 1.0, 2.0), vec![0, 64, 128, 255]);
        assert_eq!(to_gray(&Plane::filled(2, 1, 0.0), 0.99, 1.0), vec![0, 0]);
    }
}
