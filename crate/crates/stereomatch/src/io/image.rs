//! 8-bit image input (PNG/PPM) and visualization output.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Load an 8-bit PNG or PPM image as a `[3, H, W]` tensor in `[0, 1]`.
/// Greyscale inputs are replicated across the three channels.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        offset: 0,
        msg: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[c * h * w + y * w + x] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(data, &[3, h, w])
}

/// Save a `[3, H, W]` tensor in `[0, 1]` as PNG.
pub fn save_image(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let [c, h, w] = *img.shape() else {
        return Err(Error::contract(
            "save_image",
            format!("expected [3, H, W], got {:?}", img.shape()),
        ));
    };
    if c != 3 {
        return Err(Error::contract("save_image", "expected 3 channels"));
    }
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let (x, y) = (x as usize, y as usize);
        for ch in 0..3 {
            px.0[ch] = (img.data()[ch * h * w + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    out.save(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

/// Polynomial approximation of the perceptually uniform "turbo" colormap;
/// input in `[0, 1]`, output RGB in `[0, 1]`.
fn turbo(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = [0.13572138, 4.61539260, -42.66032258, 132.13108234, -152.94239396, 59.28637943];
    let g = [0.09140261, 2.19418839, 4.84296658, -14.18503333, 4.27729857, 2.82956604];
    let b = [0.10667330, 12.64194608, -60.58204836, 110.36276771, -89.90310912, 27.34824973];
    let poly = |c: &[f64; 6]| {
        c[0] + t * (c[1] + t * (c[2] + t * (c[3] + t * (c[4] + t * c[5]))))
    };
    [
        poly(&r).clamp(0.0, 1.0),
        poly(&g).clamp(0.0, 1.0),
        poly(&b).clamp(0.0, 1.0),
    ]
}

/// Write a disparity field as a colormapped PNG plus a sidecar text file
/// recording the value range used for normalization.
pub fn save_disparity_png(path: &Path, field: &Tensor<f32>) -> Result<()> {
    let (h, w) = match *field.shape() {
        [h, w] => (h, w),
        [1, h, w] => (h, w),
        _ => {
            return Err(Error::contract(
                "save_disparity_png",
                format!("expected [H, W] field, got {:?}", field.shape()),
            ))
        }
    };
    let finite: Vec<f32> = field.iter().copied().filter(|v| v.is_finite()).collect();
    let (lo, hi) = finite
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(*v), hi.max(*v))
        });
    let range = if hi > lo { (hi - lo) as f64 } else { 1.0 };
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let v = field.data()[y as usize * w + x as usize];
        let rgb = if v.is_finite() {
            turbo(((v - lo) as f64) / range)
        } else {
            [0.0, 0.0, 0.0]
        };
        for c in 0..3 {
            px.0[c] = (rgb[c] * 255.0).round() as u8;
        }
    }
    out.save(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let sidecar = path.with_extension("range.txt");
    std::fs::write(&sidecar, format!("min {lo}\nmax {hi}\n"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_preserves_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let data: Vec<f32> = (0..3 * 4 * 5).map(|i| (i % 256) as f32 / 255.0).collect();
        let img = Tensor::from_vec(data, &[3, 4, 5]).unwrap();
        save_image(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.shape(), &[3, 4, 5]);
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() < 0.5 / 255.0);
        }
    }

    #[test]
    fn ppm_input_is_supported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        // Minimal binary P6 file, 2x1, values 10,20,30 / 200,100,50.
        let mut bytes = b"P6\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[10, 20, 30, 200, 100, 50]);
        std::fs::write(&path, &bytes).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.shape(), &[3, 1, 2]);
        assert!((img.data()[0] - 10.0 / 255.0).abs() < 1e-6);
        assert!((img.data()[1] - 200.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn colormap_output_writes_sidecar_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("disp.png");
        let field = Tensor::from_vec(vec![0.0f32, 5.0, 10.0, 2.5], &[2, 2]).unwrap();
        save_disparity_png(&path, &field).unwrap();
        assert!(path.exists());
        let sidecar = std::fs::read_to_string(dir.path().join("disp.range.txt")).unwrap();
        assert!(sidecar.contains("min 0"));
        assert!(sidecar.contains("max 10"));
    }

    #[test]
    fn missing_file_is_an_error() {
        assert!(load_image(Path::new("/nonexistent/nope.png")).is_err());
    }
}
