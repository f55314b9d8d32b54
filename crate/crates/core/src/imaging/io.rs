use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};

use super::{Image, Shape};
use crate::ednz;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

/// Loads PNG (8/16-bit), PGM/PPM, or a raw `.ednz` tensor. Integer samples are
/// mapped to [0, 1]; alpha is dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    if extension(path) == "ednz" {
        let frame = ednz::read_frame(&mut BufReader::new(file))?;
        return frame.to_image();
    }
    let format = match extension(path).as_str() {
        "png" => ImageFormat::Png,
        "pgm" | "ppm" | "pnm" | "pbm" => ImageFormat::Pnm,
        other => return Err(Error::UnsupportedFormat(format!("extension {other:?}"))),
    };
    let decoded = image::load(BufReader::new(file), format)?;
    from_dynamic(decoded)
}

fn from_dynamic(img: DynamicImage) -> Result<Image> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, data): (usize, Vec<f64>) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect()),
        DynamicImage::ImageLuma16(b) => (1, b.into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect()),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect()),
        DynamicImage::ImageRgb16(b) => (3, b.into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect()),
        DynamicImage::ImageLumaA8(_) => {
            return from_dynamic(DynamicImage::ImageLuma8(img.to_luma8()));
        }
        DynamicImage::ImageLumaA16(_) => {
            return from_dynamic(DynamicImage::ImageLuma16(img.to_luma16()));
        }
        DynamicImage::ImageRgba8(_) => {
            return from_dynamic(DynamicImage::ImageRgb8(img.to_rgb8()));
        }
        DynamicImage::ImageRgba16(_) => {
            return from_dynamic(DynamicImage::ImageRgb16(img.to_rgb16()));
        }
        other => {
            if other.color().has_color() {
                return from_dynamic(DynamicImage::ImageRgb16(other.to_rgb16()));
            }
            return from_dynamic(DynamicImage::ImageLuma16(other.to_luma16()));
        }
    };
    Image::from_shape(Shape::new(h, w, channels), data)
}

/// Saves to PNG or PGM/PPM (chosen by extension) after clamping to [0, 1],
/// or to `.ednz` without clamping or quantization beyond f32.
pub fn save_image(image: &Image, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let ext = extension(path);
    if ext == "ednz" {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        return ednz::write_frame(&mut BufWriter::new(file), &ednz::Frame::from_image(image, 0.0));
    }
    let format = match ext.as_str() {
        "png" => ImageFormat::Png,
        "pgm" | "ppm" | "pnm" => ImageFormat::Pnm,
        other => return Err(Error::UnsupportedFormat(format!("extension {other:?}"))),
    };
    let (w, h) = (image.width() as u32, image.height() as u32);
    let dynamic = match (depth, image.channels()) {
        (BitDepth::Eight, 1) => DynamicImage::ImageLuma8(
            ImageBuffer::<Luma<u8>, _>::from_raw(w, h, quantize::<u8>(image, 255.0)).expect("buffer size"),
        ),
        (BitDepth::Eight, _) => DynamicImage::ImageRgb8(
            ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, quantize::<u8>(image, 255.0)).expect("buffer size"),
        ),
        (BitDepth::Sixteen, 1) => DynamicImage::ImageLuma16(
            ImageBuffer::<Luma<u16>, _>::from_raw(w, h, quantize::<u16>(image, 65535.0)).expect("buffer size"),
        ),
        (BitDepth::Sixteen, _) => DynamicImage::ImageRgb16(
            ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, quantize::<u16>(image, 65535.0)).expect("buffer size"),
        ),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    dynamic.write_to(&mut BufWriter::new(file), format)?;
    Ok(())
}

fn quantize<T: TryFrom<u32>>(image: &Image, max: f64) -> Vec<T>
where
    <T as TryFrom<u32>>::Error: std::fmt::Debug,
{
    image
        .data()
        .iter()
        .map(|&v| T::try_from((v.clamp(0.0, 1.0) * max).round() as u32).expect("quantized in range"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(shape, |_, _, _| rng.random::<f64>()).unwrap()
    }

    #[test]
    fn eight_bit_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for (shape, name) in [
            (Shape::new(8, 8, 1), "a.png"),
            (Shape::new(8, 8, 3), "b.png"),
            (Shape::new(8, 8, 1), "c.pgm"),
            (Shape::new(8, 8, 3), "d.ppm"),
        ] {
            let img = random(shape, 1);
            let p = dir.path().join(name);
            save_image(&img, &p, BitDepth::Eight).unwrap();
            let back = load_image(&p).unwrap();
            assert_eq!(back.shape(), shape);
            assert!(back.max_abs_diff(&img) <= 1.0 / 510.0 + 1e-15, "{name}");
        }
    }

    #[test]
    fn sixteen_bit_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for (shape, name) in [(Shape::new(8, 8, 1), "a.png"), (Shape::new(8, 8, 3), "b.png")] {
            let img = random(shape, 2);
            let p = dir.path().join(name);
            save_image(&img, &p, BitDepth::Sixteen).unwrap();
            let back = load_image(&p).unwrap();
            assert!(back.max_abs_diff(&img) <= 1.0 / 131070.0 + 1e-15, "{name}");
        }
    }

    #[test]
    fn ednz_round_trip_keeps_out_of_range_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = random(Shape::new(5, 7, 1), 3).map(|v| 3.0 * v - 1.0);
        let p = dir.path().join("obs.ednz");
        save_image(&img, &p, BitDepth::Sixteen).unwrap();
        let back = load_image(&p).unwrap();
        assert!(back.max_abs_diff(&img) < 1e-6);
    }

    #[test]
    fn load_errors() {
        assert!(matches!(
            load_image("/nonexistent/definitely/missing.png"),
            Err(Error::Io { .. })
        ));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.tiff");
        std::fs::write(&p, b"junk").unwrap();
        assert!(matches!(load_image(&p), Err(Error::UnsupportedFormat(_))));
        let p = dir.path().join("corrupt.png");
        std::fs::write(&p, b"\x89PNG\r\n\x1a\nnot really").unwrap();
        assert!(load_image(&p).is_err());
    }
}
