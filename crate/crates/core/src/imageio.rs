//! PNG encoding of image tensors and folder ingestion.

use std::io::Cursor;
use std::path::Path;

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use image::{DynamicImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::generator::ImageTensor;
use crate::nn;

fn to_u8(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round()) as u8
}

fn rgb_image(images: &ImageTensor, index: usize) -> Result<RgbImage> {
    let (n, c, h, w) = images.tensor().dims4()?;
    if c != 3 || index >= n {
        return Err(Error::Shape(format!("cannot take image {index} of {:?}", images.tensor().dims())));
    }
    let v = nn::to_f64_vec(&images.tensor().get(index)?)?;
    let plane = h * w;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb([to_u8(v[p]), to_u8(v[plane + p]), to_u8(v[2 * plane + p])])
    }))
}

/// PNG bytes of image `index` of the batch.
pub fn encode_png(images: &ImageTensor, index: usize) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    rgb_image(images, index)?.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn save_png(path: &Path, images: &ImageTensor, index: usize) -> Result<()> {
    std::fs::write(path, encode_png(images, index)?)?;
    Ok(())
}

/// Centre-crops to a square, resizes to `resolution` and maps to [−1, 1] as a 1×3×R×R batch.
pub fn from_dynamic(img: &DynamicImage, resolution: usize) -> Result<ImageTensor> {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let side = w.min(h);
    let cropped = image::imageops::crop_imm(&rgb, (w - side) / 2, (h - side) / 2, side, side).to_image();
    let r = resolution as u32;
    let sized = if side == r { cropped } else { image::imageops::resize(&cropped, r, r, FilterType::Triangle) };
    let plane = resolution * resolution;
    let mut data = vec![0f32; 3 * plane];
    for (x, y, px) in sized.enumerate_pixels() {
        let p = y as usize * resolution + x as usize;
        for ch in 0..3 {
            data[ch * plane + p] = px[ch] as f32 / 255.0 * 2.0 - 1.0;
        }
    }
    ImageTensor::new(Tensor::from_vec(data, (1, 3, resolution, resolution), &Device::Cpu)?)
}

pub fn decode_png(bytes: &[u8], resolution: usize) -> Result<ImageTensor> {
    from_dynamic(&image::load_from_memory(bytes)?, resolution)
}

pub fn load_image(path: &Path, resolution: usize) -> Result<ImageTensor> {
    from_dynamic(&image::open(path)?, resolution)
}

/// Every readable PNG in `folder` (sorted by name) as one batch; unreadable files are skipped.
pub fn ingest_images(folder: &Path, resolution: usize) -> Result<ImageTensor> {
    let mut paths: Vec<_> = std::fs::read_dir(folder)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    let mut images = Vec::new();
    for p in paths {
        match load_image(&p, resolution) {
            Ok(img) => images.push(img.into_tensor()),
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    if images.is_empty() {
        return Err(Error::Dataset(format!("no readable PNG images in {}", folder.display())));
    }
    ImageTensor::new(Tensor::cat(&images, 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn tensor_png_round_trip_within_quantisation() {
        let mut rng = nn::rng(4);
        let t = nn::randn(&mut rng, &[2, 3, 8, 8], DType::F32, &Device::Cpu).unwrap().clamp(-1f32, 1f32).unwrap();
        let img = ImageTensor::new(t.clone()).unwrap();
        let png = encode_png(&img, 1).unwrap();
        let back = decode_png(&png, 8).unwrap();
        let err = (back.tensor() - t.get(1).unwrap().unsqueeze(0).unwrap()).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(err as f64 <= 1.0 / 255.0 + 1e-6);
        assert_eq!(encode_png(&back, 0).unwrap(), png);
    }

    #[test]
    fn centre_crop_of_wide_image() {
        let wide = RgbImage::from_fn(8, 4, |x, _| if (2..6).contains(&x) { image::Rgb([255, 0, 0]) } else { image::Rgb([0, 0, 255]) });
        let t = from_dynamic(&DynamicImage::ImageRgb8(wide), 4).unwrap();
        let v = nn::to_f64_vec(t.tensor()).unwrap();
        assert!(v[..16].iter().all(|&r| r == 1.0));
        assert!(v[32..].iter().all(|&b| b == -1.0));
    }

    #[test]
    fn ingestion_skips_bad_files_and_rejects_empty_folders() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(ingest_images(dir.path(), 4), Err(Error::Dataset(_))));
        let img = RgbImage::from_pixel(6, 6, image::Rgb([10, 20, 30]));
        img.save(dir.path().join("a.png")).unwrap();
        std::fs::write(dir.path().join("b.png"), b"not a png").unwrap();
        std::fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
        let batch = ingest_images(dir.path(), 4).unwrap();
        assert_eq!(batch.tensor().dims(), &[1, 3, 4, 4]);
    }
}
