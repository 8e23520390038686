//! Pixel storage and PNG I/O.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::mpsc;
use std::sync::Mutex;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::types::ImageEntry;

/// Channels x height x width, values in `[0, 1]`.
pub type Image = Array3<f32>;

pub type ImageStore = BTreeMap<String, Image>;

pub fn decode_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Image::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = f32::from(px[c]) / 255.0;
        }
    }
    Ok(out)
}

/// Quantizes to 8-bit RGB; single-channel images are replicated.
pub fn to_rgb8(img: &Image) -> (u32, u32, Vec<u8>) {
    let (c, h, w) = img.dim();
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = img[[ch.min(c - 1), y, x]];
                data.push(quantize(v));
            }
        }
    }
    (w as u32, h as u32, data)
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an RGB PNG with optional `tEXt` metadata.
pub fn write_png(path: &Path, width: u32, height: u32, rgb: &[u8], text: &[(&str, &str)]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), width, height);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    for (key, value) in text {
        encoder
            .add_text_chunk(key.to_string(), value.to_string())
            .map_err(|e| Error::Image(e.to_string()))?;
    }
    let mut writer = encoder.write_header().map_err(|e| Error::Image(e.to_string()))?;
    writer.write_image_data(rgb).map_err(|e| Error::Image(e.to_string()))?;
    writer.finish().map_err(|e| Error::Image(e.to_string()))
}

pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    let (w, h, data) = to_rgb8(img);
    write_png(path, w, h, &data, &[])
}

/// Decodes every manifest image. Workers pull ids from a shared queue and
/// push results through a bounded channel; with one worker decoding happens
/// in order on a single thread.
pub fn load_images(entries: &BTreeMap<String, ImageEntry>, root: &Path, workers: usize) -> Result<ImageStore> {
    let jobs: Vec<(&String, &ImageEntry)> = entries.iter().collect();
    let check = |id: &str, img: &Image, entry: &ImageEntry| -> Result<()> {
        let (_, h, w) = img.dim();
        if w as f64 != entry.width || h as f64 != entry.height {
            return Err(Error::Data(format!(
                "image `{id}` is {w}x{h} but the manifest says {}x{}",
                entry.width, entry.height
            )));
        }
        Ok(())
    };
    if workers <= 1 {
        let mut store = ImageStore::new();
        for (id, entry) in jobs {
            let img = decode_png(&root.join(&entry.path))?;
            check(id, &img, entry)?;
            store.insert(id.clone(), img);
        }
        return Ok(store);
    }

    let queue = Mutex::new(jobs.into_iter());
    let (tx, rx) = mpsc::sync_channel::<Result<(String, Image)>>(workers * 4);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let queue = &queue;
            scope.spawn(move || loop {
                let next = queue.lock().expect("queue poisoned").next();
                let Some((id, entry)) = next else { break };
                let result = decode_png(&root.join(&entry.path))
                    .and_then(|img| check(id, &img, entry).map(|_| (id.clone(), img)));
                if tx.send(result).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut store = ImageStore::new();
        for item in rx {
            let (id, img) = item?;
            store.insert(id, img);
        }
        Ok(store)
    })
}
