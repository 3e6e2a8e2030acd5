//! Dataset file formats.
//!
//! * IDX: a directory holding `images.idx` and `labels.idx`. Headers are two
//!   zero bytes, the type byte `0x08` (unsigned byte), the rank, then
//!   big-endian `u32` dimensions. Images have rank 3 (`n, H, W`, one channel)
//!   or rank 4 (`n, C, H, W`); labels have rank 1.
//! * image-dir: one sub-directory per class (sorted by name), PNG files inside.
//! * CSV: one row per sample, `label,p0,p1,...` with byte-valued pixels in
//!   `C, H, W` order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "kebab-case")]
pub enum DataFormat {
    Idx,
    ImageDir,
    Csv { shape: [usize; 3] },
}

const IDX_UBYTE: u8 = 0x08;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a dataset and attaches its own per-channel statistics.
///
/// `num_classes` defaults to `max(label) + 1`.
pub fn load_dataset(path: &Path, format: DataFormat, num_classes: Option<usize>) -> Result<Dataset> {
    let (images, labels, shape) = match format {
        DataFormat::Idx => load_idx(path)?,
        DataFormat::ImageDir => load_image_dir(path)?,
        DataFormat::Csv { shape } => load_csv(path, shape)?,
    };
    let inferred = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let k = num_classes.unwrap_or(inferred);
    let ds = Dataset::new(images, labels, shape, k)?;
    let stats = ds.compute_stats();
    Ok(ds.with_stats(stats))
}

fn parse_idx_header(bytes: &[u8], what: &str) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Data(format!("{what}: bad IDX magic")));
    }
    if bytes[2] != IDX_UBYTE {
        return Err(Error::Data(format!("{what}: unsupported IDX element type {:#04x}", bytes[2])));
    }
    let rank = bytes[3] as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Data(format!("{what}: truncated IDX header")));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(Error::Data(format!("{what}: expected {expected} bytes, found {}", bytes.len())));
    }
    Ok((dims, header))
}

fn load_idx(dir: &Path) -> Result<(Vec<f32>, Vec<usize>, [usize; 3])> {
    let img = read(&dir.join("images.idx"))?;
    let lab = read(&dir.join("labels.idx"))?;
    let (dims, off) = parse_idx_header(&img, "images")?;
    let shape = match dims.as_slice() {
        [_, h, w] => [1, *h, *w],
        [_, c, h, w] => [*c, *h, *w],
        _ => return Err(Error::Data(format!("images: unsupported IDX rank {}", dims.len()))),
    };
    let (ldims, loff) = parse_idx_header(&lab, "labels")?;
    if ldims.len() != 1 {
        return Err(Error::Data("labels: IDX rank must be 1".into()));
    }
    if ldims[0] != dims[0] {
        return Err(Error::Data(format!("{} images but {} labels", dims[0], ldims[0])));
    }
    let images = img[off..].iter().map(|&b| b as f32 / 255.0).collect();
    let labels = lab[loff..].iter().map(|&b| b as usize).collect();
    Ok((images, labels, shape))
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `images.idx` (rank 4) and `labels.idx` into `dir`.
pub fn save_idx(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if ds.num_classes() > 256 {
        return Err(Error::Data("IDX labels are bytes; at most 256 classes".into()));
    }
    let [c, h, w] = ds.shape();
    let mut img = vec![0, 0, IDX_UBYTE, 4];
    for d in [ds.len(), c, h, w] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend(ds.images().iter().map(|&v| to_byte(v)));
    let mut lab = vec![0, 0, IDX_UBYTE, 1];
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend(ds.labels().iter().map(|&l| l as u8));
    write(&dir.join("images.idx"), &img)?;
    write(&dir.join("labels.idx"), &lab)
}

fn load_csv(path: &Path, shape: [usize; 3]) -> Result<(Vec<f32>, Vec<usize>, [usize; 3])> {
    let text = String::from_utf8(read(path)?).map_err(|_| Error::Data("CSV is not UTF-8".into()))?;
    let per: usize = shape.iter().product();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (line_no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != per + 1 {
            return Err(Error::Data(format!(
                "line {}: expected {} fields, found {}",
                line_no + 1,
                per + 1,
                fields.len()
            )));
        }
        let label = fields[0]
            .parse::<usize>()
            .map_err(|_| Error::Data(format!("line {}: bad label {:?}", line_no + 1, fields[0])))?;
        labels.push(label);
        for f in &fields[1..] {
            let b = f
                .parse::<u8>()
                .map_err(|_| Error::Data(format!("line {}: bad pixel {f:?}", line_no + 1)))?;
            images.push(b as f32 / 255.0);
        }
    }
    Ok((images, labels, shape))
}

pub fn save_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let mut out = String::new();
    for i in 0..ds.len() {
        out.push_str(&ds.labels()[i].to_string());
        for &v in ds.image(i) {
            out.push(',');
            out.push_str(&to_byte(v).to_string());
        }
        out.push('\n');
    }
    write(path, out.as_bytes())
}

fn load_image_dir(dir: &Path) -> Result<(Vec<f32>, Vec<usize>, [usize; 3])> {
    let mut classes: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::Data(format!("no class folders under {}", dir.display())));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut shape: Option<[usize; 3]> = None;
    for (label, class_dir) in classes.iter().enumerate() {
        let mut files: Vec<_> = fs::read_dir(class_dir)
            .map_err(|e| Error::io(class_dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        for file in files {
            let img = image::open(&file)
                .map_err(|e| Error::Data(format!("{}: {e}", file.display())))?
                .to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let this = [3, h, w];
            if *shape.get_or_insert(this) != this {
                return Err(Error::Data(format!("{}: size {w}x{h} differs from the first image", file.display())));
            }
            for ch in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        images.push(img.get_pixel(x as u32, y as u32)[ch] as f32 / 255.0);
                    }
                }
            }
            labels.push(label);
        }
    }
    let shape = shape.ok_or_else(|| Error::Data("no PNG images found".into()))?;
    Ok((images, labels, shape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_domain, GeneratorKind, SyntheticDomainSpec};

    #[test]
    fn idx_grayscale_magic_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = vec![0, 0, 8, 3];
        for d in [2u32, 2, 2] {
            img.extend_from_slice(&d.to_be_bytes());
        }
        img.extend_from_slice(&[0, 255, 128, 64, 1, 2, 3, 4]);
        let mut lab = vec![0, 0, 8, 1];
        lab.extend_from_slice(&2u32.to_be_bytes());
        lab.extend_from_slice(&[1, 0]);
        assert_eq!(u32::from_be_bytes(img[..4].try_into().unwrap()), 0x0000_0803);
        assert_eq!(u32::from_be_bytes(lab[..4].try_into().unwrap()), 0x0000_0801);
        fs::write(dir.path().join("images.idx"), &img).unwrap();
        fs::write(dir.path().join("labels.idx"), &lab).unwrap();
        let ds = load_dataset(dir.path(), DataFormat::Idx, None).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.shape(), [1, 2, 2]);
        assert_eq!(ds.labels(), &[1, 0]);
        assert_eq!(ds.image(0)[1], 1.0);
    }

    #[test]
    fn idx_count_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = vec![0, 0, 8, 3];
        for d in [2u32, 1, 1] {
            img.extend_from_slice(&d.to_be_bytes());
        }
        img.extend_from_slice(&[0, 1]);
        let mut lab = vec![0, 0, 8, 1];
        lab.extend_from_slice(&3u32.to_be_bytes());
        lab.extend_from_slice(&[0, 1, 0]);
        fs::write(dir.path().join("images.idx"), &img).unwrap();
        fs::write(dir.path().join("labels.idx"), &lab).unwrap();
        let err = load_dataset(dir.path(), DataFormat::Idx, None).unwrap_err();
        assert!(err.to_string().contains("2 images but 3 labels"), "{err}");
        fs::write(dir.path().join("images.idx"), [1, 2, 3]).unwrap();
        assert!(load_dataset(dir.path(), DataFormat::Idx, None).is_err());
    }

    #[test]
    fn generated_data_round_trips_through_idx_and_csv() {
        let spec = SyntheticDomainSpec::new(GeneratorKind::TexturedShapes, 3, 4, 1);
        let (train, _) = generate_domain(&spec, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_idx(dir.path(), &train).unwrap();
        let back = load_dataset(dir.path(), DataFormat::Idx, Some(3)).unwrap();
        assert_eq!(back.images(), train.images());
        assert_eq!(back.labels(), train.labels());

        let csv = dir.path().join("d.csv");
        save_csv(&csv, &train).unwrap();
        let back = load_dataset(&csv, DataFormat::Csv { shape: [3, 16, 16] }, Some(3)).unwrap();
        assert_eq!(back.images(), train.images());
    }

    #[test]
    fn label_out_of_range_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("d.csv");
        fs::write(&csv, "0,1,2\n5,3,4\n").unwrap();
        assert!(load_dataset(&csv, DataFormat::Csv { shape: [1, 1, 2] }, Some(3)).is_err());
        assert_eq!(load_dataset(&csv, DataFormat::Csv { shape: [1, 1, 2] }, None).unwrap().num_classes(), 6);
        fs::write(&csv, "0,1\n").unwrap();
        assert!(load_dataset(&csv, DataFormat::Csv { shape: [1, 1, 2] }, None).is_err());
    }

    #[test]
    fn image_dir_layout() {
        let dir = tempfile::tempdir().unwrap();
        for (class, value) in [("a", 10u8), ("b", 200u8)] {
            let sub = dir.path().join(class);
            fs::create_dir(&sub).unwrap();
            let img = image::RgbImage::from_pixel(4, 3, image::Rgb([value, 0, 255]));
            img.save(sub.join("0.png")).unwrap();
        }
        let ds = load_dataset(dir.path(), DataFormat::ImageDir, None).unwrap();
        assert_eq!(ds.shape(), [3, 3, 4]);
        assert_eq!(ds.labels(), &[0, 1]);
        assert_eq!(ds.image(1)[0], 200.0 / 255.0);
        assert_eq!(ds.image(1)[12], 0.0);
    }
}
