//! Dataset ingestion and the built-in synthetic shapes dataset.
//!
//! Real datasets are read from their standard public layouts under a
//! caller-supplied root; nothing is ever downloaded. The shapes dataset is
//! the desk-scale default: seeded, balanced, and separable both by silhouette
//! and by a plain pixel-count heuristic.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Images in `[0, 1]`, channel-first, all the same shape; labels optional.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub images: Vec<Tensor>,
    pub labels: Option<Vec<usize>>,
    pub num_classes: Option<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        self.images[0].shape()
    }

    fn validate(&self) -> Result<()> {
        if self.images.is_empty() {
            return Err(Error::contract("dataset must hold at least one image"));
        }
        let shape = self.images[0].shape().to_vec();
        for img in &self.images {
            if img.shape() != shape {
                return Err(Error::contract("all images must share one shape"));
            }
            if img.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::contract("pixel values must lie in [0, 1]"));
            }
        }
        if let (Some(labels), Some(nc)) = (&self.labels, self.num_classes) {
            if labels.len() != self.images.len() {
                return Err(Error::contract("labels must align with images"));
            }
            if labels.iter().any(|&l| l >= nc) {
                return Err(Error::contract("label out of range"));
            }
        }
        Ok(())
    }
}

// ---- synthetic shapes --------------------------------------------------------

/// Shape classes, sized so that lit-pixel counts form distinct bands: a small
/// disk, a thin cross, and a large filled rectangle.
const SHAPE_NAMES: [&str; 5] = ["disk", "cross", "rect", "ring", "bar"];

/// Grayscale images of one randomly placed, anti-aliased shape per image.
/// Balanced by construction (`label = index mod num_classes`), deterministic
/// under the seed.
pub fn synth_shapes(n: usize, h: usize, w: usize, num_classes: usize, seed: u64) -> Result<Dataset> {
    if h < 8 || w < 8 {
        return Err(Error::usage("shapes need H, W >= 8"));
    }
    if !(2..=5).contains(&num_classes) {
        return Err(Error::usage("num_classes must lie in 2..=5"));
    }
    if n == 0 {
        return Err(Error::usage("need n >= 1 images"));
    }
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % num_classes;
        let mut rng = rng_from(seed, &[0x5348, i as u64]);
        images.push(render_shape(class, h, w, &mut rng));
        labels.push(class);
    }
    let ds = Dataset {
        name: format!("shapes{h}x{w}"),
        split: Split::Train,
        images,
        labels: Some(labels),
        num_classes: Some(num_classes),
    };
    ds.validate()?;
    Ok(ds)
}

/// Signed distance-ish coverage of one shape at subpixel resolution.
fn render_shape(class: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let hf = h as f64;
    let wf = w as f64;
    // Keep the shape inside the frame with a margin.
    let cx = wf * (0.35 + 0.3 * rng.random::<f64>());
    let cy = hf * (0.35 + 0.3 * rng.random::<f64>());
    let unit = hf.min(wf) / 16.0;
    let intensity = 0.55 + 0.45 * rng.random::<f64>();
    let s1 = rng.random::<f64>();
    let s2 = rng.random::<f64>();

    let inside: Box<dyn Fn(f64, f64) -> bool> = match SHAPE_NAMES[class] {
        "disk" => {
            let r = unit * (2.2 + 0.8 * s1);
            Box::new(move |x, y| {
                let (dx, dy) = (x - cx, y - cy);
                dx * dx + dy * dy <= r * r
            })
        }
        "cross" => {
            let half_len = unit * (4.5 + 1.5 * s1);
            let half_thick = unit * 1.0;
            Box::new(move |x, y| {
                let (dx, dy) = ((x - cx).abs(), (y - cy).abs());
                (dx <= half_len && dy <= half_thick) || (dy <= half_len && dx <= half_thick)
            })
        }
        "rect" => {
            let half_w = unit * (3.5 + 1.5 * s1);
            let half_h = unit * (3.5 + 1.5 * s2);
            Box::new(move |x, y| (x - cx).abs() <= half_w && (y - cy).abs() <= half_h)
        }
        "ring" => {
            let r_out = unit * (3.5 + 1.0 * s1);
            let r_in = r_out - unit * 1.4;
            Box::new(move |x, y| {
                let (dx, dy) = (x - cx, y - cy);
                let d2 = dx * dx + dy * dy;
                d2 <= r_out * r_out && d2 >= r_in * r_in
            })
        }
        _ => {
            // "bar": a long thin diagonal-free bar, horizontal or vertical.
            let half_len = unit * (5.5 + 1.5 * s1);
            let half_thick = unit * 0.9;
            let horizontal = s2 < 0.5;
            Box::new(move |x, y| {
                let (dx, dy) = ((x - cx).abs(), (y - cy).abs());
                if horizontal {
                    dx <= half_len && dy <= half_thick
                } else {
                    dy <= half_len && dx <= half_thick
                }
            })
        }
    };

    // 3x3 supersampling for soft edges.
    let mut img = Tensor::zeros(&[1, h, w]);
    for py in 0..h {
        for px in 0..w {
            let mut cover = 0.0;
            for sy in 0..3 {
                for sx in 0..3 {
                    let x = px as f64 + (sx as f64 + 0.5) / 3.0;
                    let y = py as f64 + (sy as f64 + 0.5) / 3.0;
                    if inside(x, y) {
                        cover += 1.0;
                    }
                }
            }
            img.data_mut()[py * w + px] = intensity * cover / 9.0;
        }
    }
    img
}

// ---- batch iteration ---------------------------------------------------------

/// Index batches covering every element exactly once; order is a pure
/// function of the seed. The last partial batch is kept.
pub fn batch_iter(ds: &Dataset, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size < 1 {
        return Err(Error::usage("batch_size must be >= 1"));
    }
    if batch_size > ds.len() {
        return Err(Error::usage(format!(
            "batch_size {batch_size} exceeds dataset size {}",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if shuffle {
        let mut rng = rng_from(seed, &[0x42415443]);
        // Fisher-Yates.
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
    }
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

// ---- real datasets -----------------------------------------------------------

/// Loads one of the supported public datasets from `root`.
///
/// Supported names: `shapes` (generated, no files), `fashion_mnist`
/// (IDX files, plain or gzipped), `cifar10` (binary batches), `celeba`
/// (aligned JPEGs + attribute list; center-cropped and resized to 64x64).
pub fn load_dataset(name: &str, root: &Path, split: Split) -> Result<Dataset> {
    match name {
        "fashion_mnist" => load_fashion_mnist(root, split),
        "cifar10" => load_cifar10(root, split),
        "celeba" => load_celeba(root, split),
        other => Err(Error::usage(format!(
            "unknown dataset `{other}` (expected fashion_mnist|cifar10|celeba|shapes)"
        ))),
    }
}

fn ingest_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Ingestion { path: path.display().to_string(), reason: reason.into() }
}

/// Reads a file that may be stored gzipped (`<name>.gz`) or plain.
fn read_maybe_gz(base: &Path) -> Result<Vec<u8>> {
    let gz = PathBuf::from(format!("{}.gz", base.display()));
    let (path, gzipped) =
        if gz.exists() { (gz, true) } else { (base.to_path_buf(), false) };
    let mut file = File::open(&path).map_err(|e| ingest_err(&path, e.to_string()))?;
    let mut raw = Vec::new();
    if gzipped {
        GzDecoder::new(file)
            .read_to_end(&mut raw)
            .map_err(|e| ingest_err(&path, format!("gzip decode failed: {e}")))?;
    } else {
        file.read_to_end(&mut raw).map_err(|e| ingest_err(&path, e.to_string()))?;
    }
    Ok(raw)
}

fn parse_idx_images(raw: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    if raw.len() < 16 {
        return Err(ingest_err(path, "truncated IDX header"));
    }
    let magic = u32::from_be_bytes([raw[0], raw[1], raw[2], raw[3]]);
    if magic != 0x0000_0803 {
        return Err(ingest_err(path, format!("bad IDX image magic {magic:#x}")));
    }
    let n = u32::from_be_bytes([raw[4], raw[5], raw[6], raw[7]]) as usize;
    let h = u32::from_be_bytes([raw[8], raw[9], raw[10], raw[11]]) as usize;
    let w = u32::from_be_bytes([raw[12], raw[13], raw[14], raw[15]]) as usize;
    if raw.len() != 16 + n * h * w {
        return Err(ingest_err(path, "IDX image payload size mismatch"));
    }
    Ok((n, h, w, raw[16..].to_vec()))
}

fn parse_idx_labels(raw: &[u8], path: &Path) -> Result<Vec<u8>> {
    if raw.len() < 8 {
        return Err(ingest_err(path, "truncated IDX header"));
    }
    let magic = u32::from_be_bytes([raw[0], raw[1], raw[2], raw[3]]);
    if magic != 0x0000_0801 {
        return Err(ingest_err(path, format!("bad IDX label magic {magic:#x}")));
    }
    let n = u32::from_be_bytes([raw[4], raw[5], raw[6], raw[7]]) as usize;
    if raw.len() != 8 + n {
        return Err(ingest_err(path, "IDX label payload size mismatch"));
    }
    Ok(raw[8..].to_vec())
}

fn load_fashion_mnist(root: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let img_path = root.join(format!("{prefix}-images-idx3-ubyte"));
    let lbl_path = root.join(format!("{prefix}-labels-idx1-ubyte"));
    let (n, h, w, pixels) = parse_idx_images(&read_maybe_gz(&img_path)?, &img_path)?;
    let labels_u8 = parse_idx_labels(&read_maybe_gz(&lbl_path)?, &lbl_path)?;
    if labels_u8.len() != n {
        return Err(ingest_err(&lbl_path, "label count does not match image count"));
    }
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let data: Vec<f64> =
            pixels[i * h * w..(i + 1) * h * w].iter().map(|&b| b as f64 / 255.0).collect();
        images.push(Tensor::from_vec(&[1, h, w], data)?);
    }
    let ds = Dataset {
        name: "fashion_mnist".into(),
        split,
        images,
        labels: Some(labels_u8.iter().map(|&b| b as usize).collect()),
        num_classes: Some(10),
    };
    ds.validate()?;
    Ok(ds)
}

fn load_cifar10(root: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<PathBuf> = match split {
        Split::Train => (1..=5).map(|i| root.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![root.join("test_batch.bin")],
    };
    const REC: usize = 1 + 3 * 32 * 32;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in files {
        let mut raw = Vec::new();
        File::open(&path)
            .map_err(|e| ingest_err(&path, e.to_string()))?
            .read_to_end(&mut raw)
            .map_err(|e| ingest_err(&path, e.to_string()))?;
        if raw.len() % REC != 0 {
            return Err(ingest_err(&path, "batch size is not a multiple of the record size"));
        }
        for rec in raw.chunks(REC) {
            labels.push(rec[0] as usize);
            let data: Vec<f64> = rec[1..].iter().map(|&b| b as f64 / 255.0).collect();
            images.push(Tensor::from_vec(&[3, 32, 32], data)?);
        }
    }
    let ds = Dataset {
        name: "cifar10".into(),
        split,
        images,
        labels: Some(labels),
        num_classes: Some(10),
    };
    ds.validate()?;
    Ok(ds)
}

/// The attribute columns probed downstream: Chubby (13), Male (20),
/// Oval_Face (25), as zero-based indices into the 40-attribute list.
pub const CELEBA_ATTR_COLUMNS: [usize; 3] = [13, 20, 25];
const CELEBA_SIZE: usize = 64;

fn load_celeba(root: &Path, split: Split) -> Result<Dataset> {
    let attr_path = root.join("list_attr_celeba.txt");
    let part_path = root.join("list_eval_partition.txt");
    let img_dir = root.join("img_align_celeba");

    let attrs = std::fs::read_to_string(&attr_path)
        .map_err(|e| ingest_err(&attr_path, e.to_string()))?;
    let partition = std::fs::read_to_string(&part_path)
        .map_err(|e| ingest_err(&part_path, e.to_string()))?;
    let wanted = match split {
        Split::Train => "0",
        Split::Test => "2",
    };
    let mut split_of = std::collections::HashMap::new();
    for line in partition.lines() {
        let mut it = line.split_whitespace();
        if let (Some(name), Some(part)) = (it.next(), it.next()) {
            split_of.insert(name.to_string(), part.to_string());
        }
    }

    let mut images = Vec::new();
    let mut labels = Vec::new();
    for line in attrs.lines().skip(2) {
        let mut it = line.split_whitespace();
        let Some(name) = it.next() else { continue };
        if split_of.get(name).map(String::as_str) != Some(wanted) {
            continue;
        }
        let cols: Vec<&str> = it.collect();
        if cols.len() != 40 {
            return Err(ingest_err(&attr_path, format!("bad attribute row for {name}")));
        }
        // Pack the three probed attributes into one label in [0, 8).
        let mut label = 0usize;
        for (bit, &col) in CELEBA_ATTR_COLUMNS.iter().enumerate() {
            if cols[col] == "1" {
                label |= 1 << bit;
            }
        }
        let path = img_dir.join(name);
        let img = image::open(&path).map_err(|e| ingest_err(&path, e.to_string()))?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let side = w.min(h);
        let (x0, y0) = ((w - side) / 2, (h - side) / 2);
        let cropped = image::imageops::crop_imm(&img, x0 as u32, y0 as u32, side as u32, side as u32)
            .to_image();
        let resized = image::imageops::resize(
            &cropped,
            CELEBA_SIZE as u32,
            CELEBA_SIZE as u32,
            image::imageops::FilterType::Triangle,
        );
        let mut data = vec![0.0; 3 * CELEBA_SIZE * CELEBA_SIZE];
        for y in 0..CELEBA_SIZE {
            for x in 0..CELEBA_SIZE {
                let px = resized.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    data[(c * CELEBA_SIZE + y) * CELEBA_SIZE + x] = px[c] as f64 / 255.0;
                }
            }
        }
        images.push(Tensor::from_vec(&[3, CELEBA_SIZE, CELEBA_SIZE], data)?);
        labels.push(label);
    }
    if images.is_empty() {
        return Err(ingest_err(&img_dir, "no images matched the requested split"));
    }
    let ds = Dataset {
        name: "celeba".into(),
        split,
        images,
        labels: Some(labels),
        num_classes: Some(8),
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn shapes_balanced_and_deterministic() {
        let ds = synth_shapes(999, 16, 16, 3, 7).unwrap();
        assert_eq!(ds.len(), 999);
        let labels = ds.labels.as_ref().unwrap();
        for c in 0..3 {
            let count = labels.iter().filter(|&&l| l == c).count();
            assert!((count as f64 - 333.0).abs() <= 999.0 * 0.05);
        }
        let ds2 = synth_shapes(999, 16, 16, 3, 7).unwrap();
        assert_eq!(ds.images[17], ds2.images[17]);
        assert!(synth_shapes(10, 4, 16, 3, 0).is_err());
        assert!(synth_shapes(10, 16, 16, 7, 0).is_err());
    }

    #[test]
    fn shapes_lit_area_separates_classes() {
        // Heuristic oracle: classify by lit-pixel count with data-driven
        // thresholds; well above chance proves the classes are separable.
        let ds = synth_shapes(600, 16, 16, 3, 11).unwrap();
        let labels = ds.labels.as_ref().unwrap();
        let area = |img: &Tensor| img.iter().filter(|&&v| v > 0.25).count() as f64;

        let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); 3];
        for (img, &l) in ds.images.iter().take(300).zip(labels.iter()) {
            per_class[l].push(area(img));
        }
        let mut means: Vec<(usize, f64)> = per_class
            .iter()
            .enumerate()
            .map(|(c, v)| (c, v.iter().sum::<f64>() / v.len() as f64))
            .collect();
        means.sort_by(|a, b| a.1.total_cmp(&b.1));
        let t01 = (means[0].1 + means[1].1) / 2.0;
        let t12 = (means[1].1 + means[2].1) / 2.0;

        let mut correct = 0;
        for (img, &l) in ds.images.iter().skip(300).zip(labels.iter().skip(300)) {
            let a = area(img);
            let pred = if a < t01 {
                means[0].0
            } else if a < t12 {
                means[1].0
            } else {
                means[2].0
            };
            if pred == l {
                correct += 1;
            }
        }
        let acc = correct as f64 / 300.0;
        assert!(acc > 0.6, "area-threshold accuracy {acc}");
    }

    #[test]
    fn batch_iter_covers_exactly_once() {
        let ds = synth_shapes(10, 8, 8, 2, 1).unwrap();
        let batches = batch_iter(&ds, 3, 5, true).unwrap();
        let sizes: Vec<usize> = batches.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        let plain = batch_iter(&ds, 4, 5, false).unwrap();
        assert_eq!(plain.concat(), (0..10).collect::<Vec<_>>());

        let a = batch_iter(&ds, 3, 5, true).unwrap();
        let b = batch_iter(&ds, 3, 6, true).unwrap();
        assert_eq!(a, batches);
        assert_ne!(a, b);

        assert!(batch_iter(&ds, 11, 0, true).is_err());
        assert!(batch_iter(&ds, 0, 0, true).is_err());
    }

    fn write_idx_fixture(dir: &Path, prefix: &str, n: usize, h: usize, w: usize) {
        let mut img = Vec::new();
        img.extend(0x0803u32.to_be_bytes());
        img.extend((n as u32).to_be_bytes());
        img.extend((h as u32).to_be_bytes());
        img.extend((w as u32).to_be_bytes());
        for i in 0..n * h * w {
            img.push((i % 256) as u8);
        }
        File::create(dir.join(format!("{prefix}-images-idx3-ubyte")))
            .unwrap()
            .write_all(&img)
            .unwrap();
        let mut lbl = Vec::new();
        lbl.extend(0x0801u32.to_be_bytes());
        lbl.extend((n as u32).to_be_bytes());
        for i in 0..n {
            lbl.push((i % 10) as u8);
        }
        File::create(dir.join(format!("{prefix}-labels-idx1-ubyte")))
            .unwrap()
            .write_all(&lbl)
            .unwrap();
    }

    #[test]
    fn fashion_mnist_fixture_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        write_idx_fixture(dir.path(), "train", 4, 28, 28);
        let ds = load_fashion_mnist(dir.path(), Split::Train).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.image_shape(), &[1, 28, 28]);
        assert!(ds.images.iter().all(|i| i.iter().all(|&v| (0.0..=1.0).contains(&v))));
        let ds2 = load_fashion_mnist(dir.path(), Split::Train).unwrap();
        assert_eq!(ds.images, ds2.images);

        // Missing files name the path.
        let err = load_fashion_mnist(dir.path(), Split::Test).unwrap_err();
        match err {
            Error::Ingestion { path, .. } => assert!(path.contains("t10k")),
            other => panic!("expected ingestion error, got {other}"),
        }
    }

    #[test]
    fn cifar_fixture_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        const REC: usize = 1 + 3 * 32 * 32;
        let mut raw = vec![0u8; REC * 2];
        raw[0] = 3;
        raw[REC] = 7;
        for f in 1..=5 {
            File::create(dir.path().join(format!("data_batch_{f}.bin")))
                .unwrap()
                .write_all(&raw)
                .unwrap();
        }
        let ds = load_cifar10(dir.path(), Split::Train).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.image_shape(), &[3, 32, 32]);
        assert_eq!(ds.labels.as_ref().unwrap()[0], 3);
        assert_eq!(ds.labels.as_ref().unwrap()[1], 7);

        // Corrupt length is rejected with the file named.
        File::create(dir.path().join("test_batch.bin")).unwrap().write_all(&raw[..100]).unwrap();
        assert!(load_cifar10(dir.path(), Split::Test).is_err());
    }

    #[test]
    fn unknown_dataset_is_usage_error() {
        let err = load_dataset("imagenet", Path::new("/nowhere"), Split::Train).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn celeba_fixture_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img_dir = dir.path().join("img_align_celeba");
        std::fs::create_dir_all(&img_dir).unwrap();
        for (name, lum) in [("000001.jpg", 40u8), ("000002.jpg", 200u8)] {
            let img = image::RgbImage::from_pixel(96, 112, image::Rgb([lum, lum, lum]));
            img.save(img_dir.join(name)).unwrap();
        }
        let mut attrs = String::from("2\n");
        attrs.push_str(&format!("name {}\n", vec!["A"; 40].join(" ")));
        attrs.push_str(&format!("000001.jpg {}\n", vec!["-1"; 40].join(" ")));
        let mut row2: Vec<&str> = vec!["-1"; 40];
        row2[20] = "1"; // the Male column
        attrs.push_str(&format!("000002.jpg {}\n", row2.join(" ")));
        std::fs::write(dir.path().join("list_attr_celeba.txt"), attrs).unwrap();
        std::fs::write(
            dir.path().join("list_eval_partition.txt"),
            "000001.jpg 0\n000002.jpg 0\n",
        )
        .unwrap();

        let ds = load_celeba(dir.path(), Split::Train).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.image_shape(), &[3, 64, 64]);
        assert_eq!(ds.labels.as_ref().unwrap()[0], 0);
        assert_eq!(ds.labels.as_ref().unwrap()[1], 1 << 1); // Male bit set
        assert!(ds.images.iter().all(|i| i.iter().all(|&v| (0.0..=1.0).contains(&v))));

        // The test partition holds nothing here.
        assert!(load_celeba(dir.path(), Split::Test).is_err());
    }
}
