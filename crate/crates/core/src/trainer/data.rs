//! Datasets: directory-per-class image folders plus a dependency-free
//! synthetic corpus of colored geometric shapes on textured backgrounds.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image_io::read_png;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// In-memory labeled image set. All images share one shape.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 4] {
        self.images.first().map(|t| t.shape()).unwrap_or([0; 4])
    }

    /// Assemble a batch: images (N, C, H, W) plus one-hot labels (N, K, 1, 1).
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument {
                op: "dataset::batch",
                detail: "empty index list".into(),
            });
        }
        let [_, c, h, w] = self.image_shape();
        let n = indices.len();
        let mut images = Tensor::zeros([n, c, h, w]);
        let mut labels = Tensor::zeros([n, self.class_count, 1, 1]);
        let plane = c * h * w;
        for (bi, &di) in indices.iter().enumerate() {
            let img = &self.images[di];
            images.data_mut()[bi * plane..(bi + 1) * plane].copy_from_slice(img.data());
            labels.data_mut()[bi * self.class_count + self.labels[di]] = 1.0;
        }
        Ok((images, labels))
    }

    /// Load a directory-per-class folder of PNGs. Class order is the sorted
    /// subdirectory order; file order within a class is sorted.
    pub fn load_image_folders(root: &Path) -> Result<Dataset> {
        if !root.is_dir() {
            return Err(Error::Config(format!(
                "dataset path {} does not exist or is not a directory",
                root.display()
            )));
        }
        let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        class_dirs.sort();
        if class_dirs.is_empty() {
            return Err(Error::Config(format!(
                "dataset path {} contains no class directories",
                root.display()
            )));
        }
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut class_names = Vec::new();
        for (ci, dir) in class_dirs.iter().enumerate() {
            class_names.push(
                dir.file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| ci.to_string()),
            );
            let mut files: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "png"))
                .collect();
            files.sort();
            for f in files {
                let img = read_png(&f)?;
                if let Some(first) = images.first() {
                    img.check_same_shape("dataset::load_image_folders", first)
                        .map_err(|_| {
                            Error::Config(format!(
                                "{}: image shape differs from the rest of the dataset",
                                f.display()
                            ))
                        })?;
                }
                images.push(img);
                labels.push(ci);
            }
        }
        if images.is_empty() {
            return Err(Error::Config(format!(
                "dataset path {} contains no PNG images",
                root.display()
            )));
        }
        Ok(Dataset {
            images,
            labels,
            class_count: class_dirs.len(),
            class_names,
        })
    }
}

pub const SYNTHETIC_CLASS_COUNT: usize = 10;
pub const SYNTHETIC_SIDE: usize = 32;

const SHAPE_NAMES: [&str; SYNTHETIC_CLASS_COUNT] = [
    "disk", "square", "triangle", "ring", "plus", "cross", "hbar", "vbar", "diamond", "frame",
];

fn shape_hit(class: usize, dy: f64, dx: f64, s: f64) -> bool {
    let r2 = dy * dy + dx * dx;
    match class {
        0 => r2 <= s * s,                                           // disk
        1 => dy.abs() <= s && dx.abs() <= s,                        // square
        2 => dy >= -s && dy <= s && dx.abs() <= (dy + s) * 0.5,     // triangle
        3 => r2 <= s * s && r2 >= (s - 2.5) * (s - 2.5),            // ring
        4 => (dx.abs() <= 1.8 && dy.abs() <= s) || (dy.abs() <= 1.8 && dx.abs() <= s), // plus
        5 => (dx.abs() - dy.abs()).abs() <= 1.8 && dx.abs().max(dy.abs()) <= s, // diagonal cross
        6 => dy.abs() <= 2.0 && dx.abs() <= s,                      // horizontal bar
        7 => dx.abs() <= 2.0 && dy.abs() <= s,                      // vertical bar
        8 => dx.abs() + dy.abs() <= s,                              // diamond
        _ => {
            let m = dx.abs().max(dy.abs());
            m <= s && m >= s - 2.5                                  // square frame
        }
    }
}

/// One synthetic sample: a colored shape over a low-contrast textured
/// background, deterministic in (seed, index).
fn synthetic_sample(seed: u64, index: usize) -> (Tensor, usize) {
    let mut rng = Rng::seed_from_u64(seed).derive(index as u64);
    let class = index % SYNTHETIC_CLASS_COUNT;
    let side = SYNTHETIC_SIDE;

    // textured background: base color + oriented grating + pixel noise
    let base: [f64; 3] = [
        rng.uniform(0.05, 0.35),
        rng.uniform(0.05, 0.35),
        rng.uniform(0.05, 0.35),
    ];
    let freq = rng.uniform(0.25, 0.9);
    let theta = rng.uniform(0.0, std::f64::consts::PI);
    let (st, ct) = theta.sin_cos();
    let amp = rng.uniform(0.03, 0.08);

    // foreground shape: bright contrasting color, jittered placement
    let fg: [f64; 3] = [
        rng.uniform(0.6, 0.95),
        rng.uniform(0.6, 0.95),
        rng.uniform(0.6, 0.95),
    ];
    let cy = side as f64 / 2.0 + rng.uniform(-4.0, 4.0);
    let cx = side as f64 / 2.0 + rng.uniform(-4.0, 4.0);
    let size = rng.uniform(5.5, 8.5);

    let mut image = Tensor::zeros([1, 3, side, side]);
    for y in 0..side {
        for x in 0..side {
            let grating = amp * ((freq * (ct * x as f64 + st * y as f64)).sin());
            let noise = rng.uniform(-0.02, 0.02);
            let hit = shape_hit(class, y as f64 - cy, x as f64 - cx, size);
            for ch in 0..3 {
                let v = if hit {
                    fg[ch] + noise
                } else {
                    base[ch] + grating + noise
                };
                *image.at_mut(0, ch, y, x) = v.clamp(0.0, 1.0);
            }
        }
    }
    (image, class)
}

/// Deterministic synthetic corpus: `count` samples cycling through the 10
/// shape classes.
pub fn synthetic_dataset(count: usize, seed: u64) -> Dataset {
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let (img, class) = synthetic_sample(seed, i);
        images.push(img);
        labels.push(class);
    }
    Dataset {
        images,
        labels,
        class_count: SYNTHETIC_CLASS_COUNT,
        class_names: SHAPE_NAMES.iter().map(|s| s.to_string()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_io::write_png;

    #[test]
    fn synthetic_corpus_is_deterministic_and_balanced() {
        let a = synthetic_dataset(50, 7);
        let b = synthetic_dataset(50, 7);
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.data(), y.data());
        }
        let c = synthetic_dataset(50, 8);
        assert_ne!(a.images[0].data(), c.images[0].data());
        for class in 0..SYNTHETIC_CLASS_COUNT {
            assert_eq!(a.labels.iter().filter(|&&l| l == class).count(), 5);
        }
    }

    #[test]
    fn synthetic_pixels_stay_in_unit_range() {
        let data = synthetic_dataset(30, 3);
        for img in &data.images {
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn batch_assembles_one_hot_labels() {
        let data = synthetic_dataset(12, 1);
        let (images, labels) = data.batch(&[0, 5, 7]).unwrap();
        assert_eq!(images.shape(), [3, 3, 32, 32]);
        assert_eq!(labels.shape(), [3, 10, 1, 1]);
        for (bi, &di) in [0usize, 5, 7].iter().enumerate() {
            let row = &labels.data()[bi * 10..(bi + 1) * 10];
            assert_eq!(row.iter().sum::<f64>(), 1.0);
            assert_eq!(row[data.labels[di]], 1.0);
        }
    }

    #[test]
    fn image_folder_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("data");
        for class in ["a_first", "b_second"] {
            fs::create_dir_all(root.join(class)).unwrap();
        }
        let img = Tensor::filled([1, 3, 8, 8], 0.5);
        write_png(&root.join("a_first/x.png"), &img).unwrap();
        write_png(&root.join("a_first/y.png"), &img).unwrap();
        write_png(&root.join("b_second/z.png"), &img).unwrap();
        let data = Dataset::load_image_folders(&root).unwrap();
        assert_eq!(data.class_count, 2);
        assert_eq!(data.len(), 3);
        assert_eq!(data.labels, vec![0, 0, 1]);
        assert_eq!(data.class_names, vec!["a_first", "b_second"]);
    }

    #[test]
    fn missing_dataset_directory_names_the_path() {
        let err = Dataset::load_image_folders(Path::new("/no/such/dataset")).unwrap_err();
        match err {
            Error::Config(detail) => assert!(detail.contains("/no/such/dataset")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
