//! Texture/noise dataset generation.
//!
//! For every readable texture in a directory this writes its
//! phase-randomized counterpart plus a tab-separated manifest. Spectrum
//! checks run on the full-precision arrays before 8-bit quantization, since
//! PNG encoding necessarily rounds pixel values.
//!
//! Output layout under `out_dir`:
//!
//! ```text
//! textures/<name>.png   re-encoded grayscale source
//! noise/<name>.png      phase-randomized counterpart
//! manifest.tsv          name  texture_path  noise_path  seed  status
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::augment::phase::phase_randomize;
use crate::error::{Error, Result};
use crate::image_io::{read_png, to_grayscale, write_png};
use crate::kernels::fft::fft2d;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Verification numbers for one generated pair, computed pre-quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct PairChecks {
    /// Max magnitude-spectrum discrepancy relative to the spectrum sup norm.
    pub spectrum_rel_err: f64,
    /// |mean(noise) - mean(texture)|.
    pub mean_abs_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PairStatus {
    Ok(PairChecks),
    Skipped { reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub texture_path: PathBuf,
    pub noise_path: PathBuf,
    pub seed: u64,
    pub status: PairStatus,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn generated(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| matches!(e.status, PairStatus::Ok(_)))
            .count()
    }

    pub fn skipped(&self) -> usize {
        self.entries.len() - self.generated()
    }

    fn tsv(&self) -> String {
        let mut out = String::from("name\ttexture_path\tnoise_path\tseed\tstatus\n");
        for e in &self.entries {
            let status = match &e.status {
                PairStatus::Ok(_) => "ok".to_string(),
                PairStatus::Skipped { reason } => format!("skipped: {reason}"),
            };
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.name,
                e.texture_path.display(),
                e.noise_path.display(),
                e.seed,
                status
            ));
        }
        out
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn spectrum_rel_err(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let ma: Vec<f64> = fft2d(a, h, w).iter().map(|z| z.abs()).collect();
    let mb: Vec<f64> = fft2d(b, h, w).iter().map(|z| z.abs()).collect();
    let sup = ma.iter().cloned().fold(0.0, f64::max).max(1e-300);
    ma.iter()
        .zip(&mb)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / sup
}

/// Generate the noise counterpart of every texture under `texture_dir`.
///
/// Per-texture seeds derive from the global seed and the file name, so a
/// rerun with the same seed writes byte-identical outputs regardless of
/// directory enumeration order. Unreadable files are recorded as skipped
/// and processing continues.
pub fn generate_texture_noise_dataset(
    texture_dir: &Path,
    out_dir: &Path,
    seed: u64,
) -> Result<Manifest> {
    let mut names: Vec<PathBuf> = fs::read_dir(texture_dir)
        .map_err(|e| Error::io(texture_dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Config(format!(
            "no texture files found in {}",
            texture_dir.display()
        )));
    }

    let textures_out = out_dir.join("textures");
    let noise_out = out_dir.join("noise");
    fs::create_dir_all(&textures_out).map_err(|e| Error::io(&textures_out, e))?;
    fs::create_dir_all(&noise_out).map_err(|e| Error::io(&noise_out, e))?;

    let mut manifest = Manifest::default();
    for path in names {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "unnamed".to_string());
        let file_seed = seed ^ fnv1a(name.as_bytes());
        let texture_path = textures_out.join(format!("{name}.png"));
        let noise_path = noise_out.join(format!("{name}.png"));

        let gray = match read_png(&path).and_then(|t| to_grayscale(&t)) {
            Ok(g) => g,
            Err(e) => {
                manifest.entries.push(ManifestEntry {
                    name,
                    texture_path: path.clone(),
                    noise_path: PathBuf::from("-"),
                    seed: file_seed,
                    status: PairStatus::Skipped {
                        reason: e.to_string(),
                    },
                });
                continue;
            }
        };
        let [_, _, h, w] = gray.shape();
        let mut rng = Rng::seed_from_u64(file_seed);
        let noise = phase_randomize(gray.plane(0, 0), h, w, &mut rng)?;

        let checks = PairChecks {
            spectrum_rel_err: spectrum_rel_err(gray.plane(0, 0), &noise, h, w),
            mean_abs_err: {
                let m_in: f64 = gray.plane(0, 0).iter().sum::<f64>() / (h * w) as f64;
                let m_out: f64 = noise.iter().sum::<f64>() / (h * w) as f64;
                (m_in - m_out).abs()
            },
        };

        write_png(&texture_path, &gray)?;
        let noise_tensor = Tensor::from_vec([1, 1, h, w], noise)?;
        write_png(&noise_path, &noise_tensor)?;

        manifest.entries.push(ManifestEntry {
            name,
            texture_path,
            noise_path,
            seed: file_seed,
            status: PairStatus::Ok(checks),
        });
    }

    let manifest_path = out_dir.join("manifest.tsv");
    fs::write(&manifest_path, manifest.tsv()).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

/// Load every PNG under a directory as a grayscale overlay pool.
pub fn load_overlay_pool(dir: &Path) -> Result<Vec<Tensor>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    paths.sort();
    let mut pool = Vec::with_capacity(paths.len());
    for p in paths {
        pool.push(to_grayscale(&read_png(&p)?)?);
    }
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Synthetic textures: oriented gratings with per-texture frequency.
    fn write_test_textures(dir: &Path, count: usize) {
        for i in 0..count {
            let (h, w) = (24 + i % 3, 20 + i % 5); // exercise non-power-of-two
            let f = 0.3 + 0.2 * i as f64;
            let image = Tensor::from_fn([1, 1, h, w], {
                let mut idx = 0usize;
                move || {
                    let y = idx / w;
                    let x = idx % w;
                    idx += 1;
                    0.5 + 0.4 * ((f * x as f64).sin() * (f * 0.7 * y as f64).cos())
                }
            });
            write_png(&dir.join(format!("tex{i}.png")), &image).unwrap();
        }
    }

    #[test]
    fn generates_one_noise_file_per_texture() {
        let tmp = tempfile::tempdir().unwrap();
        let tex_dir = tmp.path().join("tex");
        fs::create_dir(&tex_dir).unwrap();
        write_test_textures(&tex_dir, 4);
        let out_dir = tmp.path().join("out");
        let manifest = generate_texture_noise_dataset(&tex_dir, &out_dir, 7).unwrap();
        assert_eq!(manifest.entries.len(), 4);
        assert_eq!(manifest.generated(), 4);
        for e in &manifest.entries {
            assert!(e.noise_path.exists());
            assert!(e.texture_path.exists());
        }
        assert!(out_dir.join("manifest.tsv").exists());
    }

    #[test]
    fn every_pair_passes_spectrum_and_mean_checks() {
        let tmp = tempfile::tempdir().unwrap();
        let tex_dir = tmp.path().join("tex");
        fs::create_dir(&tex_dir).unwrap();
        write_test_textures(&tex_dir, 3);
        let manifest =
            generate_texture_noise_dataset(&tex_dir, &tmp.path().join("out"), 11).unwrap();
        for e in &manifest.entries {
            match &e.status {
                PairStatus::Ok(checks) => {
                    assert!(checks.spectrum_rel_err < 1e-9, "{}", checks.spectrum_rel_err);
                    assert!(checks.mean_abs_err < 1e-9, "{}", checks.mean_abs_err);
                }
                PairStatus::Skipped { reason } => panic!("unexpected skip: {reason}"),
            }
        }
    }

    #[test]
    fn rerun_with_same_seed_is_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let tex_dir = tmp.path().join("tex");
        fs::create_dir(&tex_dir).unwrap();
        write_test_textures(&tex_dir, 3);
        let out_a = tmp.path().join("a");
        let out_b = tmp.path().join("b");
        generate_texture_noise_dataset(&tex_dir, &out_a, 21).unwrap();
        generate_texture_noise_dataset(&tex_dir, &out_b, 21).unwrap();
        for i in 0..3 {
            let fa = fs::read(out_a.join(format!("noise/tex{i}.png"))).unwrap();
            let fb = fs::read(out_b.join(format!("noise/tex{i}.png"))).unwrap();
            assert_eq!(fa, fb, "tex{i}");
        }
        let ma = fs::read(out_a.join("manifest.tsv")).unwrap();
        let mb = fs::read(out_b.join("manifest.tsv")).unwrap();
        // manifests differ only in the out-dir path column
        let norm = |v: &[u8]| String::from_utf8_lossy(v).replace("/a/", "/X/").replace("/b/", "/X/");
        assert_eq!(norm(&ma), norm(&mb));
    }

    #[test]
    fn unreadable_file_is_skipped_and_processing_continues() {
        let tmp = tempfile::tempdir().unwrap();
        let tex_dir = tmp.path().join("tex");
        fs::create_dir(&tex_dir).unwrap();
        write_test_textures(&tex_dir, 2);
        fs::write(tex_dir.join("broken.png"), b"not a png at all").unwrap();
        let manifest =
            generate_texture_noise_dataset(&tex_dir, &tmp.path().join("out"), 3).unwrap();
        assert_eq!(manifest.entries.len(), 3);
        assert_eq!(manifest.generated(), 2);
        assert_eq!(manifest.skipped(), 1);
        let skipped = manifest
            .entries
            .iter()
            .find(|e| matches!(e.status, PairStatus::Skipped { .. }))
            .unwrap();
        assert_eq!(skipped.name, "broken");
    }

    #[test]
    fn empty_directory_is_a_config_error() {
        let tmp = tempfile::tempdir().unwrap();
        let tex_dir = tmp.path().join("tex");
        fs::create_dir(&tex_dir).unwrap();
        let err =
            generate_texture_noise_dataset(&tex_dir, &tmp.path().join("out"), 3).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
