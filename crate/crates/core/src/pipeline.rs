//! End-to-end stages over a work directory: data, task network, feature
//! codec, autoencoder, reconstruction models and rate sweeps. Every model
//! file carries the hash of the configuration that produced it.

use std::path::PathBuf;
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::entropy::bitstream::Bitstream;
use crate::error::{contract, Error, Result};
use crate::hvcn::vae::{self, VaeModel, VaeTrainConfig};
use crate::hvcn::{self, HvcnModel, HvcnSample, HvcnTrainConfig};
use crate::metrics::{ms_ssim, psnr, MetricKind, RateQualityCurve};
use crate::par::Exec;
use crate::params::ParamStore;
use crate::pyramid::dataset::{generate_dataset, generate_range};
use crate::pyramid::task::{train_task, TaskTrainConfig};
use crate::pyramid::{FeaturePyramid, TaskModel, ToyImage};
use crate::tensor::Tensor;
use crate::vfcn::{self, SweepPoint, VfcnModel, VfcnTrainConfig, IMAGE_PIXELS};

/// Index of the first test image; training images start at zero.
pub const TEST_OFFSET: usize = 1_000_000;

pub struct Workspace {
    pub cfg: RunConfig,
    pub exec: Exec,
}

impl Workspace {
    pub fn new(cfg: RunConfig, exec: Exec) -> Self {
        Workspace { cfg, exec }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.cfg.work_dir.join(name)
    }

    pub fn variant_path(&self, i: usize) -> PathBuf {
        self.path(&format!("hvcn_{i}.fcmp"))
    }

    fn save(&self, mut params: ParamStore, name: &str) -> Result<()> {
        std::fs::create_dir_all(&self.cfg.work_dir)?;
        params.set_tag("config", self.cfg.hash_u64());
        params.save(self.path(name))
    }

    pub fn train_images(&self) -> Vec<ToyImage> {
        generate_dataset(self.cfg.train_images, self.cfg.seed, self.exec)
    }

    pub fn test_images(&self) -> Vec<ToyImage> {
        generate_range(TEST_OFFSET, self.cfg.test_images, self.cfg.seed, self.exec)
    }

    /// Writes the configuration and a manifest with a checksum of every
    /// rendered pixel; the images themselves are regenerated on demand.
    pub fn gen_data(&self) -> Result<String> {
        std::fs::create_dir_all(&self.cfg.work_dir)?;
        let sum = checksum(&self.train_images(), &self.test_images());
        let manifest = format!(
            "# config={}\nseed = {}\ntrain = 0..{}\ntest = {}..{}\nsha256 = {sum}\n",
            self.cfg.hash(),
            self.cfg.seed,
            self.cfg.train_images,
            TEST_OFFSET,
            TEST_OFFSET + self.cfg.test_images
        );
        std::fs::write(self.path("manifest.txt"), &manifest)?;
        std::fs::write(self.path("config.txt"), self.cfg.to_text())?;
        for (i, img) in self.test_images().iter().take(4).enumerate() {
            std::fs::write(self.path(&format!("sample_{i}.ppm")), to_ppm(&img.pixels, None)?)?;
        }
        Ok(sum)
    }

    /// Regenerated images, checked against the manifest when one exists.
    pub fn datasets(&self) -> Result<(Vec<ToyImage>, Vec<ToyImage>)> {
        let (train, test) = (self.train_images(), self.test_images());
        if let Ok(text) = std::fs::read_to_string(self.path("manifest.txt")) {
            let want = text
                .lines()
                .find_map(|l| l.strip_prefix("sha256 = "))
                .ok_or_else(|| Error::format(0, "manifest without checksum"))?;
            if want != checksum(&train, &test) {
                return Err(Error::format(0, "dataset does not match its manifest"));
            }
        }
        Ok((train, test))
    }

    pub fn train_head(&self) -> Result<TaskModel> {
        let (train, _) = self.datasets()?;
        let c = &self.cfg;
        let cfg = TaskTrainConfig {
            steps: c.task_steps,
            batch: c.task_batch,
            lr: c.task_lr,
            seed: c.seed,
        };
        let (m, _) = train_task(&train, cfg, self.exec)?;
        self.save(m.params.clone(), "task.fcmp")?;
        Ok(m)
    }

    pub fn task(&self) -> Result<TaskModel> {
        TaskModel::load(self.path("task.fcmp"))
    }

    pub fn train_vfcn(&self) -> Result<VfcnModel> {
        let (train, _) = self.datasets()?;
        let pyramids = self.task()?.pyramids(&train, self.exec)?;
        let c = &self.cfg;
        let cfg = VfcnTrainConfig {
            steps: c.vfcn_steps,
            batch: c.vfcn_batch,
            lr: c.vfcn_lr,
            lambda_p: c.lambda_p,
            seed: c.seed.wrapping_add(1),
        };
        let (m, _) = vfcn::train(&pyramids, cfg, self.exec)?;
        self.save(m.params.clone(), "vfcn.fcmp")?;
        Ok(m)
    }

    pub fn vfcn(&self) -> Result<VfcnModel> {
        VfcnModel::load(self.path("vfcn.fcmp"))
    }

    pub fn train_vae(&self) -> Result<VaeModel> {
        let (train, _) = self.datasets()?;
        let c = &self.cfg;
        let cfg = VaeTrainConfig {
            steps: c.vae_steps,
            batch: c.vae_batch,
            lr: c.vae_lr,
            kl_weight: c.kl_weight,
            seed: c.seed.wrapping_add(2),
        };
        let (m, _) = vae::train(&train, cfg, self.exec)?;
        self.save(m.params.clone(), "vae.fcmp")?;
        Ok(m)
    }

    pub fn vae(&self) -> Result<VaeModel> {
        VaeModel::load(self.path("vae.fcmp"))
    }

    /// Reconstruction-model inputs: machine features decoded at the
    /// training scale and colour latents.
    pub fn hvcn_samples(&self, images: &[ToyImage]) -> Result<Vec<HvcnSample>> {
        let (task, codec, ae) = (self.task()?, self.vfcn()?, self.vae()?);
        let norm = codec.norm(hvcn::TRAIN_SCALE)?;
        self.exec.try_map(images, |img| {
            let p = task.head(img)?;
            let decoded = codec.decode(&codec.encode(&p, norm)?)?;
            HvcnSample::new(&decoded, ae.encode(&img.pixels)?)
        })
    }

    /// Trains a base model with the first rate weight, then fine-tunes one
    /// model per rate weight from it.
    pub fn train_hvcn(&self) -> Result<Vec<HvcnModel>> {
        let (train, _) = self.datasets()?;
        let c = &self.cfg;
        let samples = self.hvcn_samples(&train[..c.hvcn_images])?;
        let cfg = |steps: usize, lambda_rs: f64, salt: u64| HvcnTrainConfig {
            steps,
            batch: c.hvcn_batch,
            lr: c.hvcn_lr,
            lambda_a: c.lambda_a,
            lambda_rs,
            seed: c.seed.wrapping_add(salt),
        };
        let (base, _) = hvcn::train(&samples, cfg(c.hvcn_steps, c.lambda_rs[0], 3), None, self.exec)?;
        let mut out = Vec::with_capacity(c.lambda_rs.len());
        for (i, &l) in c.lambda_rs.iter().enumerate() {
            let mut tuned_cfg = cfg(c.hvcn_finetune_steps, l, 4 + i as u64);
            tuned_cfg.lr *= 0.5;
            let (m, _) = hvcn::train(&samples, tuned_cfg, Some(&base.params), self.exec)?;
            self.save(m.params.clone(), &format!("hvcn_{i}.fcmp"))?;
            out.push(m);
        }
        Ok(out)
    }

    pub fn hvcn_variants(&self) -> Result<Vec<HvcnModel>> {
        (0..self.cfg.lambda_rs.len()).map(|i| HvcnModel::load(self.variant_path(i))).collect()
    }

    /// Machine-vision sweep over the configured scale factors.
    pub fn machine_sweep(&self) -> Result<Vec<SweepPoint>> {
        let (_, test) = self.datasets()?;
        let task = self.task()?;
        let pyramids = task.pyramids(&test, self.exec)?;
        vfcn::rate_sweep(&self.vfcn()?, &task, &pyramids, &test, &self.cfg.s_values, self.exec)
    }

    /// Human-vision quality of every rate variant on the first
    /// `human_test_images` test images.
    pub fn human_sweep(&self) -> Result<Vec<HumanPoint>> {
        let (_, test) = self.datasets()?;
        let images = &test[..self.cfg.human_test_images.min(test.len())];
        let (task, codec, ae) = (self.task()?, self.vfcn()?, self.vae()?);
        let mut out = Vec::new();
        for (i, m) in self.hvcn_variants()?.iter().enumerate() {
            let h = HumanCodec { task: &task, vfcn: &codec, hvcn: m, vae: &ae };
            let p = h.evaluate(images, hvcn::TRAIN_SCALE, self.cfg.sampling_steps, self.cfg.seed, self.exec)?;
            log::info!("human variant {i}: {:.4} bpp, MS-SSIM {:.4}, PSNR {:.2}", p.bpp, p.ms_ssim, p.psnr);
            out.push(HumanPoint { lambda_rs: self.cfg.lambda_rs[i], ..p });
        }
        Ok(out)
    }

    /// Runs both sweeps and writes their curves as CSV.
    pub fn sweep(&self) -> Result<(Vec<SweepPoint>, Vec<HumanPoint>)> {
        let machine = self.machine_sweep()?;
        let curve = RateQualityCurve::new(
            "vfcn",
            MetricKind::Accuracy,
            machine.iter().map(|p| (p.bpp, p.accuracy())).collect(),
        )?;
        self.write_curves("machine_accuracy.csv", &[curve])?;
        let human = self.human_sweep()?;
        let ms = RateQualityCurve::new("hvcn", MetricKind::MsSsim, human.iter().map(|p| (p.bpp, p.ms_ssim)).collect())?;
        let ps = RateQualityCurve::new("hvcn", MetricKind::Psnr, human.iter().map(|p| (p.bpp, p.psnr)).collect())?;
        self.write_curves("human_msssim.csv", &[ms])?;
        self.write_curves("human_psnr.csv", &[ps])?;
        Ok((machine, human))
    }

    fn write_curves(&self, name: &str, curves: &[RateQualityCurve]) -> Result<()> {
        let text = format!("# config={}\n{}", self.cfg.hash(), crate::metrics::curve::curves_to_csv(curves));
        std::fs::write(self.path(name), text)?;
        Ok(())
    }

    /// Every stage in order, returning the wall time of each.
    pub fn run_all(&self) -> Result<Vec<(&'static str, f64)>> {
        let mut times = Vec::new();
        let mut stage = |name: &'static str, f: &mut dyn FnMut() -> Result<()>| -> Result<()> {
            let t = Instant::now();
            f()?;
            let secs = t.elapsed().as_secs_f64();
            log::info!("stage {name}: {secs:.1} s");
            times.push((name, secs));
            Ok(())
        };
        stage("gen-data", &mut || self.gen_data().map(|_| ()))?;
        stage("train-head", &mut || self.train_head().map(|_| ()))?;
        stage("train-vfcn", &mut || self.train_vfcn().map(|_| ()))?;
        stage("train-vae", &mut || self.train_vae().map(|_| ()))?;
        stage("train-hvcn", &mut || self.train_hvcn().map(|_| ()))?;
        stage("sweep", &mut || self.sweep().map(|_| ()))?;
        Ok(times)
    }
}

fn checksum(train: &[ToyImage], test: &[ToyImage]) -> String {
    let mut h = Sha256::new();
    for img in train.iter().chain(test) {
        for v in img.pixels.data() {
            h.update(v.to_le_bytes());
        }
        h.update([img.label.index() as u8]);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Binary PPM (`P6`) of a `[1, 3, H, W]` image in `[0, 1]`, with an
/// optional header comment.
pub fn to_ppm(pixels: &Tensor, comment: Option<&str>) -> Result<Vec<u8>> {
    let (n, c, h, w) = pixels.dims4()?;
    contract!(n == 1 && c == 3, "PPM needs one RGB image, got {:?}", pixels.shape());
    let note = comment.map(|c| format!("# {c}\n")).unwrap_or_default();
    let mut out = format!("P6\n{note}{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for i in 0..plane {
        for ch in 0..3 {
            out.push((pixels.data()[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Reads an 8-bit binary PPM into `[1, 3, H, W]` in `[0, 1]`.
pub fn from_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos, "truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(Error::format(0, format!("not a binary PPM: {:?}", fields[0])));
    }
    let num = |i: usize| -> Result<usize> {
        fields[i].parse().map_err(|_| Error::format(0, format!("bad PPM field {:?}", fields[i])))
    };
    let (w, h, max) = (num(1)?, num(2)?, num(3)?);
    if max != 255 {
        return Err(Error::format(0, format!("PPM maxval {max} is not 255")));
    }
    pos += 1;
    let plane = w * h;
    let data = bytes.get(pos..pos + 3 * plane).ok_or_else(|| Error::format(bytes.len(), "truncated PPM pixels"))?;
    let mut out = vec![0.0; 3 * plane];
    for i in 0..plane {
        for ch in 0..3 {
            out[ch * plane + i] = data[3 * i + ch] as f64 / 255.0;
        }
    }
    Tensor::new(&[1, 3, h, w], out)
}

/// Mean human-vision quality at one rate point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HumanPoint {
    pub lambda_rs: f64,
    /// Full container bits (header, machine and colour payloads) per pixel.
    pub bpp: f64,
    pub ms_ssim: f64,
    pub psnr: f64,
}

/// Machine and human-vision coding of images with one set of models.
pub struct HumanCodec<'a> {
    pub task: &'a TaskModel,
    pub vfcn: &'a VfcnModel,
    pub hvcn: &'a HvcnModel,
    pub vae: &'a VaeModel,
}

impl HumanCodec<'_> {
    /// Container with the machine stream at scale `s` and the colour
    /// payload.
    pub fn compress(&self, image: &ToyImage, s: f64) -> Result<Bitstream> {
        let p = self.task.head(image)?;
        self.compress_pyramid(&p, &image.pixels, s)
    }

    pub fn compress_pyramid(&self, p: &FeaturePyramid, pixels: &Tensor, s: f64) -> Result<Bitstream> {
        let mut stream = self.vfcn.encode(p, self.vfcn.norm(s)?)?;
        let (bytes, _) = self.hvcn.compress_latent(&self.vae.encode(pixels)?)?;
        stream.color = Some(bytes);
        Ok(stream)
    }

    /// Image sampled with `k` steps and seed `seed` from a container with a
    /// colour payload.
    pub fn reconstruct(&self, stream: &Bitstream, k: usize, seed: u64) -> Result<Tensor> {
        let color = stream
            .color
            .as_ref()
            .ok_or_else(|| Error::State("container has no human-vision payload".into()))?;
        let decoded = self.vfcn.decode(stream)?;
        let z_hat = self.hvcn.decompress_latent(color)?;
        let z0 = self.hvcn.sample(&decoded, &z_hat, k, seed, self.vae.latent_bound())?;
        self.vae.decode(&z0)
    }

    /// Per-image `(bits, MS-SSIM, PSNR)` with sampling seed `seed + index`.
    pub fn measure(&self, images: &[ToyImage], s: f64, k: usize, seed: u64, exec: Exec) -> Result<Vec<(usize, f64, f64)>> {
        let idx: Vec<usize> = (0..images.len()).collect();
        exec.try_map(&idx, |&i| {
            let stream = self.compress(&images[i], s)?;
            let bits = stream.to_bytes()?.len() * 8;
            let x = self.reconstruct(&stream, k, seed.wrapping_add(i as u64))?;
            Ok::<_, Error>((bits, ms_ssim(&x, &images[i].pixels, 1.0)?, psnr(&x, &images[i].pixels, 1.0)?))
        })
    }

    pub fn evaluate(&self, images: &[ToyImage], s: f64, k: usize, seed: u64, exec: Exec) -> Result<HumanPoint> {
        contract!(!images.is_empty(), "human-vision evaluation over no images");
        let r = self.measure(images, s, k, seed, exec)?;
        let n = r.len() as f64;
        Ok(HumanPoint {
            lambda_rs: self.hvcn.params.meta("lambda_rs").unwrap_or(f64::NAN),
            bpp: r.iter().map(|v| v.0).sum::<usize>() as f64 / (n * IMAGE_PIXELS as f64),
            ms_ssim: r.iter().map(|v| v.1).sum::<f64>() / n,
            psnr: r.iter().map(|v| v.2).sum::<f64>() / n,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_size() {
        let img = Tensor::full(&[1, 3, 2, 3], 1.0);
        let ppm = to_ppm(&img, None).unwrap();
        assert!(ppm.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(ppm.len(), 11 + 18);
        assert!(ppm[11..].iter().all(|&b| b == 255));
    }

    #[test]
    fn ppm_round_trip_with_comment() {
        let mut rng = <rand_xoshiro::Xoshiro256PlusPlus as rand::SeedableRng>::seed_from_u64(3);
        let img = Tensor::uniform(&[1, 3, 5, 4], 0.0, 1.0, &mut rng);
        let back = from_ppm(&to_ppm(&img, Some("config=abc")).unwrap()).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);
        assert!(from_ppm(b"P5\n1 1\n255\n0").is_err());
        assert!(from_ppm(b"P6\n2 2\n255\n000").is_err());
    }

    #[test]
    fn manifest_detects_changed_data() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            train_images: 3,
            test_images: 2,
            work_dir: dir.path().to_path_buf(),
            hvcn_images: 3,
            ..RunConfig::default()
        };
        let ws = Workspace::new(cfg.clone(), Exec::Serial);
        ws.gen_data().unwrap();
        assert!(ws.datasets().is_ok());
        let other = Workspace::new(RunConfig { seed: 2, ..cfg }, Exec::Serial);
        assert!(matches!(other.datasets(), Err(Error::Format { .. })));
    }
}
