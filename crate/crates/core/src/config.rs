//! Run configuration: flat `key = value` lines grouped under `[section]`
//! headers. Unknown sections and keys are rejected; serialization is
//! canonical so parse and serialize round-trip.

use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub train_images: usize,
    pub test_images: usize,

    pub task_steps: usize,
    pub task_batch: usize,
    pub task_lr: f64,

    pub vfcn_steps: usize,
    pub vfcn_batch: usize,
    pub vfcn_lr: f64,
    pub lambda_p: f64,
    pub s_values: Vec<f64>,

    pub vae_steps: usize,
    pub vae_batch: usize,
    pub vae_lr: f64,
    pub kl_weight: f64,

    pub hvcn_images: usize,
    pub hvcn_steps: usize,
    pub hvcn_finetune_steps: usize,
    pub hvcn_batch: usize,
    pub hvcn_lr: f64,
    pub lambda_a: f64,
    pub lambda_rs: Vec<f64>,
    pub sampling_steps: usize,
    pub human_test_images: usize,

    pub work_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            train_images: 4000,
            test_images: 600,
            task_steps: 1500,
            task_batch: 16,
            task_lr: 3e-3,
            vfcn_steps: 3000,
            vfcn_batch: 8,
            vfcn_lr: 1e-3,
            lambda_p: crate::vfcn::DEFAULT_LAMBDA_P,
            s_values: vec![0.4, 0.6, 0.8, 1.0, 1.2],
            vae_steps: 2500,
            vae_batch: 8,
            vae_lr: 2e-3,
            kl_weight: 1e-4,
            hvcn_images: 2000,
            hvcn_steps: 2000,
            hvcn_finetune_steps: 400,
            hvcn_batch: 8,
            hvcn_lr: 1e-3,
            lambda_a: crate::hvcn::DEFAULT_LAMBDA_A,
            lambda_rs: crate::hvcn::LAMBDA_RS_VARIANTS.to_vec(),
            sampling_steps: crate::hvcn::DEFAULT_SAMPLING_STEPS,
            human_test_images: 50,
            work_dir: PathBuf::from("run"),
        }
    }
}

fn list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    let out: Vec<f64> = v.split(',').map(|x| parse(key, x.trim())).collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(Error::Config(format!("{key}: empty list")));
    }
    Ok(out)
}

impl RunConfig {
    pub fn to_text(&self) -> String {
        format!("{}\n[paths]\nwork_dir = {}\n", self.settings_text(), self.work_dir.display())
    }

    /// Every section except `[paths]`: the part that decides the results.
    fn settings_text(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "[data]\nseed = {}\ntrain_images = {}\ntest_images = {}\n\n\
             [task]\nsteps = {}\nbatch = {}\nlr = {}\n\n\
             [vfcn]\nsteps = {}\nbatch = {}\nlr = {}\nlambda_p = {}\ns_values = {}\n\n\
             [vae]\nsteps = {}\nbatch = {}\nlr = {}\nkl_weight = {}\n\n\
             [hvcn]\nimages = {}\nsteps = {}\nfinetune_steps = {}\nbatch = {}\nlr = {}\n\
             lambda_a = {}\nlambda_rs = {}\nsampling_steps = {}\ntest_images = {}\n",
            self.seed,
            self.train_images,
            self.test_images,
            self.task_steps,
            self.task_batch,
            self.task_lr,
            self.vfcn_steps,
            self.vfcn_batch,
            self.vfcn_lr,
            self.lambda_p,
            list(&self.s_values),
            self.vae_steps,
            self.vae_batch,
            self.vae_lr,
            self.kl_weight,
            self.hvcn_images,
            self.hvcn_steps,
            self.hvcn_finetune_steps,
            self.hvcn_batch,
            self.hvcn_lr,
            self.lambda_a,
            list(&self.lambda_rs),
            self.sampling_steps,
            self.human_test_images,
        );
        s
    }

    /// Parses configuration text over the defaults. Keys may appear in any
    /// order; `#` starts a comment line.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            c.set(&section, k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Sets one key; `section.key` names as written in the file.
    pub fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let full = format!("{section}.{key}");
        let k = full.as_str();
        match k {
            "data.seed" => self.seed = parse(k, v)?,
            "data.train_images" => self.train_images = parse(k, v)?,
            "data.test_images" => self.test_images = parse(k, v)?,
            "task.steps" => self.task_steps = parse(k, v)?,
            "task.batch" => self.task_batch = parse(k, v)?,
            "task.lr" => self.task_lr = parse(k, v)?,
            "vfcn.steps" => self.vfcn_steps = parse(k, v)?,
            "vfcn.batch" => self.vfcn_batch = parse(k, v)?,
            "vfcn.lr" => self.vfcn_lr = parse(k, v)?,
            "vfcn.lambda_p" => self.lambda_p = parse(k, v)?,
            "vfcn.s_values" => self.s_values = parse_list(k, v)?,
            "vae.steps" => self.vae_steps = parse(k, v)?,
            "vae.batch" => self.vae_batch = parse(k, v)?,
            "vae.lr" => self.vae_lr = parse(k, v)?,
            "vae.kl_weight" => self.kl_weight = parse(k, v)?,
            "hvcn.images" => self.hvcn_images = parse(k, v)?,
            "hvcn.steps" => self.hvcn_steps = parse(k, v)?,
            "hvcn.finetune_steps" => self.hvcn_finetune_steps = parse(k, v)?,
            "hvcn.batch" => self.hvcn_batch = parse(k, v)?,
            "hvcn.lr" => self.hvcn_lr = parse(k, v)?,
            "hvcn.lambda_a" => self.lambda_a = parse(k, v)?,
            "hvcn.lambda_rs" => self.lambda_rs = parse_list(k, v)?,
            "hvcn.sampling_steps" => self.sampling_steps = parse(k, v)?,
            "hvcn.test_images" => self.human_test_images = parse(k, v)?,
            "paths.work_dir" => self.work_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key {k:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("train_images", self.train_images),
            ("test_images", self.test_images),
            ("task batch", self.task_batch),
            ("vfcn batch", self.vfcn_batch),
            ("vae batch", self.vae_batch),
            ("hvcn batch", self.hvcn_batch),
            ("hvcn images", self.hvcn_images),
            ("sampling_steps", self.sampling_steps),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.hvcn_images > self.train_images {
            return bad("hvcn images exceed the training set".into());
        }
        for (name, v) in [("task lr", self.task_lr), ("vfcn lr", self.vfcn_lr), ("vae lr", self.vae_lr), ("hvcn lr", self.hvcn_lr)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, v) in [("lambda_p", self.lambda_p), ("lambda_a", self.lambda_a), ("kl_weight", self.kl_weight)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be nonnegative"));
            }
        }
        if self.lambda_rs.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("lambda_rs values must be nonnegative".into());
        }
        if self.s_values.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("s values must be positive".into());
        }
        if self.sampling_steps > crate::hvcn::schedule::DEFAULT_STEPS {
            return bad(format!("sampling_steps above {}", crate::hvcn::schedule::DEFAULT_STEPS));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// First 16 hex digits of the SHA-256 of the canonical text, leaving
    /// out the work directory so reruns elsewhere tag files identically.
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.settings_text().as_bytes());
        d[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn hash_u64(&self) -> u64 {
        u64::from_str_radix(&self.hash(), 16).expect("hex digest")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        let text = c.to_text();
        let back = RunConfig::from_text(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), text);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_and_sections_rejected() {
        assert!(matches!(RunConfig::from_text("[vfcn]\nlamda_p = 1\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("[other]\nsteps = 1\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("seed = 1\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("[data]\nseed\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("[data]\nseed = x\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("[vfcn]\nbatch = 0\n"), Err(Error::Config(_))));
    }

    #[test]
    fn partial_text_overrides_defaults() {
        let c = RunConfig::from_text("# comment\n[hvcn]\nlambda_rs = 0.5, 2\n\n[data]\nseed = 9\n").unwrap();
        assert_eq!(c.lambda_rs, vec![0.5, 2.0]);
        assert_eq!(c.seed, 9);
        assert_eq!(c.vfcn_steps, RunConfig::default().vfcn_steps);
        assert_ne!(c.hash(), RunConfig::default().hash());
    }

    #[test]
    fn hash_ignores_work_dir() {
        let a = RunConfig::default();
        let b = RunConfig {
            work_dir: "elsewhere".into(),
            ..a.clone()
        };
        assert_ne!(a.to_text(), b.to_text());
        assert_eq!(a.hash(), b.hash());
    }

    proptest! {
        #[test]
        fn arbitrary_configs_round_trip(seed in any::<u64>(), lp in 0.0f64..1.0,
                                        s in proptest::collection::vec(0.01f64..4.0, 1..6),
                                        steps in 0usize..100_000) {
            let c = RunConfig { seed, lambda_p: lp, s_values: s, vfcn_steps: steps, ..RunConfig::default() };
            let back = RunConfig::from_text(&c.to_text()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
