//! Toy detection network: a strided convolutional head producing P2..P5 and
//! a tail predicting the shape class (from pooled P3) and its center (from
//! a P2 heatmap with sub-cell offsets).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autodiff::{cross_entropy, Graph, Var};
use crate::error::{contract, Result};
use crate::par::Exec;
use crate::params::{init_conv, Bound, ParamStore};
use crate::pyramid::dataset::{ShapeClass, ToyImage, IMAGE_SIZE, NUM_CLASSES};
use crate::pyramid::{FeaturePyramid, LEVEL_SIZES, PYRAMID_CHANNELS};
use crate::tensor::Tensor;
use crate::train::{mean_grads, Trainer};

/// Pixels per P2 cell.
const CELL: f64 = (IMAGE_SIZE / 16) as f64;
/// A center estimate within this distance of the truth counts as a hit.
pub const LOC_HIT_RADIUS: f64 = 4.0;
/// Pyramid levels are squashed smoothly into `(-FEATURE_BOUND, FEATURE_BOUND)`.
pub const FEATURE_BOUND: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TaskPrediction {
    pub class_logits: [f64; NUM_CLASSES],
    pub center: (f64, f64),
}

impl TaskPrediction {
    pub fn class(&self) -> ShapeClass {
        let i = crate::autodiff::argmax(&self.class_logits);
        ShapeClass::from_index(i).expect("class index")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AccuracyReport {
    pub class_acc: f64,
    pub loc_hit: f64,
}

impl AccuracyReport {
    /// Single score used for rate-accuracy curves.
    pub fn combined(&self) -> f64 {
        0.5 * (self.class_acc + self.loc_hit)
    }
}

pub fn task_accuracy(
    preds: &[TaskPrediction],
    truths: &[(ShapeClass, (f64, f64))],
) -> Result<AccuracyReport> {
    contract!(
        preds.len() == truths.len(),
        "{} predictions for {} truths",
        preds.len(),
        truths.len()
    );
    if preds.is_empty() {
        return Ok(AccuracyReport {
            class_acc: 0.0,
            loc_hit: 0.0,
        });
    }
    let n = preds.len() as f64;
    let mut cls = 0usize;
    let mut hit = 0usize;
    for (p, (label, (ty, tx))) in preds.iter().zip(truths) {
        if p.class() == *label {
            cls += 1;
        }
        let (py, px) = p.center;
        if ((py - ty).powi(2) + (px - tx).powi(2)).sqrt() <= LOC_HIT_RADIUS {
            hit += 1;
        }
    }
    Ok(AccuracyReport {
        class_acc: cls as f64 / n,
        loc_hit: hit as f64 / n,
    })
}

pub fn truth_of(img: &ToyImage) -> (ShapeClass, (f64, f64)) {
    (img.label, img.center)
}

pub fn init_params(seed: u64) -> ParamStore {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let c = PYRAMID_CHANNELS;
    init_conv(&mut s, "head.c1", 3, 16, 3, &mut rng);
    init_conv(&mut s, "head.c2", 16, 16, 3, &mut rng);
    init_conv(&mut s, "head.p2", 16, c, 3, &mut rng);
    init_conv(&mut s, "head.p3", c, c, 3, &mut rng);
    init_conv(&mut s, "head.p4", c, c, 3, &mut rng);
    init_conv(&mut s, "head.p5", c, c, 3, &mut rng);
    init_conv(&mut s, "tail.loc1", c, c, 3, &mut rng);
    init_conv(&mut s, "tail.loc2", c, 3, 1, &mut rng);
    init_conv(&mut s, "tail.cls1", c, c, 3, &mut rng);
    init_conv(&mut s, "tail.cls2", c, NUM_CLASSES, 1, &mut rng);
    s
}

fn conv<'g>(b: &Bound<'g, '_>, x: Var<'g>, name: &str, stride: usize) -> Result<Var<'g>> {
    let w = b.w(name)?;
    let pad = w.shape()[2] / 2;
    x.conv2d(w, b.b(name)?, stride, pad)
}

/// Image `[1, 3, 64, 64]` to P2..P5.
pub fn head<'g>(b: &Bound<'g, '_>, image: Var<'g>) -> Result<Vec<Var<'g>>> {
    let h = conv(b, image.add_scalar(-0.5), "head.c1", 2)?.leaky_relu();
    let h = conv(b, h, "head.c2", 1)?.leaky_relu();
    let squash = |v: Var<'g>| v.mul_scalar(1.0 / FEATURE_BOUND).tanh().mul_scalar(FEATURE_BOUND);
    let p2 = squash(conv(b, h, "head.p2", 2)?);
    let p3 = squash(conv(b, p2.leaky_relu(), "head.p3", 2)?);
    let p4 = squash(conv(b, p3.leaky_relu(), "head.p4", 2)?);
    let p5 = squash(conv(b, p4.leaky_relu(), "head.p5", 2)?);
    Ok(vec![p2, p3, p4, p5])
}

/// Class logits `[1, 3, 1, 1]` and heatmap `[1, 3, 16, 16]` (logit, dy, dx).
pub fn tail<'g>(b: &Bound<'g, '_>, levels: &[Var<'g>]) -> Result<(Var<'g>, Var<'g>)> {
    let h = conv(b, levels[0].leaky_relu(), "tail.loc1", 1)?.leaky_relu();
    let heat = conv(b, h, "tail.loc2", 1)?;
    let c = conv(b, levels[1].leaky_relu(), "tail.cls1", 1)?.leaky_relu();
    let pooled = c.mean_hw()?.reshape(&[1, PYRAMID_CHANNELS, 1, 1])?;
    let logits = conv(b, pooled, "tail.cls2", 1)?;
    Ok((logits, heat))
}

fn decode_prediction(logits: &Tensor, heat: &Tensor) -> TaskPrediction {
    let s = LEVEL_SIZES[0];
    let cells = &heat.data()[..s * s];
    let k = crate::autodiff::argmax(cells);
    let (r, c) = (k / s, k % s);
    let off_y = heat.data()[s * s + k].clamp(0.0, 1.0);
    let off_x = heat.data()[2 * s * s + k].clamp(0.0, 1.0);
    let lim = IMAGE_SIZE as f64;
    TaskPrediction {
        class_logits: [logits.data()[0], logits.data()[1], logits.data()[2]],
        center: (
            ((r as f64 + off_y) * CELL).clamp(0.0, lim),
            ((c as f64 + off_x) * CELL).clamp(0.0, lim),
        ),
    }
}

/// Classification, heatmap and offset losses for one image.
fn sample_loss<'g>(b: &Bound<'g, '_>, img: &ToyImage) -> Result<(Var<'g>, Vec<f64>)> {
    let g = b.graph();
    let x = g.constant(img.pixels.clone());
    let levels = head(b, x)?;
    let (logits, heat) = tail(b, &levels)?;
    let l_cls = cross_entropy(logits.reshape(&[NUM_CLASSES])?, img.label.index())?;
    let s = LEVEL_SIZES[0];
    let (cy, cx) = (img.center.0 / CELL, img.center.1 / CELL);
    let (r, c) = ((cy.floor() as usize).min(s - 1), (cx.floor() as usize).min(s - 1));
    let cell = r * s + c;
    let l_heat = cross_entropy(heat.slice(1, 0, 1)?.reshape(&[s * s])?, cell)?;
    let mut target = vec![0.0; 2 * s * s];
    target[cell] = cy - r as f64;
    target[s * s + cell] = cx - c as f64;
    let mut onehot = vec![0.0; 2 * s * s];
    onehot[cell] = 1.0;
    onehot[s * s + cell] = 1.0;
    let off = heat.slice(1, 1, 2)?;
    let l_off = off
        .sub(g.constant(Tensor::new(off.shape().as_slice(), target)?))?
        .square()
        .mul(g.constant(Tensor::new(off.shape().as_slice(), onehot)?))?
        .sum();
    let total = l_cls.add(l_heat)?.add(l_off)?;
    Ok((total, vec![total.item(), l_cls.item(), l_heat.item(), l_off.item()]))
}

#[derive(Clone, Debug)]
pub struct TaskModel {
    pub params: ParamStore,
}

impl TaskModel {
    pub fn from_params(params: ParamStore) -> Result<Self> {
        params.check_arch(init_params(0).arch_hash(), "task network")?;
        Ok(TaskModel { params })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_params(ParamStore::load(path)?)
    }

    pub fn head(&self, image: &ToyImage) -> Result<FeaturePyramid> {
        self.head_pixels(&image.pixels)
    }

    pub fn head_pixels(&self, pixels: &Tensor) -> Result<FeaturePyramid> {
        let g = Graph::new();
        let b = Bound::frozen(&g, &self.params);
        let levels = head(&b, g.constant(pixels.clone()))?;
        FeaturePyramid::new(levels.iter().map(|v| (*v.value()).clone()).collect())
    }

    pub fn tail(&self, p: &FeaturePyramid) -> Result<TaskPrediction> {
        let g = Graph::new();
        let b = Bound::frozen(&g, &self.params);
        let levels: Vec<Var> = p.levels().iter().map(|l| g.constant(l.clone())).collect();
        let (logits, heat) = tail(&b, &levels)?;
        Ok(decode_prediction(&logits.value(), &heat.value()))
    }

    pub fn pyramids(&self, images: &[ToyImage], exec: Exec) -> Result<Vec<FeaturePyramid>> {
        exec.try_map(images, |img| self.head(img))
    }

    pub fn evaluate(&self, pyramids: &[FeaturePyramid], images: &[ToyImage], exec: Exec) -> Result<AccuracyReport> {
        let preds = exec.try_map(pyramids, |p| self.tail(p))?;
        let truths: Vec<_> = images.iter().map(truth_of).collect();
        task_accuracy(&preds, &truths)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TaskTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Trains head and tail end to end; returns the model and per-step losses.
pub fn train_task(
    images: &[ToyImage],
    cfg: TaskTrainConfig,
    exec: Exec,
) -> Result<(TaskModel, Vec<f64>)> {
    contract!(!images.is_empty(), "training the task network on no images");
    let mut params = init_params(cfg.seed);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut trainer = Trainer::new(cfg.lr, cfg.steps, 5.0);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let (l, grads) = mean_grads(exec, batch.len(), |i| {
            let g = Graph::new();
            let b = Bound::all(&g, &params);
            let (loss, parts) = sample_loss(&b, &images[batch[i]])?;
            Ok((parts, b.grads(&g.backward(loss)?)))
        })?;
        trainer.apply(&mut params, l[0], &grads)?;
        if step % 100 == 0 {
            log::info!(
                "task step {step}: loss {:.4} (class {:.4}, heat {:.4}, offset {:.4})",
                l[0],
                l[1],
                l[2],
                l[3]
            );
        }
        losses.push(l[0]);
    }
    params.round_to_f32();
    params.set_tag("arch", params.arch_hash());
    Ok((TaskModel::from_params(params)?, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::dataset::generate_dataset;

    fn pred(class: usize, center: (f64, f64)) -> TaskPrediction {
        let mut class_logits = [0.0; 3];
        class_logits[class] = 1.0;
        TaskPrediction {
            class_logits,
            center,
        }
    }

    #[test]
    fn accuracy_fixtures() {
        use ShapeClass::*;
        let truths = vec![
            (Circle, (10.0, 10.0)),
            (Square, (20.0, 20.0)),
            (Triangle, (30.0, 30.0)),
            (Circle, (40.0, 40.0)),
        ];
        let exact: Vec<_> = truths.iter().map(|(c, p)| pred(c.index(), *p)).collect();
        let r = task_accuracy(&exact, &truths).unwrap();
        assert_eq!((r.class_acc, r.loc_hit), (1.0, 1.0));
        let wrong: Vec<_> = truths
            .iter()
            .map(|(c, (y, x))| pred((c.index() + 1) % 3, (y + 5.0, *x)))
            .collect();
        let r = task_accuracy(&wrong, &truths).unwrap();
        assert_eq!((r.class_acc, r.loc_hit), (0.0, 0.0));
        // Classes right on items 0 and 2; centers within 4 px on 0, 1 and 3
        // (item 3 sits exactly on the 4 px boundary).
        let mixed = vec![
            pred(0, (10.0, 13.0)),
            pred(2, (22.0, 22.0)),
            pred(2, (30.0, 35.0)),
            pred(1, (40.0, 44.0)),
        ];
        let r = task_accuracy(&mixed, &truths).unwrap();
        assert_eq!((r.class_acc, r.loc_hit), (0.5, 0.75));
        assert!(task_accuracy(&mixed[..2], &truths).is_err());
    }

    #[test]
    fn untrained_model_is_a_state_error() {
        let m = TaskModel {
            params: ParamStore::new(),
        };
        let img = &generate_dataset(1, 0, Exec::Serial)[0];
        assert!(matches!(m.head(img), Err(crate::Error::State(_))));
    }

    #[test]
    fn head_produces_pyramid_shapes() {
        let m = TaskModel {
            params: init_params(0),
        };
        let img = &generate_dataset(1, 0, Exec::Serial)[0];
        let p = m.head(img).unwrap();
        let pred = m.tail(&p).unwrap();
        assert!(pred.center.0 >= 0.0 && pred.center.0 <= 64.0);
    }
}
