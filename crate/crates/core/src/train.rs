//! Training loop: detection loss plus the weighted contrastive terms, AdamW,
//! running batch-norm statistics, CSV loss log and periodic checkpoints.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ccdnet_autograd::{Graph, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::wmp::update_running_stats;
use crate::cadd::{self, gcm, lcm, LossWeights};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::{OptimConfig, RunConfig};
use crate::data::{flip_augment, BBox, FlipAxis, Sample};
use crate::error::{Error, Result};
use crate::head::{assign_targets, detection_loss, level_maps, PyramidGeometry};
use crate::model::{self, ModelConfig};
use crate::params::{BnMode, Ctx, ParamStore};

pub const LOSS_CSV_HEADER: &str = "step,L_cls,L_loc,L_lcm,L_gcm,total";

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub cls: f64,
    pub loc: f64,
    pub lcm: f64,
    pub gcm: f64,
    pub total: f64,
}

impl LossRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.cls, self.loc, self.lcm, self.gcm, self.total
        )
    }
}

/// Decoupled-weight-decay Adam over named tensors.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: OptimConfig,
    t: i32,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Self {
        Self {
            cfg,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore<f32>,
        grads: &[(String, Tensor<f32>)],
    ) -> Result<()> {
        self.t += 1;
        let c = &self.cfg;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let bc1 = 1.0 - b1.powi(self.t);
        let bc2 = 1.0 - b2.powi(self.t);
        let (lr, wd, eps) = (c.lr as f32, c.weight_decay as f32, c.eps as f32);
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let upd = (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                *pi -= lr * (upd + wd * *pi);
            }
        }
        Ok(())
    }
}

/// Stacks images into `(N, 1, H, W)`; all images must share a size.
pub fn batch_tensor<T: Scalar>(samples: &[&Sample]) -> Result<Tensor<T>> {
    let (w, h) = (samples[0].image.width, samples[0].image.height);
    let mut data = Vec::with_capacity(samples.len() * w * h);
    for s in samples {
        if (s.image.width, s.image.height) != (w, h) {
            return Err(Error::Data(format!(
                "{}: image size differs within a batch",
                s.id
            )));
        }
        data.extend(s.image.data.iter().map(|&v| T::from_f32(v).unwrap()));
    }
    Ok(Tensor::new(&[samples.len(), 1, h, w], data))
}

/// Loss values and gradients of one batch; leaves `store` untouched.
pub struct StepResult {
    pub row: LossRow,
    pub grads: Vec<(String, Tensor<f32>)>,
    pub bn: Vec<(String, ccdnet_autograd::BatchStats<f32>)>,
}

pub fn compute_step(
    cfg: &ModelConfig,
    w: &LossWeights,
    store: &ParamStore<f32>,
    batch: &[&Sample],
) -> Result<StepResult> {
    let x = batch_tensor::<f32>(batch)?;
    let (_, _, h, wd) = x.dims4();
    let gts: Vec<Vec<BBox>> = batch.iter().map(|s| s.boxes.clone()).collect();
    let g = Graph::new();
    let ctx = Ctx::new(&g, store, BnMode::Batch);
    let out = model::forward(&ctx, cfg, g.constant(x))?;
    let strides = cfg.strides();
    let targets = assign_targets(&gts, &PyramidGeometry::new(h, wd, strides))?;
    let (l_cls, l_loc) = detection_loss(&out.head, &targets)?;
    let l_lcm = lcm::lcm_loss_extended(&ctx, &out.backbone, &gts, strides, w)?;
    let selections = gcm::mine_selections(&level_maps(&out.head), &gts, wd, h, w);
    let l_gcm = gcm::gcm_loss_extended(
        &ctx,
        &out.backbone,
        strides,
        &selections,
        w,
        cfg.cadd.roi_grid,
    )?;
    let vals = [l_cls.item(), l_loc.item(), l_lcm.item(), l_gcm.item()].map(f64::from);
    let total_val = cadd::total_loss(vals[0], vals[1], vals[2], vals[3], w)?;
    let mut total = l_cls.add(l_loc);
    // zero-weight terms stay out of the graph
    if w.alpha > 0.0 {
        total = total.add(l_lcm.scale(w.alpha as f32));
    }
    if w.beta > 0.0 {
        total = total.add(l_gcm.scale(w.beta as f32));
    }
    let grads_all = g.backward(total);
    let grads = ctx
        .bound_trainable()
        .into_iter()
        .filter_map(|(name, v)| grads_all.get(v).map(|t| (name, t.clone())))
        .collect();
    Ok(StepResult {
        row: LossRow {
            step: 0,
            cls: vals[0],
            loc: vals[1],
            lcm: vals[2],
            gcm: vals[3],
            total: total_val,
        },
        grads,
        bn: ctx.take_bn_updates(),
    })
}

pub struct TrainOutcome {
    pub store: ParamStore<f32>,
    pub rows: Vec<LossRow>,
    /// Mean total loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub final_checkpoint: Option<PathBuf>,
}

fn augment(s: &Sample, rng: &mut ChaCha8Rng) -> Sample {
    let mut out = s.clone();
    for axis in [FlipAxis::Horizontal, FlipAxis::Vertical] {
        if rng.random_bool(0.5) {
            let (img, boxes) = flip_augment(&out.image, &out.boxes, axis);
            out.image = img;
            out.boxes = boxes;
        }
    }
    out
}

/// Trains from a fresh initialisation. With an `out_dir`, writes
/// `loss.csv`, periodic `epoch_XXX.ccdn` and `model.ccdn`; on a non-finite
/// loss it writes `last_good.ccdn` with the parameters before the failing
/// step and returns the error.
pub fn train(cfg: &RunConfig, data: &[Sample], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut store = model::init_params::<f32>(&cfg.model, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let mut opt = AdamW::new(cfg.optim.clone());
    let mut log: Option<std::fs::File> = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            let mut f = std::fs::File::create(d.join("loss.csv"))?;
            writeln!(f, "{LOSS_CSV_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let save = |store: &ParamStore<f32>,
                epoch: usize,
                step: usize,
                name: &str|
     -> Result<Option<PathBuf>> {
        let Some(d) = out_dir else { return Ok(None) };
        let meta = CheckpointMeta {
            epoch,
            step,
            seed: cfg.seed,
        };
        let p = d.join(name);
        Checkpoint::new(cfg.model.clone(), meta, store.clone()).save(&p)?;
        Ok(Some(p))
    };
    let mut rows = Vec::new();
    let mut epoch_loss = Vec::new();
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let owned: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    if cfg.flip {
                        augment(&data[i], &mut rng)
                    } else {
                        data[i].clone()
                    }
                })
                .collect();
            let refs: Vec<&Sample> = owned.iter().collect();
            let res = match compute_step(&cfg.model, &cfg.loss, &store, &refs) {
                Ok(r) => r,
                Err(e @ Error::NonFinite(_)) => {
                    save(&store, epoch, step, "last_good.ccdn")?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if res.grads.iter().any(|(_, g)| !g.all_finite()) {
                save(&store, epoch, step, "last_good.ccdn")?;
                return Err(Error::NonFinite(format!("gradient at step {step}")));
            }
            opt.step(&mut store, &res.grads)?;
            for (prefix, stats) in &res.bn {
                update_running_stats(&mut store, prefix, stats)?;
            }
            let row = LossRow { step, ..res.row };
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", row.csv())?;
            }
            log::debug!("epoch {epoch} {}", row.csv());
            sum += row.total;
            batches += 1;
            rows.push(row);
            step += 1;
        }
        let mean = sum / batches.max(1) as f64;
        log::info!("epoch {} mean loss {mean:.5}", epoch + 1);
        epoch_loss.push(mean);
        if cfg.checkpoint_every > 0
            && (epoch + 1) % cfg.checkpoint_every == 0
            && epoch + 1 < cfg.epochs
        {
            save(
                &store,
                epoch + 1,
                step,
                &format!("epoch_{:03}.ccdn", epoch + 1),
            )?;
        }
    }
    let final_checkpoint = save(&store, cfg.epochs, step, "model.ccdn")?;
    Ok(TrainOutcome {
        store,
        rows,
        epoch_loss,
        final_checkpoint,
    })
}
