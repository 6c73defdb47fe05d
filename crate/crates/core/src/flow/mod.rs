//! Flow-matching training and the straight-path inference stepper.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{AdjacencyPlan, BlendConfig, ControlConfig, GeneProjection, TokenMode};
use crate::denoiser::{rbf_centers_from, Conditioning, Denoiser, DenoiserConfig, DenoiserShape, SectionContext};
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Checkpoint, Graph, Tensor2, Var};
use crate::priors::{sample_start, StartPrior};
use crate::spatial_model::{write_matrix, CandidateSource, SlideStack};

/// `(1−t)·x0 + t·x1`, exact at both endpoints.
pub fn interpolate(x0: &Tensor2, x1: &Tensor2, t: f64) -> Result<Tensor2> {
    if !x0.same_shape(x1) {
        return Err(Error::shape("interpolate", format!("{:?} vs {:?}", x0.shape(), x1.shape())));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Validation(format!("t = {t} outside [0,1]")));
    }
    if t == 0.0 {
        return Ok(x0.clone());
    }
    if t == 1.0 {
        return Ok(x1.clone());
    }
    x0.zip_map(x1, |a, b| (1.0 - t) * a + t * b)
}

/// Mean squared error over spots and genes.
pub fn fm_loss(g: &mut Graph, y_hat: Var, y: &Tensor2) -> Result<Var> {
    let yv = g.constant(y.clone())?;
    let d = g.sub(y_hat, yv)?;
    let d2 = g.mul(d, d)?;
    g.mean(d2)
}

/// Monotone inference grid `0 = t_0 < … < t_S = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    knots: Vec<f64>,
}

impl TimeGrid {
    pub fn new(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 || knots[0] != 0.0 || *knots.last().unwrap() != 1.0 {
            return Err(Error::Validation(format!("time grid must run from 0 to 1, got {knots:?}")));
        }
        if knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Validation(format!("time grid is not strictly increasing: {knots:?}")));
        }
        Ok(Self { knots })
    }

    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Validation("time grid needs at least one step".into()));
        }
        Self::new((0..=steps).map(|s| s as f64 / steps as f64).collect())
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn steps(&self) -> Vec<f64> {
        self.knots.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// The straight-path recursion `x ← (1−η_s)·x + η_s·ŷ^(s)` over a set of
/// sections. `predict(t_s, states)` returns the endpoint estimates for every
/// section given the states of round `s`; all sections advance together.
pub fn run_recursion<F>(x0: BTreeMap<usize, Tensor2>, grid: &TimeGrid, mut predict: F) -> Result<BTreeMap<usize, Tensor2>>
where
    F: FnMut(f64, &BTreeMap<usize, Tensor2>) -> Result<BTreeMap<usize, Tensor2>>,
{
    let mut x = x0;
    for (s, eta) in grid.steps().into_iter().enumerate() {
        let t = grid.knots()[s];
        let y = predict(t, &x)?;
        for (z, xs) in x.iter_mut() {
            let yz = y
                .get(z)
                .ok_or_else(|| Error::Contract(format!("no prediction for section {z}")))?;
            *xs = xs.zip_map(yz, |a, b| (1.0 - eta) * a + eta * b)?;
        }
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub denoiser: DenoiserConfig,
    /// `None` removes the control network entirely.
    pub control: Option<ControlConfig>,
    /// When false the adjacent token is held at zero (map pathway only).
    pub adjacent: bool,
    pub blend: BlendConfig,
    pub proj_rank: usize,
    pub k_adjacent: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig::default(),
            control: Some(ControlConfig::default()),
            adjacent: true,
            blend: BlendConfig::default(),
            proj_rank: 32,
            k_adjacent: 8,
        }
    }
}

/// Backbone plus the fixed conditioning data it was built with.
#[derive(Clone, Debug)]
pub struct FlowModel {
    pub denoiser: Denoiser,
    pub proj: GeneProjection,
    pub cfg: ModelConfig,
}

/// Static per-section inputs: backbone context and candidate weights.
#[derive(Clone, Debug)]
pub struct SectionPlan {
    pub z: usize,
    pub ctx: SectionContext,
    pub adjacency: Option<AdjacencyPlan>,
}

impl FlowModel {
    /// Gene panel and edge-distance bins come from the labeled sections
    /// `train_zs` of `stack`.
    pub fn new(cfg: &ModelConfig, stack: &SlideStack, train_zs: &[usize], seed: u64) -> Result<Self> {
        cfg.blend.validate()?;
        if cfg.proj_rank == 0 || cfg.k_adjacent == 0 {
            return Err(Error::Validation("proj.rank and k_adjacent must be >= 1".into()));
        }
        let proj = GeneProjection::top_variance(stack, train_zs, cfg.proj_rank)?;
        let shape = DenoiserShape {
            genes: stack.genes(),
            emb_dim: stack.emb_dim(),
            frame: stack.frame(),
            rbf_centers: rbf_centers_from(stack, train_zs, cfg.denoiser.k, cfg.denoiser.rbf_bins)?,
            control_rank: proj.rank(),
        };
        let denoiser = Denoiser::new(&cfg.denoiser, cfg.control.as_ref(), shape, seed)?;
        Ok(Self {
            denoiser,
            proj,
            cfg: cfg.clone(),
        })
    }

    pub fn plan(&self, stack: &SlideStack, z: usize, source: CandidateSource) -> Result<SectionPlan> {
        let sec = stack
            .section(z)
            .ok_or_else(|| Error::Validation(format!("no section z={z}")))?;
        let ctx = self.denoiser.context(sec)?;
        let adjacency = if self.denoiser.control.is_some() && self.cfg.adjacent {
            Some(AdjacencyPlan::new(stack, z, self.cfg.k_adjacent, source, &self.cfg.blend)?)
        } else {
            None
        };
        Ok(SectionPlan { z, ctx, adjacency })
    }

    /// Control inputs for one section at state `x_t`.
    pub fn conditioning<'a>(
        &self,
        plan: &SectionPlan,
        x_t: &Tensor2,
        mode: TokenMode,
        stack: &'a SlideStack,
        states: &dyn Fn(usize) -> Option<&'a Tensor2>,
    ) -> Result<Option<Conditioning>> {
        let Some(map) = &plan.ctx.map else { return Ok(None) };
        let adjacent = match &plan.adjacency {
            Some(a) => a.tokens(&self.proj, mode, stack, states)?,
            None => Tensor2::zeros(plan.ctx.n, self.proj.rank()),
        };
        let gathered = map.gather(&self.proj.apply(x_t)?)?;
        Ok(Some(Conditioning { adjacent, gathered }))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.denoiser.to_checkpoint();
        let g: Vec<f64> = self.proj.genes.iter().map(|&g| g as f64).collect();
        ck.push("flow/proj_genes", Tensor2::from_vec(1, g.len(), g).expect("row"));
        ck.push(
            "flow/meta",
            Tensor2::from_vec(
                1,
                5,
                vec![
                    self.proj.total_genes as f64,
                    self.cfg.adjacent as u8 as f64,
                    self.cfg.k_adjacent as f64,
                    self.cfg.blend.tau,
                    self.cfg.blend.beta,
                ],
            )
            .expect("row"),
        );
        ck
    }

    pub fn from_checkpoint(cfg: &ModelConfig, ck: &Checkpoint) -> Result<Self> {
        let denoiser = Denoiser::from_checkpoint(&cfg.denoiser, cfg.control.as_ref(), ck)?;
        let meta = ck
            .get("flow/meta")
            .ok_or_else(|| Error::format("checkpoint", "lacks flow/meta"))?
            .data()
            .to_vec();
        let expect = [
            meta.first().copied().unwrap_or(-1.0),
            cfg.adjacent as u8 as f64,
            cfg.k_adjacent as f64,
            cfg.blend.tau,
            cfg.blend.beta,
        ];
        if meta != expect {
            return Err(Error::Validation("conditioning config does not match checkpoint".into()));
        }
        let genes = ck
            .get("flow/proj_genes")
            .ok_or_else(|| Error::format("checkpoint", "lacks flow/proj_genes"))?
            .data()
            .iter()
            .map(|&g| g as usize)
            .collect();
        Ok(Self {
            denoiser,
            proj: GeneProjection {
                genes,
                total_genes: meta[0] as usize,
                rule: "top-variance".into(),
            },
            cfg: cfg.clone(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Slides per optimizer step.
    pub batch: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch: 2,
            learning_rate: 5e-4,
            clip_norm: 1.0,
            patience: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub log: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub kept_epoch: usize,
    pub stopped_early: bool,
}

impl TrainReport {
    /// One JSON object per line.
    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.log {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Fixed probe times for validation loss, so epochs are comparable.
const VAL_TIMES: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

/// Trains the backbone on labeled sections `train_zs` of `stack`, using
/// `val_zs` for early stopping. The learned prior, when used, must already
/// be frozen.
pub fn train_fm(
    model: &mut FlowModel,
    stack: &SlideStack,
    train_zs: &[usize],
    val_zs: &[usize],
    prior: &StartPrior<'_>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    if let StartPrior::Learned(net) = prior {
        if !net.is_frozen() {
            return Err(Error::Contract("learned prior must be frozen before flow training".into()));
        }
    }
    if train_zs.is_empty() || cfg.batch == 0 {
        return Err(Error::Validation("flow training needs sections and batch >= 1".into()));
    }
    let plans = |zs: &[usize]| -> Result<Vec<(SectionPlan, &Tensor2)>> {
        zs.iter()
            .map(|&z| {
                let y = stack
                    .section(z)
                    .and_then(|s| s.expression.as_ref())
                    .ok_or_else(|| Error::Validation(format!("training section z={z} is unlabeled")))?;
                Ok((model.plan(stack, z, CandidateSource::LabeledExpression)?, y))
            })
            .collect()
    };
    let train = plans(train_zs)?;
    let val = plans(val_zs)?;
    let none = |_: usize| None;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        clip_norm: cfg.clip_norm,
        ..AdamConfig::default()
    });
    let mut report = TrainReport::default();
    let mut best: Option<(f64, usize, Denoiser)> = None;
    let started = Instant::now();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let mut g = Graph::training(rng.random());
            let mut total: Option<Var> = None;
            for &i in chunk {
                let (plan, y) = &train[i];
                let t: f64 = rng.random();
                let x0 = sample_start(prior, stack, plan.z, &mut rng)?;
                let xt = interpolate(&x0, y, t)?;
                let cond = model.conditioning(plan, &xt, TokenMode::Train, stack, &none)?;
                let yh = model.denoiser.forward(&mut g, &model.denoiser.store, &plan.ctx, &xt, t, cond.as_ref())?;
                let l = fm_loss(&mut g, yh, y)?;
                loss_sum += g.scalar(l);
                total = Some(match total {
                    Some(a) => g.add(a, l)?,
                    None => l,
                });
            }
            let loss = g.scale(total.expect("nonempty chunk"), 1.0 / chunk.len() as f64)?;
            g.backward(loss)?;
            g.accumulate_param_grads(&mut model.denoiser.store);
            drop(g);
            adam.step(&mut model.denoiser.store)?;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(validation_loss(model, stack, &val, prior, seed)?)
        };
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {train_loss:.5} val {} ({:.1}s)",
            val_loss.map_or("-".into(), |v| format!("{v:.5}")),
            rec.wall_secs
        );
        report.log.push(rec);
        report.kept_epoch = epoch;
        if let Some(v) = val_loss {
            match &best {
                Some((b, _, _)) if v >= *b => {}
                _ => best = Some((v, epoch, model.denoiser.clone())),
            }
            let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
            if cfg.patience > 0 && epoch - best_epoch >= cfg.patience {
                let (_, e, d) = best.take().expect("best tracked");
                model.denoiser = d;
                report.kept_epoch = e;
                report.stopped_early = true;
                break;
            }
        }
    }
    Ok(report)
}

fn validation_loss(
    model: &FlowModel,
    stack: &SlideStack,
    val: &[(SectionPlan, &Tensor2)],
    prior: &StartPrior<'_>,
    seed: u64,
) -> Result<f64> {
    let none = |_: usize| None;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a11);
    let mut sum = 0.0;
    for (plan, y) in val {
        for &t in &VAL_TIMES {
            let x0 = sample_start(prior, stack, plan.z, &mut rng)?;
            let xt = interpolate(&x0, y, t)?;
            let cond = model.conditioning(plan, &xt, TokenMode::Train, stack, &none)?;
            let yh = model.denoiser.predict(&plan.ctx, &xt, t, cond.as_ref())?;
            sum += yh.zip_map(y, |a, b| (a - b) * (a - b))?.sum() / y.len() as f64;
        }
    }
    Ok(sum / (val.len() * VAL_TIMES.len()) as f64)
}

/// Imputes sections `targets` of `stack`. Adjacent context comes from the
/// evolving states of neighboring targets and from stored expressions of
/// labeled non-target sections.
pub fn infer_stack(
    model: &FlowModel,
    stack: &SlideStack,
    targets: &[usize],
    prior: &StartPrior<'_>,
    grid: &TimeGrid,
    seed: u64,
) -> Result<BTreeMap<usize, Tensor2>> {
    let mut plans = BTreeMap::new();
    let mut x0 = BTreeMap::new();
    for &z in targets {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(z as u64);
        x0.insert(z, sample_start(prior, stack, z, &mut rng)?);
        plans.insert(z, model.plan(stack, z, CandidateSource::Any)?);
    }
    run_recursion(x0, grid, |t, states| {
        let lookup = |z: usize| -> Option<&Tensor2> {
            states
                .get(&z)
                .or_else(|| stack.section(z).and_then(|s| s.expression.as_ref()))
        };
        let mut out = BTreeMap::new();
        for (z, x) in states {
            let plan = &plans[z];
            let cond = model.conditioning(plan, x, TokenMode::Infer, stack, &lookup)?;
            out.insert(*z, model.denoiser.predict(&plan.ctx, x, t, cond.as_ref())?);
        }
        Ok(out)
    })
}

/// Writes `pred_z<k>.bin` for every section.
pub fn write_predictions(dir: &Path, preds: &BTreeMap<usize, Tensor2>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (z, p) in preds {
        write_matrix(&dir.join(format!("pred_z{z}.bin")), p)?;
    }
    Ok(())
}
