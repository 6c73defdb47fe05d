//! Learned per-spot ZINB prior: a two-layer perceptron from
//! `embedding ⊕ positional features` to `(μ, θ, π)` for every gene.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::zinb::ZinbParams;
use crate::error::{Error, Result};
use crate::numerics::nn::Mlp;
use crate::numerics::{Adam, AdamConfig, Checkpoint, Graph, ParamStore, Tensor2, Var};
use crate::spatial_model::{positional_matrix, Frame, Section, SlideStack};

/// Lower bound added after the softplus links so `μ, θ` stay strictly positive.
const LINK_FLOOR: f64 = 1e-6;
pub const PRIOR_PREFIX: &str = "prior/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub hidden: usize,
    pub pos_dim: usize,
    pub epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    /// Fraction of training spots held out when no validation section exists.
    pub holdout_fraction: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            pos_dim: 16,
            epochs: 150,
            patience: 15,
            learning_rate: 1e-2,
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PriorNet {
    pub store: ParamStore,
    mlp: Mlp,
    genes: usize,
    emb_dim: usize,
    pos_dim: usize,
    hidden: usize,
    frame: Frame,
}

fn inv_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl PriorNet {
    pub fn new(genes: usize, emb_dim: usize, cfg: &PriorConfig, frame: Frame, seed: u64) -> Result<Self> {
        if cfg.pos_dim % 4 != 0 || genes == 0 || cfg.hidden == 0 {
            return Err(Error::Validation("prior net needs genes, hidden > 0 and pos_dim % 4 == 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "zinb", [emb_dim + cfg.pos_dim, cfg.hidden, 3 * genes], &mut rng);
        Ok(Self {
            store,
            mlp,
            genes,
            emb_dim,
            pos_dim: cfg.pos_dim,
            hidden: cfg.hidden,
            frame,
        })
    }

    pub fn genes(&self) -> usize {
        self.genes
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn is_frozen(&self) -> bool {
        self.store.all_frozen()
    }

    pub fn freeze(&mut self) {
        self.store.freeze_all();
    }

    /// Sets output biases from per-gene training statistics so optimization
    /// starts near the marginal fit.
    fn init_output_bias(&mut self, counts: &Tensor2) -> Result<()> {
        let n = counts.rows().max(1) as f64;
        let g = self.genes;
        let bias = self
            .mlp
            .second
            .bias
            .ok_or_else(|| Error::Misuse("prior head has no bias".into()))?;
        let b = self.store.value_mut(bias)?;
        for j in 0..g {
            let col = counts.column(j);
            let mean = (col.iter().sum::<f64>() / n).max(1e-3);
            let zeros = col.iter().filter(|&&c| c == 0.0).count() as f64 / n;
            b.set(0, j, inv_softplus(mean));
            b.set(0, g + j, inv_softplus(5.0));
            b.set(0, 2 * g + j, ((zeros * 0.5).clamp(1e-3, 0.5) / (1.0 - (zeros * 0.5).clamp(1e-3, 0.5))).ln());
        }
        Ok(())
    }

    pub fn inputs(&self, section: &Section) -> Result<Tensor2> {
        if section.embedding.cols() != self.emb_dim {
            return Err(Error::shape(
                "prior inputs",
                format!("embedding has {} dims, prior expects {}", section.embedding.cols(), self.emb_dim),
            ));
        }
        let (pos, _) = positional_matrix(section, &self.frame, self.pos_dim)?;
        Tensor2::hstack(&[&section.embedding, &pos])
    }

    /// `(μ, θ, π)` nodes for the rows of `inputs`.
    pub fn forward(&self, g: &mut Graph, inputs: Var) -> Result<(Var, Var, Var)> {
        let raw = self.mlp.forward(g, &self.store, inputs)?;
        let gn = self.genes;
        let mu = g.slice_cols(raw, 0, gn)?;
        let mu = g.softplus(mu)?;
        let mu = g.shift(mu, LINK_FLOOR)?;
        let th = g.slice_cols(raw, gn, 2 * gn)?;
        let th = g.softplus(th)?;
        let th = g.shift(th, LINK_FLOOR)?;
        let pi = g.slice_cols(raw, 2 * gn, 3 * gn)?;
        let pi = g.sigmoid(pi)?;
        Ok((mu, th, pi))
    }

    /// Evaluation-mode parameters for every spot of a section.
    pub fn params(&self, section: &Section) -> Result<ZinbParams> {
        let mut g = Graph::new();
        let x = g.constant(self.inputs(section)?)?;
        let (mu, th, pi) = self.forward(&mut g, x)?;
        let pi_v = g.value(pi).map(|p| p.clamp(1e-12, 1.0 - 1e-12));
        ZinbParams::new(g.value(mu).clone(), g.value(th).clone(), pi_v)
    }

    /// Total NLL of `counts` under the prior for `inputs`.
    fn nll(&self, g: &mut Graph, inputs: &Tensor2, counts: &Rc<Tensor2>) -> Result<Var> {
        let x = g.constant(inputs.clone())?;
        let (mu, th, pi) = self.forward(g, x)?;
        g.zinb_nll(mu, th, pi, counts.clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push(
            format!("{PRIOR_PREFIX}meta"),
            Tensor2::from_vec(
                1,
                8,
                vec![
                    self.genes as f64,
                    self.emb_dim as f64,
                    self.pos_dim as f64,
                    self.hidden as f64,
                    self.frame.min[0],
                    self.frame.min[1],
                    self.frame.max[0],
                    self.frame.max[1],
                ],
            )
            .expect("fixed shape"),
        );
        ck.push_scalar(format!("{PRIOR_PREFIX}frozen"), if self.is_frozen() { 1.0 } else { 0.0 });
        ck.push_params(PRIOR_PREFIX, &self.store);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = ck
            .get(&format!("{PRIOR_PREFIX}meta"))
            .filter(|m| m.len() == 8)
            .ok_or_else(|| Error::Validation("checkpoint has no prior".into()))?;
        let m = meta.data();
        let cfg = PriorConfig {
            hidden: m[3] as usize,
            pos_dim: m[2] as usize,
            ..PriorConfig::default()
        };
        let frame = Frame {
            min: [m[4], m[5]],
            max: [m[6], m[7]],
        };
        let mut net = PriorNet::new(m[0] as usize, m[1] as usize, &cfg, frame, 0)?;
        ck.load_params(PRIOR_PREFIX, &mut net.store)?;
        if ck.scalar(&format!("{PRIOR_PREFIX}frozen")) == Some(1.0) {
            net.freeze();
        }
        Ok(net)
    }
}

/// Per-epoch mean NLL per matrix entry; index 0 is before any update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub train_nll: Vec<f64>,
    pub val_nll: Vec<f64>,
    pub best_epoch: usize,
}

struct Batch {
    inputs: Tensor2,
    counts: Rc<Tensor2>,
}

impl Batch {
    fn entries(&self) -> f64 {
        self.counts.len() as f64
    }
}

fn section_batch(net: &PriorNet, s: &Section) -> Result<Batch> {
    let counts = s
        .count_matrix()
        .ok_or_else(|| Error::Misuse(format!("section z={} has no expression", s.z)))?;
    Ok(Batch {
        inputs: net.inputs(s)?,
        counts: Rc::new(counts),
    })
}

fn mean_nll(net: &PriorNet, batches: &[Batch]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0.0;
    for b in batches {
        let mut g = Graph::new();
        let v = net.nll(&mut g, &b.inputs, &b.counts)?;
        total += g.scalar(v);
        n += b.entries();
    }
    Ok(total / n)
}

/// Fits the prior on the training sections by Adam on the mean ZINB NLL,
/// keeps the parameters with the best validation NLL, and freezes the net.
///
/// Validation uses `val_zs` when given; otherwise a seeded hold-out of
/// training spots.
pub fn pretrain_prior(
    stack: &SlideStack,
    train_zs: &[usize],
    val_zs: &[usize],
    net: &mut PriorNet,
    cfg: &PriorConfig,
    seed: u64,
) -> Result<PretrainReport> {
    let labeled = |zs: &[usize]| -> Vec<&Section> {
        zs.iter()
            .filter_map(|&z| stack.section(z))
            .filter(|s| s.is_labeled())
            .collect()
    };
    let train_secs = labeled(train_zs);
    if train_secs.is_empty() {
        return Err(Error::Misuse("prior pretraining needs a labeled training section".into()));
    }
    if net.is_frozen() {
        return Err(Error::Contract("prior is already frozen".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let val_secs = labeled(val_zs);
    if val_secs.is_empty() {
        for s in &train_secs {
            let b = section_batch(net, s)?;
            let mut idx: Vec<usize> = (0..s.len()).collect();
            idx.shuffle(&mut rng);
            let hold = ((s.len() as f64) * cfg.holdout_fraction).round() as usize;
            let hold = hold.clamp(1, s.len().saturating_sub(1).max(1));
            let (h, t) = idx.split_at(hold.min(idx.len()));
            let (mut h, mut t) = (h.to_vec(), t.to_vec());
            h.sort_unstable();
            t.sort_unstable();
            if t.is_empty() {
                return Err(Error::Misuse("too few spots to hold out a validation subset".into()));
            }
            train.push(Batch {
                inputs: b.inputs.select_rows(&t),
                counts: Rc::new(b.counts.select_rows(&t)),
            });
            val.push(Batch {
                inputs: b.inputs.select_rows(&h),
                counts: Rc::new(b.counts.select_rows(&h)),
            });
        }
    } else {
        for s in &train_secs {
            train.push(section_batch(net, s)?);
        }
        for s in &val_secs {
            val.push(section_batch(net, s)?);
        }
    }

    let all_counts: Vec<&Tensor2> = train.iter().map(|b| b.counts.as_ref()).collect();
    net.init_output_bias(&Tensor2::vstack(&all_counts)?)?;

    let mut adam = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let mut report = PretrainReport {
        train_nll: vec![mean_nll(net, &train)?],
        val_nll: vec![mean_nll(net, &val)?],
        best_epoch: 0,
    };
    let mut best = (report.val_nll[0], net.store.clone());
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for &bi in &order {
            let b = &train[bi];
            let mut g = Graph::new();
            let total = net.nll(&mut g, &b.inputs, &b.counts)?;
            let loss = g.scale(total, 1.0 / b.entries())?;
            g.backward(loss)?;
            g.accumulate_param_grads(&mut net.store);
            drop(g);
            adam.step(&mut net.store)?;
        }
        report.train_nll.push(mean_nll(net, &train)?);
        let v = mean_nll(net, &val)?;
        report.val_nll.push(v);
        log::debug!("prior epoch {epoch}: train {:.5} val {v:.5}", report.train_nll[epoch]);
        if v < best.0 {
            best = (v, net.store.clone());
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                break;
            }
        }
    }
    net.store = best.1;
    net.freeze();
    Ok(report)
}
