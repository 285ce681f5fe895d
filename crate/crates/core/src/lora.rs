//! Low-rank adapters for linear and convolution layers.
//!
//! An attached pair adds `(alpha / r) * B (A x_eff)` to the frozen layer output,
//! where `x_eff` is the layer input (linear) or its unfolded columns (conv).
//! `A` starts Gaussian with std 0.02 and `B` starts at zero, so a fresh adapter
//! leaves the layer output bit-for-bit unchanged.

use crate::error::{Error, Result};
use crate::model::ToyModel;
use crate::numkern::{Dense, Param, RngState, Tensor};

pub const INIT_STD: f64 = 0.02;

/// The two low-rank factors attached to one base layer.
#[derive(Clone, Debug)]
pub struct LoraPair {
    /// `[r x d_in_eff]`
    pub a: Param,
    /// `[d_out_eff x r]`
    pub b: Param,
    rank: usize,
    alpha: f32,
    enabled: bool,
    /// Pre-merge base weight while merged.
    merged_from: Option<Tensor>,
    base_trainable: (bool, bool),
}

impl LoraPair {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f32 {
        self.alpha
    }

    pub fn scale(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn is_merged(&self) -> bool {
        self.merged_from.is_some()
    }

    /// Contributes to the forward pass and receives gradients.
    pub fn is_active(&self) -> bool {
        self.enabled && self.merged_from.is_none()
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// `(alpha / r) * B A` in `f64`, row-major `[d_out x d_in]`.
    fn delta(&self) -> Vec<f64> {
        let r = self.rank;
        let d_in = self.a.value.len() / r;
        let d_out = self.b.value.len() / r;
        let s = self.alpha as f64 / r as f64;
        let (a, b) = (self.a.value.data(), self.b.value.data());
        let mut out = vec![0.0f64; d_out * d_in];
        for o in 0..d_out {
            for i in 0..d_in {
                let mut acc = 0.0f64;
                for k in 0..r {
                    acc += b[o * r + k] as f64 * a[k * d_in + i] as f64;
                }
                out[o * d_in + i] = s * acc;
            }
        }
        out
    }
}

/// Rank actually used on a layer: `r` capped by both layer dimensions.
pub fn effective_rank(r: usize, d_in_eff: usize, d_out_eff: usize) -> usize {
    r.min(d_in_eff).min(d_out_eff)
}

/// Closed-form adapter size `r * (d_in_eff + d_out_eff)`.
pub fn pair_param_count(r: usize, d_in_eff: usize, d_out_eff: usize) -> usize {
    r * (d_in_eff + d_out_eff)
}

impl Dense {
    /// Attaches a fresh pair: `A ~ N(0, 0.02^2)` drawn row-major from `rng`,
    /// `B = 0`, base weight and bias frozen.
    pub fn attach(&mut self, rank: usize, alpha: f32, rng: &mut RngState) -> Result<()> {
        self.check_attachable(rank, alpha)?;
        let a = Tensor::new(
            &[rank, self.d_in_eff()],
            rng.normal_vec(rank * self.d_in_eff(), INIT_STD),
        )?;
        let b = Tensor::zeros(&[self.d_out_eff(), rank]);
        self.install(a, b, rank, alpha);
        Ok(())
    }

    /// Attaches a pair with given factors, e.g. one loaded from a bundle.
    pub fn attach_with(&mut self, a: Tensor, b: Tensor, alpha: f32) -> Result<()> {
        let rank = a.rows();
        self.check_attachable(rank, alpha)?;
        if a.shape() != [rank, self.d_in_eff()] || b.shape() != [self.d_out_eff(), rank] {
            return Err(Error::shape(format!(
                "adapter factors A{:?} B{:?} do not fit layer [{} x {}]",
                a.shape(),
                b.shape(),
                self.d_out_eff(),
                self.d_in_eff()
            )));
        }
        self.install(a, b, rank, alpha);
        Ok(())
    }

    fn check_attachable(&self, rank: usize, alpha: f32) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::state("layer already has an adapter"));
        }
        let max = self.d_in_eff().min(self.d_out_eff());
        if rank == 0 || rank > max {
            return Err(Error::config(format!(
                "rank {rank} outside 1..={max} for layer [{} x {}]",
                self.d_out_eff(),
                self.d_in_eff()
            )));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::config(format!("alpha {alpha} must be positive")));
        }
        Ok(())
    }

    fn install(&mut self, a: Tensor, b: Tensor, rank: usize, alpha: f32) {
        let base_trainable = (self.weight.trainable, self.bias.trainable);
        self.weight.trainable = false;
        self.bias.trainable = false;
        self.weight.zero_grad();
        self.bias.zero_grad();
        self.lora = Some(LoraPair {
            a: Param::new(a),
            b: Param::new(b),
            rank,
            alpha,
            enabled: true,
            merged_from: None,
            base_trainable,
        });
    }

    /// Removes the pair and restores the base trainable flags.
    pub fn detach(&mut self) -> Result<LoraPair> {
        match &self.lora {
            None => return Err(Error::state("no adapter to detach")),
            Some(p) if p.is_merged() => {
                return Err(Error::state("cannot detach a merged adapter; unmerge first"))
            }
            Some(_) => {}
        }
        let pair = self.lora.take().expect("checked above");
        self.weight.trainable = pair.base_trainable.0;
        self.bias.trainable = pair.base_trainable.1;
        Ok(pair)
    }

    /// Folds `(alpha / r) * B A` into the base weight, computed in `f64`.
    pub fn merge(&mut self) -> Result<()> {
        let pair = self
            .lora
            .as_mut()
            .ok_or_else(|| Error::state("no adapter to merge"))?;
        if pair.is_merged() {
            return Err(Error::state("adapter already merged"));
        }
        let delta = pair.delta();
        pair.merged_from = Some(self.weight.value.clone());
        for (w, d) in self.weight.value.data_mut().iter_mut().zip(&delta) {
            *w = (*w as f64 + d) as f32;
        }
        Ok(())
    }

    /// Restores the exact pre-merge weight.
    pub fn unmerge(&mut self) -> Result<()> {
        let pair = self
            .lora
            .as_mut()
            .ok_or_else(|| Error::state("no adapter to unmerge"))?;
        // f32(f32(W + P) - P) is not W in general, so the snapshot is restored.
        let original = pair
            .merged_from
            .take()
            .ok_or_else(|| Error::state("adapter is not merged"))?;
        self.weight.value = original;
        Ok(())
    }

    pub fn set_adapter_enabled(&mut self, enabled: bool) -> Result<()> {
        let pair = self
            .lora
            .as_mut()
            .ok_or_else(|| Error::state("no adapter on layer"))?;
        pair.enabled = enabled;
        Ok(())
    }
}

/// Adapter factors that currently train: `A`/`B` of enabled, unmerged pairs,
/// in layer-path order.
pub fn trainable_params(model: &ToyModel) -> Vec<(String, &Param)> {
    let mut out = Vec::new();
    for (path, layer) in model.layers() {
        if let Some(pair) = layer.dense.lora().filter(|p| p.is_active()) {
            out.push((format!("{path}.lora_a"), &pair.a));
            out.push((format!("{path}.lora_b"), &pair.b));
        }
    }
    out
}

/// Total scalars in [`trainable_params`].
pub fn trainable_param_count(model: &ToyModel) -> usize {
    trainable_params(model).iter().map(|(_, p)| p.len()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkern::{Conv1d, Linear};

    fn lin(w: Vec<f32>, b: Vec<f32>, d_out: usize, d_in: usize) -> Linear {
        Linear::from_params(
            Param::new(Tensor::new(&[d_out, d_in], w).unwrap()),
            Param::new(Tensor::new(&[d_out], b).unwrap()),
        )
        .unwrap()
    }

    fn hand_layer(alpha: f32) -> Linear {
        let mut l = lin(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, 2);
        l.dense
            .attach_with(
                Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap(),
                Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap(),
                alpha,
            )
            .unwrap();
        l
    }

    #[test]
    fn hand_forward() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(hand_layer(1.0).forward(&x).unwrap().data(), &[4.0, 2.0]);
        assert_eq!(hand_layer(2.0).forward(&x).unwrap().data(), &[7.0, 2.0]);
    }

    #[test]
    fn disabled_is_base() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let mut l = hand_layer(1.0);
        l.dense.set_adapter_enabled(false).unwrap();
        assert_eq!(l.forward(&x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn attach_freezes_base_and_counts() {
        let mut rng = RngState::new(1);
        let mut l = Linear::new(32, 32, &mut rng, 0.2);
        l.dense.attach(4, 4.0, &mut rng).unwrap();
        assert!(!l.dense.weight.trainable && !l.dense.bias.trainable);
        assert_eq!(l.dense.lora().unwrap().param_count(), 256);
        assert_eq!(pair_param_count(4, 32, 32), 256);
        assert!(l.dense.lora().unwrap().b.value.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rank_bounds() {
        let mut rng = RngState::new(1);
        let mut l = Linear::new(3, 5, &mut rng, 0.2);
        assert!(matches!(l.dense.attach(4, 1.0, &mut rng), Err(Error::Config(_))));
        assert!(matches!(l.dense.attach(0, 1.0, &mut rng), Err(Error::Config(_))));
        let mut c = Conv1d::new(2, 4, 3, &mut rng, 0.2).unwrap();
        // d_in_eff = 6, d_out_eff = 4
        assert!(c.dense.attach(5, 1.0, &mut rng).is_err());
        c.dense.attach(4, 1.0, &mut rng).unwrap();
        assert_eq!(c.dense.lora().unwrap().param_count(), 4 * (6 + 4));
    }

    #[test]
    fn state_errors() {
        let mut rng = RngState::new(1);
        let mut l = Linear::new(4, 4, &mut rng, 0.2);
        assert!(matches!(l.dense.detach(), Err(Error::State(_))));
        assert!(matches!(l.dense.merge(), Err(Error::State(_))));
        l.dense.attach(2, 2.0, &mut rng).unwrap();
        assert!(matches!(l.dense.attach(2, 2.0, &mut rng), Err(Error::State(_))));
        assert!(matches!(l.dense.unmerge(), Err(Error::State(_))));
        l.dense.merge().unwrap();
        assert!(matches!(l.dense.merge(), Err(Error::State(_))));
        assert!(matches!(l.dense.detach(), Err(Error::State(_))));
        l.dense.unmerge().unwrap();
        l.dense.detach().unwrap();
        assert!(matches!(l.dense.detach(), Err(Error::State(_))));
    }

    #[test]
    fn merge_with_zero_b_keeps_weight() {
        let mut rng = RngState::new(8);
        let mut c = Conv1d::new(3, 3, 3, &mut rng, 0.3).unwrap();
        let w0 = c.dense.weight.value.clone();
        c.dense.attach(2, 2.0, &mut rng).unwrap();
        c.dense.merge().unwrap();
        assert!(c.dense.weight.value.bit_eq(&w0));
    }

    #[test]
    fn detach_restores_flags() {
        let mut rng = RngState::new(8);
        let mut l = Linear::new(4, 4, &mut rng, 0.2);
        l.dense.bias.trainable = false;
        l.dense.attach(2, 2.0, &mut rng).unwrap();
        l.dense.detach().unwrap();
        assert!(l.dense.weight.trainable);
        assert!(!l.dense.bias.trainable);
    }

    #[test]
    fn reattach_with_same_seed_same_a() {
        let mut rng = RngState::new(8);
        let mut l = Linear::new(6, 6, &mut rng, 0.2);
        l.dense.attach(3, 3.0, &mut RngState::new(77)).unwrap();
        let a1 = l.dense.detach().unwrap().a.value;
        l.dense.attach(3, 3.0, &mut RngState::new(77)).unwrap();
        assert!(l.dense.lora().unwrap().a.value.bit_eq(&a1));
    }
}
