//! Optimizers over tiled parameters: SGD with momentum keeps one moment
//! tensor per parameter, Adam and AdamW keep two, all tiled exactly like
//! the parameters they update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::runtime::{AccessMode, Fill, Runtime};
use crate::tensor::{TensorGradPair, TiledTensor};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum {
        lr: f32,
        momentum: f32,
    },
    Adam {
        lr: f32,
        beta1: f32,
        beta2: f32,
        eps: f32,
    },
    AdamW {
        lr: f32,
        beta1: f32,
        beta2: f32,
        eps: f32,
        weight_decay: f32,
    },
}

enum Moments {
    Sgd { m: TiledTensor },
    Adam { m: TiledTensor, v: TiledTensor },
}

struct Slot {
    value: TiledTensor,
    grad: TiledTensor,
    moments: Moments,
}

/// Optimizer state bound to a fixed parameter list.
pub struct OptimizerState {
    kind: OptimizerKind,
    slots: Vec<Slot>,
    step_count: u64,
}

impl OptimizerState {
    pub fn new(rt: &mut Runtime, kind: OptimizerKind, params: &[&TensorGradPair]) -> Result<Self> {
        let mut slots = Vec::with_capacity(params.len());
        for p in params {
            if p.value.shape() != p.grad.shape() || p.value.tile_shape() != p.grad.tile_shape() {
                return Err(Error::ShapeMismatch(
                    "parameter and gradient tilings differ".into(),
                ));
            }
            let zeros =
                |rt: &mut Runtime| TiledTensor::new(rt, p.value.shape(), p.value.tile_shape(), Fill::Zeros);
            let moments = match kind {
                OptimizerKind::SgdMomentum { .. } => Moments::Sgd { m: zeros(rt)? },
                OptimizerKind::Adam { .. } | OptimizerKind::AdamW { .. } => Moments::Adam {
                    m: zeros(rt)?,
                    v: zeros(rt)?,
                },
            };
            slots.push(Slot {
                value: p.value.clone(),
                grad: p.grad.clone(),
                moments,
            });
        }
        Ok(OptimizerState {
            kind,
            slots,
            step_count: 0,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps_taken(&self) -> u64 {
        self.step_count
    }

    /// Total bytes of parameter values under management.
    pub fn params_bytes(&self) -> u64 {
        self.slots.iter().map(|s| s.value.nbytes()).sum()
    }

    /// Total bytes of optimizer moment state.
    pub fn state_bytes(&self) -> u64 {
        self.slots
            .iter()
            .map(|s| match &s.moments {
                Moments::Sgd { m } => m.nbytes(),
                Moments::Adam { m, v } => m.nbytes() + v.nbytes(),
            })
            .sum()
    }

    /// Applies one update step. Pending gradient reductions are
    /// committed first, then each parameter tile gets an update task.
    pub fn step(&mut self, rt: &mut Runtime) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count;
        let kind = self.kind;
        for slot in &self.slots {
            for &h in slot.grad.tiles() {
                rt.reduction_commit(h)?;
            }
            for (i, _, _, hw) in slot.value.iter_tiles() {
                let hg = slot.grad.handle_linear(i);
                let cost = 8 * hw.elems() as u64;
                match (&slot.moments, kind) {
                    (Moments::Sgd { m }, OptimizerKind::SgdMomentum { lr, momentum }) => {
                        let hm = m.handle_linear(i);
                        rt.submit(
                            "sgd_update",
                            cost,
                            vec![
                                (hw, AccessMode::ReadWrite),
                                (hg, AccessMode::Read),
                                (hm, AccessMode::ReadWrite),
                            ],
                            move |ctx| {
                                let g = ctx.read(1);
                                let w = ctx.write(0);
                                let mv = ctx.write(2);
                                kernels::sgd_momentum_update(w, g, mv, lr, momentum)
                            },
                        )?;
                    }
                    (Moments::Adam { m, v }, OptimizerKind::Adam { lr, beta1, beta2, eps }) => {
                        let hm = m.handle_linear(i);
                        let hv = v.handle_linear(i);
                        rt.submit(
                            "adam_update",
                            cost,
                            vec![
                                (hw, AccessMode::ReadWrite),
                                (hg, AccessMode::Read),
                                (hm, AccessMode::ReadWrite),
                                (hv, AccessMode::ReadWrite),
                            ],
                            move |ctx| {
                                let g = ctx.read(1);
                                let w = ctx.write(0);
                                let mv = ctx.write(2);
                                let vv = ctx.write(3);
                                kernels::adam_update(w, g, mv, vv, lr, beta1, beta2, eps, 0.0, t)
                            },
                        )?;
                    }
                    (
                        Moments::Adam { m, v },
                        OptimizerKind::AdamW {
                            lr,
                            beta1,
                            beta2,
                            eps,
                            weight_decay,
                        },
                    ) => {
                        let hm = m.handle_linear(i);
                        let hv = v.handle_linear(i);
                        rt.submit(
                            "adamw_update",
                            cost,
                            vec![
                                (hw, AccessMode::ReadWrite),
                                (hg, AccessMode::Read),
                                (hm, AccessMode::ReadWrite),
                                (hv, AccessMode::ReadWrite),
                            ],
                            move |ctx| {
                                let g = ctx.read(1);
                                let w = ctx.write(0);
                                let mv = ctx.write(2);
                                let vv = ctx.write(3);
                                kernels::adam_update(
                                    w,
                                    g,
                                    mv,
                                    vv,
                                    lr,
                                    beta1,
                                    beta2,
                                    eps,
                                    weight_decay,
                                    t,
                                )
                            },
                        )?;
                    }
                    _ => unreachable!("moment layout follows the optimizer kind"),
                }
            }
        }
        Ok(())
    }
}
