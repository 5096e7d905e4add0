//! Finite-difference checks of the four training losses with respect to
//! every parameter of a small random model.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffengine::fdcheck::{check_gradient, GradCheck};
use crate::diffengine::{value_and_grad, Activation, DiffError, Tape, Var};
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::neuralfield::{Conditioning, ModelConfig, Normalization, VelocityFieldModel};
use crate::physics::{loss_boundary, loss_div, loss_motion, loss_ns, BoundaryProbe, FluidRegion, Query, SceneFlowSample, VelocityField};
use crate::synthlab::{SynthConfig, SyntheticScene};

#[derive(Clone, Debug, PartialEq)]
pub struct LossCheck {
    pub loss: &'static str,
    pub value: f64,
    pub check: GradCheck,
}

/// Model used by the checks: smooth activations everywhere, under a
/// thousand parameters.
pub fn small_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        hidden: alloc::vec![8, 8],
        frequencies: 2,
        encoder_channels: alloc::vec![2, 2],
        input_pool: 2,
        force_hidden: 4,
        use_hints: false,
        activation: Activation::Tanh,
        encoder_activation: Activation::Tanh,
        seed,
        ..ModelConfig::default()
    }
}

/// Fluid is the half space `x < limit`.
struct HalfSpace {
    limit: f64,
}

impl FluidRegion for HalfSpace {
    fn contains(&self, p: Vec3) -> bool {
        p[0] < self.limit
    }
}

fn to_diff(e: Error) -> DiffError {
    match e {
        Error::Diff(d) => d,
        other => DiffError::Structural(alloc::format!("{other}")),
    }
}

/// Runs the checks on a 16×16 synthetic river. Returns one entry per loss
/// (motion, NS, divergence, boundary).
pub fn check_losses(seed: u64) -> Result<Vec<LossCheck>> {
    let scene = SyntheticScene::generate(&SynthConfig {
        width: 16,
        height: 16,
        rock: true,
        rock_radius: 1.5,
        frames: 10,
        ..SynthConfig::default()
    })?;
    let norm = Normalization::new(scene.camera.clone(), scene.horizon())?;
    let mut model = VelocityFieldModel::new(small_model_config(seed), norm)?;
    let input = scene.conditioning(None).tensor(model.config())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c);
    let pts = scene.sample_surface(6, &mut rng)?;
    let queries: Vec<Query> = pts
        .iter()
        .map(|&p| Query::new(p, rng.random_range(0.0..scene.horizon())))
        .collect();
    let flows: Vec<SceneFlowSample> = queries
        .iter()
        .map(|q| SceneFlowSample {
            position: q.position,
            time: q.time,
            velocity: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0],
        })
        .collect();
    let horizon = 50.0;
    // put x = limit midway between the middle two probe end points, so
    // half of the probes leave and none sits on the indicator jump
    let mut ends: Vec<f64> = {
        let mut tape = Tape::new();
        let mut tm = model.bind_tape(&mut tape, Conditioning::Input(&input))?;
        let u = tm.velocity(&mut tape, &queries)?;
        let uv = tape.value(u).data();
        queries.iter().enumerate().map(|(i, q)| q.position[0] + horizon * uv[i * 3]).collect()
    };
    ends.sort_by(f64::total_cmp);
    let mid = ends.len() / 2;
    let region = HalfSpace {
        limit: 0.5 * (ends[mid - 1] + ends[mid]),
    };
    let probes: Vec<BoundaryProbe> = queries
        .iter()
        .map(|q| BoundaryProbe {
            position: q.position,
            time: q.time,
            stays_inside_gt: true,
        })
        .collect();

    type Build<'a> = &'a dyn Fn(&VelocityFieldModel, &mut Tape) -> Result<Var>;
    let motion = |m: &VelocityFieldModel, t: &mut Tape| {
        let mut tm = m.bind_tape(t, Conditioning::Input(&input))?;
        loss_motion(&mut tm, t, &flows)
    };
    let ns = |m: &VelocityFieldModel, t: &mut Tape| {
        let mut tm = m.bind_tape(t, Conditioning::Input(&input))?;
        loss_ns(&mut tm, t, &queries)
    };
    let div = |m: &VelocityFieldModel, t: &mut Tape| {
        let mut tm = m.bind_tape(t, Conditioning::Input(&input))?;
        loss_div(&mut tm, t, &queries)
    };
    let boundary = |m: &VelocityFieldModel, t: &mut Tape| {
        let mut tm = m.bind_tape(t, Conditioning::Input(&input))?;
        loss_boundary(&mut tm, t, &probes, &region, horizon)
    };
    let cases: [(&'static str, Build); 4] = [("motion", &motion), ("ns", &ns), ("div", &div), ("boundary", &boundary)];

    let mut out = Vec::with_capacity(cases.len());
    for (name, build) in cases {
        let mut params = model.params.clone();
        let value = value_and_grad(&mut params, |tape, _| build(&model, tape).map_err(to_diff))?;
        if !(value > 0.0) {
            return Err(Error::Domain(alloc::format!("{name} loss is zero at the check point")));
        }
        let analytic = params.flat_grads();
        let mut p = model.params.clone();
        let saved = model.params.clone();
        let check = check_gradient(&mut p, &analytic, None, |p| {
            model.params = p.clone();
            let mut tape = Tape::new();
            let l = build(&model, &mut tape).map_err(to_diff)?;
            Ok(tape.value(l).item())
        });
        model.params = saved;
        out.push(LossCheck {
            loss: name,
            value,
            check: check?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_model_is_small() {
        let scene = SyntheticScene::generate(&SynthConfig {
            width: 16,
            height: 16,
            ..SynthConfig::default()
        })
        .unwrap();
        let m = VelocityFieldModel::new(small_model_config(0), Normalization::new(scene.camera, 2.0).unwrap()).unwrap();
        assert!(m.params.numel() <= 1000, "{}", m.params.numel());
    }

    #[test]
    fn all_losses_match_finite_differences() {
        let checks = check_losses(3).unwrap();
        assert_eq!(checks.len(), 4);
        for c in checks {
            assert!(c.check.max_rel_error < 1e-4, "{c:?}");
            assert!(c.check.checked > 500);
        }
    }
}
